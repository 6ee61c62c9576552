//! Experiment reports: a schema-versioned JSON document with the resolved
//! configuration, seed, metric map, and per-example records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub command: String,
    pub seed: u64,
    pub deterministic: bool,
    /// Every configuration value the run actually used, defaults included.
    pub config: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    pub per_example: Vec<ExampleRecord>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub values: BTreeMap<String, f64>,
}

impl Report {
    pub fn new(command: &str, seed: u64, deterministic: bool) -> Report {
        Report {
            schema: REPORT_SCHEMA,
            command: command.to_string(),
            seed,
            deterministic,
            config: BTreeMap::new(),
            metrics: BTreeMap::new(),
            per_example: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }

    /// The report with its wall-clock field zeroed: two runs of the same
    /// seeded command compare equal on exactly this form.
    pub fn comparable_json(&self) -> String {
        let mut clone = self.clone();
        clone.wall_clock_secs = 0.0;
        clone.to_json()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comparable_form_drops_only_wall_clock() {
        let mut a = Report::new("eval-nav", 3, true);
        a.metric("tc", 0.5);
        let mut b = a.clone();
        a.wall_clock_secs = 1.25;
        b.wall_clock_secs = 98.0;
        assert_ne!(a.to_json(), b.to_json());
        assert_eq!(a.comparable_json(), b.comparable_json());
        let parsed: Report = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(parsed.metrics["tc"], 0.5);
    }
}
