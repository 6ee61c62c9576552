//! Experiment configuration: one human-readable key=value file, with the
//! published defaults baked in and every resolved value echoed into the
//! report for provenance.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::str::FromStr;

use super::HarnessError;

/// Environment variable naming the default data root.
pub const DATA_ENV: &str = "STREETNAV_DATA";

/// Every key a config file may contain. Anything else is rejected.
pub const KNOWN_KEYS: &[&str] = &[
    // shared
    "data",
    "seed",
    "model",
    "split",
    "checkpoint",
    "checkpoint_out",
    "lr",
    "max_epochs",
    "patience",
    "radii",
    // location task
    "sigma",
    "scale",
    "levels",
    "mlp_hidden",
    "embed_dim",
    "text_hidden",
    "dropout",
    "early_stop_radius_px",
    "val_fraction",
    // navigation task
    "horizon_train",
    "horizon_eval",
    "mode",
    "ablation",
    "async",
    "workers",
    "word_dim",
    "lstm_hidden",
    "obs_repr",
    "action_embed",
    "time_embed",
    "gated_repr",
    "conv",
    "obs_window",
    // full task
    "nav_model",
    "sdr_model",
    "nav_checkpoint",
    "sdr_checkpoint",
    "radius",
    // metrics command
    "predictions",
    // world generation
    "grid_rows",
    "grid_cols",
    "diagonal_prob",
    "feature_channels",
    "feature_height",
    "feature_width",
    "image_scale",
    "marker_classes",
    "vocab_size",
    "sdr_train",
    "sdr_dev",
    "sdr_group_size",
    "nav_train",
    "nav_dev",
    "nav_route_min",
    "nav_route_max",
    "noise",
    "full_task",
];

/// Parsed key=value settings plus a record of every lookup actually made,
/// including defaulted ones.
#[derive(Debug, Default)]
pub struct ConfigMap {
    raw: BTreeMap<String, String>,
    resolved: RefCell<BTreeMap<String, String>>,
}

impl ConfigMap {
    pub fn empty() -> ConfigMap {
        ConfigMap::default()
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys and
    /// malformed lines are diagnostics, never accepted silently.
    pub fn parse(text: &str) -> Result<ConfigMap, HarnessError> {
        let mut raw = BTreeMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = match raw_line.find('#') {
                Some(at) => &raw_line[..at],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(HarnessError::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    i + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(HarnessError::Config(format!(
                    "line {}: unknown key `{key}`",
                    i + 1
                )));
            }
            if raw.insert(key.clone(), value).is_some() {
                return Err(HarnessError::Config(format!(
                    "line {}: duplicate key `{key}`",
                    i + 1
                )));
            }
        }
        Ok(ConfigMap {
            raw,
            resolved: RefCell::new(BTreeMap::new()),
        })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.raw.insert(key.to_string(), value.to_string());
    }

    fn record(&self, key: &str, value: &str) {
        self.resolved
            .borrow_mut()
            .insert(key.to_string(), value.to_string());
    }

    /// Everything read so far, defaults included: the provenance echo for
    /// reports.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        self.resolved.borrow().clone()
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        let v = self
            .raw
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string());
        self.record(key, &v);
        v
    }

    pub fn get_opt_str(&self, key: &str) -> Option<String> {
        let v = self.raw.get(key).cloned();
        if let Some(v) = &v {
            self.record(key, v);
        }
        v
    }

    pub fn get<T>(&self, key: &str, default: T) -> Result<T, HarnessError>
    where
        T: FromStr + ToString,
    {
        match self.raw.get(key) {
            Some(v) => {
                let parsed = v.parse::<T>().map_err(|_| {
                    HarnessError::Config(format!("key `{key}`: cannot parse `{v}`"))
                })?;
                self.record(key, v);
                Ok(parsed)
            }
            None => {
                self.record(key, &default.to_string());
                Ok(default)
            }
        }
    }

    pub fn get_opt<T>(&self, key: &str) -> Result<Option<T>, HarnessError>
    where
        T: FromStr,
    {
        match self.raw.get(key) {
            Some(v) => {
                let parsed = v.parse::<T>().map_err(|_| {
                    HarnessError::Config(format!("key `{key}`: cannot parse `{v}`"))
                })?;
                self.record(key, v);
                Ok(Some(parsed))
            }
            None => Ok(None),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool, HarnessError> {
        let v = self.get_str(key, if default { "true" } else { "false" });
        match v.as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(HarnessError::Config(format!(
                "key `{key}`: expected a boolean, got `{other}`"
            ))),
        }
    }

    /// Comma-separated f64 list.
    pub fn get_f64_list(&self, key: &str, default: &str) -> Result<Vec<f64>, HarnessError> {
        let v = self.get_str(key, default);
        v.split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| {
                    HarnessError::Config(format!("key `{key}`: cannot parse `{s}` as a number"))
                })
            })
            .collect()
    }
}

/// Conv-stack syntax: `out@kernel s stride` entries joined by commas, e.g.
/// `32@8s4,64@4s4`.
pub fn parse_conv_stack(text: &str) -> Result<Vec<crate::nav::ConvSpec>, HarnessError> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        let err = || {
            HarnessError::Config(format!(
                "conv spec `{part}`: expected `channels@kernel s stride` like `32@8s4`"
            ))
        };
        let (channels, rest) = part.split_once('@').ok_or_else(err)?;
        let (kernel, stride) = rest.split_once('s').ok_or_else(err)?;
        out.push(crate::nav::ConvSpec {
            out_channels: channels.trim().parse().map_err(|_| err())?,
            kernel: kernel.trim().parse().map_err(|_| err())?,
            stride: stride.trim().parse().map_err(|_| err())?,
        });
    }
    if out.is_empty() {
        return Err(HarnessError::Config("conv spec: empty".into()));
    }
    Ok(out)
}
