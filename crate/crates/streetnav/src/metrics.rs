//! Evaluation metrics for navigation (TC, SPD, SED) and location
//! prediction (accuracy at a pixel radius, per-sentence consistency, mean
//! distance).
//!
//! Navigation metrics operate on panorama sequences: turning in place does
//! not move the agent, so consecutive duplicate panoramas are collapsed
//! before lengths and edit distances are taken.

use thiserror::Error;

use crate::graph::{Execution, GraphError, NodeId, PanoGraph};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("record {index}: final panorama cannot reach the goal")]
    UnreachableGoal { index: usize },
    #[error("no records")]
    Empty,
}

/// One navigation evaluation record: what the agent did, what it should
/// have done, and where it was supposed to end up.
#[derive(Debug, Clone)]
pub struct NavEvalRecord {
    pub predicted: Execution,
    pub reference: Execution,
    pub goal: NodeId,
}

/// One location-prediction record. Coordinates may be in image pixels or in
/// feature-grid cells as long as predicted, gold, and the radius agree on
/// the scale.
#[derive(Debug, Clone)]
pub struct SdrEvalRecord {
    pub predicted: (f64, f64),
    pub gold: (f64, f64),
    pub sentence_id: u64,
}

/// Navigation record reduced to panorama sequences, for callers that have
/// predictions as node lists rather than full executions. Sequences should
/// already have consecutive duplicates collapsed.
#[derive(Debug, Clone)]
pub struct SeqEvalRecord {
    pub predicted: Vec<NodeId>,
    pub reference: Vec<NodeId>,
    pub goal: NodeId,
}

impl SeqEvalRecord {
    fn final_pano(&self) -> Result<NodeId, MetricsError> {
        self.predicted.last().copied().ok_or(MetricsError::Empty)
    }
}

/// Task-completion rate over sequence records.
pub fn tc_rate_seq(records: &[SeqEvalRecord], graph: &PanoGraph) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut hits = 0usize;
    for r in records {
        if task_completion(r.final_pano()?, r.goal, graph)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Mean hops from the final predicted panorama to the goal, over sequence
/// records.
pub fn spd_seq(records: &[SeqEvalRecord], graph: &PanoGraph) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut total = 0usize;
    for (i, r) in records.iter().enumerate() {
        total += graph
            .shortest_path_hops(r.final_pano()?, r.goal)?
            .ok_or(MetricsError::UnreachableGoal { index: i })?;
    }
    Ok(total as f64 / records.len() as f64)
}

/// Success weighted by edit distance over sequence records.
pub fn sed_seq(records: &[SeqEvalRecord], graph: &PanoGraph) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut total = 0.0;
    for r in records {
        if !task_completion(r.final_pano()?, r.goal, graph)? {
            continue;
        }
        let lev = levenshtein(&r.reference, &r.predicted);
        let denom = r.reference.len().max(r.predicted.len()) as f64;
        total += 1.0 - lev as f64 / denom;
    }
    Ok(total / records.len() as f64)
}

/// Reduces execution records to collapsed panorama sequences.
pub fn to_seq_records(records: &[NavEvalRecord]) -> Vec<SeqEvalRecord> {
    records
        .iter()
        .map(|r| SeqEvalRecord {
            predicted: r.predicted.collapsed_panos(),
            reference: r.reference.collapsed_panos(),
            goal: r.goal,
        })
        .collect()
}

/// Unit-cost Levenshtein edit distance between two node sequences.
pub fn levenshtein(a: &[NodeId], b: &[NodeId]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = diag + usize::from(ca != cb);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[b.len()]
}

/// True iff the final panorama is the goal or one of its graph neighbors.
pub fn task_completion(
    final_pano: NodeId,
    goal: NodeId,
    graph: &PanoGraph,
) -> Result<bool, MetricsError> {
    if final_pano == goal {
        if !graph.contains(goal) {
            return Err(GraphError::UnknownNode(goal).into());
        }
        return Ok(true);
    }
    Ok(graph.adjacent(final_pano, goal)?)
}

/// Fraction of records that complete the task.
pub fn tc_rate(records: &[NavEvalRecord], graph: &PanoGraph) -> Result<f64, MetricsError> {
    tc_rate_seq(&to_seq_records(records), graph)
}

/// Mean graph distance in hops from the final predicted panorama to the
/// goal. Turning actions and the final heading are ignored.
pub fn spd(records: &[NavEvalRecord], graph: &PanoGraph) -> Result<f64, MetricsError> {
    spd_seq(&to_seq_records(records), graph)
}

/// Success weighted by normalized inverse edit distance over panorama
/// sequences: `(1/N) Σ S_i (1 − lev(ref, pred) / max(|ref|, |pred|))`.
///
/// The success indicator uses the same neighbor-tolerant completion test as
/// [`task_completion`]. Sequences are collapsed so turns in place do not
/// count toward lengths or edits.
pub fn sed(records: &[NavEvalRecord], graph: &PanoGraph) -> Result<f64, MetricsError> {
    sed_seq(&to_seq_records(records), graph)
}

fn euclidean(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Fraction of records whose prediction lies within `radius` of the gold
/// location. A distance of exactly `radius` counts as correct.
pub fn sdr_accuracy(records: &[SdrEvalRecord], radius: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|r| euclidean(r.predicted, r.gold) <= radius)
        .count();
    hits as f64 / records.len() as f64
}

/// Fraction of distinct sentences all of whose records are correct at the
/// radius.
pub fn sdr_consistency(records: &[SdrEvalRecord], radius: f64) -> f64 {
    use std::collections::BTreeMap;
    if records.is_empty() {
        return 0.0;
    }
    let mut per_sentence: BTreeMap<u64, bool> = BTreeMap::new();
    for r in records {
        let ok = euclidean(r.predicted, r.gold) <= radius;
        per_sentence
            .entry(r.sentence_id)
            .and_modify(|all| *all &= ok)
            .or_insert(ok);
    }
    let consistent = per_sentence.values().filter(|&&v| v).count();
    consistent as f64 / per_sentence.len() as f64
}

/// Arithmetic mean of euclidean prediction errors.
pub fn sdr_mean_distance(records: &[SdrEvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records
        .iter()
        .map(|r| euclidean(r.predicted, r.gold))
        .sum::<f64>()
        / records.len() as f64
}

/// Maps an image-pixel slack radius onto the feature grid by dividing by
/// the image-to-grid scale factor.
pub fn grid_radius(image_radius: f64, scale: f64) -> f64 {
    image_radius / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{load_graph, Action, State};

    fn ids(graph: &PanoGraph, names: &[&str]) -> Vec<NodeId> {
        names.iter().map(|n| graph.node(n).unwrap()).collect()
    }

    fn line_graph(n: usize) -> PanoGraph {
        let nodes = (0..n).map(|i| format!("p{i}")).collect::<Vec<_>>().join("\n");
        let mut links = String::new();
        for i in 0..n - 1 {
            links.push_str(&format!("p{i}\t90.0\tp{}\n", i + 1));
            links.push_str(&format!("p{}\t270.0\tp{i}\n", i + 1));
        }
        load_graph(&nodes, &links).unwrap()
    }

    /// Walks forward `hops` nodes from p0 and stops.
    fn forward_walk(graph: &PanoGraph, hops: usize) -> Execution {
        let mut s = State {
            pano: graph.node("p0").unwrap(),
            heading: 90.0,
        };
        let mut steps = Vec::new();
        for _ in 0..hops {
            steps.push((s, Action::Forward));
            s = graph.transition(s, Action::Forward).unwrap();
        }
        steps.push((s, Action::Stop));
        Execution::new(graph, steps).unwrap()
    }

    #[test]
    fn levenshtein_examples() {
        let g = line_graph(6);
        let abc = ids(&g, &["p0", "p1", "p2"]);
        assert_eq!(levenshtein(&abc, &abc), 0);
        let abdc = ids(&g, &["p0", "p1", "p3", "p2"]);
        assert_eq!(levenshtein(&abc, &abdc), 1);
        assert_eq!(levenshtein(&[], &abc[..2]), 2);
    }

    #[test]
    fn task_completion_accepts_goal_and_neighbors() {
        let g = line_graph(5);
        let p = |n: &str| g.node(n).unwrap();
        assert!(task_completion(p("p2"), p("p2"), &g).unwrap());
        assert!(task_completion(p("p1"), p("p2"), &g).unwrap());
        assert!(!task_completion(p("p0"), p("p2"), &g).unwrap());
    }

    #[test]
    fn spd_is_mean_hops() {
        let g = line_graph(7);
        let goal = g.node("p6").unwrap();
        let records = vec![
            NavEvalRecord {
                predicted: forward_walk(&g, 4), // stops at p4, 2 hops short
                reference: forward_walk(&g, 6),
                goal,
            },
            NavEvalRecord {
                predicted: forward_walk(&g, 2), // stops at p2, 4 hops short
                reference: forward_walk(&g, 6),
                goal,
            },
        ];
        assert_eq!(spd(&records, &g).unwrap(), 3.0);

        let exact = vec![NavEvalRecord {
            predicted: forward_walk(&g, 6),
            reference: forward_walk(&g, 6),
            goal,
        }];
        assert_eq!(spd(&exact, &g).unwrap(), 0.0);
    }

    #[test]
    fn sed_hand_case() {
        // ref [p1,p2,p3,p4] vs pred [p1,p2,p5,p3,p4], success: 1 - 1/5 = 0.8.
        // Build on a graph where p5 branches between p2 and p3.
        let nodes = "p1\np2\np3\np4\np5";
        let links = "\
p1\t90.0\tp2\np2\t270.0\tp1\n\
p2\t90.0\tp3\np3\t270.0\tp2\n\
p3\t90.0\tp4\np4\t270.0\tp3\n\
p2\t45.0\tp5\np5\t225.0\tp2\n\
p5\t90.0\tp3\np3\t0.0\tp5\n";
        let g = load_graph(nodes, links).unwrap();

        let walk = |actions: &[Action]| {
            let mut s = State {
                pano: g.node("p1").unwrap(),
                heading: 90.0,
            };
            let mut steps = Vec::new();
            for &a in actions {
                steps.push((s, a));
                s = g.transition(s, a).unwrap();
            }
            steps.push((s, Action::Stop));
            Execution::new(&g, steps).unwrap()
        };

        use Action::{Forward as F, Left as L};
        // p1 -> p2 -> p3 -> p4 straight down the line.
        let reference = walk(&[F, F, F]);
        // p1 -> p2, turn onto the 45° edge, detour through p5, rejoin at p3.
        let predicted = walk(&[F, L, F, F, F]);
        assert_eq!(
            predicted
                .collapsed_panos()
                .iter()
                .map(|&n| g.name(n))
                .collect::<Vec<_>>(),
            vec!["p1", "p2", "p5", "p3", "p4"]
        );
        let goal = g.node("p4").unwrap();
        let records = vec![NavEvalRecord {
            predicted,
            reference: reference.clone(),
            goal,
        }];
        let score = sed(&records, &g).unwrap();
        assert!((score - 0.8).abs() < 1e-12, "sed = {score}");

        // Identical prediction scores 1.0.
        let perfect = vec![NavEvalRecord {
            predicted: reference.clone(),
            reference: reference.clone(),
            goal,
        }];
        assert_eq!(sed(&perfect, &g).unwrap(), 1.0);

        // Failure scores 0 regardless of overlap.
        let failed = vec![NavEvalRecord {
            predicted: walk(&[F]),
            reference,
            goal,
        }];
        assert_eq!(sed(&failed, &g).unwrap(), 0.0);
    }

    #[test]
    fn sdr_accuracy_threshold_semantics() {
        let mk = |d: f64| SdrEvalRecord {
            predicted: (d, 0.0),
            gold: (0.0, 0.0),
            sentence_id: 0,
        };
        assert_eq!(sdr_accuracy(&[mk(0.0)], 40.0), 1.0);
        assert_eq!(sdr_accuracy(&[mk(81.0)], 80.0), 0.0);
        assert_eq!(sdr_accuracy(&[mk(81.0)], 120.0), 1.0);
        // Exactly at the radius counts.
        assert_eq!(sdr_accuracy(&[mk(80.0)], 80.0), 1.0);
    }

    #[test]
    fn grid_radius_scales_threshold() {
        assert_eq!(grid_radius(80.0, 8.0), 10.0);
    }

    #[test]
    fn consistency_is_all_or_nothing_per_sentence() {
        let rec = |sid: u64, d: f64| SdrEvalRecord {
            predicted: (d, 0.0),
            gold: (0.0, 0.0),
            sentence_id: sid,
        };
        // Sentence 1: 2 of 3 correct -> counts 0. Sentence 2: all correct.
        let records = vec![rec(1, 0.0), rec(1, 5.0), rec(1, 99.0), rec(2, 1.0), rec(2, 2.0)];
        assert_eq!(sdr_consistency(&records, 10.0), 0.5);
        assert_eq!(sdr_accuracy(&records, 10.0), 0.8);
    }

    #[test]
    fn mean_distance_examples() {
        let rec = |dx: f64, dy: f64| SdrEvalRecord {
            predicted: (dx, dy),
            gold: (0.0, 0.0),
            sentence_id: 0,
        };
        assert_eq!(sdr_mean_distance(&[rec(0.0, 0.0)]), 0.0);
        let records = vec![rec(3.0, 0.0), rec(0.0, 4.0), rec(3.0, 4.0)];
        assert_eq!(sdr_mean_distance(&records), 4.0);
    }
}
