//! Route sampling, gap repair, and demonstration synthesis.
//!
//! Routes are panorama sequences whose consecutive entries are connected by
//! an edge. Long sampled paths are cut into route segments with lengths
//! drawn uniformly from a configured range; the trailing remainder is kept
//! even when shorter. Routes arriving with gaps (non-adjacent consecutive
//! panoramas) are repaired by splicing in shortest-path panoramas when the
//! gap count is small enough, and rejected otherwise.

use rand::Rng;
use thiserror::Error;

use crate::graph::{Action, Execution, GraphError, NodeId, PanoGraph, State};

/// Default route-segment length bounds, in panoramas.
pub const DEFAULT_MIN_SEGMENT: usize = 35;
pub const DEFAULT_MAX_SEGMENT: usize = 45;

/// Default gap budget: routes with this many gaps or more are rejected.
pub const DEFAULT_MAX_GAPS: usize = 3;

const SAMPLE_RETRIES: usize = 32;

#[derive(Debug, Error)]
pub enum RouteError {
    #[error("route must contain at least 2 panoramas, got {0}")]
    TooShort(usize),
    #[error("route step {step}: `{from}` and `{to}` are not adjacent")]
    NotAdjacent {
        step: usize,
        from: String,
        to: String,
    },
    #[error("invalid segment bounds: min {min} > max {max} (and min must be ≥ 2)")]
    BadBounds { min: usize, max: usize },
    #[error("could not sample a usable panorama pair after {0} attempts")]
    SamplingExhausted(usize),
    #[error("start heading {heading} is not on an edge of `{pano}`")]
    BadStartHeading { pano: String, heading: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Why a gappy route was rejected instead of repaired.
#[derive(Debug, Error)]
pub enum GapRejection {
    #[error("{found} gaps, at or above the budget of {max}")]
    TooManyGaps { found: usize, max: usize },
    #[error("gap between `{from}` and `{to}` cannot be bridged")]
    Unbridgeable { from: String, to: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A panorama sequence with consecutive entries connected by edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    panos: Vec<NodeId>,
}

impl Route {
    pub fn new(graph: &PanoGraph, panos: Vec<NodeId>) -> Result<Route, RouteError> {
        if panos.len() < 2 {
            return Err(RouteError::TooShort(panos.len()));
        }
        for (i, pair) in panos.windows(2).enumerate() {
            if !graph.adjacent(pair[0], pair[1])? {
                return Err(RouteError::NotAdjacent {
                    step: i,
                    from: graph.name(pair[0]).to_string(),
                    to: graph.name(pair[1]).to_string(),
                });
            }
        }
        Ok(Route { panos })
    }

    pub fn panos(&self) -> &[NodeId] {
        &self.panos
    }

    pub fn len(&self) -> usize {
        self.panos.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn start(&self) -> NodeId {
        self.panos[0]
    }

    pub fn goal(&self) -> NodeId {
        self.panos[self.panos.len() - 1]
    }
}

/// Draws segment lengths uniformly from `[min_len, max_len]` until `total`
/// panoramas are covered. The final remainder is kept even when short; a
/// remainder of a single panorama is absorbed into the previous segment
/// because a one-panorama route is not a route.
pub fn segment_lengths(
    total: usize,
    min_len: usize,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, RouteError> {
    if min_len < 2 || min_len > max_len {
        return Err(RouteError::BadBounds {
            min: min_len,
            max: max_len,
        });
    }
    if total < 2 {
        return Err(RouteError::TooShort(total));
    }
    let mut lengths = Vec::new();
    let mut remaining = total;
    while remaining > 0 {
        if remaining <= max_len {
            if remaining == 1 {
                *lengths.last_mut().expect("loop placed a segment first") += 1;
            } else {
                lengths.push(remaining);
            }
            break;
        }
        let draw = rng.gen_range(min_len..=max_len);
        if remaining - draw == 1 {
            // Avoid stranding a single panorama in the suffix.
            lengths.push(draw + 1);
            remaining -= draw + 1;
        } else {
            lengths.push(draw);
            remaining -= draw;
        }
    }
    Ok(lengths)
}

/// Samples two panoramas, takes a shortest path between them, and cuts it
/// into route segments with lengths drawn from `[min_len, max_len]`.
/// Unreachable pairs are resampled up to a bounded retry count.
pub fn sample_routes(
    graph: &PanoGraph,
    rng: &mut impl Rng,
    min_len: usize,
    max_len: usize,
) -> Result<Vec<Route>, RouteError> {
    if min_len < 2 || min_len > max_len {
        return Err(RouteError::BadBounds {
            min: min_len,
            max: max_len,
        });
    }
    let n = graph.node_count() as u32;
    for _ in 0..SAMPLE_RETRIES {
        let a = NodeId(rng.gen_range(0..n));
        let b = NodeId(rng.gen_range(0..n));
        if a == b {
            continue;
        }
        let Some(path) = graph.bfs_path(a, b)? else {
            continue;
        };
        if path.len() < 2 {
            continue;
        }
        let lengths = segment_lengths(path.len(), min_len, max_len, rng)?;
        let mut routes = Vec::with_capacity(lengths.len());
        let mut at = 0usize;
        for len in lengths {
            let segment = path[at..at + len].to_vec();
            routes.push(Route::new(graph, segment)?);
            at += len;
        }
        return Ok(routes);
    }
    Err(RouteError::SamplingExhausted(SAMPLE_RETRIES))
}

/// Counts positions where consecutive panoramas are not adjacent.
pub fn count_gaps(graph: &PanoGraph, panos: &[NodeId]) -> Result<usize, GraphError> {
    let mut gaps = 0;
    for pair in panos.windows(2) {
        if !graph.adjacent(pair[0], pair[1])? {
            gaps += 1;
        }
    }
    Ok(gaps)
}

/// Repairs a gappy panorama sequence by splicing shortest-path panoramas
/// into each gap, provided the gap count is below `max_gaps`.
pub fn repair_gaps(
    panos: &[NodeId],
    graph: &PanoGraph,
    max_gaps: usize,
) -> Result<Route, GapRejection> {
    let gaps = count_gaps(graph, panos)?;
    if gaps >= max_gaps {
        return Err(GapRejection::TooManyGaps {
            found: gaps,
            max: max_gaps,
        });
    }
    let mut repaired = vec![panos[0]];
    for pair in panos.windows(2) {
        let (from, to) = (pair[0], pair[1]);
        if graph.adjacent(from, to)? {
            repaired.push(to);
            continue;
        }
        let path = graph
            .bfs_path(from, to)?
            .ok_or_else(|| GapRejection::Unbridgeable {
                from: graph.name(from).to_string(),
                to: graph.name(to).to_string(),
            })?;
        repaired.extend_from_slice(&path[1..]);
    }
    Route::new(graph, repaired).map_err(|e| match e {
        RouteError::Graph(g) => GapRejection::Graph(g),
        other => unreachable!("splice produced an invalid route: {other}"),
    })
}

/// Rotational move count from the heading at `from_pos` to the heading at
/// `to_pos` on a node with `degree` edges, in each direction.
fn turn_counts(from_pos: usize, to_pos: usize, degree: usize) -> (usize, usize) {
    let right = (to_pos + degree - from_pos) % degree;
    let left = (from_pos + degree - to_pos) % degree;
    (left, right)
}

/// Emits the minimal action sequence realizing a route: per hop, the fewer
/// of left-turns versus right-turns (ties turn right), then `Forward`; a
/// final `Stop`. The returned execution replays to exactly the route's
/// panorama sequence.
pub fn demonstration_from_route(
    graph: &PanoGraph,
    route: &Route,
    start_heading: f64,
) -> Result<Execution, RouteError> {
    let mut state = State {
        pano: route.start(),
        heading: start_heading,
    };
    if !graph.is_valid_state(state) {
        return Err(RouteError::BadStartHeading {
            pano: graph.name(state.pano).to_string(),
            heading: start_heading,
        });
    }
    let mut steps: Vec<(State, Action)> = Vec::new();
    for hop in route.panos().windows(2) {
        let next = hop[1];
        let edges = graph.half_edges(state.pano)?;
        let degree = edges.len();
        let cur_pos = edges
            .iter()
            .position(|e| e.heading == state.heading)
            .expect("state validated");
        // Candidate half-edges toward the next panorama; multiple parallel
        // edges pick the one needing the fewest turns.
        let mut best: Option<(usize, usize)> = None; // (turns, pos)
        for (pos, e) in edges.iter().enumerate() {
            if e.target != next {
                continue;
            }
            let (left, right) = turn_counts(cur_pos, pos, degree);
            let turns = left.min(right);
            let better = match best {
                None => true,
                Some((t, p)) => turns < t || (turns == t && edges[pos].heading < edges[p].heading),
            };
            if better {
                best = Some((turns, pos));
            }
        }
        let Some((turns, pos)) = best else {
            return Err(RouteError::NotAdjacent {
                step: steps.len(),
                from: graph.name(state.pano).to_string(),
                to: graph.name(next).to_string(),
            });
        };
        let (left_turns, right_turns) = turn_counts(cur_pos, pos, degree);
        let turn_action = if left_turns < right_turns {
            Action::Left
        } else {
            Action::Right
        };
        for _ in 0..turns {
            steps.push((state, turn_action));
            state = graph.transition(state, turn_action)?;
        }
        steps.push((state, Action::Forward));
        state = graph.transition(state, Action::Forward)?;
        debug_assert_eq!(state.pano, next);
    }
    steps.push((state, Action::Stop));
    Execution::new(graph, steps).map_err(|e| match e {
        crate::graph::ExecutionError::Graph(g) => RouteError::Graph(g),
        other => unreachable!("construction violated execution invariants: {other}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::load_graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
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

    #[test]
    fn segment_lengths_partition_and_stay_in_bounds() {
        for seed in 0..200u64 {
            let mut r = rng(seed);
            let total = r.gen_range(2..400usize);
            let lengths = segment_lengths(total, 35, 45, &mut r).unwrap();
            assert_eq!(lengths.iter().sum::<usize>(), total);
            for (i, &len) in lengths.iter().enumerate() {
                assert!(len >= 2, "segment of length {len}");
                if i + 1 < lengths.len() {
                    assert!((35..=45).contains(&len), "interior segment {len}");
                }
            }
        }
    }

    #[test]
    fn equal_bounds_split_exactly() {
        let mut r = rng(7);
        let lengths = segment_lengths(70, 35, 35, &mut r).unwrap();
        assert_eq!(lengths, vec![35, 35]);
    }

    #[test]
    fn sample_routes_covers_a_path_on_a_line() {
        let g = line_graph(120);
        let mut r = rng(5);
        let routes = sample_routes(&g, &mut r, 35, 45).unwrap();
        assert!(!routes.is_empty());
        // Segments are consecutive chunks: concatenation is a valid path.
        let mut all: Vec<NodeId> = Vec::new();
        for route in &routes {
            all.extend_from_slice(route.panos());
        }
        for pair in all.windows(2) {
            assert!(g.adjacent(pair[0], pair[1]).unwrap());
        }
    }

    #[test]
    fn repair_contiguous_route_is_identity() {
        let g = line_graph(5);
        let panos: Vec<NodeId> = (0..5).map(|i| g.node(&format!("p{i}")).unwrap()).collect();
        let repaired = repair_gaps(&panos, &g, 3).unwrap();
        assert_eq!(repaired.panos(), &panos[..]);
    }

    #[test]
    fn repair_splices_shortest_path() {
        let g = line_graph(3);
        let a = g.node("p0").unwrap();
        let c = g.node("p2").unwrap();
        let repaired = repair_gaps(&[a, c], &g, 3).unwrap();
        let names: Vec<&str> = repaired.panos().iter().map(|&n| g.name(n)).collect();
        assert_eq!(names, vec!["p0", "p1", "p2"]);
    }

    #[test]
    fn repair_rejects_at_gap_budget() {
        let g = line_graph(9);
        let p = |i: usize| g.node(&format!("p{i}")).unwrap();
        // Three gaps: 0->2, 2->4, 4->6.
        let panos = vec![p(0), p(2), p(4), p(6)];
        let err = repair_gaps(&panos, &g, 3).unwrap_err();
        assert!(matches!(err, GapRejection::TooManyGaps { found: 3, max: 3 }));
        // Two gaps are under the budget of three.
        let panos = vec![p(0), p(2), p(4)];
        assert!(repair_gaps(&panos, &g, 3).is_ok());
    }

    #[test]
    fn demonstration_forward_stop_when_aligned() {
        let g = line_graph(2);
        let route = Route::new(&g, vec![g.node("p0").unwrap(), g.node("p1").unwrap()]).unwrap();
        let demo = demonstration_from_route(&g, &route, 90.0).unwrap();
        let actions: Vec<Action> = demo.steps().iter().map(|&(_, a)| a).collect();
        assert_eq!(actions, vec![Action::Forward, Action::Stop]);
    }

    fn cross_graph() -> PanoGraph {
        // Center node with edges at {0, 90, 180, 270} to four arms.
        let nodes = "c\nn\ne\ns\nw";
        let links = "\
c\t0.0\tn\nn\t180.0\tc\n\
c\t90.0\te\ne\t270.0\tc\n\
c\t180.0\ts\ns\t0.0\tc\n\
c\t270.0\tw\nw\t90.0\tc\n";
        load_graph(nodes, links).unwrap()
    }

    #[test]
    fn demonstration_prefers_fewer_turns() {
        let g = cross_graph();
        // Heading 0 at the center, next hop is west (heading 270):
        // one left turn beats three right turns.
        let route = Route::new(&g, vec![g.node("c").unwrap(), g.node("w").unwrap()]).unwrap();
        let demo = demonstration_from_route(&g, &route, 0.0).unwrap();
        let actions: Vec<Action> = demo.steps().iter().map(|&(_, a)| a).collect();
        assert_eq!(actions, vec![Action::Left, Action::Forward, Action::Stop]);
    }

    #[test]
    fn demonstration_tie_turns_right() {
        // Heading 0, next hop south (180): two turns either way; tie goes
        // right.
        let g = cross_graph();
        let route = Route::new(&g, vec![g.node("c").unwrap(), g.node("s").unwrap()]).unwrap();
        let demo = demonstration_from_route(&g, &route, 0.0).unwrap();
        let actions: Vec<Action> = demo.steps().iter().map(|&(_, a)| a).collect();
        assert_eq!(
            actions,
            vec![Action::Right, Action::Right, Action::Forward, Action::Stop]
        );
    }

    #[test]
    fn demonstration_replays_to_route() {
        let g = line_graph(6);
        let panos: Vec<NodeId> = (0..6).map(|i| g.node(&format!("p{i}")).unwrap()).collect();
        let route = Route::new(&g, panos.clone()).unwrap();
        let demo = demonstration_from_route(&g, &route, 90.0).unwrap();
        assert_eq!(demo.collapsed_panos(), panos);
    }
}
