//! Panorama graph, agent states, and the deterministic transition function.
//!
//! The environment is an undirected graph of panoramas. Each endpoint of an
//! edge carries its own heading angle in degrees, so an edge between `A` and
//! `B` appears as two half-edges: one at `A` pointing toward `B` and one at
//! `B` pointing toward `A`. An agent state is a `(panorama, heading)` pair
//! and is only valid when the heading lies on one of the panorama's
//! half-edges.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// Handle to a panorama node inside a [`PanoGraph`].
///
/// Ids are dense indices minted by the graph that owns them; use
/// [`PanoGraph::node`] to look one up by name and [`PanoGraph::name`] to get
/// the name back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// One endpoint of an undirected edge: the outgoing heading at this node and
/// the neighbor it leads to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfEdge {
    pub heading: f64,
    pub target: NodeId,
}

/// The four agent actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Forward,
    Left,
    Right,
    Stop,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Forward, Action::Left, Action::Right, Action::Stop];

    /// Stable index used for action embeddings and policy outputs.
    pub fn index(self) -> usize {
        match self {
            Action::Forward => 0,
            Action::Left => 1,
            Action::Right => 2,
            Action::Stop => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            Action::Forward => "forward",
            Action::Left => "left",
            Action::Right => "right",
            Action::Stop => "stop",
        }
    }
}

/// Agent pose: a panorama and a heading that must lie on one of its edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    pub pano: NodeId,
    pub heading: f64,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: malformed node line")]
    MalformedNodeLine { line: usize },
    #[error("line {line}: duplicate node id `{id}`")]
    DuplicateNode { line: usize, id: String },
    #[error("line {line}: malformed link line (expected `source<TAB>heading<TAB>target`)")]
    MalformedLinkLine { line: usize },
    #[error("line {line}: heading {heading} outside [0, 360)")]
    HeadingOutOfRange { line: usize, heading: f64 },
    #[error("line {line}: unknown node id `{id}`")]
    UnknownNodeName { line: usize, id: String },
    #[error("line {line}: node `{id}` already has a half-edge at heading {heading}")]
    DuplicateHeading {
        line: usize,
        id: String,
        heading: f64,
    },
    #[error("line {line}: missing reverse edge for `{from}` -> `{to}`")]
    MissingReverseEdge {
        line: usize,
        from: String,
        to: String,
    },
    #[error("node `{id}` has no half-edges")]
    IsolatedNode { id: String },
    #[error("self-loop on node `{id}` at line {line}")]
    SelfLoop { line: usize, id: String },
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("invalid state: heading {heading} is not on an edge of node `{id}`")]
    InvalidState { id: String, heading: f64 },
}

/// A half-edge as parsed from a links source, tagged with its source line
/// for diagnostics.
#[derive(Debug, Clone)]
pub struct LinkRecord {
    pub line: usize,
    pub source: String,
    pub heading: f64,
    pub target: String,
}

/// Undirected panorama graph with per-endpoint headings.
///
/// Immutable after construction; all queries are pure, so a graph can be
/// shared freely across evaluation workers.
#[derive(Debug, Clone)]
pub struct PanoGraph {
    names: Vec<String>,
    index: HashMap<String, NodeId>,
    // Sorted by heading, ascending, per node.
    half_edges: Vec<Vec<HalfEdge>>,
}

impl PanoGraph {
    /// Builds a graph from node names and half-edge records, enforcing every
    /// structural invariant. Violations are rejected, not repaired.
    pub fn new(nodes: Vec<String>, links: Vec<LinkRecord>) -> Result<Self, GraphError> {
        let mut names = Vec::with_capacity(nodes.len());
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, name) in nodes.into_iter().enumerate() {
            if index.contains_key(&name) {
                return Err(GraphError::DuplicateNode {
                    line: i + 1,
                    id: name,
                });
            }
            index.insert(name.clone(), NodeId(names.len() as u32));
            names.push(name);
        }

        let mut half_edges: Vec<Vec<HalfEdge>> = vec![Vec::new(); names.len()];
        // Ordered-pair half-edge counts; reverse-edge validation requires the
        // count for (i, j) to match the count for (j, i).
        let mut pair_counts: HashMap<(NodeId, NodeId), (usize, usize)> = HashMap::new();
        for link in &links {
            if !(0.0..360.0).contains(&link.heading) || !link.heading.is_finite() {
                return Err(GraphError::HeadingOutOfRange {
                    line: link.line,
                    heading: link.heading,
                });
            }
            let src = *index
                .get(&link.source)
                .ok_or_else(|| GraphError::UnknownNodeName {
                    line: link.line,
                    id: link.source.clone(),
                })?;
            let dst = *index
                .get(&link.target)
                .ok_or_else(|| GraphError::UnknownNodeName {
                    line: link.line,
                    id: link.target.clone(),
                })?;
            if src == dst {
                return Err(GraphError::SelfLoop {
                    line: link.line,
                    id: link.source.clone(),
                });
            }
            if half_edges[src.index()]
                .iter()
                .any(|e| e.heading == link.heading)
            {
                return Err(GraphError::DuplicateHeading {
                    line: link.line,
                    id: link.source.clone(),
                    heading: link.heading,
                });
            }
            half_edges[src.index()].push(HalfEdge {
                heading: link.heading,
                target: dst,
            });
            let key = if src < dst { (src, dst) } else { (dst, src) };
            let entry = pair_counts.entry(key).or_insert((0, 0));
            if src < dst {
                entry.0 += 1;
            } else {
                entry.1 += 1;
            }
        }

        for ((a, b), (fwd, rev)) in &pair_counts {
            if fwd != rev {
                // Point at the forward link's line for the diagnostic.
                let (src, dst) = if fwd > rev { (*a, *b) } else { (*b, *a) };
                let line = links
                    .iter()
                    .filter(|l| index[&l.source] == src && index[&l.target] == dst)
                    .map(|l| l.line)
                    .max()
                    .unwrap_or(0);
                return Err(GraphError::MissingReverseEdge {
                    line,
                    from: names[src.index()].clone(),
                    to: names[dst.index()].clone(),
                });
            }
        }

        for (i, edges) in half_edges.iter_mut().enumerate() {
            if edges.is_empty() {
                return Err(GraphError::IsolatedNode {
                    id: names[i].clone(),
                });
            }
            edges.sort_by(|a, b| a.heading.partial_cmp(&b.heading).unwrap());
        }

        Ok(PanoGraph {
            names,
            index,
            half_edges,
        })
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    /// Number of undirected edges (half of the half-edge count).
    pub fn edge_count(&self) -> usize {
        self.half_edges.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.names[id.index()]
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.names.len() as u32).map(NodeId)
    }

    pub fn half_edges(&self, id: NodeId) -> Result<&[HalfEdge], GraphError> {
        self.half_edges
            .get(id.index())
            .map(Vec::as_slice)
            .ok_or(GraphError::UnknownNode(id))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.index() < self.names.len()
    }

    /// True when two nodes are connected by an edge.
    pub fn adjacent(&self, a: NodeId, b: NodeId) -> Result<bool, GraphError> {
        if !self.contains(b) {
            return Err(GraphError::UnknownNode(b));
        }
        Ok(self.half_edges(a)?.iter().any(|e| e.target == b))
    }

    /// True when the heading lies on one of the node's half-edges.
    pub fn is_valid_state(&self, s: State) -> bool {
        self.half_edges
            .get(s.pano.index())
            .map(|edges| edges.iter().any(|e| e.heading == s.heading))
            .unwrap_or(false)
    }

    fn edge_position(&self, s: State) -> Result<usize, GraphError> {
        let edges = self.half_edges(s.pano)?;
        edges
            .iter()
            .position(|e| e.heading == s.heading)
            .ok_or_else(|| GraphError::InvalidState {
                id: self.names[s.pano.index()].clone(),
                heading: s.heading,
            })
    }

    /// The deterministic transition function over states.
    ///
    /// `Forward` follows the half-edge at the current heading; the new
    /// heading is the neighbor's half-edge heading circularly closest to the
    /// old one (ties broken toward the numerically smaller heading). `Left`
    /// and `Right` stay on the panorama and move to the cyclically adjacent
    /// heading (`Left` decreasing, `Right` increasing, wrapping mod 360).
    /// `Stop` returns the state unchanged; episode termination is the
    /// caller's concern.
    pub fn transition(&self, s: State, a: Action) -> Result<State, GraphError> {
        let pos = self.edge_position(s)?;
        let edges = &self.half_edges[s.pano.index()];
        match a {
            Action::Stop => Ok(s),
            Action::Left => {
                let n = edges.len();
                let next = (pos + n - 1) % n;
                Ok(State {
                    pano: s.pano,
                    heading: edges[next].heading,
                })
            }
            Action::Right => {
                let next = (pos + 1) % edges.len();
                Ok(State {
                    pano: s.pano,
                    heading: edges[next].heading,
                })
            }
            Action::Forward => {
                let target = edges[pos].target;
                let neighbor_edges = &self.half_edges[target.index()];
                let heading = neighbor_edges
                    .iter()
                    .map(|e| e.heading)
                    .min_by(|&a, &b| {
                        let da = circular_offset(a, s.heading).abs();
                        let db = circular_offset(b, s.heading).abs();
                        da.partial_cmp(&db)
                            .unwrap()
                            .then(a.partial_cmp(&b).unwrap())
                    })
                    .expect("no isolated nodes after validation");
                Ok(State {
                    pano: target,
                    heading,
                })
            }
        }
    }

    /// Minimal number of edges between two nodes (breadth-first search).
    /// `Ok(None)` signals the nodes are in different components.
    pub fn shortest_path_hops(&self, a: NodeId, b: NodeId) -> Result<Option<usize>, GraphError> {
        Ok(self.bfs_path(a, b)?.map(|p| p.len() - 1))
    }

    /// One shortest path between two nodes, inclusive of both endpoints.
    pub fn bfs_path(&self, a: NodeId, b: NodeId) -> Result<Option<Vec<NodeId>>, GraphError> {
        if !self.contains(a) {
            return Err(GraphError::UnknownNode(a));
        }
        if !self.contains(b) {
            return Err(GraphError::UnknownNode(b));
        }
        if a == b {
            return Ok(Some(vec![a]));
        }
        let mut prev: Vec<Option<NodeId>> = vec![None; self.node_count()];
        let mut visited = vec![false; self.node_count()];
        visited[a.index()] = true;
        let mut frontier = std::collections::VecDeque::new();
        frontier.push_back(a);
        while let Some(cur) = frontier.pop_front() {
            for e in &self.half_edges[cur.index()] {
                if !visited[e.target.index()] {
                    visited[e.target.index()] = true;
                    prev[e.target.index()] = Some(cur);
                    if e.target == b {
                        let mut path = vec![b];
                        let mut at = b;
                        while let Some(p) = prev[at.index()] {
                            path.push(p);
                            at = p;
                        }
                        path.reverse();
                        return Ok(Some(path));
                    }
                    frontier.push_back(e.target);
                }
            }
        }
        Ok(None)
    }
}

/// Signed circular offset `a - b` in degrees, normalized to `(-180, 180]`.
pub fn circular_offset(a: f64, b: f64) -> f64 {
    let mut d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        d -= 360.0;
    }
    d
}

/// Parses the two graph source texts.
///
/// Nodes source: one panorama id per non-empty line. Links source: one
/// half-edge per non-empty line as `source<TAB>heading<TAB>target` with the
/// heading a decimal in `[0, 360)`.
pub fn load_graph(nodes_source: &str, links_source: &str) -> Result<PanoGraph, GraphError> {
    let mut nodes = Vec::new();
    for (i, raw) in nodes_source.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.split_whitespace().count() != 1 {
            return Err(GraphError::MalformedNodeLine { line: i + 1 });
        }
        nodes.push(line.to_string());
    }

    let mut links = Vec::new();
    for (i, raw) in links_source.lines().enumerate() {
        let line = raw.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (source, heading, target) = match (
            fields.next(),
            fields.next(),
            fields.next(),
            fields.next(),
        ) {
            (Some(s), Some(h), Some(t), None) if !s.is_empty() && !t.is_empty() => (s, h, t),
            _ => return Err(GraphError::MalformedLinkLine { line: i + 1 }),
        };
        let heading: f64 = heading
            .trim()
            .parse()
            .map_err(|_| GraphError::MalformedLinkLine { line: i + 1 })?;
        links.push(LinkRecord {
            line: i + 1,
            source: source.to_string(),
            heading,
            target: target.to_string(),
        });
    }

    PanoGraph::new(nodes, links)
}

#[derive(Debug, Error)]
pub enum ExecutionError {
    #[error("execution must contain at least the stop step")]
    Empty,
    #[error("step {step}: action after stop")]
    StopNotLast { step: usize },
    #[error("execution must end with stop")]
    MissingStop,
    #[error("step {step}: state does not follow from the previous transition")]
    BrokenChain { step: usize },
    #[error("step {step}: invalid state")]
    InvalidState { step: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A state-action trajectory ending in `Stop`.
///
/// The constructor enforces that `Stop` appears exactly once, at the end,
/// and that every consecutive pair is related by the transition function.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    steps: Vec<(State, Action)>,
}

impl Execution {
    pub fn new(graph: &PanoGraph, steps: Vec<(State, Action)>) -> Result<Self, ExecutionError> {
        if steps.is_empty() {
            return Err(ExecutionError::Empty);
        }
        for (i, (state, action)) in steps.iter().enumerate() {
            if !graph.is_valid_state(*state) {
                return Err(ExecutionError::InvalidState { step: i });
            }
            let last = i + 1 == steps.len();
            match (action, last) {
                (Action::Stop, false) => return Err(ExecutionError::StopNotLast { step: i }),
                (a, false) => {
                    let next = graph.transition(*state, *a)?;
                    if next != steps[i + 1].0 {
                        return Err(ExecutionError::BrokenChain { step: i + 1 });
                    }
                }
                (Action::Stop, true) => {}
                (_, true) => return Err(ExecutionError::MissingStop),
            }
        }
        Ok(Execution { steps })
    }

    pub fn steps(&self) -> &[(State, Action)] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn start_state(&self) -> State {
        self.steps[0].0
    }

    pub fn final_state(&self) -> State {
        self.steps[self.steps.len() - 1].0
    }

    /// Panorama visited at each step, in order, including repeats from
    /// turning in place.
    pub fn pano_sequence(&self) -> Vec<NodeId> {
        self.steps.iter().map(|(s, _)| s.pano).collect()
    }

    /// Panorama sequence with consecutive duplicates collapsed, so that
    /// turning in place does not lengthen it.
    pub fn collapsed_panos(&self) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = Vec::new();
        for (s, _) in &self.steps {
            if out.last() != Some(&s.pano) {
                out.push(s.pano);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(line: usize, s: &str, h: f64, t: &str) -> LinkRecord {
        LinkRecord {
            line,
            source: s.into(),
            heading: h,
            target: t.into(),
        }
    }

    fn two_node_graph() -> PanoGraph {
        // A --31°--> B, B has edges at 35° (back toward A? no: toward A is
        // 211°) and 211°; a third node C hangs off B at 35°.
        PanoGraph::new(
            vec!["A".into(), "B".into(), "C".into()],
            vec![
                link(1, "A", 31.0, "B"),
                link(2, "B", 211.0, "A"),
                link(3, "B", 35.0, "C"),
                link(4, "C", 215.0, "B"),
            ],
        )
        .unwrap()
    }

    #[test]
    fn forward_picks_circularly_closest_heading() {
        let g = two_node_graph();
        let a = g.node("A").unwrap();
        let b = g.node("B").unwrap();
        let next = g
            .transition(
                State {
                    pano: a,
                    heading: 31.0,
                },
                Action::Forward,
            )
            .unwrap();
        // B's headings are {35, 211}; 35 is circularly closest to 31.
        assert_eq!(next, State {
            pano: b,
            heading: 35.0
        });
    }

    #[test]
    fn left_on_single_edge_is_identity() {
        let g = PanoGraph::new(
            vec!["P".into(), "Q".into()],
            vec![link(1, "P", 90.0, "Q"), link(2, "Q", 270.0, "P")],
        )
        .unwrap();
        let p = g.node("P").unwrap();
        let s = State {
            pano: p,
            heading: 90.0,
        };
        assert_eq!(g.transition(s, Action::Left).unwrap(), s);
        assert_eq!(g.transition(s, Action::Right).unwrap(), s);
    }

    #[test]
    fn left_right_move_cyclically() {
        // Node P with edges at {10, 120, 250} to three neighbors.
        let g = PanoGraph::new(
            vec!["P".into(), "X".into(), "Y".into(), "Z".into()],
            vec![
                link(1, "P", 10.0, "X"),
                link(2, "X", 190.0, "P"),
                link(3, "P", 120.0, "Y"),
                link(4, "Y", 300.0, "P"),
                link(5, "P", 250.0, "Z"),
                link(6, "Z", 70.0, "P"),
            ],
        )
        .unwrap();
        let p = g.node("P").unwrap();
        let at = |h: f64| State {
            pano: p,
            heading: h,
        };
        assert_eq!(g.transition(at(120.0), Action::Left).unwrap(), at(10.0));
        assert_eq!(g.transition(at(120.0), Action::Right).unwrap(), at(250.0));
        // Wraparound below the minimum heading.
        assert_eq!(g.transition(at(10.0), Action::Left).unwrap(), at(250.0));
        assert_eq!(g.transition(at(250.0), Action::Right).unwrap(), at(10.0));
    }

    #[test]
    fn stop_returns_state_unchanged() {
        let g = two_node_graph();
        let s = State {
            pano: g.node("A").unwrap(),
            heading: 31.0,
        };
        assert_eq!(g.transition(s, Action::Stop).unwrap(), s);
    }

    #[test]
    fn invalid_heading_is_rejected() {
        let g = two_node_graph();
        let s = State {
            pano: g.node("A").unwrap(),
            heading: 32.0,
        };
        assert!(matches!(
            g.transition(s, Action::Forward),
            Err(GraphError::InvalidState { .. })
        ));
    }

    fn line_graph(n: usize) -> PanoGraph {
        let nodes: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
        let mut links = Vec::new();
        for i in 0..n - 1 {
            links.push(link(links.len() + 1, &format!("n{i}"), 90.0, &format!("n{}", i + 1)));
            links.push(link(links.len() + 1, &format!("n{}", i + 1), 270.0, &format!("n{i}")));
        }
        PanoGraph::new(nodes, links).unwrap()
    }

    #[test]
    fn hops_on_line_graph() {
        let g = line_graph(4);
        let a = g.node("n0").unwrap();
        let d = g.node("n3").unwrap();
        assert_eq!(g.shortest_path_hops(a, d).unwrap(), Some(3));
        assert_eq!(g.shortest_path_hops(a, a).unwrap(), Some(0));
    }

    #[test]
    fn hops_unreachable_between_components() {
        let g = PanoGraph::new(
            vec!["A".into(), "B".into(), "X".into(), "Y".into()],
            vec![
                link(1, "A", 0.0, "B"),
                link(2, "B", 180.0, "A"),
                link(3, "X", 0.0, "Y"),
                link(4, "Y", 180.0, "X"),
            ],
        )
        .unwrap();
        let a = g.node("A").unwrap();
        let x = g.node("X").unwrap();
        assert_eq!(g.shortest_path_hops(a, x).unwrap(), None);
    }

    #[test]
    fn load_two_node_file() {
        let g = load_graph("A\nB\n", "A\t31.0\tB\nB\t211.0\tA\n").unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn load_rejects_missing_reverse_edge() {
        let err = load_graph("A\nB\n", "A\t31.0\tB\n").unwrap_err();
        assert!(matches!(err, GraphError::MissingReverseEdge { .. }), "{err}");
    }

    #[test]
    fn load_rejects_duplicate_heading() {
        let err = load_graph(
            "A\nB\nC\n",
            "A\t31.0\tB\nB\t211.0\tA\nA\t31.0\tC\nC\t211.0\tA\n",
        )
        .unwrap_err();
        assert!(matches!(
            err,
            GraphError::DuplicateHeading { line: 3, .. }
        ), "{err}");
    }

    #[test]
    fn load_rejects_heading_out_of_range() {
        let err = load_graph("A\nB\n", "A\t360.0\tB\nB\t180.0\tA\n").unwrap_err();
        assert!(matches!(err, GraphError::HeadingOutOfRange { line: 1, .. }), "{err}");
    }

    #[test]
    fn load_rejects_malformed_line() {
        let err = load_graph("A\nB\n", "A 31.0 B\n").unwrap_err();
        assert!(matches!(err, GraphError::MalformedLinkLine { line: 1 }), "{err}");
    }

    #[test]
    fn load_rejects_isolated_node() {
        let err = load_graph("A\nB\nC\n", "A\t31.0\tB\nB\t211.0\tA\n").unwrap_err();
        assert!(matches!(err, GraphError::IsolatedNode { .. }), "{err}");
    }

    #[test]
    fn execution_invariants_enforced() {
        let g = two_node_graph();
        let a = g.node("A").unwrap();
        let s = State {
            pano: a,
            heading: 31.0,
        };
        let next = g.transition(s, Action::Forward).unwrap();
        let good = Execution::new(
            &g,
            vec![(s, Action::Forward), (next, Action::Stop)],
        );
        assert!(good.is_ok());

        let early_stop = Execution::new(
            &g,
            vec![(s, Action::Stop), (next, Action::Stop)],
        );
        assert!(matches!(early_stop, Err(ExecutionError::StopNotLast { .. })));

        let broken = Execution::new(&g, vec![(s, Action::Forward), (s, Action::Stop)]);
        assert!(matches!(broken, Err(ExecutionError::BrokenChain { .. })));

        let no_stop = Execution::new(&g, vec![(s, Action::Forward)]);
        assert!(matches!(no_stop, Err(ExecutionError::MissingStop)));
    }

    #[test]
    fn collapsed_panos_ignore_turning() {
        let g = PanoGraph::new(
            vec!["P".into(), "X".into(), "Y".into()],
            vec![
                link(1, "P", 10.0, "X"),
                link(2, "X", 190.0, "P"),
                link(3, "P", 120.0, "Y"),
                link(4, "Y", 300.0, "P"),
            ],
        )
        .unwrap();
        let p = g.node("P").unwrap();
        let s0 = State {
            pano: p,
            heading: 10.0,
        };
        let s1 = g.transition(s0, Action::Right).unwrap();
        let s2 = g.transition(s1, Action::Forward).unwrap();
        let e = Execution::new(
            &g,
            vec![(s0, Action::Right), (s1, Action::Forward), (s2, Action::Stop)],
        )
        .unwrap();
        assert_eq!(e.pano_sequence().len(), 3);
        assert_eq!(e.collapsed_panos().len(), 2);
    }

    #[test]
    fn circular_offset_range() {
        assert_eq!(circular_offset(10.0, 350.0), 20.0);
        assert_eq!(circular_offset(350.0, 10.0), -20.0);
        assert_eq!(circular_offset(190.0, 10.0), 180.0);
        assert_eq!(circular_offset(0.0, 0.0), 0.0);
    }
}
