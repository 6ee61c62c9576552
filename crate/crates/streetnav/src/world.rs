//! Seeded synthetic-world generation.
//!
//! A synthetic world is a grid-with-shortcuts panorama graph, per-node
//! feature grids with planted marker patterns, and example sets for both
//! tasks whose labels are deterministic functions of the features and
//! tokens — learnable by construction:
//!
//! - Every node carries two positional ramp channels, an indicator channel
//!   per horizontal third, and a landmark band whose amplitude encodes the
//!   node's landmark class (the band survives the channel-mean reduction
//!   used for navigation observations).
//! - Each location-prediction example plants three identical markers of
//!   one class, one per horizontal third of its panorama, plus distractor
//!   markers of other classes; the sentence names the class and the third,
//!   so text is required to disambiguate the three candidates. With
//!   markers and regions both living in dedicated channels, the
//!   token-to-location mapping is realizable by channel selection alone.
//! - Navigation instructions transcribe the reference demonstration as
//!   turn tokens and "walk until <landmark>" legs, so the action counts
//!   are observable only by watching the features for the named landmark.
//!
//! Regeneration from the same seed is byte-identical, and a world
//! round-trips through its on-disk form unchanged.

use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Action, GraphError, LinkRecord, NodeId, PanoGraph, State};
use crate::nav::NavExample;
use crate::routes::{demonstration_from_route, Route, RouteError};
use crate::sdr::{FeatureMap, FeatureSource, SdrError, SdrExample};
use crate::text::{TextError, TokenSeq, Vocabulary};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("config: {0}")]
    Config(String),
    #[error("world generation could not place {0} after bounded retries")]
    PlacementExhausted(&'static str),
    #[error("world io: {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("world manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error(transparent)]
    Sdr(#[from] SdrError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Dataset(#[from] crate::harness::DatasetError),
}

/// Knobs for the generator. Everything is deterministic given `seed`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Probability of a diagonal shortcut edge per grid cell.
    pub diagonal_prob: f64,
    pub feature_channels: usize,
    pub feature_height: usize,
    pub feature_width: usize,
    /// Image pixels per feature-grid cell.
    pub image_scale: usize,
    pub marker_classes: usize,
    pub vocab_size: usize,
    pub sdr_train: usize,
    pub sdr_dev: usize,
    /// Panoramas sharing one sentence (for consistency measurement).
    pub sdr_group_size: usize,
    pub nav_train: usize,
    pub nav_dev: usize,
    /// Route lengths in panoramas.
    pub nav_route_min: usize,
    pub nav_route_max: usize,
    /// Heading-crop window width for navigation observations.
    pub obs_window: usize,
    /// Uniform background noise amplitude.
    pub noise: f64,
    /// Paired navigation+location examples for the full task.
    pub full_task: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            grid_rows: 26,
            grid_cols: 26,
            diagonal_prob: 0.15,
            feature_channels: 8,
            feature_height: 16,
            feature_width: 32,
            image_scale: 8,
            marker_classes: 2,
            vocab_size: 20,
            sdr_train: 500,
            sdr_dev: 100,
            sdr_group_size: 2,
            nav_train: 40,
            nav_dev: 10,
            nav_route_min: 4,
            nav_route_max: 6,
            obs_window: 16,
            noise: 0.01,
            full_task: 8,
        }
    }
}

/// Rows reserved at the top of every feature grid for the landmark band.
const BAND_ROWS: usize = 2;
/// Amplitude unit for landmark bands; class `c` writes `(c+1)` units.
const BAND_UNIT: f32 = 0.75;
/// Amplitude of a planted point marker.
const MARKER_AMP: f32 = 3.0;
/// Reserved layout channels: column ramp, row ramp, and one indicator per
/// horizontal third.
const POS_CHANNELS: usize = 5;
/// Distractor markers planted per location example.
const DISTRACTORS: usize = 2;

const RETRIES: usize = 200;

/// Vocabulary roles. Tokens are synthesized as fixed strings so the vocab
/// file is human-readable.
#[derive(Debug, Clone)]
pub struct WorldVocab {
    pub vocab: Vocabulary,
    marker0: usize,
    side0: usize,
    find: usize,
    the: usize,
    turn_left: usize,
    turn_right: usize,
    walk: usize,
    until: usize,
    stop: usize,
    at: usize,
}

impl WorldVocab {
    fn build(classes: usize, vocab_size: usize) -> Result<WorldVocab, WorldError> {
        let mut tokens = vec!["<unk>".to_string()];
        let marker0 = tokens.len();
        for c in 0..classes {
            tokens.push(format!("mk{c}"));
        }
        let side0 = tokens.len();
        for side in ["left", "middle", "right"] {
            tokens.push(format!("side_{side}"));
        }
        let fixed = ["find", "the", "turnl", "turnr", "walk", "until", "stop", "at"];
        let base = tokens.len();
        tokens.extend(fixed.iter().map(|s| s.to_string()));
        if tokens.len() > vocab_size {
            return Err(WorldError::Config(format!(
                "vocabulary needs at least {} tokens for {classes} marker classes, got {vocab_size}",
                tokens.len()
            )));
        }
        for i in 0..vocab_size - tokens.len() {
            tokens.push(format!("filler{i}"));
        }
        Ok(WorldVocab {
            vocab: Vocabulary::new(tokens)?,
            marker0,
            side0,
            find: base,
            the: base + 1,
            turn_left: base + 2,
            turn_right: base + 3,
            walk: base + 4,
            until: base + 5,
            stop: base + 6,
            at: base + 7,
        })
    }

    pub fn marker(&self, class: usize) -> usize {
        self.marker0 + class
    }

    pub fn side(&self, third: usize) -> usize {
        self.side0 + third
    }
}

/// A paired navigation-then-locate example; the location target is
/// annotated only at the navigation goal panorama.
#[derive(Debug, Clone)]
pub struct FullTaskExample {
    pub nav: NavExample,
    pub sdr: SdrExample,
}

/// A generated world plus its example sets, split for training.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: SyntheticConfig,
    pub graph: PanoGraph,
    pub tokens: WorldVocab,
    pub features: BTreeMap<NodeId, Rc<FeatureMap>>,
    pub sdr_train: Vec<SdrExample>,
    pub sdr_dev: Vec<SdrExample>,
    pub nav_train: Vec<NavExample>,
    pub nav_dev: Vec<NavExample>,
    pub full_task: Vec<FullTaskExample>,
}

impl FeatureSource for SyntheticWorld {
    fn features(&self, pano: NodeId) -> Result<Rc<FeatureMap>, SdrError> {
        self.features
            .get(&pano)
            .cloned()
            .ok_or_else(|| SdrError::FeatureFile(format!("no features for node {pano}")))
    }
}

impl SyntheticWorld {
    pub fn scale(&self) -> f64 {
        self.config.image_scale as f64
    }

    /// `(width, height)` of the notional image the feature grid downscales.
    pub fn image_dims(&self) -> (usize, usize) {
        (
            self.config.feature_width * self.config.image_scale,
            self.config.feature_height * self.config.image_scale,
        )
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.tokens.vocab
    }

    pub fn generate(config: SyntheticConfig) -> Result<SyntheticWorld, WorldError> {
        validate_config(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tokens = WorldVocab::build(config.marker_classes, config.vocab_size)?;
        let graph = grid_graph(&config, &mut rng)?;

        // Landmark class per node, then base feature grids.
        let node_ids: Vec<NodeId> = graph.node_ids().collect();
        let landmark: BTreeMap<NodeId, usize> = node_ids
            .iter()
            .map(|&id| (id, rng.gen_range(0..config.marker_classes)))
            .collect();
        let mut features: BTreeMap<NodeId, FeatureMap> = BTreeMap::new();
        for &id in &node_ids {
            features.insert(id, base_features(&config, landmark[&id], &mut rng));
        }

        // Location examples: one distinct panorama per example.
        let mut free_panos = node_ids.clone();
        free_panos.shuffle(&mut rng);
        let sdr_total = config.sdr_train + config.sdr_dev;
        let mut sdr_all = Vec::with_capacity(sdr_total);
        let mut sentence_id = 0u64;
        while sdr_all.len() < sdr_total {
            let class = rng.gen_range(0..config.marker_classes);
            let third = rng.gen_range(0..3usize);
            let ids = vec![
                tokens.find,
                tokens.the,
                tokens.marker(class),
                tokens.side(third),
            ];
            for _ in 0..config.sdr_group_size {
                let pano = free_panos
                    .pop()
                    .ok_or(WorldError::PlacementExhausted("location example panorama"))?;
                let fmap = features.get_mut(&pano).expect("generated above");
                let (tx, ty) = plant_markers(&config, fmap, class, third, &mut rng)?;
                sdr_all.push(SdrExample {
                    sentence_id,
                    pano,
                    tokens: TokenSeq::new(ids.clone(), config.vocab_size)?,
                    target_x: tx,
                    target_y: ty,
                });
            }
            sentence_id += 1;
        }
        let sdr_dev = sdr_all.split_off(config.sdr_train);
        let sdr_train = sdr_all;

        // Navigation examples.
        let nav_total = config.nav_train + config.nav_dev;
        let mut nav_all = Vec::with_capacity(nav_total);
        for id in 0..nav_total as u64 {
            let example = sample_nav_example(&config, &graph, &landmark, &tokens, id, &mut rng)?;
            nav_all.push(example);
        }
        let nav_dev = nav_all.split_off(config.nav_train);
        let nav_train = nav_all;

        // Paired full-task examples: navigation goals get a location
        // annotation of their own, on panoramas no other example touched.
        let used: HashSet<NodeId> = sdr_train
            .iter()
            .chain(&sdr_dev)
            .map(|e| e.pano)
            .collect();
        let mut full_task = Vec::with_capacity(config.full_task);
        let mut taken = used;
        let mut next_id = nav_total as u64;
        let mut attempts = 0usize;
        while full_task.len() < config.full_task {
            attempts += 1;
            if attempts > RETRIES * config.full_task.max(1) {
                return Err(WorldError::PlacementExhausted("full-task goal panorama"));
            }
            let nav = sample_nav_example(&config, &graph, &landmark, &tokens, next_id, &mut rng)?;
            if taken.contains(&nav.goal) {
                continue;
            }
            taken.insert(nav.goal);
            next_id += 1;
            let class = rng.gen_range(0..config.marker_classes);
            let third = rng.gen_range(0..3usize);
            let fmap = features.get_mut(&nav.goal).expect("generated above");
            let (tx, ty) = plant_markers(&config, fmap, class, third, &mut rng)?;
            let sdr = SdrExample {
                sentence_id: sentence_id + full_task.len() as u64,
                pano: nav.goal,
                tokens: TokenSeq::new(
                    vec![
                        tokens.find,
                        tokens.the,
                        tokens.marker(class),
                        tokens.side(third),
                    ],
                    config.vocab_size,
                )?,
                target_x: tx,
                target_y: ty,
            };
            full_task.push(FullTaskExample { nav, sdr });
        }

        Ok(SyntheticWorld {
            config,
            graph,
            tokens,
            features: features
                .into_iter()
                .map(|(k, v)| (k, Rc::new(v)))
                .collect(),
            sdr_train,
            sdr_dev,
            nav_train,
            nav_dev,
            full_task,
        })
    }
}

fn validate_config(c: &SyntheticConfig) -> Result<(), WorldError> {
    let fail = |msg: String| Err(WorldError::Config(msg));
    if c.grid_rows < 2 || c.grid_cols < 2 {
        return fail("grid must be at least 2x2".into());
    }
    if c.feature_channels < POS_CHANNELS + 1 {
        return fail(format!(
            "need at least {} feature channels",
            POS_CHANNELS + 1
        ));
    }
    if c.marker_classes == 0 || c.marker_classes > c.feature_channels - POS_CHANNELS {
        return fail(format!(
            "marker classes must be in 1..={}",
            c.feature_channels - POS_CHANNELS
        ));
    }
    if c.feature_height < BAND_ROWS + 4 || c.feature_width < 6 {
        return fail("feature grid too small for bands and marker thirds".into());
    }
    // Each example plants 3 same-class markers plus distractors.
    let usable_cells = (c.feature_height - BAND_ROWS - 1) * (c.feature_width / 3);
    if usable_cells < 3 + DISTRACTORS {
        return fail("more markers than available cells per third".into());
    }
    if c.image_scale == 0 {
        return fail("image scale must be positive".into());
    }
    let sdr_total = c.sdr_train + c.sdr_dev;
    if c.sdr_group_size == 0
        || c.sdr_train % c.sdr_group_size != 0
        || c.sdr_dev % c.sdr_group_size != 0
    {
        return fail("split sizes must be multiples of the sentence group size".into());
    }
    if sdr_total + c.full_task > c.grid_rows * c.grid_cols {
        return fail(format!(
            "{} annotated examples need distinct panoramas but the grid has {}",
            sdr_total + c.full_task,
            c.grid_rows * c.grid_cols
        ));
    }
    if c.nav_route_min < 3 || c.nav_route_min > c.nav_route_max {
        return fail("route bounds must satisfy 3 <= min <= max".into());
    }
    if c.obs_window > c.feature_width {
        return fail("observation window exceeds panorama grid width".into());
    }
    Ok(())
}

fn node_name(r: usize, c: usize) -> String {
    format!("p{r:02}x{c:02}")
}

/// Grid graph with 4-neighbor edges and random diagonal shortcuts. Compass
/// headings: north 0, east 90, south 180, west 270; diagonals 135/315.
fn grid_graph(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<PanoGraph, WorldError> {
    let (rows, cols) = (config.grid_rows, config.grid_cols);
    let mut nodes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            nodes.push(node_name(r, c));
        }
    }
    let mut links = Vec::new();
    let mut push = |from: String, heading: f64, to: String, line: usize| {
        links.push(LinkRecord {
            line,
            source: from,
            heading,
            target: to,
        });
    };
    let mut line = 0usize;
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                line += 1;
                push(node_name(r, c), 90.0, node_name(r, c + 1), line);
                line += 1;
                push(node_name(r, c + 1), 270.0, node_name(r, c), line);
            }
            if r + 1 < rows {
                line += 1;
                push(node_name(r, c), 180.0, node_name(r + 1, c), line);
                line += 1;
                push(node_name(r + 1, c), 0.0, node_name(r, c), line);
            }
            if r + 1 < rows && c + 1 < cols && rng.gen::<f64>() < config.diagonal_prob {
                line += 1;
                push(node_name(r, c), 135.0, node_name(r + 1, c + 1), line);
                line += 1;
                push(node_name(r + 1, c + 1), 315.0, node_name(r, c), line);
            }
        }
    }
    Ok(PanoGraph::new(nodes, links)?)
}

/// Positional ramps, uniform noise, and the landmark band. Values are f32
/// from the start so regeneration and file round-trips agree bit for bit.
fn base_features(config: &SyntheticConfig, landmark_class: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    let (c, h, w) = (
        config.feature_channels,
        config.feature_height,
        config.feature_width,
    );
    let mut fm = FeatureMap::zeros(c, h, w).expect("validated dims");
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let noise = (rng.gen::<f64>() * 2.0 - 1.0) * config.noise;
                let base = match ch {
                    0 => x as f64 / (w - 1) as f64,
                    1 => y as f64 / (h - 1) as f64,
                    2 | 3 | 4 => {
                        let (lo, hi) = third_bounds(w, ch - 2);
                        f64::from(u8::from((lo..hi).contains(&x)))
                    }
                    _ => 0.0,
                };
                fm.set(ch, y, x, (base + noise) as f32);
            }
        }
    }
    let band_ch = marker_channel(config, landmark_class);
    let amp = (landmark_class + 1) as f32 * BAND_UNIT;
    for y in 0..BAND_ROWS {
        for x in 0..w {
            fm.add(band_ch, y, x, amp);
        }
    }
    fm
}

fn marker_channel(config: &SyntheticConfig, class: usize) -> usize {
    POS_CHANNELS + (class % (config.feature_channels - POS_CHANNELS))
}

fn third_bounds(width: usize, third: usize) -> (usize, usize) {
    (third * width / 3, (third + 1) * width / 3)
}

/// Plants three same-class markers (one per horizontal third) plus
/// distractor markers of other classes, and returns the image-pixel target
/// for the marker in the named third.
fn plant_markers(
    config: &SyntheticConfig,
    fmap: &mut FeatureMap,
    class: usize,
    target_third: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64), WorldError> {
    let h = config.feature_height;
    let w = config.feature_width;
    let scale = config.image_scale as f64;
    let mut cells: Vec<(usize, usize)> = Vec::new();
    let mut target = (0.0, 0.0);
    for third in 0..3 {
        let (lo, hi) = third_bounds(w, third);
        let col = rng.gen_range(lo..hi);
        let row = rng.gen_range(BAND_ROWS + 1..h);
        cells.push((col, row));
        fmap.add(marker_channel(config, class), row, col, MARKER_AMP);
        if third == target_third {
            target = ((col as f64 + 0.5) * scale, (row as f64 + 0.5) * scale);
        }
    }
    if config.marker_classes > 1 {
        for _ in 0..DISTRACTORS {
            let mut placed = false;
            for _ in 0..RETRIES {
                let other = rng.gen_range(0..config.marker_classes);
                if other == class {
                    continue;
                }
                let col = rng.gen_range(0..w);
                let row = rng.gen_range(BAND_ROWS + 1..h);
                if cells.contains(&(col, row)) {
                    continue;
                }
                cells.push((col, row));
                fmap.add(marker_channel(config, other), row, col, MARKER_AMP);
                placed = true;
                break;
            }
            if !placed {
                return Err(WorldError::PlacementExhausted("distractor marker"));
            }
        }
    }
    Ok(target)
}

/// Samples a navigation example: a shortest-path route of in-range length,
/// a random valid start heading, and an instruction transcribing the
/// demonstration's turns and landmarks.
fn sample_nav_example(
    config: &SyntheticConfig,
    graph: &PanoGraph,
    landmark: &BTreeMap<NodeId, usize>,
    tokens: &WorldVocab,
    id: u64,
    rng: &mut ChaCha8Rng,
) -> Result<NavExample, WorldError> {
    let n = graph.node_count() as u32;
    for _ in 0..RETRIES {
        let a = NodeId(rng.gen_range(0..n));
        let b = NodeId(rng.gen_range(0..n));
        if a == b {
            continue;
        }
        let Some(path) = graph.bfs_path(a, b)? else {
            continue;
        };
        if path.len() < config.nav_route_min {
            continue;
        }
        let want = rng.gen_range(config.nav_route_min..=config.nav_route_max);
        let route_panos = path[..want.min(path.len())].to_vec();
        let goal = *route_panos.last().expect("length >= 3");
        let start_pano = route_panos[0];
        let edges = graph.half_edges(start_pano)?;
        let heading = edges[rng.gen_range(0..edges.len())].heading;
        let route = Route::new(graph, route_panos.clone())?;
        let demo = demonstration_from_route(graph, &route, heading)?;
        let ids = instruction_tokens(tokens, landmark, &demo);
        return Ok(NavExample {
            id,
            tokens: TokenSeq::new(ids, config.vocab_size)?,
            start: State {
                pano: start_pano,
                heading,
            },
            route: route_panos,
            goal,
        });
    }
    Err(WorldError::PlacementExhausted("navigation route"))
}

/// Transcribes a demonstration into turn tokens and landmark legs: each
/// run of forwards becomes `walk until <landmark-of-run-end>`, and the
/// instruction closes with `stop at <goal landmark>`.
fn instruction_tokens(
    tokens: &WorldVocab,
    landmark: &BTreeMap<NodeId, usize>,
    demo: &crate::graph::Execution,
) -> Vec<usize> {
    let steps = demo.steps();
    let mut ids = Vec::new();
    let mut i = 0usize;
    while i < steps.len() {
        match steps[i].1 {
            Action::Left => ids.push(tokens.turn_left),
            Action::Right => ids.push(tokens.turn_right),
            Action::Forward => {
                let mut j = i;
                while j < steps.len() && steps[j].1 == Action::Forward {
                    j += 1;
                }
                // steps[j] exists: demonstrations end with stop.
                let run_end = steps[j].0.pano;
                ids.extend([tokens.walk, tokens.until, tokens.marker(landmark[&run_end])]);
                i = j;
                continue;
            }
            Action::Stop => {
                ids.extend([tokens.stop, tokens.at, tokens.marker(landmark[&steps[i].0.pano])]);
            }
        }
        i += 1;
    }
    ids
}

/// Arbitrary connected graph with valid heading structure, for property
/// tests and fuzzing: a random spanning tree plus extra edges, each node's
/// incident edges carrying distinct headings.
pub fn random_connected_graph(rng: &mut ChaCha8Rng, max_nodes: usize) -> PanoGraph {
    let n = rng.gen_range(2..=max_nodes.max(2));
    let mut adjacency: Vec<HashSet<usize>> = vec![HashSet::new(); n];
    for v in 1..n {
        let u = rng.gen_range(0..v);
        adjacency[v].insert(u);
        adjacency[u].insert(v);
    }
    let extra = rng.gen_range(0..=n);
    for _ in 0..extra {
        let u = rng.gen_range(0..n);
        let v = rng.gen_range(0..n);
        if u != v {
            adjacency[u].insert(v);
            adjacency[v].insert(u);
        }
    }
    // Distinct headings per node: sample from a tenth-degree lattice.
    let nodes: Vec<String> = (0..n).map(|i| format!("g{i}")).collect();
    let mut links = Vec::new();
    let mut line = 0usize;
    let mut headings: Vec<Vec<f64>> = Vec::with_capacity(n);
    for adj in &adjacency {
        let k = adj.len();
        let mut chosen = HashSet::new();
        while chosen.len() < k {
            chosen.insert(rng.gen_range(0..3600u32));
        }
        let mut hs: Vec<f64> = chosen.into_iter().map(|v| v as f64 / 10.0).collect();
        hs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        headings.push(hs);
    }
    for u in 0..n {
        let mut neighbors: Vec<usize> = adjacency[u].iter().copied().collect();
        neighbors.sort_unstable();
        for (slot, v) in neighbors.into_iter().enumerate() {
            line += 1;
            links.push(LinkRecord {
                line,
                source: nodes[u].clone(),
                heading: headings[u][slot],
                target: nodes[v].clone(),
            });
        }
    }
    PanoGraph::new(nodes, links).expect("construction preserves invariants")
}

// ---------------------------------------------------------------------------
// Serialization.
// ---------------------------------------------------------------------------

const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct WorldManifest {
    schema: u32,
    config: SyntheticConfig,
}

impl SyntheticWorld {
    /// Renders every world file as `(relative path, bytes)`, sorted by
    /// path. Saving writes exactly these files; two worlds are
    /// byte-identical iff these maps are equal.
    pub fn render_files(&self) -> Result<Vec<(String, Vec<u8>)>, WorldError> {
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();

        let mut nodes = String::new();
        for id in self.graph.node_ids() {
            nodes.push_str(self.graph.name(id));
            nodes.push('\n');
        }
        files.push(("nodes.txt".into(), nodes.into_bytes()));

        let mut links = String::new();
        for id in self.graph.node_ids() {
            for e in self.graph.half_edges(id)? {
                links.push_str(&format!(
                    "{}\t{}\t{}\n",
                    self.graph.name(id),
                    e.heading,
                    self.graph.name(e.target)
                ));
            }
        }
        files.push(("links.txt".into(), links.into_bytes()));

        files.push(("vocab.txt".into(), self.tokens.vocab.serialize().into_bytes()));

        let manifest = WorldManifest {
            schema: SCHEMA_VERSION,
            config: self.config.clone(),
        };
        let mut manifest_json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| WorldError::Manifest(e.to_string()))?;
        manifest_json.push('\n');
        files.push(("world.json".into(), manifest_json.into_bytes()));

        for (&id, fmap) in &self.features {
            let mut bytes = Vec::new();
            fmap.write_to(&mut bytes).expect("vec write");
            files.push((format!("features/{}.fmap", self.graph.name(id)), bytes));
        }

        let mut sdr = Vec::new();
        for e in self.sdr_train.iter().chain(&self.sdr_dev) {
            crate::harness::write_sdr_line(&mut sdr, &self.graph, e)?;
        }
        files.push(("sdr.jsonl".into(), sdr));

        let mut nav = Vec::new();
        for e in self.nav_train.iter().chain(&self.nav_dev) {
            crate::harness::write_nav_line(&mut nav, &self.graph, e)?;
        }
        files.push(("nav.jsonl".into(), nav));

        let mut full = Vec::new();
        for pair in &self.full_task {
            crate::harness::write_full_task_line(&mut full, &self.graph, pair)?;
        }
        files.push(("full_task.jsonl".into(), full));

        files.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(files)
    }

    pub fn save(&self, dir: &Path) -> Result<(), WorldError> {
        let io_err = |path: &Path, source: std::io::Error| WorldError::Io {
            path: path.display().to_string(),
            source,
        };
        for (rel, bytes) in self.render_files()? {
            let path = dir.join(&rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            }
            let mut f = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            f.write_all(&bytes).map_err(|e| io_err(&path, e))?;
        }
        Ok(())
    }

    /// Loads a world directory through the dataset loaders, splitting the
    /// example files according to the manifest's counts.
    pub fn load(dir: &Path) -> Result<SyntheticWorld, WorldError> {
        let manifest_path = dir.join("world.json");
        let manifest_text =
            std::fs::read_to_string(&manifest_path).map_err(|e| WorldError::Io {
                path: manifest_path.display().to_string(),
                source: e,
            })?;
        let manifest: WorldManifest = serde_json::from_str(&manifest_text)
            .map_err(|e| WorldError::Manifest(format!("world.json: {e}")))?;
        if manifest.schema != SCHEMA_VERSION {
            return Err(WorldError::Manifest(format!(
                "unsupported schema {}",
                manifest.schema
            )));
        }
        let config = manifest.config;
        let dataset = crate::harness::load_dataset(dir)?;
        let crate::harness::Dataset {
            graph,
            vocab,
            features,
            mut sdr,
            mut nav,
            full_task,
        } = dataset;
        if sdr.len() != config.sdr_train + config.sdr_dev {
            return Err(WorldError::Manifest(format!(
                "sdr.jsonl has {} examples, manifest expects {}",
                sdr.len(),
                config.sdr_train + config.sdr_dev
            )));
        }
        if nav.len() != config.nav_train + config.nav_dev {
            return Err(WorldError::Manifest(format!(
                "nav.jsonl has {} examples, manifest expects {}",
                nav.len(),
                config.nav_train + config.nav_dev
            )));
        }
        let sdr_dev = sdr.split_off(config.sdr_train);
        let nav_dev = nav.split_off(config.nav_train);
        let tokens = WorldVocab::build(config.marker_classes, config.vocab_size)?;
        if tokens.vocab != vocab {
            return Err(WorldError::Manifest(
                "vocab.txt does not match the manifest's marker/vocab configuration".into(),
            ));
        }
        Ok(SyntheticWorld {
            config,
            graph,
            tokens,
            features,
            sdr_train: sdr,
            sdr_dev,
            nav_train: nav,
            nav_dev,
            full_task,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            seed,
            grid_rows: 6,
            grid_cols: 6,
            sdr_train: 8,
            sdr_dev: 4,
            sdr_group_size: 2,
            nav_train: 4,
            nav_dev: 2,
            full_task: 2,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = SyntheticWorld::generate(small_config(7)).unwrap();
        let b = SyntheticWorld::generate(small_config(7)).unwrap();
        assert_eq!(a.render_files().unwrap(), b.render_files().unwrap());
        let c = SyntheticWorld::generate(small_config(8)).unwrap();
        assert_ne!(a.render_files().unwrap(), c.render_files().unwrap());
    }

    #[test]
    fn targets_sit_on_named_markers() {
        let world = SyntheticWorld::generate(small_config(3)).unwrap();
        let scale = world.scale();
        for e in world.sdr_train.iter().chain(&world.sdr_dev) {
            let fmap = world.features[&e.pano].clone();
            let col = (e.target_x / scale).floor() as usize;
            let row = (e.target_y / scale).floor() as usize;
            // The named class token is the third token of the template.
            let class = e.tokens.ids()[2] - world.tokens.marker0;
            let ch = marker_channel(&world.config, class);
            assert!(
                fmap.get(ch, row, col) >= MARKER_AMP - 1.0,
                "target cell lacks its marker"
            );
            // The named side matches the target column's third.
            let side = e.tokens.ids()[3] - world.tokens.side0;
            let (lo, hi) = third_bounds(world.config.feature_width, side);
            assert!((lo..hi).contains(&col));
        }
    }

    #[test]
    fn sentences_group_examples() {
        let world = SyntheticWorld::generate(small_config(4)).unwrap();
        let mut counts = std::collections::HashMap::new();
        for e in &world.sdr_train {
            *counts.entry(e.sentence_id).or_insert(0usize) += 1;
        }
        assert!(counts.values().all(|&c| c == 2));
        // Panoramas are unique across location examples.
        let mut seen = HashSet::new();
        for e in world.sdr_train.iter().chain(&world.sdr_dev) {
            assert!(seen.insert(e.pano), "panorama reused across examples");
        }
    }

    #[test]
    fn nav_examples_replay_and_need_more_than_stopping() {
        let world = SyntheticWorld::generate(small_config(5)).unwrap();
        for e in world.nav_train.iter().chain(&world.nav_dev) {
            let route = Route::new(&world.graph, e.route.clone()).unwrap();
            let demo =
                demonstration_from_route(&world.graph, &route, e.start.heading).unwrap();
            assert_eq!(demo.collapsed_panos(), e.route);
            // Shortest-path routes of length >= 4 put the goal at least 3
            // hops out, so the stop baseline never completes the task.
            let hops = world
                .graph
                .shortest_path_hops(e.start.pano, e.goal)
                .unwrap()
                .unwrap();
            assert!(hops >= 2, "goal within stop-baseline reach");
        }
    }

    #[test]
    fn full_task_targets_live_on_goals() {
        let world = SyntheticWorld::generate(small_config(6)).unwrap();
        assert_eq!(world.full_task.len(), 2);
        for pair in &world.full_task {
            assert_eq!(pair.nav.goal, pair.sdr.pano);
        }
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let mut c = small_config(0);
        c.sdr_train = 100; // 100 + 4 + 2 examples > 36 nodes
        assert!(matches!(
            SyntheticWorld::generate(c),
            Err(WorldError::Config(_))
        ));
        let mut c = small_config(0);
        c.marker_classes = 10; // exceeds feature channels - 2
        assert!(matches!(
            SyntheticWorld::generate(c),
            Err(WorldError::Config(_))
        ));
    }

    #[test]
    fn random_graphs_are_valid_and_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let g = random_connected_graph(&mut rng, 12);
            for id in g.node_ids() {
                assert!(!g.half_edges(id).unwrap().is_empty());
                let first = NodeId(0);
                assert!(g.shortest_path_hops(first, id).unwrap().is_some());
            }
        }
    }
}
