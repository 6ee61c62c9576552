//! Dataset directory loading with per-line diagnostics, and the lazy
//! feature provider.
//!
//! A dataset directory holds `nodes.txt` and `links.txt` (the graph),
//! `vocab.txt`, `features/<pano>.fmap`, `sdr.jsonl`, `nav.jsonl`, and
//! optionally `full_task.jsonl`. Example lines may carry either `tokens`
//! (an id array) or `text` (whitespace-tokenized against the vocabulary).

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, NodeId, PanoGraph, State};
use crate::nav::NavExample;
use crate::sdr::{FeatureMap, FeatureSource, SdrError, SdrExample};
use crate::text::{TextError, TokenSeq, Vocabulary};
use crate::world::FullTaskExample;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Graph {
        path: String,
        source: GraphError,
    },
    #[error("{path}: {source}")]
    Vocab { path: String, source: TextError },
    #[error("{file} line {line}: {msg}")]
    Schema {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("missing feature file for panorama `{pano}` (expected {path})")]
    MissingFeature { pano: String, path: String },
    #[error("{path}: {source}")]
    Feature { path: String, source: SdrError },
}

/// LRU-bounded loader for `.fmap` files keyed by panorama.
#[derive(Debug)]
pub struct LazyFeatures {
    dir: PathBuf,
    names: Vec<String>,
    capacity: usize,
    cache: RefCell<(HashMap<NodeId, Rc<FeatureMap>>, VecDeque<NodeId>)>,
}

impl LazyFeatures {
    pub fn new(dir: PathBuf, graph: &PanoGraph, capacity: usize) -> LazyFeatures {
        LazyFeatures {
            dir,
            names: graph.node_ids().map(|id| graph.name(id).to_string()).collect(),
            capacity: capacity.max(1),
            cache: RefCell::new((HashMap::new(), VecDeque::new())),
        }
    }

    pub fn path_for(&self, pano: NodeId) -> PathBuf {
        self.dir.join(format!("{}.fmap", self.names[pano.index()]))
    }

    /// Cheap existence check used by the loader's validation pass.
    pub fn verify(&self, pano: NodeId) -> Result<(), DatasetError> {
        let path = self.path_for(pano);
        if path.is_file() {
            Ok(())
        } else {
            Err(DatasetError::MissingFeature {
                pano: self.names[pano.index()].clone(),
                path: path.display().to_string(),
            })
        }
    }
}

impl FeatureSource for LazyFeatures {
    fn features(&self, pano: NodeId) -> Result<Rc<FeatureMap>, SdrError> {
        {
            let mut cache = self.cache.borrow_mut();
            if let Some(hit) = cache.0.get(&pano).cloned() {
                let (_, order) = &mut *cache;
                if let Some(at) = order.iter().position(|&p| p == pano) {
                    order.remove(at);
                }
                order.push_back(pano);
                return Ok(hit);
            }
        }
        let path = self.path_for(pano);
        let mut file = std::fs::File::open(&path).map_err(|e| {
            SdrError::FeatureFile(format!("{}: {e}", path.display()))
        })?;
        let fmap = Rc::new(FeatureMap::read_from(&mut file).map_err(|e| {
            SdrError::FeatureFile(format!("{}: {e}", path.display()))
        })?);
        let mut cache = self.cache.borrow_mut();
        if cache.0.len() >= self.capacity {
            if let Some(evict) = cache.1.pop_front() {
                cache.0.remove(&evict);
            }
        }
        cache.0.insert(pano, Rc::clone(&fmap));
        cache.1.push_back(pano);
        Ok(fmap)
    }
}

/// A fully validated in-memory dataset. Feature grids are loaded eagerly
/// here; use [`load_dataset_lazy`] for the LRU-backed provider.
#[derive(Debug)]
pub struct Dataset {
    pub graph: PanoGraph,
    pub vocab: Vocabulary,
    pub features: BTreeMap<NodeId, Rc<FeatureMap>>,
    pub sdr: Vec<SdrExample>,
    pub nav: Vec<NavExample>,
    pub full_task: Vec<FullTaskExample>,
}

/// Like [`Dataset`] but with features behind the lazy provider.
#[derive(Debug)]
pub struct LazyDataset {
    pub graph: PanoGraph,
    pub vocab: Vocabulary,
    pub features: LazyFeatures,
    pub sdr: Vec<SdrExample>,
    pub nav: Vec<NavExample>,
    pub full_task: Vec<FullTaskExample>,
}

// Serialized example-line shapes. Field order here is the on-disk order.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SdrLine {
    sentence_id: u64,
    pano: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    target_x: f64,
    target_y: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NavLine {
    id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    start_pano: String,
    start_heading: f64,
    route: Vec<String>,
    goal_pano: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FullTaskLine {
    nav: NavLine,
    sdr: SdrLine,
}

pub fn write_sdr_line(
    out: &mut Vec<u8>,
    graph: &PanoGraph,
    e: &SdrExample,
) -> Result<(), DatasetError> {
    let line = sdr_to_line(graph, e);
    serde_json::to_writer(&mut *out, &line).expect("in-memory serialization");
    out.push(b'\n');
    Ok(())
}

pub fn write_nav_line(
    out: &mut Vec<u8>,
    graph: &PanoGraph,
    e: &NavExample,
) -> Result<(), DatasetError> {
    let line = nav_to_line(graph, e);
    serde_json::to_writer(&mut *out, &line).expect("in-memory serialization");
    out.push(b'\n');
    Ok(())
}

pub fn write_full_task_line(
    out: &mut Vec<u8>,
    graph: &PanoGraph,
    pair: &FullTaskExample,
) -> Result<(), DatasetError> {
    let line = FullTaskLine {
        nav: nav_to_line(graph, &pair.nav),
        sdr: sdr_to_line(graph, &pair.sdr),
    };
    serde_json::to_writer(&mut *out, &line).expect("in-memory serialization");
    out.push(b'\n');
    Ok(())
}

fn sdr_to_line(graph: &PanoGraph, e: &SdrExample) -> SdrLine {
    SdrLine {
        sentence_id: e.sentence_id,
        pano: graph.name(e.pano).to_string(),
        tokens: Some(e.tokens.ids().to_vec()),
        text: None,
        target_x: e.target_x,
        target_y: e.target_y,
    }
}

fn nav_to_line(graph: &PanoGraph, e: &NavExample) -> NavLine {
    NavLine {
        id: e.id,
        tokens: Some(e.tokens.ids().to_vec()),
        text: None,
        start_pano: graph.name(e.start.pano).to_string(),
        start_heading: e.start.heading,
        route: e.route.iter().map(|&p| graph.name(p).to_string()).collect(),
        goal_pano: graph.name(e.goal).to_string(),
    }
}

fn schema_err(file: &str, line: usize, msg: impl Into<String>) -> DatasetError {
    DatasetError::Schema {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

fn resolve_tokens(
    file: &str,
    line: usize,
    tokens: Option<Vec<usize>>,
    text: Option<String>,
    vocab: &Vocabulary,
) -> Result<TokenSeq, DatasetError> {
    let ids = match (tokens, text) {
        (Some(ids), None) => ids,
        (None, Some(text)) => vocab.tokenize(&text),
        (Some(_), Some(_)) => {
            return Err(schema_err(file, line, "both `tokens` and `text` present"))
        }
        (None, None) => return Err(schema_err(file, line, "need `tokens` or `text`")),
    };
    TokenSeq::new(ids, vocab.len()).map_err(|e| schema_err(file, line, e.to_string()))
}

fn lookup(file: &str, line: usize, graph: &PanoGraph, name: &str) -> Result<NodeId, DatasetError> {
    graph
        .node(name)
        .ok_or_else(|| schema_err(file, line, format!("unknown panorama `{name}`")))
}

fn sdr_from_line(
    file: &str,
    line_no: usize,
    line: SdrLine,
    graph: &PanoGraph,
    vocab: &Vocabulary,
) -> Result<SdrExample, DatasetError> {
    let pano = lookup(file, line_no, graph, &line.pano)?;
    if !line.target_x.is_finite() || !line.target_y.is_finite()
        || line.target_x < 0.0 || line.target_y < 0.0
    {
        return Err(schema_err(file, line_no, "target coordinates must be finite and non-negative"));
    }
    Ok(SdrExample {
        sentence_id: line.sentence_id,
        pano,
        tokens: resolve_tokens(file, line_no, line.tokens, line.text, vocab)?,
        target_x: line.target_x,
        target_y: line.target_y,
    })
}

fn nav_from_line(
    file: &str,
    line_no: usize,
    line: NavLine,
    graph: &PanoGraph,
    vocab: &Vocabulary,
) -> Result<NavExample, DatasetError> {
    let start_pano = lookup(file, line_no, graph, &line.start_pano)?;
    let goal = lookup(file, line_no, graph, &line.goal_pano)?;
    let route: Vec<NodeId> = line
        .route
        .iter()
        .map(|name| lookup(file, line_no, graph, name))
        .collect::<Result<_, _>>()?;
    if route.first() != Some(&start_pano) {
        return Err(schema_err(file, line_no, "route must begin at start_pano"));
    }
    if route.last() != Some(&goal) {
        return Err(schema_err(file, line_no, "route must end at goal_pano"));
    }
    crate::routes::Route::new(graph, route.clone())
        .map_err(|e| schema_err(file, line_no, e.to_string()))?;
    let start = State {
        pano: start_pano,
        heading: line.start_heading,
    };
    if !graph.is_valid_state(start) {
        return Err(schema_err(
            file,
            line_no,
            format!(
                "start heading {} is not on an edge of `{}`",
                line.start_heading, line.start_pano
            ),
        ));
    }
    Ok(NavExample {
        id: line.id,
        tokens: resolve_tokens(file, line_no, line.tokens, line.text, vocab)?,
        start,
        route,
        goal,
    })
}

fn parse_jsonl<T: for<'de> Deserialize<'de>, U>(
    file: &str,
    content: &str,
    mut convert: impl FnMut(usize, T) -> Result<U, DatasetError>,
) -> Result<Vec<U>, DatasetError> {
    let mut out = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: T = serde_json::from_str(raw)
            .map_err(|e| schema_err(file, i + 1, e.to_string()))?;
        out.push(convert(i + 1, parsed)?);
    }
    Ok(out)
}

fn read(dir: &Path, name: &str) -> Result<String, DatasetError> {
    let path = dir.join(name);
    std::fs::read_to_string(&path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Loads and validates a dataset directory, keeping features behind an
/// LRU-bounded lazy provider. Every example-referenced panorama must have
/// a feature file.
pub fn load_dataset_lazy(dir: &Path) -> Result<LazyDataset, DatasetError> {
    let nodes = read(dir, "nodes.txt")?;
    let links = read(dir, "links.txt")?;
    let graph = crate::graph::load_graph(&nodes, &links).map_err(|e| DatasetError::Graph {
        path: dir.join("links.txt").display().to_string(),
        source: e,
    })?;
    let vocab = Vocabulary::parse(&read(dir, "vocab.txt")?).map_err(|e| DatasetError::Vocab {
        path: dir.join("vocab.txt").display().to_string(),
        source: e,
    })?;

    let sdr = parse_jsonl("sdr.jsonl", &read(dir, "sdr.jsonl")?, |line_no, line| {
        sdr_from_line("sdr.jsonl", line_no, line, &graph, &vocab)
    })?;
    let nav = parse_jsonl("nav.jsonl", &read(dir, "nav.jsonl")?, |line_no, line| {
        nav_from_line("nav.jsonl", line_no, line, &graph, &vocab)
    })?;
    let full_task = if dir.join("full_task.jsonl").is_file() {
        parse_jsonl(
            "full_task.jsonl",
            &read(dir, "full_task.jsonl")?,
            |line_no, line: FullTaskLine| {
                Ok(FullTaskExample {
                    nav: nav_from_line("full_task.jsonl", line_no, line.nav, &graph, &vocab)?,
                    sdr: sdr_from_line("full_task.jsonl", line_no, line.sdr, &graph, &vocab)?,
                })
            },
        )?
    } else {
        Vec::new()
    };

    let features = LazyFeatures::new(dir.join("features"), &graph, 256);
    for e in &sdr {
        features.verify(e.pano)?;
    }
    for e in &nav {
        for &p in &e.route {
            features.verify(p)?;
        }
    }
    for pair in &full_task {
        features.verify(pair.sdr.pano)?;
    }

    Ok(LazyDataset {
        graph,
        vocab,
        features,
        sdr,
        nav,
        full_task,
    })
}

/// Loads a dataset eagerly: every node's feature grid in memory.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let lazy = load_dataset_lazy(dir)?;
    let mut features = BTreeMap::new();
    for id in lazy.graph.node_ids() {
        lazy.features.verify(id)?;
        let fmap = lazy.features.features(id).map_err(|e| DatasetError::Feature {
            path: lazy.features.path_for(id).display().to_string(),
            source: e,
        })?;
        features.insert(id, fmap);
    }
    Ok(Dataset {
        graph: lazy.graph,
        vocab: lazy.vocab,
        features,
        sdr: lazy.sdr,
        nav: lazy.nav,
        full_task: lazy.full_task,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{SyntheticConfig, SyntheticWorld};

    fn tiny_world(seed: u64) -> SyntheticWorld {
        SyntheticWorld::generate(SyntheticConfig {
            seed,
            grid_rows: 5,
            grid_cols: 5,
            sdr_train: 6,
            sdr_dev: 2,
            sdr_group_size: 2,
            nav_train: 3,
            nav_dev: 1,
            full_task: 1,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let world = tiny_world(12);
        let dir = tempfile::tempdir().unwrap();
        world.save(dir.path()).unwrap();
        let loaded = SyntheticWorld::load(dir.path()).unwrap();
        assert_eq!(
            world.render_files().unwrap(),
            loaded.render_files().unwrap()
        );
    }

    #[test]
    fn sdr_line_missing_field_names_the_line() {
        let world = tiny_world(13);
        let dir = tempfile::tempdir().unwrap();
        world.save(dir.path()).unwrap();
        // Drop target_y from the second line.
        let path = dir.path().join("sdr.jsonl");
        let content = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = content.lines().map(String::from).collect();
        lines[1] = lines[1].replace(",\"target_y\":", ",\"dropped\":");
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        match err {
            DatasetError::Schema { file, line, .. } => {
                assert_eq!(file, "sdr.jsonl");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_feature_file_is_reported() {
        let world = tiny_world(14);
        let dir = tempfile::tempdir().unwrap();
        world.save(dir.path()).unwrap();
        let victim = world.sdr_train[0].pano;
        let path = dir
            .path()
            .join("features")
            .join(format!("{}.fmap", world.graph.name(victim)));
        std::fs::remove_file(&path).unwrap();
        let err = load_dataset_lazy(dir.path()).unwrap_err();
        assert!(matches!(err, DatasetError::MissingFeature { .. }), "{err}");
    }

    #[test]
    fn text_field_tokenizes_against_vocab() {
        let world = tiny_world(15);
        let dir = tempfile::tempdir().unwrap();
        world.save(dir.path()).unwrap();
        let path = dir.path().join("sdr.jsonl");
        let content = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = content.lines().map(String::from).collect();
        // Rewrite the first line to use `text` instead of `tokens`.
        let mut v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
        v.as_object_mut().unwrap().remove("tokens");
        v.as_object_mut()
            .unwrap()
            .insert("text".into(), "find the mk0 side_left".into());
        lines[0] = serde_json::to_string(&v).unwrap();
        std::fs::write(&path, lines.join("\n")).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        let vocab = &loaded.vocab;
        let expect = vec![
            vocab.id("find").unwrap(),
            vocab.id("the").unwrap(),
            vocab.id("mk0").unwrap(),
            vocab.id("side_left").unwrap(),
        ];
        assert_eq!(loaded.sdr[0].tokens.ids(), &expect[..]);
    }

    #[test]
    fn lru_cache_evicts_but_stays_correct() {
        let world = tiny_world(16);
        let dir = tempfile::tempdir().unwrap();
        world.save(dir.path()).unwrap();
        let lazy = load_dataset_lazy(dir.path()).unwrap();
        let small = LazyFeatures::new(
            dir.path().join("features"),
            &lazy.graph,
            2,
        );
        let ids: Vec<NodeId> = lazy.graph.node_ids().take(5).collect();
        for &id in &ids {
            let fm = small.features(id).unwrap();
            assert_eq!(fm.channels(), world.config.feature_channels);
        }
        // Re-read the first id after eviction; contents still match.
        let direct = world.features[&ids[0]].clone();
        let reread = small.features(ids[0]).unwrap();
        assert_eq!(*reread, *direct);
    }
}
