//! Experiment dispatch: one entry point per CLI subcommand, each producing
//! a [`Report`].

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{parse_conv_stack, ConfigMap, DATA_ENV};
use super::report::{ExampleRecord, Report};
use super::HarnessError;
use crate::metrics::{grid_radius, sdr_accuracy, sdr_consistency, sdr_mean_distance};
use crate::nav::{
    eval_nav, full_task_pipeline, train_nav, Ablation, BaselinePolicy, ConvSpec, LearnedPolicy,
    MeanCache, NavModel, NavModelConfig, NavModelKind, NavTrainConfig, RolloutMode,
    DEFAULT_ASYNC_WORKERS, TEST_HORIZON, TRAIN_HORIZON,
};
use crate::sdr::{
    default_sdr_lr, eval_baseline, eval_sdr, train_sdr, PointBaseline, SdrEvalOutcome,
    SdrExample, SdrModelKind, SdrPredictor, SdrPredictorConfig, SdrTrainConfig,
};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore};
use crate::world::{SyntheticConfig, SyntheticWorld};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenWorld,
    TrainSdr,
    EvalSdr,
    TrainNav,
    EvalNav,
    FullTask,
    Metrics,
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenWorld => "gen-world",
            Command::TrainSdr => "train-sdr",
            Command::EvalSdr => "eval-sdr",
            Command::TrainNav => "train-nav",
            Command::EvalNav => "eval-nav",
            Command::FullTask => "full-task",
            Command::Metrics => "metrics",
            Command::Gradcheck => "gradcheck",
        }
    }
}

/// A fully specified run: the subcommand, its configuration, and the
/// standard flag overrides.
pub struct Invocation {
    pub command: Command,
    pub config: ConfigMap,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Invocation {
    pub fn new(command: Command, config: ConfigMap) -> Invocation {
        Invocation {
            command,
            config,
            seed: None,
            deterministic: false,
            workers: None,
            out: None,
        }
    }
}

fn data_dir(cfg: &ConfigMap) -> Result<PathBuf, HarnessError> {
    if let Some(dir) = cfg.get_opt_str("data") {
        return Ok(PathBuf::from(dir));
    }
    match std::env::var(DATA_ENV) {
        Ok(dir) if !dir.is_empty() => Ok(PathBuf::from(dir)),
        _ => Err(HarnessError::Config(format!(
            "no data directory: set the `data` config key or the {DATA_ENV} environment variable"
        ))),
    }
}

fn load_world(cfg: &ConfigMap) -> Result<SyntheticWorld, HarnessError> {
    let dir = data_dir(cfg)?;
    Ok(SyntheticWorld::load(&dir)?)
}

fn resolve_workers(inv: &Invocation) -> Result<usize, HarnessError> {
    if inv.deterministic {
        return Ok(1);
    }
    if let Some(w) = inv.workers {
        return Ok(w.max(1));
    }
    let asynchronous = inv.config.get_bool("async", false)?;
    let configured: Option<usize> = inv.config.get_opt("workers")?;
    Ok(match (asynchronous, configured) {
        (_, Some(w)) => w.max(1),
        (true, None) => DEFAULT_ASYNC_WORKERS,
        (false, None) => 1,
    })
}

/// Dispatches a run and stamps the report with the resolved configuration
/// and wall-clock time.
pub fn run_experiment(inv: &Invocation) -> Result<Report, HarnessError> {
    let started = Instant::now();
    let seed = match inv.seed {
        Some(s) => s,
        None => inv.config.get("seed", 0u64)?,
    };
    let mut report = Report::new(inv.command.name(), seed, inv.deterministic);
    match inv.command {
        Command::GenWorld => gen_world(inv, seed, &mut report)?,
        Command::TrainSdr => train_sdr_cmd(inv, seed, &mut report)?,
        Command::EvalSdr => eval_sdr_cmd(inv, seed, &mut report)?,
        Command::TrainNav => train_nav_cmd(inv, seed, &mut report)?,
        Command::EvalNav => eval_nav_cmd(inv, seed, &mut report)?,
        Command::FullTask => full_task_cmd(inv, seed, &mut report)?,
        Command::Metrics => metrics_cmd(inv, &mut report)?,
        Command::Gradcheck => gradcheck_cmd(&mut report)?,
    }
    report.config = inv.config.resolved();
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

// ---------------------------------------------------------------------------
// gen-world
// ---------------------------------------------------------------------------

fn gen_world(inv: &Invocation, seed: u64, report: &mut Report) -> Result<(), HarnessError> {
    let cfg = &inv.config;
    let d = SyntheticConfig::default();
    let world_config = SyntheticConfig {
        seed,
        grid_rows: cfg.get("grid_rows", d.grid_rows)?,
        grid_cols: cfg.get("grid_cols", d.grid_cols)?,
        diagonal_prob: cfg.get("diagonal_prob", d.diagonal_prob)?,
        feature_channels: cfg.get("feature_channels", d.feature_channels)?,
        feature_height: cfg.get("feature_height", d.feature_height)?,
        feature_width: cfg.get("feature_width", d.feature_width)?,
        image_scale: cfg.get("image_scale", d.image_scale)?,
        marker_classes: cfg.get("marker_classes", d.marker_classes)?,
        vocab_size: cfg.get("vocab_size", d.vocab_size)?,
        sdr_train: cfg.get("sdr_train", d.sdr_train)?,
        sdr_dev: cfg.get("sdr_dev", d.sdr_dev)?,
        sdr_group_size: cfg.get("sdr_group_size", d.sdr_group_size)?,
        nav_train: cfg.get("nav_train", d.nav_train)?,
        nav_dev: cfg.get("nav_dev", d.nav_dev)?,
        nav_route_min: cfg.get("nav_route_min", d.nav_route_min)?,
        nav_route_max: cfg.get("nav_route_max", d.nav_route_max)?,
        obs_window: cfg.get("obs_window", d.obs_window)?,
        noise: cfg.get("noise", d.noise)?,
        full_task: cfg.get("full_task", d.full_task)?,
    };
    let out = inv
        .out
        .clone()
        .ok_or_else(|| HarnessError::Config("gen-world needs --out <directory>".into()))?;
    let world = SyntheticWorld::generate(world_config)?;
    world.save(&out)?;
    report.metric("nodes", world.graph.node_count() as f64);
    report.metric("edges", world.graph.edge_count() as f64);
    report.metric("sdr_train", world.sdr_train.len() as f64);
    report.metric("sdr_dev", world.sdr_dev.len() as f64);
    report.metric("nav_train", world.nav_train.len() as f64);
    report.metric("nav_dev", world.nav_dev.len() as f64);
    report.metric("full_task", world.full_task.len() as f64);
    Ok(())
}

// ---------------------------------------------------------------------------
// Location task commands
// ---------------------------------------------------------------------------

fn sdr_predictor_config(
    cfg: &ConfigMap,
    kind: SdrModelKind,
    world: &SyntheticWorld,
) -> Result<SdrPredictorConfig, HarnessError> {
    Ok(SdrPredictorConfig {
        kind,
        vocab_size: world.vocab().len(),
        channels: world.config.feature_channels,
        embed_dim: cfg.get("embed_dim", 300usize)?,
        text_hidden: cfg.get("text_hidden", 300usize)?,
        levels: cfg.get("levels", 2usize)?,
        mlp_hidden: cfg.get("mlp_hidden", 128usize)?,
        init_bound: 0.1,
    })
}

fn sdr_split<'w>(
    cfg: &ConfigMap,
    world: &'w SyntheticWorld,
) -> Result<&'w [SdrExample], HarnessError> {
    match cfg.get_str("split", "dev").as_str() {
        "dev" => Ok(&world.sdr_dev),
        "train" => Ok(&world.sdr_train),
        other => Err(HarnessError::Config(format!(
            "split must be `train` or `dev`, got `{other}`"
        ))),
    }
}

fn report_sdr_outcome(
    report: &mut Report,
    cfg: &ConfigMap,
    outcome: &SdrEvalOutcome,
    scale: f64,
) -> Result<(), HarnessError> {
    let radii = cfg.get_f64_list("radii", "40,80,120")?;
    for r in radii {
        report.metric(
            &format!("accuracy@{r}px"),
            sdr_accuracy(&outcome.grid, grid_radius(r, scale)),
        );
        report.metric(
            &format!("consistency@{r}px"),
            sdr_consistency(&outcome.grid, grid_radius(r, scale)),
        );
    }
    report.metric("mean_distance_px", sdr_mean_distance(&outcome.image));
    report.metric("examples", outcome.image.len() as f64);
    for (i, rec) in outcome.image.iter().enumerate() {
        let mut values = BTreeMap::new();
        values.insert("pred_x".to_string(), rec.predicted.0);
        values.insert("pred_y".to_string(), rec.predicted.1);
        values.insert("gold_x".to_string(), rec.gold.0);
        values.insert("gold_y".to_string(), rec.gold.1);
        values.insert("sentence_id".to_string(), rec.sentence_id as f64);
        let d = ((rec.predicted.0 - rec.gold.0).powi(2)
            + (rec.predicted.1 - rec.gold.1).powi(2))
        .sqrt();
        values.insert("distance_px".to_string(), d);
        report.per_example.push(ExampleRecord {
            id: i.to_string(),
            values,
        });
    }
    Ok(())
}

fn train_sdr_cmd(inv: &Invocation, seed: u64, report: &mut Report) -> Result<(), HarnessError> {
    let cfg = &inv.config;
    let world = load_world(cfg)?;
    let name = cfg.get_str("model", "lingunet");
    let kind = SdrModelKind::parse(&name)
        .ok_or_else(|| HarnessError::Config(format!("`{name}` is not a trainable model")))?;
    let pcfg = sdr_predictor_config(cfg, kind, &world)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let predictor = SdrPredictor::init(&mut store, &pcfg, &mut rng)?;

    let tcfg = SdrTrainConfig {
        lr: match cfg.get_opt::<f64>("lr")? {
            Some(lr) => lr,
            None => default_sdr_lr(kind),
        },
        sigma: cfg.get("sigma", 3.0)?,
        scale: world.scale(),
        patience: cfg.get("patience", 4u32)?,
        max_epochs: cfg.get("max_epochs", 50usize)?,
        embed_dropout: cfg.get("dropout", 0.5)?,
        early_stop_radius_px: cfg.get("early_stop_radius_px", 80.0)?,
        seed,
    };
    // Early-stopping validation set: a fraction carved off the end of the
    // training split.
    let val_fraction: f64 = cfg.get("val_fraction", 0.07)?;
    let val_n = ((world.sdr_train.len() as f64 * val_fraction).ceil() as usize)
        .clamp(1, world.sdr_train.len().saturating_sub(1));
    let (train, val) = world.sdr_train.split_at(world.sdr_train.len() - val_n);

    let (best, history) = train_sdr(&predictor, store, train, val, &world, &tcfg)?;
    report.metric("epochs_run", history.epochs.len() as f64);
    report.metric("best_epoch", history.best_epoch as f64);
    report.metric("best_val_metric", history.best_metric);
    if let Some(last) = history.epochs.last() {
        report.metric("final_train_loss", last.train_loss);
    }

    let outcome = eval_sdr(&predictor, &best, &world.sdr_dev, &world, world.scale())?;
    report_sdr_outcome(report, cfg, &outcome, world.scale())?;

    if let Some(path) = cfg.get_opt_str("checkpoint_out") {
        let mut file = std::fs::File::create(&path).map_err(|e| HarnessError::Io {
            path: path.clone(),
            source: e,
        })?;
        save_checkpoint(&best, &mut file).map_err(|e| HarnessError::Io {
            path,
            source: e,
        })?;
        report.metric("checkpoint_params", best.total_params() as f64);
    }
    Ok(())
}

fn eval_sdr_cmd(inv: &Invocation, seed: u64, report: &mut Report) -> Result<(), HarnessError> {
    let cfg = &inv.config;
    let world = load_world(cfg)?;
    let split = sdr_split(cfg, &world)?;
    let name = cfg.get_str("model", "center");
    let scale = world.scale();
    let outcome = match name.as_str() {
        "random" | "center" | "average" => {
            let kind = match name.as_str() {
                "random" => PointBaseline::Random,
                "center" => PointBaseline::Center,
                _ => PointBaseline::Average,
            };
            let (image_w, image_h) = world.image_dims();
            let targets: Vec<(f64, f64)> = world
                .sdr_train
                .iter()
                .map(|e| (e.target_x, e.target_y))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            eval_baseline(kind, split, image_w, image_h, &targets, scale, &mut rng)?
        }
        other => {
            let kind = SdrModelKind::parse(other).ok_or_else(|| {
                HarnessError::Config(format!("unknown location model `{other}`"))
            })?;
            let predictor_cfg = sdr_predictor_config(cfg, kind, &world)?;
            let path = cfg.get_opt_str("checkpoint").ok_or_else(|| {
                HarnessError::Config("evaluating a trained model needs `checkpoint`".into())
            })?;
            let mut file = std::fs::File::open(&path).map_err(|e| HarnessError::Io {
                path: path.clone(),
                source: e,
            })?;
            let store = load_checkpoint(&mut file)?;
            // Rebuild the wiring (not the values) to know the architecture.
            let mut scratch_rng = ChaCha8Rng::seed_from_u64(0);
            let mut scratch = ParamStore::new();
            let predictor = SdrPredictor::init(&mut scratch, &predictor_cfg, &mut scratch_rng)?;
            eval_sdr(&predictor, &store, split, &world, scale)?
        }
    };
    report_sdr_outcome(report, cfg, &outcome, scale)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Navigation commands
// ---------------------------------------------------------------------------

fn nav_model_config(
    cfg: &ConfigMap,
    kind: NavModelKind,
    world: &SyntheticWorld,
) -> Result<NavModelConfig, HarnessError> {
    let obs_h = world.config.feature_height;
    let obs_w = cfg.get("obs_window", world.config.obs_window)?;
    let conv = match cfg.get_str("conv", "auto").as_str() {
        "auto" => {
            if obs_w >= 100 && obs_h >= 100 {
                match kind {
                    NavModelKind::RConcat => NavModelConfig::rconcat_real(1, 1).conv,
                    NavModelKind::GatedAttention => NavModelConfig::ga_real(1, 1).conv,
                }
            } else {
                // Compact stack for desk-scale observations.
                vec![
                    ConvSpec {
                        out_channels: 8,
                        kernel: 4,
                        stride: 2,
                    },
                    ConvSpec {
                        out_channels: 16,
                        kernel: 3,
                        stride: 2,
                    },
                ]
            }
        }
        custom => parse_conv_stack(custom)?,
    };
    let default_obs_repr = match kind {
        NavModelKind::RConcat => 256usize,
        NavModelKind::GatedAttention => 64,
    };
    Ok(NavModelConfig {
        kind,
        vocab_size: world.vocab().len(),
        word_dim: cfg.get("word_dim", 32usize)?,
        text_hidden: cfg.get("text_hidden", 256usize)?,
        obs_h,
        obs_w,
        conv,
        obs_repr: cfg.get("obs_repr", default_obs_repr)?,
        action_embed: cfg.get("action_embed", 16usize)?,
        lstm_hidden: cfg.get("lstm_hidden", 256usize)?,
        time_embed: cfg.get("time_embed", 32usize)?,
        horizon: cfg.get("horizon_train", TRAIN_HORIZON)?,
        gated_repr: cfg.get("gated_repr", 256usize)?,
        init_bound: 0.1,
    })
}

fn ablation_from(cfg: &ConfigMap) -> Result<Ablation, HarnessError> {
    let raw = cfg.get_str("ablation", "none");
    Ablation::parse(&raw)
        .ok_or_else(|| HarnessError::Config(format!("unknown ablation `{raw}`")))
}

fn report_nav_records(
    report: &mut Report,
    records: &[crate::metrics::NavEvalRecord],
    examples: &[crate::nav::NavExample],
    graph: &crate::graph::PanoGraph,
) -> Result<(), HarnessError> {
    report.metric("tc", crate::metrics::tc_rate(records, graph)?);
    report.metric("spd", crate::metrics::spd(records, graph)?);
    report.metric("sed", crate::metrics::sed(records, graph)?);
    report.metric("examples", records.len() as f64);
    for (rec, example) in records.iter().zip(examples) {
        let final_pano = rec.predicted.final_state().pano;
        let hops = graph
            .shortest_path_hops(final_pano, rec.goal)?
            .unwrap_or(usize::MAX);
        let success = crate::metrics::task_completion(final_pano, rec.goal, graph)?;
        let mut values = BTreeMap::new();
        values.insert("final_hops".to_string(), hops as f64);
        values.insert("success".to_string(), f64::from(u8::from(success)));
        values.insert("steps".to_string(), rec.predicted.len() as f64);
        report.per_example.push(ExampleRecord {
            id: example.id.to_string(),
            values,
        });
    }
    Ok(())
}

fn train_nav_cmd(inv: &Invocation, seed: u64, report: &mut Report) -> Result<(), HarnessError> {
    let cfg = &inv.config;
    let world = load_world(cfg)?;
    let name = cfg.get_str("model", "rconcat");
    let kind = NavModelKind::parse(&name)
        .ok_or_else(|| HarnessError::Config(format!("`{name}` is not a trainable policy")))?;
    let ncfg = nav_model_config(cfg, kind, &world)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = NavModel::init(&mut store, "nav", ncfg, &mut rng)?;
    let tcfg = NavTrainConfig {
        lr: cfg.get("lr", 2.5e-4)?,
        patience: cfg.get("patience", 5u32)?,
        max_epochs: cfg.get("max_epochs", 150usize)?,
        eval_horizon: cfg.get("horizon_eval", TEST_HORIZON)?,
        seed,
        workers: resolve_workers(inv)?,
        ablation: ablation_from(cfg)?,
    };
    let obs = MeanCache::new(&world);
    let (best, history) = train_nav(
        &model,
        store,
        &world.nav_train,
        &world.nav_dev,
        &world.graph,
        &obs,
        &tcfg,
    )?;
    report.metric("epochs_run", history.epochs.len() as f64);
    report.metric("best_epoch", history.best_epoch as f64);
    report.metric("best_dev_spd", history.best_spd);
    report.metric("workers", tcfg.workers as f64);

    let records = eval_nav(
        &model,
        &best,
        &world.graph,
        &obs,
        &world.nav_dev,
        tcfg.eval_horizon,
        tcfg.ablation,
        seed,
    )?;
    report_nav_records(report, &records, &world.nav_dev, &world.graph)?;

    if let Some(path) = cfg.get_opt_str("checkpoint_out") {
        let mut file = std::fs::File::create(&path).map_err(|e| HarnessError::Io {
            path: path.clone(),
            source: e,
        })?;
        save_checkpoint(&best, &mut file).map_err(|e| HarnessError::Io {
            path,
            source: e,
        })?;
        report.metric("checkpoint_params", best.total_params() as f64);
    }
    Ok(())
}

fn nav_split<'w>(
    cfg: &ConfigMap,
    world: &'w SyntheticWorld,
) -> Result<&'w [crate::nav::NavExample], HarnessError> {
    match cfg.get_str("split", "dev").as_str() {
        "dev" => Ok(&world.nav_dev),
        "train" => Ok(&world.nav_train),
        other => Err(HarnessError::Config(format!(
            "split must be `train` or `dev`, got `{other}`"
        ))),
    }
}

fn eval_nav_cmd(inv: &Invocation, seed: u64, report: &mut Report) -> Result<(), HarnessError> {
    let cfg = &inv.config;
    let world = load_world(cfg)?;
    let examples = nav_split(cfg, &world)?;
    let horizon = cfg.get("horizon_eval", TEST_HORIZON)?;
    let mode_raw = cfg.get_str("mode", "greedy");
    let mode = RolloutMode::parse(&mode_raw)
        .ok_or_else(|| HarnessError::Config(format!("unknown rollout mode `{mode_raw}`")))?;
    let name = cfg.get_str("model", "stop");
    let obs = MeanCache::new(&world);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let records = if let Some(mut baseline) = BaselinePolicy::parse(&name) {
        let mut records = Vec::with_capacity(examples.len());
        for example in examples {
            let predicted = crate::nav::rollout(
                &mut baseline,
                &world.graph,
                &obs,
                example,
                horizon,
                mode,
                &mut rng,
            )?;
            let route = crate::routes::Route::new(&world.graph, example.route.clone())?;
            let reference = crate::routes::demonstration_from_route(
                &world.graph,
                &route,
                example.start.heading,
            )?;
            records.push(crate::metrics::NavEvalRecord {
                predicted,
                reference,
                goal: example.goal,
            });
        }
        records
    } else {
        let kind = NavModelKind::parse(&name)
            .ok_or_else(|| HarnessError::Config(format!("unknown policy `{name}`")))?;
        let ncfg = nav_model_config(cfg, kind, &world)?;
        let path = cfg.get_opt_str("checkpoint").ok_or_else(|| {
            HarnessError::Config("evaluating a trained policy needs `checkpoint`".into())
        })?;
        let mut file = std::fs::File::open(&path).map_err(|e| HarnessError::Io {
            path: path.clone(),
            source: e,
        })?;
        let store = load_checkpoint(&mut file)?;
        let mut scratch_rng = ChaCha8Rng::seed_from_u64(0);
        let mut scratch = ParamStore::new();
        let model = NavModel::init(&mut scratch, "nav", ncfg, &mut scratch_rng)?;
        eval_nav(
            &model,
            &store,
            &world.graph,
            &obs,
            examples,
            horizon,
            ablation_from(cfg)?,
            seed,
        )?
    };
    report_nav_records(report, &records, examples, &world.graph)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// full-task, metrics, gradcheck
// ---------------------------------------------------------------------------

fn full_task_cmd(inv: &Invocation, seed: u64, report: &mut Report) -> Result<(), HarnessError> {
    let cfg = &inv.config;
    let world = load_world(cfg)?;
    let radius = cfg.get("radius", 80.0)?;
    let horizon = cfg.get("horizon_eval", TEST_HORIZON)?;
    let obs = MeanCache::new(&world);

    // Location side: a trained model and its checkpoint.
    let sdr_name = cfg.get_str("sdr_model", "lingunet");
    let sdr_kind = SdrModelKind::parse(&sdr_name)
        .ok_or_else(|| HarnessError::Config(format!("unknown location model `{sdr_name}`")))?;
    let sdr_cfg = sdr_predictor_config(cfg, sdr_kind, &world)?;
    let sdr_path = cfg
        .get_opt_str("sdr_checkpoint")
        .ok_or_else(|| HarnessError::Config("full-task needs `sdr_checkpoint`".into()))?;
    let mut file = std::fs::File::open(&sdr_path).map_err(|e| HarnessError::Io {
        path: sdr_path.clone(),
        source: e,
    })?;
    let sdr_store = load_checkpoint(&mut file)?;
    let mut scratch_rng = ChaCha8Rng::seed_from_u64(0);
    let mut scratch = ParamStore::new();
    let sdr_predictor = SdrPredictor::init(&mut scratch, &sdr_cfg, &mut scratch_rng)?;

    // Navigation side: a baseline or a trained policy.
    let nav_name = cfg.get_str("nav_model", "rconcat");
    let nav_learned = if BaselinePolicy::parse(&nav_name).is_none() {
        let kind = NavModelKind::parse(&nav_name)
            .ok_or_else(|| HarnessError::Config(format!("unknown policy `{nav_name}`")))?;
        let ncfg = nav_model_config(cfg, kind, &world)?;
        let path = cfg
            .get_opt_str("nav_checkpoint")
            .ok_or_else(|| HarnessError::Config("full-task needs `nav_checkpoint`".into()))?;
        let mut file = std::fs::File::open(&path).map_err(|e| HarnessError::Io {
            path: path.clone(),
            source: e,
        })?;
        let store = load_checkpoint(&mut file)?;
        let mut scratch_rng = ChaCha8Rng::seed_from_u64(0);
        let mut scratch = ParamStore::new();
        let model = NavModel::init(&mut scratch, "nav", ncfg, &mut scratch_rng)?;
        Some((model, store))
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut successes = 0usize;
    let mut nav_hits = 0usize;
    for pair in &world.full_task {
        let outcome = match &nav_learned {
            Some((model, store)) => {
                let mut policy = LearnedPolicy::new(model, store, Ablation::None);
                full_task_pipeline(
                    &mut policy,
                    &world.graph,
                    &obs,
                    &pair.nav,
                    &pair.sdr,
                    &sdr_predictor,
                    &sdr_store,
                    &world,
                    horizon,
                    world.scale(),
                    radius,
                    &mut rng,
                )?
            }
            None => {
                let mut policy = BaselinePolicy::parse(&nav_name).expect("checked above");
                full_task_pipeline(
                    &mut policy,
                    &world.graph,
                    &obs,
                    &pair.nav,
                    &pair.sdr,
                    &sdr_predictor,
                    &sdr_store,
                    &world,
                    horizon,
                    world.scale(),
                    radius,
                    &mut rng,
                )?
            }
        };
        let final_pano = outcome.execution.final_state().pano;
        if crate::metrics::task_completion(final_pano, pair.nav.goal, &world.graph)? {
            nav_hits += 1;
        }
        if outcome.success {
            successes += 1;
        }
        let mut values = BTreeMap::new();
        values.insert(
            "success".to_string(),
            f64::from(u8::from(outcome.success)),
        );
        values.insert(
            "stopped_at_goal".to_string(),
            f64::from(u8::from(final_pano == pair.nav.goal)),
        );
        report.per_example.push(ExampleRecord {
            id: pair.nav.id.to_string(),
            values,
        });
    }
    let n = world.full_task.len().max(1) as f64;
    report.metric("task_accuracy", successes as f64 / n);
    report.metric("nav_tc", nav_hits as f64 / n);
    report.metric("examples", world.full_task.len() as f64);
    report.metric("radius_px", radius);
    Ok(())
}

#[derive(serde::Deserialize)]
struct PredictionLine {
    id: u64,
    panos: Vec<String>,
}

fn metrics_cmd(inv: &Invocation, report: &mut Report) -> Result<(), HarnessError> {
    let cfg = &inv.config;
    let world = load_world(cfg)?;
    let path = cfg
        .get_opt_str("predictions")
        .ok_or_else(|| HarnessError::Config("metrics needs `predictions` (a jsonl path)".into()))?;
    let content = std::fs::read_to_string(&path).map_err(|e| HarnessError::Io {
        path: path.clone(),
        source: e,
    })?;

    let mut by_id = std::collections::HashMap::new();
    for e in world.nav_train.iter().chain(&world.nav_dev) {
        by_id.insert(e.id, e);
    }

    let mut records = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: PredictionLine = serde_json::from_str(raw).map_err(|e| {
            HarnessError::Config(format!("{path} line {}: {e}", i + 1))
        })?;
        let example = by_id.get(&line.id).ok_or_else(|| {
            HarnessError::Config(format!("{path} line {}: unknown example id {}", i + 1, line.id))
        })?;
        let mut predicted = Vec::with_capacity(line.panos.len());
        for name in &line.panos {
            let id = world.graph.node(name).ok_or_else(|| {
                HarnessError::Config(format!(
                    "{path} line {}: unknown panorama `{name}`",
                    i + 1
                ))
            })?;
            if predicted.last() != Some(&id) {
                predicted.push(id);
            }
        }
        if predicted.is_empty() {
            return Err(HarnessError::Config(format!(
                "{path} line {}: empty panorama sequence",
                i + 1
            )));
        }
        let route = crate::routes::Route::new(&world.graph, example.route.clone())?;
        let reference =
            crate::routes::demonstration_from_route(&world.graph, &route, example.start.heading)?;
        records.push(crate::metrics::SeqEvalRecord {
            predicted,
            reference: reference.collapsed_panos(),
            goal: example.goal,
        });
    }
    report.metric("tc", crate::metrics::tc_rate_seq(&records, &world.graph)?);
    report.metric("spd", crate::metrics::spd_seq(&records, &world.graph)?);
    report.metric("sed", crate::metrics::sed_seq(&records, &world.graph)?);
    report.metric("examples", records.len() as f64);
    Ok(())
}

fn gradcheck_cmd(report: &mut Report) -> Result<(), HarnessError> {
    let results = super::gradsuite::run_gradcheck_suite()?;
    let mut worst = 0.0f64;
    for (op, err) in &results {
        report.metric(&format!("max_rel_err.{op}"), *err);
        worst = worst.max(*err);
    }
    report.metric("max_rel_err", worst);
    report.metric("tolerance", super::gradsuite::GRADCHECK_TOLERANCE);
    report.metric(
        "pass",
        f64::from(u8::from(worst < super::gradsuite::GRADCHECK_TOLERANCE)),
    );
    Ok(())
}
