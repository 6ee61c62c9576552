//! Teacher-forced supervised training for the navigation models.
//!
//! Each reference demonstration is unrolled into (context, action) pairs
//! and the summed action log-likelihood is maximized with per-example Adam
//! steps. Early stopping watches development-set SPD with a patience
//! counter that resets on every new minimum. With more than one worker the
//! updates go through the lock-free shared store, partitioning the data
//! across threads; a coordinator evaluates after each epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::models::{Ablation, NavModel};
use super::rollout::{rollout, LearnedPolicy, RolloutMode};
use super::{heading_crop, NavError, NavExample, ObsSource};
use crate::graph::{Action, PanoGraph};
use crate::metrics::NavEvalRecord;
use crate::routes::{demonstration_from_route, Route};
use crate::tensor::{backward, AdamConfig, ParamStore, SharedParamStore, Tape};

#[derive(Debug, Clone)]
pub struct NavTrainConfig {
    pub lr: f64,
    pub patience: u32,
    pub max_epochs: usize,
    /// Horizon used for development-set rollouts during early stopping.
    pub eval_horizon: usize,
    pub seed: u64,
    /// 1 trains deterministically in-thread; more run lock-free
    /// asynchronous workers over data partitions.
    pub workers: usize,
    pub ablation: Ablation,
}

impl Default for NavTrainConfig {
    fn default() -> Self {
        NavTrainConfig {
            lr: 2.5e-4,
            patience: 5,
            max_epochs: 100,
            eval_horizon: super::TEST_HORIZON,
            seed: 0,
            workers: 1,
            ablation: Ablation::None,
        }
    }
}

/// Number of asynchronous clients used when a caller asks for async
/// training without saying how many.
pub const DEFAULT_ASYNC_WORKERS: usize = 6;

#[derive(Debug, Clone, Default)]
pub struct NavTrainHistory {
    pub epochs: Vec<NavEpochStats>,
    pub best_spd: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct NavEpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_spd: f64,
    pub dev_tc: f64,
}

/// One teacher-forcing step: the cropped observation, what the agent did
/// one step earlier, and the demonstrated action.
struct TeacherStep {
    obs: Vec<f64>,
    prev: Option<Action>,
    action: Action,
}

struct TeacherExample {
    tokens: crate::text::TokenSeq,
    steps: Vec<TeacherStep>,
}

fn build_teacher_data(
    model: &NavModel,
    graph: &PanoGraph,
    obs: &dyn ObsSource,
    examples: &[NavExample],
) -> Result<Vec<TeacherExample>, NavError> {
    let mut out = Vec::with_capacity(examples.len());
    for example in examples {
        let route = Route::new(graph, example.route.clone())?;
        let demo = demonstration_from_route(graph, &route, example.start.heading)?;
        let mut steps = Vec::with_capacity(demo.len());
        let mut prev = None;
        for &(state, action) in demo.steps() {
            let grid = obs.mean_grid(state.pano)?;
            steps.push(TeacherStep {
                obs: heading_crop(&grid, state.heading, model.cfg.obs_w)?,
                prev,
                action,
            });
            prev = Some(action);
        }
        out.push(TeacherExample {
            tokens: example.tokens.clone(),
            steps,
        });
    }
    Ok(out)
}

/// Negative summed log-likelihood of one demonstration under the model,
/// with gradients collected by name.
fn example_loss_and_grads(
    model: &NavModel,
    store: &ParamStore,
    teacher: &TeacherExample,
    ablation: Ablation,
) -> Result<(f64, std::collections::HashMap<String, Vec<f64>>), NavError> {
    let tape = Tape::new();
    let mut binding = store.bind(&tape);
    let params = binding.all_params(store)?;
    let text = model.encode_instruction(&params, &tape, &teacher.tokens, ablation)?;
    let mut carry = model.initial_carry(&tape);
    let mut nll: Option<crate::tensor::Tensor> = None;
    for (t, step) in teacher.steps.iter().enumerate() {
        let out = model.step(
            &params, &tape, &text, &step.obs, step.prev, t, &carry, ablation,
        )?;
        carry = out.carry;
        let lp = out.log_probs.pick(step.action.index())?;
        nll = Some(match nll {
            Some(acc) => acc.add(&lp)?,
            None => lp,
        });
    }
    let loss = nll.expect("demonstrations have at least the stop step").neg();
    let value = loss.item();
    if !value.is_finite() {
        return Err(NavError::Diverged {
            epoch: 0,
            example: 0,
        });
    }
    let grads = backward(&loss)?;
    Ok((value, binding.collect_grads(&grads)))
}

/// Greedy development rollouts paired with their reference demonstrations.
pub fn eval_nav(
    model: &NavModel,
    store: &ParamStore,
    graph: &PanoGraph,
    obs: &dyn ObsSource,
    examples: &[NavExample],
    horizon: usize,
    ablation: Ablation,
    seed: u64,
) -> Result<Vec<NavEvalRecord>, NavError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(examples.len());
    for example in examples {
        let mut policy = LearnedPolicy::new(model, store, ablation);
        let predicted = rollout(
            &mut policy,
            graph,
            obs,
            example,
            horizon,
            RolloutMode::Greedy,
            &mut rng,
        )?;
        let route = Route::new(graph, example.route.clone())?;
        let reference = demonstration_from_route(graph, &route, example.start.heading)?;
        records.push(NavEvalRecord {
            predicted,
            reference,
            goal: example.goal,
        });
    }
    Ok(records)
}

/// Trains a navigation model; returns the parameters from the epoch with
/// the lowest development SPD (the final parameters when `dev` is empty).
pub fn train_nav(
    model: &NavModel,
    store: ParamStore,
    train: &[NavExample],
    dev: &[NavExample],
    graph: &PanoGraph,
    obs: &dyn ObsSource,
    cfg: &NavTrainConfig,
) -> Result<(ParamStore, NavTrainHistory), NavError> {
    let teacher = build_teacher_data(model, graph, obs, train)?;
    if cfg.workers <= 1 {
        train_single(model, store, &teacher, dev, graph, obs, cfg)
    } else {
        train_hogwild(model, store, &teacher, dev, graph, obs, cfg)
    }
}

struct EarlyStop {
    best_spd: f64,
    patience_left: u32,
    patience: u32,
}

impl EarlyStop {
    fn new(patience: u32) -> EarlyStop {
        EarlyStop {
            best_spd: f64::INFINITY,
            patience_left: patience,
            patience,
        }
    }

    /// Returns (is-new-minimum, should-stop).
    fn observe(&mut self, spd: f64) -> (bool, bool) {
        if spd < self.best_spd {
            self.best_spd = spd;
            self.patience_left = self.patience;
            (true, false)
        } else {
            self.patience_left -= 1;
            (false, self.patience_left == 0)
        }
    }
}

fn dev_metrics(
    model: &NavModel,
    store: &ParamStore,
    dev: &[NavExample],
    graph: &PanoGraph,
    obs: &dyn ObsSource,
    cfg: &NavTrainConfig,
) -> Result<(f64, f64), NavError> {
    if dev.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let records = eval_nav(
        model,
        store,
        graph,
        obs,
        dev,
        cfg.eval_horizon,
        cfg.ablation,
        cfg.seed,
    )?;
    let spd = crate::metrics::spd(&records, graph)?;
    let tc = crate::metrics::tc_rate(&records, graph)?;
    Ok((spd, tc))
}

fn train_single(
    model: &NavModel,
    mut store: ParamStore,
    teacher: &[TeacherExample],
    dev: &[NavExample],
    graph: &PanoGraph,
    obs: &dyn ObsSource,
    cfg: &NavTrainConfig,
) -> Result<(ParamStore, NavTrainHistory), NavError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = AdamConfig::default();
    let mut history = NavTrainHistory::default();
    let mut best_store = store.clone();
    let mut stopper = EarlyStop::new(cfg.patience);
    let mut order: Vec<usize> = (0..teacher.len()).collect();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let (loss, grads) =
                example_loss_and_grads(model, &store, &teacher[i], cfg.ablation).map_err(
                    |e| match e {
                        NavError::Diverged { .. } => NavError::Diverged { epoch, example: i },
                        other => other,
                    },
                )?;
            loss_sum += loss;
            store.adam_update(&grads, cfg.lr, adam)?;
        }
        let (dev_spd, dev_tc) = dev_metrics(model, &store, dev, graph, obs, cfg)?;
        history.epochs.push(NavEpochStats {
            epoch,
            train_loss: loss_sum / teacher.len().max(1) as f64,
            dev_spd,
            dev_tc,
        });
        if dev.is_empty() {
            best_store = store.clone();
            continue;
        }
        let (improved, stop) = stopper.observe(dev_spd);
        if improved {
            best_store = store.clone();
            history.best_spd = dev_spd;
            history.best_epoch = epoch;
        }
        if stop {
            break;
        }
    }
    Ok((best_store, history))
}

fn train_hogwild(
    model: &NavModel,
    store: ParamStore,
    teacher: &[TeacherExample],
    dev: &[NavExample],
    graph: &PanoGraph,
    obs: &dyn ObsSource,
    cfg: &NavTrainConfig,
) -> Result<(ParamStore, NavTrainHistory), NavError> {
    let shared = SharedParamStore::from_store(&store);
    let adam = AdamConfig::default();
    let mut history = NavTrainHistory::default();
    let mut best_store = store.clone();
    let mut stopper = EarlyStop::new(cfg.patience);

    for epoch in 0..cfg.max_epochs {
        std::thread::scope(|scope| {
            for worker in 0..cfg.workers {
                let shared = &shared;
                scope.spawn(move || {
                    let mut order: Vec<usize> = (worker..teacher.len())
                        .step_by(cfg.workers)
                        .collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        cfg.seed ^ (worker as u64) << 32 ^ epoch as u64,
                    );
                    order.shuffle(&mut rng);
                    for i in order {
                        // Read-modify-write without synchronization: take a
                        // snapshot of whatever the parameters are right
                        // now, compute the update, push it through.
                        let snapshot = shared.snapshot();
                        if let Ok((_, grads)) =
                            example_loss_and_grads(model, &snapshot, &teacher[i], cfg.ablation)
                        {
                            let _ = shared.adam_update(&grads, cfg.lr, adam);
                        }
                    }
                });
            }
        });
        // Coordinator evaluates an epoch snapshot.
        let snapshot = shared.snapshot();
        let (dev_spd, dev_tc) = dev_metrics(model, &snapshot, dev, graph, obs, cfg)?;
        history.epochs.push(NavEpochStats {
            epoch,
            train_loss: f64::NAN,
            dev_spd,
            dev_tc,
        });
        if dev.is_empty() {
            best_store = snapshot;
            continue;
        }
        let (improved, stop) = stopper.observe(dev_spd);
        if improved {
            best_store = snapshot;
            history.best_spd = dev_spd;
            history.best_epoch = epoch;
        }
        if stop {
            break;
        }
    }
    Ok((best_store, history))
}
