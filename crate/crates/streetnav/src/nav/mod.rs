//! Navigation policies, rollout execution, supervised training, and the
//! full-task pipeline.

mod models;
mod rollout;
mod train;

pub use models::{Ablation, ConvSpec, NavModel, NavModelConfig, NavModelKind, StepOutput};
pub use rollout::{rollout, BaselinePolicy, LearnedPolicy, NavPolicy, RolloutMode};
pub use train::{
    eval_nav, train_nav, NavEpochStats, NavTrainConfig, NavTrainHistory, DEFAULT_ASYNC_WORKERS,
};

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

use crate::graph::{Action, GraphError, NodeId, PanoGraph, State};
use crate::metrics::MetricsError;
use crate::routes::RouteError;
use crate::sdr::{FeatureSource, SdrError, SdrExample, SdrPredictor};
use crate::tensor::{ParamStore, TensorError};
use crate::text::{TextError, TokenSeq};

/// Default action horizons: 55 while learning, 50 at test time.
pub const TRAIN_HORIZON: usize = 55;
pub const TEST_HORIZON: usize = 50;

#[derive(Debug, Error)]
pub enum NavError {
    #[error("observation window {window} exceeds panorama grid width {width}")]
    WindowTooWide { window: usize, width: usize },
    #[error("conv stack: {0}")]
    BadConvStack(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, example {example}")]
    Diverged { epoch: usize, example: usize },
    #[error("policy needs an episode: call begin_episode first")]
    NoEpisode,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error(transparent)]
    Sdr(#[from] SdrError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// One navigation example: an instruction, where to start, the reference
/// route, and the goal.
#[derive(Debug, Clone)]
pub struct NavExample {
    pub id: u64,
    pub tokens: TokenSeq,
    pub start: State,
    pub route: Vec<NodeId>,
    pub goal: NodeId,
}

/// What the agent can see when choosing an action: the instruction, its
/// current pose and time step, and the full history of earlier poses and
/// actions.
#[derive(Debug)]
pub struct AgentContext<'a> {
    pub instruction: &'a TokenSeq,
    pub state: State,
    /// 0-based step index.
    pub time: usize,
    pub history: &'a [(State, Action)],
}

impl AgentContext<'_> {
    pub fn prev_action(&self) -> Option<Action> {
        self.history.last().map(|&(_, a)| a)
    }
}

/// Channel-mean of a panorama feature grid, kept at full panorama width for
/// heading-dependent cropping.
#[derive(Debug, Clone)]
pub struct MeanGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Provides channel-meaned panorama grids by node.
pub trait ObsSource {
    fn mean_grid(&self, pano: NodeId) -> Result<Rc<MeanGrid>, NavError>;
}

/// Caches channel means over any feature source.
pub struct MeanCache<'a, F: FeatureSource> {
    inner: &'a F,
    cache: RefCell<HashMap<NodeId, Rc<MeanGrid>>>,
}

impl<'a, F: FeatureSource> MeanCache<'a, F> {
    pub fn new(inner: &'a F) -> Self {
        MeanCache {
            inner,
            cache: RefCell::new(HashMap::new()),
        }
    }
}

impl<F: FeatureSource> ObsSource for MeanCache<'_, F> {
    fn mean_grid(&self, pano: NodeId) -> Result<Rc<MeanGrid>, NavError> {
        if let Some(hit) = self.cache.borrow().get(&pano) {
            return Ok(Rc::clone(hit));
        }
        let fmap = self.inner.features(pano)?;
        let grid = Rc::new(MeanGrid {
            height: fmap.height(),
            width: fmap.width(),
            data: fmap.channel_mean(),
        });
        self.cache.borrow_mut().insert(pano, Rc::clone(&grid));
        Ok(grid)
    }
}

/// Centers a panorama grid on a heading by circular shift along the width,
/// then crops the central `window` columns. Wraparound makes every heading
/// valid; the grid must simply be at least as wide as the window.
pub fn heading_crop(grid: &MeanGrid, heading: f64, window: usize) -> Result<Vec<f64>, NavError> {
    let (h, w) = (grid.height, grid.width);
    if window > w {
        return Err(NavError::WindowTooWide { window, width: w });
    }
    let center = (heading / 360.0 * w as f64).round() as i64;
    let start = center - (window as i64) / 2;
    let mut out = Vec::with_capacity(h * window);
    for row in 0..h {
        for col in 0..window {
            let src = (start + col as i64).rem_euclid(w as i64) as usize;
            out.push(grid.data[row * w + src]);
        }
    }
    Ok(out)
}

/// Outcome of the pipeline combination of a navigation policy with a
/// location-prediction model.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub execution: crate::graph::Execution,
    /// Image-pixel prediction at the stopping panorama, when the example's
    /// target is annotated there.
    pub prediction: Option<(f64, f64)>,
    pub success: bool,
}

/// Runs navigation to a stop, then resolves the spatial description on the
/// stopping panorama. The attempt fails outright when the agent stops at a
/// panorama where the target is not annotated, regardless of the location
/// model's quality.
#[allow(clippy::too_many_arguments)]
pub fn full_task_pipeline(
    policy: &mut dyn NavPolicy,
    graph: &PanoGraph,
    obs: &dyn ObsSource,
    nav_example: &NavExample,
    sdr_example: &SdrExample,
    sdr_predictor: &SdrPredictor,
    sdr_store: &ParamStore,
    features: &impl FeatureSource,
    horizon: usize,
    scale: f64,
    radius_px: f64,
    rng: &mut impl rand::Rng,
) -> Result<PipelineOutcome, NavError> {
    let execution = rollout(
        policy,
        graph,
        obs,
        nav_example,
        horizon,
        RolloutMode::Greedy,
        rng,
    )?;
    let stop_pano = execution.final_state().pano;
    if stop_pano != sdr_example.pano {
        return Ok(PipelineOutcome {
            execution,
            prediction: None,
            success: false,
        });
    }
    let fmap = features.features(stop_pano)?;
    let tape = crate::tensor::Tape::new();
    let mut binding = sdr_store.bind(&tape);
    let params = binding.all_params(sdr_store)?;
    let dist = sdr_predictor.distribution(&params, &tape, &fmap, sdr_example, None)?;
    let (px, py) =
        crate::sdr::predict_location(&dist.data(), fmap.height(), fmap.width(), scale)?;
    let dist_px =
        ((px - sdr_example.target_x).powi(2) + (py - sdr_example.target_y).powi(2)).sqrt();
    Ok(PipelineOutcome {
        execution,
        prediction: Some((px, py)),
        success: dist_px <= radius_px,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> MeanGrid {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c));
            }
        }
        MeanGrid {
            height: h,
            width: w,
            data,
        }
    }

    #[test]
    fn opposite_headings_offset_by_half_width() {
        let g = grid(2, 8, |r, c| (r * 8 + c) as f64);
        let a = heading_crop(&g, 0.0, 4).unwrap();
        let b = heading_crop(&g, 180.0, 4).unwrap();
        // Column j of crop B equals column j of crop A shifted by W/2 = 4.
        for row in 0..2 {
            for col in 0..4 {
                let col_a = a[row * 4 + col];
                let expect = {
                    let src = ((col_a as i64 % 8) + 4).rem_euclid(8) as usize;
                    (row * 8 + src) as f64
                };
                assert_eq!(b[row * 4 + col], expect);
            }
        }
    }

    #[test]
    fn constant_grid_crops_constant() {
        let g = grid(3, 8, |_, _| 2.5);
        for heading in [0.0, 45.0, 101.25, 270.0] {
            let c = heading_crop(&g, heading, 6).unwrap();
            assert!(c.iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn symmetric_content_crops_symmetric_at_heading_zero() {
        // Content symmetric about column 0: value depends on circular
        // distance to column 0.
        let g = grid(1, 8, |_, c| {
            let d = (c as i64).min(8 - c as i64).abs();
            d as f64
        });
        let c = heading_crop(&g, 0.0, 5).unwrap();
        // Window columns: -2,-1,0,1,2 around column 0.
        assert_eq!(c, vec![2.0, 1.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn window_wider_than_grid_rejected() {
        let g = grid(1, 4, |_, _| 0.0);
        assert!(matches!(
            heading_crop(&g, 0.0, 5),
            Err(NavError::WindowTooWide { .. })
        ));
    }
}
