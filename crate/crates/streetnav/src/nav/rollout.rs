//! Policy rollouts through the environment transition function.

use rand::RngCore;

use super::models::{Ablation, NavModel};
use super::{heading_crop, AgentContext, MeanGrid, NavError, NavExample, ObsSource};
use crate::graph::{Action, Execution, PanoGraph, State};
use crate::tensor::{ParamStore, ParamTensors, Tape, Tensor};
use crate::text::TokenSeq;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    Greedy,
    Sample,
}

impl RolloutMode {
    pub fn parse(s: &str) -> Option<RolloutMode> {
        match s {
            "greedy" => Some(RolloutMode::Greedy),
            "sample" => Some(RolloutMode::Sample),
            _ => None,
        }
    }
}

/// Anything that can drive an episode: told when an episode begins, then
/// asked for one action per step.
pub trait NavPolicy {
    fn begin_episode(&mut self, example: &NavExample) -> Result<(), NavError>;
    fn act(
        &mut self,
        ctx: &AgentContext<'_>,
        grid: &MeanGrid,
        mode: RolloutMode,
        rng: &mut dyn RngCore,
    ) -> Result<Action, NavError>;
}

/// The non-learning policies: stop immediately, walk randomly without
/// stopping, or always go forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselinePolicy {
    Stop,
    Random,
    Frequent,
}

impl BaselinePolicy {
    pub fn parse(s: &str) -> Option<BaselinePolicy> {
        match s {
            "stop" => Some(BaselinePolicy::Stop),
            "random" => Some(BaselinePolicy::Random),
            "frequent" => Some(BaselinePolicy::Frequent),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            BaselinePolicy::Stop => "stop",
            BaselinePolicy::Random => "random",
            BaselinePolicy::Frequent => "frequent",
        }
    }
}

const NON_STOP: [Action; 3] = [Action::Forward, Action::Left, Action::Right];

impl NavPolicy for BaselinePolicy {
    fn begin_episode(&mut self, _example: &NavExample) -> Result<(), NavError> {
        Ok(())
    }

    fn act(
        &mut self,
        _ctx: &AgentContext<'_>,
        _grid: &MeanGrid,
        _mode: RolloutMode,
        rng: &mut dyn RngCore,
    ) -> Result<Action, NavError> {
        Ok(match self {
            BaselinePolicy::Stop => Action::Stop,
            BaselinePolicy::Frequent => Action::Forward,
            BaselinePolicy::Random => {
                let i = (rng.next_u32() as usize) % NON_STOP.len();
                NON_STOP[i]
            }
        })
    }
}

struct Episode {
    tape: Tape,
    params: ParamTensors,
    text: Tensor,
    carry: (Tensor, Tensor),
}

/// A trained model driving rollouts. Parameters go onto the episode tape
/// as constants, so stepping records no gradient machinery.
pub struct LearnedPolicy<'a> {
    model: &'a NavModel,
    store: &'a ParamStore,
    ablation: Ablation,
    episode: Option<Episode>,
}

impl<'a> LearnedPolicy<'a> {
    pub fn new(model: &'a NavModel, store: &'a ParamStore, ablation: Ablation) -> Self {
        LearnedPolicy {
            model,
            store,
            ablation,
            episode: None,
        }
    }

    /// Action probabilities for one step without an episode, for tests and
    /// inspection.
    pub fn probe(
        &self,
        tokens: &TokenSeq,
        obs: &[f64],
        prev: Option<Action>,
        time: usize,
    ) -> Result<Vec<f64>, NavError> {
        let tape = Tape::new();
        let params = self.store.constants_on(&tape)?;
        let text = self
            .model
            .encode_instruction(&params, &tape, tokens, self.ablation)?;
        let carry = self.model.initial_carry(&tape);
        let out = self
            .model
            .step(&params, &tape, &text, obs, prev, time, &carry, self.ablation)?;
        Ok(out.probs.data())
    }
}

impl NavPolicy for LearnedPolicy<'_> {
    fn begin_episode(&mut self, example: &NavExample) -> Result<(), NavError> {
        let tape = Tape::new();
        let params = self.store.constants_on(&tape)?;
        let text =
            self.model
                .encode_instruction(&params, &tape, &example.tokens, self.ablation)?;
        let carry = self.model.initial_carry(&tape);
        self.episode = Some(Episode {
            tape,
            params,
            text,
            carry,
        });
        Ok(())
    }

    fn act(
        &mut self,
        ctx: &AgentContext<'_>,
        grid: &MeanGrid,
        mode: RolloutMode,
        rng: &mut dyn RngCore,
    ) -> Result<Action, NavError> {
        let episode = self.episode.as_mut().ok_or(NavError::NoEpisode)?;
        let obs = heading_crop(grid, ctx.state.heading, self.model.cfg.obs_w)?;
        let out = self.model.step(
            &episode.params,
            &episode.tape,
            &episode.text,
            &obs,
            ctx.prev_action(),
            ctx.time,
            &episode.carry,
            self.ablation,
        )?;
        episode.carry = out.carry;
        let probs = out.probs.data();
        let action = match mode {
            RolloutMode::Greedy => {
                let mut best = 0usize;
                for (i, &p) in probs.iter().enumerate() {
                    if p > probs[best] {
                        best = i;
                    }
                }
                Action::from_index(best).expect("four actions")
            }
            RolloutMode::Sample => {
                let draw = (rng.next_u64() as f64) / (u64::MAX as f64 + 1.0);
                let mut acc = 0.0;
                let mut chosen = Action::Stop;
                for (i, &p) in probs.iter().enumerate() {
                    acc += p;
                    if draw < acc {
                        chosen = Action::from_index(i).expect("four actions");
                        break;
                    }
                }
                chosen
            }
        };
        Ok(action)
    }
}

/// Steps a policy through the transition function until it stops or the
/// horizon is reached, at which point `Stop` is forced. The result is a
/// valid execution of at most `horizon + 1` steps.
pub fn rollout(
    policy: &mut dyn NavPolicy,
    graph: &PanoGraph,
    obs: &dyn ObsSource,
    example: &NavExample,
    horizon: usize,
    mode: RolloutMode,
    rng: &mut impl RngCore,
) -> Result<Execution, NavError> {
    policy.begin_episode(example)?;
    let mut state: State = example.start;
    let mut steps: Vec<(State, Action)> = Vec::new();
    let mut stopped = false;
    for t in 0..horizon {
        let grid = obs.mean_grid(state.pano)?;
        let action = {
            let ctx = AgentContext {
                instruction: &example.tokens,
                state,
                time: t,
                history: &steps,
            };
            policy.act(&ctx, &grid, mode, rng)?
        };
        if action == Action::Stop {
            steps.push((state, Action::Stop));
            stopped = true;
            break;
        }
        steps.push((state, action));
        state = graph.transition(state, action)?;
    }
    if !stopped {
        steps.push((state, Action::Stop));
    }
    Ok(Execution::new(graph, steps).expect("rollout built a transition-consistent sequence"))
}
