//! Double Q-learning with a Huber TD loss and an L1-style penalty on the
//! input filter, trained online one transition at a time.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;

use crate::agent::{argmax, Agent, AgentParams, ForwardInputs, ForwardTrace};
use crate::config::TrainerConfig;
use crate::maze::{Action, NUM_ACTIONS};
use crate::memory::EpisodicMemory;
use crate::nn::Adam;

pub fn huber(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn huber_grad(e: f64, delta: f64) -> f64 {
    e.clamp(-delta, delta)
}

/// `y = r` on terminal steps, else `r + gamma * Q_target(s', argmax_a Q_online(s', a))`.
pub fn td_target_from_q(
    reward: f64,
    done: bool,
    gamma: f64,
    next_online_q: &[f64; NUM_ACTIONS],
    next_target_q: &[f64; NUM_ACTIONS],
) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * next_target_q[argmax(next_online_q)]
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub trace: ForwardTrace,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
    /// Online forward pass at `t+1`; `None` only for terminal steps.
    pub next: Option<ForwardTrace>,
}

/// Evaluates the double-Q target for a transition. The target network is
/// run on the same inputs the online `next` trace saw.
pub fn td_target<R: Rng + ?Sized>(
    transition: &Transition,
    agent: &Agent,
    memory: &EpisodicMemory,
    gamma: f64,
    rng: &mut R,
) -> f64 {
    match (&transition.next, transition.done) {
        (_, true) | (None, _) => transition.reward,
        (Some(next), false) => {
            let target_q = agent
                .forward(&agent.target, memory, next.inputs.clone(), rng)
                .q;
            td_target_from_q(transition.reward, false, gamma, &next.q, &target_q)
        }
    }
}

/// One element of a loss batch. `target` is a constant.
#[derive(Debug, Clone, Copy)]
pub struct TdSample<'a> {
    pub trace: &'a ForwardTrace,
    pub action: Action,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub loss: f64,
    pub huber: f64,
    pub regularizer: f64,
    pub mean_abs_td: f64,
    pub mean_m: f64,
}

/// `mean(Huber(Q(s,a) - y)) + lambda * mean(m)`, averaging `m` over batch and
/// components.
pub fn compute_loss(batch: &[TdSample<'_>], lambda_filter: f64, huber_delta: f64) -> LossBreakdown {
    assert!(!batch.is_empty(), "loss needs a nonempty batch");
    let b = batch.len() as f64;
    let mut h = 0.0;
    let mut td = 0.0;
    let mut m_sum = 0.0;
    for s in batch {
        let e = s.trace.q[s.action.index()] - s.target;
        h += huber(e, huber_delta);
        td += e.abs();
        m_sum += s.trace.m.mean().unwrap_or(0.0);
    }
    let mean_m = m_sum / b;
    LossBreakdown {
        loss: h / b + lambda_filter * mean_m,
        huber: h / b,
        regularizer: lambda_filter * mean_m,
        mean_abs_td: td / b,
        mean_m,
    }
}

/// Accumulates gradients of [`compute_loss`] into `grads`.
pub fn accumulate_gradients(
    agent: &Agent,
    params: &AgentParams,
    batch: &[(TdSample<'_>, &EpisodicMemory)],
    lambda_filter: f64,
    huber_delta: f64,
    grads: &mut AgentParams,
) {
    let b = batch.len() as f64;
    for (s, memory) in batch {
        let d_in = s.trace.m.len() as f64;
        let e = s.trace.q[s.action.index()] - s.target;
        let mut gq = [0.0; NUM_ACTIONS];
        gq[s.action.index()] = huber_grad(e, huber_delta) / b;
        agent.backward(
            params,
            memory,
            s.trace,
            &gq,
            lambda_filter / (b * d_in),
            grads,
        );
    }
}

/// Copies online parameters to the target network every `period` steps.
pub fn sync_target(agent: &mut Agent, step: u64, period: u64) -> bool {
    if period > 0 && step.is_multiple_of(period) {
        agent.sync_target();
        true
    } else {
        false
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub applied: bool,
    pub synced: bool,
}

/// A transition kept for replay together with the buffer it was read from.
#[derive(Debug, Clone)]
pub struct ReplayItem {
    pub inputs: ForwardInputs,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
    pub next_inputs: Option<ForwardInputs>,
    pub memory: Arc<EpisodicMemory>,
}

#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    items: VecDeque<ReplayItem>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: ReplayItem) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&ReplayItem> {
        if self.items.is_empty() {
            None
        } else {
            Some(&self.items[rng.random_range(0..self.items.len())])
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainerConfig,
    optimizer: Adam,
    grads: AgentParams,
    steps: u64,
    skipped: u64,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig, agent: &Agent) -> Self {
        Self {
            optimizer: Adam::new(cfg.learning_rate, agent.online.num_params()),
            grads: agent.online.zeros_like(),
            cfg,
            steps: 0,
            skipped: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// One optimizer step on the batch, then target maintenance.
    pub fn update_step(
        &mut self,
        agent: &mut Agent,
        batch: &[(TdSample<'_>, &EpisodicMemory)],
    ) -> StepStats {
        let samples: Vec<TdSample<'_>> = batch.iter().map(|(s, _)| *s).collect();
        let loss = compute_loss(&samples, self.cfg.lambda_filter, self.cfg.huber_delta);
        for s in self.grads.slices_mut() {
            s.fill(0.0);
        }
        accumulate_gradients(
            agent,
            &agent.online,
            batch,
            self.cfg.lambda_filter,
            self.cfg.huber_delta,
            &mut self.grads,
        );
        let norm = self.grads.l2_norm();
        self.steps += 1;
        let applied = if norm.is_finite() {
            let scale = if norm > self.cfg.grad_clip {
                self.cfg.grad_clip / norm
            } else {
                1.0
            };
            self.optimizer
                .update(agent.online.slices_mut(), self.grads.slices(), scale);
            true
        } else {
            self.skipped += 1;
            log::warn!("non-finite gradient at step {}; update skipped", self.steps);
            false
        };
        let synced = sync_target(agent, self.steps, self.cfg.target_sync_period);
        StepStats {
            loss,
            grad_norm: norm,
            applied,
            synced,
        }
    }
}
