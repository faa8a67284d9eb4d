//! Neighbor-selection policy, ε-greedy action choice, episode rewards, and REINFORCE.
//!
//! The first policy layer acts on rows `o_ie ⊕ B[j] ⊕ o_ta ⊕ r_ia`. Only the `B[j]` block
//! differs between rows, so its projection `B·W_bᵀ` is computed once per pool and the
//! rest of the layer once per step.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::branches::AgentState;
use crate::nn::{
    argmax, dot, log_softmax, Adam, Gradients, Graph, Linear, NnError, ParamId, ParamStore, Tensor, Var, CLIP_NORM,
    PROB_CLAMP,
};

/// Width of the policy's hidden layer.
pub const POLICY_HIDDEN: usize = 128;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("alpha must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("epsilon must lie in [0, 1], got {0}")]
    InvalidEpsilon(f64),
    #[error("episode trace is empty")]
    EmptyTrace,
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyParams {
    pub l1: Linear,
    pub l2: Linear,
}

impl PolicyParams {
    pub fn register<R: Rng>(store: &mut ParamStore, state_dim: usize, rng: &mut R) -> Self {
        let l1 = Linear::register(store, "policy.l1", state_dim, POLICY_HIDDEN, rng);
        let l2 = Linear::register(store, "policy.l2", POLICY_HIDDEN, 1, rng);
        Self { l1, l2 }
    }

    pub fn bind(store: &ParamStore) -> Result<Self, NnError> {
        let find = |name: &str| store.find(name).ok_or_else(|| NnError::MissingParam(name.to_string()));
        Ok(Self {
            l1: Linear { w: find("policy.l1.w")?, b: find("policy.l1.b")? },
            l2: Linear { w: find("policy.l2.w")?, b: find("policy.l2.b")? },
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.l1.w, self.l1.b, self.l2.w, self.l2.b]
    }

    /// Reference evaluation on a materialized `n × d` state: softmax of
    /// `l2(tanh(l1(s[j])))` over rows.
    pub fn forward_matrix(&self, store: &ParamStore, s: &Tensor) -> Vec<f64> {
        let scores: Vec<f64> = (0..s.rows())
            .map(|j| {
                let h: Vec<f64> = self.l1.forward_plain(store, s.row(j)).into_iter().map(f64::tanh).collect();
                self.l2.forward_plain(store, &h)[0]
            })
            .collect();
        log_softmax(&scores).into_iter().map(f64::exp).collect()
    }
}

/// Policy evaluation for one pool `B` under fixed policy parameters.
#[derive(Debug, Clone)]
pub struct PolicyScorer {
    /// `B·W_bᵀ`, `n × hidden`.
    pool_proj: Tensor,
    /// The non-`B` columns of `W1`, row-major `hidden × (d − enc)`.
    w_rest: Vec<f64>,
    rest_dim: usize,
}

fn split_w1(w1: &Tensor, enc: usize) -> (Vec<f64>, Vec<f64>) {
    let d = w1.cols();
    let mut w_b = Vec::with_capacity(w1.rows() * enc);
    let mut w_rest = Vec::with_capacity(w1.rows() * (d - enc));
    for k in 0..w1.rows() {
        let row = w1.row(k);
        w_rest.extend_from_slice(&row[..enc]);
        w_b.extend_from_slice(&row[enc..2 * enc]);
        w_rest.extend_from_slice(&row[2 * enc..]);
    }
    (w_b, w_rest)
}

impl PolicyScorer {
    pub fn new(store: &ParamStore, policy: &PolicyParams, b: &Tensor) -> Self {
        let w1 = store.value(policy.l1.w);
        let enc = b.cols();
        let hidden = w1.rows();
        let (w_b, w_rest) = split_w1(w1, enc);
        let mut proj = vec![0.0; b.rows() * hidden];
        for j in 0..b.rows() {
            for k in 0..hidden {
                proj[j * hidden + k] = dot(b.row(j), &w_b[k * enc..(k + 1) * enc]);
            }
        }
        Self { pool_proj: Tensor::from_vec(b.rows(), hidden, proj), w_rest, rest_dim: w1.cols() - enc }
    }

    /// `log π(· | s)`.
    pub fn log_probs(&self, store: &ParamStore, policy: &PolicyParams, s: &AgentState) -> Vec<f64> {
        let rest = rest_input(s);
        debug_assert_eq!(rest.len(), self.rest_dim);
        let b1 = store.value(policy.l1.b).data();
        let hidden = b1.len();
        let u: Vec<f64> =
            (0..hidden).map(|k| dot(&rest, &self.w_rest[k * self.rest_dim..(k + 1) * self.rest_dim]) + b1[k]).collect();
        let w2 = store.value(policy.l2.w).data();
        let b2 = store.value(policy.l2.b).data()[0];
        let scores: Vec<f64> = (0..self.pool_proj.rows())
            .map(|j| {
                let h: Vec<f64> = self.pool_proj.row(j).iter().zip(&u).map(|(p, u)| (p + u).tanh()).collect();
                dot(&h, w2) + b2
            })
            .collect();
        log_softmax(&scores)
    }

    pub fn probs(&self, store: &ParamStore, policy: &PolicyParams, s: &AgentState) -> Vec<f64> {
        self.log_probs(store, policy, s).into_iter().map(f64::exp).collect()
    }
}

fn rest_input(s: &AgentState) -> Vec<f64> {
    let mut rest = Vec::with_capacity(s.o_ie.len() + s.o_ta.len() + s.r_ia.len());
    rest.extend_from_slice(&s.o_ie);
    rest.extend_from_slice(&s.o_ta);
    rest.extend_from_slice(&s.r_ia);
    rest
}

/// `π(· | s)` for a single state.
pub fn policy_forward(store: &ParamStore, policy: &PolicyParams, s: &AgentState) -> Vec<f64> {
    PolicyScorer::new(store, policy, &s.b).probs(store, policy, s)
}

/// `Σ_i log π(a_i | s_i)` as a graph node over the policy parameters.
pub fn log_prob_sum(
    g: &mut Graph<'_>,
    policy: &PolicyParams,
    states: &[AgentState],
    actions: &[usize],
) -> Result<Var, NnError> {
    let w1 = g.param(policy.l1.w);
    let (hidden, d) = g.shape(w1);
    let b1 = g.param(policy.l1.b);
    let w2 = g.param(policy.l2.w);
    let b2 = g.param(policy.l2.b);
    let mut pool: Option<(Arc<Tensor>, Var)> = None;
    let mut rest_w: Option<Var> = None;
    let mut total: Option<Var> = None;
    for (s, &a) in states.iter().zip(actions) {
        let enc = s.b.cols();
        let proj = match &pool {
            Some((b, p)) if Arc::ptr_eq(b, &s.b) => *p,
            _ => {
                let bv = g.constant((*s.b).clone())?;
                let w_b = g.slice_cols(w1, enc, enc)?;
                let p = g.matmul_t(bv, w_b)?;
                pool = Some((s.b.clone(), p));
                p
            }
        };
        let w_rest = match rest_w {
            Some(w) => w,
            None => {
                let head = g.slice_cols(w1, 0, enc)?;
                let tail = g.slice_cols(w1, 2 * enc, d - 2 * enc)?;
                let w = g.concat(&[head, tail])?;
                rest_w = Some(w);
                w
            }
        };
        debug_assert_eq!(g.shape(w_rest), (hidden, d - enc));
        let x = g.constant(Tensor::row_vector(rest_input(s)))?;
        let u = g.matmul_t(x, w_rest)?;
        let u = g.add(u, b1)?;
        let pre = g.add_row(proj, u)?;
        let h = g.tanh(pre)?;
        let scores = g.matmul_t(h, w2)?;
        let scores = g.add_row(scores, b2)?;
        let scores = g.reshape(scores, 1, s.n())?;
        let lp = g.log_softmax(scores)?;
        let picked = g.pick(lp, a)?;
        total = Some(match total {
            Some(t) => g.add(t, picked)?,
            None => picked,
        });
    }
    total.ok_or(NnError::EmptySequence)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub index: usize,
    pub log_prob: f64,
    pub explored: bool,
}

/// ε-greedy: a uniform action with probability ε, otherwise the most probable one.
/// The log-probability of the chosen action is reported either way.
pub fn select_action<R: Rng>(log_probs: &[f64], epsilon: f64, rng: &mut R) -> Result<Action, AgentError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(AgentError::InvalidEpsilon(epsilon));
    }
    let explored = rng.gen_bool(epsilon);
    let index = if explored { rng.gen_range(0..log_probs.len()) } else { argmax(log_probs) };
    Ok(Action { index, log_prob: log_probs[index], explored })
}

/// Linear decay of ε from `start` to `end` over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self { start: 0.1, end: 0.01 }
    }
}

impl EpsilonSchedule {
    /// ε at `progress ∈ [0, 1]`.
    pub fn at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.start + (self.end - self.start) * p
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        for e in [self.start, self.end] {
            if !(0.0..=1.0).contains(&e) {
                return Err(AgentError::InvalidEpsilon(e));
            }
        }
        Ok(())
    }
}

/// Cross-entropy with the same clamping as the graph op.
pub fn cross_entropy(pred: &[f64], label: usize) -> f64 {
    -pred[label].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
}

/// Episode reward `v`, shared by every step.
///
/// `q = e(y′) − e(y_T)`; `v = α·q` when the prior prediction is wrong, `q` when only the
/// final one is wrong, and 0 when both are right.
pub fn compute_reward(prior: &[f64], last: &[f64], label: usize, alpha: f64) -> Result<f64, AgentError> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(AgentError::InvalidAlpha(alpha));
    }
    let q = cross_entropy(prior, label) - cross_entropy(last, label);
    Ok(if argmax(prior) != label {
        alpha * q
    } else if argmax(last) != label {
        q
    } else {
        0.0
    })
}

/// One selection episode for a target.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    /// `s_i`, the state each action was chosen from.
    pub states: Vec<AgentState>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub explored: Vec<bool>,
    /// `y_i` after each step.
    pub predictions: Vec<Vec<f64>>,
    /// `y′`.
    pub prior: Vec<f64>,
    /// `y*`, when known.
    pub label: Option<usize>,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// `y_T`.
    pub fn last(&self) -> Option<&[f64]> {
        self.predictions.last().map(Vec::as_slice)
    }
}

/// Gradient of `−v·Σ log π(a_i|s_i)` with respect to the policy, and the objective value.
pub fn reinforce_gradients(
    store: &ParamStore,
    policy: &PolicyParams,
    trace: &EpisodeTrace,
    v: f64,
) -> Result<(f64, Gradients), AgentError> {
    if trace.is_empty() {
        return Err(AgentError::EmptyTrace);
    }
    let mut g = Graph::new(store);
    let lp = log_prob_sum(&mut g, policy, &trace.states, &trace.actions)?;
    let loss = g.scale(lp, -v)?;
    let value = g.scalar(loss);
    let mut grads = g.backward(loss)?;
    let ids = policy.ids();
    grads.retain(|id| ids.contains(&id));
    Ok((value, grads))
}

/// One clipped optimizer step on the REINFORCE objective. A zero reward leaves the policy
/// and the optimizer state untouched. Returns whether a step was taken.
pub fn reinforce_update(
    store: &mut ParamStore,
    policy: &PolicyParams,
    trace: &EpisodeTrace,
    v: f64,
    optimizer: &mut Adam,
) -> Result<bool, AgentError> {
    if v == 0.0 {
        return Ok(false);
    }
    let (_, mut grads) = reinforce_gradients(store, policy, trace, v)?;
    grads.clip_global_norm(CLIP_NORM);
    optimizer.step(store, &policy.ids(), &grads);
    Ok(true)
}
