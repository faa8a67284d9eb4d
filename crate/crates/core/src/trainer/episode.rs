use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::agent::{select_action, EpisodeTrace, PolicyScorer};
use crate::branches::{build_state, Embedder};
use crate::hashing::derive_seed;
use crate::nn::{Gradients, Graph, NnError, ProjectionCache, Tensor, Var};
use crate::textio::Post;

use super::{Mode, Model, PrecomputeCache, TrainConfig, TrainError};

/// How an episode picks neighbors.
pub(crate) enum Selector<'r> {
    Greedy,
    Epsilon { epsilon: f64, rng: &'r mut ChaCha8Rng },
    Random { rng: &'r mut ChaCha8Rng },
}

/// Final class distribution for one target and, in inter modes, the episode behind it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub id: String,
    /// `y_T` in inter modes, `y′` in intra mode, `softmax(r_ta)` in baseline mode.
    pub probs: Vec<f64>,
    pub prior: Vec<f64>,
    #[serde(skip)]
    pub trace: Option<EpisodeTrace>,
}

impl Prediction {
    pub fn label(&self) -> u8 {
        crate::nn::argmax(&self.probs) as u8
    }
}

pub(crate) struct Forward {
    pub prediction: Prediction,
    /// Cross-entropy of the trained output, when the target is labeled.
    pub loss: Option<f64>,
    pub grads: Option<Gradients>,
}

fn values(g: &Graph<'_>, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

/// `B` per target id.
pub(crate) type PoolEncodings = BTreeMap<String, Arc<Tensor>>;

/// Encodes every target's neighbor set once; valid while `f_ie` is frozen.
pub(crate) fn encode_pools(
    model: &Model,
    emb: &Embedder,
    targets: &[Post],
    cache: &PrecomputeCache,
) -> Result<PoolEncodings, TrainError> {
    targets
        .par_chunks(16)
        .map(|chunk| {
            let mut proj = ProjectionCache::default();
            chunk
                .iter()
                .map(|t| {
                    let neighbors = cache.neighbor_posts(cache.get(&t.id)?);
                    let b = model.branches.encode_pool(&model.store, emb, &neighbors, &mut proj)?;
                    Ok((t.id.clone(), Arc::new(b)))
                })
                .collect::<Result<Vec<_>, TrainError>>()
        })
        .collect::<Result<Vec<_>, _>>()
        .map(|chunks| chunks.into_iter().flatten().collect())
}

/// Runs `model` on one target in the configured mode. With `want_grads`, also
/// backpropagates the supervised loss.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward(
    model: &Model,
    emb: &Embedder,
    target: &Post,
    cache: &PrecomputeCache,
    config: &TrainConfig,
    selector: &mut Selector<'_>,
    proj: &mut ProjectionCache,
    pools: Option<&PoolEncodings>,
    want_grads: bool,
) -> Result<Forward, TrainError> {
    let br = &model.branches;
    let label = target.label.map(usize::from);
    let mut g = Graph::new(&model.store);
    let enc = br.encode_target(&mut g, emb, target)?;

    let (prior_var, r_ia) = if config.mode.uses_intra() {
        let entry = cache.get(&target.id)?;
        let r_ia = if model.store.is_frozen(br.l_ia.w) {
            g.constant(Tensor::row_vector(entry.r_ia.clone()))?
        } else {
            br.intra_rep(&mut g, &entry.intra)?
        };
        (br.predict_prior(&mut g, enc.r_ta, r_ia)?, Some(r_ia))
    } else {
        (br.predict_baseline(&mut g, enc.r_ta)?, None)
    };
    let prior = values(&g, prior_var);

    let mut out = prior_var;
    let mut trace = None;
    if config.mode.uses_inter() {
        let r_ia = r_ia.expect("inter modes use the intra branch");
        let entry = cache.get(&target.id)?;
        let neighbors = cache.neighbor_posts(entry);
        if neighbors.is_empty() {
            return Err(TrainError::MissingCache(format!("{} has no neighbors", target.id)));
        }
        let n = neighbors.len();
        let learned = config.mode == Mode::IntraRl;
        let scorer_inputs = if learned {
            let b = match pools.and_then(|p| p.get(&target.id)) {
                Some(b) => Arc::clone(b),
                None => Arc::new(br.encode_pool(&model.store, emb, &neighbors, proj)?),
            };
            let scorer = PolicyScorer::new(&model.store, &model.policy, &b);
            Some((b, scorer, values(&g, enc.o_ta), values(&g, r_ia)))
        } else {
            None
        };

        // Random-inter prediction stays deterministic per target.
        let mut fixed = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &target.id));
        let mut step = br.inter_step(&mut g, emb, target, None)?;
        let mut t = EpisodeTrace {
            states: Vec::new(),
            actions: Vec::new(),
            log_probs: Vec::new(),
            explored: Vec::new(),
            predictions: Vec::new(),
            prior: prior.clone(),
            label,
        };
        for _ in 0..config.steps {
            let (index, log_prob, explored) = match &scorer_inputs {
                Some((b, scorer, o_ta, r_ia_v)) => {
                    let state = build_state(values(&g, step.o_ie), Arc::clone(b), o_ta.clone(), r_ia_v.clone())?;
                    let lp = scorer.log_probs(&model.store, &model.policy, &state);
                    let action = match selector {
                        Selector::Greedy => select_action(&lp, 0.0, &mut ChaCha8Rng::seed_from_u64(0))?,
                        Selector::Epsilon { epsilon, rng } => select_action(&lp, *epsilon, &mut **rng)?,
                        Selector::Random { rng } => {
                            let index = rng.gen_range(0..n);
                            crate::agent::Action { index, log_prob: lp[index], explored: true }
                        }
                    };
                    t.states.push(state);
                    (action.index, action.log_prob, action.explored)
                }
                None => {
                    let index = match selector {
                        Selector::Epsilon { rng, .. } | Selector::Random { rng } => rng.gen_range(0..n),
                        Selector::Greedy => fixed.gen_range(0..n),
                    };
                    (index, -(n as f64).ln(), true)
                }
            };
            step = br.inter_step(&mut g, emb, neighbors[index], Some(&step.carry))?;
            let y = br.predict_full(&mut g, step.r_ie, enc.r_ta, r_ia)?;
            t.actions.push(index);
            t.log_probs.push(log_prob);
            t.explored.push(explored);
            t.predictions.push(values(&g, y));
            out = y;
        }
        trace = Some(t);
    }

    let probs = values(&g, out);
    let (loss, grads) = match label {
        Some(y) => {
            let l = g.cross_entropy(out, y)?;
            let value = g.scalar(l);
            if !value.is_finite() {
                return Err(NnError::NumericalFault { op: "loss" }.into());
            }
            let grads = if want_grads { Some(g.backward(l)?) } else { None };
            (Some(value), grads)
        }
        None => (None, None),
    };
    Ok(Forward { prediction: Prediction { id: target.id.clone(), probs, prior, trace }, loss, grads })
}

/// Greedy (ε = 0) prediction for one target.
pub fn predict(
    model: &Model,
    emb: &Embedder,
    target: &Post,
    cache: &PrecomputeCache,
    config: &TrainConfig,
) -> Result<Prediction, TrainError> {
    let mut proj = ProjectionCache::default();
    Ok(forward(model, emb, target, cache, config, &mut Selector::Greedy, &mut proj, None, false)?.prediction)
}

/// [`predict`] over many targets, in parallel; output order follows `targets`.
pub fn predict_all(
    model: &Model,
    emb: &Embedder,
    targets: &[Post],
    cache: &PrecomputeCache,
    config: &TrainConfig,
) -> Result<Vec<Prediction>, TrainError> {
    let chunks: Vec<Vec<Prediction>> = targets
        .par_chunks(16)
        .map(|chunk| {
            let mut proj = ProjectionCache::default();
            chunk
                .iter()
                .map(|t| {
                    Ok(forward(model, emb, t, cache, config, &mut Selector::Greedy, &mut proj, None, false)?.prediction)
                })
                .collect::<Result<Vec<_>, TrainError>>()
        })
        .collect::<Result<_, _>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Mean cross-entropy and predictions over labeled targets, greedy.
pub(crate) fn evaluate_loss(
    model: &Model,
    emb: &Embedder,
    targets: &[Post],
    cache: &PrecomputeCache,
    config: &TrainConfig,
    pools: Option<&PoolEncodings>,
    on_fault: impl Fn(&Post, NnError) -> TrainError,
) -> Result<(f64, Vec<Prediction>), TrainError> {
    let mut proj = ProjectionCache::default();
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(targets.len());
    for t in targets {
        let f =
            forward(model, emb, t, cache, config, &mut Selector::Greedy, &mut proj, pools, false).map_err(
                |e| match e {
                    TrainError::Nn(src @ NnError::NumericalFault { .. }) => on_fault(t, src),
                    other => other,
                },
            )?;
        total += f.loss.unwrap_or(0.0);
        preds.push(f.prediction);
    }
    Ok((if targets.is_empty() { 0.0 } else { total / targets.len() as f64 }, preds))
}
