use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{compute_reward, reinforce_update};
use crate::branches::{BranchParams, Embedder};
use crate::eval::prf1;
use crate::hashing::derive_seed;
use crate::nn::{Adam, AdamConfig, Gradients, NnError, ParamId, ProjectionCache, CLIP_NORM};
use crate::textio::{Dataset, Post};

use super::episode::{encode_pools, evaluate_loss, forward, PoolEncodings, Selector};
use super::{Mode, Model, PrecomputeCache, TrainConfig, TrainError, TrainEvent, TrainObserver};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-target loss over the epoch, measured while training.
    pub train_loss: f64,
    pub holdout_loss: f64,
    pub holdout_f1: f64,
    /// Mean episode reward (inter modes).
    pub mean_reward: f64,
    pub policy_steps: usize,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean loss over the fitting split before any update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept; 0 when no epoch ran.
    pub best_epoch: usize,
}

/// Deterministic fit/holdout split of the training targets.
fn split_holdout(posts: &[Post], fraction: f64, seed: u64) -> (Vec<Post>, Vec<Post>) {
    let mut order: Vec<usize> = (0..posts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "holdout")));
    let k = if posts.len() < 2 { 0 } else { ((posts.len() as f64 * fraction).round() as usize).min(posts.len() - 1) };
    let holdout = order[..k].iter().map(|&i| posts[i].clone()).collect();
    let mut fit: Vec<usize> = order[k..].to_vec();
    fit.sort_unstable();
    (fit.into_iter().map(|i| posts[i].clone()).collect(), holdout)
}

/// Parameter norms and finiteness, attached to numerical-fault errors. Epoch 0 is the
/// evaluation before the first update.
fn fault(model: &Model, epoch: usize, target: &Post, source: NnError) -> TrainError {
    let bad: Vec<&str> =
        model.store.iter().filter(|(_, p)| !p.value.is_finite()).map(|(_, p)| p.name.as_str()).collect();
    log::error!(
        "numerical fault at epoch {epoch}, target {} (label {:?}, {} tokens); non-finite parameters: {:?}",
        target.id,
        target.label,
        target.tokens.len(),
        bad
    );
    for (_, p) in model.store.iter() {
        log::debug!("  {} norm {:.6e}", p.name, p.value.sum_sq().sqrt());
    }
    TrainError::NumericalFault { epoch, target: target.id.clone(), source }
}

struct Optimizers {
    encoder: Adam,
    policy: Adam,
}

struct EpochTotals {
    loss: f64,
    reward: f64,
    episodes: usize,
    policy_steps: usize,
    epsilon: f64,
}

/// One pass over `fit` in shuffled minibatches. In `IntraRl` mode the policy is updated
/// after every episode, before the minibatch's encoder step.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut Model,
    emb: &Embedder,
    fit: &[Post],
    cache: &PrecomputeCache,
    config: &TrainConfig,
    trainable: &[ParamId],
    opt: &mut Optimizers,
    order_rng: &mut ChaCha8Rng,
    action_rng: &mut ChaCha8Rng,
    pools: Option<&PoolEncodings>,
    epoch: usize,
    progress: (usize, usize),
    observer: &mut dyn TrainObserver,
) -> Result<EpochTotals, TrainError> {
    let mut order: Vec<usize> = (0..fit.len()).collect();
    order.shuffle(order_rng);
    let mut proj = ProjectionCache::default();
    let mut totals = EpochTotals { loss: 0.0, reward: 0.0, episodes: 0, policy_steps: 0, epsilon: 0.0 };
    let (mut done, total) = progress;
    for batch in order.chunks(config.batch_size) {
        let mut acc = Gradients::new();
        let mut batch_loss = 0.0;
        for &i in batch {
            let target = &fit[i];
            let label = target
                .label
                .ok_or_else(|| TrainError::Text(crate::textio::TextError::MissingLabel(target.id.clone())))?;
            let epsilon = config.epsilon.at(done as f64 / total.max(1) as f64);
            totals.epsilon = epsilon;
            let mut selector = match config.mode {
                Mode::IntraRl => Selector::Epsilon { epsilon, rng: &mut *action_rng },
                _ => Selector::Random { rng: &mut *action_rng },
            };
            let f = forward(&*model, emb, target, cache, config, &mut selector, &mut proj, pools, true).map_err(
                |e| match e {
                    TrainError::Nn(src @ NnError::NumericalFault { .. }) => fault(model, epoch, target, src),
                    other => other,
                },
            )?;
            let loss = f.loss.expect("labeled target");
            batch_loss += loss;
            if let Some(trace) = &f.prediction.trace {
                let v = compute_reward(
                    &trace.prior,
                    trace.last().expect("nonempty episode"),
                    label as usize,
                    config.alpha,
                )?;
                totals.reward += v;
                totals.episodes += 1;
                if config.mode == Mode::IntraRl {
                    let stepped = reinforce_update(&mut model.store, &model.policy, trace, v, &mut opt.policy)?;
                    totals.policy_steps += usize::from(stepped);
                    observer.on_event(&TrainEvent::PolicyUpdate {
                        epoch,
                        target: target.id.clone(),
                        reward: v,
                        stepped,
                    });
                }
            }
            acc.merge(&f.grads.expect("gradients requested"), 1.0 / batch.len() as f64);
            done += 1;
        }
        acc.retain(|id| trainable.contains(&id));
        acc.clip_global_norm(CLIP_NORM);
        opt.encoder.step(&mut model.store, trainable, &acc);
        proj.clear();
        totals.loss += batch_loss;
        observer.on_event(&TrainEvent::EncoderStep {
            epoch,
            targets: batch.iter().map(|&i| fit[i].id.clone()).collect(),
            loss: batch_loss / batch.len() as f64,
        });
    }
    Ok(totals)
}

/// Shared loop for pretraining and joint training: up to `epochs` passes with early
/// stopping on held-out loss; the best epoch's parameters are kept.
#[allow(clippy::too_many_arguments)]
fn fit_loop(
    mut model: Model,
    emb: &Embedder,
    train: &Dataset,
    cache: &PrecomputeCache,
    config: &TrainConfig,
    trainable: &[ParamId],
    epochs: usize,
    observer: &mut dyn TrainObserver,
) -> Result<(TrainOutcome, f64), TrainError> {
    let (fit, holdout) = split_holdout(&train.posts, config.holdout_fraction, config.seed);
    let stream = |label: &str| ChaCha8Rng::seed_from_u64(derive_seed(config.seed, label));
    let mut order_rng = stream("order");
    let mut action_rng = stream("actions");
    let mut opt = Optimizers {
        encoder: Adam::new(AdamConfig::with_lr(config.lr)),
        policy: Adam::new(AdamConfig::with_lr(config.lr_policy)),
    };
    let pools = if config.mode == Mode::IntraRl && epochs > 0 && model.inter_encoder_frozen() {
        Some(encode_pools(&model, emb, &train.posts, cache)?)
    } else {
        None
    };
    let pools = pools.as_ref();
    let initial_loss = if epochs > 0 {
        evaluate_loss(&model, emb, &fit, cache, config, pools, |t, e| fault(&model, 0, t, e))?.0
    } else {
        0.0
    };
    let gold: Vec<u8> = holdout.iter().map(|p| p.label.unwrap_or(0)).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, crate::nn::ParamStore)> = None;
    let mut stale = 0;
    for epoch in 1..=epochs {
        observer.on_event(&TrainEvent::EpochStart { epoch });
        let progress = ((epoch - 1) * fit.len(), epochs * fit.len());
        let totals = run_epoch(
            &mut model,
            emb,
            &fit,
            cache,
            config,
            trainable,
            &mut opt,
            &mut order_rng,
            &mut action_rng,
            pools,
            epoch,
            progress,
            observer,
        )?;
        let train_loss = totals.loss / fit.len() as f64;
        let (holdout_loss, holdout_f1) = if holdout.is_empty() {
            (train_loss, 0.0)
        } else {
            let (loss, preds) =
                evaluate_loss(&model, emb, &holdout, cache, config, pools, |t, e| fault(&model, epoch, t, e))?;
            let labels: Vec<u8> = preds.iter().map(|p| p.label()).collect();
            (loss, prf1(&labels, &gold).map(|m| m.f1).unwrap_or(0.0))
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss,
            holdout_loss,
            holdout_f1,
            mean_reward: if totals.episodes == 0 { 0.0 } else { totals.reward / totals.episodes as f64 },
            policy_steps: totals.policy_steps,
            epsilon: totals.epsilon,
        };
        log::info!(
            "[{}] epoch {epoch}: train loss {train_loss:.4}, holdout loss {holdout_loss:.4}, holdout F1 {holdout_f1:.4}",
            config.mode.name()
        );
        observer.on_event(&TrainEvent::EpochEnd(metrics.clone()));
        history.push(metrics);
        if best.as_ref().is_none_or(|(l, _, _)| holdout_loss < *l) {
            best = Some((holdout_loss, epoch, model.store.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, store)) => {
            model.store = store;
            e
        }
        None => 0,
    };
    Ok((TrainOutcome { model, epochs: history, best_epoch }, initial_loss))
}

/// Trains `f_ta` and `l_ta` on `softmax(r_ta)` against the gold labels.
pub fn pretrain_baseline(
    train: &Dataset,
    emb: &Embedder,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(Model, PretrainReport), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    config.validate()?;
    let config = TrainConfig { mode: Mode::Baseline, ..config.clone() };
    let model = Model::new(config.dims, derive_seed(config.seed, "pretrain"));
    let trainable = BranchParams::sections(&model.store, &["f_ta", "l_ta"]);
    let cache = PrecomputeCache::default();
    let (out, initial_loss) =
        fit_loop(model, emb, train, &cache, &config, &trainable, config.pretrain_epochs, observer)?;
    Ok((out.model, PretrainReport { initial_loss, epochs: out.epochs, best_epoch: out.best_epoch }))
}

fn copy_section(to: &mut Model, from: &Model, src: &str, dst: &str) -> Result<(), TrainError> {
    for id in from.store.group(src) {
        let p = from.store.get(id);
        let name = format!("{dst}{}", &p.name[src.len()..]);
        let target = to.store.find(&name).ok_or(NnError::MissingParam(name))?;
        *to.store.value_mut(target) = p.value.clone();
    }
    Ok(())
}

/// Builds the joint model from a pretrained baseline: `f_ia` is always a frozen copy of
/// the pretrained `f_ta`; `l_ia` and `f_ie` stay frozen unless `train_l_ia` and
/// `train_f_ie` are set.
///
/// With `warm_start`, `f_ta`, `l_ta` and `f_ie` also start from the baseline, the first
/// two rows of `l_ie` copy `l_ta`, and both fusion heads start as a pass-through of the
/// baseline logits, so every mode begins at the baseline's predictions.
pub fn init_joint(pretrained: &Model, config: &TrainConfig) -> Result<Model, TrainError> {
    config.validate()?;
    let dims = config.dims;
    let mut m = Model::new(dims, derive_seed(config.seed, "joint"));
    copy_section(&mut m, pretrained, "f_ta", "f_ia")?;
    if config.warm_start {
        copy_section(&mut m, pretrained, "f_ta", "f_ta")?;
        copy_section(&mut m, pretrained, "l_ta", "l_ta")?;
        copy_section(&mut m, pretrained, "f_ta", "f_ie")?;
        let l_ta_w = pretrained.store.value(pretrained.branches.l_ta.w).clone();
        let l_ta_b = pretrained.store.value(pretrained.branches.l_ta.b).clone();
        let br = m.branches;
        {
            let w = m.store.value_mut(br.l_ie.w);
            for r in 0..2 {
                w.row_mut(r).copy_from_slice(l_ta_w.row(r));
            }
        }
        {
            let b = m.store.value_mut(br.l_ie.b);
            b.data_mut()[..2].copy_from_slice(l_ta_b.data());
        }
        let rep = dims.rep;
        for (head, offsets) in [(br.l_c_prior, vec![0]), (br.l_c_full, vec![0, rep])] {
            let w = m.store.value_mut(head.w);
            w.data_mut().fill(0.0);
            for off in offsets {
                for c in 0..2 {
                    w.set(c, off + c, 1.0);
                }
            }
            m.store.value_mut(head.b).data_mut().fill(0.0);
        }
    }
    for id in m.store.group("f_ia") {
        m.store.set_frozen(id, true);
    }
    for id in m.store.group("f_ie") {
        m.store.set_frozen(id, !config.train_f_ie);
    }
    let l_ia = m.branches.l_ia;
    for id in [l_ia.w, l_ia.b] {
        m.store.set_frozen(id, !config.train_l_ia);
    }
    Ok(m)
}

/// Joint training in `config.mode`. With `epochs = 0` the model is returned unchanged.
pub fn train_epochs(
    model: Model,
    emb: &Embedder,
    train: &Dataset,
    cache: &PrecomputeCache,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    config.validate()?;
    if config.mode.uses_intra() {
        for p in &train.posts {
            cache.get(&p.id)?;
        }
    }
    let trainable = match config.mode {
        Mode::Baseline => BranchParams::sections(&model.store, &["f_ta", "l_ta"]),
        _ => model.theta_e(),
    };
    Ok(fit_loop(model, emb, train, cache, config, &trainable, config.epochs, observer)?.0)
}
