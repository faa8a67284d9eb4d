use hsd::branches::{BranchDims, Embedder};
use hsd::eval::prf1;
use hsd::lsh::LshIndex;
use hsd::nn::{softmax, Graph};
use hsd::textio::{Dataset, Histories, Post, Split, SynthConfig, SynthCorpus, EMBED_DIM};
use hsd::trainer::*;

const SMALL: BranchDims = BranchDims { d_emb: EMBED_DIM, hidden: 16, rep: 8 };

struct Fixture {
    corpus: SynthCorpus,
    emb: Embedder,
    index: LshIndex,
    config: TrainConfig,
}

fn fixture(seed: u64) -> Fixture {
    let sc = SynthConfig {
        n_users: 16,
        posts_per_user: 5,
        duplicate_copies: 9,
        clean_copies: 2,
        ..SynthConfig::planted_duplicates()
    };
    let corpus = hsd::textio::gen_synthetic(&sc, seed).unwrap();
    let hist = corpus.history_posts();
    let pairs = corpus.embeddings(EMBED_DIM, seed);
    let emb = build_embedder(
        corpus.train.posts.iter().chain(&corpus.test.posts).chain(&hist).chain(&corpus.pool),
        1,
        Vectors::Pairs(&pairs),
    )
    .unwrap();
    let config =
        TrainConfig { seed, epochs: 2, pretrain_epochs: 2, neighbors: 8, dims: SMALL, ..TrainConfig::default() };
    let index = LshIndex::build(&corpus.pool, config.lsh, seed).unwrap();
    Fixture { corpus, emb, index, config }
}

impl Fixture {
    fn joint(&self, mode: Mode) -> (Model, PrecomputeCache, TrainConfig) {
        let config = TrainConfig { mode, ..self.config.clone() };
        let (pre, _) = pretrain_baseline(&self.corpus.train, &self.emb, &config, &mut NoopObserver).unwrap();
        let model = init_joint(&pre, &config).unwrap();
        let index = mode.uses_inter().then_some(&self.index);
        let mut cache =
            precompute(&self.corpus.train.posts, &self.corpus.histories, index, &model, &self.emb, &config).unwrap();
        cache
            .merge(
                precompute(&self.corpus.test.posts, &self.corpus.histories, index, &model, &self.emb, &config).unwrap(),
            )
            .unwrap();
        (model, cache, config)
    }
}

fn mean_ce(preds: &[Prediction], posts: &[Post]) -> f64 {
    let total: f64 =
        preds.iter().zip(posts).map(|(p, t)| hsd::agent::cross_entropy(&p.probs, t.label.unwrap() as usize)).sum();
    total / posts.len() as f64
}

#[test]
fn pretraining_fits_a_separable_corpus() {
    let sc = SynthConfig {
        n_users: 200,
        posts_per_user: 10,
        history_per_user: 0,
        ambiguous_rate: 0.0,
        label_noise: 0.0,
        near_duplicate_rate: 0.0,
        pool_filler: 0,
        test_fraction: 0.0,
        ..SynthConfig::default()
    };
    let corpus = hsd::textio::gen_synthetic(&sc, 11).unwrap();
    assert_eq!(corpus.train.len(), 2000);
    let pairs = corpus.embeddings(EMBED_DIM, 11);
    let emb = build_embedder(&corpus.train.posts, 1, Vectors::Pairs(&pairs)).unwrap();
    let config = TrainConfig { mode: Mode::Baseline, seed: 11, pretrain_epochs: 20, ..TrainConfig::default() };
    let (model, report) = pretrain_baseline(&corpus.train, &emb, &config, &mut NoopObserver).unwrap();
    assert!(report.epochs.len() <= 20);
    let preds = predict_all(&model, &emb, &corpus.train.posts, &PrecomputeCache::default(), &config).unwrap();
    let labels: Vec<u8> = preds.iter().map(Prediction::label).collect();
    let f1 = prf1(&labels, &corpus.train.labels()).unwrap().f1;
    assert!(f1 >= 0.95, "train F1 {f1}");
}

#[test]
fn pretraining_is_deterministic() {
    let fx = fixture(3);
    let run = || pretrain_baseline(&fx.corpus.train, &fx.emb, &fx.config, &mut NoopObserver).unwrap();
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra, rb);
    assert_eq!(a.store, b.store);
}

#[test]
fn one_epoch_lowers_the_loss() {
    let fx = fixture(4);
    let config = TrainConfig { mode: Mode::Baseline, holdout_fraction: 0.0, pretrain_epochs: 1, ..fx.config.clone() };
    let (model, report) = pretrain_baseline(&fx.corpus.train, &fx.emb, &config, &mut NoopObserver).unwrap();
    let preds = predict_all(&model, &fx.emb, &fx.corpus.train.posts, &PrecomputeCache::default(), &config).unwrap();
    let after = mean_ce(&preds, &fx.corpus.train.posts);
    assert!(after < report.initial_loss, "{after} >= {}", report.initial_loss);
}

#[test]
fn empty_training_set_is_rejected() {
    let fx = fixture(0);
    let empty = Dataset::new(Vec::new(), Split::Train).unwrap();
    assert!(matches!(pretrain_baseline(&empty, &fx.emb, &fx.config, &mut NoopObserver), Err(TrainError::EmptyDataset)));
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let fx = fixture(5);
    let (model, cache, config) = fx.joint(Mode::IntraRl);
    let config = TrainConfig { epochs: 0, ..config };
    let out = train_epochs(model.clone(), &fx.emb, &fx.corpus.train, &cache, &config, &mut NoopObserver).unwrap();
    assert_eq!(out.model, model);
    assert!(out.epochs.is_empty());
    assert_eq!(out.best_epoch, 0);
}

#[test]
fn intra_encoder_and_cache_stay_frozen() {
    let fx = fixture(6);
    for train_l_ia in [false, true] {
        let config = TrainConfig { train_l_ia, ..fx.config.clone() };
        let fx = Fixture { config, ..fixture(6) };
        let (model, cache, config) = fx.joint(Mode::IntraRl);
        let before = cache.clone();
        let out = train_epochs(model.clone(), &fx.emb, &fx.corpus.train, &cache, &config, &mut NoopObserver).unwrap();
        assert_eq!(cache, before);
        assert!(!config.train_f_ie);
        for id in model.store.group("f_ia").into_iter().chain(model.store.group("f_ie")) {
            assert_eq!(out.model.store.value(id), model.store.value(id));
        }
        assert_ne!(out.model.store, model.store);
        if !train_l_ia {
            let again =
                precompute(&fx.corpus.train.posts, &fx.corpus.histories, Some(&fx.index), &out.model, &fx.emb, &config)
                    .unwrap();
            for (id, entry) in &again.entries {
                assert_eq!(entry.r_ia, cache.get(id).unwrap().r_ia);
            }
        }
    }
}

#[test]
fn inter_encoder_trains_when_enabled() {
    let fx = fixture(17);
    let fx = Fixture { config: TrainConfig { train_f_ie: true, ..fx.config.clone() }, ..fx };
    let (model, cache, config) = fx.joint(Mode::IntraRl);
    let out = train_epochs(model.clone(), &fx.emb, &fx.corpus.train, &cache, &config, &mut NoopObserver).unwrap();
    assert!(model.store.group("f_ie").into_iter().any(|id| out.model.store.value(id) != model.store.value(id)));
}

#[test]
fn policy_update_precedes_encoder_step() {
    let fx = fixture(7);
    let (model, cache, config) = fx.joint(Mode::IntraRl);
    let mut events: Vec<TrainEvent> = Vec::new();
    train_epochs(model, &fx.emb, &fx.corpus.train, &cache, &config, &mut events).unwrap();
    let mut pending: Vec<String> = Vec::new();
    let mut steps = 0;
    for e in &events {
        match e {
            TrainEvent::PolicyUpdate { target, .. } => pending.push(target.clone()),
            TrainEvent::EncoderStep { targets, .. } => {
                assert_eq!(&pending, targets);
                pending.clear();
                steps += 1;
            }
            _ => {}
        }
    }
    assert!(pending.is_empty());
    assert!(steps > 0);
}

#[test]
fn random_mode_never_touches_the_policy() {
    let fx = fixture(8);
    let (model, cache, config) = fx.joint(Mode::IntraRandom);
    let mut events: Vec<TrainEvent> = Vec::new();
    let out = train_epochs(model.clone(), &fx.emb, &fx.corpus.train, &cache, &config, &mut events).unwrap();
    assert!(!events.iter().any(|e| matches!(e, TrainEvent::PolicyUpdate { .. })));
    for id in model.policy.ids() {
        assert_eq!(out.model.store.value(id), model.store.value(id));
    }
}

#[test]
fn joint_training_is_deterministic() {
    let fx = fixture(9);
    let (model, cache, config) = fx.joint(Mode::IntraRl);
    let a = train_epochs(model.clone(), &fx.emb, &fx.corpus.train, &cache, &config, &mut NoopObserver).unwrap();
    let b = train_epochs(model, &fx.emb, &fx.corpus.train, &cache, &config, &mut NoopObserver).unwrap();
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.model.store, b.model.store);
}

#[test]
fn cache_covers_the_training_set_and_round_trips() {
    let fx = fixture(10);
    let (model, _, config) = fx.joint(Mode::IntraRl);
    let cache =
        precompute(&fx.corpus.train.posts, &fx.corpus.histories, Some(&fx.index), &model, &fx.emb, &config).unwrap();
    assert_eq!(cache.len(), fx.corpus.train.len());
    let back = PrecomputeCache::from_json(&cache.to_json()).unwrap();
    assert_eq!(back, cache);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.json");
    cache.save(&path).unwrap();
    let again =
        precompute(&fx.corpus.train.posts, &fx.corpus.histories, Some(&fx.index), &model, &fx.emb, &config).unwrap();
    assert_eq!(PrecomputeCache::load(&path).unwrap(), again);
}

#[test]
fn inter_modes_need_an_index() {
    let fx = fixture(0);
    let (model, _, config) = fx.joint(Mode::IntraRandom);
    let err = precompute(&fx.corpus.train.posts, &fx.corpus.histories, None, &model, &fx.emb, &config);
    assert!(matches!(err, Err(TrainError::InvalidConfig(_))));
}

#[test]
fn missing_cache_entry_is_an_error() {
    let fx = fixture(0);
    let (model, _, config) = fx.joint(Mode::Intra);
    let err = train_epochs(model, &fx.emb, &fx.corpus.train, &PrecomputeCache::default(), &config, &mut NoopObserver);
    assert!(matches!(err, Err(TrainError::MissingCache(_))));
}

#[test]
fn user_without_history_gets_half_vector() {
    let fx = fixture(12);
    let (model, _, config) = fx.joint(Mode::Intra);
    let lonely = Post::new("q1", "nobody", "alone in the dark", Some(0));
    let cache =
        precompute(std::slice::from_ref(&lonely), &Histories::default(), None, &model, &fx.emb, &config).unwrap();
    let entry = cache.get("q1").unwrap();
    assert_eq!(entry.intra.count, 0);
    assert!(entry.r_ia.iter().all(|&v| v == 0.5));
}

#[test]
fn greedy_prediction_is_deterministic_with_full_trace() {
    let fx = fixture(13);
    let (model, cache, config) = fx.joint(Mode::IntraRl);
    for t in &fx.corpus.test.posts {
        let a = predict(&model, &fx.emb, t, &cache, &config).unwrap();
        let b = predict(&model, &fx.emb, t, &cache, &config).unwrap();
        assert_eq!(a, b);
        let trace = a.trace.as_ref().unwrap();
        assert_eq!(trace.len(), config.steps);
        assert_eq!(trace.last().unwrap(), a.probs.as_slice());
        assert!(trace.explored.iter().all(|e| !e));
    }
    let all = predict_all(&model, &fx.emb, &fx.corpus.test.posts, &cache, &config).unwrap();
    let one: Vec<Prediction> =
        fx.corpus.test.posts.iter().map(|t| predict(&model, &fx.emb, t, &cache, &config).unwrap()).collect();
    assert_eq!(all, one);
}

#[test]
fn mode_outputs_follow_the_mode_contract() {
    let fx = fixture(14);
    let (model, cache, config) = fx.joint(Mode::Intra);
    let t = &fx.corpus.test.posts[0];

    let base = TrainConfig { mode: Mode::Baseline, ..config.clone() };
    let p = predict(&model, &fx.emb, t, &cache, &base).unwrap();
    let mut g = Graph::new(&model.store);
    let enc = model.branches.encode_target(&mut g, &fx.emb, t).unwrap();
    assert_eq!(p.probs, softmax(g.value(enc.r_ta).data()));
    assert!(p.trace.is_none());

    let p = predict(&model, &fx.emb, t, &cache, &config).unwrap();
    assert_eq!(p.probs, p.prior);
    assert!(p.trace.is_none());
    assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn non_finite_parameters_abort_training() {
    let fx = fixture(15);
    let (mut model, cache, config) = fx.joint(Mode::Intra);
    let w = model.branches.l_c_prior.w;
    model.store.value_mut(w).data_mut()[0] = f64::NAN;
    let err = train_epochs(model, &fx.emb, &fx.corpus.train, &cache, &config, &mut NoopObserver);
    assert!(matches!(err, Err(TrainError::NumericalFault { epoch: 0, .. })), "{err:?}");
}

#[test]
fn invalid_configs_are_rejected() {
    for config in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { steps: 0, ..TrainConfig::default() },
        TrainConfig { alpha: 0.0, ..TrainConfig::default() },
        TrainConfig { holdout_fraction: 1.0, ..TrainConfig::default() },
    ] {
        assert!(config.validate().is_err());
    }
    assert!(TrainConfig::default().validate().is_ok());
}

#[test]
fn checkpoints_round_trip() {
    let fx = fixture(16);
    let (model, _, config) = fx.joint(Mode::IntraRl);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::create(dir.path().join("run")).unwrap();
    let path = run.checkpoint("joint");
    model.save(&path).unwrap();
    let back = Model::load(&path, config.dims).unwrap();
    assert_eq!(back, model);
    run.write_config("intra-rl", &config).unwrap();
    assert_eq!(run.read_config("intra-rl").unwrap(), config);
    run.save_embedder(&fx.emb).unwrap();
    let back = run.load_embedder().unwrap();
    assert_eq!(back.vocab, fx.emb.vocab);
    assert_eq!(back.table, fx.emb.table);
}
