//! Three-branch model wiring: target encoding, intra-user aggregation, stateful
//! inter-user encoding, fused predictions, and the agent state.
//!
//! ```text
//! o_ta = f_ta(t)                 r_ta = l_ta(σ(o_ta))            (2)
//! r_ia = σ(Σ_j l_ia(σ(f_ia(z_j))))                                (64)
//! o_ie, h = f_ie(x_a, h)         r_ie = l_ie(σ(o_ie))            (64)
//! y′ = softmax(l_c_prior(r_ta ⊕ r_ia))
//! y  = softmax(l_c_full(r_ie ⊕ r_ta ⊕ r_ia))
//! s_i[j] = o_ie ⊕ B[j] ⊕ o_ta ⊕ r_ia                              (448)
//! ```

use std::cmp::Ordering;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    dot, sigmoid, BiLstm, Graph, Linear, LstmCarry, NnError, ParamId, ParamStore, ProjectionCache, Tensor, Var,
};
use crate::textio::{EmbeddingTable, Post, Vocab};

/// Checkpoint section names, one per parameter group.
pub const SECTIONS: [&str; 8] = ["f_ta", "f_ia", "f_ie", "l_ta", "l_ia", "l_ie", "l_c_prior", "l_c_full"];

/// Frozen word vectors plus the vocabulary that indexes them.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub vocab: Vocab,
    pub table: EmbeddingTable,
}

impl Embedder {
    pub fn new(vocab: Vocab, table: EmbeddingTable) -> Self {
        Self { vocab, table }
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    /// Token ids; a post without tokens reads as a single `<unk>`.
    pub fn ids(&self, post: &Post) -> Vec<usize> {
        if post.tokens.is_empty() {
            return vec![crate::textio::UNK_ID];
        }
        self.vocab.encode(&post.tokens)
    }

    pub fn sequence(&self, post: &Post) -> Tensor {
        self.table.sequence(&self.ids(post))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchDims {
    pub d_emb: usize,
    pub hidden: usize,
    /// Width of `r_ia` and `r_ie`.
    pub rep: usize,
}

impl Default for BranchDims {
    fn default() -> Self {
        Self { d_emb: crate::textio::EMBED_DIM, hidden: crate::nn::HIDDEN, rep: 64 }
    }
}

impl BranchDims {
    pub fn enc(&self) -> usize {
        2 * self.hidden
    }

    pub fn state(&self) -> usize {
        3 * self.enc() + self.rep
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchParams {
    pub dims: BranchDims,
    pub f_ta: BiLstm,
    pub f_ia: BiLstm,
    pub f_ie: BiLstm,
    pub l_ta: Linear,
    pub l_ia: Linear,
    pub l_ie: Linear,
    pub l_c_prior: Linear,
    pub l_c_full: Linear,
}

/// Differentiable target encoding.
#[derive(Debug, Clone, Copy)]
pub struct TargetEncoding {
    pub o_ta: Var,
    pub r_ta: Var,
}

/// One inter-user step: encoder output, carried state, and representation.
#[derive(Debug, Clone, Copy)]
pub struct InterOutput {
    pub o_ie: Var,
    pub r_ie: Var,
    pub carry: LstmCarry,
}

/// `Σ_j σ(o_ia(z_j))` over a history and its size; enough to evaluate `r_ia` for any
/// `l_ia` because the layer is affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntraSummary {
    pub pooled: Vec<f64>,
    pub count: usize,
}

impl BranchParams {
    /// Registers every group; `f_ia` starts frozen.
    pub fn register<R: Rng>(store: &mut ParamStore, dims: BranchDims, rng: &mut R) -> Self {
        let enc = dims.enc();
        let f_ta = BiLstm::register(store, "f_ta", dims.d_emb, dims.hidden, rng);
        let f_ia = BiLstm::register(store, "f_ia", dims.d_emb, dims.hidden, rng);
        let f_ie = BiLstm::register(store, "f_ie", dims.d_emb, dims.hidden, rng);
        let l_ta = Linear::register(store, "l_ta", enc, 2, rng);
        let l_ia = Linear::register(store, "l_ia", enc, dims.rep, rng);
        let l_ie = Linear::register(store, "l_ie", enc, dims.rep, rng);
        let l_c_prior = Linear::register(store, "l_c_prior", 2 + dims.rep, 2, rng);
        let l_c_full = Linear::register(store, "l_c_full", dims.rep + 2 + dims.rep, 2, rng);
        for id in store.group("f_ia") {
            store.set_frozen(id, true);
        }
        Self { dims, f_ta, f_ia, f_ie, l_ta, l_ia, l_ie, l_c_prior, l_c_full }
    }

    /// Looks up the groups by name in an existing store.
    pub fn bind(store: &ParamStore, dims: BranchDims) -> Result<Self, NnError> {
        let find = |name: String| store.find(&name).ok_or(NnError::MissingParam(name));
        let lstm = |p: &str| -> Result<BiLstm, NnError> {
            let dir = |d: &str| -> Result<crate::nn::LstmDirection, NnError> {
                Ok(crate::nn::LstmDirection {
                    w_ih: find(format!("{p}.{d}.w_ih"))?,
                    w_hh: find(format!("{p}.{d}.w_hh"))?,
                    b: find(format!("{p}.{d}.b"))?,
                })
            };
            Ok(BiLstm { fwd: dir("fwd")?, bwd: dir("bwd")? })
        };
        let lin = |p: &str| -> Result<Linear, NnError> {
            Ok(Linear { w: find(format!("{p}.w"))?, b: find(format!("{p}.b"))? })
        };
        Ok(Self {
            dims,
            f_ta: lstm("f_ta")?,
            f_ia: lstm("f_ia")?,
            f_ie: lstm("f_ie")?,
            l_ta: lin("l_ta")?,
            l_ia: lin("l_ia")?,
            l_ie: lin("l_ie")?,
            l_c_prior: lin("l_c_prior")?,
            l_c_full: lin("l_c_full")?,
        })
    }

    /// Parameter ids of the named sections.
    pub fn sections(store: &ParamStore, names: &[&str]) -> Vec<ParamId> {
        names.iter().flat_map(|n| store.group(n)).collect()
    }

    /// `o_ta` and `r_ta` from the zero state.
    pub fn encode_target(&self, g: &mut Graph<'_>, emb: &Embedder, t: &Post) -> Result<TargetEncoding, NnError> {
        let seq = g.constant(emb.sequence(t))?;
        let (o_ta, _) = self.f_ta.encode(g, seq, None)?;
        let act = g.sigmoid(o_ta)?;
        let r_ta = self.l_ta.forward(g, act)?;
        Ok(TargetEncoding { o_ta, r_ta })
    }

    /// Pools `σ(o_ia)` over the history with the frozen `f_ia`. Posts without tokens are
    /// skipped. Encodings are summed in a canonical order so the result does not depend
    /// on the order of `history`.
    pub fn intra_summary(&self, store: &ParamStore, emb: &Embedder, history: &[Post]) -> Result<IntraSummary, NnError> {
        let mut cache = ProjectionCache::default();
        let mut encoded = Vec::with_capacity(history.len());
        for z in history.iter().filter(|z| !z.tokens.is_empty()) {
            let o = self.f_ia.encode_keyed(store, &emb.ids(z), |k| emb.table.row(k), &mut cache)?;
            encoded.push(o.into_iter().map(sigmoid).collect::<Vec<f64>>());
        }
        encoded.sort_by(|a, b| {
            a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| *o != Ordering::Equal).unwrap_or(Ordering::Equal)
        });
        let mut pooled = vec![0.0; self.dims.enc()];
        for e in &encoded {
            for (p, v) in pooled.iter_mut().zip(e) {
                *p += v;
            }
        }
        Ok(IntraSummary { pooled, count: encoded.len() })
    }

    /// `r_ia = σ(W_ia·Σσ(o_ia) + m·b_ia)` as a graph node.
    pub fn intra_rep(&self, g: &mut Graph<'_>, s: &IntraSummary) -> Result<Var, NnError> {
        let pooled = g.constant(Tensor::row_vector(s.pooled.clone()))?;
        let w = g.param(self.l_ia.w);
        let wx = g.matmul_t(pooled, w)?;
        let b = g.param(self.l_ia.b);
        let mb = g.scale(b, s.count as f64)?;
        let z = g.add(wx, mb)?;
        g.sigmoid(z)
    }

    pub fn intra_rep_plain(&self, store: &ParamStore, s: &IntraSummary) -> Vec<f64> {
        let w = store.value(self.l_ia.w);
        let b = store.value(self.l_ia.b).data();
        let k = w.cols();
        (0..w.rows())
            .map(|j| {
                let wx = dot(&s.pooled, &w.data()[j * k..(j + 1) * k]);
                sigmoid(wx + b[j] * s.count as f64)
            })
            .collect()
    }

    /// `B`: zero-state `f_ie` encodings of the neighbor posts, one row each.
    pub fn encode_pool(
        &self,
        store: &ParamStore,
        emb: &Embedder,
        posts: &[&Post],
        cache: &mut ProjectionCache,
    ) -> Result<Tensor, NnError> {
        let mut rows = Vec::with_capacity(posts.len());
        for p in posts {
            rows.push(self.f_ie.encode_keyed(store, &emb.ids(p), |k| emb.table.row(k), cache)?);
        }
        if rows.is_empty() {
            return Ok(Tensor::zeros(0, self.dims.enc()));
        }
        Ok(Tensor::from_rows(&rows))
    }

    /// Encodes `x_a` with `f_ie` from `carry` (zero state when `None`).
    pub fn inter_step(
        &self,
        g: &mut Graph<'_>,
        emb: &Embedder,
        x_a: &Post,
        carry: Option<&LstmCarry>,
    ) -> Result<InterOutput, NnError> {
        let seq = g.constant(emb.sequence(x_a))?;
        let (o_ie, carry) = self.f_ie.encode(g, seq, carry)?;
        let act = g.sigmoid(o_ie)?;
        let r_ie = self.l_ie.forward(g, act)?;
        Ok(InterOutput { o_ie, r_ie, carry })
    }

    pub fn predict_baseline(&self, g: &mut Graph<'_>, r_ta: Var) -> Result<Var, NnError> {
        g.softmax(r_ta)
    }

    pub fn predict_prior(&self, g: &mut Graph<'_>, r_ta: Var, r_ia: Var) -> Result<Var, NnError> {
        let x = g.concat(&[r_ta, r_ia])?;
        let z = self.l_c_prior.forward(g, x)?;
        g.softmax(z)
    }

    pub fn predict_full(&self, g: &mut Graph<'_>, r_ie: Var, r_ta: Var, r_ia: Var) -> Result<Var, NnError> {
        let x = g.concat(&[r_ie, r_ta, r_ia])?;
        let z = self.l_c_full.forward(g, x)?;
        g.softmax(z)
    }
}

/// `s_i` in factored form: only `o_ie` changes between steps of an episode, and `B` is
/// shared by all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub o_ie: Vec<f64>,
    pub b: Arc<Tensor>,
    pub o_ta: Vec<f64>,
    pub r_ia: Vec<f64>,
}

pub fn build_state(o_ie: Vec<f64>, b: Arc<Tensor>, o_ta: Vec<f64>, r_ia: Vec<f64>) -> Result<AgentState, NnError> {
    if b.rows() == 0 {
        return Err(NnError::ShapeMismatch { op: "build_state", left: b.shape(), right: (1, o_ie.len()) });
    }
    if o_ie.len() != b.cols() || o_ta.len() != b.cols() {
        return Err(NnError::ShapeMismatch { op: "build_state", left: (1, o_ie.len()), right: b.shape() });
    }
    Ok(AgentState { o_ie, b, o_ta, r_ia })
}

impl AgentState {
    pub fn n(&self) -> usize {
        self.b.rows()
    }

    pub fn width(&self) -> usize {
        self.o_ie.len() + self.b.cols() + self.o_ta.len() + self.r_ia.len()
    }

    pub fn row(&self, j: usize) -> Vec<f64> {
        let mut r = Vec::with_capacity(self.width());
        r.extend_from_slice(&self.o_ie);
        r.extend_from_slice(self.b.row(j));
        r.extend_from_slice(&self.o_ta);
        r.extend_from_slice(&self.r_ia);
        r
    }

    /// The materialized `n × 448` matrix.
    pub fn matrix(&self) -> Tensor {
        Tensor::from_rows(&(0..self.n()).map(|j| self.row(j)).collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{param_difference, relative_error, DEFAULT_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> BranchDims {
        BranchDims { d_emb: 6, hidden: 3, rep: 4 }
    }

    fn embedder(posts: &[Post], dim: usize) -> Embedder {
        let vocab = Vocab::build(posts, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = (0..vocab.len()).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let table = EmbeddingTable::from_rows(dim, rows);
        Embedder::new(vocab, table)
    }

    fn posts() -> Vec<Post> {
        vec![
            Post::new("t", "u", "you are all the same", Some(1)),
            Post::new("h1", "u", "same old story", None),
            Post::new("h2", "u", "all of them again", None),
            Post::new("h3", "u", "story time", None),
            Post::new("x1", "v", "they are all the same", None),
            Post::new("x2", "w", "time again", None),
        ]
    }

    fn setup(dims: BranchDims, seed: u64) -> (ParamStore, BranchParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = BranchParams::register(&mut store, dims, &mut rng);
        (store, p)
    }

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn shapes_at_full_size() {
        let (store, p) = setup(BranchDims::default(), 0);
        let ps = posts();
        let emb = embedder(&ps, 200);
        let mut g = Graph::new(&store);
        let t = p.encode_target(&mut g, &emb, &ps[0]).unwrap();
        assert_eq!(g.shape(t.o_ta), (1, 128));
        assert_eq!(g.shape(t.r_ta), (1, 2));
        let s = p.intra_summary(&store, &emb, &ps[1..4]).unwrap();
        let r_ia = p.intra_rep(&mut g, &s).unwrap();
        assert_eq!(g.shape(r_ia), (1, 64));
        let step = p.inter_step(&mut g, &emb, &ps[0], None).unwrap();
        assert_eq!(g.shape(step.r_ie), (1, 64));
        let y = p.predict_full(&mut g, step.r_ie, t.r_ta, r_ia).unwrap();
        assert!((g.value(y).data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let pool = [&ps[4], &ps[5], &ps[4]];
        let b = p.encode_pool(&store, &emb, &pool, &mut ProjectionCache::default()).unwrap();
        assert_eq!(b.shape(), (3, 128));
        assert_eq!(b.row(0), b.row(2));
        let st = build_state(
            g.value(step.o_ie).data().to_vec(),
            Arc::new(b.clone()),
            g.value(t.o_ta).data().to_vec(),
            g.value(r_ia).data().to_vec(),
        )
        .unwrap();
        assert_eq!(st.matrix().shape(), (3, 448));
        assert_eq!(&st.matrix().row(1)[128..256], b.row(1));
    }

    #[test]
    fn zero_encoder_gives_half_activation() {
        let (mut store, p) = setup(small(), 1);
        let ps = posts();
        let emb = embedder(&ps, 6);
        for id in BranchParams::sections(&store, &["f_ta"]) {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new(&store);
        let t = p.encode_target(&mut g, &emb, &ps[0]).unwrap();
        let expected = p.l_ta.forward_plain(&store, &[0.5; 6]);
        assert_eq!(g.value(t.r_ta).data(), expected.as_slice());
    }

    #[test]
    fn zero_heads_predict_uniform() {
        let (mut store, p) = setup(small(), 2);
        zero_all(&mut store);
        let mut g = Graph::new(&store);
        let r_ta = g.constant(Tensor::row_vector(vec![0.3, -2.0])).unwrap();
        let r_ia = g.constant(Tensor::row_vector(vec![0.1; 4])).unwrap();
        let r_ie = g.constant(Tensor::row_vector(vec![0.7; 4])).unwrap();
        let y1 = p.predict_prior(&mut g, r_ta, r_ia).unwrap();
        let y2 = p.predict_full(&mut g, r_ie, r_ta, r_ia).unwrap();
        assert_eq!(g.value(y1).data(), &[0.5, 0.5]);
        assert_eq!(g.value(y2).data(), &[0.5, 0.5]);
    }

    #[test]
    fn empty_history_is_half() {
        let (store, p) = setup(small(), 3);
        let emb = embedder(&posts(), 6);
        let s = p.intra_summary(&store, &emb, &[]).unwrap();
        assert_eq!(s.count, 0);
        assert!(p.intra_rep_plain(&store, &s).iter().all(|v| *v == 0.5));
        let mut g = Graph::new(&store);
        let r = p.intra_rep(&mut g, &s).unwrap();
        assert!(g.value(r).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn intra_graph_and_plain_agree_bitwise() {
        let (store, p) = setup(BranchDims::default(), 3);
        let ps = posts();
        let emb = embedder(&ps, 200);
        let s = p.intra_summary(&store, &emb, &ps[1..4]).unwrap();
        let mut g = Graph::new(&store);
        let r = p.intra_rep(&mut g, &s).unwrap();
        assert_eq!(g.value(r).data(), p.intra_rep_plain(&store, &s).as_slice());
    }

    #[test]
    fn single_history_post_matches_manual_composition() {
        let (store, p) = setup(small(), 4);
        let ps = posts();
        let emb = embedder(&ps, 6);
        let s = p.intra_summary(&store, &emb, &ps[1..2]).unwrap();
        let o = p.f_ia.encode_plain(&store, &emb.sequence(&ps[1])).unwrap();
        let act: Vec<f64> = o.iter().map(|v| sigmoid(*v)).collect();
        let manual: Vec<f64> = p.l_ia.forward_plain(&store, &act).into_iter().map(sigmoid).collect();
        for (a, b) in p.intra_rep_plain(&store, &s).iter().zip(&manual) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn intra_is_permutation_invariant() {
        let (store, p) = setup(BranchDims::default(), 5);
        let ps = posts();
        let emb = embedder(&ps, 200);
        let mut hist: Vec<Post> = ps[1..].to_vec();
        let reference = p.intra_rep_plain(&store, &p.intra_summary(&store, &emb, &hist).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            use rand::seq::SliceRandom;
            hist.shuffle(&mut rng);
            let r = p.intra_rep_plain(&store, &p.intra_summary(&store, &emb, &hist).unwrap());
            assert_eq!(r, reference);
            assert!(r.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn carry_changes_inter_output() {
        let (store, p) = setup(small(), 6);
        let ps = posts();
        let emb = embedder(&ps, 6);
        let mut g = Graph::new(&store);
        let first = p.inter_step(&mut g, &emb, &ps[0], None).unwrap();
        let fresh = p.inter_step(&mut g, &emb, &ps[4], None).unwrap();
        let carried = p.inter_step(&mut g, &emb, &ps[4], Some(&first.carry)).unwrap();
        assert_ne!(g.value(fresh.o_ie).data(), g.value(carried.o_ie).data());
    }

    #[test]
    fn pool_encoding_tracks_parameters() {
        let (mut store, p) = setup(small(), 7);
        let ps = posts();
        let emb = embedder(&ps, 6);
        let pool = [&ps[4], &ps[5]];
        let before = p.encode_pool(&store, &emb, &pool, &mut ProjectionCache::default()).unwrap();
        store.value_mut(p.f_ie.fwd.w_ih).data_mut()[0] += 0.5;
        let after = p.encode_pool(&store, &emb, &pool, &mut ProjectionCache::default()).unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn r_ie_slice_matters_only_when_weighted() {
        let (mut store, p) = setup(small(), 8);
        let w = store.value_mut(p.l_c_full.w);
        for r in 0..2 {
            for c in 0..4 {
                w.set(r, c, 0.0);
            }
        }
        let y_for = |store: &ParamStore, r_ie: f64| {
            let mut g = Graph::new(store);
            let a = g.constant(Tensor::row_vector(vec![r_ie; 4])).unwrap();
            let b = g.constant(Tensor::row_vector(vec![0.2, -0.1])).unwrap();
            let c = g.constant(Tensor::row_vector(vec![0.4; 4])).unwrap();
            let y = p.predict_full(&mut g, a, b, c).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(y_for(&store, 0.0), y_for(&store, 3.0));
        store.value_mut(p.l_c_full.w).set(1, 0, 0.5);
        assert_ne!(y_for(&store, 0.0), y_for(&store, 3.0));
    }

    #[test]
    fn full_head_with_zeroed_inter_block_reduces_to_prior() {
        let (mut store, p) = setup(small(), 9);
        let prior_w = store.value(p.l_c_prior.w).clone();
        let prior_b = store.value(p.l_c_prior.b).clone();
        let full = store.value_mut(p.l_c_full.w);
        for r in 0..2 {
            for c in 0..4 {
                full.set(r, c, 0.0);
            }
            for c in 0..6 {
                full.set(r, 4 + c, prior_w.get(r, c));
            }
        }
        *store.value_mut(p.l_c_full.b) = prior_b;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut g = Graph::new(&store);
            let mut v = |n| g.constant(Tensor::row_vector((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())).unwrap();
            let (r_ie, r_ta, r_ia) = (v(4), v(2), v(4));
            let a = p.predict_prior(&mut g, r_ta, r_ia).unwrap();
            let b = p.predict_full(&mut g, r_ie, r_ta, r_ia).unwrap();
            let (a, b) = (g.value(a).data().to_vec(), g.value(b).data().to_vec());
            assert_eq!(crate::nn::argmax(&a), crate::nn::argmax(&b));
            assert!((a[0] - b[0]).abs() < 1e-12);
        }
    }

    /// Cross-entropy of the fused prediction after a two-step episode with fixed actions.
    fn composite_loss(
        store: &ParamStore,
        p: &BranchParams,
        emb: &Embedder,
        ps: &[Post],
        s: &IntraSummary,
    ) -> (f64, crate::nn::Gradients) {
        let mut g = Graph::new(store);
        let t = p.encode_target(&mut g, emb, &ps[0]).unwrap();
        let r_ia = p.intra_rep(&mut g, s).unwrap();
        let prior = p.predict_prior(&mut g, t.r_ta, r_ia).unwrap();
        let l_prior = g.cross_entropy(prior, 1).unwrap();
        let mut step = p.inter_step(&mut g, emb, &ps[0], None).unwrap();
        for x in [&ps[4], &ps[5]] {
            step = p.inter_step(&mut g, emb, x, Some(&step.carry)).unwrap();
        }
        let y = p.predict_full(&mut g, step.r_ie, t.r_ta, r_ia).unwrap();
        let l_full = g.cross_entropy(y, 1).unwrap();
        let loss = g.add(l_prior, l_full).unwrap();
        let value = g.scalar(loss);
        let grads = g.backward(loss).unwrap();
        (value, grads)
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let ps = posts();
        let emb = embedder(&ps, 6);
        for seed in 0..50 {
            let (mut store, p) = setup(small(), 100 + seed);
            for id in store.group("l_ia") {
                store.set_frozen(id, false);
            }
            let s = p.intra_summary(&store, &emb, &ps[1..4]).unwrap();
            let (_, grads) = composite_loss(&store, &p, &emb, &ps, &s);
            let trainable: Vec<ParamId> = store.ids().filter(|id| !store.is_frozen(*id)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..8 {
                let id = trainable[rng.gen_range(0..trainable.len())];
                let idx = rng.gen_range(0..store.value(id).len());
                let analytic = grads.get_or_zero(id, &store).data()[idx];
                let numeric =
                    param_difference(&mut store, id, idx, DEFAULT_STEP, |st| composite_loss(st, &p, &emb, &ps, &s).0);
                let err = relative_error(analytic, numeric, 1e-6);
                assert!(err < 1e-4, "seed {seed} {}[{idx}]: {analytic} vs {numeric}", store.get(id).name);
            }
        }
    }
}
