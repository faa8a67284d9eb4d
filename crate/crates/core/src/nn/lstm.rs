//! LSTM and bidirectional LSTM encoders.
//!
//! Gates are packed `[input, forget, candidate, output]` along the `4·d_h` axis:
//!
//! ```text
//! z  = (W_ih·x + b) + W_hh·h
//! i, f, o = σ(z_i), σ(z_f), σ(z_o);  g = tanh(z_g)
//! c' = f⊙c + i⊙g;  h' = o⊙tanh(c')
//! ```
//!
//! Two evaluation paths share this arithmetic: graph nodes (differentiable) and a plain
//! forward pass for frozen or detached encodings. Both accumulate in the same order, so
//! they agree bit for bit.

use std::collections::HashMap;

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::{dot, sigmoid, Tensor};
use super::NnError;

pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
}

/// Differentiable recurrent state of one direction.
#[derive(Debug, Clone, Copy)]
pub struct CellState {
    pub h: Var,
    pub c: Var,
}

impl LstmDirection {
    pub fn register<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, d_h: usize, rng: &mut R) -> Self {
        let w_ih = store.add_uniform(format!("{prefix}.w_ih"), 4 * d_h, d_in, d_in, rng);
        let w_hh = store.add_uniform(format!("{prefix}.w_hh"), 4 * d_h, d_h, d_h, rng);
        let mut bias = Tensor::zeros(1, 4 * d_h);
        bias.data_mut()[d_h..2 * d_h].fill(FORGET_BIAS);
        let b = store.add(format!("{prefix}.b"), bias);
        Self { w_ih, w_hh, b }
    }

    pub fn hidden(&self, store: &ParamStore) -> usize {
        store.value(self.w_hh).cols()
    }

    /// One step on a single `1×d_in` input.
    pub fn cell(&self, g: &mut Graph<'_>, x: Var, state: CellState) -> Result<CellState, NnError> {
        let proj = g.linear(x, self.w_ih, self.b)?;
        self.step(g, proj, state)
    }

    /// One step given the already-projected input row `W_ih·x + b`.
    fn step(&self, g: &mut Graph<'_>, proj: Var, state: CellState) -> Result<CellState, NnError> {
        let d_h = self.hidden(g.store());
        let w_hh = g.param(self.w_hh);
        let rec = g.matmul_t(state.h, w_hh)?;
        let z = g.add(proj, rec)?;
        let zi = g.slice_cols(z, 0, d_h)?;
        let zf = g.slice_cols(z, d_h, d_h)?;
        let zg = g.slice_cols(z, 2 * d_h, d_h)?;
        let zo = g.slice_cols(z, 3 * d_h, d_h)?;
        let i = g.sigmoid(zi)?;
        let f = g.sigmoid(zf)?;
        let cand = g.tanh(zg)?;
        let o = g.sigmoid(zo)?;
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok(CellState { h, c })
    }

    /// Runs over the rows of `seq` (`L×d_in`), in reverse when `reverse` is set.
    pub fn run(&self, g: &mut Graph<'_>, seq: Var, init: CellState, reverse: bool) -> Result<CellState, NnError> {
        let len = g.shape(seq).0;
        let proj = g.linear(seq, self.w_ih, self.b)?;
        let mut state = init;
        for step in 0..len {
            let t = if reverse { len - 1 - step } else { step };
            let row = g.row(proj, t)?;
            state = self.step(g, row, state)?;
        }
        Ok(state)
    }

    fn project_plain(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.value(self.w_ih);
        let b = store.value(self.b).data();
        let k = w.cols();
        (0..w.rows()).map(|j| dot(x, &w.data()[j * k..(j + 1) * k]) + b[j]).collect()
    }

    /// Plain-forward step; `h` and `c` are updated in place.
    fn step_plain(&self, store: &ParamStore, proj: &[f64], h: &mut [f64], c: &mut [f64]) {
        let w_hh = store.value(self.w_hh);
        let d_h = h.len();
        let z: Vec<f64> = (0..4 * d_h).map(|j| proj[j] + dot(h, &w_hh.data()[j * d_h..(j + 1) * d_h])).collect();
        for k in 0..d_h {
            let i = sigmoid(z[k]);
            let f = sigmoid(z[d_h + k]);
            let cand = z[2 * d_h + k].tanh();
            let o = sigmoid(z[3 * d_h + k]);
            c[k] = f * c[k] + i * cand;
            h[k] = o * c[k].tanh();
        }
    }
}

/// Final `(h, c)` of both directions; carried between inter-user encoding steps.
#[derive(Debug, Clone, Copy)]
pub struct LstmCarry {
    pub fwd: CellState,
    pub bwd: CellState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiLstm {
    pub fwd: LstmDirection,
    pub bwd: LstmDirection,
}

impl BiLstm {
    pub fn register<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, d_h: usize, rng: &mut R) -> Self {
        let fwd = LstmDirection::register(store, &format!("{prefix}.fwd"), d_in, d_h, rng);
        let bwd = LstmDirection::register(store, &format!("{prefix}.bwd"), d_in, d_h, rng);
        Self { fwd, bwd }
    }

    pub fn hidden(&self, store: &ParamStore) -> usize {
        self.fwd.hidden(store)
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        2 * self.hidden(store)
    }

    pub fn zero_carry(&self, g: &mut Graph<'_>) -> Result<LstmCarry, NnError> {
        let d_h = self.hidden(g.store());
        let mut zero = || -> Result<CellState, NnError> {
            Ok(CellState { h: g.constant(Tensor::zeros(1, d_h))?, c: g.constant(Tensor::zeros(1, d_h))? })
        };
        Ok(LstmCarry { fwd: zero()?, bwd: zero()? })
    }

    /// Encodes `seq` (`L×d_in`) into the concatenated final hidden states `[h_fwd ⊕ h_bwd]`.
    /// A missing `init` means the zero state.
    pub fn encode(&self, g: &mut Graph<'_>, seq: Var, init: Option<&LstmCarry>) -> Result<(Var, LstmCarry), NnError> {
        if g.shape(seq).0 == 0 {
            return Err(NnError::EmptySequence);
        }
        let init = match init {
            Some(c) => *c,
            None => self.zero_carry(g)?,
        };
        let f = self.fwd.run(g, seq, init.fwd, false)?;
        let b = self.bwd.run(g, seq, init.bwd, true)?;
        let o = g.concat(&[f.h, b.h])?;
        Ok((o, LstmCarry { fwd: f, bwd: b }))
    }

    /// Zero-initialized forward pass outside any graph.
    pub fn encode_plain(&self, store: &ParamStore, seq: &Tensor) -> Result<Vec<f64>, NnError> {
        let mut cache = ProjectionCache::default();
        let rows: Vec<&[f64]> = (0..seq.rows()).map(|i| seq.row(i)).collect();
        let keys: Vec<usize> = (0..seq.rows()).collect();
        self.encode_keyed(store, &keys, |k| rows[k], &mut cache)
    }

    /// Plain forward over a sequence of keyed inputs (e.g. token ids), reusing input
    /// projections already present in `cache`. The cache is only valid for one parameter
    /// snapshot; callers must clear it after any update.
    pub fn encode_keyed<'a>(
        &self,
        store: &ParamStore,
        keys: &[usize],
        input: impl Fn(usize) -> &'a [f64],
        cache: &mut ProjectionCache,
    ) -> Result<Vec<f64>, NnError> {
        if keys.is_empty() {
            return Err(NnError::EmptySequence);
        }
        let d_h = self.hidden(store);
        let mut out = Vec::with_capacity(2 * d_h);
        for (dir, reverse, table) in [(&self.fwd, false, &mut cache.fwd), (&self.bwd, true, &mut cache.bwd)] {
            let mut h = vec![0.0; d_h];
            let mut c = vec![0.0; d_h];
            for step in 0..keys.len() {
                let key = if reverse { keys[keys.len() - 1 - step] } else { keys[step] };
                let proj = table.entry(key).or_insert_with(|| dir.project_plain(store, input(key)));
                dir.step_plain(store, proj, &mut h, &mut c);
            }
            out.extend_from_slice(&h);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NumericalFault { op: "bilstm_plain" });
        }
        Ok(out)
    }
}

/// Input projections `W_ih·x + b` keyed by input id, per direction.
#[derive(Debug, Default, Clone)]
pub struct ProjectionCache {
    fwd: HashMap<usize, Vec<f64>>,
    bwd: HashMap<usize, Vec<f64>>,
}

impl ProjectionCache {
    pub fn clear(&mut self) {
        self.fwd.clear();
        self.bwd.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d_in: usize, d_h: usize, seed: u64) -> (ParamStore, BiLstm) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = BiLstm::register(&mut store, "enc", d_in, d_h, &mut rng);
        (store, enc)
    }

    fn random_seq(len: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(len, d, (0..len * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_params_give_zero_cell_output() {
        let mut store = ParamStore::new();
        let dir = LstmDirection {
            w_ih: store.add("w_ih", Tensor::zeros(4 * 64, 200)),
            w_hh: store.add("w_hh", Tensor::zeros(4 * 64, 64)),
            b: store.add("b", Tensor::zeros(1, 4 * 64)),
        };
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::filled(1, 200, 0.3)).unwrap();
        let h = g.constant(Tensor::zeros(1, 64)).unwrap();
        let c = g.constant(Tensor::zeros(1, 64)).unwrap();
        let next = dir.cell(&mut g, x, CellState { h, c }).unwrap();
        assert_eq!(g.shape(next.h), (1, 64));
        assert_eq!(g.shape(next.c), (1, 64));
        assert!(g.value(next.h).data().iter().all(|v| *v == 0.0));
        assert!(g.value(next.c).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forget_bias_is_one() {
        let (store, enc) = setup(5, 3, 0);
        assert_eq!(store.value(enc.fwd.b).data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn plain_and_graph_paths_agree_bitwise() {
        let (store, enc) = setup(7, 5, 11);
        let seq = random_seq(6, 7, 12);
        let mut g = Graph::new(&store);
        let s = g.constant(seq.clone()).unwrap();
        let (o, _) = enc.encode(&mut g, s, None).unwrap();
        let plain = enc.encode_plain(&store, &seq).unwrap();
        assert_eq!(g.value(o).data(), plain.as_slice());
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let (store, enc) = setup(4, 2, 0);
        let mut g = Graph::new(&store);
        let s = g.constant(Tensor::zeros(0, 4)).unwrap();
        assert!(matches!(enc.encode(&mut g, s, None), Err(NnError::EmptySequence)));
        assert!(matches!(enc.encode_plain(&store, &Tensor::zeros(0, 4)), Err(NnError::EmptySequence)));
    }

    #[test]
    fn carried_state_changes_output() {
        let (store, enc) = setup(6, 4, 5);
        let a = random_seq(3, 6, 1);
        let b = random_seq(4, 6, 2);
        let mut g = Graph::new(&store);
        let sa = g.constant(a).unwrap();
        let sb = g.constant(b).unwrap();
        let (_, carry) = enc.encode(&mut g, sa, None).unwrap();
        let (cold, _) = enc.encode(&mut g, sb, None).unwrap();
        let (warm, _) = enc.encode(&mut g, sb, Some(&carry)).unwrap();
        assert_ne!(g.value(cold).data(), g.value(warm).data());
    }

    #[test]
    fn node_count_is_linear_in_length() {
        let (store, enc) = setup(8, 4, 5);
        let count = |len: usize| {
            let mut g = Graph::new(&store);
            let s = g.constant(random_seq(len, 8, 3)).unwrap();
            enc.encode(&mut g, s, None).unwrap();
            g.len()
        };
        let (n30, n60, n90) = (count(30), count(60), count(90));
        assert_eq!(n60 - n30, n90 - n60);
        assert!(n30 < 30 * 40);
    }
}
