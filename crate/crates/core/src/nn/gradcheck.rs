//! Central finite differences for checking reverse-mode gradients.
//!
//! Only forward evaluations are used here, never the backward rules under test.

use super::{ParamId, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, floor)`. The floor keeps gradients that are zero up to
/// round-off from reporting spurious relative error.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + h) − f(x − h)) / 2h` for one scalar of a vector input.
pub fn central_difference(x: &mut [f64], index: usize, step: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[index];
    x[index] = orig + step;
    let plus = f(x);
    x[index] = orig - step;
    let minus = f(x);
    x[index] = orig;
    (plus - minus) / (2.0 * step)
}

/// Central difference with respect to one scalar entry of a stored parameter.
pub fn param_difference(
    store: &mut ParamStore,
    id: ParamId,
    index: usize,
    step: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = store.value(id).data()[index];
    store.value_mut(id).data_mut()[index] = orig + step;
    let plus = f(store);
    store.value_mut(id).data_mut()[index] = orig - step;
    let minus = f(store);
    store.value_mut(id).data_mut()[index] = orig;
    (plus - minus) / (2.0 * step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;

    #[test]
    fn sum_gradient_is_ones() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.leaf(Tensor::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0])).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.leaf(Tensor::zeros(1, 1)).unwrap();
        let y = g.sigmoid(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data()[0], 0.25);
    }

    #[test]
    fn softmax_and_cross_entropy_of_uniform() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.leaf(Tensor::zeros(1, 2)).unwrap();
        let p = g.softmax(x).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
        for label in 0..2 {
            let ce = g.cross_entropy(p, label).unwrap();
            assert!((g.scalar(ce) - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_twice_and_non_scalar_root_are_errors() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.leaf(Tensor::zeros(1, 3)).unwrap();
        assert!(g.backward(x).is_err());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(crate::nn::NnError::BackwardTwice)));
        g.zero_grad();
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn unreachable_parameter_has_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::filled(1, 2, 1.0));
        let unused = store.add("unused", Tensor::filled(1, 2, 1.0));
        let mut g = Graph::new(&store);
        let u = g.param(used);
        let _ = g.param(unused);
        let s = g.sum(u).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zero(unused, &store).data(), &[0.0, 0.0]);
        assert_eq!(grads.get(used).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn nan_is_a_numerical_fault() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.leaf(Tensor::filled(1, 1, f64::MAX)).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(crate::nn::NnError::NumericalFault { .. })));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.leaf(Tensor::zeros(1, 2)).unwrap();
        let b = g.leaf(Tensor::zeros(1, 3)).unwrap();
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
        assert!(g.matmul_t(a, b).is_err());
        assert!(g.concat(&[a, b]).is_ok());
        let tall = g.leaf(Tensor::zeros(2, 2)).unwrap();
        assert!(g.concat(&[a, tall]).is_err());
    }

    /// Every elementwise and structural op composed into one scalar; gradient of the
    /// composite checked against central differences.
    fn composite(g: &mut Graph<'_>, a: crate::nn::Var, w: crate::nn::Var, b: crate::nn::Var) -> crate::nn::Var {
        let xw = g.matmul_t(a, w).unwrap(); // 3×4
        let xb = g.add_row(xw, b).unwrap();
        let s = g.sigmoid(xb).unwrap();
        let t = g.tanh(xb).unwrap();
        let m = g.mul(s, t).unwrap();
        let sum = g.add(m, s).unwrap();
        let sl = g.slice_cols(sum, 1, 2).unwrap();
        let cat = g.concat(&[sl, t]).unwrap(); // 3×6
        let sc = g.scale(cat, 0.7).unwrap();
        let sm = g.softmax(sc).unwrap();
        let ls = g.log_softmax(sc).unwrap();
        let pr = g.sum_rows(ls).unwrap();
        let r1 = g.row(sm, 1).unwrap();
        let two = g.slice_cols(r1, 0, 2).unwrap();
        let p2 = g.softmax(two).unwrap();
        let ce = g.cross_entropy(p2, 1).unwrap();
        let rs = g.reshape(pr, 6, 1).unwrap();
        let pk = g.pick(rs, 4).unwrap();
        let tot = g.sum(sm).unwrap();
        let acc = g.add(ce, pk).unwrap();
        g.add(acc, tot).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn every_op_matches_finite_differences(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rand_vec = |n: usize| (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<f64>>();
            let mut flat: Vec<f64> = rand_vec(3 * 5 + 4 * 5 + 4);
            let eval = |flat: &[f64], grad: bool| -> (f64, Vec<f64>) {
                let store = ParamStore::new();
                let mut g = Graph::new(&store);
                let a = g.leaf(Tensor::from_vec(3, 5, flat[..15].to_vec())).unwrap();
                let w = g.leaf(Tensor::from_vec(4, 5, flat[15..35].to_vec())).unwrap();
                let b = g.leaf(Tensor::from_vec(1, 4, flat[35..].to_vec())).unwrap();
                let out = composite(&mut g, a, w, b);
                let val = g.scalar(out);
                if !grad {
                    return (val, vec![]);
                }
                g.backward(out).unwrap();
                let mut gr = g.grad(a).unwrap().data().to_vec();
                gr.extend_from_slice(g.grad(w).unwrap().data());
                gr.extend_from_slice(g.grad(b).unwrap().data());
                (val, gr)
            };
            let (_, analytic) = eval(&flat, true);
            for (i, &a) in analytic.iter().enumerate() {
                let numeric = central_difference(&mut flat, i, DEFAULT_STEP, |x| eval(x, false).0);
                let err = relative_error(a, numeric, FLOOR);
                prop_assert!(err < TOL, "index {i}: analytic {a} numeric {numeric} err {err}");
            }
        }
    }
}
