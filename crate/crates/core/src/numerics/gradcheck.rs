//! Finite-difference verification of reverse-mode gradients.
//!
//! The analytic gradient comes from the tape; this module only re-evaluates
//! the forward function, so the two sides stay independent.

use crate::error::{Error, Result};

/// Compare an analytic gradient against central differences
/// `(f(theta+h) - f(theta-h)) / 2h` per coordinate.
///
/// Returns the max relative error `|a - fd| / max(|a|, |fd|, 1)`. Non-finite
/// function evaluations fail the check.
pub fn grad_check<F>(mut f: F, theta: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if theta.len() != analytic.len() {
        return Err(Error::shape("grad_check: gradient length mismatch"));
    }
    if !(h > 0.0) {
        return Err(Error::config("grad_check: step must be positive"));
    }
    let mut work = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        work[i] = theta[i] + h;
        let fp = f(&work)?;
        work[i] = theta[i] - h;
        let fm = f(&work)?;
        work[i] = theta[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::training("grad_check: non-finite function evaluation"));
        }
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;
    use crate::numerics::nn::{mlp_forward, MlpSpec, ParamStore};
    use crate::numerics::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_essentially_exact() {
        let w = [2.0, -3.0, 0.5];
        let f = |x: &[f64]| Ok(x.iter().zip(&w).map(|(a, b)| a * b).sum());
        let err = grad_check(f, &[1.0, 2.0, 3.0], &w, 1e-5).unwrap();
        assert!(err < 1e-10, "linear rel err {err}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let f = |_: &[f64]| Ok(42.0);
        let err = grad_check(f, &[0.3, -1.2], &[0.0, 0.0], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn mlp_squared_norm_matches_reverse_mode() {
        // f = ||MLP(x)||^2 over widths [3,4,2]; theta are the MLP parameters
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let spec = MlpSpec::build(&mut store, &mut rng, "m", &[3, 4, 2]).unwrap();
        let x = Tensor::from_raw(vec![1, 3], vec![0.3, -0.8, 1.1]);

        let run = |store: &ParamStore| -> (f64, Vec<Option<Tensor>>, usize) {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let y = mlp_forward(&mut g, store, &spec, xn).unwrap();
            let y2 = g.mul(y, y).unwrap();
            let loss = g.sum_all(y2);
            let grads = g.backward(loss, store.len()).unwrap();
            (g.value(loss).data()[0], grads, store.len())
        };
        let (_, grads, n_slots) = run(&store);
        let mut analytic = Vec::new();
        for s in 0..n_slots {
            let shape = store.get(s).shape().to_vec();
            match &grads[s] {
                Some(t) => analytic.extend_from_slice(t.data()),
                None => analytic.extend(std::iter::repeat_n(0.0, shape.iter().product())),
            }
        }
        let theta = store.flatten();
        let mut probe_store = store.clone();
        let err = grad_check(
            |flat| {
                probe_store.unflatten(flat).unwrap();
                Ok(run(&probe_store).0)
            },
            &theta,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "mlp rel err {err}");
    }

    #[test]
    fn composite_kernels_pass_100_random_seeds() {
        // mlp -> layer norm -> softmax chain, checked against central
        // differences for 100 seeds
        for seed in 0..100u64 {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = MlpSpec::build(&mut store, &mut rng, "m", &[2, 3, 3]).unwrap();
            let gain = store.add("ln.g", Tensor::from_raw(vec![3], vec![rng.gen_range(0.5..1.5), 1.0, 0.9]));
            let bias = store.add("ln.b", Tensor::zeros(&[3]));
            let x = Tensor::from_raw(vec![2, 2], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let probe = Tensor::from_raw(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
            // keep the layer-norm input away from the constant-row degeneracy
            let offset = Tensor::from_raw(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());

            let run = |store: &ParamStore| -> (f64, Vec<Option<Tensor>>) {
                let mut g = Graph::new();
                let xn = g.constant(x.clone());
                let y = mlp_forward(&mut g, store, &spec, xn).unwrap();
                let off = g.constant(offset.clone());
                let y = g.add(y, off).unwrap();
                let gn = g.param(gain, store.get(gain));
                let bn = g.param(bias, store.get(bias));
                let y = g.layer_norm_rows(y, gn, bn, 1e-6).unwrap();
                let y = g.row_softmax(y).unwrap();
                let p = g.constant(probe.clone());
                let y = g.mul(y, p).unwrap();
                let loss = g.sum_all(y);
                let grads = g.backward(loss, store.len()).unwrap();
                (g.value(loss).data()[0], grads)
            };
            let (_, grads) = run(&store);
            let mut analytic = Vec::new();
            for s in 0..store.len() {
                match &grads[s] {
                    Some(t) => analytic.extend_from_slice(t.data()),
                    None => analytic.extend(std::iter::repeat_n(0.0, store.get(s).numel())),
                }
            }
            let theta = store.flatten();
            let mut probe_store = store.clone();
            let err = grad_check(
                |flat| {
                    probe_store.unflatten(flat).unwrap();
                    Ok(run(&probe_store).0)
                },
                &theta,
                &analytic,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed} rel err {err}");
        }
    }
}
