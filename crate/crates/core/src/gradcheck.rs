//! Central-finite-difference verification of analytic gradients.
//!
//! The checker rebuilds the forward graph from scratch for every probe, so
//! it exercises only the forward path and stays independent of the backward
//! implementation it validates.

use crate::autodiff::{Tape, TensorData, Var};
use anyhow::{ensure, Result};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compare analytic gradients of a scalar function against central finite
/// differences on up to `coords_per_input` sampled coordinates per input.
///
/// Relative error per coordinate is `|an − fd| / (max(|an|, |fd|) + 1e-8)`.
pub fn check_scalar_fn<F>(
    f: F,
    inputs: &[TensorData],
    coords_per_input: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    ensure!(!inputs.is_empty(), "nothing to check");
    let analytic: Vec<TensorData> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.var(x.clone())).collect();
        let loss = f(&tape, &vars);
        let grads = tape.backward(loss);
        vars.iter()
            .map(|v| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| TensorData::zeros(v.value().raw_dim()))
            })
            .collect()
    };

    let eval = |probe_input: usize, data: TensorData| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| tape.var(if i == probe_input { data.clone() } else { x.clone() }))
            .collect();
        f(&tape, &vars).scalar()
    };

    let mut max_rel_err: f64 = 0.0;
    let mut coords_checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        let mut indices: Vec<usize> = (0..input.len()).collect();
        indices.shuffle(rng);
        indices.truncate(coords_per_input.max(1));
        for idx in indices {
            let mut plus = input.clone();
            let mut minus = input.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let fd = (eval(i, plus) - eval(i, minus)) / (2.0 * h);
            let an = analytic[i].as_slice().unwrap()[idx];
            let rel = (an - fd).abs() / (an.abs().max(fd.abs()) + 1e-8);
            max_rel_err = max_rel_err.max(rel);
            coords_checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, coords_checked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    // y = sum(x²) has gradient 2x; this op lies and claims 3x.
    fn wrong<'t>(tape: &'t Tape, vars: &[Var<'t>]) -> Var<'t> {
        let v = vars[0];
        let value = v.value().mapv(|a| a * a);
        let id = v.id();
        let xv = v.value();
        tape.push(
            value,
            Some(Box::new(move |g, sink| sink(id, g * &xv.mapv(|a| 3.0 * a)))),
        )
        .sum_all()
    }

    fn right<'t>(_tape: &'t Tape, vars: &[Var<'t>]) -> Var<'t> {
        vars[0].mul(vars[0]).sum_all()
    }

    #[test]
    fn catches_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = ArrayD::from_shape_fn(IxDyn(&[6]), |_| rng.random::<f64>() + 0.5);
        let report = check_scalar_fn(wrong, &[x.clone()], 6, 1e-6, &mut rng).unwrap();
        assert!(report.max_rel_err > 0.2, "must detect the wrong factor");

        let report = check_scalar_fn(right, &[x], 6, 1e-6, &mut rng).unwrap();
        assert!(report.max_rel_err < 1e-7);
    }
}
