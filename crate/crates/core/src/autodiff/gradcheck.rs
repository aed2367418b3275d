//! Finite-difference verification of tape gradients.

use super::{Tape, Tensor, VarId};
use crate::rng::{normal_vec, seeded};

/// Relative disagreement with a floor against 0/0 blowup.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference check of `build` (leaves → scalar) per coordinate.
///
/// Rebuilds the graph for every probe, so `build` must be deterministic.
/// Returns the worst relative error across all leaf coordinates.
pub fn fd_check_scalar(
    leaves: &[Tensor],
    build: impl Fn(&mut Tape, &[VarId]) -> VarId,
    step: f64,
) -> f64 {
    let eval = |probe: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = probe.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &ids);
        tape.value(root).item()
    };

    // Analytic gradients once.
    let mut tape = Tape::new();
    let ids: Vec<VarId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &ids);
    let grads = tape.backward(root);

    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[li], leaf.shape());
        for i in 0..leaf.numel() {
            let h = step * leaf.data()[i].abs().max(1.0);
            let mut probe: Vec<Tensor> = leaves.to_vec();
            probe[li].data_mut()[i] += h;
            let up = eval(&probe);
            probe[li].data_mut()[i] -= 2.0 * h;
            let down = eval(&probe);
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], fd));
        }
    }
    worst
}

/// Directional variant: probes `n_dirs` random unit directions per leaf
/// instead of every coordinate. Cheaper for large parameter counts.
pub fn fd_check_directional(
    leaves: &[Tensor],
    build: impl Fn(&mut Tape, &[VarId]) -> VarId,
    step: f64,
    n_dirs: usize,
    seed: u64,
) -> f64 {
    let eval = |probe: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = probe.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &ids);
        tape.value(root).item()
    };
    let mut tape = Tape::new();
    let ids: Vec<VarId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &ids);
    let grads = tape.backward(root);

    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_dirs {
        let dirs: Vec<Vec<f64>> = leaves
            .iter()
            .map(|l| {
                let mut d = normal_vec(&mut rng, l.numel());
                let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                d.iter_mut().for_each(|x| *x /= norm);
                d
            })
            .collect();
        let mut analytic_dd = 0.0;
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads.get_or_zeros(ids[li], leaf.shape());
            analytic_dd += g
                .data()
                .iter()
                .zip(&dirs[li])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        let mut plus: Vec<Tensor> = leaves.to_vec();
        let mut minus: Vec<Tensor> = leaves.to_vec();
        for li in 0..leaves.len() {
            for i in 0..leaves[li].numel() {
                plus[li].data_mut()[i] += step * dirs[li][i];
                minus[li].data_mut()[i] -= step * dirs[li][i];
            }
        }
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
        worst = worst.max(rel_err(analytic_dd, fd));
    }
    worst
}

/// Per-leaf worst errors with values, for diagnosing composite graphs.
pub fn fd_check_verbose(
    leaves: &[Tensor],
    build: impl Fn(&mut Tape, &[VarId]) -> VarId,
    step: f64,
) -> Vec<(usize, usize, f64, f64, f64)> {
    let eval = |probe: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = probe.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &ids);
        tape.value(root).item()
    };
    let mut tape = Tape::new();
    let ids: Vec<VarId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &ids);
    let grads = tape.backward(root);
    let mut rows = Vec::new();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[li], leaf.shape());
        for i in 0..leaf.numel() {
            let h = step * leaf.data()[i].abs().max(1.0);
            let mut probe: Vec<Tensor> = leaves.to_vec();
            probe[li].data_mut()[i] += h;
            let up = eval(&probe);
            probe[li].data_mut()[i] -= 2.0 * h;
            let down = eval(&probe);
            let fd = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            rows.push((li, i, a, fd, rel));
        }
    }
    rows.sort_by(|x, y| y.4.partial_cmp(&x.4).unwrap());
    rows
}

/// Spec-facing alias: max relative error of the tape gradient of a scalar
/// function against central finite differences.
pub fn grad_check(
    leaves: &[Tensor],
    build: impl Fn(&mut Tape, &[VarId]) -> VarId,
    eps: f64,
) -> f64 {
    fd_check_scalar(leaves, build, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ops;
    use crate::rng::seeded;
    use std::rc::Rc;

    #[test]
    fn quadratic_form_is_exact_to_fd_precision() {
        let x = Tensor::randn(&mut seeded(1), vec![1, 6], 1.0);
        let build = |tape: &mut Tape, leaves: &[VarId]| {
            ops::masked_mse_mean(
                tape,
                leaves[0],
                Rc::new(vec![vec![0.5; 6]]),
                Rc::new(vec![true]),
                1.0,
            )
        };
        let err = fd_check_scalar(&[x], build, 1e-5);
        assert!(err < 1e-8, "quadratic form err {err}");
    }

    #[test]
    fn corrupted_vjp_is_detected() {
        // A deliberately wrong backward: forward exp, backward pretends
        // derivative is 1.
        fn bad_exp(tape: &mut Tape, x: VarId) -> VarId {
            let out: Vec<f64> = tape.value(x).data().iter().map(|v| v.exp()).collect();
            let value = Tensor::new(tape.value(x).shape().to_vec(), out);
            tape.push(
                value,
                vec![x],
                Box::new(|ctx| vec![ctx.upstream.clone()]),
            )
        }
        let x = Tensor::randn(&mut seeded(2), vec![1, 4], 1.0);
        let build = |tape: &mut Tape, leaves: &[VarId]| {
            let y = bad_exp(tape, leaves[0]);
            ops::masked_mse_mean(
                tape,
                y,
                Rc::new(vec![vec![0.0; 4]]),
                Rc::new(vec![true]),
                1.0,
            )
        };
        let err = fd_check_scalar(&[x], build, 1e-5);
        assert!(err > 1e-2, "corruption not detected: {err}");
    }

    #[test]
    fn directional_check_agrees_with_coordinate_check() {
        let x = Tensor::randn(&mut seeded(3), vec![2, 5], 1.0);
        let build = |tape: &mut Tape, leaves: &[VarId]| {
            let e = ops::exp(tape, leaves[0]);
            let n = tape.value(e).numel();
            let flat = ops::reshape(tape, e, vec![1, n]);
            ops::masked_mse_mean(
                tape,
                flat,
                Rc::new(vec![vec![1.0; n]]),
                Rc::new(vec![true]),
                1.0,
            )
        };
        let err = fd_check_directional(&[x], build, 1e-6, 4, 7);
        assert!(err < 1e-6, "directional err {err}");
    }
}
