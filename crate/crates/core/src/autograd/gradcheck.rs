//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::tensor::Tensor;

use super::{Graph, NodeId};

/// Magnitude below which gradients are compared absolutely rather than
/// relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Per-element comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// One vector per input tensor.
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    pub rel_errors: Vec<Vec<f64>>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// `(input, element)` pairs whose central difference misses because a
    /// kink lies within the step: the one-sided differences disagree, and a
    /// central difference with a smaller step matches the analytic value.
    pub kinks: Vec<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    /// Like [`passed`](Self::passed) but tolerates elements listed in
    /// [`kinks`](Self::kinks), where the central difference straddles a
    /// point of non-differentiability.
    pub fn passed_allowing_kinks(&self) -> bool {
        self.rel_errors.iter().enumerate().all(|(k, errs)| {
            errs.iter()
                .enumerate()
                .all(|(i, &e)| e < self.tolerance || self.kinks.contains(&(k, i)))
        })
    }
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`; zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks a scalar function of one tensor. The step for element `i` is
/// `step · (1 + |x_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    grad_check_many(|g, ids| f(g, ids[0]), std::slice::from_ref(x), step, tolerance)
}

/// Checks a scalar function of several tensors, perturbing every element
/// of every input.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad()))
        .collect();
    let out = f(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let f0 = eval(inputs)?;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut one_sided = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[k].numel());
        let mut sides = Vec::with_capacity(inputs[k].numel());
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            let h = step * (1.0 + x0.abs());
            work[k].data_mut()[i] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            col.push((up - down) / (2.0 * h));
            sides.push(((up - f0) / h, (f0 - down) / h));
        }
        numeric.push(col);
        one_sided.push(sides);
    }

    let rel_errors: Vec<Vec<f64>> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| a.iter().zip(n).map(|(&a, &n)| relative_error(a, n)).collect())
        .collect();
    let mut kinks = Vec::new();
    for (k, errs) in rel_errors.iter().enumerate() {
        for (i, &e) in errs.iter().enumerate() {
            let (fwd, bwd) = one_sided[k][i];
            if e < tolerance || relative_error(fwd, bwd) < tolerance {
                continue;
            }
            let x0 = inputs[k].data()[i];
            for shrink in [10.0, 100.0, 1000.0] {
                let h = step * (1.0 + x0.abs()) / shrink;
                work[k].data_mut()[i] = x0 + h;
                let up = eval(&work)?;
                work[k].data_mut()[i] = x0 - h;
                let down = eval(&work)?;
                work[k].data_mut()[i] = x0;
                if relative_error(analytic[k][i], (up - down) / (2.0 * h)) < tolerance {
                    kinks.push((k, i));
                    break;
                }
            }
        }
    }
    let max_rel_error = rel_errors
        .iter()
        .flatten()
        .fold(0.0f64, |m, &e| if e.is_nan() { f64::INFINITY } else { m.max(e) });
    Ok(GradCheckReport {
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        tolerance,
        kinks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::new(&[4], vec![0.3, -1.7, 2.5, 10.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &x,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(r.passed(), "max rel err {}", r.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let z = g.scale(x, 0.0)?;
                let s = g.sum(z)?;
                g.add_scalar(s, 4.0)
            },
            &x,
            1e-5,
            1e-12,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.analytic[0].iter().chain(&r.numeric[0]).all(|&v| v == 0.0));
    }

    #[test]
    fn kink_inside_step_is_resolved_by_a_smaller_step() {
        let x = Tensor::new(&[2], vec![2e-6, -3.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let y = g.relu(x)?;
                g.sum(y)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed());
        assert_eq!(r.kinks, vec![(0, 0)]);
        assert!(r.passed_allowing_kinks());
    }
}
