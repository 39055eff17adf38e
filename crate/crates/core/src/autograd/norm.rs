//! Group normalization kernels.

use crate::scalar::Scalar;

pub(crate) struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes each `(sample, group)` block to zero mean and unit variance,
/// then applies the per-channel affine `gamma`, `beta`.
///
/// Statistics are accumulated in `f64` regardless of `T`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    eps: f64,
) -> (Vec<T>, GroupStats<T>) {
    let cg = c / groups;
    let block = cg * hw;
    let mut y = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for ni in 0..n {
        for gi in 0..groups {
            let start = (ni * c + gi * cg) * hw;
            let xs = &x[start..start + block];
            let m = xs.iter().map(|v| v.as_f64()).sum::<f64>() / block as f64;
            let var = xs
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>()
                / block as f64;
            let r = 1.0 / (var + eps).sqrt();
            for ch in 0..cg {
                let cidx = gi * cg + ch;
                let (ga, be) = (gamma[cidx].as_f64(), beta[cidx].as_f64());
                let off = start + ch * hw;
                for (yo, xi) in y[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                    *yo = T::from_f64(ga * (xi.as_f64() - m) * r + be);
                }
            }
            mean.push(T::from_f64(m));
            rstd.push(T::from_f64(r));
        }
    }
    (y, GroupStats { mean, rstd })
}

pub(crate) struct NormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    dy: &[T],
    stats: &GroupStats<T>,
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
) -> NormGrads<T> {
    let cg = c / groups;
    let block = (cg * hw) as f64;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for ni in 0..n {
        for gi in 0..groups {
            let sidx = ni * groups + gi;
            let (m, r) = (stats.mean[sidx].as_f64(), stats.rstd[sidx].as_f64());
            let start = (ni * c + gi * cg) * hw;
            // mean of dxhat and of dxhat·xhat over the group
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for ch in 0..cg {
                let cidx = gi * cg + ch;
                let ga = gamma[cidx].as_f64();
                let off = start + ch * hw;
                for (xi, dyi) in x[off..off + hw].iter().zip(&dy[off..off + hw]) {
                    let xhat = (xi.as_f64() - m) * r;
                    let d = dyi.as_f64();
                    dgamma[cidx] += d * xhat;
                    dbeta[cidx] += d;
                    sum_d += d * ga;
                    sum_dx += d * ga * xhat;
                }
            }
            let mean_d = sum_d / block;
            let mean_dx = sum_dx / block;
            for ch in 0..cg {
                let cidx = gi * cg + ch;
                let ga = gamma[cidx].as_f64();
                let off = start + ch * hw;
                for i in off..off + hw {
                    let xhat = (x[i].as_f64() - m) * r;
                    let dxhat = dy[i].as_f64() * ga;
                    dx[i] = T::from_f64(r * (dxhat - mean_d - xhat * mean_dx));
                }
            }
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma.into_iter().map(T::from_f64).collect(),
        beta: dbeta.into_iter().map(T::from_f64).collect(),
    }
}
