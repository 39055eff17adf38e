//! Segmentation task losses and student/teacher consistency losses.
//!
//! All losses take probability maps and reduce over the whole batch at
//! once (the Dice family is not averaged per sample).

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Denominator guard for Dice and Tversky.
pub const OVERLAP_EPS: f64 = 1e-8;
/// Probabilities are clamped to `[CE_EPS, 1 - CE_EPS]` inside logarithms.
pub const CE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Dice,
    Mse,
    CrossEntropy,
    Tversky { alpha: f64, beta: f64 },
}

impl LossKind {
    pub fn tversky(alpha: f64, beta: f64) -> Result<Self> {
        if alpha < 0.0 || beta < 0.0 || !(alpha + beta > 0.0) {
            return Err(Error::invalid(
                "tversky",
                format!("need alpha, beta >= 0 with positive sum, got {alpha}, {beta}"),
            ));
        }
        Ok(Self::Tversky { alpha, beta })
    }

    /// Records the loss between `p` (prediction) and `target` in `g`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: NodeId, target: NodeId) -> Result<NodeId> {
        match *self {
            LossKind::Dice => dice_loss(g, p, target),
            LossKind::Mse => mse_consistency(g, p, target),
            LossKind::CrossEntropy => ce_consistency(g, target, p),
            LossKind::Tversky { alpha, beta } => tversky_loss(g, p, target, alpha, beta),
        }
    }

    /// Value of the loss on plain tensors.
    pub fn evaluate<T: Scalar>(&self, p: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
        let mut g = Graph::new();
        let pi = g.constant(p.clone());
        let ti = g.constant(target.clone());
        let out = self.apply(&mut g, pi, ti)?;
        Ok(g.value(out).item().as_f64())
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Dice => f.write_str("dice"),
            LossKind::Mse => f.write_str("mse"),
            LossKind::CrossEntropy => f.write_str("ce"),
            LossKind::Tversky { .. } => f.write_str("tversky"),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    /// Parses `dice`, `mse`, `ce` or `tversky` (α = β = 0.5; set the
    /// weights separately).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(LossKind::Dice),
            "mse" => Ok(LossKind::Mse),
            "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
            "tversky" => Ok(LossKind::Tversky { alpha: 0.5, beta: 0.5 }),
            other => Err(Error::invalid("loss", format!("unknown loss {other:?}"))),
        }
    }
}

fn check_pair<T: Scalar>(g: &Graph<T>, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

fn sum_product<T: Scalar>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let m = g.mul(a, b)?;
    g.sum(m)
}

/// `-2·Σ p·g / (Σ p + Σ g + eps)`, in `[-1, 0]`.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, p: NodeId, target: NodeId) -> Result<NodeId> {
    check_pair(g, "dice_loss", p, target)?;
    let inter = sum_product(g, p, target)?;
    let num = g.scale(inter, T::from_f64(-2.0))?;
    let sp = g.sum(p)?;
    let st = g.sum(target)?;
    let den = g.add(sp, st)?;
    let den = g.add_scalar(den, T::from_f64(OVERLAP_EPS))?;
    g.div(num, den)
}

/// `Σ (p - q)² / N`.
pub fn mse_consistency<T: Scalar>(g: &mut Graph<T>, p: NodeId, q: NodeId) -> Result<NodeId> {
    check_pair(g, "mse_consistency", p, q)?;
    let d = g.sub(p, q)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Binary cross-entropy of `q` against soft targets `p`:
/// `-mean(p·ln q + (1 - p)·ln(1 - q))`, with `q` clamped away from 0 and 1.
pub fn ce_consistency<T: Scalar>(g: &mut Graph<T>, p: NodeId, q: NodeId) -> Result<NodeId> {
    check_pair(g, "ce_consistency", p, q)?;
    let eps = T::from_f64(CE_EPS);
    let qc = g.clamp(q, eps, T::one() - eps)?;
    let log_q = g.ln(qc)?;
    let one_minus_q = g.affine(qc, -T::one(), T::one())?;
    let log_1q = g.ln(one_minus_q)?;
    let one_minus_p = g.affine(p, -T::one(), T::one())?;
    let a = g.mul(p, log_q)?;
    let b = g.mul(one_minus_p, log_1q)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    g.scale(m, -T::one())
}

/// `-TP / (TP + α·FP + β·FN + eps/2)` with soft counts
/// `TP = Σ p·g`, `FP = Σ p·(1-g)`, `FN = Σ (1-p)·g`.
pub fn tversky_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: NodeId,
    target: NodeId,
    alpha: f64,
    beta: f64,
) -> Result<NodeId> {
    LossKind::tversky(alpha, beta)?;
    check_pair(g, "tversky_loss", p, target)?;
    let p1 = g.affine(p, -T::one(), T::one())?;
    let g1 = g.affine(target, -T::one(), T::one())?;
    let tp = sum_product(g, p, target)?;
    let fp = sum_product(g, p, g1)?;
    let fn_ = sum_product(g, p1, target)?;
    // numerator and denominator doubled so that α = β = ½ gives Dice exactly
    let tp2 = g.scale(tp, T::from_f64(2.0))?;
    let fp = g.scale(fp, T::from_f64(2.0 * alpha))?;
    let fn_ = g.scale(fn_, T::from_f64(2.0 * beta))?;
    let den = g.add(tp2, fp)?;
    let den = g.add(den, fn_)?;
    let den = g.add_scalar(den, T::from_f64(OVERLAP_EPS))?;
    let neg = g.scale(tp2, -T::one())?;
    g.div(neg, den)
}

/// `task + γ·consistency`. The L2 term of the objective lives in the
/// optimizer.
pub fn combined_objective<T: Scalar>(
    g: &mut Graph<T>,
    task: NodeId,
    consistency: NodeId,
    gamma: f64,
) -> Result<NodeId> {
    check_finite_scalar(g, task, "task loss")?;
    check_finite_scalar(g, consistency, "consistency loss")?;
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::NonFinite(format!("consistency weight {gamma}")));
    }
    let weighted = g.scale(consistency, T::from_f64(gamma))?;
    g.add(task, weighted)
}

/// Plain-number form of [`combined_objective`].
pub fn combine(task: f64, consistency: f64, gamma: f64) -> Result<f64> {
    for (v, what) in [(task, "task loss"), (consistency, "consistency loss"), (gamma, "consistency weight")] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{what} {v}")));
        }
    }
    Ok(task + gamma * consistency)
}

fn check_finite_scalar<T: Scalar>(g: &Graph<T>, id: NodeId, what: &str) -> Result<()> {
    let v = g.value(id);
    if !v.is_scalar() {
        return Err(Error::shape("combined_objective", format!("{what} is not scalar")));
    }
    if !v.item().is_finite() {
        return Err(Error::NonFinite(format!("{what} {}", v.item())));
    }
    Ok(())
}

/// Dice numerator terms `(p·g_hard, p·g_soft)` for one voxel: a soft target
/// equal to the prediction scores lower than a hard one.
pub fn score_orientation_probe(p: f64, g_hard: f64, g_soft: f64) -> (f64, f64) {
    (p * g_hard, p * g_soft)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor<f64> {
        Tensor::new(&[data.len()], data.to_vec()).unwrap()
    }

    fn eval(kind: LossKind, p: &[f64], q: &[f64]) -> f64 {
        kind.evaluate(&t(p), &t(q)).unwrap()
    }

    #[test]
    fn dice_examples() {
        assert!((eval(LossKind::Dice, &[1.0; 4], &[1.0; 4]) + 1.0).abs() < 1e-8);
        assert_eq!(eval(LossKind::Dice, &[0.0; 4], &[1.0, 0.0, 1.0, 0.0]), 0.0);
        assert!((eval(LossKind::Dice, &[0.9], &[1.0]) + 1.8 / 1.9).abs() < 1e-8);
    }

    #[test]
    fn dice_of_empty_masks_is_zero() {
        assert_eq!(eval(LossKind::Dice, &[0.0; 3], &[0.0; 3]), 0.0);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(eval(LossKind::Mse, &[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert_eq!(eval(LossKind::Mse, &[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(eval(LossKind::Mse, &[0.5], &[0.0]), 0.25);
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = |p: f64, q: f64| {
            let mut g = Graph::<f64>::new();
            let pi = g.constant(t(&[p]));
            let qi = g.constant(t(&[q]));
            let out = ce_consistency(&mut g, pi, qi).unwrap();
            g.value(out).item()
        };
        assert!(ce(1.0, 1.0) < 1e-6);
        assert!((ce(1.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((ce(0.5, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn tversky_examples() {
        let tv = |p: &[f64], g: &[f64], a, b| eval(LossKind::tversky(a, b).unwrap(), p, g);
        assert!((tv(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], 0.3, 0.7) + 1.0).abs() < 1e-8);
        assert!((tv(&[1.0, 1.0, 0.0], &[1.0, 0.0, 0.0], 0.3, 0.7) + 1.0 / 1.3).abs() < 1e-8);
        let (p, g) = ([1.0, 0.0, 1.0, 1.0], [1.0, 1.0, 0.0, 1.0]);
        assert_eq!(tv(&p, &g, 0.5, 0.5), eval(LossKind::Dice, &p, &g));
    }

    #[test]
    fn tversky_rejects_bad_weights() {
        assert!(LossKind::tversky(0.0, 0.0).is_err());
        assert!(LossKind::tversky(-0.1, 1.0).is_err());
    }

    #[test]
    fn losses_reject_shape_mismatch() {
        for kind in [LossKind::Dice, LossKind::Mse, LossKind::CrossEntropy, LossKind::Tversky { alpha: 0.5, beta: 0.5 }] {
            assert!(kind.evaluate(&t(&[0.5, 0.5]), &t(&[0.5])).is_err());
        }
    }

    #[test]
    fn combined_objective_examples() {
        assert_eq!(combine(-0.8, 0.3, 0.0).unwrap(), -0.8);
        assert!((combine(-0.8, 0.02, 10.0).unwrap() + 0.6).abs() < 1e-12);
        assert_eq!(combine(-0.8, 0.0, 10.0).unwrap(), -0.8);
        assert!(combine(f64::NAN, 0.0, 1.0).is_err());

        let mut g = Graph::<f64>::new();
        let task = g.constant(Tensor::scalar(-0.8));
        let cons = g.constant(Tensor::scalar(0.02));
        let total = combined_objective(&mut g, task, cons, 10.0).unwrap();
        assert!((g.value(total).item() + 0.6).abs() < 1e-12);
        let bad = g.constant(Tensor::scalar(f64::INFINITY));
        assert!(combined_objective(&mut g, task, bad, 1.0).is_err());
    }

    #[test]
    fn score_orientation_examples() {
        assert_eq!(score_orientation_probe(0.9, 1.0, 0.9).0, 0.9);
        assert!((score_orientation_probe(0.9, 1.0, 0.9).1 - 0.81).abs() < 1e-15);
        assert_eq!(score_orientation_probe(1.0, 1.0, 1.0), (1.0, 1.0));
    }

    #[test]
    fn loss_names_round_trip() {
        for s in ["dice", "mse", "ce"] {
            assert_eq!(s.parse::<LossKind>().unwrap().to_string(), s);
        }
        assert!("focal".parse::<LossKind>().is_err());
    }
}
