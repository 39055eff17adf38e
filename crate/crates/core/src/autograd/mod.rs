//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive application in construction order.
//! Leaves are inserted with [`Graph::leaf`]; primitives return a [`NodeId`]
//! for their output. [`Graph::backward`] walks the tape in reverse and
//! leaves `dLoss/dLeaf` in the gradient buffer of every leaf tensor that
//! requires a gradient.
//!
//! Leaf gradients accumulate across repeated `backward` calls until
//! [`Graph::zero_grad`] is invoked; intermediate gradients never persist.

mod conv;
pub mod gradcheck;
mod norm;
pub mod spatial;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use self::conv::ConvGeom;
use self::norm::GroupStats;

/// Epsilon used by group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    GroupNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        stats: GroupStats<T>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Clamp {
        input: NodeId,
        lo: T,
        hi: T,
    },
    Affine {
        input: NodeId,
        scale: T,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MaxPool2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    UpsampleNearest2(NodeId),
    UpsampleBilinear2(NodeId),
    Dropout {
        input: NodeId,
        mask: Vec<T>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Concat(NodeId, NodeId),
    Narrow {
        input: NodeId,
        start: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Record of primitive applications, in topological (construction) order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        self.push(tensor, Op::Leaf)
    }

    /// Inserts a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> NodeId {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a leaf, populated by [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.nodes[id.0].value.take_grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad()
    }

    fn derived(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        let mut t = Tensor::new(shape, data)?;
        t.set_requires_grad(inputs.iter().any(|&i| self.needs(i)));
        Ok(self.push(t, op))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let geom = ConvGeom::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            self.value(bias).shape(),
            stride,
            padding,
        )?;
        let (out, cols) = conv::forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
            self.needs(kernel),
        );
        self.derived(
            &geom.output_shape(),
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            &[input, kernel, bias],
        )
    }

    pub fn group_norm(&mut self, input: NodeId, groups: usize, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        self.group_norm_eps(input, groups, gamma, beta, GROUP_NORM_EPS)
    }

    pub fn group_norm_eps(
        &mut self,
        input: NodeId,
        groups: usize,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.value(input).dims4("group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [c] {
                return Err(Error::shape(
                    "group_norm",
                    format!("{name} {:?} does not match {c} channels", self.value(id).shape()),
                ));
            }
        }
        if !(eps > 0.0) {
            return Err(Error::invalid("group_norm", "eps must be positive"));
        }
        let (y, stats) = norm::forward(
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            h * w,
            groups,
            eps,
        );
        self.derived(
            &[n, c, h, w],
            y,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                stats,
            },
            &[input, gamma, beta],
        )
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> Result<NodeId> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let data = v.data().iter().map(|&a| f(a)).collect();
        self.derived(&shape, data, op, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |a| if a > T::zero() { a } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Natural log; inputs must be positive (clamp first).
    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(x).data().iter().find(|v| !(**v > T::zero())) {
            return Err(Error::invalid("ln", format!("non-positive input {bad}")));
        }
        self.unary(x, |a| a.ln(), Op::Ln(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> Result<NodeId> {
        if lo > hi {
            return Err(Error::invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        self.unary(x, |a| a.max(lo).min(hi), Op::Clamp { input: x, lo, hi })
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: T, shift: T) -> Result<NodeId> {
        self.unary(x, |a| scale * a + shift, Op::Affine { input: x, scale })
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        self.affine(x, factor, T::zero())
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.affine(x, T::one(), c)
    }

    fn binary(&mut self, name: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let shape = self.value(a).shape().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.derived(&shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise quotient; denominators must be non-zero (guard with an
    /// epsilon first).
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(b).data().iter().any(|v| *v == T::zero()) {
            return Err(Error::invalid("div", "zero denominator"));
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4("max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("max_pool2", format!("spatial size {h}x{w} is not even")));
        }
        let (y, argmax) = spatial::max_pool2(self.value(x).data(), n * c, h, w);
        self.derived(&[n, c, h / 2, w / 2], y, Op::MaxPool2 { input: x, argmax }, &[x])
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4("upsample_nearest2")?;
        let y = spatial::upsample_nearest2(self.value(x).data(), n * c, h, w);
        self.derived(&[n, c, 2 * h, 2 * w], y, Op::UpsampleNearest2(x), &[x])
    }

    pub fn upsample_bilinear2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4("upsample_bilinear2")?;
        let y = spatial::resize_bilinear(self.value(x).data(), n * c, h, w, 2 * h, 2 * w);
        self.derived(&[n, c, 2 * h, 2 * w], y, Op::UpsampleBilinear2(x), &[x])
    }

    /// Inverted dropout. In eval mode, or with `rate == 0`, returns `x`
    /// itself (exact identity).
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f64, train: bool, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        self.derived(&shape, data, Op::Dropout { input: x, mask }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.derived(&[1], vec![T::from_f64(s)], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let s = v.data().iter().map(|v| v.as_f64()).sum::<f64>() / v.numel() as f64;
        self.derived(&[1], vec![T::from_f64(s)], Op::Mean(x), &[x])
    }

    /// Concatenates two `[N, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, ca, ha, wa) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for n in 0..na {
            data.extend_from_slice(&da[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&db[n * cb * plane..(n + 1) * cb * plane]);
        }
        self.derived(&[na, ca + cb, ha, wa], data, Op::Concat(a, b), &[a, b])
    }

    /// Samples `start..start + len` along the leading axis.
    pub fn narrow(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} out of leading dim {}", start + len, shape[0]),
            ));
        }
        let stride = self.value(x).numel() / shape[0];
        let data = self.value(x).data()[start * stride..(start + len) * stride].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        self.derived(&out_shape, data, Op::Narrow { input: x, start }, &[x])
    }

    /// Populates `dLoss/dLeaf` for every leaf requiring a gradient.
    ///
    /// Leaves unreachable from `loss` receive a zero gradient. Calling
    /// `backward` again without [`Graph::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            for (id, delta) in self.input_grads(i, &g) {
                accumulate(&mut grads, id, delta);
            }
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() && node.value.grad().is_none() {
                let zeros = vec![T::zero(); node.value.numel()];
                node.value.accumulate_grad(&zeros);
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i`'s output gradient `g` to its
    /// inputs that require one.
    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(NodeId, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        macro_rules! emit {
            ($id:expr, $grad:expr) => {
                if self.needs($id) {
                    out.push(($id, $grad));
                }
            };
        }
        let val = |id: NodeId| self.value(id).data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let need = [self.needs(*input), self.needs(*kernel), self.needs(*bias)];
                let grads = conv::backward(val(*input), val(*kernel), g, geom, need, cols.as_deref());
                for (id, d) in [(*input, grads.input), (*kernel, grads.kernel), (*bias, grads.bias)] {
                    if let Some(d) = d {
                        out.push((id, d));
                    }
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (n, c, h, w) = self.value(*input).dims4("group_norm").expect("checked in forward");
                let grads = norm::backward(val(*input), val(*gamma), g, stats, n, c, h * w, *groups);
                for (id, d) in [(*input, grads.input), (*gamma, grads.gamma), (*beta, grads.beta)] {
                    if self.needs(id) {
                        out.push((id, d));
                    }
                }
            }
            Op::Relu(x) => emit!(*x, {
                val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&a, &d)| if a > T::zero() { d } else { T::zero() })
                    .collect()
            }),
            Op::Sigmoid(x) => emit!(*x, {
                node.value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &d)| d * s * (T::one() - s))
                    .collect()
            }),
            Op::Ln(x) => emit!(*x, val(*x).iter().zip(g).map(|(&a, &d)| d / a).collect()),
            Op::Clamp { input, lo, hi } => emit!(*input, {
                val(*input)
                    .iter()
                    .zip(g)
                    .map(|(&a, &d)| if a >= *lo && a <= *hi { d } else { T::zero() })
                    .collect()
            }),
            Op::Affine { input, scale } => emit!(*input, g.iter().map(|&d| d * *scale).collect()),
            Op::Add(a, b) => {
                emit!(*a, g.to_vec());
                emit!(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                emit!(*a, g.to_vec());
                emit!(*b, g.iter().map(|&d| -d).collect());
            }
            Op::Mul(a, b) => {
                emit!(*a, val(*b).iter().zip(g).map(|(&y, &d)| d * y).collect());
                emit!(*b, val(*a).iter().zip(g).map(|(&x, &d)| d * x).collect());
            }
            Op::Div(a, b) => {
                emit!(*a, val(*b).iter().zip(g).map(|(&y, &d)| d / y).collect());
                emit!(*b, {
                    val(*a)
                        .iter()
                        .zip(val(*b))
                        .zip(g)
                        .map(|((&x, &y), &d)| -d * x / (y * y))
                        .collect()
                });
            }
            Op::MaxPool2 { input, argmax } => {
                emit!(*input, spatial::max_pool2_backward(g, argmax, self.value(*input).numel()))
            }
            Op::UpsampleNearest2(x) => emit!(*x, {
                let (n, c, h, w) = self.value(*x).dims4("upsample").expect("checked in forward");
                spatial::upsample_nearest2_backward(g, n * c, h, w)
            }),
            Op::UpsampleBilinear2(x) => emit!(*x, {
                let (n, c, h, w) = self.value(*x).dims4("upsample").expect("checked in forward");
                spatial::resize_bilinear_backward(g, n * c, h, w, 2 * h, 2 * w)
            }),
            Op::Dropout { input, mask } => {
                emit!(*input, g.iter().zip(mask).map(|(&d, &m)| d * m).collect())
            }
            Op::Sum(x) => emit!(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => emit!(*x, {
                let n = self.value(*x).numel();
                vec![g[0] / T::from_f64(n as f64); n]
            }),
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4("concat").expect("checked in forward");
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let split = |first: bool| -> Vec<T> {
                    let mut d = Vec::with_capacity(n * if first { ca } else { cb } * plane);
                    for ni in 0..n {
                        let base = ni * (ca + cb) * plane;
                        if first {
                            d.extend_from_slice(&g[base..base + ca * plane]);
                        } else {
                            d.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                        }
                    }
                    d
                };
                emit!(*a, split(true));
                emit!(*b, split(false));
            }
            Op::Narrow { input, start } => emit!(*input, {
                let v = self.value(*input);
                let stride = v.numel() / v.shape()[0];
                let mut d = vec![T::zero(); v.numel()];
                d[start * stride..start * stride + g.len()].copy_from_slice(g);
                d
            }),
        }
        out
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, delta: Vec<T>) {
    match &mut grads[id.0] {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 4 * 3).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = g.constant(t(&[2, 1, 4, 3], &data));
        let k = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, k, b, 1, 1), Err(Error::Shape { .. })));
        let k2 = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(g.conv2d(x, k2, b, 2, 0).is_err());
    }

    #[test]
    fn group_norm_constant_input_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 4, 3, 3], 7.5));
        let ga = g.constant(Tensor::full(&[4], 1.0));
        let be = g.constant(Tensor::zeros(&[4]));
        let y = g.group_norm(x, 2, ga, be).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_norm_two_values_map_to_unit_pair() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 1, 2], &[1.0, 3.0]));
        let ga = g.constant(Tensor::full(&[1], 1.0));
        let be = g.constant(Tensor::zeros(&[1]));
        let y = g.group_norm_eps(x, 1, ga, be, 1e-14).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 6, 2, 2]));
        let ga = g.constant(Tensor::full(&[6], 1.0));
        let be = g.constant(Tensor::zeros(&[6]));
        assert!(matches!(g.group_norm(x, 4, ga, be), Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(0.0f32), 0.5);
        assert!(sigmoid(-1000.0f64) >= 0.0 && sigmoid(1000.0f64) <= 1.0);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 1, 4, 4], 2.0).with_requires_grad());
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 4.0));
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sum_gradient_is_ones_and_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[2, 3], 0.3).with_requires_grad());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 6]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn bilinear_product_gradients_swap() {
        let mut g = Graph::<f64>::new();
        let xv = [1.0, -2.0, 0.5];
        let yv = [3.0, 4.0, -1.5];
        let x = g.leaf(t(&[3], &xv).with_requires_grad());
        let y = g.leaf(t(&[3], &yv).with_requires_grad());
        let p = g.mul(x, y).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &yv);
        assert_eq!(g.grad(y).unwrap(), &xv);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]).with_requires_grad());
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaves_get_zero_gradient_and_constants_none() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[2], 1.0).with_requires_grad());
        let unused = g.leaf(Tensor::full(&[3], 1.0).with_requires_grad());
        let c = g.constant(Tensor::full(&[2], 5.0));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0; 3]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn concat_and_narrow_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[2, 1, 2, 2], 1.0));
        let b = g.constant(Tensor::full(&[2, 3, 2, 2], 2.0));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 4, 2, 2]);
        assert_eq!(&g.value(c).data()[..8], &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let n = g.narrow(c, 1, 1).unwrap();
        assert_eq!(g.value(n).shape(), &[1, 4, 2, 2]);
        assert!(g.narrow(c, 1, 2).is_err());
        let bad = g.constant(Tensor::full(&[2, 1, 4, 4], 1.0));
        assert!(g.concat_channels(a, bad).is_err());
    }

    #[test]
    fn binary_ops_reject_mismatched_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
    }
}
