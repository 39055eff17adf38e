//! A small group-normalized U-Net for binary segmentation.
//!
//! Layout for depth `D` and base width `B` (channel widths double per
//! level):
//!
//! ```text
//! enc0 ─────────────────────────────────────────────── dec0 → head → sigmoid
//!   └ pool → enc1 ──────────────────────────── dec1 ─┘
//!              └ pool → ... → mid (+dropout) ─┘ up + concat at every level
//! ```
//!
//! Every block is two 3×3 convolutions, each followed by group norm and
//! ReLU; the head is a 1×1 convolution to a single logit channel. That is
//! `4·D + 3` convolution layers, 15 for the default depth of 3.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use crate::autograd::spatial::resize_bilinear;
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream, RngContext};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Side length of the exported feature map; vectors have `FEATURE_SIDE²`
/// entries.
pub const FEATURE_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub groups: usize,
    pub dropout_rate: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            groups: 8,
            dropout_rate: 0.5,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("unet", "depth must be at least 1"));
        }
        if self.base_channels == 0 || self.groups == 0 || !self.base_channels.is_multiple_of(self.groups) {
            return Err(Error::invalid(
                "unet",
                format!(
                    "base_channels {} not divisible by groups {}",
                    self.base_channels, self.groups
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(
                "unet",
                format!("dropout rate {} outside [0, 1)", self.dropout_rate),
            ));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn conv_layer_count(&self) -> usize {
        self.layout().len()
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn layout(&self) -> Vec<ConvSpec> {
        let mut specs = Vec::new();
        let mut cin = 1;
        for level in 0..self.depth {
            let w = self.width(level);
            specs.push(ConvSpec::block(format!("enc{level}.conv1"), cin, w));
            specs.push(ConvSpec::block(format!("enc{level}.conv2"), w, w));
            cin = w;
        }
        let mid = self.width(self.depth);
        specs.push(ConvSpec::block("mid.conv1".into(), cin, mid));
        specs.push(ConvSpec::block("mid.conv2".into(), mid, mid));
        let mut below = mid;
        for level in (0..self.depth).rev() {
            let w = self.width(level);
            specs.push(ConvSpec::block(format!("dec{level}.conv1"), below + w, w));
            specs.push(ConvSpec::block(format!("dec{level}.conv2"), w, w));
            below = w;
        }
        specs.push(ConvSpec {
            name: "head".into(),
            cin: below,
            cout: 1,
            kernel: 1,
            normalized: false,
        });
        specs
    }
}

struct ConvSpec {
    name: String,
    cin: usize,
    cout: usize,
    kernel: usize,
    normalized: bool,
}

impl ConvSpec {
    fn block(name: String, cin: usize, cout: usize) -> Self {
        Self {
            name,
            cin,
            cout,
            kernel: 3,
            normalized: true,
        }
    }
}

/// Named parameter tensors of one network instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Errors unless `other` has exactly the same names and shapes.
    pub fn check_same_layout(&self, other: &Self) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::ParamMismatch(format!(
                "{} vs {} tensors",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.tensors.iter().zip(&other.tensors) {
            if na != nb {
                return Err(Error::ParamMismatch(format!("{na} vs {nb}")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::ParamMismatch(format!(
                    "{na}: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.zero_grad();
        }
    }

    pub fn has_any_grad(&self) -> bool {
        self.tensors.values().any(|t| t.grad().is_some())
    }

    /// Inserts every tensor into `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> BoundParams {
        let ids = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let mut t = t.clone();
                t.zero_grad();
                t.set_requires_grad(trainable);
                (name.clone(), graph.leaf(t))
            })
            .collect();
        BoundParams { ids }
    }

    /// Moves the gradients `graph` computed for `bound` into this set's
    /// gradient buffers.
    pub fn collect_grads(&mut self, graph: &mut Graph<T>, bound: &BoundParams) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            let id = bound.id(name)?;
            let g = graph
                .take_grad(id)
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            t.set_grad(g)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Graph node of every parameter, by name.
#[derive(Clone, Debug)]
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl FromIterator<(String, NodeId)> for BoundParams {
    fn from_iter<I: IntoIterator<Item = (String, NodeId)>>(iter: I) -> Self {
        Self { ids: iter.into_iter().collect() }
    }
}

impl BoundParams {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::ParamMismatch(format!("missing parameter {name}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct UNetOutput {
    pub logits: NodeId,
    pub probs: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    config: UNetConfig,
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// He-normal kernels (std `sqrt(2 / fan_in)`), zero biases, unit gain
    /// and zero shift in every group norm. Deterministic in `seed`.
    pub fn build<T: Scalar>(&self, seed: u64) -> ModelParams<T> {
        let mut rng = rng_for(seed, &[stream::INIT]);
        let mut tensors = BTreeMap::new();
        for spec in self.config.layout() {
            let fan_in = spec.cin * spec.kernel * spec.kernel;
            let std = (2.0 / fan_in as f64).sqrt();
            let shape = [spec.cout, spec.cin, spec.kernel, spec.kernel];
            let kernel = Tensor::from_fn(&shape, |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::from_f64(z * std)
            });
            tensors.insert(format!("{}.weight", spec.name), kernel);
            tensors.insert(format!("{}.bias", spec.name), Tensor::zeros(&[spec.cout]));
            if spec.normalized {
                tensors.insert(format!("{}.gn.gamma", spec.name), Tensor::full(&[spec.cout], T::one()));
                tensors.insert(format!("{}.gn.beta", spec.name), Tensor::zeros(&[spec.cout]));
            }
        }
        ModelParams { tensors }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.size_multiple();
        match *shape {
            [_, 1, h, w] if h % m == 0 && w % m == 0 => Ok(()),
            _ => Err(Error::shape(
                "unet",
                format!("input {shape:?} must be [N, 1, H, W] with H, W divisible by {m}"),
            )),
        }
    }

    fn conv_block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        name: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let y = g.conv2d(
            x,
            p.id(&format!("{name}.weight"))?,
            p.id(&format!("{name}.bias"))?,
            1,
            1,
        )?;
        let y = g.group_norm(
            y,
            self.config.groups,
            p.id(&format!("{name}.gn.gamma"))?,
            p.id(&format!("{name}.gn.beta"))?,
        )?;
        g.relu(y)
    }

    fn block<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, name: &str, x: NodeId) -> Result<NodeId> {
        let y = self.conv_block(g, p, &format!("{name}.conv1"), x)?;
        self.conv_block(g, p, &format!("{name}.conv2"), y)
    }

    /// Records the forward pass in `g`. Dropout needs `rng` in train mode.
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: NodeId,
        mode: Mode,
        rng: Option<&RngContext>,
    ) -> Result<UNetOutput> {
        self.check_input(g.value(x).shape())?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for level in 0..self.config.depth {
            let y = self.block(g, p, &format!("enc{level}"), h)?;
            skips.push(y);
            h = g.max_pool2(y)?;
        }
        h = self.block(g, p, "mid", h)?;
        if mode == Mode::Train && self.config.dropout_rate > 0.0 {
            let ctx = rng.ok_or_else(|| Error::invalid("unet", "train-mode dropout needs an rng context"))?;
            h = g.dropout(h, self.config.dropout_rate, true, &mut ctx.layer_rng(0))?;
        }
        for level in (0..self.config.depth).rev() {
            let up = g.upsample_nearest2(h)?;
            let cat = g.concat_channels(up, skips[level])?;
            h = self.block(g, p, &format!("dec{level}"), cat)?;
        }
        let logits = g.conv2d(h, p.id("head.weight")?, p.id("head.bias")?, 1, 0)?;
        let probs = g.sigmoid(logits)?;
        Ok(UNetOutput { logits, probs })
    }

    /// Convenience forward without gradient tracking; returns
    /// `(probs, logits)`.
    pub fn forward<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        x: &Tensor<T>,
        mode: Mode,
        rng: Option<&RngContext>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let xi = g.constant(x.clone());
        let out = self.forward_graph(&mut g, &bound, xi, mode, rng)?;
        Ok((g.value(out.probs).clone(), g.value(out.logits).clone()))
    }

    /// Pre-sigmoid logit maps resized bilinearly to 16×16 and flattened,
    /// one 256-vector per sample. Always evaluated in eval mode.
    pub fn export_features<T: Scalar>(&self, params: &ModelParams<T>, x: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        let (_, logits) = self.forward(params, x, Mode::Eval, None)?;
        Ok(logit_features(&logits))
    }
}

/// Resizes each `[1, H, W]` logit map in `logits` to the fixed feature
/// grid.
pub fn logit_features<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<T>> {
    let (n, c, h, w) = logits.dims4("export_features").expect("logits are rank 4");
    let plane = c * h * w;
    (0..n)
        .map(|i| {
            resize_bilinear(
                &logits.data()[i * plane..(i + 1) * plane],
                c,
                h,
                w,
                FEATURE_SIDE,
                FEATURE_SIDE,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetConfig {
        UNetConfig {
            depth: 2,
            base_channels: 4,
            groups: 2,
            dropout_rate: 0.5,
        }
    }

    #[test]
    fn default_layout_has_fifteen_conv_layers() {
        assert_eq!(UNetConfig::default().conv_layer_count(), 15);
    }

    #[test]
    fn rejects_indivisible_groups() {
        let cfg = UNetConfig {
            base_channels: 6,
            groups: 4,
            ..UNetConfig::default()
        };
        assert!(UNet::new(cfg).is_err());
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let net = UNet::new(tiny()).unwrap();
        let a = net.build::<f32>(3);
        assert_eq!(a, net.build::<f32>(3));
        assert_ne!(a, net.build::<f32>(4));
    }

    #[test]
    fn forward_rejects_bad_input_size() {
        let net = UNet::new(tiny()).unwrap();
        let p = net.build::<f32>(0);
        assert!(net.forward(&p, &Tensor::zeros(&[1, 1, 10, 8]), Mode::Eval, None).is_err());
        assert!(net.forward(&p, &Tensor::zeros(&[1, 2, 8, 8]), Mode::Eval, None).is_err());
        assert!(net.forward(&p, &Tensor::zeros(&[1, 1, 8, 8]), Mode::Train, None).is_err());
    }

    #[test]
    fn zero_parameters_give_constant_head_bias() {
        let net = UNet::new(tiny()).unwrap();
        let mut p = net.build::<f64>(1);
        for (_, t) in p.iter_mut() {
            t.data_mut().fill(0.0);
        }
        p.get_mut("head.bias").unwrap().data_mut()[0] = 0.3;
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| (i as f64 * 0.1).cos());
        let (probs, logits) = net.forward(&p, &x, Mode::Eval, None).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.3));
        let s = crate::autograd::sigmoid(0.3);
        assert!(probs.data().iter().all(|&v| v == s));
    }
}
