//! Adam with a coupled L2 penalty.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `l2_lambda * param` before the moment
    /// updates.
    pub l2_lambda: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.99,
            beta2: 0.999,
            eps: 1e-8,
            l2_lambda: 6e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::invalid("adam", format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0) || !(self.l2_lambda >= 0.0) {
            return Err(Error::invalid("adam", "eps must be positive and l2_lambda non-negative"));
        }
        Ok(())
    }
}

/// First and second moments mirroring a parameter set, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let zeros = ModelParams::from_map(
            params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        );
        Ok(Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        })
    }

    /// One update of `params` from their gradient buffers, which are
    /// consumed.
    pub fn step(&mut self, params: &mut ModelParams<T>, lr: f64) -> Result<()> {
        params.check_same_layout(&self.m)?;
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(Error::MissingGradient(name.clone()));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::invalid("adam", format!("learning rate {lr}")));
        }
        let AdamConfig { beta1, beta2, eps, l2_lambda } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for ((_, p), ((_, m), (_, v))) in params.iter_mut().zip(moments) {
            let g = p.take_grad().expect("checked above");
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, theta) in p.data_mut().iter_mut().enumerate() {
                let th = theta.as_f64();
                let gi = g[i].as_f64() + l2_lambda * th;
                let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * gi;
                let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                *theta = T::from_f64(th - update);
            }
        }
        Ok(())
    }
}
