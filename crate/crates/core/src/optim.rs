//! RMSProp with multiplicative learning-rate annealing.
//!
//! For every parameter `θ` with gradient `g`:
//! `cache ← ρ·cache + (1−ρ)·g²`, then `θ ← θ − lr·g / (√cache + ε)` where
//! `lr = base_lr · anneal^epoch`.

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::layers::LayerParams;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsPropConfig {
    pub base_lr: f64,
    pub anneal: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            base_lr: 5e-4,
            anneal: 0.95,
            rho: 0.9,
            eps: 1e-8,
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.anneal > 0.0
            && self.anneal <= 1.0
            && (0.0..1.0).contains(&self.rho)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Parameter(format!(
                "invalid RMSProp settings {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropState<T = f32> {
    config: RmsPropConfig,
    epoch: u32,
    /// One running mean of squared gradients per parameter tensor, in the
    /// order weights, bias of each layer. Created lazily on the first step.
    caches: Vec<Tensor<T>>,
}

impl<T: Scalar> RmsPropState<T> {
    pub fn new(config: RmsPropConfig) -> Result<Self> {
        config.validate()?;
        Ok(RmsPropState {
            config,
            epoch: 0,
            caches: Vec::new(),
        })
    }

    pub fn config(&self) -> &RmsPropConfig {
        &self.config
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn caches(&self) -> &[Tensor<T>] {
        &self.caches
    }

    pub fn effective_lr(&self) -> f64 {
        self.config.base_lr * self.config.anneal.powi(self.epoch as i32)
    }

    /// One annealing event.
    pub fn advance_epoch(&mut self) {
        self.epoch += 1;
    }

    pub fn step(&mut self, layers: &mut [LayerParams<T>]) -> Result<()> {
        if self.caches.is_empty() {
            self.caches = layers
                .iter()
                .flat_map(|l| {
                    [
                        Tensor::zeros(l.weights.dims()),
                        Tensor::zeros(l.bias.dims()),
                    ]
                })
                .collect();
        }
        if self.caches.len() != 2 * layers.len() {
            return Err(Error::Parameter(format!(
                "optimizer tracks {} tensors, got {} layers",
                self.caches.len(),
                layers.len()
            )));
        }
        let lr = T::of(self.effective_lr());
        let rho = T::of(self.config.rho);
        let keep = T::one() - rho;
        let eps = T::of(self.config.eps);
        let mut caches = self.caches.iter_mut();
        for layer in layers.iter_mut() {
            let LayerParams {
                weights,
                bias,
                grad_weights,
                grad_bias,
            } = layer;
            for (param, grad) in [(weights, &*grad_weights), (bias, &*grad_bias)] {
                let cache = caches.next().expect("length checked");
                if cache.dims() != param.dims() || grad.dims() != param.dims() {
                    return Err(Error::Shape(format!(
                        "optimizer cache {:?} vs parameter {:?}",
                        cache.dims(),
                        param.dims()
                    )));
                }
                for ((p, c), &g) in param
                    .data_mut()
                    .iter_mut()
                    .zip(cache.data_mut())
                    .zip(grad.data())
                {
                    *c = rho * *c + keep * g * g;
                    *p = *p - lr * g / (c.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

impl RmsPropState<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(b"RMSP");
        for v in [
            self.config.base_lr,
            self.config.anneal,
            self.config.rho,
            self.config.eps,
        ] {
            w.f64(v);
        }
        w.u32(self.epoch);
        w.u32(self.caches.len() as u32);
        for c in &self.caches {
            w.u8(c.rank() as u8);
            for &d in c.dims() {
                w.u32(d as u32);
            }
            w.f32s(c.data().iter().copied());
        }
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        if r.take(4)? != b"RMSP" {
            return r.error("bad optimizer magic");
        }
        let config = RmsPropConfig {
            base_lr: r.f64()?,
            anneal: r.f64()?,
            rho: r.f64()?,
            eps: r.f64()?,
        };
        let epoch = r.u32()?;
        let n = r.u32()? as usize;
        let mut caches = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let at = r.offset();
            let data = r.f32s(dims.iter().product())?;
            caches.push(Tensor::new(&dims, data).map_err(|e| Error::Format {
                offset: at,
                reason: e.to_string(),
            })?);
        }
        r.expect_end()?;
        let mut state = Self::new(config)?;
        state.epoch = epoch;
        state.caches = caches;
        Ok(state)
    }
}
