//! The fixed layer recipe of one ensemble member:
//!
//! ```text
//! input 3×31×31
//!   conv1 64@4×4 s1 p2 → 64×32×32 → relu
//!   conv2 64@4×4 s1 p2 → 64×33×33 → relu → pool 2/2 → 64×16×16
//!   conv3 64@4×4 s1 p2 → 64×17×17 → relu → pool 2/2 → 64×8×8
//!   flatten 4096 → affine1 (4096→n) → relu → dropout → affine2 (n→2) → softmax
//! ```
//!
//! The geometry is carried by [`Architecture`] so verification tooling can
//! run the same recipe on smaller inputs.

use crate::ensemble::ModelHyperparams;
use crate::error::{shape_err, Error, Result};
use crate::layers::{
    affine_backward, affine_forward, conv_backward, conv_backward_params, conv_forward,
    conv_output_size, dropout_backward, dropout_forward, maxpool_backward, maxpool_forward,
    relu_backward, relu_forward, softmax, softmax_xent, AffineCache, ConvCache, DropoutCache,
    LayerParams, Mode, PoolCache, ReluCache,
};
use crate::tensor::{rng_gaussian, Rng, Scalar, Tensor};

pub const HIDDEN_CHOICES: [usize; 3] = [128, 256, 512];
pub const PATCH_SIZE: usize = 31;
pub const CLASSES: usize = 2;

/// Layer geometry. Only the sizes vary; the layer sequence is fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_channels: usize,
    pub input_size: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool: usize,
    pub hidden_units: usize,
}

/// Name and output dims (unbatched) of one stage of the forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    pub name: &'static str,
    pub dims: Vec<usize>,
}

impl Architecture {
    pub fn standard(hidden_units: usize) -> Self {
        Architecture {
            input_channels: 3,
            input_size: PATCH_SIZE,
            filters: 64,
            kernel: 4,
            stride: 1,
            pad: 2,
            pool: 2,
            hidden_units,
        }
    }

    fn conv_out(&self, size: usize) -> Result<usize> {
        conv_output_size(size, self.kernel, self.stride, self.pad).ok_or_else(|| {
            Error::Shape(format!(
                "kernel {} does not fit spatial size {size}",
                self.kernel
            ))
        })
    }

    fn pool_out(&self, size: usize) -> Result<usize> {
        if size < self.pool {
            return shape_err(format!(
                "pool field {} larger than spatial size {size}",
                self.pool
            ));
        }
        Ok((size - self.pool) / self.pool + 1)
    }

    /// Output dims of every stage, in forward order.
    pub fn stages(&self) -> Result<Vec<Stage>> {
        if self.hidden_units == 0 || self.filters == 0 || self.input_channels == 0 || self.pool == 0
        {
            return Err(Error::Parameter(format!(
                "degenerate architecture {self:?}"
            )));
        }
        let f = self.filters;
        let s1 = self.conv_out(self.input_size)?;
        let s2 = self.conv_out(s1)?;
        let p2 = self.pool_out(s2)?;
        let s3 = self.conv_out(p2)?;
        let p3 = self.pool_out(s3)?;
        let n = self.hidden_units;
        Ok(vec![
            Stage {
                name: "input",
                dims: vec![self.input_channels, self.input_size, self.input_size],
            },
            Stage {
                name: "conv1",
                dims: vec![f, s1, s1],
            },
            Stage {
                name: "conv2",
                dims: vec![f, s2, s2],
            },
            Stage {
                name: "pool2",
                dims: vec![f, p2, p2],
            },
            Stage {
                name: "conv3",
                dims: vec![f, s3, s3],
            },
            Stage {
                name: "pool3",
                dims: vec![f, p3, p3],
            },
            Stage {
                name: "flatten",
                dims: vec![f * p3 * p3],
            },
            Stage {
                name: "affine1",
                dims: vec![n],
            },
            Stage {
                name: "affine2",
                dims: vec![CLASSES],
            },
            Stage {
                name: "softmax",
                dims: vec![CLASSES],
            },
        ])
    }

    pub fn flatten_width(&self) -> Result<usize> {
        Ok(self.stages()?[6].dims[0])
    }

    /// Dims of the five weight tensors (conv1..3, affine1, affine2).
    pub fn weight_dims(&self) -> Result<[Vec<usize>; 5]> {
        let (f, k, c) = (self.filters, self.kernel, self.input_channels);
        Ok([
            vec![f, c, k, k],
            vec![f, f, k, k],
            vec![f, f, k, k],
            vec![self.flatten_width()?, self.hidden_units],
            vec![self.hidden_units, CLASSES],
        ])
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self
            .weight_dims()?
            .iter()
            .map(|d| d.iter().product::<usize>() + d[if d.len() == 4 { 0 } else { 1 }])
            .sum())
    }
}

pub const LAYER_NAMES: [&str; 5] = ["conv1", "conv2", "conv3", "affine1", "affine2"];

/// One convolutional network of the ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct VesselNet<T = f32> {
    arch: Architecture,
    hyper: ModelHyperparams,
    layers: [LayerParams<T>; 5],
}

/// Per-layer caches of one training-mode forward pass.
#[derive(Debug)]
pub struct ForwardCaches<T> {
    conv: [ConvCache<T>; 3],
    relu: [ReluCache<T>; 4],
    pool: [PoolCache; 2],
    affine: [AffineCache<T>; 2],
    dropout: DropoutCache<T>,
}

impl<T: Scalar> VesselNet<T> {
    /// Builds the standard architecture; `hyper.hidden_units` must be one of
    /// [`HIDDEN_CHOICES`].
    pub fn build(hyper: &ModelHyperparams, rng: &mut Rng) -> Result<Self> {
        if !HIDDEN_CHOICES.contains(&hyper.hidden_units) {
            return Err(Error::Parameter(format!(
                "hidden units {} not one of {HIDDEN_CHOICES:?}",
                hyper.hidden_units
            )));
        }
        Self::build_with(Architecture::standard(hyper.hidden_units), hyper, rng)
    }

    /// He-initialised weights (std `sqrt(2/fan_in)`), zero biases.
    pub fn build_with(arch: Architecture, hyper: &ModelHyperparams, rng: &mut Rng) -> Result<Self> {
        if arch.hidden_units != hyper.hidden_units {
            return Err(Error::Parameter(format!(
                "architecture has {} hidden units, hyperparameters {}",
                arch.hidden_units, hyper.hidden_units
            )));
        }
        let dims = arch.weight_dims()?;
        let layers = dims.map(|d| {
            let (fan_in, outputs) = if d.len() == 4 {
                (d[1] * d[2] * d[3], d[0])
            } else {
                (d[0], d[1])
            };
            let w = rng_gaussian(rng, &d, 0.0, (2.0 / fan_in as f64).sqrt());
            LayerParams::new(w, Tensor::zeros(&[outputs]))
        });
        Ok(VesselNet {
            arch,
            hyper: hyper.clone(),
            layers,
        })
    }

    /// Assembles a network from existing parameters (e.g. a loaded model).
    pub fn from_layers(
        arch: Architecture,
        hyper: ModelHyperparams,
        layers: [LayerParams<T>; 5],
    ) -> Result<Self> {
        let dims = arch.weight_dims()?;
        for ((p, d), name) in layers.iter().zip(&dims).zip(LAYER_NAMES) {
            let bias = if d.len() == 4 { d[0] } else { d[1] };
            if p.weights.dims() != d.as_slice() || p.bias.dims() != [bias] {
                return shape_err(format!(
                    "{name} parameters {:?} do not match architecture",
                    p.weights.dims()
                ));
            }
        }
        Ok(VesselNet {
            arch,
            hyper,
            layers,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn hyper(&self) -> &ModelHyperparams {
        &self.hyper
    }

    pub fn layers(&self) -> &[LayerParams<T>; 5] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams<T>; 5] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(LayerParams::param_count).sum()
    }

    pub fn zero_grads(&mut self) {
        self.layers.iter_mut().for_each(LayerParams::zero_grads);
    }

    pub fn cast<U: Scalar>(&self) -> VesselNet<U> {
        VesselNet {
            arch: self.arch,
            hyper: self.hyper.clone(),
            layers: self.layers.each_ref().map(|l| l.cast()),
        }
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let a = &self.arch;
        match batch.dims() {
            [_, c, h, w] if *c == a.input_channels && *h == a.input_size && *w == a.input_size => {
                Ok(())
            }
            d => shape_err(format!(
                "network input must be [B,{},{},{}], got {d:?}",
                a.input_channels, a.input_size, a.input_size
            )),
        }
    }

    /// Full forward pass to logits, keeping every cache needed by backward.
    pub fn forward_logits(
        &self,
        batch: &Tensor<T>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Tensor<T>, ForwardCaches<T>)> {
        self.check_input(batch)?;
        let (s, p, pool) = (self.arch.stride, self.arch.pad, self.arch.pool);
        let [c1, c2, c3, a1, a2] = &self.layers;
        let (h, cc1) = conv_forward(batch, c1, s, p)?;
        let (h, r1) = relu_forward(h);
        let (h, cc2) = conv_forward(&h, c2, s, p)?;
        let (h, r2) = relu_forward(h);
        let (h, p2) = maxpool_forward(&h, pool, pool)?;
        let (h, cc3) = conv_forward(&h, c3, s, p)?;
        let (h, r3) = relu_forward(h);
        let (h, p3) = maxpool_forward(&h, pool, pool)?;
        let (h, ac1) = affine_forward(&h, a1)?;
        let (h, r4) = relu_forward(h);
        let (h, dc) = dropout_forward(h, self.hyper.retention_prob, mode, rng)?;
        let (logits, ac2) = affine_forward(&h, a2)?;
        let caches = ForwardCaches {
            conv: [cc1, cc2, cc3],
            relu: [r1, r2, r3, r4],
            pool: [p2, p3],
            affine: [ac1, ac2],
            dropout: dc,
        };
        Ok((logits, caches))
    }

    /// Class probabilities `[B, 2]`.
    pub fn forward(&self, batch: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        softmax(&self.forward_logits(batch, mode, rng)?.0)
    }

    /// Deterministic evaluation-mode probabilities.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(batch, Mode::Eval, &mut Rng::new(0))
    }

    /// Backpropagates `dlogits` through the cached pass, accumulating into
    /// the gradient buffers.
    fn backward(&mut self, dlogits: &Tensor<T>, caches: &ForwardCaches<T>) -> Result<()> {
        let [c1, c2, c3, a1, a2] = &mut self.layers;
        let d = affine_backward(dlogits, &caches.affine[1], a2)?;
        let d = dropout_backward(d, &caches.dropout)?;
        let d = relu_backward(d, &caches.relu[3])?;
        let d = affine_backward(&d, &caches.affine[0], a1)?;
        let d = maxpool_backward(&d, &caches.pool[1])?;
        let d = relu_backward(d, &caches.relu[2])?;
        let d = conv_backward(&d, &caches.conv[2], c3)?;
        let d = maxpool_backward(&d, &caches.pool[0])?;
        let d = relu_backward(d, &caches.relu[1])?;
        let d = conv_backward(&d, &caches.conv[1], c2)?;
        let d = relu_backward(d, &caches.relu[0])?;
        conv_backward_params(&d, &caches.conv[0], c1)?;
        Ok(())
    }

    fn l2_penalty(&self, l2: f64) -> T {
        let sq: T = self.layers.iter().map(|l| l.weights.sum_squares()).sum();
        T::of(l2 / 2.0) * sq
    }

    /// Regularised objective without touching gradients.
    pub fn loss(
        &self,
        batch: &Tensor<T>,
        labels: &[usize],
        l2: f64,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<T> {
        let (logits, _) = self.forward_logits(batch, mode, rng)?;
        let (xent, _) = softmax_xent(&logits, labels)?;
        Ok(xent + self.l2_penalty(l2))
    }

    /// Mean cross-entropy plus `(l2/2)·Σ‖W‖²` (weights only); fills every
    /// gradient buffer with its derivative. Dropout is active.
    pub fn loss_and_grads(
        &mut self,
        batch: &Tensor<T>,
        labels: &[usize],
        l2: f64,
        rng: &mut Rng,
    ) -> Result<T> {
        Ok(self
            .loss_and_grads_mode(batch, labels, l2, Mode::Train, rng)?
            .0)
    }

    /// As [`Self::loss_and_grads`], selecting dropout behaviour and also
    /// returning the class probabilities of the pass.
    pub fn loss_and_grads_mode(
        &mut self,
        batch: &Tensor<T>,
        labels: &[usize],
        l2: f64,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(T, Tensor<T>)> {
        if labels.len() != batch.dims().first().copied().unwrap_or(0) {
            return shape_err(format!(
                "{} labels for input {:?}",
                labels.len(),
                batch.dims()
            ));
        }
        self.zero_grads();
        let (logits, caches) = self.forward_logits(batch, mode, rng)?;
        let (xent, dlogits) = softmax_xent(&logits, labels)?;
        self.backward(&dlogits, &caches)?;
        let decay = T::of(l2);
        for layer in &mut self.layers {
            let LayerParams {
                weights,
                grad_weights,
                ..
            } = layer;
            for (g, &w) in grad_weights.data_mut().iter_mut().zip(weights.data()) {
                *g += decay * w;
            }
        }
        Ok((xent + self.l2_penalty(l2), softmax(&logits)?))
    }
}
