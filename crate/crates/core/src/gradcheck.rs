//! Central finite-difference checks of every backward pass, in f64.
//!
//! Each check draws random shapes and values, computes a scalar objective
//! (`Σ output ⊙ R` for a fixed random `R`, or the loss itself), and
//! compares the analytic gradient of every input and parameter against
//! `(f(x+h) − f(x−h)) / 2h`. The error of one coordinate is
//! `|a − n| / max(|a|, |n|, 1e-8)`.
//!
//! ReLU inputs are kept at least 0.1 away from the kink and pooling
//! windows have well separated values, so no step crosses a
//! non-differentiable point.

use crate::ensemble::ModelHyperparams;
use crate::error::Result;
use crate::layers::{
    affine_backward, affine_forward, conv_backward, conv_forward, conv_output_size,
    dropout_backward, dropout_forward, maxpool_backward, maxpool_forward, relu_backward,
    relu_forward, softmax_xent, LayerParams, Mode,
};
use crate::network::{Architecture, VesselNet, LAYER_NAMES};
use crate::tensor::{rng_gaussian, Rng, Tensor};

pub const TOLERANCE: f64 = 1e-4;
pub const CONFIGS_PER_CHECK: usize = 50;
/// Upper bound on network coordinates compared per configuration.
const NETWORK_COORDS: usize = 256;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Check {
    Conv,
    MaxPool,
    Affine,
    Relu,
    Dropout,
    SoftmaxXent,
    Network,
}

impl Check {
    pub const ALL: [Check; 7] = [
        Check::Conv,
        Check::MaxPool,
        Check::Affine,
        Check::Relu,
        Check::Dropout,
        Check::SoftmaxXent,
        Check::Network,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Conv => "conv",
            Check::MaxPool => "maxpool",
            Check::Affine => "affine",
            Check::Relu => "relu",
            Check::Dropout => "dropout",
            Check::SoftmaxXent => "softmax_xent",
            Check::Network => "network",
        }
    }

    pub fn from_name(name: &str) -> Option<Check> {
        Check::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Options {
    pub seed: u64,
    pub configs: usize,
    /// Scales the analytic gradients of this check by 1.01 to emulate a
    /// faulty backward pass.
    pub perturb: Option<Check>,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            seed: 0x009C_4EC4,
            configs: CONFIGS_PER_CHECK,
            perturb: None,
        }
    }
}

/// The coordinate with the largest error seen by a check.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Worst {
    pub config: usize,
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub check: Check,
    pub configs: usize,
    pub compared: usize,
    pub worst: Worst,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst.error < TOLERANCE
    }
}

struct Recorder {
    config: usize,
    compared: usize,
    worst: Worst,
    scale: f64,
}

impl Recorder {
    fn compare(&mut self, tensor: &str, index: usize, analytic: f64, numeric: f64) {
        let analytic = analytic * self.scale;
        let error = rel_error(analytic, numeric);
        self.compared += 1;
        if error > self.worst.error || self.compared == 1 {
            self.worst = Worst {
                config: self.config,
                tensor: tensor.to_string(),
                index,
                analytic,
                numeric,
                error,
            };
        }
    }

    /// Compares `analytic` against central differences of `f` over `x`.
    fn tensor(
        &mut self,
        name: &str,
        x: &Tensor<f64>,
        analytic: &Tensor<f64>,
        h: f64,
        mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    ) -> Result<()> {
        let mut probe = x.clone();
        for i in 0..x.len() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe)?;
            probe.data_mut()[i] = orig - h;
            let down = f(&probe)?;
            probe.data_mut()[i] = orig;
            self.compare(name, i, analytic.data()[i], (up - down) / (2.0 * h));
        }
        Ok(())
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn dims_between(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below((hi - lo + 1) as u64) as usize
}

/// Random input of `[C,H,W]` or `[B,C,H,W]` shape.
fn volume(rng: &mut Rng, c: usize, h: usize, w: usize) -> Vec<usize> {
    if rng.below(2) == 0 {
        vec![c, h, w]
    } else {
        vec![dims_between(rng, 1, 2), c, h, w]
    }
}

fn params(rng: &mut Rng, wdims: &[usize], outputs: usize) -> LayerParams<f64> {
    LayerParams::new(
        rng_gaussian(rng, wdims, 0.0, 0.5),
        rng_gaussian(rng, &[outputs], 0.0, 0.5),
    )
}

fn check_conv(rng: &mut Rng, rec: &mut Recorder) -> Result<()> {
    let (c, h, w, f) = (
        dims_between(rng, 1, 3),
        dims_between(rng, 2, 7),
        dims_between(rng, 2, 7),
        dims_between(rng, 1, 3),
    );
    let (stride, pad) = (dims_between(rng, 1, 2), dims_between(rng, 0, 2));
    let kh = dims_between(rng, 1, (h + 2 * pad).min(4));
    let kw = dims_between(rng, 1, (w + 2 * pad).min(4));
    debug_assert!(conv_output_size(h, kh, stride, pad).is_some());
    let dims = volume(rng, c, h, w);
    let x = rng_gaussian(rng, &dims, 0.0, 1.0);
    let mut p = params(rng, &[f, c, kh, kw], f);
    let (y, cache) = conv_forward(&x, &p, stride, pad)?;
    let r = rng_gaussian(rng, y.dims(), 0.0, 1.0);
    let dx = conv_backward(&r, &cache, &mut p)?;
    let h_step = 1e-3;
    rec.tensor("input", &x, &dx, h_step, |x| {
        Ok(dot(&conv_forward(x, &p, stride, pad)?.0, &r))
    })?;
    let base = p.clone();
    rec.tensor("weights", &base.weights, &p.grad_weights, h_step, |wt| {
        let q = LayerParams::new(wt.clone(), base.bias.clone());
        Ok(dot(&conv_forward(&x, &q, stride, pad)?.0, &r))
    })?;
    rec.tensor("bias", &base.bias, &p.grad_bias, h_step, |b| {
        let q = LayerParams::new(base.weights.clone(), b.clone());
        Ok(dot(&conv_forward(&x, &q, stride, pad)?.0, &r))
    })
}

fn check_maxpool(rng: &mut Rng, rec: &mut Recorder) -> Result<()> {
    let (c, h, w) = (
        dims_between(rng, 1, 3),
        dims_between(rng, 2, 7),
        dims_between(rng, 2, 7),
    );
    let field = dims_between(rng, 1, h.min(w).min(3));
    let stride = dims_between(rng, 1, 3);
    let dims = volume(rng, c, h, w);
    let n: usize = dims.iter().product();
    // distinct values 0.05 apart
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let x = Tensor::new(
        &dims,
        order
            .iter()
            .map(|&i| i as f64 * 0.05 - n as f64 * 0.025)
            .collect(),
    )?;
    let (y, cache) = maxpool_forward(&x, field, stride)?;
    let r = rng_gaussian(rng, y.dims(), 0.0, 1.0);
    let dx = maxpool_backward(&r, &cache)?;
    rec.tensor("input", &x, &dx, 1e-3, |x| {
        Ok(dot(&maxpool_forward(x, field, stride)?.0, &r))
    })
}

fn check_affine(rng: &mut Rng, rec: &mut Recorder) -> Result<()> {
    let dims = match rng.below(4) {
        0 => vec![dims_between(rng, 1, 8)],
        1 => vec![dims_between(rng, 1, 3), dims_between(rng, 1, 8)],
        2 => vec![
            dims_between(rng, 1, 2),
            dims_between(rng, 1, 3),
            dims_between(rng, 1, 3),
        ],
        _ => vec![
            dims_between(rng, 1, 3),
            dims_between(rng, 1, 2),
            dims_between(rng, 1, 3),
            dims_between(rng, 1, 3),
        ],
    };
    let width: usize = if matches!(dims.len(), 2 | 4) {
        dims[1..].iter().product()
    } else {
        dims.iter().product()
    };
    let out = dims_between(rng, 1, 5);
    let x = rng_gaussian(rng, &dims, 0.0, 1.0);
    let mut p = params(rng, &[width, out], out);
    let (y, cache) = affine_forward(&x, &p)?;
    let r = rng_gaussian(rng, y.dims(), 0.0, 1.0);
    let dx = affine_backward(&r, &cache, &mut p)?;
    rec.tensor("input", &x, &dx, 1e-3, |x| {
        Ok(dot(&affine_forward(x, &p)?.0, &r))
    })?;
    let base = p.clone();
    rec.tensor("weights", &base.weights, &p.grad_weights, 1e-3, |wt| {
        Ok(dot(
            &affine_forward(&x, &LayerParams::new(wt.clone(), base.bias.clone()))?.0,
            &r,
        ))
    })?;
    rec.tensor("bias", &base.bias, &p.grad_bias, 1e-3, |b| {
        Ok(dot(
            &affine_forward(&x, &LayerParams::new(base.weights.clone(), b.clone()))?.0,
            &r,
        ))
    })
}

fn random_dims(rng: &mut Rng) -> Vec<usize> {
    (0..dims_between(rng, 1, 4))
        .map(|_| dims_between(rng, 1, 4))
        .collect()
}

fn check_relu(rng: &mut Rng, rec: &mut Recorder) -> Result<()> {
    let dims = random_dims(rng);
    let x = Tensor::from_fn(&dims, |_| {
        let magnitude = 0.1 + rng.next_f64();
        if rng.below(2) == 0 {
            magnitude
        } else {
            -magnitude
        }
    });
    let (y, cache) = relu_forward(x.clone());
    let r = rng_gaussian(rng, y.dims(), 0.0, 1.0);
    let dx = relu_backward(r.clone(), &cache)?;
    rec.tensor("input", &x, &dx, 1e-3, |x| {
        Ok(dot(&relu_forward(x.clone()).0, &r))
    })
}

fn check_dropout(rng: &mut Rng, rec: &mut Recorder) -> Result<()> {
    let dims = random_dims(rng);
    let retain = rng.uniform(0.3, 1.0);
    let mask_seed = rng.next_u64();
    let x = rng_gaussian(rng, &dims, 0.0, 1.0);
    let (y, cache) = dropout_forward(x.clone(), retain, Mode::Train, &mut Rng::new(mask_seed))?;
    let r = rng_gaussian(rng, y.dims(), 0.0, 1.0);
    let dx = dropout_backward(r.clone(), &cache)?;
    rec.tensor("input", &x, &dx, 1e-3, |x| {
        Ok(dot(
            &dropout_forward(x.clone(), retain, Mode::Train, &mut Rng::new(mask_seed))?.0,
            &r,
        ))
    })
}

fn check_softmax_xent(rng: &mut Rng, rec: &mut Recorder) -> Result<()> {
    let batch = dims_between(rng, 1, 6);
    let logits = rng_gaussian(rng, &[batch, 2], 0.0, 2.0);
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(2) as usize).collect();
    let (_, dlogits) = softmax_xent(&logits, &labels)?;
    rec.tensor("logits", &logits, &dlogits, 1e-5, |z| {
        Ok(softmax_xent(z, &labels)?.0)
    })
}

/// Random small geometry with the full layer recipe.
fn tiny_architecture(rng: &mut Rng) -> Architecture {
    loop {
        let arch = Architecture {
            input_channels: dims_between(rng, 1, 3),
            input_size: dims_between(rng, 6, 9),
            filters: dims_between(rng, 2, 3),
            kernel: dims_between(rng, 2, 4),
            stride: 1,
            pad: dims_between(rng, 1, 2),
            pool: 2,
            hidden_units: dims_between(rng, 3, 6),
        };
        if arch.stages().is_ok() {
            return arch;
        }
    }
}

fn check_network(rng: &mut Rng, rec: &mut Recorder) -> Result<()> {
    let arch = tiny_architecture(rng);
    let hyper = ModelHyperparams {
        retention_prob: 1.0,
        l2: rng.uniform(0.0, 3e-3),
        hidden_units: arch.hidden_units,
        seed: 0,
    };
    let mut net = VesselNet::<f64>::build_with(arch, &hyper, rng)?;
    for layer in net.layers_mut() {
        layer.bias = rng_gaussian(rng, layer.bias.dims(), 0.0, 0.1);
    }
    let batch = dims_between(rng, 1, 3);
    let x = rng_gaussian(
        rng,
        &[batch, arch.input_channels, arch.input_size, arch.input_size],
        0.0,
        1.0,
    );
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(2) as usize).collect();
    let mut noop = Rng::new(0);
    // A saturated softmax leaves every gradient below what a central
    // difference can resolve, so shrink the logits to a spread of at most 3.
    let (_, probs) = net.loss_and_grads_mode(&x, &labels, hyper.l2, Mode::Train, &mut noop)?;
    let spread = probs
        .data()
        .chunks(2)
        .map(|p| (p[1].max(1e-300) / p[0].max(1e-300)).ln().abs())
        .fold(0.0, f64::max);
    if spread > 3.0 {
        let last = net.layers_mut().last_mut().expect("network has layers");
        let shrink = 3.0 / spread;
        last.weights
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= shrink);
        last.bias.data_mut().iter_mut().for_each(|v| *v *= shrink);
    }
    net.loss_and_grads(&x, &labels, hyper.l2, &mut noop)?;
    let grads: Vec<(Tensor<f64>, Tensor<f64>)> = net
        .layers()
        .iter()
        .map(|l| (l.grad_weights.clone(), l.grad_bias.clone()))
        .collect();
    let mut coords: Vec<(usize, bool, usize)> = net
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(l, p)| {
            (0..p.weights.len())
                .map(move |i| (l, true, i))
                .chain((0..p.bias.len()).map(move |i| (l, false, i)))
        })
        .collect();
    rng.shuffle(&mut coords);
    coords.truncate(NETWORK_COORDS);
    let h = 1e-5;
    let mut probe = net.clone();
    for (l, is_weight, i) in coords {
        let orig = *coordinate(&mut probe, l, is_weight, i);
        *coordinate(&mut probe, l, is_weight, i) = orig + h;
        let up = probe.loss(&x, &labels, hyper.l2, Mode::Train, &mut noop)?;
        *coordinate(&mut probe, l, is_weight, i) = orig - h;
        let down = probe.loss(&x, &labels, hyper.l2, Mode::Train, &mut noop)?;
        *coordinate(&mut probe, l, is_weight, i) = orig;
        let analytic = if is_weight {
            grads[l].0.data()[i]
        } else {
            grads[l].1.data()[i]
        };
        let name = format!(
            "{}.{}",
            LAYER_NAMES[l],
            if is_weight { "weights" } else { "bias" }
        );
        rec.compare(&name, i, analytic, (up - down) / (2.0 * h));
    }
    Ok(())
}

fn coordinate(net: &mut VesselNet<f64>, layer: usize, is_weight: bool, i: usize) -> &mut f64 {
    let p = &mut net.layers_mut()[layer];
    let t = if is_weight {
        &mut p.weights
    } else {
        &mut p.bias
    };
    &mut t.data_mut()[i]
}

pub fn run_check(check: Check, options: &Options) -> Result<CheckResult> {
    let mut rng = Rng::new(options.seed ^ (check as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let scale = if options.perturb == Some(check) {
        1.01
    } else {
        1.0
    };
    let mut rec = Recorder {
        config: 0,
        compared: 0,
        worst: Worst::default(),
        scale,
    };
    for config in 0..options.configs {
        rec.config = config;
        let mut local = rng.split();
        match check {
            Check::Conv => check_conv(&mut local, &mut rec)?,
            Check::MaxPool => check_maxpool(&mut local, &mut rec)?,
            Check::Affine => check_affine(&mut local, &mut rec)?,
            Check::Relu => check_relu(&mut local, &mut rec)?,
            Check::Dropout => check_dropout(&mut local, &mut rec)?,
            Check::SoftmaxXent => check_softmax_xent(&mut local, &mut rec)?,
            Check::Network => check_network(&mut local, &mut rec)?,
        }
    }
    Ok(CheckResult {
        check,
        configs: options.configs,
        compared: rec.compared,
        worst: rec.worst,
    })
}

pub fn run_all(options: &Options) -> Result<Vec<CheckResult>> {
    Check::ALL.iter().map(|&c| run_check(c, options)).collect()
}
