//! Forward and backward passes for each layer kind.
//!
//! Convolution is cross-correlation (kernels are not flipped):
//! `out[f,y,x] = Σ_{c,i,j} in_padded[c, y·s+i, x·s+j] · W[f,c,i,j] + b[f]`.
//! It runs as patch-matrix expansion followed by a matrix product, one
//! sample at a time so the expansion buffer stays small.
//!
//! Rank-3 inputs are single `[C,H,W]` volumes; rank-4 inputs are batches.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Op, Rng, Scalar, Tensor};

/// Weights and bias of one conv or affine layer, with their gradient buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Self {
        let grad_weights = Tensor::zeros(weights.dims());
        let grad_bias = Tensor::zeros(bias.dims());
        LayerParams {
            weights,
            bias,
            grad_weights,
            grad_bias,
        }
    }

    pub fn zero_grads(&mut self) {
        self.grad_weights.fill(T::zero());
        self.grad_bias.fill(T::zero());
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
            grad_weights: self.grad_weights.cast(),
            grad_bias: self.grad_bias.cast(),
        }
    }
}

/// Forward or inference behaviour of stochastic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Spatial output extent of a convolution, or `None` if the kernel does
/// not fit the padded input.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Splits a rank-3 or rank-4 tensor into (batch, C, H, W, batched?).
fn volume_dims(t: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize, usize, usize, bool)> {
    match *t.dims() {
        [c, h, w] => Ok((1, c, h, w, false)),
        [b, c, h, w] => Ok((b, c, h, w, true)),
        _ => shape_err(format!(
            "{what} expects [C,H,W] or [B,C,H,W], got {:?}",
            t.dims()
        )),
    }
}

fn with_batch(batched: bool, b: usize, rest: &[usize]) -> Vec<usize> {
    let mut dims = Vec::with_capacity(rest.len() + 1);
    if batched {
        dims.push(b);
    }
    dims.extend_from_slice(rest);
    dims
}

#[derive(Clone, Copy, Debug)]
struct ConvShape {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvShape {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Expands one `[C,H,W]` volume into the `[C·kh·kw, out_h·out_w]` patch matrix.
fn im2col<T: Scalar>(input: &[T], s: &ConvShape, cols: &mut [T]) {
    let ncols = s.cols();
    for c in 0..s.channels {
        let plane = &input[c * s.height * s.width..(c + 1) * s.height * s.width];
        for i in 0..s.kh {
            for j in 0..s.kw {
                let r = (c * s.kh + i) * s.kw + j;
                let dst = &mut cols[r * ncols..(r + 1) * ncols];
                for y in 0..s.out_h {
                    let out_row = &mut dst[y * s.out_w..(y + 1) * s.out_w];
                    let iy = (y * s.stride + i) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.height as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * s.width..(iy as usize + 1) * s.width];
                    if s.stride == 1 {
                        // x + j - pad in [0, width)
                        let lo = s.pad.saturating_sub(j).min(s.out_w);
                        let hi = (s.width + s.pad).saturating_sub(j).min(s.out_w).max(lo);
                        out_row[..lo].iter_mut().for_each(|v| *v = T::zero());
                        out_row[hi..].iter_mut().for_each(|v| *v = T::zero());
                        let start = lo + j - s.pad;
                        out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (x, v) in out_row.iter_mut().enumerate() {
                            let ix = (x * s.stride + j) as isize - s.pad as isize;
                            *v = if ix >= 0 && ix < s.width as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the volume.
fn col2im<T: Scalar>(cols: &[T], s: &ConvShape, out: &mut [T]) {
    out.iter_mut().for_each(|v| *v = T::zero());
    let ncols = s.cols();
    for c in 0..s.channels {
        let plane = &mut out[c * s.height * s.width..(c + 1) * s.height * s.width];
        for i in 0..s.kh {
            for j in 0..s.kw {
                let r = (c * s.kh + i) * s.kw + j;
                let src = &cols[r * ncols..(r + 1) * ncols];
                for y in 0..s.out_h {
                    let iy = (y * s.stride + i) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.width..(iy as usize + 1) * s.width];
                    let row = &src[y * s.out_w..(y + 1) * s.out_w];
                    if s.stride == 1 {
                        let lo = s.pad.saturating_sub(j).min(s.out_w);
                        let hi = (s.width + s.pad).saturating_sub(j).min(s.out_w).max(lo);
                        let start = lo + j - s.pad;
                        dst[start..start + (hi - lo)]
                            .iter_mut()
                            .zip(&row[lo..hi])
                            .for_each(|(d, &g)| *d += g);
                        continue;
                    }
                    for (x, &g) in row.iter().enumerate() {
                        let ix = (x * s.stride + j) as isize - s.pad as isize;
                        if ix >= 0 && ix < s.width as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Everything conv backward needs from the forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T = f32> {
    input: Tensor<T>,
    shape: ConvShapeInfo,
}

#[derive(Clone, Copy, Debug)]
struct ConvShapeInfo {
    shape: ConvShape,
    filters: usize,
    batch: usize,
    batched: bool,
}

fn conv_shape<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvShapeInfo> {
    let (batch, channels, height, width, batched) = volume_dims(input, "conv")?;
    let [filters, wc, kh, kw] = *weights.dims() else {
        return shape_err(format!(
            "conv weights must be [F,C,kh,kw], got {:?}",
            weights.dims()
        ));
    };
    if wc != channels {
        return shape_err(format!(
            "conv weights {:?} do not match input {:?}",
            weights.dims(),
            input.dims()
        ));
    }
    if stride == 0 {
        return Err(Error::Parameter("conv stride must be >= 1".into()));
    }
    let (Some(out_h), Some(out_w)) = (
        conv_output_size(height, kh, stride, pad),
        conv_output_size(width, kw, stride, pad),
    ) else {
        return shape_err(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            height + 2 * pad,
            width + 2 * pad
        ));
    };
    let shape = ConvShape {
        channels,
        height,
        width,
        kh,
        kw,
        stride,
        pad,
        out_h,
        out_w,
    };
    Ok(ConvShapeInfo {
        shape,
        filters,
        batch,
        batched,
    })
}

pub fn conv_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let info = conv_shape(input, &params.weights, stride, pad)?;
    if params.bias.dims() != [info.filters] {
        return shape_err(format!(
            "conv bias must be [{}], got {:?}",
            info.filters,
            params.bias.dims()
        ));
    }
    let s = info.shape;
    let (k, p, f) = (s.rows(), s.cols(), info.filters);
    let in_len = s.channels * s.height * s.width;
    let mut out = Tensor::zeros(&with_batch(
        info.batched,
        info.batch,
        &[f, s.out_h, s.out_w],
    ));
    let mut cols = vec![T::zero(); k * p];
    let bias = params.bias.data();
    for (x, y) in input
        .data()
        .chunks_exact(in_len)
        .zip(out.data_mut().chunks_exact_mut(f * p))
    {
        im2col(x, &s, &mut cols);
        gemm(
            f,
            k,
            p,
            params.weights.data(),
            Op::N,
            &cols,
            Op::N,
            y,
            false,
        );
        for (row, &b) in y.chunks_exact_mut(p).zip(bias) {
            row.iter_mut().for_each(|v| *v += b);
        }
    }
    Ok((
        out,
        ConvCache {
            input: input.clone(),
            shape: info,
        },
    ))
}

/// Returns the input gradient and accumulates weight and bias gradients.
pub fn conv_backward<T: Scalar>(
    dout: &Tensor<T>,
    cache: &ConvCache<T>,
    params: &mut LayerParams<T>,
) -> Result<Tensor<T>> {
    conv_backward_impl(dout, cache, params, true).map(|d| d.expect("input gradient requested"))
}

/// Accumulates weight and bias gradients only, for a layer whose input
/// needs no gradient.
pub fn conv_backward_params<T: Scalar>(
    dout: &Tensor<T>,
    cache: &ConvCache<T>,
    params: &mut LayerParams<T>,
) -> Result<()> {
    conv_backward_impl(dout, cache, params, false).map(drop)
}

fn conv_backward_impl<T: Scalar>(
    dout: &Tensor<T>,
    cache: &ConvCache<T>,
    params: &mut LayerParams<T>,
    want_input: bool,
) -> Result<Option<Tensor<T>>> {
    let info = cache.shape;
    let s = info.shape;
    let (k, p, f) = (s.rows(), s.cols(), info.filters);
    let expected = with_batch(info.batched, info.batch, &[f, s.out_h, s.out_w]);
    if dout.dims() != expected.as_slice() {
        return shape_err(format!(
            "conv backward expected dout {:?}, got {:?}",
            expected,
            dout.dims()
        ));
    }
    if params.weights.dims() != [f, s.channels, s.kh, s.kw] {
        return shape_err("conv backward called with mismatched parameters");
    }
    let in_len = s.channels * s.height * s.width;
    let mut dinput = want_input.then(|| Tensor::zeros(cache.input.dims()));
    let mut cols = vec![T::zero(); k * p];
    let mut dcols = if want_input {
        vec![T::zero(); k * p]
    } else {
        Vec::new()
    };
    let LayerParams {
        weights,
        grad_weights,
        grad_bias,
        ..
    } = params;
    let inputs = cache.input.data().chunks_exact(in_len);
    for (n, (x, g)) in inputs.zip(dout.data().chunks_exact(f * p)).enumerate() {
        im2col(x, &s, &mut cols);
        gemm(
            f,
            p,
            k,
            g,
            Op::N,
            &cols,
            Op::T,
            grad_weights.data_mut(),
            true,
        );
        for (gb, row) in grad_bias.data_mut().iter_mut().zip(g.chunks_exact(p)) {
            *gb += row.iter().copied().sum::<T>();
        }
        if let Some(dinput) = &mut dinput {
            gemm(k, f, p, weights.data(), Op::T, g, Op::N, &mut dcols, false);
            col2im(
                &dcols,
                &s,
                &mut dinput.data_mut()[n * in_len..(n + 1) * in_len],
            );
        }
    }
    Ok(dinput)
}

/// 0/1 gate per element, stored as the element type so backward is a
/// plain multiply.
#[derive(Clone, Debug)]
pub struct ReluCache<T = f32> {
    gate: Vec<T>,
}

/// Rectifies in place: `max(x, 0)`.
pub fn relu_forward<T: Scalar>(mut input: Tensor<T>) -> (Tensor<T>, ReluCache<T>) {
    let zero = T::zero();
    let gate = input
        .data()
        .iter()
        .map(|&v| if v > zero { T::one() } else { zero })
        .collect();
    input.data_mut().iter_mut().for_each(|v| *v = v.max(zero));
    (input, ReluCache { gate })
}

pub fn relu_backward<T: Scalar>(mut dout: Tensor<T>, cache: &ReluCache<T>) -> Result<Tensor<T>> {
    if dout.len() != cache.gate.len() {
        return shape_err(format!(
            "relu backward: dout has {} values, cache {}",
            dout.len(),
            cache.gate.len()
        ));
    }
    dout.data_mut()
        .iter_mut()
        .zip(&cache.gate)
        .for_each(|(v, &g)| *v = *v * g);
    Ok(dout)
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    input_dims: Vec<usize>,
    output_dims: Vec<usize>,
    argmax: Vec<u32>,
}

/// Max pooling with floor semantics; a trailing row or column that does
/// not fill a window is dropped. Ties go to the first element in
/// row-major window order.
pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    field: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolCache)> {
    let (batch, channels, h, w, batched) = volume_dims(input, "maxpool")?;
    if field == 0 || stride == 0 {
        return Err(Error::Parameter(
            "pool field and stride must be >= 1".into(),
        ));
    }
    if h < field || w < field {
        return shape_err(format!("pool field {field} larger than input {h}x{w}"));
    }
    if input.len() > u32::MAX as usize {
        return shape_err("pool input too large");
    }
    let (oh, ow) = ((h - field) / stride + 1, (w - field) / stride + 1);
    let out_dims = with_batch(batched, batch, &[channels, oh, ow]);
    let total = batch * channels * oh * ow;
    let mut out = Vec::with_capacity(total);
    let mut argmax = Vec::with_capacity(total);
    let data = input.data();
    for plane in 0..batch * channels {
        let base = plane * h * w;
        for y in 0..oh {
            let top = base + y * stride * w;
            if field == 2 {
                let (r0, r1) = (&data[top..top + w], &data[top + w..top + 2 * w]);
                for x in 0..ow {
                    let c = x * stride;
                    let (mut best, mut bi) = (r0[c], top + c);
                    for (v, i) in [
                        (r0[c + 1], top + c + 1),
                        (r1[c], top + w + c),
                        (r1[c + 1], top + w + c + 1),
                    ] {
                        if v > best {
                            best = v;
                            bi = i;
                        }
                    }
                    out.push(best);
                    argmax.push(bi as u32);
                }
                continue;
            }
            for x in 0..ow {
                let mut best = top + x * stride;
                for i in 0..field {
                    for j in 0..field {
                        let idx = top + i * w + x * stride + j;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best as u32);
            }
        }
    }
    let cache = PoolCache {
        input_dims: input.dims().to_vec(),
        output_dims: out_dims.clone(),
        argmax,
    };
    Ok((Tensor::new(&out_dims, out)?, cache))
}

pub fn maxpool_backward<T: Scalar>(dout: &Tensor<T>, cache: &PoolCache) -> Result<Tensor<T>> {
    if dout.dims() != cache.output_dims.as_slice() {
        return shape_err(format!(
            "maxpool backward expected {:?}, got {:?}",
            cache.output_dims,
            dout.dims()
        ));
    }
    let mut dinput = Tensor::zeros(&cache.input_dims);
    let d = dinput.data_mut();
    for (&src, &g) in cache.argmax.iter().zip(dout.data()) {
        d[src as usize] += g;
    }
    Ok(dinput)
}

#[derive(Clone, Debug)]
pub struct AffineCache<T = f32> {
    flat: Tensor<T>,
    input_dims: Vec<usize>,
    batched: bool,
}

/// `flatten(input) · W ⊕ b`. Rank-1 and rank-3 inputs are single samples;
/// rank-2 and rank-4 inputs carry a leading batch dimension.
pub fn affine_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
) -> Result<(Tensor<T>, AffineCache<T>)> {
    let batched = matches!(input.rank(), 2 | 4);
    let (batch, width) = if batched {
        (input.dims()[0], input.len() / input.dims()[0])
    } else if matches!(input.rank(), 1 | 3) {
        (1, input.len())
    } else {
        return shape_err(format!("affine input rank {} unsupported", input.rank()));
    };
    let [rows, outputs] = *params.weights.dims() else {
        return shape_err(format!(
            "affine weights must be rank 2, got {:?}",
            params.weights.dims()
        ));
    };
    if rows != width {
        return shape_err(format!(
            "affine input {:?} flattens to {width} columns but weights are {:?}",
            input.dims(),
            params.weights.dims()
        ));
    }
    if params.bias.dims() != [outputs] {
        return shape_err(format!(
            "affine bias must be [{outputs}], got {:?}",
            params.bias.dims()
        ));
    }
    let flat = input.reshape(&[batch, width])?;
    let mut out = Tensor::zeros(&[batch, outputs]);
    gemm(
        batch,
        width,
        outputs,
        flat.data(),
        Op::N,
        params.weights.data(),
        Op::N,
        out.data_mut(),
        false,
    );
    let out = out.add(&params.bias)?;
    let out = if batched {
        out
    } else {
        out.reshape(&[outputs])?
    };
    Ok((
        out,
        AffineCache {
            flat,
            input_dims: input.dims().to_vec(),
            batched,
        },
    ))
}

pub fn affine_backward<T: Scalar>(
    dout: &Tensor<T>,
    cache: &AffineCache<T>,
    params: &mut LayerParams<T>,
) -> Result<Tensor<T>> {
    let [batch, width] = *cache.flat.dims() else {
        unreachable!()
    };
    let outputs = params.bias.len();
    let expected: Vec<usize> = if cache.batched {
        vec![batch, outputs]
    } else {
        vec![outputs]
    };
    if dout.dims() != expected.as_slice() || params.weights.dims() != [width, outputs] {
        return shape_err(format!(
            "affine backward expected dout {:?}, got {:?}",
            expected,
            dout.dims()
        ));
    }
    let g = dout.data();
    gemm(
        width,
        batch,
        outputs,
        cache.flat.data(),
        Op::T,
        g,
        Op::N,
        params.grad_weights.data_mut(),
        true,
    );
    for row in g.chunks_exact(outputs) {
        for (gb, &v) in params.grad_bias.data_mut().iter_mut().zip(row) {
            *gb += v;
        }
    }
    let mut dflat = vec![T::zero(); batch * width];
    gemm(
        batch,
        outputs,
        width,
        g,
        Op::N,
        params.weights.data(),
        Op::T,
        &mut dflat,
        false,
    );
    Tensor::new(&cache.input_dims, dflat)
}

#[derive(Clone, Debug)]
pub struct DropoutCache<T = f32> {
    /// Per-element factor (0 or 1/retain); `None` means identity.
    mask: Option<Vec<T>>,
}

/// Inverted dropout: kept elements are scaled by `1/retain_prob` during
/// training so evaluation is a plain identity.
pub fn dropout_forward<T: Scalar>(
    mut input: Tensor<T>,
    retain_prob: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor<T>, DropoutCache<T>)> {
    if !(retain_prob > 0.0 && retain_prob <= 1.0) {
        return Err(Error::Parameter(format!(
            "retain probability {retain_prob} outside (0, 1]"
        )));
    }
    if mode == Mode::Eval || retain_prob == 1.0 {
        return Ok((input, DropoutCache { mask: None }));
    }
    let keep = T::of(1.0 / retain_prob);
    let mask: Vec<T> = (0..input.len())
        .map(|_| {
            if rng.next_f64() < retain_prob {
                keep
            } else {
                T::zero()
            }
        })
        .collect();
    input
        .data_mut()
        .iter_mut()
        .zip(&mask)
        .for_each(|(v, &m)| *v = *v * m);
    Ok((input, DropoutCache { mask: Some(mask) }))
}

pub fn dropout_backward<T: Scalar>(
    mut dout: Tensor<T>,
    cache: &DropoutCache<T>,
) -> Result<Tensor<T>> {
    let Some(mask) = &cache.mask else {
        return Ok(dout);
    };
    if mask.len() != dout.len() {
        return shape_err(format!(
            "dropout backward: dout has {} values, mask {}",
            dout.len(),
            mask.len()
        ));
    }
    dout.data_mut()
        .iter_mut()
        .zip(mask)
        .for_each(|(v, &m)| *v = *v * m);
    Ok(dout)
}

/// Row-wise softmax of `[batch, classes]` logits, max-shifted.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, classes] = *logits.dims() else {
        return shape_err(format!(
            "softmax expects [batch, classes], got {:?}",
            logits.dims()
        ));
    };
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let total: T = row.iter().copied().sum();
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    Ok(out)
}

/// Mean cross-entropy of softmax probabilities against class labels, and
/// its gradient with respect to the logits.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let probs = softmax(logits)?;
    let [batch, classes] = *logits.dims() else {
        unreachable!()
    };
    if labels.len() != batch {
        return shape_err(format!("{} labels for a batch of {batch}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Parameter(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let n = T::of(batch as f64);
    let mut loss = T::zero();
    let mut grad = probs;
    for ((row, logit_row), &label) in grad
        .data_mut()
        .chunks_exact_mut(classes)
        .zip(logits.data().chunks_exact(classes))
        .zip(labels)
    {
        let max = logit_row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + logit_row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        loss += lse - logit_row[label];
        row[label] = row[label] - T::one();
        row.iter_mut().for_each(|v| *v = *v / n);
    }
    Ok((loss / n, grad))
}
