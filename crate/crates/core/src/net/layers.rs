//! Layer kernels with forward and backward passes over flat `f64` feature maps
//! stored channel-major (`c * H * W + y * W + x`).

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::dataset::Shape;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// Declarative layer description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        kernels: usize,
        size: usize,
        #[serde(default = "one")]
        stride: usize,
        /// Zero padding on each border; defaults to `size / 2`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        padding: Option<usize>,
        #[serde(default)]
        activation: Activation,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    LocalNorm {
        window: usize,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    FullyConnected {
        outputs: usize,
        #[serde(default)]
        activation: Activation,
    },
    Dropout {
        keep: f64,
    },
    L2Normalize,
}

fn one() -> usize {
    1
}

pub const DEFAULT_LOCAL_NORM_EPSILON: f64 = 1e-5;

fn default_epsilon() -> f64 {
    DEFAULT_LOCAL_NORM_EPSILON
}

/// Norm floor used by L2 normalization to keep the zero vector finite.
pub const NORM_FLOOR: f64 = 1e-12;

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::LocalNorm { .. } => "local_norm",
            LayerSpec::FullyConnected { .. } => "fully_connected",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::L2Normalize => "l2_normalize",
        }
    }

    /// Output shape and parameter array lengths `(weights, bias)` for an input shape.
    pub fn plan(&self, input: Shape) -> Result<(Shape, Option<(usize, usize)>)> {
        let bad = |m: String| Err(Error::Network(format!("{}: {m}", self.name())));
        match *self {
            LayerSpec::Conv {
                kernels,
                size,
                stride,
                padding,
                ..
            } => {
                let pad = padding.unwrap_or(size / 2);
                if kernels == 0 || size == 0 || stride == 0 {
                    return bad("kernels, size and stride must be positive".into());
                }
                if input.height + 2 * pad < size || input.width + 2 * pad < size {
                    return bad(format!("kernel {size} larger than padded input {input}"));
                }
                let out = Shape::new(
                    kernels,
                    (input.height + 2 * pad - size) / stride + 1,
                    (input.width + 2 * pad - size) / stride + 1,
                );
                Ok((out, Some((kernels * input.channels * size * size, kernels))))
            }
            LayerSpec::MaxPool { window, stride } => {
                if window == 0 || stride == 0 {
                    return bad("window and stride must be positive".into());
                }
                if window > input.height || window > input.width {
                    return bad(format!("window {window} exceeds input {input}"));
                }
                let out = Shape::new(
                    input.channels,
                    (input.height - window) / stride + 1,
                    (input.width - window) / stride + 1,
                );
                Ok((out, None))
            }
            LayerSpec::LocalNorm { window, epsilon } => {
                if window == 0 || window % 2 == 0 {
                    return bad(format!("window {window} must be odd and at least 1"));
                }
                if window > input.height || window > input.width {
                    return bad(format!("window {window} exceeds feature map {input}"));
                }
                if !(epsilon > 0.0) {
                    return bad("epsilon must be positive".into());
                }
                Ok((input, None))
            }
            LayerSpec::FullyConnected { outputs, .. } => {
                if outputs == 0 {
                    return bad("outputs must be positive".into());
                }
                Ok((Shape::new(outputs, 1, 1), Some((outputs * input.len(), outputs))))
            }
            LayerSpec::Dropout { keep } => {
                if !(keep > 0.0 && keep <= 1.0) {
                    return bad(format!("keep probability {keep} outside (0, 1]"));
                }
                Ok((input, None))
            }
            LayerSpec::L2Normalize => Ok((input, None)),
        }
    }
}

/// A layer bound to its input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub input: Shape,
    pub output: Shape,
    /// Indices of the `(weights, bias)` arrays in the network parameter list.
    pub params: Option<(usize, usize)>,
}

/// Per-layer state saved by the forward pass for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerCache {
    None,
    MaxPool { argmax: Vec<usize> },
    LocalNorm { mean: Vec<f64>, norm: Vec<f64> },
    /// Inverted-dropout multipliers (0 or 1/keep); `None` in inference mode.
    Dropout { mask: Option<Vec<f64>> },
    L2 { norm: f64 },
}

pub struct LayerGrad {
    pub input: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(spec: LayerSpec, input: Shape) -> Result<(Self, Option<(usize, usize)>)> {
        let (output, sizes) = spec.plan(input)?;
        Ok((
            Layer {
                spec,
                input,
                output,
                params: None,
            },
            sizes,
        ))
    }

    /// `rng` is required for dropout in training mode; `None` means inference.
    pub fn forward<R: RngCore + ?Sized>(
        &self,
        weights: &[f64],
        bias: &[f64],
        x: &[f64],
        rng: Option<&mut R>,
    ) -> (Vec<f64>, LayerCache) {
        debug_assert_eq!(x.len(), self.input.len());
        match self.spec {
            LayerSpec::Conv {
                size,
                stride,
                padding,
                activation,
                ..
            } => {
                let mut y = conv_forward(x, self.input, weights, bias, size, stride, padding.unwrap_or(size / 2), self.output);
                activate(&mut y, activation);
                (y, LayerCache::None)
            }
            LayerSpec::MaxPool { window, stride } => {
                let (y, argmax) = max_pool_forward(x, self.input, window, stride, self.output);
                (y, LayerCache::MaxPool { argmax })
            }
            LayerSpec::LocalNorm { window, epsilon } => {
                let (y, mean, norm) = local_norm_forward(x, self.input, window, epsilon);
                (y, LayerCache::LocalNorm { mean, norm })
            }
            LayerSpec::FullyConnected { activation, .. } => {
                let n_in = x.len();
                let mut y = bias.to_vec();
                for (o, yo) in y.iter_mut().enumerate() {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    *yo += dot(row, x);
                }
                activate(&mut y, activation);
                (y, LayerCache::None)
            }
            LayerSpec::Dropout { keep } => match rng {
                Some(rng) if keep < 1.0 => {
                    let mask = dropout_mask(x.len(), keep, rng);
                    let y = x.iter().zip(&mask).map(|(a, m)| a * m).collect();
                    (y, LayerCache::Dropout { mask: Some(mask) })
                }
                _ => (x.to_vec(), LayerCache::Dropout { mask: None }),
            },
            LayerSpec::L2Normalize => {
                let norm = dot(x, x).sqrt();
                let scale = 1.0 / norm.max(NORM_FLOOR);
                (x.iter().map(|v| v * scale).collect(), LayerCache::L2 { norm })
            }
        }
    }

    /// Gradients with respect to the input and this layer's parameters, given the
    /// forward input `x`, output `y` and the upstream gradient `gy`.
    pub fn backward(
        &self,
        weights: &[f64],
        x: &[f64],
        y: &[f64],
        cache: &LayerCache,
        gy: &[f64],
    ) -> LayerGrad {
        match (&self.spec, cache) {
            (
                LayerSpec::Conv {
                    size,
                    stride,
                    padding,
                    activation,
                    ..
                },
                _,
            ) => {
                let g = activation_grad(gy, y, *activation);
                let (gx, gw, gb) = conv_backward(
                    x,
                    self.input,
                    weights,
                    &g,
                    *size,
                    *stride,
                    padding.unwrap_or(size / 2),
                    self.output,
                );
                LayerGrad {
                    input: gx,
                    weights: gw,
                    bias: gb,
                }
            }
            (LayerSpec::MaxPool { .. }, LayerCache::MaxPool { argmax }) => {
                let mut gx = vec![0.0; x.len()];
                for (g, &a) in gy.iter().zip(argmax) {
                    gx[a] += g;
                }
                LayerGrad {
                    input: gx,
                    weights: vec![],
                    bias: vec![],
                }
            }
            (LayerSpec::LocalNorm { window, epsilon }, LayerCache::LocalNorm { mean, norm }) => {
                let gx = local_norm_backward(x, self.input, *window, *epsilon, mean, norm, gy);
                LayerGrad {
                    input: gx,
                    weights: vec![],
                    bias: vec![],
                }
            }
            (LayerSpec::FullyConnected { activation, .. }, _) => {
                let g = activation_grad(gy, y, *activation);
                let n_in = x.len();
                let mut gx = vec![0.0; n_in];
                let mut gw = vec![0.0; weights.len()];
                for (o, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    let grow = &mut gw[o * n_in..(o + 1) * n_in];
                    for i in 0..n_in {
                        grow[i] = go * x[i];
                        gx[i] += go * row[i];
                    }
                }
                LayerGrad {
                    input: gx,
                    weights: gw,
                    bias: g,
                }
            }
            (LayerSpec::Dropout { .. }, LayerCache::Dropout { mask }) => {
                let gx = match mask {
                    Some(m) => gy.iter().zip(m).map(|(g, m)| g * m).collect(),
                    None => gy.to_vec(),
                };
                LayerGrad {
                    input: gx,
                    weights: vec![],
                    bias: vec![],
                }
            }
            (LayerSpec::L2Normalize, LayerCache::L2 { norm }) => LayerGrad {
                input: l2_backward(y, *norm, gy),
                weights: vec![],
                bias: vec![],
            },
            (spec, cache) => unreachable!("cache {cache:?} does not belong to {spec:?}"),
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn activate(y: &mut [f64], activation: Activation) {
    if activation == Activation::Relu {
        y.iter_mut().for_each(|v| *v = v.max(0.0));
    }
}

fn activation_grad(gy: &[f64], y: &[f64], activation: Activation) -> Vec<f64> {
    match activation {
        Activation::Identity => gy.to_vec(),
        Activation::Relu => gy
            .iter()
            .zip(y)
            .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
            .collect(),
    }
}

/// Multipliers for inverted dropout: `1/keep` with probability `keep`, else 0.
pub fn dropout_mask<R: RngCore + ?Sized>(len: usize, keep: f64, rng: &mut R) -> Vec<f64> {
    let scale = 1.0 / keep;
    (0..len)
        .map(|_| if rng.random_bool(keep) { scale } else { 0.0 })
        .collect()
}

/// Backward of `y = x / |x|` given `y` and `|x|`.
pub fn l2_backward(y: &[f64], norm: f64, gy: &[f64]) -> Vec<f64> {
    let n = norm.max(NORM_FLOOR);
    if norm < NORM_FLOOR {
        return gy.iter().map(|g| g / n).collect();
    }
    let proj = dot(y, gy);
    gy.iter().zip(y).map(|(g, v)| (g - v * proj) / n).collect()
}

/// Range of output coordinates `o` with `0 <= o*stride + k - pad < extent`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > k {
        ((extent - 1 + pad - k) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    input: Shape,
    w: &[f64],
    b: &[f64],
    size: usize,
    stride: usize,
    pad: usize,
    output: Shape,
) -> Vec<f64> {
    let (ow, oh) = (output.width, output.height);
    let mut y = vec![0.0; output.len()];
    for k in 0..output.channels {
        let yk = &mut y[k * oh * ow..(k + 1) * oh * ow];
        yk.iter_mut().for_each(|v| *v = b[k]);
        for c in 0..input.channels {
            let xc = &x[c * input.plane()..(c + 1) * input.plane()];
            for ky in 0..size {
                let (oy0, oy1) = valid_range(ky, pad, stride, input.height, oh);
                for kx in 0..size {
                    let wv = w[((k * input.channels + c) * size + ky) * size + kx];
                    let (ox0, ox1) = valid_range(kx, pad, stride, input.width, ow);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let xrow = &xc[iy * input.width..(iy + 1) * input.width];
                        let yrow = &mut yk[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let shift = kx as isize - pad as isize;
                            let src = &xrow[(ox0 as isize + shift) as usize..(ox1 as isize + shift) as usize];
                            for (yo, xi) in yrow[ox0..ox1].iter_mut().zip(src) {
                                *yo += wv * xi;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                yrow[ox] += wv * xrow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    input: Shape,
    w: &[f64],
    g: &[f64],
    size: usize,
    stride: usize,
    pad: usize,
    output: Shape,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ow, oh) = (output.width, output.height);
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; output.channels];
    for k in 0..output.channels {
        let gk = &g[k * oh * ow..(k + 1) * oh * ow];
        gb[k] = gk.iter().sum();
        if gk.iter().all(|v| *v == 0.0) {
            continue;
        }
        for c in 0..input.channels {
            let xc = &x[c * input.plane()..(c + 1) * input.plane()];
            let gxc = &mut gx[c * input.plane()..(c + 1) * input.plane()];
            for ky in 0..size {
                let (oy0, oy1) = valid_range(ky, pad, stride, input.height, oh);
                for kx in 0..size {
                    let widx = ((k * input.channels + c) * size + ky) * size + kx;
                    let wv = w[widx];
                    let (ox0, ox1) = valid_range(kx, pad, stride, input.width, ow);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gk[oy * ow..(oy + 1) * ow];
                        let base = iy * input.width;
                        for ox in ox0..ox1 {
                            let ix = base + ox * stride + kx - pad;
                            let gv = grow[ox];
                            acc += gv * xc[ix];
                            gxc[ix] += wv * gv;
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

fn max_pool_forward(
    x: &[f64],
    input: Shape,
    window: usize,
    stride: usize,
    output: Shape,
) -> (Vec<f64>, Vec<usize>) {
    let mut y = Vec::with_capacity(output.len());
    let mut argmax = Vec::with_capacity(output.len());
    for c in 0..input.channels {
        let base = c * input.plane();
        for oy in 0..output.height {
            for ox in 0..output.width {
                let mut best = f64::NEG_INFINITY;
                let mut at = base;
                for dy in 0..window {
                    let row = base + (oy * stride + dy) * input.width + ox * stride;
                    for dx in 0..window {
                        let v = x[row + dx];
                        if v > best {
                            best = v;
                            at = row + dx;
                        }
                    }
                }
                y.push(best);
                argmax.push(at);
            }
        }
    }
    (y, argmax)
}

/// Inclusive window bounds around `p`, clipped to `[0, extent)`.
#[inline]
fn window_bounds(p: usize, half: usize, extent: usize) -> (usize, usize) {
    (p.saturating_sub(half), (p + half).min(extent - 1))
}

/// Spatial, per-channel local normalization:
/// `y = (x - m) / (s + epsilon)` where `m` is the mean of the (border-clipped) window
/// around each position and `s` the L2 norm of the window after removing `m`.
pub fn local_norm(x: &[f64], shape: Shape, window: usize, epsilon: f64) -> Result<Vec<f64>> {
    LayerSpec::LocalNorm { window, epsilon }.plan(shape)?;
    if x.len() != shape.len() {
        return Err(Error::DimMismatch(format!("{} values for shape {shape}", x.len())));
    }
    Ok(local_norm_forward(x, shape, window, epsilon).0)
}

fn local_norm_forward(x: &[f64], shape: Shape, window: usize, epsilon: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let half = window / 2;
    let (h, w) = (shape.height, shape.width);
    let mut y = vec![0.0; x.len()];
    let mut means = vec![0.0; x.len()];
    let mut norms = vec![0.0; x.len()];
    for c in 0..shape.channels {
        let base = c * shape.plane();
        for py in 0..h {
            let (y0, y1) = window_bounds(py, half, h);
            for px in 0..w {
                let (x0, x1) = window_bounds(px, half, w);
                let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                let mut sum = 0.0;
                for qy in y0..=y1 {
                    for qx in x0..=x1 {
                        sum += x[base + qy * w + qx];
                    }
                }
                let mean = sum / count;
                let mut ss = 0.0;
                for qy in y0..=y1 {
                    for qx in x0..=x1 {
                        let d = x[base + qy * w + qx] - mean;
                        ss += d * d;
                    }
                }
                let s = ss.sqrt();
                let idx = base + py * w + px;
                means[idx] = mean;
                norms[idx] = s;
                y[idx] = (x[idx] - mean) / (s + epsilon);
            }
        }
    }
    (y, means, norms)
}

fn local_norm_backward(
    x: &[f64],
    shape: Shape,
    window: usize,
    epsilon: f64,
    means: &[f64],
    norms: &[f64],
    gy: &[f64],
) -> Vec<f64> {
    // dy_p/dx_q = (δ_pq - 1/n) / (s + ε) - (x_p - m) / (s + ε)^2 * (x_q - m) / s
    let half = window / 2;
    let (h, w) = (shape.height, shape.width);
    let mut gx = vec![0.0; x.len()];
    for c in 0..shape.channels {
        let base = c * shape.plane();
        for py in 0..h {
            let (y0, y1) = window_bounds(py, half, h);
            for px in 0..w {
                let idx = base + py * w + px;
                let g = gy[idx];
                if g == 0.0 {
                    continue;
                }
                let (x0, x1) = window_bounds(px, half, w);
                let n = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                let (m, s) = (means[idx], norms[idx]);
                let denom = s + epsilon;
                let centered = x[idx] - m;
                let uniform = -g / (n * denom);
                let radial = if s > 0.0 {
                    -g * centered / (denom * denom * s)
                } else {
                    0.0
                };
                for qy in y0..=y1 {
                    for qx in x0..=x1 {
                        let q = base + qy * w + qx;
                        gx[q] += uniform + radial * (x[q] - m);
                    }
                }
                gx[idx] += g / denom;
            }
        }
    }
    gx
}

/// Average-pools every channel by `factor` along both spatial axes.
pub fn downsample(x: &[f64], shape: Shape, factor: usize) -> Result<(Vec<f64>, Shape)> {
    if factor == 0 || !shape.height.is_multiple_of(factor) || !shape.width.is_multiple_of(factor) {
        return Err(Error::Network(format!(
            "downsample factor {factor} does not divide {}x{}",
            shape.height, shape.width
        )));
    }
    if x.len() != shape.len() {
        return Err(Error::DimMismatch(format!("{} values for shape {shape}", x.len())));
    }
    if factor == 1 {
        return Ok((x.to_vec(), shape));
    }
    let out = Shape::new(shape.channels, shape.height / factor, shape.width / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut y = vec![0.0; out.len()];
    for c in 0..shape.channels {
        for oy in 0..out.height {
            for ox in 0..out.width {
                let mut sum = 0.0;
                for dy in 0..factor {
                    let row = c * shape.plane() + (oy * factor + dy) * shape.width + ox * factor;
                    sum += x[row..row + factor].iter().sum::<f64>();
                }
                y[c * out.plane() + oy * out.width + ox] = sum * inv;
            }
        }
    }
    Ok((y, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn local_norm_constant_input_is_zero() {
        let shape = Shape::new(2, 5, 5);
        let y = local_norm(&vec![0.7; shape.len()], shape, 3, 1e-5).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn local_norm_unit_window_is_zero() {
        let shape = Shape::new(1, 4, 4);
        let y = local_norm(&random(16, 1), shape, 1, 1e-5).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn local_norm_rejects_bad_windows() {
        let shape = Shape::new(1, 4, 4);
        assert!(local_norm(&random(16, 1), shape, 2, 1e-5).is_err());
        assert!(local_norm(&random(16, 1), shape, 5, 1e-5).is_err());
    }

    #[test]
    fn local_norm_matches_direct_recomputation() {
        // Each interior output is the centered value over the centered window norm;
        // recompute it position by position with a plain formula.
        let shape = Shape::new(2, 6, 7);
        let x = random(shape.len(), 2);
        let eps = 1e-5;
        let y = local_norm(&x, shape, 3, eps).unwrap();
        for c in 0..2 {
            for py in 1..5usize {
                for px in 1..6usize {
                    let vals: Vec<f64> = (py - 1..=py + 1)
                        .flat_map(|qy| (px - 1..=px + 1).map(move |qx| (qy, qx)))
                        .map(|(qy, qx)| x[c * 42 + qy * 7 + qx])
                        .collect();
                    let mean = vals.iter().sum::<f64>() / 9.0;
                    let norm = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
                    let expect = (x[c * 42 + py * 7 + px] - mean) / (norm + eps);
                    assert!((y[c * 42 + py * 7 + px] - expect).abs() < 1e-12);
                    // centered window has unit norm up to epsilon
                    let unit: f64 = vals.iter().map(|v| ((v - mean) / (norm + eps)).powi(2)).sum::<f64>().sqrt();
                    assert!((unit - 1.0).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn downsample_examples() {
        let shape = Shape::new(1, 2, 2);
        let x = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(downsample(&x, shape, 1).unwrap().0, x.to_vec());
        let (y, s) = downsample(&x, shape, 2).unwrap();
        assert_eq!(y, vec![0.5]);
        assert_eq!(s, Shape::new(1, 1, 1));
        let c = vec![0.3; 3 * 8 * 8];
        let (y, _) = downsample(&c, Shape::new(3, 8, 8), 4).unwrap();
        assert!(y.iter().all(|v| (v - 0.3).abs() < 1e-15));
        assert!(downsample(&x, shape, 3).is_err());
    }

    #[test]
    fn dropout_keep_one_is_identity_in_both_modes() {
        let (layer, _) = Layer::new(LayerSpec::Dropout { keep: 1.0 }, Shape::new(5, 1, 1)).unwrap();
        let x = random(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (train, _) = layer.forward(&[], &[], &x, Some(&mut rng));
        let (infer, _) = layer.forward::<ChaCha8Rng>(&[], &[], &x, None);
        assert_eq!(train, x);
        assert_eq!(infer, x);
    }

    #[test]
    fn conv_output_shapes() {
        let spec = LayerSpec::Conv {
            kernels: 4,
            size: 3,
            stride: 2,
            padding: None,
            activation: Activation::Relu,
        };
        let (out, sizes) = spec.plan(Shape::new(3, 32, 32)).unwrap();
        assert_eq!(out, Shape::new(4, 16, 16));
        assert_eq!(sizes, Some((4 * 3 * 9, 4)));
        assert!(LayerSpec::MaxPool { window: 9, stride: 1 }.plan(Shape::new(1, 8, 8)).is_err());
        assert!(LayerSpec::Dropout { keep: 0.0 }.plan(Shape::new(1, 8, 8)).is_err());
    }

    #[test]
    fn conv_matches_naive_definition() {
        let input = Shape::new(2, 5, 6);
        for (size, stride, pad) in [(3, 1, 1), (3, 2, 1), (2, 1, 0), (5, 2, 2)] {
            let spec = LayerSpec::Conv {
                kernels: 3,
                size,
                stride,
                padding: Some(pad),
                activation: Activation::Identity,
            };
            let (layer, sizes) = Layer::new(spec, input).unwrap();
            let (nw, nb) = sizes.unwrap();
            let (w, b, x) = (random(nw, 4), random(nb, 5), random(input.len(), 6));
            let (y, _) = layer.forward::<ChaCha8Rng>(&w, &b, &x, None);
            let out = layer.output;
            for k in 0..3 {
                for oy in 0..out.height {
                    for ox in 0..out.width {
                        let mut acc = b[k];
                        for c in 0..2 {
                            for ky in 0..size {
                                for kx in 0..size {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                        continue;
                                    }
                                    acc += w[((k * 2 + c) * size + ky) * size + kx]
                                        * x[c * 30 + iy as usize * 6 + ix as usize];
                                }
                            }
                        }
                        let got = y[k * out.plane() + oy * out.width + ox];
                        assert!((got - acc).abs() < 1e-12, "size {size} stride {stride} pad {pad}");
                    }
                }
            }
        }
    }
}
