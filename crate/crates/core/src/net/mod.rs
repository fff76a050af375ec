//! The multiscale embedding network.
//!
//! Every path downsamples the input by its own factor, runs its layer stack, and
//! L2-normalizes the result. The normalized path outputs are concatenated and mapped
//! to the embedding by one linear layer.

pub mod gradcheck;
pub mod io;
pub mod layers;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Shape;
use crate::error::{Error, Result};
pub use layers::{Activation, Layer, LayerCache, LayerSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    /// Average-pooling factor applied to the input before the path's layers.
    pub downsample: usize,
    #[serde(rename = "layer", default)]
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiscaleConfig {
    pub input: Shape,
    pub embedding_dim: usize,
    #[serde(rename = "path")]
    pub paths: Vec<PathSpec>,
}

fn conv(kernels: usize, size: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv {
        kernels,
        size,
        stride,
        padding: None,
        activation: Activation::Relu,
    }
}

impl MultiscaleConfig {
    /// Desk-scale default: a 3×32×32 input, a full-resolution path with two
    /// convolutions, max pooling and local normalization, two shallower paths at 1/2
    /// and 1/4 resolution, and a 32-dimensional embedding.
    pub fn desk_scale() -> Self {
        let full = PathSpec {
            downsample: 1,
            layers: vec![
                conv(8, 3, 1),
                conv(8, 3, 2),
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::LocalNorm {
                    window: 3,
                    epsilon: layers::DEFAULT_LOCAL_NORM_EPSILON,
                },
                LayerSpec::Dropout { keep: 0.6 },
                LayerSpec::FullyConnected {
                    outputs: 32,
                    activation: Activation::Identity,
                },
            ],
        };
        let low = |factor| PathSpec {
            downsample: factor,
            layers: vec![
                conv(8, 3, 1),
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::Dropout { keep: 0.6 },
                LayerSpec::FullyConnected {
                    outputs: 32,
                    activation: Activation::Identity,
                },
            ],
        };
        MultiscaleConfig {
            input: Shape::new(3, 32, 32),
            embedding_dim: 32,
            paths: vec![full, low(2), low(4)],
        }
    }

    /// The same topology at reduced width and resolution, cheap enough for exhaustive
    /// finite-difference checks.
    pub fn tiny(input: Shape) -> Self {
        let mut cfg = Self::desk_scale();
        cfg.input = input;
        cfg.embedding_dim = 6;
        for path in &mut cfg.paths {
            for layer in &mut path.layers {
                match layer {
                    LayerSpec::Conv { kernels, .. } => *kernels = 3,
                    LayerSpec::FullyConnected { outputs, .. } => *outputs = 5,
                    _ => {}
                }
            }
        }
        cfg
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("network config: {e}")))
    }
}

/// One shape-checked path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPlan {
    pub downsample: usize,
    pub input: Shape,
    pub layers: Vec<Layer>,
    pub output_dim: usize,
}

static NEXT_PARAMS_ID: AtomicU64 = AtomicU64::new(1);

/// All learnable arrays of a network, in declaration order.
#[derive(Debug, PartialEq)]
pub struct NetworkParams {
    arrays: Vec<Vec<f64>>,
    names: Vec<String>,
    /// Identity and mutation counter used to detect stale forward caches.
    id: u64,
    generation: u64,
}

impl Clone for NetworkParams {
    fn clone(&self) -> Self {
        Self {
            arrays: self.arrays.clone(),
            names: self.names.clone(),
            id: NEXT_PARAMS_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        }
    }
}

impl NetworkParams {
    pub fn new(names: Vec<String>, arrays: Vec<Vec<f64>>) -> Self {
        Self {
            arrays,
            names,
            id: NEXT_PARAMS_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        }
    }

    /// Zero-filled arrays of the same layout.
    pub fn zeros_like(&self) -> Self {
        Self::new(
            self.names.clone(),
            self.arrays.iter().map(|a| vec![0.0; a.len()]).collect(),
        )
    }

    pub fn arrays(&self) -> &[Vec<f64>] {
        &self.arrays
    }

    /// Mutable access; invalidates forward caches taken before the call.
    pub fn arrays_mut(&mut self) -> &mut [Vec<f64>] {
        self.generation += 1;
        &mut self.arrays
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_arrays(&self) -> usize {
        self.arrays.len()
    }

    pub fn num_values(&self) -> usize {
        self.arrays.iter().map(Vec::len).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.arrays.iter().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::DimMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_values()
            )));
        }
        let mut pos = 0;
        for a in self.arrays_mut() {
            let n = a.len();
            a.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        Ok(())
    }

    /// Flat index → (array, offset).
    pub fn locate(&self, mut flat_index: usize) -> Option<(usize, usize)> {
        for (a, arr) in self.arrays.iter().enumerate() {
            if flat_index < arr.len() {
                return Some((a, flat_index));
            }
            flat_index -= arr.len();
        }
        None
    }

    pub fn squared_norm(&self) -> f64 {
        self.arrays.iter().flatten().map(|w| w * w).sum()
    }

    pub fn same_layout(&self, other: &NetworkParams) -> bool {
        self.arrays.len() == other.arrays.len()
            && self.arrays.iter().zip(&other.arrays).all(|(a, b)| a.len() == b.len())
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().flatten().all(|v| v.is_finite())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &NetworkParams, scale: f64) {
        for (a, b) in self.arrays_mut().iter_mut().zip(&other.arrays) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    fn stamp(&self) -> (u64, u64) {
        (self.id, self.generation)
    }
}

/// Activations saved by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: (u64, u64),
    /// Per path: the input of every layer followed by the last layer's output.
    activations: Vec<Vec<Vec<f64>>>,
    caches: Vec<Vec<LayerCache>>,
    path_norms: Vec<f64>,
    path_outputs: Vec<Vec<f64>>,
    concat: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// Activations of a single-path forward pass.
#[derive(Debug, Clone)]
pub struct PathCache {
    stamp: (u64, u64),
    path: usize,
    activations: Vec<Vec<f64>>,
    caches: Vec<LayerCache>,
}

impl PathCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().unwrap()
    }
}

impl ForwardCache {
    /// Identity of the parameter snapshot the pass read.
    pub fn stamp(&self) -> (u64, u64) {
        self.stamp
    }

    /// The unit-norm output of every path, before the combining layer.
    pub fn path_outputs(&self) -> &[Vec<f64>] {
        &self.path_outputs
    }
}

/// Network architecture: the shape-checked plan for every path plus the combiner.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: MultiscaleConfig,
    paths: Vec<PathPlan>,
    concat_dim: usize,
    /// Indices of the combiner's `(weights, bias)` arrays.
    combine: (usize, usize),
    names: Vec<String>,
    sizes: Vec<usize>,
}

impl Network {
    /// Validates the configuration with a full shape trace.
    pub fn new(config: MultiscaleConfig) -> Result<Self> {
        if config.paths.is_empty() {
            return Err(Error::Network("at least one path is required".into()));
        }
        if config.embedding_dim == 0 || config.input.is_empty() {
            return Err(Error::Network("input shape and embedding dim must be nonzero".into()));
        }
        let mut names = Vec::new();
        let mut sizes = Vec::new();
        let mut paths = Vec::new();
        for (p, spec) in config.paths.iter().enumerate() {
            let f = spec.downsample;
            if f == 0 || !config.input.height.is_multiple_of(f) || !config.input.width.is_multiple_of(f) {
                return Err(Error::Network(format!(
                    "path {p}: downsample factor {f} does not divide input {}",
                    config.input
                )));
            }
            let input = Shape::new(config.input.channels, config.input.height / f, config.input.width / f);
            let mut shape = input;
            let mut planned = Vec::new();
            for (l, layer_spec) in spec.layers.iter().enumerate() {
                let (mut layer, param_sizes) = Layer::new(layer_spec.clone(), shape)
                    .map_err(|e| Error::Network(format!("path {p} layer {l}: {e}")))?;
                if let Some((nw, nb)) = param_sizes {
                    let base = names.len();
                    names.push(format!("path{p}.layer{l}.{}.weights", layer_spec.name()));
                    names.push(format!("path{p}.layer{l}.{}.bias", layer_spec.name()));
                    sizes.extend([nw, nb]);
                    layer.params = Some((base, base + 1));
                }
                shape = layer.output;
                planned.push(layer);
            }
            paths.push(PathPlan {
                downsample: f,
                input,
                layers: planned,
                output_dim: shape.len(),
            });
        }
        let concat_dim: usize = paths.iter().map(|p| p.output_dim).sum();
        let base = names.len();
        names.push("combine.weights".into());
        names.push("combine.bias".into());
        sizes.extend([config.embedding_dim * concat_dim, config.embedding_dim]);
        Ok(Network {
            config,
            paths,
            concat_dim,
            combine: (base, base + 1),
            names,
            sizes,
        })
    }

    pub fn config(&self) -> &MultiscaleConfig {
        &self.config
    }

    pub fn paths(&self) -> &[PathPlan] {
        &self.paths
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn input_shape(&self) -> Shape {
        self.config.input
    }

    pub fn concat_dim(&self) -> usize {
        self.concat_dim
    }

    pub fn combine_arrays(&self) -> (usize, usize) {
        self.combine
    }

    pub fn array_names(&self) -> &[String] {
        &self.names
    }

    pub fn array_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn zero_params(&self) -> NetworkParams {
        NetworkParams::new(
            self.names.clone(),
            self.sizes.iter().map(|&n| vec![0.0; n]).collect(),
        )
    }

    /// He-normal weights for ReLU layers, `N(0, 1/fan_in)` otherwise; zero biases.
    pub fn init_params(&self, seed: u64) -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = self.zero_params();
        let arrays = params.arrays_mut();
        for path in &self.paths {
            for layer in &path.layers {
                let Some((w, _)) = layer.params else { continue };
                let (fan_in, gain) = match layer.spec {
                    LayerSpec::Conv { size, activation, .. } => {
                        (layer.input.channels * size * size, gain_for(activation))
                    }
                    LayerSpec::FullyConnected { activation, .. } => {
                        (layer.input.len(), gain_for(activation))
                    }
                    _ => unreachable!("only conv and fc layers own parameters"),
                };
                fill_normal(&mut arrays[w], (gain / fan_in as f64).sqrt(), &mut rng);
            }
        }
        fill_normal(
            &mut arrays[self.combine.0],
            (1.0 / self.concat_dim as f64).sqrt(),
            &mut rng,
        );
        params
    }

    fn check_params(&self, params: &NetworkParams) -> Result<()> {
        if params.arrays.len() != self.sizes.len()
            || params.arrays.iter().zip(&self.sizes).any(|(a, &n)| a.len() != n)
        {
            return Err(Error::Network("parameter layout does not match network".into()));
        }
        Ok(())
    }

    /// Training-mode forward pass: dropout masks are drawn from `rng`.
    pub fn forward_train(
        &self,
        params: &NetworkParams,
        input: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<ForwardCache> {
        self.forward_impl(params, input, Some(rng))
    }

    /// Deterministic inference-mode forward pass.
    pub fn forward_infer(&self, params: &NetworkParams, input: &[f64]) -> Result<ForwardCache> {
        self.forward_impl(params, input, None)
    }

    pub fn embed(&self, params: &NetworkParams, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_infer(params, input)?.embedding)
    }

    /// Embedding of an `f32` image tensor in inference mode.
    pub fn embed_tensor(&self, params: &NetworkParams, tensor: &[f32]) -> Result<Vec<f64>> {
        let x: Vec<f64> = tensor.iter().map(|&v| v as f64).collect();
        self.embed(params, &x)
    }

    fn forward_impl(
        &self,
        params: &NetworkParams,
        input: &[f64],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardCache> {
        self.check_params(params)?;
        if input.len() != self.config.input.len() {
            return Err(Error::DimMismatch(format!(
                "input has {} values, network expects {}",
                input.len(),
                self.config.input
            )));
        }
        let arrays = &params.arrays;
        let mut activations = Vec::with_capacity(self.paths.len());
        let mut caches = Vec::with_capacity(self.paths.len());
        let mut path_norms = Vec::with_capacity(self.paths.len());
        let mut path_outputs = Vec::with_capacity(self.paths.len());
        let mut concat = Vec::with_capacity(self.concat_dim);
        for p in 0..self.paths.len() {
            let (acts, path_caches) = self.run_path(arrays, p, input, rng.as_deref_mut())?;
            let last = acts.last().unwrap();
            let norm = layers::dot(last, last).sqrt();
            let scale = 1.0 / norm.max(layers::NORM_FLOOR);
            let unit: Vec<f64> = last.iter().map(|v| v * scale).collect();
            concat.extend_from_slice(&unit);
            path_outputs.push(unit);
            path_norms.push(norm);
            activations.push(acts);
            caches.push(path_caches);
        }
        let (cw, cb) = self.combine;
        let (wc, bc) = (&arrays[cw], &arrays[cb]);
        let embedding: Vec<f64> = (0..self.config.embedding_dim)
            .map(|o| bc[o] + layers::dot(&wc[o * self.concat_dim..(o + 1) * self.concat_dim], &concat))
            .collect();
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                path: self.paths.len(),
                layer: 0,
            });
        }
        Ok(ForwardCache {
            stamp: params.stamp(),
            activations,
            caches,
            path_norms,
            path_outputs,
            concat,
            embedding,
        })
    }

    /// Parameter gradients of `<grad_embedding, f(x)>` at the cached forward pass.
    pub fn backward(
        &self,
        params: &NetworkParams,
        cache: &ForwardCache,
        grad_embedding: &[f64],
    ) -> Result<NetworkParams> {
        let mut grads = self.zero_params();
        self.backward_into(params, cache, grad_embedding, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Network::backward`] but accumulates into `grads`.
    pub fn backward_into(
        &self,
        params: &NetworkParams,
        cache: &ForwardCache,
        grad_embedding: &[f64],
        grads: &mut NetworkParams,
    ) -> Result<()> {
        self.check_params(params)?;
        if cache.stamp != params.stamp() {
            return Err(Error::Network(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        if grad_embedding.len() != self.config.embedding_dim {
            return Err(Error::DimMismatch(format!(
                "embedding gradient has {} values, expected {}",
                grad_embedding.len(),
                self.config.embedding_dim
            )));
        }
        if !grads.same_layout(params) {
            return Err(Error::Network("gradient layout does not match network".into()));
        }
        let arrays = &params.arrays;
        let garrays = &mut grads.arrays;
        let (cw, cb) = self.combine;
        let n = self.concat_dim;
        let mut g_concat = vec![0.0; n];
        for (o, &g) in grad_embedding.iter().enumerate() {
            garrays[cb][o] += g;
            if g == 0.0 {
                continue;
            }
            let row = &arrays[cw][o * n..(o + 1) * n];
            let grow = &mut garrays[cw][o * n..(o + 1) * n];
            for i in 0..n {
                grow[i] += g * cache.concat[i];
                g_concat[i] += g * row[i];
            }
        }
        let mut offset = 0;
        for (p, path) in self.paths.iter().enumerate() {
            let gy_unit = &g_concat[offset..offset + path.output_dim];
            offset += path.output_dim;
            let g = layers::l2_backward(&cache.path_outputs[p], cache.path_norms[p], gy_unit);
            self.backward_path_impl(arrays, garrays, p, &cache.activations[p], &cache.caches[p], g);
        }
        Ok(())
    }

    /// Runs one path's layers on the downsampled input; returns every layer input
    /// followed by the last output, and the layer caches.
    fn run_path<R: RngCore + ?Sized>(
        &self,
        arrays: &[Vec<f64>],
        p: usize,
        input: &[f64],
        mut rng: Option<&mut R>,
    ) -> Result<(Vec<Vec<f64>>, Vec<LayerCache>)> {
        let path = &self.paths[p];
        let (x0, _) = layers::downsample(input, self.config.input, path.downsample)?;
        let mut acts = vec![x0];
        let mut path_caches = Vec::with_capacity(path.layers.len());
        for (l, layer) in path.layers.iter().enumerate() {
            let (w, b): (&[f64], &[f64]) = match layer.params {
                Some((w, b)) => (&arrays[w], &arrays[b]),
                None => (&[], &[]),
            };
            let x = acts.last().unwrap();
            let (y, cache) = layer.forward(w, b, x, rng.as_deref_mut());
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { path: p, layer: l });
            }
            acts.push(y);
            path_caches.push(cache);
        }
        Ok((acts, path_caches))
    }

    fn backward_path_impl(
        &self,
        arrays: &[Vec<f64>],
        garrays: &mut [Vec<f64>],
        p: usize,
        acts: &[Vec<f64>],
        caches: &[LayerCache],
        mut g: Vec<f64>,
    ) {
        for (l, layer) in self.paths[p].layers.iter().enumerate().rev() {
            let w: &[f64] = match layer.params {
                Some((w, _)) => &arrays[w],
                None => &[],
            };
            let lg = layer.backward(w, &acts[l], &acts[l + 1], &caches[l], &g);
            if let Some((wi, bi)) = layer.params {
                garrays[wi].iter_mut().zip(&lg.weights).for_each(|(a, b)| *a += b);
                garrays[bi].iter_mut().zip(&lg.bias).for_each(|(a, b)| *a += b);
            }
            if l == 0 {
                break;
            }
            g = lg.input;
        }
    }

    /// Forward pass through path `p` alone, returning its raw (unnormalized) output.
    pub fn forward_path<R: RngCore + ?Sized>(
        &self,
        params: &NetworkParams,
        p: usize,
        input: &[f64],
        rng: Option<&mut R>,
    ) -> Result<PathCache> {
        self.check_params(params)?;
        if p >= self.paths.len() {
            return Err(Error::Network(format!("no path {p}")));
        }
        if input.len() != self.config.input.len() {
            return Err(Error::DimMismatch(format!(
                "input has {} values, network expects {}",
                input.len(),
                self.config.input
            )));
        }
        let (activations, caches) = self.run_path(&params.arrays, p, input, rng)?;
        Ok(PathCache {
            stamp: params.stamp(),
            path: p,
            activations,
            caches,
        })
    }

    /// Accumulates the gradients of `<grad_output, path output>` into `grads`.
    pub fn backward_path_into(
        &self,
        params: &NetworkParams,
        cache: &PathCache,
        grad_output: &[f64],
        grads: &mut NetworkParams,
    ) -> Result<()> {
        self.check_params(params)?;
        if cache.stamp != params.stamp() {
            return Err(Error::Network(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        if grad_output.len() != cache.output().len() {
            return Err(Error::DimMismatch(format!(
                "path gradient has {} values, expected {}",
                grad_output.len(),
                cache.output().len()
            )));
        }
        if !grads.same_layout(params) {
            return Err(Error::Network("gradient layout does not match network".into()));
        }
        self.backward_path_impl(
            &params.arrays,
            &mut grads.arrays,
            cache.path,
            &cache.activations,
            &cache.caches,
            grad_output.to_vec(),
        );
        Ok(())
    }

    /// Parameter array indices owned by path `p`.
    pub fn path_arrays(&self, p: usize) -> Vec<usize> {
        self.paths[p]
            .layers
            .iter()
            .filter_map(|l| l.params)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// First-layer convolution kernels of a path as `(kernels, channels, size)` and the
    /// weight values, if the path starts with a convolution.
    pub fn first_conv<'a>(
        &self,
        params: &'a NetworkParams,
        path: usize,
    ) -> Option<((usize, usize, usize), &'a [f64])> {
        let plan = self.paths.get(path)?;
        let layer = plan.layers.iter().find(|l| matches!(l.spec, LayerSpec::Conv { .. }))?;
        let LayerSpec::Conv { kernels, size, .. } = layer.spec else {
            unreachable!()
        };
        let (w, _) = layer.params?;
        Some(((kernels, layer.input.channels, size), &params.arrays[w]))
    }
}

fn gain_for(activation: Activation) -> f64 {
    match activation {
        Activation::Relu => 2.0,
        Activation::Identity => 1.0,
    }
}

fn fill_normal<R: Rng>(a: &mut [f64], std: f64, rng: &mut R) {
    let dist = Normal::new(0.0, std).expect("finite std");
    a.iter_mut().for_each(|v| *v = dist.sample(rng));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_scale_shape_trace() {
        let net = Network::new(MultiscaleConfig::desk_scale()).unwrap();
        assert_eq!(net.paths().len(), 3);
        assert_eq!(net.paths()[1].input, Shape::new(3, 16, 16));
        assert_eq!(net.paths()[2].input, Shape::new(3, 8, 8));
        let params = net.init_params(1);
        let x = vec![0.5; 3 * 32 * 32];
        let e = net.embed(&params, &x).unwrap();
        assert_eq!(e.len(), 32);
    }

    #[test]
    fn path_outputs_are_unit_norm() {
        let net = Network::new(MultiscaleConfig::desk_scale()).unwrap();
        let params = net.init_params(3);
        let x: Vec<f64> = (0..3 * 32 * 32).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let cache = net.forward_infer(&params, &x).unwrap();
        for out in cache.path_outputs() {
            let n = layers::dot(out, out).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_configs_fail_at_construction() {
        let mut cfg = MultiscaleConfig::desk_scale();
        cfg.paths[2].downsample = 3;
        assert!(Network::new(cfg).is_err());
        let mut cfg = MultiscaleConfig::desk_scale();
        cfg.paths[0].layers.insert(0, LayerSpec::MaxPool { window: 64, stride: 1 });
        assert!(Network::new(cfg).is_err());
        let mut cfg = MultiscaleConfig::desk_scale();
        cfg.paths.clear();
        assert!(Network::new(cfg).is_err());
    }

    #[test]
    fn single_l2_path_with_identity_combine_has_unit_output() {
        let cfg = MultiscaleConfig {
            input: Shape::new(4, 1, 1),
            embedding_dim: 4,
            paths: vec![PathSpec {
                downsample: 1,
                layers: vec![LayerSpec::L2Normalize],
            }],
        };
        let net = Network::new(cfg).unwrap();
        let mut params = net.zero_params();
        let (w, _) = net.combine_arrays();
        for i in 0..4 {
            params.arrays_mut()[w][i * 4 + i] = 1.0;
        }
        let e = net.embed(&params, &[0.3, 0.1, 0.9, 0.4]).unwrap();
        let norm = layers::dot(&e, &e).sqrt();
        assert!((norm - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dropout_free_train_equals_infer() {
        let mut cfg = MultiscaleConfig::tiny(Shape::new(3, 16, 16));
        for p in &mut cfg.paths {
            for l in &mut p.layers {
                if let LayerSpec::Dropout { keep } = l {
                    *keep = 1.0;
                }
            }
        }
        let net = Network::new(cfg).unwrap();
        let params = net.init_params(5);
        let x: Vec<f64> = (0..768).map(|i| (i % 7) as f64 / 7.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = net.forward_train(&params, &x, &mut rng).unwrap().embedding;
        let b = net.embed(&params, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stale_cache_rejected_and_backward_is_pure() {
        let net = Network::new(MultiscaleConfig::tiny(Shape::new(3, 16, 16))).unwrap();
        let mut params = net.init_params(2);
        let x: Vec<f64> = (0..768).map(|i| (i % 5) as f64 / 5.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cache = net.forward_train(&params, &x, &mut rng).unwrap();
        let g: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let a = net.backward(&params, &cache, &g).unwrap();
        let b = net.backward(&params, &cache, &g).unwrap();
        assert_eq!(a.arrays(), b.arrays());

        let zero = net.backward(&params, &cache, &[0.0; 6]).unwrap();
        assert!(zero.arrays().iter().flatten().all(|v| *v == 0.0));

        params.arrays_mut()[0][0] += 1.0;
        assert!(net.backward(&params, &cache, &g).is_err());
        let other = params.clone();
        assert!(net.backward(&other, &cache, &g).is_err());
    }

    #[test]
    fn flat_view_round_trips() {
        let net = Network::new(MultiscaleConfig::tiny(Shape::new(3, 16, 16))).unwrap();
        let params = net.init_params(2);
        let flat = params.to_flat();
        let mut other = net.zero_params();
        other.set_flat(&flat).unwrap();
        assert_eq!(other.arrays(), params.arrays());
        let (a, off) = params.locate(flat.len() - 1).unwrap();
        assert_eq!(a, params.num_arrays() - 1);
        assert_eq!(off, params.arrays()[a].len() - 1);
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = MultiscaleConfig::desk_scale();
        let text = cfg.to_toml();
        assert_eq!(MultiscaleConfig::from_toml(&text).unwrap(), cfg);
    }
}
