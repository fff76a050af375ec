//! Central finite-difference checks of the analytic gradients.
//!
//! ReLU and max pooling make the loss piecewise smooth. A probe whose ±step
//! evaluations land on a different linear piece than the base point (a changed ReLU
//! pattern, max-pool winner or hinge state) is retried with the fallback steps and
//! counted as a kink if every step crosses.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::{self, Activation, Layer, LayerCache, LayerSpec};
use super::{ForwardCache, Network, NetworkParams};
use crate::dataset::Shape;
use crate::error::Result;
use crate::rankloss::{self, LossConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Smaller steps tried, in order, when the main step crosses a kink.
    pub fallback_steps: Vec<f64>,
    pub tolerance: f64,
    /// Denominator floor for the relative error of near-zero gradients.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            fallback_steps: vec![1e-4, 1e-5, 1e-6],
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

impl GradCheckConfig {
    pub fn relative_error(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub target: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub step: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub kinks: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradSample>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.kinks += other.kinks;
        self.failures += other.failures;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }

    fn record(&mut self, sample: GradSample, tolerance: f64) {
        self.checked += 1;
        if sample.rel_error > tolerance {
            self.failures += 1;
        }
        if self.worst.is_none() || sample.rel_error > self.max_rel_error {
            self.max_rel_error = sample.rel_error;
            self.worst = Some(sample);
        }
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} checked, {} failed, {} kinks skipped, max rel error {:.2e}",
            self.checked, self.failures, self.kinks, self.max_rel_error
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                " at {}[{}] (analytic {:.6e}, numeric {:.6e}, step {:.0e})",
                w.target, w.index, w.analytic, w.numeric, w.step
            )?;
        }
        Ok(())
    }
}

/// Probes one coordinate. `eval(delta)` returns the loss and the piece signature with
/// the coordinate moved by `delta`.
///
/// Central differences starting at the configured step are refined by Ridders'
/// extrapolation (step shrunk by 1.4 per stage), which cancels the truncation error
/// that a fixed step leaves in regions of high curvature.
fn probe(
    cfg: &GradCheckConfig,
    base_sig: u64,
    mut eval: impl FnMut(f64) -> (f64, u64),
) -> Option<(f64, f64)> {
    const CON: f64 = 1.4;
    const NTAB: usize = 8;
    let mut central = |h: f64| {
        let (up, sig_up) = eval(h);
        let (down, sig_down) = eval(-h);
        (sig_up == base_sig && sig_down == base_sig).then(|| (up - down) / (2.0 * h))
    };
    'steps: for &h0 in std::iter::once(&cfg.step).chain(&cfg.fallback_steps) {
        let mut table = [[0.0f64; NTAB]; NTAB];
        let mut h = h0;
        let Some(first) = central(h) else { continue };
        table[0][0] = first;
        let mut best = first;
        let mut err = f64::INFINITY;
        for i in 1..NTAB {
            h /= CON;
            let Some(d) = central(h) else { continue 'steps };
            table[0][i] = d;
            let mut fac = CON * CON;
            for j in 1..=i {
                table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
                fac *= CON * CON;
                let e = (table[j][i] - table[j - 1][i])
                    .abs()
                    .max((table[j][i] - table[j - 1][i - 1]).abs());
                if e <= err {
                    err = e;
                    best = table[j][i];
                }
            }
            if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
                break;
            }
        }
        return Some((best, h0));
    }
    None
}

fn hash_layer(layer: &Layer, y: &[f64], cache: &LayerCache, h: &mut DefaultHasher) {
    match (&layer.spec, cache) {
        (LayerSpec::Conv { activation: Activation::Relu, .. }, _)
        | (LayerSpec::FullyConnected { activation: Activation::Relu, .. }, _) => {
            for v in y {
                (*v > 0.0).hash(h);
            }
        }
        (_, LayerCache::MaxPool { argmax }) => argmax.hash(h),
        _ => {}
    }
}

fn random_vec(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Checks one layer in isolation under the loss `Σ r_i y_i` with a random `r`, for
/// the input gradient and both parameter arrays.
pub fn check_layer(
    spec: LayerSpec,
    input: Shape,
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (layer, sizes) = Layer::new(spec, input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..input.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (mut w, mut b) = match sizes {
        Some((nw, nb)) => (random_vec(nw, 0.5, &mut rng), random_vec(nb, 0.5, &mut rng)),
        None => (Vec::new(), Vec::new()),
    };
    let r = random_vec(layer.output.len(), 1.0, &mut rng);
    let mask_seed: u64 = rng.random();

    let run = |w: &[f64], b: &[f64], x: &[f64]| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let (y, cache) = layer.forward(w, b, x, Some(&mut mask_rng));
        let mut h = DefaultHasher::new();
        hash_layer(&layer, &y, &cache, &mut h);
        (y, cache, h.finish())
    };
    let (y, cache, base_sig) = run(&w, &b, &x);
    let grad = layer.backward(&w, &x, &y, &cache, &r);
    let loss = |y: &[f64]| layers::dot(&r, y);

    let mut report = GradCheckReport::default();
    let name = layer.spec.name();
    let mut xs = x.clone();
    for i in 0..xs.len() {
        let orig = xs[i];
        let res = probe(cfg, base_sig, |d| {
            xs[i] = orig + d;
            let (y, _, s) = run(&w, &b, &xs);
            xs[i] = orig;
            (loss(&y), s)
        });
        push(&mut report, cfg, format!("{name}.input"), i, grad.input[i], res);
    }
    for i in 0..w.len() {
        let orig = w[i];
        let res = probe(cfg, base_sig, |d| {
            w[i] = orig + d;
            let (y, _, s) = run(&w, &b, &x);
            w[i] = orig;
            (loss(&y), s)
        });
        push(&mut report, cfg, format!("{name}.weights"), i, grad.weights[i], res);
    }
    for i in 0..b.len() {
        let orig = b[i];
        let res = probe(cfg, base_sig, |d| {
            b[i] = orig + d;
            let (y, _, s) = run(&w, &b, &x);
            b[i] = orig;
            (loss(&y), s)
        });
        push(&mut report, cfg, format!("{name}.bias"), i, grad.bias[i], res);
    }
    Ok(report)
}

fn push(
    report: &mut GradCheckReport,
    cfg: &GradCheckConfig,
    target: String,
    index: usize,
    analytic: f64,
    res: Option<(f64, f64)>,
) {
    match res {
        Some((numeric, step)) => report.record(
            GradSample {
                target,
                index,
                analytic,
                numeric,
                step,
                rel_error: cfg.relative_error(analytic, numeric),
            },
            cfg.tolerance,
        ),
        None => report.kinks += 1,
    }
}

impl Network {
    /// Recomputes the embedding with path `path` rerun from layer `from` under the
    /// given parameters, reusing the cached dropout masks and the other paths' outputs.
    /// Also returns a hash of the ReLU patterns and max-pool winners of the rerun layers.
    fn replay(
        &self,
        params: &NetworkParams,
        base: &ForwardCache,
        path: Option<(usize, usize)>,
    ) -> (Vec<f64>, u64) {
        let arrays = &params.arrays;
        let mut h = DefaultHasher::new();
        let mut rerun = None;
        if let Some((p, from)) = path {
            let plan = &self.paths[p];
            let mut x = base.activations[p][from].clone();
            for (l, layer) in plan.layers.iter().enumerate().skip(from) {
                let (y, cache) = match (&layer.spec, &base.caches[p][l]) {
                    (LayerSpec::Dropout { .. }, LayerCache::Dropout { mask: Some(m) }) => (
                        x.iter().zip(m).map(|(a, b)| a * b).collect(),
                        LayerCache::None,
                    ),
                    _ => {
                        let (w, b): (&[f64], &[f64]) = match layer.params {
                            Some((w, b)) => (&arrays[w], &arrays[b]),
                            None => (&[], &[]),
                        };
                        layer.forward::<ChaCha8Rng>(w, b, &x, None)
                    }
                };
                hash_layer(layer, &y, &cache, &mut h);
                x = y;
            }
            let scale = 1.0 / layers::dot(&x, &x).sqrt().max(layers::NORM_FLOOR);
            x.iter_mut().for_each(|v| *v *= scale);
            rerun = Some((p, x));
        }
        let mut concat = Vec::with_capacity(self.concat_dim);
        for (p, out) in base.path_outputs.iter().enumerate() {
            match &rerun {
                Some((q, x)) if *q == p => concat.extend_from_slice(x),
                _ => concat.extend_from_slice(out),
            }
        }
        let (cw, cb) = self.combine;
        let n = self.concat_dim;
        let emb = (0..self.config.embedding_dim)
            .map(|o| arrays[cb][o] + layers::dot(&arrays[cw][o * n..(o + 1) * n], &concat))
            .collect();
        (emb, h.finish())
    }

    /// Path and first layer to rerun when array `a` changes; `None` for the combiner.
    fn owner_of(&self, a: usize) -> Option<(usize, usize)> {
        for (p, plan) in self.paths.iter().enumerate() {
            for (l, layer) in plan.layers.iter().enumerate() {
                if let Some((w, b)) = layer.params {
                    if a == w || a == b {
                        return Some((p, l));
                    }
                }
            }
        }
        None
    }
}

/// Checks every parameter of `network` under the regularized triplet objective
/// `hinge(f(q), f(p), f(n)) + λ‖W‖²`. With `dropout_seed` set, the three forward
/// passes run in training mode and the drawn masks stay fixed during probing.
pub fn check_network_triplet(
    network: &Network,
    params: &NetworkParams,
    images: [&[f64]; 3],
    loss: LossConfig,
    dropout_seed: Option<u64>,
    cfg: &GradCheckConfig,
) -> Result<(GradCheckReport, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed.unwrap_or(0));
    let mut caches = Vec::with_capacity(3);
    for x in images {
        caches.push(match dropout_seed {
            Some(_) => network.forward_train(params, x, &mut rng)?,
            None => network.forward_infer(params, x)?,
        });
    }
    let tg = rankloss::loss_grad(&caches[0].embedding, &caches[1].embedding, &caches[2].embedding, loss.gap)?;
    let mut grads = network.zero_params();
    for (cache, g) in caches.iter().zip([&tg.query, &tg.positive, &tg.negative]) {
        network.backward_into(params, cache, g, &mut grads)?;
    }
    grads.add_scaled(params, 2.0 * loss.lambda);

    let base_sigs: Vec<Vec<u64>> = (0..params.num_arrays())
        .map(|a| {
            let owner = network.owner_of(a);
            caches.iter().map(|c| network.replay(params, c, owner).1).collect()
        })
        .collect();
    let base_active = tg.is_active();

    let norm2 = params.squared_norm();
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for a in 0..params.num_arrays() {
        let owner = network.owner_of(a);
        let name = params.names()[a].clone();
        let base_sig = {
            let mut h = DefaultHasher::new();
            base_sigs[a].hash(&mut h);
            base_active.hash(&mut h);
            h.finish()
        };
        for i in 0..params.arrays[a].len() {
            let orig = params.arrays[a][i];
            let analytic = grads.arrays[a][i];
            let res = probe(cfg, base_sig, |d| {
                work.arrays[a][i] = orig + d;
                let mut sigs = Vec::with_capacity(3);
                let mut embs = Vec::with_capacity(3);
                for c in &caches {
                    let (e, s) = network.replay(&work, c, owner);
                    embs.push(e);
                    sigs.push(s);
                }
                let dp = rankloss::squared_distance(&embs[0], &embs[1]).unwrap();
                let dn = rankloss::squared_distance(&embs[0], &embs[2]).unwrap();
                let hinge = rankloss::triplet_hinge(dp, dn, loss.gap);
                let reg = loss.lambda * (norm2 - orig * orig + (orig + d) * (orig + d));
                work.arrays[a][i] = orig;
                let mut h = DefaultHasher::new();
                sigs.hash(&mut h);
                (loss.gap + dp - dn > 0.0).hash(&mut h);
                (hinge + reg, h.finish())
            });
            push(&mut report, cfg, name.clone(), i, analytic, res);
        }
    }
    Ok((report, base_active))
}

/// One isolated check per layer kind and activation, on small shapes.
pub fn check_all_layer_kinds(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<(String, GradCheckReport)>> {
    let shape = Shape::new(2, 6, 6);
    let cases = vec![
        ("conv relu".to_string(), LayerSpec::Conv { kernels: 3, size: 3, stride: 1, padding: None, activation: Activation::Relu }),
        ("conv identity stride 2".to_string(), LayerSpec::Conv { kernels: 2, size: 3, stride: 2, padding: Some(0), activation: Activation::Identity }),
        ("max pool".to_string(), LayerSpec::MaxPool { window: 2, stride: 2 }),
        ("overlapping max pool".to_string(), LayerSpec::MaxPool { window: 3, stride: 2 }),
        ("local norm".to_string(), LayerSpec::LocalNorm { window: 3, epsilon: layers::DEFAULT_LOCAL_NORM_EPSILON }),
        ("fully connected relu".to_string(), LayerSpec::FullyConnected { outputs: 4, activation: Activation::Relu }),
        ("fully connected identity".to_string(), LayerSpec::FullyConnected { outputs: 4, activation: Activation::Identity }),
        ("dropout".to_string(), LayerSpec::Dropout { keep: 0.6 }),
        ("l2 normalize".to_string(), LayerSpec::L2Normalize),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(k, (name, spec))| Ok((name, check_layer(spec, shape, seed + k as u64, cfg)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::MultiscaleConfig;

    fn image(shape: Shape, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..shape.len()).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn every_layer_kind_matches_finite_differences() {
        let cfg = GradCheckConfig::default();
        for (name, report) in check_all_layer_kinds(11, &cfg).unwrap() {
            assert!(report.passed(), "{name}: {report}");
            assert!(report.checked > 0, "{name}");
        }
    }

    #[test]
    fn tiny_network_through_triplet_objective() {
        let shape = Shape::new(3, 16, 16);
        let net = Network::new(MultiscaleConfig::tiny(shape)).unwrap();
        let params = net.init_params(3);
        let imgs: Vec<Vec<f64>> = (0..3).map(|k| image(shape, 100 + k)).collect();
        let loss = LossConfig { gap: 10.0, lambda: 0.001 };
        let cfg = GradCheckConfig::default();
        for seed in [None, Some(5)] {
            let (report, active) =
                check_network_triplet(&net, &params, [&imgs[0], &imgs[1], &imgs[2]], loss, seed, &cfg).unwrap();
            assert!(active);
            assert!(report.passed(), "{report}");
            assert_eq!(report.checked + report.kinks, params.num_values());
            assert!(report.kinks * 100 < params.num_values(), "{report}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let cfg = GradCheckConfig::default();
        let mut r = GradCheckReport::default();
        push(&mut r, &cfg, "x".into(), 0, 1.0, Some((1.001, 1e-3)));
        assert!(!r.passed());
    }
}
