//! Momentum SGD over triplet batches: a deterministic single-worker loop, an
//! asynchronous multi-worker loop sharing one parameter store, and softmax
//! pretraining of the full-resolution path.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::Instant;

use parking_lot::{Mutex, RwLock};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{CategoryId, Dataset, ImageId, Shape, Triplet};
use crate::error::{Error, Result};
use crate::net::{Network, NetworkParams};
use crate::rankloss::{self, LossConfig};
use crate::sampler::{SamplerConfig, SamplerReport, SamplingMode, TripletSampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Momentum used by [`train_async`] when set. Stale snapshots already behave like
    /// extra momentum, so asynchronous runs usually want less.
    pub async_momentum: Option<f64>,
    /// Triplets per update.
    pub batch_size: usize,
    pub workers: usize,
    /// Total number of triplets drawn.
    pub budget: u64,
    pub seed: u64,
    /// Largest pixel shift used for augmentation, per axis.
    pub max_shift: usize,
    /// Updates between log records.
    pub log_interval: u64,
    /// Size of the frozen probe batch whose loss is logged; 0 disables it.
    pub probe_size: usize,
    pub sampling: SamplingMode,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            async_momentum: None,
            batch_size: 8,
            workers: 1,
            budget: 200_000,
            seed: 0,
            max_shift: 0,
            log_interval: 100,
            probe_size: 64,
            sampling: SamplingMode::Weighted,
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.learning_rate, self.momentum, self.loss.gap, self.loss.lambda];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("training parameters must be finite".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.async_momentum.is_some_and(|m| !(0.0..1.0).contains(&m)) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.workers == 0 || self.log_interval == 0 {
            return Err(Error::Config("batch size, workers and log interval must be at least 1".into()));
        }
        if self.loss.gap < 0.0 || self.loss.lambda < 0.0 {
            return Err(Error::Config("gap and lambda must be nonnegative".into()));
        }
        self.sampler.validate()
    }
}

/// Momentum buffers, one per parameter array.
#[derive(Debug, Clone)]
pub struct VelocityState {
    pub arrays: Vec<Vec<f64>>,
}

impl VelocityState {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            arrays: params.arrays().iter().map(|a| vec![0.0; a.len()]).collect(),
        }
    }

    /// `params + μ·velocity`, where the caller evaluates the gradient.
    pub fn lookahead(&self, params: &NetworkParams, momentum: f64) -> NetworkParams {
        let mut out = params.clone();
        for (w, v) in out.arrays_mut().iter_mut().zip(&self.arrays) {
            w.iter_mut().zip(v).for_each(|(w, v)| *w += momentum * v);
        }
        out
    }
}

/// `v ← μv − εg; w ← w + v`. On a non-finite gradient nothing is changed and an
/// error naming the array is returned.
pub fn momentum_step(
    params: &mut NetworkParams,
    velocity: &mut VelocityState,
    grads: &NetworkParams,
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    let layout_ok = params.same_layout(grads)
        && velocity.arrays.len() == params.num_arrays()
        && velocity.arrays.iter().zip(params.arrays()).all(|(v, w)| v.len() == w.len());
    if !layout_ok {
        return Err(Error::DimMismatch("parameters, velocity and gradients differ in layout".into()));
    }
    if let Some(a) = grads.arrays().iter().position(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFiniteGradient(grads.names()[a].clone()));
    }
    for ((w, v), g) in params.arrays_mut().iter_mut().zip(&mut velocity.arrays).zip(grads.arrays()) {
        apply_momentum(w, v, g, learning_rate, momentum);
    }
    Ok(())
}

fn apply_momentum(w: &mut [f64], v: &mut [f64], g: &[f64], learning_rate: f64, momentum: f64) {
    for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = momentum * *v - learning_rate * g;
        *w += *v;
    }
}

/// Translates every channel by `(dx, dy)`; vacated pixels become 0.
pub fn pixel_shift(x: &[f64], shape: Shape, dx: isize, dy: isize) -> Vec<f64> {
    let (h, w) = (shape.height as isize, shape.width as isize);
    let mut out = vec![0.0; x.len()];
    for c in 0..shape.channels {
        let base = c * shape.plane();
        for y in 0..h {
            let sy = y - dy;
            if sy < 0 || sy >= h {
                continue;
            }
            for xx in 0..w {
                let sx = xx - dx;
                if sx < 0 || sx >= w {
                    continue;
                }
                out[base + (y * w + xx) as usize] = x[base + (sy * w + sx) as usize];
            }
        }
    }
    out
}

/// Shift by an offset drawn uniformly from `[-s, s]²`. Returns the tensor and offset.
pub fn random_pixel_shift<R: Rng + ?Sized>(
    x: &[f64],
    shape: Shape,
    max_shift: usize,
    rng: &mut R,
) -> (Vec<f64>, (isize, isize)) {
    if max_shift == 0 {
        return (x.to_vec(), (0, 0));
    }
    let s = max_shift as i64;
    let dx = rng.random_range(-s..=s) as isize;
    let dy = rng.random_range(-s..=s) as isize;
    (pixel_shift(x, shape, dx, dy), (dx, dy))
}

fn tensor_f64(dataset: &Dataset, id: ImageId) -> Result<Vec<f64>> {
    Ok(dataset.get(id)?.tensor.iter().map(|&v| v as f64).collect())
}

/// Gradient of one batch's objective: mean triplet hinge plus `λ‖W‖²`.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: f64,
    pub active: usize,
    pub grads: NetworkParams,
    /// Snapshot identity read by every forward pass, in order.
    pub stamps: Vec<(u64, u64)>,
}

/// Runs the three shared-parameter forward passes for every triplet in training mode,
/// then backpropagates the hinge gradient through each.
pub fn batch_gradient(
    network: &Network,
    params: &NetworkParams,
    dataset: &Dataset,
    batch: &[Triplet],
    loss: &LossConfig,
    max_shift: usize,
    rng: &mut dyn RngCore,
) -> Result<BatchGradient> {
    let mut grads = network.zero_params();
    let mut stamps = Vec::with_capacity(3 * batch.len());
    let mut total = 0.0;
    let mut active = 0;
    let scale = 1.0 / batch.len().max(1) as f64;
    let shape = network.input_shape();
    for t in batch {
        let mut caches = Vec::with_capacity(3);
        for id in [t.query, t.positive, t.negative] {
            let x = tensor_f64(dataset, id)?;
            let (x, _) = random_pixel_shift(&x, shape, max_shift, rng);
            let cache = network.forward_train(params, &x, rng)?;
            stamps.push(cache.stamp());
            caches.push(cache);
        }
        let g = rankloss::loss_grad(&caches[0].embedding, &caches[1].embedding, &caches[2].embedding, loss.gap)?;
        total += g.loss;
        if g.is_active() {
            active += 1;
            for (cache, ge) in caches.iter().zip([&g.query, &g.positive, &g.negative]) {
                let ge: Vec<f64> = ge.iter().map(|v| v * scale).collect();
                network.backward_into(params, cache, &ge, &mut grads)?;
            }
        }
    }
    if loss.lambda > 0.0 {
        grads.add_scaled(params, 2.0 * loss.lambda);
    }
    Ok(BatchGradient {
        loss: total * scale + loss.lambda * params.squared_norm(),
        active,
        grads,
        stamps,
    })
}

/// Mean hinge over a fixed triplet set in inference mode.
pub fn probe_loss(network: &Network, params: &NetworkParams, dataset: &Dataset, probe: &[Triplet], gap: f64) -> Result<f64> {
    let mut total = 0.0;
    for t in probe {
        let e: Vec<Vec<f64>> = [t.query, t.positive, t.negative]
            .iter()
            .map(|&id| network.embed(params, &tensor_f64(dataset, id)?))
            .collect::<Result<_>>()?;
        total += rankloss::triplet_hinge(
            rankloss::squared_distance(&e[0], &e[1])?,
            rankloss::squared_distance(&e[0], &e[2])?,
            gap,
        );
    }
    Ok(total / probe.len().max(1) as f64)
}

/// Consecutive discarded attempts after which the sampler is declared starved.
const STARVATION_LIMIT: u64 = 10_000;

/// Streams the dataset through the sampler buffers and draws triplets. Each pass
/// empties the buffers, inserts all images in a fresh random order and then yields
/// as many triplets as the dataset has images.
pub struct TripletStream<'a> {
    dataset: &'a Dataset,
    sampler: TripletSampler,
    ids: Vec<ImageId>,
    rng: ChaCha8Rng,
    left_in_pass: usize,
}

impl<'a> TripletStream<'a> {
    pub fn new(dataset: &'a Dataset, config: SamplerConfig, mode: SamplingMode, seed: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Sampler("dataset is empty".into()));
        }
        Ok(Self {
            dataset,
            sampler: TripletSampler::new(config)?.with_mode(mode),
            ids: dataset.images().iter().map(|i| i.id).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            left_in_pass: 0,
        })
    }

    pub fn sampler(&self) -> &TripletSampler {
        &self.sampler
    }

    fn refill(&mut self) -> Result<()> {
        self.sampler.reset_buffers();
        self.ids.shuffle(&mut self.rng);
        for &id in &self.ids {
            self.sampler.observe(self.dataset, id, &mut self.rng)?;
        }
        self.left_in_pass = self.ids.len();
        Ok(())
    }

    pub fn next_triplet(&mut self) -> Result<Triplet> {
        if self.left_in_pass == 0 {
            self.refill()?;
        }
        let mut failures = 0;
        loop {
            match self.sampler.sample_triplet(self.dataset.relevance(), &mut self.rng) {
                Ok(t) => {
                    self.left_in_pass -= 1;
                    return Ok(t);
                }
                Err(reason) => {
                    failures += 1;
                    if failures >= STARVATION_LIMIT {
                        return Err(Error::Sampler(format!(
                            "starved: {failures} consecutive discarded attempts, last reason {reason:?}"
                        )));
                    }
                }
            }
        }
    }

    pub fn next_batch(&mut self, n: usize) -> Result<Vec<Triplet>> {
        (0..n).map(|_| self.next_triplet()).collect()
    }
}

/// Derives independent stream seeds from the run seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub triplets: u64,
    /// Mean batch objective over the interval.
    pub loss: f64,
    pub active_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_loss: Option<f64>,
    pub wall_ms: u64,
    pub sampler: SamplerReport,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub network: Network,
    pub params: NetworkParams,
    pub log: Vec<LogRecord>,
    pub steps: u64,
    pub triplets: u64,
    /// Updates dropped because of a non-finite gradient.
    pub skipped_steps: u64,
    /// Updates committed by each worker.
    pub worker_steps: Vec<u64>,
    pub wall_ms: u64,
}

#[derive(Default)]
struct Interval {
    loss: f64,
    batches: u64,
    active: u64,
    triplets: u64,
}

impl Interval {
    fn add(&mut self, g: &BatchGradient, n: usize) {
        self.loss += g.loss;
        self.batches += 1;
        self.active += g.active as u64;
        self.triplets += n as u64;
    }

    fn take(&mut self) -> (f64, f64) {
        let out = (
            self.loss / self.batches.max(1) as f64,
            self.active as f64 / self.triplets.max(1) as f64,
        );
        *self = Interval::default();
        out
    }
}

fn probe_set(dataset: &Dataset, config: &TrainConfig) -> Result<Vec<Triplet>> {
    if config.probe_size == 0 {
        return Ok(Vec::new());
    }
    let mut stream = TripletStream::new(dataset, config.sampler.clone(), config.sampling, sub_seed(config.seed, 3))?;
    stream.next_batch(config.probe_size)
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        e @ Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN, cause: e.to_string() },
        other => other,
    }
}

/// Deterministic single-worker training; identical inputs give identical parameter bytes.
pub fn train(dataset: &Dataset, network: &Network, init: NetworkParams, config: &TrainConfig) -> Result<TrainedModel> {
    train_with(dataset, network, init, config, &mut |_, _| Ok(()))
}

/// [`train`] with an observer called after every log record, e.g. to write the log
/// line and a periodic checkpoint.
pub fn train_with(
    dataset: &Dataset,
    network: &Network,
    init: NetworkParams,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&LogRecord, &NetworkParams) -> Result<()>,
) -> Result<TrainedModel> {
    config.validate()?;
    if !init.same_layout(&network.zero_params()) {
        return Err(Error::Network("initial parameters do not match the network".into()));
    }
    let start = Instant::now();
    let mut stream = TripletStream::new(dataset, config.sampler.clone(), config.sampling, sub_seed(config.seed, 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, 2));
    let probe = probe_set(dataset, config)?;
    let mut params = init;
    let mut velocity = VelocityState::zeros_like(&params);
    let mut log = Vec::new();
    let mut interval = Interval::default();
    let (mut step, mut triplets, mut skipped) = (0u64, 0u64, 0u64);
    while triplets < config.budget {
        let n = (config.budget - triplets).min(config.batch_size as u64) as usize;
        let batch = stream.next_batch(n)?;
        triplets += n as u64;
        let ahead = velocity.lookahead(&params, config.momentum);
        let g = batch_gradient(network, &ahead, dataset, &batch, &config.loss, config.max_shift, &mut rng)
            .map_err(|e| diverged(step, e))?;
        if !g.loss.is_finite() {
            return Err(Error::Diverged { step, loss: g.loss, cause: "non-finite batch loss".into() });
        }
        match momentum_step(&mut params, &mut velocity, &g.grads, config.learning_rate, config.momentum) {
            Ok(()) => step += 1,
            Err(Error::NonFiniteGradient(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
        interval.add(&g, n);
        if step % config.log_interval == 0 || triplets >= config.budget {
            let (loss, active_fraction) = interval.take();
            let record = LogRecord {
                step,
                triplets,
                loss,
                active_fraction,
                probe_loss: if probe.is_empty() {
                    None
                } else {
                    Some(probe_loss(network, &params, dataset, &probe, config.loss.gap)?)
                },
                wall_ms: start.elapsed().as_millis() as u64,
                sampler: stream.sampler().report(),
            };
            observer(&record, &params)?;
            log.push(record);
        }
    }
    Ok(TrainedModel {
        network: network.clone(),
        params,
        log,
        steps: step,
        triplets,
        skipped_steps: skipped,
        worker_steps: vec![step],
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

struct Slot {
    w: Vec<f64>,
    v: Vec<f64>,
}

/// Asynchronous training: `config.workers` threads pull batches from a bounded queue
/// filled by one feeder thread that owns the sampler. Each worker reads the shared
/// store array by array, computes the batch gradient at the lookahead point and
/// commits `v ← μv − εg; w ← w + v` under each array's write lock. Snapshots may mix
/// versions across arrays.
pub fn train_async(dataset: &Dataset, network: &Network, init: NetworkParams, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    if !init.same_layout(&network.zero_params()) {
        return Err(Error::Network("initial parameters do not match the network".into()));
    }
    let start = Instant::now();
    let workers = config.workers;
    let momentum = config.async_momentum.unwrap_or(config.momentum);
    let store: Vec<RwLock<Slot>> = init
        .arrays()
        .iter()
        .map(|a| RwLock::new(Slot { w: a.clone(), v: vec![0.0; a.len()] }))
        .collect();
    let commits = AtomicU64::new(0);
    let skipped = AtomicU64::new(0);
    let abort = AtomicBool::new(false);
    let report: Mutex<Option<SamplerReport>> = Mutex::new(None);
    let log: Mutex<(Interval, Vec<LogRecord>)> = Mutex::new((Interval::default(), Vec::new()));
    let (tx, rx) = crossbeam_channel::bounded::<Vec<Triplet>>(2 * workers);
    let mut stream = TripletStream::new(dataset, config.sampler.clone(), config.sampling, sub_seed(config.seed, 1))?;

    let (feed_result, worker_results) = std::thread::scope(|scope| {
        let feeder = scope.spawn(|| -> Result<u64> {
            let mut sent = 0u64;
            while sent < config.budget && !abort.load(Ordering::Acquire) {
                let n = (config.budget - sent).min(config.batch_size as u64) as usize;
                let batch = stream.next_batch(n)?;
                *report.lock() = Some(stream.sampler().report());
                if tx.send(batch).is_err() {
                    break;
                }
                sent += n as u64;
            }
            drop(tx);
            Ok(sent)
        });
        let handles: Vec<_> = (0..workers)
            .map(|k| {
                let rx = rx.clone();
                let (store, commits, skipped, abort, log, report) = (&store, &commits, &skipped, &abort, &log, &report);
                let init = &init;
                scope.spawn(move || -> Result<u64> {
                    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, 100 + k as u64));
                    let mut local = init.clone();
                    let mut mine = 0u64;
                    while let Ok(batch) = rx.recv() {
                        for (a, dst) in local.arrays_mut().iter_mut().enumerate() {
                            let slot = store[a].read();
                            for ((d, w), v) in dst.iter_mut().zip(&slot.w).zip(&slot.v) {
                                *d = w + momentum * v;
                            }
                        }
                        let step = commits.load(Ordering::Relaxed);
                        let g = match batch_gradient(network, &local, dataset, &batch, &config.loss, config.max_shift, &mut rng) {
                            Ok(g) if g.loss.is_finite() => g,
                            Ok(g) => {
                                abort.store(true, Ordering::Release);
                                return Err(Error::Diverged { step, loss: g.loss, cause: "non-finite batch loss".into() });
                            }
                            Err(e) => {
                                abort.store(true, Ordering::Release);
                                return Err(diverged(step, e));
                            }
                        };
                        if !g.grads.is_finite() {
                            skipped.fetch_add(1, Ordering::Relaxed);
                            continue;
                        }
                        for (slot, gr) in store.iter().zip(g.grads.arrays()) {
                            let mut slot = slot.write();
                            let Slot { w, v } = &mut *slot;
                            apply_momentum(w, v, gr, config.learning_rate, momentum);
                        }
                        let done = commits.fetch_add(1, Ordering::AcqRel) + 1;
                        mine += 1;
                        let mut guard = log.lock();
                        let (interval, records) = &mut *guard;
                        interval.add(&g, batch.len());
                        if done % config.log_interval == 0 {
                            let (loss, active_fraction) = interval.take();
                            records.push(LogRecord {
                                step: done,
                                triplets: done * config.batch_size as u64,
                                loss,
                                active_fraction,
                                probe_loss: None,
                                wall_ms: start.elapsed().as_millis() as u64,
                                sampler: report.lock().clone().expect("feeder reports before sending"),
                            });
                        }
                    }
                    Ok(mine)
                })
            })
            .collect();
        drop(rx);
        let feed = feeder.join().expect("feeder thread panicked");
        let results: Vec<Result<u64>> = handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect();
        (feed, results)
    });

    let worker_steps = worker_results.into_iter().collect::<Result<Vec<u64>>>()?;
    let triplets = feed_result?;
    let mut params = init;
    for (dst, slot) in params.arrays_mut().iter_mut().zip(store) {
        *dst = slot.into_inner().w;
    }
    let (_, mut log) = log.into_inner();
    log.sort_by_key(|r| r.step);
    let steps = commits.into_inner();
    debug_assert_eq!(steps, worker_steps.iter().sum::<u64>());
    Ok(TrainedModel {
        network: network.clone(),
        params,
        log,
        steps,
        triplets,
        skipped_steps: skipped.into_inner(),
        worker_steps,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 8,
            max_shift: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch.
    pub cross_entropy: f64,
    pub train_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub classes: usize,
    /// Cross-entropy of the uniform predictor, `ln C`.
    pub uniform_cross_entropy: f64,
    pub epochs: Vec<PretrainEpoch>,
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

/// Trains path 0 under a temporary softmax classifier on the category labels and
/// returns `params` with that path's arrays replaced. The classifier is discarded.
pub fn pretrain_softmax(
    dataset: &Dataset,
    heldout: Option<&Dataset>,
    network: &Network,
    params: NetworkParams,
    config: &PretrainConfig,
) -> Result<(NetworkParams, PretrainReport)> {
    let categories: Vec<CategoryId> = dataset.by_category().into_keys().collect();
    if categories.len() < 2 {
        return Err(Error::Config("softmax pretraining needs at least two categories".into()));
    }
    if config.batch_size == 0 || !(0.0..1.0).contains(&config.momentum) || config.learning_rate <= 0.0 {
        return Err(Error::Config("invalid pretraining optimizer settings".into()));
    }
    let class_of: BTreeMap<CategoryId, usize> = categories.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let n_classes = categories.len();
    let feat = network.paths()[0].output_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, 4));
    let normal = Normal::new(0.0, (1.0 / feat as f64).sqrt()).expect("finite std");
    let head_w: Vec<f64> = (0..n_classes * feat).map(|_| normal.sample(&mut rng)).collect();
    let mut head = NetworkParams::new(
        vec!["head.weights".into(), "head.bias".into()],
        vec![head_w, vec![0.0; n_classes]],
    );
    let mut head_v = VelocityState::zeros_like(&head);
    let mut params = params;
    let mut velocity = VelocityState::zeros_like(&params);
    let owned = network.path_arrays(0);
    let shape = network.input_shape();
    let mut order: Vec<ImageId> = dataset.images().iter().map(|i| i.id).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut ce_total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let ahead = velocity.lookahead(&params, config.momentum);
            let head_ahead = head_v.lookahead(&head, config.momentum);
            let mut grads = network.zero_params();
            let mut head_g = head.zeros_like();
            let scale = 1.0 / chunk.len() as f64;
            for &id in chunk {
                let x = tensor_f64(dataset, id)?;
                let (x, _) = random_pixel_shift(&x, shape, config.max_shift, &mut rng);
                let cache = network.forward_path(&ahead, 0, &x, Some(&mut rng))?;
                let h = cache.output();
                let hw = &head_ahead.arrays()[0];
                let mut p: Vec<f64> = (0..n_classes)
                    .map(|k| head_ahead.arrays()[1][k] + crate::net::layers::dot(&hw[k * feat..(k + 1) * feat], h))
                    .collect();
                softmax_in_place(&mut p);
                let y = class_of[&dataset.category_of(id)?];
                ce_total += -p[y].max(f64::MIN_POSITIVE).ln();
                p[y] -= 1.0;
                let mut gh = vec![0.0; feat];
                {
                    let ga = head_g.arrays_mut();
                    for k in 0..n_classes {
                        let gk = p[k] * scale;
                        ga[1][k] += gk;
                        for i in 0..feat {
                            ga[0][k * feat + i] += gk * h[i];
                            gh[i] += gk * hw[k * feat + i];
                        }
                    }
                }
                network.backward_path_into(&ahead, &cache, &gh, &mut grads)?;
            }
            // only the pretrained path moves
            let mut masked = grads.zeros_like();
            for &a in &owned {
                masked.arrays_mut()[a].copy_from_slice(&grads.arrays()[a]);
            }
            momentum_step(&mut params, &mut velocity, &masked, config.learning_rate, config.momentum)?;
            momentum_step(&mut head, &mut head_v, &head_g, config.learning_rate, config.momentum)?;
        }
        let accuracy = |d: &Dataset| -> Result<f64> {
            let mut correct = 0usize;
            let mut total = 0usize;
            for img in d.images() {
                let Some(&y) = class_of.get(&img.category) else { continue };
                let x: Vec<f64> = img.tensor.iter().map(|&v| v as f64).collect();
                let cache = network.forward_path::<ChaCha8Rng>(&params, 0, &x, None)?;
                let h = cache.output();
                let hw = &head.arrays()[0];
                let best = (0..n_classes)
                    .map(|k| head.arrays()[1][k] + crate::net::layers::dot(&hw[k * feat..(k + 1) * feat], h))
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(k, _)| k)
                    .unwrap();
                correct += (best == y) as usize;
                total += 1;
            }
            Ok(correct as f64 / total.max(1) as f64)
        };
        epochs.push(PretrainEpoch {
            epoch: epoch + 1,
            cross_entropy: ce_total / order.len() as f64,
            train_accuracy: accuracy(dataset)?,
            heldout_accuracy: heldout.map(accuracy).transpose()?,
        });
    }
    Ok((
        params,
        PretrainReport {
            classes: n_classes,
            uniform_cross_entropy: (n_classes as f64).ln(),
            epochs,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn scalar(w: f64) -> NetworkParams {
        NetworkParams::new(vec!["w".into()], vec![vec![w]])
    }

    #[test]
    fn nesterov_recurrence_by_hand() {
        let mut w = scalar(1.0);
        let mut v = VelocityState::zeros_like(&w);
        let g = scalar(1.0);
        momentum_step(&mut w, &mut v, &g, 0.1, 0.9).unwrap();
        assert!((v.arrays[0][0] + 0.1).abs() < 1e-15);
        assert!((w.arrays()[0][0] - 0.9).abs() < 1e-15);
        momentum_step(&mut w, &mut v, &g, 0.1, 0.9).unwrap();
        assert!((v.arrays[0][0] + 0.19).abs() < 1e-15);
        assert!((w.arrays()[0][0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_plain_sgd_and_zero_gradient_decays_velocity() {
        let mut w = scalar(2.0);
        let mut v = VelocityState::zeros_like(&w);
        momentum_step(&mut w, &mut v, &scalar(3.0), 0.5, 0.0).unwrap();
        assert_eq!(w.arrays()[0][0], 0.5);

        let mut w = scalar(0.0);
        let mut v = VelocityState { arrays: vec![vec![1.0]] };
        for k in 1..=5 {
            momentum_step(&mut w, &mut v, &scalar(0.0), 0.1, 0.5).unwrap();
            assert_eq!(v.arrays[0][0], 0.5f64.powi(k));
        }
    }

    #[test]
    fn bad_gradients_leave_state_untouched() {
        let mut w = scalar(1.0);
        let mut v = VelocityState { arrays: vec![vec![0.3]] };
        let err = momentum_step(&mut w, &mut v, &scalar(f64::NAN), 0.1, 0.9).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(_)));
        assert_eq!((w.arrays()[0][0], v.arrays[0][0]), (1.0, 0.3));
        let wrong = NetworkParams::new(vec!["w".into()], vec![vec![1.0, 2.0]]);
        assert!(matches!(momentum_step(&mut w, &mut v, &wrong, 0.1, 0.9), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn shift_zero_is_identity() {
        let shape = Shape::new(2, 5, 4);
        let x: Vec<f64> = (0..shape.len()).map(|i| i as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_pixel_shift(&x, shape, 0, &mut rng), (x.clone(), (0, 0)));
        assert_eq!(pixel_shift(&x, shape, 0, 0), x);
    }

    #[test]
    fn shift_moves_content() {
        let shape = Shape::new(1, 3, 3);
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(pixel_shift(&x, shape, 1, 0), vec![0.0, 1.0, 2.0, 0.0, 4.0, 5.0, 0.0, 7.0, 8.0]);
        assert_eq!(pixel_shift(&x, shape, 0, -1), vec![4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn shift_offsets_are_uniform() {
        let shape = Shape::new(1, 8, 8);
        let x = vec![1.0; shape.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = BTreeMap::new();
        let n = 10_000;
        for _ in 0..n {
            let (_, off) = random_pixel_shift(&x, shape, 2, &mut rng);
            *counts.entry(off).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 25);
        for (off, c) in counts {
            let f = c as f64 / n as f64;
            assert!((f - 1.0 / 25.0).abs() <= 0.01, "{off:?}: {f}");
        }
    }

    proptest! {
        #[test]
        fn shifted_values_come_from_input_or_zero(
            seed in any::<u64>(), h in 3usize..9, w in 3usize..9, s in 0usize..3
        ) {
            let shape = Shape::new(2, h, w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(0.1..1.0)).collect();
            let (y, _) = random_pixel_shift(&x, shape, s, &mut rng);
            prop_assert_eq!(y.len(), x.len());
            for v in y {
                prop_assert!(v == 0.0 || x.contains(&v));
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { async_momentum: Some(-0.1), ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { workers: 0, ..Default::default() },
            TrainConfig { learning_rate: f64::NAN, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn softmax_is_a_distribution() {
        let mut z = vec![1000.0, 1001.0, 999.0];
        softmax_in_place(&mut z);
        assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(z[1] > z[0] && z[0] > z[2]);
    }
}
