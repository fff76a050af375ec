//! Command implementations behind the `deeprank` binary.
//!
//! Every parameter lives in [`RunConfig`]. Its flattened, dotted keys
//! (`train.learning_rate`, `gen.shape`, ...) are what config files and `--set`
//! overrides address. Each command writes a `run.json` manifest with the effective
//! config, the source of every key, the config hash and the crate version.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::datagen::{self, GenConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, EvalConfig, EvalReport, NetworkModel};
use crate::net::{io, MultiscaleConfig, Network, NetworkParams};
use crate::sampler::{SamplerReport, SamplingMode};
use crate::trainer::{self, LogRecord, PretrainConfig, TrainConfig, TripletStream};

pub const TRAIN_STEM: &str = "train";
pub const EVAL_STEM: &str = "eval";
pub const MANIFEST_FILE: &str = "run.json";

/// Options that belong to the command layer rather than to a library module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunOptions {
    /// Network config file; empty means the built-in desk-scale network.
    pub network: String,
    pub init_seed: u64,
    /// Run softmax pretraining of path 0 before the ranking phase.
    pub pretrain: bool,
    /// Log records between periodic checkpoints (single-worker training only).
    pub checkpoint_every: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            network: String::new(),
            init_seed: 1,
            pretrain: false,
            checkpoint_every: 10,
        }
    }
}

/// `sampler-stats` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    /// Triplets drawn for the diagnostics report and for each empirical fraction.
    pub triplets: u64,
    pub ratios: Vec<f64>,
    /// Training budget of each sweep run.
    pub sweep_budget: u64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            triplets: 20_000,
            ratios: vec![0.0, 0.2, 0.5, 0.8, 1.0],
            sweep_budget: 16_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunOptions,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalConfig,
    pub stats: StatsConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Flag,
}

/// The effective config plus the source of every key.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub sources: BTreeMap<String, Source>,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("config keys never nest under a leaf");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// Every config key with its default value, in key order.
pub fn default_keys() -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    flatten("", &serde_json::to_value(RunConfig::default()).expect("config serializes"), &mut out);
    out
}

/// Parses one override value. TOML literal syntax is accepted (`0.5`, `true`,
/// `[3, 16, 16]`, `"x"`); anything else is taken as a bare string, and `none` as null.
pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    if raw.eq_ignore_ascii_case("none") || raw.eq_ignore_ascii_case("null") {
        return Value::Null;
    }
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("key v")).unwrap_or_else(|_| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Reads a config file: flat TOML (`train.budget = 1000`, sections also work) or a
/// previous `run.json`, whose `config` object is replayed.
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tree: Value = if path.extension().is_some_and(|e| e == "json") {
        let mut v: Value = serde_json::from_str(&text)?;
        match v.get_mut("config") {
            Some(c) => c.take(),
            None => v,
        }
    } else {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::to_value(table)?
    };
    let mut out = BTreeMap::new();
    flatten("", &tree, &mut out);
    Ok(out)
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got `{s}`")))?;
    Ok((k.trim().to_string(), parse_value(v)))
}

/// Applies `file` then `flags` on top of the defaults. Unknown keys and values of the
/// wrong type are errors.
pub fn resolve(file: &BTreeMap<String, Value>, flags: &[(String, Value)]) -> Result<ResolvedConfig> {
    let mut values = default_keys();
    let mut sources: BTreeMap<String, Source> = values.keys().map(|k| (k.clone(), Source::Default)).collect();
    let layers = file
        .iter()
        .map(|(k, v)| (k, v, Source::File))
        .chain(flags.iter().map(|(k, v)| (k, v, Source::Flag)));
    for (key, value, source) in layers {
        let Some(slot) = values.get_mut(key) else {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        };
        *slot = value.clone();
        sources.insert(key.clone(), source);
    }
    let config: RunConfig = serde_json::from_value(unflatten(&values))
        .map_err(|e| Error::Config(format!("bad config value: {e}")))?;
    Ok(ResolvedConfig { config, sources })
}

impl ResolvedConfig {
    pub fn defaults() -> Self {
        resolve(&BTreeMap::new(), &[]).expect("defaults resolve")
    }

    pub fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(&self.config).expect("config serializes"), &mut out);
        out
    }

    /// First 16 hex digits of the SHA-256 of the effective config as JSON.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.config).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// `key = value  # source`, one line per key.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.flat() {
            let src = serde_json::to_value(self.sources[&k]).unwrap();
            s.push_str(&format!("{k} = {}  # {}\n", toml_literal(&v), src.as_str().unwrap()));
        }
        s
    }
}

fn toml_literal(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::Array(a) => format!("[{}]", a.iter().map(toml_literal).collect::<Vec<_>>().join(", ")),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub sources: BTreeMap<String, Source>,
    /// Input and output files of the run.
    pub files: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, resolved: &ResolvedConfig, seed: u64) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: resolved.hash(),
            seed,
            config: resolved.config.clone(),
            sources: resolved.sources.clone(),
            files: BTreeMap::new(),
        }
    }

    pub fn file(mut self, role: &str, path: &Path) -> Self {
        self.files.insert(role.into(), path.to_path_buf());
        self
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        write_json(&path, self)?;
        Ok(path)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Manifest paths of the two splits written by [`gen_data`].
pub fn split_manifest(data_dir: &Path, stem: &str) -> PathBuf {
    data_dir.join(format!("{stem}.manifest.jsonl"))
}

pub fn load_split(data_dir: &Path, stem: &str) -> Result<Dataset> {
    Dataset::load(&split_manifest(data_dir, stem))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSummary {
    pub train_images: usize,
    pub eval_images: usize,
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
}

/// Generates the synthetic corpus and writes both splits into `out`.
pub fn gen_data(resolved: &ResolvedConfig, out: &Path) -> Result<GenSummary> {
    let cfg = &resolved.config.gen;
    let data = datagen::generate(cfg)?;
    create_dir(out)?;
    let train_manifest = data.train.save(out, TRAIN_STEM)?;
    let eval_manifest = data.eval.save(out, EVAL_STEM)?;
    RunManifest::new("gen-data", resolved, cfg.seed)
        .file("train", &train_manifest)
        .file("eval", &eval_manifest)
        .write(out)?;
    Ok(GenSummary {
        train_images: data.train.len(),
        eval_images: data.eval.len(),
        train_manifest,
        eval_manifest,
    })
}

/// The network named by `run.network`, checked against the data's image shape.
pub fn build_network(opts: &RunOptions, dataset: &Dataset) -> Result<Network> {
    let config = if opts.network.is_empty() {
        MultiscaleConfig::desk_scale()
    } else {
        io::read_config(Path::new(&opts.network))?
    };
    let network = Network::new(config)?;
    if network.input_shape() != dataset.shape() {
        return Err(Error::Config(format!(
            "network input is {} but the images are {}",
            network.input_shape(),
            dataset.shape()
        )));
    }
    Ok(network)
}

#[derive(Serialize)]
#[serde(tag = "phase", rename_all = "lowercase")]
enum LogLine<'a> {
    Pretrain(&'a trainer::PretrainEpoch),
    Rank(&'a LogRecord),
}

struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { out: BufWriter::new(file), path })
    }

    fn push(&mut self, line: &LogLine) -> Result<()> {
        serde_json::to_writer(&mut self.out, line)?;
        writeln!(self.out).and_then(|_| self.out.flush()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Writes a checkpoint through a temporary file so an interrupted write never leaves
/// a truncated checkpoint behind.
fn save_atomically(path: &Path, network: &Network, params: &NetworkParams) -> Result<()> {
    let tmp = path.with_extension("tmp");
    io::save_checkpoint(&tmp, network, params)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: u64,
    pub triplets: u64,
    pub skipped_steps: u64,
    pub wall_ms: u64,
    pub final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<trainer::PretrainReport>,
}

/// Trains on the train split of `data_dir`, writing `model.ckpt`, `train_log.jsonl`,
/// `network.toml`, periodic `checkpoint.ckpt` files and the run manifest into `out`.
pub fn train(resolved: &ResolvedConfig, data_dir: &Path, out: &Path) -> Result<TrainSummary> {
    let cfg = &resolved.config;
    cfg.train.validate()?;
    let dataset = load_split(data_dir, TRAIN_STEM)?;
    let network = build_network(&cfg.run, &dataset)?;
    create_dir(out)?;
    io::write_config(&out.join("network.toml"), network.config())?;
    let mut log = JsonLines::create(out.join("train_log.jsonl"))?;
    let mut params = network.init_params(cfg.run.init_seed);

    let mut pretrain = None;
    if cfg.run.pretrain {
        let heldout = load_split(data_dir, EVAL_STEM).ok();
        let (p, report) = trainer::pretrain_softmax(&dataset, heldout.as_ref(), &network, params, &cfg.pretrain)?;
        for epoch in &report.epochs {
            log.push(&LogLine::Pretrain(epoch))?;
        }
        params = p;
        pretrain = Some(report);
    }

    let periodic = out.join("checkpoint.ckpt");
    let model = if cfg.train.workers > 1 {
        let model = trainer::train_async(&dataset, &network, params, &cfg.train)?;
        for record in &model.log {
            log.push(&LogLine::Rank(record))?;
        }
        model
    } else {
        let mut records = 0u64;
        trainer::train_with(&dataset, &network, params, &cfg.train, &mut |record, params| {
            log.push(&LogLine::Rank(record))?;
            records += 1;
            if cfg.run.checkpoint_every > 0 && records.is_multiple_of(cfg.run.checkpoint_every) {
                save_atomically(&periodic, &network, params)?;
            }
            Ok(())
        })?
    };

    let checkpoint = out.join("model.ckpt");
    save_atomically(&checkpoint, &network, &model.params)?;
    RunManifest::new("train", resolved, cfg.train.seed)
        .file("data", data_dir)
        .file("checkpoint", &checkpoint)
        .write(out)?;
    Ok(TrainSummary {
        checkpoint,
        log: log.path,
        steps: model.steps,
        triplets: model.triplets,
        skipped_steps: model.skipped_steps,
        wall_ms: model.wall_ms,
        final_loss: model.log.last().map(|r| r.loss),
        pretrain,
    })
}

fn load_checkpoint(path: &Path) -> Result<(Network, NetworkParams)> {
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", path.display())));
    }
    io::load_checkpoint(path)
}

/// Evaluates a checkpoint on the eval split; writes `eval.json` and, with `csv`, the
/// per-triplet outcomes as `triplets.csv`.
pub fn eval(resolved: &ResolvedConfig, data_dir: &Path, checkpoint: &Path, out: &Path, csv: bool) -> Result<EvalReport> {
    let cfg = &resolved.config.eval;
    let (network, params) = load_checkpoint(checkpoint)?;
    let dataset = load_split(data_dir, EVAL_STEM)?;
    let groups = eval::prepare_groups(&dataset, cfg)?;
    let report = eval::evaluate(&NetworkModel { network: &network, params: &params }, &dataset, &groups, cfg.k, cfg.threads)?;
    create_dir(out)?;
    write_json(&out.join("eval.json"), &report)?;
    let mut manifest = RunManifest::new("eval", resolved, cfg.seed)
        .file("data", data_dir)
        .file("checkpoint", checkpoint);
    if csv {
        let path = out.join("triplets.csv");
        eval::write_outcomes_csv(&path, &report.details)?;
        manifest = manifest.file("triplets", &path);
    }
    manifest.write(out)?;
    Ok(report)
}

/// Draws `n` triplets from a fresh stream and returns the sampler's report.
pub fn sampler_report(dataset: &Dataset, train: &TrainConfig, n: u64) -> Result<SamplerReport> {
    let mut stream = TripletStream::new(dataset, train.sampler.clone(), train.sampling, trainer::sub_seed(train.seed, 1))?;
    for _ in 0..n {
        stream.next_triplet()?;
    }
    Ok(stream.sampler().report())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: SamplingMode,
    pub ratio: f64,
    pub out_of_class_fraction: f64,
    pub precision: f64,
    pub score_at_top_k: i64,
    #[serde(rename = "K")]
    pub k: usize,
    pub triplets: u64,
}

/// One fixed-budget training run per out-of-class ratio, each evaluated on `heldout`.
pub fn sampling_sweep(
    train_set: &Dataset,
    heldout: &Dataset,
    network: &Network,
    config: &RunConfig,
) -> Result<Vec<SweepRow>> {
    let groups = eval::prepare_groups(heldout, &config.eval)?;
    let init = network.init_params(config.run.init_seed);
    let mut rows = Vec::new();
    for &ratio in &config.stats.ratios {
        let mut tc = config.train.clone();
        tc.sampler.out_of_class_ratio = ratio;
        tc.budget = config.stats.sweep_budget;
        let stats = sampler_report(train_set, &tc, config.stats.triplets)?;
        let model = if tc.workers > 1 {
            trainer::train_async(train_set, network, init.clone(), &tc)?
        } else {
            trainer::train(train_set, network, init.clone(), &tc)?
        };
        let model_ref = NetworkModel { network, params: &model.params };
        let report = eval::evaluate(&model_ref, heldout, &groups, config.eval.k, config.eval.threads)?;
        rows.push(SweepRow {
            mode: tc.sampling,
            ratio,
            out_of_class_fraction: stats.out_of_class_fraction,
            precision: report.precision,
            score_at_top_k: report.score_at_top_k,
            k: report.k,
            triplets: model.triplets,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsSummary {
    pub report: SamplerReport,
    pub sweep: Vec<SweepRow>,
}

/// Writes `sampler_stats.json`; with `sweep`, also trains one model per ratio and
/// writes `sweep.csv`.
pub fn sampler_stats(resolved: &ResolvedConfig, data_dir: &Path, out: &Path, sweep: bool) -> Result<StatsSummary> {
    let cfg = &resolved.config;
    cfg.train.validate()?;
    let dataset = load_split(data_dir, TRAIN_STEM)?;
    let report = sampler_report(&dataset, &cfg.train, cfg.stats.triplets)?;
    create_dir(out)?;
    write_json(&out.join("sampler_stats.json"), &report)?;
    let mut manifest = RunManifest::new("sampler-stats", resolved, cfg.train.seed).file("data", data_dir);
    let mut rows = Vec::new();
    if sweep {
        let heldout = load_split(data_dir, EVAL_STEM)?;
        let network = build_network(&cfg.run, &dataset)?;
        rows = sampling_sweep(&dataset, &heldout, &network, cfg)?;
        let path = out.join("sweep.csv");
        write_sweep_csv(&path, &rows)?;
        manifest = manifest.file("sweep", &path);
    }
    manifest.write(out)?;
    Ok(StatsSummary { report, sweep: rows })
}

/// First-layer kernels of one path laid out as a grid of tiles, 8-bit, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterGrid {
    pub path: usize,
    pub kernels: usize,
    pub kernel_size: usize,
    pub columns: usize,
    pub width: usize,
    pub height: usize,
    /// 3 for RGB, 1 for grayscale.
    pub color_channels: usize,
    pub pixels: Vec<u8>,
}

/// Pixels per kernel tap in an exported grid, and the gap between tiles.
pub const FILTER_ZOOM: usize = 4;
pub const FILTER_GAP: usize = 1;

/// Builds a grid from conv weights laid out `[kernel][channel][y][x]`. Three-channel
/// kernels become RGB tiles; otherwise every channel gets its own grayscale tile, so a
/// row holds one kernel. Each kernel is rescaled to its own min/max.
pub fn filter_grid(path: usize, (kernels, channels, size): (usize, usize, usize), weights: &[f64]) -> FilterGrid {
    let rgb = channels == 3;
    let (color_channels, columns, rows) = if rgb {
        let cols = (kernels as f64).sqrt().ceil() as usize;
        (3, cols, kernels.div_ceil(cols.max(1)))
    } else {
        (1, channels, kernels)
    };
    let tile = size * FILTER_ZOOM;
    let width = columns * tile + (columns + 1) * FILTER_GAP;
    let height = rows * tile + (rows + 1) * FILTER_GAP;
    let mut pixels = vec![0u8; width * height * color_channels];
    let per_kernel = channels * size * size;
    for k in 0..kernels {
        let w = &weights[k * per_kernel..(k + 1) * per_kernel];
        let lo = w.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
        let byte = |v: f64| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8;
        let mut put = |col: usize, row: usize, c_out: usize, c_in: usize| {
            let (x0, y0) = (FILTER_GAP + col * (tile + FILTER_GAP), FILTER_GAP + row * (tile + FILTER_GAP));
            for y in 0..tile {
                for x in 0..tile {
                    let v = w[(c_in * size + y / FILTER_ZOOM) * size + x / FILTER_ZOOM];
                    pixels[((y0 + y) * width + x0 + x) * color_channels + c_out] = byte(v);
                }
            }
        };
        if rgb {
            for c in 0..3 {
                put(k % columns, k / columns, c, c);
            }
        } else {
            for c in 0..channels {
                put(c, k, 0, c);
            }
        }
    }
    FilterGrid { path, kernels, kernel_size: size, columns, width, height, color_channels, pixels }
}

/// One grid per path whose first trainable layer is a convolution.
pub fn filter_grids(network: &Network, params: &NetworkParams) -> Vec<FilterGrid> {
    (0..network.paths().len())
        .filter_map(|p| network.first_conv(params, p).map(|(dims, w)| filter_grid(p, dims, w)))
        .collect()
}

pub fn write_png(path: &Path, grid: &FilterGrid) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), grid.width as u32, grid.height as u32);
    enc.set_color(if grid.color_channels == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&grid.pixels).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Writes `path{p}_filters.png` for every path of the checkpoint.
pub fn export_filters(resolved: &ResolvedConfig, checkpoint: &Path, out: &Path) -> Result<Vec<(PathBuf, FilterGrid)>> {
    let (network, params) = load_checkpoint(checkpoint)?;
    create_dir(out)?;
    let mut manifest = RunManifest::new("export-filters", resolved, resolved.config.run.init_seed).file("checkpoint", checkpoint);
    let mut written = Vec::new();
    for grid in filter_grids(&network, &params) {
        let path = out.join(format!("path{}_filters.png", grid.path));
        write_png(&path, &grid)?;
        manifest = manifest.file(&format!("path{}", grid.path), &path);
        written.push((path, grid));
    }
    manifest.write(out)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_default_key_round_trips() {
        let r = ResolvedConfig::defaults();
        assert_eq!(r.config, RunConfig::default());
        assert!(r.sources.values().all(|s| *s == Source::Default));
        assert!(r.sources.contains_key("train.sampler.capacity"));
        assert!(r.sources.contains_key("gen.shape"));
        assert_eq!(r.sources.len(), default_keys().len());
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let mut file = BTreeMap::new();
        file.insert("train.budget".to_string(), parse_value("500"));
        file.insert("train.learning_rate".to_string(), parse_value("0.02"));
        let flags = vec![parse_assignment("train.budget=700").unwrap()];
        let r = resolve(&file, &flags).unwrap();
        assert_eq!(r.config.train.budget, 700);
        assert_eq!(r.config.train.learning_rate, 0.02);
        assert_eq!(r.sources["train.budget"], Source::Flag);
        assert_eq!(r.sources["train.learning_rate"], Source::File);
        assert_eq!(r.sources["train.momentum"], Source::Default);
    }

    #[test]
    fn value_parsing() {
        assert_eq!(parse_value("[3, 16, 16]"), serde_json::json!([3, 16, 16]));
        assert_eq!(parse_value("uniform"), Value::String("uniform".into()));
        assert_eq!(parse_value("none"), Value::Null);
        let r = resolve(
            &BTreeMap::new(),
            &[
                parse_assignment("train.sampling=uniform").unwrap(),
                parse_assignment("gen.shape=[1,8,8]").unwrap(),
                parse_assignment("train.sampler.positive_cap=0.5").unwrap(),
                parse_assignment("run.pretrain=true").unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(r.config.train.sampling, SamplingMode::Uniform);
        assert_eq!(r.config.gen.shape, crate::dataset::Shape::new(1, 8, 8));
        assert_eq!(r.config.train.sampler.positive_cap, Some(0.5));
        assert!(r.config.run.pretrain);
    }

    #[test]
    fn unknown_key_and_bad_type_are_errors() {
        assert!(resolve(&BTreeMap::new(), &[parse_assignment("train.nope=1").unwrap()]).is_err());
        assert!(resolve(&BTreeMap::new(), &[parse_assignment("train.budget=fast").unwrap()]).is_err());
        assert!(parse_assignment("train.budget").is_err());
    }

    #[test]
    fn hash_tracks_effective_values_only() {
        let a = ResolvedConfig::defaults();
        let mut file = BTreeMap::new();
        file.insert("train.budget".into(), serde_json::json!(200_000));
        let b = resolve(&file, &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = resolve(&BTreeMap::new(), &[parse_assignment("train.seed=3").unwrap()]).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn rendered_config_parses_back() {
        let r = resolve(&BTreeMap::new(), &[parse_assignment("eval.k=12").unwrap()]).unwrap();
        let text = r.render();
        assert!(text.contains("eval.k = 12  # flag"));
        let flags: Vec<(String, Value)> = text
            .lines()
            .map(|l| parse_assignment(l.split("  #").next().unwrap()).unwrap())
            .collect();
        assert_eq!(resolve(&BTreeMap::new(), &flags).unwrap().config, r.config);
    }

    #[test]
    fn grid_geometry() {
        let w: Vec<f64> = (0..5 * 3 * 4 * 4).map(|i| i as f64).collect();
        let g = filter_grid(0, (5, 3, 4), &w);
        assert_eq!((g.columns, g.color_channels), (3, 3));
        let tile = 4 * FILTER_ZOOM;
        assert_eq!(g.width, 3 * tile + 4 * FILTER_GAP);
        assert_eq!(g.height, 2 * tile + 3 * FILTER_GAP);
        assert_eq!(g.pixels.len(), g.width * g.height * 3);
        let g1 = filter_grid(1, (6, 2, 3), &vec![0.0; 6 * 2 * 9]);
        assert_eq!((g1.columns, g1.color_channels, g1.kernels), (2, 1, 6));
        assert_eq!(g1.height, 6 * 3 * FILTER_ZOOM + 7 * FILTER_GAP);
    }
}
