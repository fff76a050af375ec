//! Ranking metrics: similarity precision and score-at-top-K.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ImageId, ImageRecord, NegativeKind, Triplet};
use crate::error::{Error, Result};
use crate::net::{Network, NetworkParams};
use crate::rankloss::squared_distance;

/// Anything that maps an image to an embedding.
pub trait EmbeddingModel: Sync {
    fn embed(&self, image: &ImageRecord) -> Result<Vec<f64>>;
}

/// The network in inference mode.
pub struct NetworkModel<'a> {
    pub network: &'a Network,
    pub params: &'a NetworkParams,
}

impl EmbeddingModel for NetworkModel<'_> {
    fn embed(&self, image: &ImageRecord) -> Result<Vec<f64>> {
        self.network.embed_tensor(self.params, &image.tensor)
    }
}

/// The generator's planted latent vector.
pub struct LatentModel;

impl EmbeddingModel for LatentModel {
    fn embed(&self, image: &ImageRecord) -> Result<Vec<f64>> {
        image.latent.clone().ok_or(Error::MissingLatent(image.id))
    }
}

impl<F> EmbeddingModel for F
where
    F: Fn(&ImageRecord) -> Result<Vec<f64>> + Sync,
{
    fn embed(&self, image: &ImageRecord) -> Result<Vec<f64>> {
        self(image)
    }
}

/// Embeddings computed once per image id.
#[derive(Debug, Clone, Default)]
pub struct Embeddings {
    map: HashMap<ImageId, Vec<f64>>,
}

impl Embeddings {
    pub fn from_map(map: HashMap<ImageId, Vec<f64>>) -> Self {
        Self { map }
    }

    /// Embeds every listed id, splitting the work over `threads` threads.
    pub fn compute<M: EmbeddingModel + ?Sized>(
        model: &M,
        dataset: &Dataset,
        ids: impl IntoIterator<Item = ImageId>,
        threads: usize,
    ) -> Result<Self> {
        let mut ids: Vec<ImageId> = ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        let records = ids.iter().map(|&id| dataset.get(id)).collect::<Result<Vec<_>>>()?;
        let chunk = records.len().div_ceil(threads.max(1)).max(1);
        let parts: Vec<Result<Vec<(ImageId, Vec<f64>)>>> = std::thread::scope(|s| {
            let handles: Vec<_> = records
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|r| Ok((r.id, model.embed(r)?))).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("embedding thread panicked")).collect()
        });
        let mut map = HashMap::with_capacity(ids.len());
        for part in parts {
            map.extend(part?);
        }
        Ok(Self { map })
    }

    pub fn get(&self, id: ImageId) -> Result<&[f64]> {
        self.map.get(&id).map(Vec::as_slice).ok_or(Error::UnknownId(id))
    }

    pub fn distance(&self, a: ImageId, b: ImageId) -> Result<f64> {
        squared_distance(self.get(a)?, self.get(b)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletOutcome {
    pub query: ImageId,
    pub positive: ImageId,
    pub negative: ImageId,
    pub negative_kind: NegativeKind,
    pub d_positive: f64,
    pub d_negative: f64,
    pub correct: bool,
    /// Whether the triplet counts toward score-at-top-K; empty when no group covers it.
    pub eligible: Option<bool>,
}

fn outcome(emb: &Embeddings, t: &Triplet) -> Result<TripletOutcome> {
    let d_positive = emb.distance(t.query, t.positive)?;
    let d_negative = emb.distance(t.query, t.negative)?;
    Ok(TripletOutcome {
        query: t.query,
        positive: t.positive,
        negative: t.negative,
        negative_kind: t.negative_kind,
        d_positive,
        d_negative,
        // ties count as wrong
        correct: d_positive < d_negative,
        eligible: None,
    })
}

fn triplet_ids(triplets: &[Triplet]) -> impl Iterator<Item = ImageId> + '_ {
    triplets.iter().flat_map(|t| [t.query, t.positive, t.negative])
}

/// Fraction of triplets with `D(q, p+) < D(q, p-)`; ties are incorrect.
pub fn precision_from(emb: &Embeddings, triplets: &[Triplet]) -> Result<f64> {
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for t in triplets {
        correct += outcome(emb, t)?.correct as usize;
    }
    Ok(correct as f64 / triplets.len() as f64)
}

pub fn similarity_precision<M: EmbeddingModel + ?Sized>(
    model: &M,
    triplets: &[Triplet],
    dataset: &Dataset,
) -> Result<f64> {
    let emb = Embeddings::compute(model, dataset, triplet_ids(triplets), 1)?;
    precision_from(&emb, triplets)
}

/// One query with its candidate pool and the triplets scored against it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGroup {
    pub query: ImageId,
    pub pool: Vec<ImageId>,
    pub triplets: Vec<Triplet>,
}

/// Pool ids sorted by ascending distance to the query, ties by ascending id.
pub fn rank_from(emb: &Embeddings, query: ImageId, pool: &[ImageId]) -> Result<Vec<ImageId>> {
    if pool.is_empty() {
        return Err(Error::Config("cannot rank an empty pool".into()));
    }
    let mut scored = pool
        .iter()
        .map(|&id| Ok((emb.distance(query, id)?, id)))
        .collect::<Result<Vec<(f64, ImageId)>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

pub fn rank_pool<M: EmbeddingModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    query: ImageId,
    pool: &[ImageId],
) -> Result<Vec<ImageId>> {
    let emb = Embeddings::compute(model, dataset, pool.iter().copied().chain([query]), 1)?;
    rank_from(&emb, query, pool)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopKScore {
    pub score: i64,
    pub eligible: usize,
    pub correct: usize,
    pub incorrect: usize,
}

/// Per group: the top `k` of the pool ranking (the query itself excluded) decide
/// eligibility; eligible correct triplets count +1, eligible incorrect ones −1.
pub fn score_from(emb: &Embeddings, groups: &[EvalGroup], k: usize) -> Result<(TopKScore, Vec<Vec<bool>>)> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let mut total = TopKScore { score: 0, eligible: 0, correct: 0, incorrect: 0 };
    let mut flags = Vec::with_capacity(groups.len());
    for g in groups {
        let pool: HashSet<ImageId> = g.pool.iter().copied().collect();
        for t in &g.triplets {
            if t.query != g.query {
                return Err(Error::Config(format!("triplet query {} is not the group query {}", t.query, g.query)));
            }
            for id in [t.positive, t.negative] {
                if !pool.contains(&id) {
                    return Err(Error::Config(format!("image {id} is outside the pool of query {}", g.query)));
                }
            }
        }
        let top: HashSet<ImageId> = rank_from(emb, g.query, &g.pool)?
            .into_iter()
            .filter(|&id| id != g.query)
            .take(k)
            .collect();
        let mut group_flags = Vec::with_capacity(g.triplets.len());
        for t in &g.triplets {
            let eligible = top.contains(&t.positive) || top.contains(&t.negative);
            group_flags.push(eligible);
            if !eligible {
                continue;
            }
            total.eligible += 1;
            if outcome(emb, t)?.correct {
                total.correct += 1;
            } else {
                total.incorrect += 1;
            }
        }
        flags.push(group_flags);
    }
    total.score = total.correct as i64 - total.incorrect as i64;
    Ok((total, flags))
}

pub fn score_at_top_k<M: EmbeddingModel + ?Sized>(
    model: &M,
    groups: &[EvalGroup],
    dataset: &Dataset,
    k: usize,
) -> Result<TopKScore> {
    let ids = groups.iter().flat_map(|g| g.pool.iter().copied().chain([g.query]));
    let emb = Embeddings::compute(model, dataset, ids, 1)?;
    Ok(score_from(&emb, groups, k)?.0)
}

/// Groups triplets by query. Each pool holds every image of the query's category
/// except the query, every negative used with that query, and random images of other
/// categories up to `pool_size`.
pub fn build_groups(dataset: &Dataset, triplets: &[Triplet], pool_size: usize, seed: u64) -> Result<Vec<EvalGroup>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_cat = dataset.by_category();
    let mut by_query: BTreeMap<ImageId, Vec<Triplet>> = BTreeMap::new();
    for t in triplets {
        by_query.entry(t.query).or_default().push(*t);
    }
    let mut groups = Vec::with_capacity(by_query.len());
    for (query, ts) in by_query {
        let cat = dataset.category_of(query)?;
        let mut pool: Vec<ImageId> = by_cat[&cat].iter().copied().filter(|&id| id != query).collect();
        for t in &ts {
            for id in [t.positive, t.negative] {
                if !pool.contains(&id) {
                    pool.push(id);
                }
            }
        }
        let mut others: Vec<ImageId> = dataset
            .images()
            .iter()
            .filter(|i| i.category != cat && !pool.contains(&i.id))
            .map(|i| i.id)
            .collect();
        others.shuffle(&mut rng);
        let room = pool_size.saturating_sub(pool.len());
        pool.extend(others.choose_multiple(&mut rng, room).copied());
        pool.sort_unstable();
        groups.push(EvalGroup { query, pool, triplets: ts });
    }
    Ok(groups)
}

/// How the held-out triplets and pools are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    pub pool_size: usize,
    pub triplets_per_query: usize,
    /// Minimum relevance gap of an in-class evaluation triplet.
    pub relevance_margin: f64,
    pub out_of_class_ratio: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 30,
            pool_size: 100,
            triplets_per_query: 10,
            relevance_margin: 0.1,
            out_of_class_ratio: 0.0,
            seed: 0,
            threads: 1,
        }
    }
}

/// Oracle-labelled triplets over `dataset`, grouped by query.
pub fn prepare_groups(dataset: &Dataset, config: &EvalConfig) -> Result<Vec<EvalGroup>> {
    let triplets = crate::datagen::eval_triplets(
        dataset,
        config.triplets_per_query,
        config.relevance_margin,
        config.out_of_class_ratio,
        config.seed,
    )?;
    build_groups(dataset, &triplets, config.pool_size, config.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub score_at_top_k: i64,
    #[serde(rename = "K")]
    pub k: usize,
    pub n_triplets: usize,
    pub n_eligible: usize,
    #[serde(skip)]
    pub details: Vec<TripletOutcome>,
}

/// Both metrics over `groups`, whose triplets are the evaluation set.
pub fn evaluate<M: EmbeddingModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    groups: &[EvalGroup],
    k: usize,
    threads: usize,
) -> Result<EvalReport> {
    let ids = groups
        .iter()
        .flat_map(|g| g.pool.iter().copied().chain([g.query]).chain(triplet_ids(&g.triplets).collect::<Vec<_>>()));
    let emb = Embeddings::compute(model, dataset, ids, threads)?;
    let (score, flags) = score_from(&emb, groups, k)?;
    let mut details = Vec::new();
    for (g, f) in groups.iter().zip(flags) {
        for (t, eligible) in g.triplets.iter().zip(f) {
            let mut o = outcome(&emb, t)?;
            o.eligible = Some(eligible);
            details.push(o);
        }
    }
    let correct = details.iter().filter(|o| o.correct).count();
    Ok(EvalReport {
        precision: if details.is_empty() { 0.0 } else { correct as f64 / details.len() as f64 },
        score_at_top_k: score.score,
        k,
        n_triplets: details.len(),
        n_eligible: score.eligible,
        details,
    })
}

pub fn write_outcomes_csv(path: &Path, outcomes: &[TripletOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for o in outcomes {
        w.serialize(o).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
