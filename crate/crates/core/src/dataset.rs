//! Images, categories, pairwise relevance and their on-disk formats.
//!
//! A dataset on disk is three files:
//!
//! * a JSON Lines manifest whose first line is a header
//!   `{"shape": [C, H, W], "blob": "<path>", "relevance": "<path>"?}` followed by one
//!   `{"id", "category", "offset", "latent"?}` object per image,
//! * a blob of little-endian `f32` tensors concatenated in manifest order, and
//! * an optional relevance CSV with `i,j,r` rows (`i < j`, `r >= 0`).
//!
//! Relative paths in the header resolve against the manifest's directory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ImageId = u32;
pub type CategoryId = u32;

/// Tensor shape, channels × height × width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl From<[usize; 3]> for Shape {
    fn from(v: [usize; 3]) -> Self {
        Shape::new(v[0], v[1], v[2])
    }
}

impl From<Shape> for [usize; 3] {
    fn from(s: Shape) -> Self {
        [s.channels, s.height, s.width]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: ImageId,
    pub category: CategoryId,
    /// Channel-major pixel values in `[0, 1]`.
    pub tensor: Vec<f32>,
    /// Planted ground-truth position, present only for synthetic data.
    pub latent: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    InClass,
    OutOfClass,
}

/// `(query, positive, negative)`: the positive is more similar to the query than the negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub query: ImageId,
    pub positive: ImageId,
    pub negative: ImageId,
    pub negative_kind: NegativeKind,
}

impl Triplet {
    /// The same triplet with positive and negative exchanged.
    pub fn swapped(&self) -> Triplet {
        Triplet {
            positive: self.negative,
            negative: self.positive,
            ..*self
        }
    }
}

/// Sparse symmetric pairwise relevance. Absent pairs have relevance zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelevanceSource {
    pairs: HashMap<(ImageId, ImageId), f64>,
    totals: HashMap<ImageId, f64>,
}

fn canonical(i: ImageId, j: ImageId) -> (ImageId, ImageId) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

impl RelevanceSource {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `r(i, j) = r(j, i) = r`. Zero scores are accepted and not stored.
    pub fn insert(&mut self, i: ImageId, j: ImageId, r: f64) -> Result<()> {
        if i == j {
            return Err(Error::Relevance {
                i,
                j,
                message: "self-relevance is not allowed".into(),
            });
        }
        if !r.is_finite() || r < 0.0 {
            return Err(Error::Relevance {
                i,
                j,
                message: format!("score {r} must be finite and nonnegative"),
            });
        }
        let key = canonical(i, j);
        if let Some(&prev) = self.pairs.get(&key) {
            if prev != r {
                return Err(Error::Relevance {
                    i,
                    j,
                    message: format!("conflicting scores {prev} and {r}"),
                });
            }
            return Ok(());
        }
        if r == 0.0 {
            return Ok(());
        }
        self.pairs.insert(key, r);
        *self.totals.entry(i).or_insert(0.0) += r;
        *self.totals.entry(j).or_insert(0.0) += r;
        Ok(())
    }

    pub fn get(&self, i: ImageId, j: ImageId) -> f64 {
        self.pairs.get(&canonical(i, j)).copied().unwrap_or(0.0)
    }

    /// Sum of `r(i, j)` over all stored partners of `i`.
    pub fn total(&self, i: ImageId) -> f64 {
        self.totals.get(&i).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs in canonical `(i < j)` order, sorted.
    pub fn sorted_pairs(&self) -> Vec<(ImageId, ImageId, f64)> {
        let mut v: Vec<_> = self.pairs.iter().map(|(&(i, j), &r)| (i, j, r)).collect();
        v.sort_by_key(|a| (a.0, a.1));
        v
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let mut rel = RelevanceSource::new();
        for row in reader.deserialize::<(ImageId, ImageId, f64)>() {
            let (i, j, r) = row.map_err(|e| csv_error(path, e))?;
            rel.insert(i, j, r)?;
        }
        Ok(rel)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        for (i, j, r) in self.sorted_pairs() {
            writer
                .serialize((i, j, r))
                .map_err(|e| csv_error(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}

/// An immutable collection of images sharing one tensor shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: Shape,
    images: Vec<ImageRecord>,
    index: HashMap<ImageId, usize>,
    relevance: RelevanceSource,
}

impl Dataset {
    /// Validates every record (unique ids, tensor length and range) and the relevance
    /// entries (known ids, same category only).
    pub fn new(shape: Shape, images: Vec<ImageRecord>, relevance: RelevanceSource) -> Result<Self> {
        let mut index = HashMap::with_capacity(images.len());
        for (pos, img) in images.iter().enumerate() {
            if index.insert(img.id, pos).is_some() {
                return Err(Error::DuplicateId(img.id));
            }
            if img.tensor.len() != shape.len() {
                return Err(Error::ShapeMismatch {
                    id: img.id,
                    expected: shape.len(),
                    found: img.tensor.len(),
                });
            }
            if let Some(index) = img
                .tensor
                .iter()
                .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
            {
                return Err(Error::BadTensorValue { id: img.id, index });
            }
        }
        let ds = Dataset {
            shape,
            images,
            index,
            relevance: RelevanceSource::new(),
        };
        ds.with_relevance(relevance)
    }

    /// Replaces the relevance source after checking it against this dataset's categories.
    pub fn with_relevance(mut self, relevance: RelevanceSource) -> Result<Self> {
        for &(i, j) in relevance.pairs.keys() {
            let ci = self.get(i).map_err(|_| Error::Relevance {
                i,
                j,
                message: format!("unknown image {i}"),
            })?;
            let cj = self.get(j).map_err(|_| Error::Relevance {
                i,
                j,
                message: format!("unknown image {j}"),
            })?;
            if ci.category != cj.category {
                return Err(Error::Relevance {
                    i,
                    j,
                    message: format!(
                        "cross-category entry (categories {} and {})",
                        ci.category, cj.category
                    ),
                });
            }
        }
        self.relevance = relevance;
        Ok(self)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn relevance(&self) -> &RelevanceSource {
        &self.relevance
    }

    pub fn get(&self, id: ImageId) -> Result<&ImageRecord> {
        self.index
            .get(&id)
            .map(|&p| &self.images[p])
            .ok_or(Error::UnknownId(id))
    }

    pub fn contains(&self, id: ImageId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn category_of(&self, id: ImageId) -> Result<CategoryId> {
        self.get(id).map(|img| img.category)
    }

    /// Image ids grouped by category, each group in dataset order.
    pub fn by_category(&self) -> BTreeMap<CategoryId, Vec<ImageId>> {
        let mut out: BTreeMap<CategoryId, Vec<ImageId>> = BTreeMap::new();
        for img in &self.images {
            out.entry(img.category).or_default().push(img.id);
        }
        out
    }

    pub fn num_categories(&self) -> usize {
        self.by_category().len()
    }

    /// Total relevance of image `id`: the sum of its scores against same-category images.
    pub fn total_relevance(&self, id: ImageId) -> Result<f64> {
        self.get(id)?;
        Ok(self.relevance.total(id))
    }

    /// Reads a manifest and its blob (and relevance file when the header names one).
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let file = fs::File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut lines = BufReader::new(file).lines().enumerate();

        let header: ManifestHeader = loop {
            match lines.next() {
                None => {
                    return Err(Error::Manifest {
                        line: 1,
                        message: "missing header line".into(),
                    })
                }
                Some((n, line)) => {
                    let line = line.map_err(|e| Error::io(manifest_path, e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line).map_err(|e| Error::Manifest {
                        line: n + 1,
                        message: e.to_string(),
                    })?;
                }
            }
        };

        let mut entries = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(|e| Error::io(manifest_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Manifest {
                line: n + 1,
                message: e.to_string(),
            })?;
            entries.push(entry);
        }

        let blob_path = resolve(base, &header.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let images = decode_images(header.shape, &entries, &blob)?;

        let relevance = match &header.relevance {
            Some(rel) => RelevanceSource::read_csv(&resolve(base, rel))?,
            None => RelevanceSource::new(),
        };
        Dataset::new(header.shape, images, relevance)
    }

    /// Writes `<stem>.manifest.jsonl`, `<stem>.blob` and `<stem>.relevance.csv` into `dir`.
    /// Returns the manifest path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join(format!("{stem}.manifest.jsonl"));
        let blob_name = format!("{stem}.blob");
        let rel_name = format!("{stem}.relevance.csv");

        let blob_path = dir.join(&blob_name);
        let mut blob = BufWriter::new(fs::File::create(&blob_path).map_err(|e| Error::io(&blob_path, e))?);
        let mut offsets = Vec::with_capacity(self.images.len());
        let mut offset = 0u64;
        for img in &self.images {
            offsets.push(offset);
            for v in &img.tensor {
                blob.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&blob_path, e))?;
            }
            offset += 4 * img.tensor.len() as u64;
        }
        blob.flush().map_err(|e| Error::io(&blob_path, e))?;

        self.relevance.write_csv(&dir.join(&rel_name))?;

        let mut out = BufWriter::new(
            fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
        );
        let header = ManifestHeader {
            shape: self.shape,
            blob: blob_name,
            relevance: Some(rel_name),
        };
        writeln!(out, "{}", serde_json::to_string(&header)?).map_err(|e| Error::io(&manifest_path, e))?;
        for (img, &offset) in self.images.iter().zip(&offsets) {
            let entry = ManifestEntry {
                id: img.id,
                category: img.category,
                offset,
                latent: img.latent.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&entry)?)
                .map_err(|e| Error::io(&manifest_path, e))?;
        }
        out.flush().map_err(|e| Error::io(&manifest_path, e))?;
        Ok(manifest_path)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    shape: Shape,
    blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relevance: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: ImageId,
    category: CategoryId,
    /// Byte offset into the blob.
    offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    latent: Option<Vec<f64>>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Slices the blob per entry. An entry's extent runs to the next entry's offset (or the
/// blob end for the last one); an extent that disagrees with the declared shape is a
/// shape mismatch.
fn decode_images(shape: Shape, entries: &[ManifestEntry], blob: &[u8]) -> Result<Vec<ImageRecord>> {
    let expected_bytes = 4 * shape.len() as u64;
    let blob_len = blob.len() as u64;
    let mut images = Vec::with_capacity(entries.len());
    for (k, entry) in entries.iter().enumerate() {
        let end = entries.get(k + 1).map(|e| e.offset).unwrap_or(blob_len);
        let is_last = k + 1 == entries.len();
        if entry.offset > blob_len || (is_last && entry.offset + expected_bytes > blob_len) {
            return Err(Error::MissingBlob {
                id: entry.id,
                needed: entry.offset + expected_bytes,
                available: blob_len,
            });
        }
        let extent = end.saturating_sub(entry.offset);
        if extent != expected_bytes {
            return Err(Error::ShapeMismatch {
                id: entry.id,
                expected: shape.len(),
                found: (extent / 4) as usize,
            });
        }
        let bytes = &blob[entry.offset as usize..end as usize];
        let tensor = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        images.push(ImageRecord {
            id: entry.id,
            category: entry.category,
            tensor,
            latent: entry.latent.clone(),
        });
    }
    Ok(images)
}
