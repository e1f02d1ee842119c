//! Datasets, labeled/unlabeled pools and unlabeled-set partitioning.
//!
//! The on-disk format (`.tald`) is little-endian:
//!
//! ```text
//! "TALD" | u32 version=1 | u32 n | u32 d | u32 num_classes
//! n*d f32 features, row-major
//! n   u32 labels
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

pub const DATASET_MAGIC: &[u8; 4] = b"TALD";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Feature matrix plus ground-truth labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<f32>,
    labels: Vec<usize>,
    n: usize,
    d: usize,
    num_classes: usize,
    pub name: String,
    pub class_names: Vec<String>,
    /// Optional per-item thumbnail paths, passed through to labeling clients.
    pub thumbnails: Option<Vec<String>>,
}

// Content equality; `name` and display metadata are not part of the format.
impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.d == other.d
            && self.num_classes == other.num_classes
            && self.labels == other.labels
            && self.features.len() == other.features.len()
            && self
                .features
                .iter()
                .zip(&other.features)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Dataset {
    pub fn new(
        features: Vec<f32>,
        d: usize,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 || d == 0 {
            return Err(Error::Validation(format!("dataset must be non-empty (n={n}, d={d})")));
        }
        if num_classes < 2 {
            return Err(Error::Validation(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        if features.len() != n * d {
            return Err(Error::Validation(format!(
                "feature buffer has {} entries, expected {n}x{d}",
                features.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::Validation(format!(
                "label {y} at row {i} >= num_classes {num_classes}"
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite feature at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Dataset {
            features,
            labels,
            n,
            d,
            num_classes,
            name: name.into(),
            class_names: (0..num_classes).map(|c| format!("class_{c}")).collect(),
            thumbnails: None,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    /// Rows `indices` as a 64-bit matrix, one row per index.
    pub fn rows_f64(&self, indices: &[usize]) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(indices.len(), self.d, |r, c| {
            f64::from(self.features[indices[r] * self.d + c])
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.n * (self.d + 1));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [DATASET_VERSION, self.n as u32, self.d as u32, self.num_classes as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for f in &self.features {
            out.extend_from_slice(&f.to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], name: impl Into<String>) -> Result<Self> {
        let fmt = |offset: usize, message: String| Error::Format {
            offset: offset as u64,
            message,
        };
        if bytes.len() < 4 {
            return Err(fmt(bytes.len(), "truncated magic".into()));
        }
        if &bytes[..4] != DATASET_MAGIC {
            return Err(fmt(0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
        }
        let u32_at = |offset: usize| -> Result<u32> {
            bytes
                .get(offset..offset + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| fmt(bytes.len(), "truncated header".into()))
        };
        let version = u32_at(4)?;
        if version != DATASET_VERSION {
            return Err(fmt(4, format!("unsupported version {version}")));
        }
        let n = u32_at(8)? as usize;
        let d = u32_at(12)? as usize;
        let num_classes = u32_at(16)? as usize;

        let feat_end = HEADER_LEN + 4 * n * d;
        let label_end = feat_end + 4 * n;
        if bytes.len() < label_end {
            return Err(fmt(
                bytes.len(),
                format!("truncated body: header declares n={n}, d={d} ({label_end} bytes)"),
            ));
        }
        if bytes.len() > label_end {
            return Err(fmt(label_end, "trailing bytes after label block".into()));
        }
        let features = bytes[HEADER_LEN..feat_end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let labels = bytes[feat_end..label_end]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .collect();
        Dataset::new(features, d, labels, num_classes, name)
    }

    /// Subset of rows, relabelled densely in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            if i >= self.n {
                return Err(Error::invalid(format!("index {i} out of range (n={})", self.n)));
            }
            features.extend_from_slice(self.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let mut ds = Dataset::new(features, self.d, labels, self.num_classes, self.name.clone())?;
        ds.class_names = self.class_names.clone();
        ds.thumbnails = self
            .thumbnails
            .as_ref()
            .map(|t| indices.iter().map(|&i| t[i].clone()).collect());
        Ok(ds)
    }
}

/// Gaussian blobs: class `c` is drawn around a mean sampled uniformly from a
/// hypercube of side `10 * spread` centred at the origin.
pub fn generate_blobs(num_classes: usize, per_class: usize, dim: usize, spread: f64, rng_seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::invalid(format!("num_classes must be >= 2, got {num_classes}")));
    }
    if per_class == 0 || dim == 0 {
        return Err(Error::invalid("per_class and dim must be positive"));
    }
    if !(spread.is_finite() && spread > 0.0) {
        return Err(Error::invalid(format!("spread must be positive, got {spread}")));
    }
    let mut rng = rng::seeded(rng_seed);
    let half = 5.0 * spread;
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| rng.random_range(-half..half)).collect())
        .collect();
    let noise = Normal::new(0.0, spread).expect("spread validated above");
    let mut features = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            features.extend(mean.iter().map(|m| (m + noise.sample(&mut rng)) as f32));
            labels.push(c);
        }
    }
    Dataset::new(
        features,
        dim,
        labels,
        num_classes,
        format!("blobs-c{num_classes}-n{per_class}-d{dim}-s{rng_seed}"),
    )
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&ds.to_bytes()).map_err(|e| Error::io(path, e))?;
    file.sync_all().map_err(|e| Error::io(path, e))?;
    if let Some(list) = &ds.thumbnails {
        let thumbs = path.with_extension("thumbs");
        let mut text = list.join("\n");
        text.push('\n');
        fs::write(&thumbs, text).map_err(|e| Error::io(&thumbs, e))?;
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut ds = Dataset::from_bytes(&bytes, name)?;
    let thumbs = path.with_extension("thumbs");
    if thumbs.exists() {
        let text = fs::read_to_string(&thumbs).map_err(|e| Error::io(&thumbs, e))?;
        let list: Vec<String> = text.lines().map(str::to_owned).collect();
        if list.len() != ds.len() {
            return Err(Error::Validation(format!(
                "{} lists {} thumbnails for {} rows",
                thumbs.display(),
                list.len(),
                ds.len()
            )));
        }
        ds.thumbnails = Some(list);
    }
    Ok(ds)
}

/// Reads a headerless CSV, one point per row, last column an integer label.
pub fn import_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut d = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        if record.len() < 2 {
            return Err(Error::Validation(format!(
                "row {row}: need at least one feature and a label"
            )));
        }
        let width = record.len() - 1;
        if *d.get_or_insert(width) != width {
            return Err(Error::Validation(format!(
                "row {row}: expected {} features, got {width}",
                d.unwrap()
            )));
        }
        for field in record.iter().take(width) {
            let v: f32 = field
                .parse()
                .map_err(|_| Error::Validation(format!("row {row}: bad feature {field:?}")))?;
            features.push(v);
        }
        let label = &record[width];
        labels.push(
            label
                .parse::<usize>()
                .map_err(|_| Error::Validation(format!("row {row}: bad label {label:?}")))?,
        );
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(features, d.unwrap_or(0), labels, num_classes, name)
}

/// Disjoint labeled/unlabeled index sets over one dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolState {
    labeled: BTreeMap<usize, usize>,
    unlabeled: BTreeSet<usize>,
    pub dataset: String,
}

impl PoolState {
    pub fn new(labeled: BTreeMap<usize, usize>, unlabeled: BTreeSet<usize>, ds: &Dataset) -> Result<Self> {
        if let Some(i) = labeled.keys().find(|i| unlabeled.contains(i)) {
            return Err(Error::Validation(format!("index {i} is both labeled and unlabeled")));
        }
        if let Some(&i) = labeled.keys().chain(unlabeled.iter()).find(|&&i| i >= ds.len()) {
            return Err(Error::Validation(format!("index {i} out of range (n={})", ds.len())));
        }
        if let Some((i, y)) = labeled.iter().find(|(_, &y)| y >= ds.num_classes()) {
            return Err(Error::Validation(format!("index {i} assigned label {y} out of range")));
        }
        Ok(PoolState {
            labeled,
            unlabeled,
            dataset: ds.name.clone(),
        })
    }

    pub fn labeled(&self) -> &BTreeMap<usize, usize> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<usize> {
        &self.unlabeled
    }

    pub fn unlabeled_vec(&self) -> Vec<usize> {
        self.unlabeled.iter().copied().collect()
    }

    /// Labeled indices assigned to `class`, ascending.
    pub fn labeled_in_class(&self, class: usize) -> Vec<usize> {
        self.labeled
            .iter()
            .filter(|(_, &y)| y == class)
            .map(|(&i, _)| i)
            .collect()
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &y in self.labeled.values() {
            counts[y] += 1;
        }
        counts
    }

    /// Moves `index` from unlabeled to labeled with `label`.
    pub fn assign(&mut self, index: usize, label: usize) -> Result<()> {
        if !self.unlabeled.remove(&index) {
            return Err(Error::invalid(format!("index {index} is not unlabeled")));
        }
        self.labeled.insert(index, label);
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }
}

/// Seeds the labeled pool with `seed_size` uniformly drawn indices of `ds`.
pub fn split_pools(ds: &Dataset, seed_size: usize, rng_seed: u64) -> Result<PoolState> {
    let all: Vec<usize> = (0..ds.len()).collect();
    split_pools_from(ds, &all, seed_size, rng_seed)
}

/// Like [`split_pools`] but restricted to `candidates` (e.g. after a test hold-out).
pub fn split_pools_from(ds: &Dataset, candidates: &[usize], seed_size: usize, rng_seed: u64) -> Result<PoolState> {
    if seed_size == 0 || seed_size >= candidates.len() {
        return Err(Error::invalid(format!(
            "seed_size must be in (0, {}), got {seed_size}",
            candidates.len()
        )));
    }
    let mut shuffled = candidates.to_vec();
    shuffled.shuffle(&mut rng::seeded(rng_seed));
    let labeled = shuffled[..seed_size].iter().map(|&i| (i, ds.label(i))).collect();
    let unlabeled = shuffled[seed_size..].iter().copied().collect();
    PoolState::new(labeled, unlabeled, ds)
}

/// Random near-equal chunks of the unlabeled set with the budget spread across them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partitioning {
    pub chunks: Vec<Vec<usize>>,
    pub per_chunk_budget: Vec<usize>,
}

pub fn partition_unlabeled(
    indices: &[usize],
    num_partitions: usize,
    total_budget: usize,
    rng_seed: u64,
) -> Result<Partitioning> {
    if num_partitions == 0 || num_partitions > indices.len() {
        return Err(Error::invalid(format!(
            "num_partitions must be in [1, {}], got {num_partitions}",
            indices.len()
        )));
    }
    if total_budget > indices.len() {
        return Err(Error::invalid(format!(
            "budget {total_budget} exceeds {} indices",
            indices.len()
        )));
    }
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut rng::seeded(rng_seed));

    let sizes = split_evenly(indices.len(), num_partitions);
    let mut chunks = Vec::with_capacity(num_partitions);
    let mut rest = shuffled.as_slice();
    for size in sizes {
        let (head, tail) = rest.split_at(size);
        chunks.push(head.to_vec());
        rest = tail;
    }
    Ok(Partitioning {
        chunks,
        per_chunk_budget: split_evenly(total_budget, num_partitions),
    })
}

/// `total` split into `parts` integers: floor share each, remainder one apiece to the first parts.
pub fn split_evenly(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let rem = total % parts;
    (0..parts).map(|i| base + usize::from(i < rem)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_shape_and_labels() {
        let ds = generate_blobs(2, 5, 2, 1.0, 7).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.labels(), &[0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);

        let ds = generate_blobs(3, 1, 4, 0.5, 0).unwrap();
        assert_eq!((ds.len(), ds.dim()), (3, 4));
        assert_eq!(ds.labels(), &[0, 1, 2]);
    }

    #[test]
    fn blobs_deterministic() {
        let a = generate_blobs(4, 20, 3, 1.0, 11).unwrap();
        let b = generate_blobs(4, 20, 3, 1.0, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_blobs(4, 20, 3, 1.0, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn blobs_reject_bad_args() {
        assert!(generate_blobs(1, 5, 2, 1.0, 0).is_err());
        assert!(generate_blobs(2, 0, 2, 1.0, 0).is_err());
        assert!(generate_blobs(2, 5, 0, 1.0, 0).is_err());
        assert!(generate_blobs(2, 5, 2, 0.0, 0).is_err());
        assert!(generate_blobs(2, 5, 2, -1.0, 0).is_err());
    }

    #[test]
    fn bytes_round_trip() {
        let ds = generate_blobs(2, 5, 2, 1.0, 7).unwrap();
        let back = Dataset::from_bytes(&ds.to_bytes(), "x").unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = generate_blobs(2, 5, 2, 1.0, 7).unwrap().to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        match Dataset::from_bytes(&bytes, "x") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_body_is_format_error() {
        let ds = generate_blobs(2, 5, 2, 1.0, 7).unwrap();
        let bytes = ds.to_bytes();
        // drop one label row: header still claims n=10
        let cut = &bytes[..bytes.len() - 4];
        match Dataset::from_bytes(cut, "x") {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset as usize, cut.len());
                assert!(message.contains("truncated"));
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_label_is_validation_error() {
        let mut bytes = generate_blobs(2, 5, 2, 1.0, 7).unwrap().to_bytes();
        let last = bytes.len() - 4;
        bytes[last..].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(Dataset::from_bytes(&bytes, "x"), Err(Error::Validation(_))));
    }

    #[test]
    fn split_pools_cardinality() {
        let ds = generate_blobs(2, 50, 2, 1.0, 1).unwrap();
        let pool = split_pools(&ds, 10, 3).unwrap();
        assert_eq!(pool.labeled().len(), 10);
        assert_eq!(pool.unlabeled().len(), 90);
        assert!(pool.labeled().keys().all(|i| !pool.unlabeled().contains(i)));
        for (&i, &y) in pool.labeled() {
            assert_eq!(y, ds.label(i));
        }
        assert_eq!(pool, split_pools(&ds, 10, 3).unwrap());
        assert!(split_pools(&ds, 100, 3).is_err());
        assert!(split_pools(&ds, 0, 3).is_err());
    }

    #[test]
    fn partition_examples() {
        let idx: Vec<usize> = (0..10).collect();
        let p = partition_unlabeled(&idx, 5, 5, 1).unwrap();
        assert!(p.chunks.iter().all(|c| c.len() == 2));
        assert_eq!(p.per_chunk_budget, vec![1; 5]);

        let p = partition_unlabeled(&idx, 3, 7, 1).unwrap();
        let sizes: Vec<usize> = p.chunks.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        assert_eq!(p.per_chunk_budget, vec![3, 2, 2]);

        let p = partition_unlabeled(&idx[..4], 1, 4, 1).unwrap();
        assert_eq!(p.chunks.len(), 1);
        assert_eq!(p.per_chunk_budget, vec![4]);

        assert!(partition_unlabeled(&idx[..2], 3, 1, 1).is_err());
    }

    #[test]
    fn assign_moves_index() {
        let ds = generate_blobs(2, 5, 2, 1.0, 7).unwrap();
        let mut pool = split_pools(&ds, 2, 0).unwrap();
        let i = *pool.unlabeled().iter().next().unwrap();
        pool.assign(i, 1).unwrap();
        assert_eq!(pool.labeled()[&i], 1);
        assert!(pool.assign(i, 1).is_err());
        assert_eq!(pool.total(), 10);
    }
}
