//! Datasets of precomputed image features with multi-hot labels.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "DRLH" | version: u16 = 1 | n: u32 | d: u32 | l: u32
//! n*d f32 features, row-major
//! n*l u8 multi-hot labels
//! n u64 ids
//! ```
//!
//! The CSV form carries the same fields with header `id,f0..f{d-1},l0..l{l-1}`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::linalg::{Matrix, Rng};

pub const FEATURE_MAGIC: [u8; 4] = *b"DRLH";
pub const FEATURE_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 * 3;

/// How two label sets decide similarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Similarity {
    /// At least one positive label in common.
    #[default]
    #[serde(rename = "shared")]
    SharedLabel,
    /// Identical label sets.
    #[serde(rename = "exact")]
    ExactLabels,
}

impl Similarity {
    pub fn similar(self, a: &[u8], b: &[u8]) -> bool {
        match self {
            Similarity::SharedLabel => similar(a, b),
            Similarity::ExactLabels => a == b,
        }
    }
}

impl std::str::FromStr for Similarity {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "shared" | "shared-label" => Ok(Similarity::SharedLabel),
            "exact" | "exact-labels" => Ok(Similarity::ExactLabels),
            other => Err(format!("unknown similarity `{other}` (shared|exact)")),
        }
    }
}

impl std::fmt::Display for Similarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Similarity::SharedLabel => "shared",
            Similarity::ExactLabels => "exact",
        })
    }
}

/// True iff the two multi-hot vectors share a positive label.
///
/// # Panics
///
/// If the label vectors differ in length.
pub fn similar(a: &[u8], b: &[u8]) -> bool {
    assert_eq!(a.len(), b.len(), "label dimension mismatch");
    a.iter().zip(b).any(|(&x, &y)| x != 0 && y != 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<u8>,
    num_labels: usize,
    ids: Vec<u64>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<u8>, num_labels: usize, ids: Vec<u64>) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n * num_labels {
            return Err(Error::shape(
                "Dataset::new labels",
                format!("{n}x{num_labels}"),
                labels.len(),
            ));
        }
        if ids.len() != n {
            return Err(Error::shape("Dataset::new ids", n, ids.len()));
        }
        let mut seen = HashSet::with_capacity(n);
        for (row, feats) in features.data().chunks(features.cols().max(1)).enumerate() {
            if features.cols() > 0 && feats.iter().any(|x| !x.is_finite()) {
                return Err(DataError::NonFiniteFeature { row }.into());
            }
        }
        for (row, &id) in ids.iter().enumerate() {
            if !seen.insert(id) {
                return Err(DataError::DuplicateId(id).into());
            }
            let lab = &labels[row * num_labels..(row + 1) * num_labels];
            if let Some(&value) = lab.iter().find(|&&v| v > 1) {
                return Err(DataError::InvalidLabel { row, value }.into());
            }
            if !lab.contains(&1) {
                return Err(DataError::NoPositiveLabel { id }.into());
            }
        }
        Ok(Dataset {
            features,
            labels,
            num_labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn labels(&self, i: usize) -> &[u8] {
        &self.labels[i * self.num_labels..(i + 1) * self.num_labels]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> u64 {
        self.ids[i]
    }

    /// Lowest positive label index; the stratification class of image `i`.
    pub fn primary_label(&self, i: usize) -> usize {
        self.labels(i)
            .iter()
            .position(|&v| v == 1)
            .expect("validated: every image has a positive label")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d, l) = (self.len(), self.dim(), self.num_labels);
        let mut out = Vec::with_capacity(HEADER_LEN + n * (4 * d + l + 8));
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        for dim in [n, d, l] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &x in self.features.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        for &id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && bytes[..4] != FEATURE_MAGIC {
                return Err(bad_magic(&bytes[..4]).into());
            }
            return Err(DataError::TruncatedPayload {
                expected: HEADER_LEN,
                actual: bytes.len(),
            }
            .into());
        }
        if bytes[..4] != FEATURE_MAGIC {
            return Err(bad_magic(&bytes[..4]).into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FEATURE_VERSION {
            return Err(DataError::UnsupportedVersion(version).into());
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let (n, d, l) = (word(6), word(10), word(14));
        if n == 0 || d == 0 || l == 0 {
            return Err(DataError::EmptyDimension { n, d, l }.into());
        }
        let expected = HEADER_LEN + n * (4 * d + l + 8);
        if bytes.len() < expected {
            return Err(DataError::TruncatedPayload {
                expected,
                actual: bytes.len(),
            }
            .into());
        }
        if bytes.len() > expected {
            return Err(DataError::TrailingBytes {
                extra: bytes.len() - expected,
            }
            .into());
        }
        let mut at = HEADER_LEN;
        let features: Vec<f64> = bytes[at..at + 4 * n * d]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        at += 4 * n * d;
        let labels = bytes[at..at + n * l].to_vec();
        at += n * l;
        let ids = bytes[at..]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Dataset::new(Matrix::from_vec(n, d, features)?, labels, l, ids)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string()];
        header.extend((0..self.dim()).map(|j| format!("f{j}")));
        header.extend((0..self.num_labels).map(|j| format!("l{j}")));
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec = vec![self.id(i).to_string()];
            rec.extend(self.feature(i).iter().map(|&x| (x as f32).to_string()));
            rec.extend(self.labels(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(csv_err)?.clone();
        if header.get(0) != Some("id") {
            return Err(DataError::Csv("first column must be `id`".into()).into());
        }
        let d = header.iter().filter(|h| h.starts_with('f')).count();
        let l = header.iter().filter(|h| h.starts_with('l')).count();
        if d + l + 1 != header.len() {
            return Err(DataError::Csv("columns must be id, f*, l*".into()).into());
        }
        let (mut feats, mut labels, mut ids) = (Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let field_err = |what: &str| DataError::Csv(format!("row {row}: bad {what}"));
            ids.push(rec[0].trim().parse::<u64>().map_err(|_| field_err("id"))?);
            for j in 0..d {
                let x: f32 = rec[1 + j].trim().parse().map_err(|_| field_err("feature"))?;
                feats.push(x as f64);
            }
            for j in 0..l {
                labels.push(rec[1 + d + j].trim().parse::<u8>().map_err(|_| field_err("label"))?);
            }
        }
        let n = ids.len();
        if n == 0 || d == 0 || l == 0 {
            return Err(DataError::EmptyDimension { n, d, l }.into());
        }
        Dataset::new(Matrix::from_vec(n, d, feats)?, labels, l, ids)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let d = self.dim();
        let mut feats = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len() * self.num_labels);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(DataError::IndexOutOfRange { index: i, len: self.len() }.into());
            }
            feats.extend_from_slice(self.feature(i));
            labels.extend_from_slice(self.labels(i));
            ids.push(self.id(i));
        }
        Dataset::new(Matrix::from_vec(indices.len(), d, feats)?, labels, self.num_labels, ids)
    }
}

fn bad_magic(found: &[u8]) -> DataError {
    DataError::BadMagic {
        expected: FEATURE_MAGIC,
        found: found[..4].try_into().unwrap(),
    }
}

fn csv_err(e: csv::Error) -> Error {
    DataError::Csv(e.to_string()).into()
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}

pub fn save_features(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset.to_bytes())?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::read_csv(fs::File::open(path)?)
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.write_csv(fs::File::create(path)?)
}

/// Random orthonormal (when `classes <= d`) or random unit-norm centers.
pub fn cluster_centers(classes: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while centers.len() < classes {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        if classes <= d {
            for c in &centers {
                let proj: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        centers.push(v);
    }
    centers
}

/// `classes` Gaussian clusters around distinct unit-norm centers with
/// isotropic noise `sigma`; one label per image. Rows are class-major and
/// ids run `0..n`. Values are rounded to `f32` so that a save/load cycle
/// reproduces the in-memory dataset.
pub fn synth_clusters(classes: usize, per_class: usize, d: usize, sigma: f64, rng: &mut Rng) -> Result<Dataset> {
    if classes < 2 || per_class == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "synth_clusters needs classes >= 2, per_class >= 1, d >= 1 (got {classes}, {per_class}, {d})"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    let centers = cluster_centers(classes, d, rng);
    let n = classes * per_class;
    let mut feats = Vec::with_capacity(n * d);
    let mut labels = vec![0u8; n * classes];
    for (c, center) in centers.iter().enumerate() {
        for j in 0..per_class {
            let row = c * per_class + j;
            feats.extend(center.iter().map(|&m| (m + sigma * rng.normal()) as f32 as f64));
            labels[row * classes + c] = 1;
        }
    }
    Dataset::new(Matrix::from_vec(n, d, feats)?, labels, classes, (0..n as u64).collect())
}

/// Index lists into a [`Dataset`]. Each list is sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub database: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub query_per_class: usize,
    pub train_per_class: usize,
    /// Keep query images in the retrieval database.
    pub query_in_db: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            query_per_class: 100,
            train_per_class: 500,
            query_in_db: false,
        }
    }
}

/// Stratified split by primary label: per class, `query_per_class` queries
/// and `train_per_class` training images drawn without overlap. The
/// database is every non-query image (or every image with `query_in_db`).
pub fn make_split(dataset: &Dataset, config: &SplitConfig, rng: &mut Rng) -> Result<Split> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_labels()];
    for i in 0..dataset.len() {
        by_class[dataset.primary_label(i)].push(i);
    }
    let need = config.query_per_class + config.train_per_class;
    let (mut train, mut query) = (Vec::new(), Vec::new());
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < need {
            return Err(DataError::InsufficientClass {
                class,
                have: members.len(),
                need,
            }
            .into());
        }
        rng.shuffle(members);
        query.extend_from_slice(&members[..config.query_per_class]);
        train.extend_from_slice(&members[config.query_per_class..need]);
    }
    train.sort_unstable();
    query.sort_unstable();
    let database = if config.query_in_db {
        (0..dataset.len()).collect()
    } else {
        let q: HashSet<usize> = query.iter().copied().collect();
        (0..dataset.len()).filter(|i| !q.contains(i)).collect()
    };
    Ok(Split {
        train,
        query,
        database,
    })
}
