//! Hamming-space retrieval and evaluation.
//!
//! Rankings sort the database by ascending Hamming distance with ties broken
//! by ascending database position. Metrics:
//!
//! - MAP over the full ranking (or the top `N` returns), with
//!   `AP = (1/R) Σ_k (R_k / k) · rel_k`; queries with no relevant item are
//!   skipped and counted.
//! - precision at the top `k` returns;
//! - precision of the hash lookup within Hamming radius `r` (distance `<= r`);
//! - precision/recall of the lookup swept over every radius `0..=q`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::dataio::{Dataset, Similarity, Split};
use crate::error::{Error, Result};
use crate::policy::{HashCode, PolicyParams};

/// Anything that maps a feature vector to a binary code.
pub trait Encoder {
    fn code_len(&self) -> usize;
    fn encode(&self, feature: &[f64]) -> Result<HashCode>;
}

impl Encoder for PolicyParams {
    fn code_len(&self) -> usize {
        self.shape().bits
    }

    fn encode(&self, feature: &[f64]) -> Result<HashCode> {
        PolicyParams::encode(self, feature)
    }
}

pub fn encode_all<E: Encoder + Sync>(encoder: &E, dataset: &Dataset, indices: &[usize]) -> Result<Vec<HashCode>> {
    indices
        .par_iter()
        .map(|&i| encoder.encode(dataset.feature(i)))
        .collect()
}

pub fn hamming(a: &HashCode, b: &HashCode) -> Result<u32> {
    a.hamming(b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashIndex {
    codes: Vec<HashCode>,
    ids: Vec<u64>,
    labels: Vec<Vec<u8>>,
    bits: usize,
}

/// Database positions by ascending distance, ties by ascending position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedResult {
    pub order: Vec<usize>,
    pub distances: Vec<u32>,
}

impl HashIndex {
    pub fn new(codes: Vec<HashCode>, ids: Vec<u64>, labels: Vec<Vec<u8>>) -> Result<Self> {
        if codes.len() != ids.len() || codes.len() != labels.len() {
            return Err(Error::shape(
                "HashIndex::new",
                codes.len(),
                format!("{} ids / {} labels", ids.len(), labels.len()),
            ));
        }
        let bits = codes.first().map_or(0, |c| c.len());
        if let Some(c) = codes.iter().find(|c| c.len() != bits) {
            return Err(Error::shape("HashIndex::new code length", bits, c.len()));
        }
        Ok(HashIndex {
            codes,
            ids,
            labels,
            bits,
        })
    }

    pub fn build<E: Encoder + Sync>(encoder: &E, dataset: &Dataset, indices: &[usize]) -> Result<Self> {
        let codes = encode_all(encoder, dataset, indices)?;
        let ids = indices.iter().map(|&i| dataset.id(i)).collect();
        let labels = indices.iter().map(|&i| dataset.labels(i).to_vec()).collect();
        HashIndex::new(codes, ids, labels)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn codes(&self) -> &[HashCode] {
        &self.codes
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self, i: usize) -> &[u8] {
        &self.labels[i]
    }

    fn check_query(&self, query: &HashCode) -> Result<()> {
        if !self.is_empty() && query.len() != self.bits {
            return Err(Error::shape("query code length", self.bits, query.len()));
        }
        Ok(())
    }

    /// Counting sort on distance, which keeps ascending-position ties.
    pub fn rank(&self, query: &HashCode) -> Result<RankedResult> {
        self.check_query(query)?;
        Ok(self.rank_filtered(query, None))
    }

    fn rank_filtered(&self, query: &HashCode, skip_id: Option<u64>) -> RankedResult {
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); self.bits + 1];
        for (i, code) in self.codes.iter().enumerate() {
            if skip_id == Some(self.ids[i]) {
                continue;
            }
            buckets[query.hamming_unchecked(code) as usize].push(i);
        }
        let mut order = Vec::with_capacity(self.len());
        let mut distances = Vec::with_capacity(self.len());
        for (d, bucket) in buckets.into_iter().enumerate() {
            distances.extend(std::iter::repeat_n(d as u32, bucket.len()));
            order.extend(bucket);
        }
        RankedResult { order, distances }
    }

    /// Database positions within distance `<= radius`, ascending. May be empty.
    pub fn lookup_radius(&self, query: &HashCode, radius: u32) -> Result<Vec<usize>> {
        self.check_query(query)?;
        Ok((0..self.len())
            .filter(|&i| query.hamming_unchecked(&self.codes[i]) <= radius)
            .collect())
    }
}

/// AP over a full ranking. `None` when `total_relevant == 0`.
pub fn average_precision(relevance: &[bool], total_relevant: usize) -> Option<f64> {
    if total_relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / total_relevant as f64)
}

/// What a query with no returns inside the lookup radius contributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EmptyPolicy {
    /// Precision 0.
    #[default]
    Zero,
    /// Left out of the average.
    Skip,
}

impl std::str::FromStr for EmptyPolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "zero" => Ok(EmptyPolicy::Zero),
            "skip" => Ok(EmptyPolicy::Skip),
            other => Err(format!("unknown empty-return policy `{other}` (zero|skip)")),
        }
    }
}

impl std::fmt::Display for EmptyPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmptyPolicy::Zero => "zero",
            EmptyPolicy::Skip => "skip",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// MAP over the top `N` returns instead of the full ranking.
    pub top_n: Option<usize>,
    pub topk: Vec<usize>,
    pub radius: u32,
    pub empty_policy: EmptyPolicy,
    /// Drop database entries whose id equals the query's id.
    pub exclude_self: bool,
    pub similarity: Similarity,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            top_n: None,
            topk: vec![1, 5, 10, 20, 50, 100, 200, 500, 1000],
            radius: 2,
            empty_policy: EmptyPolicy::Zero,
            exclude_self: true,
            similarity: Similarity::SharedLabel,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub code: HashCode,
    pub labels: Vec<u8>,
    pub id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub radius: u32,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub map: f64,
    pub top_n: Option<usize>,
    pub queries_evaluated: usize,
    /// Queries with no relevant database item (left out of MAP and PR).
    pub queries_skipped: usize,
    pub topk_precision: Vec<(usize, f64)>,
    pub radius: u32,
    pub radius_precision: f64,
    pub radius_empty: usize,
    pub empty_policy: EmptyPolicy,
    pub pr_curve: Vec<PrPoint>,
}

struct PerQuery {
    ap: Option<f64>,
    topk_hits: Vec<usize>,
    /// Cumulative (retrieved, relevant retrieved) at each radius `0..=q`.
    by_radius: Vec<(usize, usize)>,
    relevant: usize,
}

fn score_query(index: &HashIndex, q: &Query, opts: &EvalOptions) -> PerQuery {
    let skip = opts.exclude_self.then_some(q.id);
    let ranked = index.rank_filtered(&q.code, skip);
    let rel: Vec<bool> = ranked
        .order
        .iter()
        .map(|&i| opts.similarity.similar(&q.labels, index.labels(i)))
        .collect();
    let relevant = rel.iter().filter(|&&r| r).count();
    let ap = match opts.top_n {
        None => average_precision(&rel, relevant),
        Some(n) => {
            let head = &rel[..n.min(rel.len())];
            let hits = head.iter().filter(|&&r| r).count();
            (relevant > 0).then(|| average_precision(head, hits).unwrap_or(0.0))
        }
    };
    let topk_hits = opts
        .topk
        .iter()
        .map(|&k| rel[..k.min(rel.len())].iter().filter(|&&r| r).count())
        .collect();
    let mut by_radius = vec![(0usize, 0usize); index.bits() + 1];
    for (&d, &r) in ranked.distances.iter().zip(&rel) {
        by_radius[d as usize].0 += 1;
        by_radius[d as usize].1 += usize::from(r);
    }
    for d in 1..by_radius.len() {
        by_radius[d].0 += by_radius[d - 1].0;
        by_radius[d].1 += by_radius[d - 1].1;
    }
    PerQuery {
        ap,
        topk_hits,
        by_radius,
        relevant,
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn evaluate(index: &HashIndex, queries: &[Query], opts: &EvalOptions) -> Result<MetricsReport> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("empty query set".into()));
    }
    for q in queries {
        index.check_query(&q.code)?;
        if let Some(first) = index.labels.first() {
            if first.len() != q.labels.len() {
                return Err(Error::shape("query labels", first.len(), q.labels.len()));
            }
        }
    }
    let per: Vec<PerQuery> = queries.par_iter().map(|q| score_query(index, q, opts)).collect();

    let aps: Vec<f64> = per.iter().filter_map(|p| p.ap).collect();
    let skipped = per.len() - aps.len();
    let map = mean(aps.iter().copied());

    let topk_precision = opts
        .topk
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let denom = k.min(index.len()).max(1) as f64;
            (k, mean(per.iter().map(|p| p.topk_hits[j] as f64 / denom)))
        })
        .collect();

    let r = (opts.radius as usize).min(index.bits());
    let lookup = |p: &PerQuery, r: usize| -> Option<f64> {
        let (ret, hit) = p.by_radius[r];
        match (ret, opts.empty_policy) {
            (0, EmptyPolicy::Zero) => Some(0.0),
            (0, EmptyPolicy::Skip) => None,
            _ => Some(hit as f64 / ret as f64),
        }
    };
    let radius_empty = per.iter().filter(|p| p.by_radius[r].0 == 0).count();
    let radius_precision = mean(per.iter().filter_map(|p| lookup(p, r)));

    let with_relevant: Vec<&PerQuery> = per.iter().filter(|p| p.relevant > 0).collect();
    let pr_curve = (0..=index.bits())
        .map(|radius| PrPoint {
            radius: radius as u32,
            precision: mean(with_relevant.iter().filter_map(|p| lookup(p, radius))),
            recall: mean(
                with_relevant
                    .iter()
                    .map(|p| p.by_radius[radius].1 as f64 / p.relevant as f64),
            ),
        })
        .collect();

    Ok(MetricsReport {
        map,
        top_n: opts.top_n,
        queries_evaluated: aps.len(),
        queries_skipped: skipped,
        topk_precision,
        radius: opts.radius,
        radius_precision,
        radius_empty,
        empty_policy: opts.empty_policy,
        pr_curve,
    })
}

/// Encode the split's database and queries with `encoder` and evaluate.
pub fn evaluate_split<E: Encoder + Sync>(
    encoder: &E,
    dataset: &Dataset,
    split: &Split,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let index = HashIndex::build(encoder, dataset, &split.database)?;
    let codes = encode_all(encoder, dataset, &split.query)?;
    let queries: Vec<Query> = split
        .query
        .iter()
        .zip(codes)
        .map(|(&i, code)| Query {
            code,
            labels: dataset.labels(i).to_vec(),
            id: dataset.id(i),
        })
        .collect();
    evaluate(&index, &queries, opts)
}

impl MetricsReport {
    /// `map,top_n,queries_evaluated,queries_skipped`
    pub fn write_map_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "map,top_n,queries_evaluated,queries_skipped")?;
        let top_n = self.top_n.map(|n| n.to_string()).unwrap_or_else(|| "all".into());
        writeln!(w, "{},{},{},{}", self.map, top_n, self.queries_evaluated, self.queries_skipped)?;
        Ok(())
    }

    /// `k,precision`
    pub fn write_topk_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "k,precision")?;
        for (k, p) in &self.topk_precision {
            writeln!(w, "{k},{p}")?;
        }
        Ok(())
    }

    /// `radius,precision,recall`
    pub fn write_pr_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "radius,precision,recall")?;
        for p in &self.pr_curve {
            writeln!(w, "{},{},{}", p.radius, p.precision, p.recall)?;
        }
        Ok(())
    }

    /// `radius,precision,queries_empty,empty_policy`
    pub fn write_radius_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "radius,precision,queries_empty,empty_policy")?;
        writeln!(
            w,
            "{},{},{},{}",
            self.radius, self.radius_precision, self.radius_empty, self.empty_policy
        )?;
        Ok(())
    }

    /// Writes `map.csv`, `topk_precision.csv`, `pr_curve.csv`, `radius2.csv`.
    pub fn write_csvs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.write_map_csv(fs::File::create(dir.join("map.csv"))?)?;
        self.write_topk_csv(fs::File::create(dir.join("topk_precision.csv"))?)?;
        self.write_pr_csv(fs::File::create(dir.join("pr_curve.csv"))?)?;
        self.write_radius_csv(fs::File::create(dir.join("radius2.csv"))?)?;
        Ok(())
    }
}
