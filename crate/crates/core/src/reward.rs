//! Triplet sampling and the rewards derived from the triplet ranking hinge.
//!
//! For a triplet `(a, p, n)` with codes `h(·)`:
//!
//! ```text
//! J = max(0, margin + |h(a) - h(p)|² - |h(a) - h(n)|²)
//! ```
//!
//! The group reward of group `j` is `-J` restricted to that group's bits;
//! the global reward is `-J` over the whole code. One record is shared by the
//! three rollouts of a triplet.

use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Similarity, Split};
use crate::error::{DataError, Error, Result};
use crate::linalg::{self, Rng};
use crate::policy::Rollout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Draws triplets from a fixed pool of training images.
#[derive(Clone, Debug)]
pub struct TripletSampler<'a> {
    dataset: &'a Dataset,
    pool: Vec<usize>,
    similarity: Similarity,
}

impl<'a> TripletSampler<'a> {
    /// Fails if any pool image lacks a similar or a dissimilar peer.
    pub fn new(dataset: &'a Dataset, pool: &[usize], similarity: Similarity) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::InvalidArgument("empty training pool".into()));
        }
        for &i in pool {
            if i >= dataset.len() {
                return Err(DataError::IndexOutOfRange { index: i, len: dataset.len() }.into());
            }
        }
        for &i in pool {
            let (mut pos, mut neg) = (false, false);
            for &j in pool {
                if j == i {
                    continue;
                }
                if similarity.similar(dataset.labels(i), dataset.labels(j)) {
                    pos = true;
                } else {
                    neg = true;
                }
                if pos && neg {
                    break;
                }
            }
            if !pos {
                return Err(DataError::NoPositivePeer { id: dataset.id(i) }.into());
            }
            if !neg {
                return Err(DataError::NoNegativePeer { id: dataset.id(i) }.into());
            }
        }
        Ok(TripletSampler {
            dataset,
            pool: pool.to_vec(),
            similarity,
        })
    }

    /// Anchor uniform over the pool; positive and negative uniform over the
    /// eligible peers of that anchor.
    pub fn sample(&self, batch_size: usize, rng: &mut Rng) -> Vec<Triplet> {
        let mut positives = Vec::with_capacity(self.pool.len());
        let mut negatives = Vec::with_capacity(self.pool.len());
        (0..batch_size)
            .map(|_| {
                let anchor = self.pool[rng.below(self.pool.len())];
                positives.clear();
                negatives.clear();
                let la = self.dataset.labels(anchor);
                for &j in &self.pool {
                    if j == anchor {
                        continue;
                    }
                    if self.similarity.similar(la, self.dataset.labels(j)) {
                        positives.push(j);
                    } else {
                        negatives.push(j);
                    }
                }
                Triplet {
                    anchor,
                    positive: positives[rng.below(positives.len())],
                    negative: negatives[rng.below(negatives.len())],
                }
            })
            .collect()
    }
}

/// One batch of triplets from the split's training images.
pub fn sample_triplets(
    dataset: &Dataset,
    split: &Split,
    batch_size: usize,
    similarity: Similarity,
    rng: &mut Rng,
) -> Result<Vec<Triplet>> {
    Ok(TripletSampler::new(dataset, &split.train, similarity)?.sample(batch_size, rng))
}

/// `margin + |a - p|² - |a - n|²`; positive means the hinge is active.
pub fn hinge_argument(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<f64> {
    if a.len() != p.len() || a.len() != n.len() {
        return Err(Error::shape(
            "triplet_loss",
            a.len(),
            format!("{}/{}", p.len(), n.len()),
        ));
    }
    Ok(margin + linalg::squared_distance(a, p) - linalg::squared_distance(a, n))
}

pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<f64> {
    Ok(hinge_argument(a, p, n, margin)?.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Codes are the bit probabilities.
    #[default]
    Relaxed,
    /// Codes are the sampled 0/1 actions.
    Sampled,
}

impl std::str::FromStr for RewardMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "relaxed" => Ok(RewardMode::Relaxed),
            "sampled" => Ok(RewardMode::Sampled),
            other => Err(format!("unknown reward mode `{other}` (relaxed|sampled)")),
        }
    }
}

impl std::fmt::Display for RewardMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RewardMode::Relaxed => "relaxed",
            RewardMode::Sampled => "sampled",
        })
    }
}

/// Code vector a rollout contributes to the reward under `mode`.
pub fn reward_code(rollout: &Rollout, mode: RewardMode) -> Vec<f64> {
    match mode {
        RewardMode::Relaxed => rollout.probs(),
        RewardMode::Sampled => rollout.actions().into_iter().map(f64::from).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardRecord {
    /// `R^g[j]` per action group.
    pub group: Vec<f64>,
    /// `R^G`.
    pub global: f64,
}

impl RewardRecord {
    pub fn mean_group(&self) -> f64 {
        self.group.iter().sum::<f64>() / self.group.len() as f64
    }
}

pub fn rewards_for(
    anchor: &Rollout,
    positive: &Rollout,
    negative: &Rollout,
    margin: f64,
    mode: RewardMode,
) -> Result<RewardRecord> {
    if anchor.groups() != positive.groups() || anchor.groups() != negative.groups() {
        return Err(Error::shape(
            "rewards_for",
            format!("{} bits/{} groups", anchor.len(), anchor.groups().len()),
            format!("{}/{} bits", positive.len(), negative.len()),
        ));
    }
    let (a, p, n) = (
        reward_code(anchor, mode),
        reward_code(positive, mode),
        reward_code(negative, mode),
    );
    let group = anchor
        .groups()
        .iter()
        .map(|g| {
            triplet_loss(&a[g.clone()], &p[g.clone()], &n[g.clone()], margin).map(|j| -j)
        })
        .collect::<Result<Vec<_>>>()?;
    let global = -triplet_loss(&a, &p, &n, margin)?;
    Ok(RewardRecord { group, global })
}
