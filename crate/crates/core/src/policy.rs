//! The hashing agent: an Elman-style recurrence followed by a per-bit
//! logistic policy layer.
//!
//! Bits are produced in action groups of `group_len` steps. The first step of
//! every group reads the image feature through the embedding `w_embed`, with
//! the previous group's last hidden state as the recurrent input (zeros before
//! the first group). Later steps inside a group read the previous hidden state
//! as their input through `w_input`. Sampled actions never re-enter the
//! recurrence, so bit probabilities are a deterministic function of the
//! feature and the parameters.

use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::error::{DataError, Error, Result};
use crate::linalg::{self, Matrix, Rng, Vector};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DRLP";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Contiguous group ranges over `0..bits`; the last group takes the remainder.
pub fn group_ranges(bits: usize, group: usize) -> Vec<Range<usize>> {
    assert!(group >= 1);
    (0..bits)
        .step_by(group)
        .map(|start| start..(start + group).min(bits))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PolicyShape {
    pub hidden: usize,
    pub feature: usize,
    pub bits: usize,
    pub group: usize,
    /// One policy head shared by all steps instead of one per bit.
    pub tied: bool,
}

impl PolicyShape {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.feature == 0 || self.bits == 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden, feature and bits must be >= 1 (got {}, {}, {})",
                self.hidden, self.feature, self.bits
            )));
        }
        if self.group == 0 || self.group > self.bits {
            return Err(Error::InvalidArgument(format!(
                "group length must be in 1..={} (got {})",
                self.bits, self.group
            )));
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        if self.tied {
            1
        } else {
            self.bits
        }
    }

    pub fn groups(&self) -> Vec<Range<usize>> {
        group_ranges(self.bits, self.group)
    }

    pub fn num_params(&self) -> usize {
        let (h, d, p) = (self.hidden, self.feature, self.heads());
        h * d + 2 * h * h + 2 * h + p * h + p
    }
}

/// All learnable tensors of the agent.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    shape: PolicyShape,
    /// `H x D`, applied to the image feature at each group's first step.
    pub w_embed: Matrix,
    /// `H x H`, applied to `x_t = c_{t-1}` inside a group.
    pub w_input: Matrix,
    pub b_input: Vector,
    /// `H x H` recurrent weights.
    pub w_hidden: Matrix,
    pub b_hidden: Vector,
    /// One row per policy head.
    pub w_policy: Matrix,
    pub b_policy: Vector,
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Result<Self> {
        shape.validate()?;
        let (h, d, p) = (shape.hidden, shape.feature, shape.heads());
        Ok(PolicyParams {
            shape,
            w_embed: Matrix::zeros(h, d),
            w_input: Matrix::zeros(h, h),
            b_input: Vector::zeros(h),
            w_hidden: Matrix::zeros(h, h),
            b_hidden: Vector::zeros(h),
            w_policy: Matrix::zeros(p, h),
            b_policy: Vector::zeros(p),
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(shape: PolicyShape, rng: &mut Rng) -> Result<Self> {
        let mut p = PolicyParams::zeros(shape)?;
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let (h, d, heads) = (shape.hidden, shape.feature, shape.heads());
        p.w_embed = Matrix::uniform(h, d, glorot(d, h), rng);
        p.w_input = Matrix::uniform(h, h, glorot(h, h), rng);
        p.w_hidden = Matrix::uniform(h, h, glorot(h, h), rng);
        p.w_policy = Matrix::uniform(heads, h, glorot(h, 1), rng);
        Ok(p)
    }

    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    pub fn num_params(&self) -> usize {
        self.shape.num_params()
    }

    /// Tensors in checkpoint order, with their names.
    pub fn tensors(&self) -> [(&'static str, &[f64]); 7] {
        [
            ("w_embed", self.w_embed.data()),
            ("w_input", self.w_input.data()),
            ("b_input", &self.b_input),
            ("w_hidden", self.w_hidden.data()),
            ("b_hidden", &self.b_hidden),
            ("w_policy", self.w_policy.data()),
            ("b_policy", &self.b_policy),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.w_embed.data_mut(),
            self.w_input.data_mut(),
            &mut self.b_input,
            self.w_hidden.data_mut(),
            &mut self.b_hidden,
            self.w_policy.data_mut(),
            &mut self.b_policy,
        ]
    }

    /// Whether the tensor at checkpoint position `i` is a weight (decayed)
    /// rather than a bias.
    pub fn is_weight(i: usize) -> bool {
        matches!(i, 0 | 1 | 3 | 5)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape("PolicyParams::set_flat", self.num_params(), flat.len()));
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[at..at + t.len()]);
            at += t.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    fn head(&self, step: usize) -> usize {
        if self.shape.tied {
            0
        } else {
            step
        }
    }

    /// Policy-layer weights used at step `step` (0-based).
    pub fn head_weights(&self, step: usize) -> &[f64] {
        self.w_policy.row(self.head(step))
    }

    pub fn head_bias(&self, step: usize) -> f64 {
        self.b_policy[self.head(step)]
    }

    pub(crate) fn head_index(&self, step: usize) -> usize {
        self.head(step)
    }

    /// `c_t = tanh(W x + b_input + W_hidden c_prev + b_hidden)` with
    /// `W = w_embed` when `use_embedding`, else `w_input`.
    pub fn rnn_step(&self, x: &[f64], c_prev: &[f64], use_embedding: bool) -> Result<Vector> {
        let expect = if use_embedding { self.shape.feature } else { self.shape.hidden };
        if x.len() != expect {
            return Err(Error::shape("rnn_step input", expect, x.len()));
        }
        if c_prev.len() != self.shape.hidden {
            return Err(Error::shape("rnn_step hidden", self.shape.hidden, c_prev.len()));
        }
        Ok(self.rnn_step_unchecked(x, c_prev, use_embedding))
    }

    fn rnn_step_unchecked(&self, x: &[f64], c_prev: &[f64], use_embedding: bool) -> Vector {
        let w = if use_embedding { &self.w_embed } else { &self.w_input };
        let mut pre: Vec<f64> = self
            .b_input
            .iter()
            .zip(self.b_hidden.iter())
            .map(|(a, b)| a + b)
            .collect();
        w.matvec_acc(x, &mut pre);
        self.w_hidden.matvec_acc(c_prev, &mut pre);
        linalg::tanh_vec(&pre)
    }

    /// `h_t = sigmoid(w_policy[t] · c_t + b_policy[t])`, `step` 0-based.
    pub fn policy_out(&self, hidden: &[f64], step: usize) -> Result<f64> {
        if step >= self.shape.bits {
            return Err(Error::InvalidArgument(format!(
                "step {step} out of range for {} bits",
                self.shape.bits
            )));
        }
        if hidden.len() != self.shape.hidden {
            return Err(Error::shape("policy_out", self.shape.hidden, hidden.len()));
        }
        Ok(linalg::sigmoid(
            linalg::dot(self.head_weights(step), hidden) + self.head_bias(step),
        ))
    }

    pub fn rollout(&self, feature: &[f64], mode: ActionMode<'_>) -> Result<Rollout> {
        if feature.len() != self.shape.feature {
            return Err(Error::shape("rollout feature", self.shape.feature, feature.len()));
        }
        Ok(self.rollout_unchecked(feature, mode))
    }

    fn rollout_unchecked(&self, feature: &[f64], mut mode: ActionMode<'_>) -> Rollout {
        let groups = self.shape.groups();
        let mut steps: Vec<StepRecord> = Vec::with_capacity(self.shape.bits);
        let zeros = vec![0.0; self.shape.hidden];
        for group in &groups {
            for t in group.clone() {
                let c_prev: &[f64] = steps.last().map_or(&zeros, |s| &s.hidden);
                let first = t == group.start;
                let x = if first { feature } else { c_prev };
                let hidden = self.rnn_step_unchecked(x, c_prev, first).into_inner();
                let prob = linalg::sigmoid(
                    linalg::dot(self.head_weights(t), &hidden) + self.head_bias(t),
                );
                let action = match &mut mode {
                    ActionMode::Greedy => u8::from(prob >= 0.5),
                    ActionMode::Sample(rng) => u8::from(rng.bernoulli(prob)),
                };
                steps.push(StepRecord {
                    hidden,
                    prob,
                    action,
                });
            }
        }
        Rollout {
            feature: feature.to_vec(),
            steps,
            groups,
        }
    }

    /// Greedy binary code for `feature`.
    pub fn encode(&self, feature: &[f64]) -> Result<HashCode> {
        Ok(binarize(&self.rollout(feature, ActionMode::Greedy)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.shape;
        let mut out = Vec::with_capacity(27 + 4 * self.num_params());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for dim in [s.hidden, s.feature, s.bits, s.group] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.push(u8::from(s.tied));
        for (_, t) in self.tensors() {
            for &x in t {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 2 + 16 + 1;
        if bytes.len() < HEADER {
            return Err(DataError::TruncatedPayload {
                expected: HEADER,
                actual: bytes.len(),
            }
            .into());
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(DataError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: bytes[..4].try_into().unwrap(),
            }
            .into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(DataError::UnsupportedVersion(version).into());
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let shape = PolicyShape {
            hidden: word(6),
            feature: word(10),
            bits: word(14),
            group: word(18),
            tied: bytes[22] != 0,
        };
        shape.validate()?;
        let expected = HEADER + 4 * shape.num_params();
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
        let flat: Vec<f64> = bytes[HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let mut params = PolicyParams::zeros(shape)?;
        params.set_flat(&flat)?;
        if !params.is_finite() {
            return Err(Error::NonFinite("checkpoint tensor".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        PolicyParams::from_bytes(&fs::read(path)?)
    }
}

pub enum ActionMode<'a> {
    /// `a_t = 1[h_t >= 0.5]`
    Greedy,
    /// `a_t ~ Bernoulli(h_t)`
    Sample(&'a mut Rng),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub hidden: Vec<f64>,
    pub prob: f64,
    pub action: u8,
}

/// Everything recorded while hashing one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    feature: Vec<f64>,
    steps: Vec<StepRecord>,
    groups: Vec<Range<usize>>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn feature(&self) -> &[f64] {
        &self.feature
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    pub fn is_group_start(&self, t: usize) -> bool {
        self.groups.iter().any(|g| g.start == t)
    }

    pub fn hidden(&self, t: usize) -> &[f64] {
        &self.steps[t].hidden
    }

    /// `c_{t-1}`; `None` at the very first step (zero state).
    pub fn prev_hidden(&self, t: usize) -> Option<&[f64]> {
        t.checked_sub(1).map(|p| self.steps[p].hidden.as_slice())
    }

    /// Input `x_t`: the image feature at group starts, `c_{t-1}` otherwise.
    pub fn input(&self, t: usize) -> &[f64] {
        if self.is_group_start(t) {
            &self.feature
        } else {
            &self.steps[t - 1].hidden
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.prob).collect()
    }

    pub fn actions(&self) -> Vec<u8> {
        self.steps.iter().map(|s| s.action).collect()
    }

    /// Same rollout with the recorded actions replaced.
    pub fn with_actions(&self, actions: &[u8]) -> Result<Rollout> {
        if actions.len() != self.len() {
            return Err(Error::shape("Rollout::with_actions", self.len(), actions.len()));
        }
        let mut out = self.clone();
        for (s, &a) in out.steps.iter_mut().zip(actions) {
            s.action = u8::from(a != 0);
        }
        Ok(out)
    }

    /// `π(A_j) = Π_{t in group j} P(a_t)`.
    pub fn action_group_prob(&self, group: usize) -> f64 {
        self.group_steps(group)
            .map(|s| if s.action == 1 { s.prob } else { 1.0 - s.prob })
            .product()
    }

    pub fn action_group_log_prob(&self, group: usize) -> f64 {
        self.group_steps(group)
            .map(|s| if s.action == 1 { s.prob.ln() } else { (1.0 - s.prob).ln() })
            .sum()
    }

    fn group_steps(&self, group: usize) -> impl Iterator<Item = &StepRecord> {
        self.steps[self.groups[group].clone()].iter()
    }
}

/// `q`-bit binary code packed little-endian into 64-bit words.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HashCode {
    words: Vec<u64>,
    len: usize,
}

impl HashCode {
    pub fn zeros(len: usize) -> Self {
        HashCode {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn from_bits<B: Copy + Into<u64>>(bits: &[B]) -> Self {
        let mut code = HashCode::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b.into() != 0 {
                code.words[i / 64] |= 1 << (i % 64);
            }
        }
        code
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn bits(&self) -> Vec<u8> {
        (0..self.len).map(|i| u8::from(self.bit(i))).collect()
    }

    pub fn complement(&self) -> HashCode {
        let mut out = HashCode {
            words: self.words.iter().map(|w| !w).collect(),
            len: self.len,
        };
        let tail = self.len % 64;
        if tail != 0 {
            *out.words.last_mut().unwrap() &= (1u64 << tail) - 1;
        }
        out
    }

    pub fn hamming(&self, other: &HashCode) -> Result<u32> {
        if self.len != other.len {
            return Err(Error::shape("hamming", self.len, other.len));
        }
        Ok(self.hamming_unchecked(other))
    }

    pub(crate) fn hamming_unchecked(&self, other: &HashCode) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

impl std::fmt::Display for HashCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.bit(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl std::str::FromStr for HashCode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                other => Err(format!("invalid bit `{other}`")),
            })
            .collect::<std::result::Result<Vec<u8>, _>>()?;
        Ok(HashCode::from_bits(&bits))
    }
}

/// `b_t = 1` iff `h_t >= 0.5`. Uses probabilities, not sampled actions.
pub fn binarize(rollout: &Rollout) -> HashCode {
    let bits: Vec<u8> = rollout.steps.iter().map(|s| u8::from(s.prob >= 0.5)).collect();
    HashCode::from_bits(&bits)
}
