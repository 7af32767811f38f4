//! Gradients and training loops.
//!
//! Everything here ascends the reward `R = -J`. Two signals are combined:
//!
//! - the group rewards, through the score-function (REINFORCE) estimator
//!   `Σ_j ∇ log π(A_j) · (R^g_j - b)`;
//! - the global reward, differentiated analytically with respect to the bit
//!   probabilities and pushed back through the recurrence.
//!
//! Both reduce to per-step gradients with respect to the policy logits and
//! share one backward pass ([`bptt_logits`]).

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Similarity, Split};
use crate::error::{Error, Result};
use crate::linalg::{self, streams, Matrix, Rng, Vector};
use crate::policy::{ActionMode, HashCode, PolicyParams, PolicyShape, Rollout};
use crate::retrieval::{self, EvalOptions, Encoder};
use crate::reward::{self, RewardMode, RewardRecord, Triplet, TripletSampler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay_every: usize,
    /// Multiplier applied every `lr_decay_every` steps (0.1 = "divide by 10").
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub margin: f64,
    pub steps: usize,
    pub reward_mode: RewardMode,
    pub reinforce_weight: f64,
    pub global_weight: f64,
    pub baseline_subtract: bool,
    pub hidden: usize,
    pub bits: usize,
    pub group: usize,
    pub tied_policy: bool,
    pub similarity: Similarity,
    /// Evaluate MAP every this many steps (0 = only after the last step).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            lr_decay_every: 10_000,
            lr_decay_factor: 0.1,
            weight_decay: 0.0005,
            momentum: 0.0,
            batch_size: 16,
            margin: 1.0,
            steps: 20_000,
            reward_mode: RewardMode::Relaxed,
            reinforce_weight: 1.0,
            global_weight: 1.0,
            baseline_subtract: false,
            hidden: 4096,
            bits: 32,
            group: 12,
            tied_policy: false,
            similarity: Similarity::SharedLabel,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Small-model profile for synthetic or low-dimensional features: the
    /// default schedule compressed to 2000 steps (one 10x decay halfway),
    /// batch 32 and a per-group REINFORCE baseline.
    pub fn desk() -> Self {
        TrainConfig {
            lr0: DESK_LR,
            lr_decay_every: 1000,
            batch_size: 32,
            baseline_subtract: true,
            hidden: 64,
            bits: 16,
            steps: 2000,
            eval_every: 200,
            ..TrainConfig::default()
        }
    }

    /// Group length 1: every bit is its own action group.
    pub fn no_groups(&self) -> Self {
        TrainConfig {
            group: 1,
            ..self.clone()
        }
    }

    pub fn shape(&self, feature_dim: usize) -> PolicyShape {
        PolicyShape {
            hidden: self.hidden,
            feature: feature_dim,
            bits: self.bits,
            group: self.group,
            tied: self.tied_policy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if self.lr_decay_factor.is_nan() || self.lr_decay_factor <= 0.0 || self.lr_decay_every == 0 {
            return bad("lr decay factor and interval must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.margin.is_nan() || self.margin < 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("margin and weight_decay must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }

    /// `lr0 · factor^⌊step / decay_every⌋`
    pub fn lr(&self, step: usize) -> f64 {
        self.lr0 * self.lr_decay_factor.powi((step / self.lr_decay_every) as i32)
    }
}

/// Learning rate of the desk profile. The per-step gradient is a batch mean;
/// 0.001 barely moves a 64-unit model in 2000 steps, 0.03 and up collapses
/// the codes.
pub const DESK_LR: f64 = 0.005;

/// Gradient storage with the same tensors as [`PolicyParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradAccumulator(PolicyParams);

impl GradAccumulator {
    pub fn zeros(shape: PolicyShape) -> Result<Self> {
        Ok(GradAccumulator(PolicyParams::zeros(shape)?))
    }

    pub fn as_params(&self) -> &PolicyParams {
        &self.0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.to_flat()
    }

    pub fn add_scaled(&mut self, other: &GradAccumulator, scale: f64) {
        for (dst, (_, src)) in self.0.tensors_mut().into_iter().zip(other.0.tensors()) {
            linalg::axpy(scale, src, dst);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.0.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// `(tensor name, index)` of the first non-finite entry.
    pub fn first_non_finite(&self) -> Option<(&'static str, usize)> {
        self.0.tensors().into_iter().find_map(|(name, t)| {
            t.iter().position(|x| !x.is_finite()).map(|i| (name, i))
        })
    }
}

/// `∂J/∂h` for the hinge: `(2(n - p), 2(p - a), 2(a - n))` when active, zeros
/// otherwise.
pub fn triplet_loss_subgrads(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<[Vector; 3]> {
    let active = reward::hinge_argument(a, p, n, margin)? > 0.0;
    let ind = if active { 2.0 } else { 0.0 };
    let ga = a.iter().zip(p).zip(n).map(|((_, p), n)| ind * (n - p)).collect::<Vec<_>>();
    let gp = a.iter().zip(p).map(|(a, p)| ind * (p - a)).collect::<Vec<_>>();
    let gn = a.iter().zip(n).map(|(a, n)| ind * (a - n)).collect::<Vec<_>>();
    Ok([ga.into(), gp.into(), gn.into()])
}

/// `∂R^G/∂h` with `R^G = -J`: the negated hinge subgradients.
pub fn global_reward_subgrads(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<[Vector; 3]> {
    let mut g = triplet_loss_subgrads(a, p, n, margin)?;
    for v in &mut g {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(g)
}

/// Backpropagate per-step output gradients `δ_t = ∂F/∂h_t` through the
/// rollout and add `∂F/∂θ` to `acc`.
pub fn bptt(params: &PolicyParams, rollout: &Rollout, dprob: &[f64], acc: &mut GradAccumulator) -> Result<()> {
    if dprob.len() != rollout.len() {
        return Err(Error::shape("bptt", rollout.len(), dprob.len()));
    }
    let dlogits: Vec<f64> = rollout
        .steps()
        .iter()
        .zip(dprob)
        .map(|(s, d)| d * s.prob * (1.0 - s.prob))
        .collect();
    bptt_logits(params, rollout, &dlogits, acc)
}

/// Backward pass given gradients with respect to the policy logits
/// `z_t = w_policy[t] · c_t + b_policy[t]`.
///
/// `δc_t = w_policy[t] δz_t + δc_t^{(t+1)}` and `δpre_t = (1 - c_t²) ⊙ δc_t`;
/// the hidden state feeds step `t+1` both through `w_hidden` and, inside a
/// group, as the input `x_{t+1}` through `w_input`.
pub fn bptt_logits(params: &PolicyParams, rollout: &Rollout, dlogits: &[f64], acc: &mut GradAccumulator) -> Result<()> {
    let shape = params.shape();
    if rollout.len() != shape.bits || dlogits.len() != shape.bits {
        return Err(Error::shape(
            "bptt_logits",
            shape.bits,
            format!("rollout {} / grads {}", rollout.len(), dlogits.len()),
        ));
    }
    if acc.0.shape() != shape {
        return Err(Error::shape("bptt_logits accumulator", format!("{shape:?}"), format!("{:?}", acc.0.shape())));
    }
    let g = &mut acc.0;
    let h = shape.hidden;
    let mut dc_next = vec![0.0; h];
    let mut dpre = vec![0.0; h];
    for t in (0..shape.bits).rev() {
        let dz = dlogits[t];
        let c = rollout.hidden(t);
        let head = params.head_index(t);
        if dz != 0.0 {
            linalg::axpy(dz, c, g.w_policy.row_mut(head));
            g.b_policy[head] += dz;
            linalg::axpy(dz, params.w_policy.row(head), &mut dc_next);
        }
        for ((dp, dc), ci) in dpre.iter_mut().zip(&dc_next).zip(c) {
            *dp = dc * (1.0 - ci * ci);
        }
        linalg::axpy(1.0, &dpre, &mut g.b_input);
        linalg::axpy(1.0, &dpre, &mut g.b_hidden);
        dc_next.iter_mut().for_each(|x| *x = 0.0);
        if let Some(c_prev) = rollout.prev_hidden(t) {
            g.w_hidden.add_outer_unchecked(1.0, &dpre, c_prev);
            params.w_hidden.matvec_t_acc(&dpre, &mut dc_next);
        }
        if rollout.is_group_start(t) {
            g.w_embed.add_outer_unchecked(1.0, &dpre, rollout.feature());
        } else {
            let x = rollout.input(t);
            g.w_input.add_outer_unchecked(1.0, &dpre, x);
            params.w_input.matvec_t_acc(&dpre, &mut dc_next);
        }
    }
    Ok(())
}

/// Gradient of `Σ_j log π(A_j) · advantage_j` for one rollout. Per bit,
/// `∂ log P(a_t)/∂z_t = a_t - h_t`.
pub fn reinforce_rollout(
    params: &PolicyParams,
    rollout: &Rollout,
    advantages: &[f64],
    acc: &mut GradAccumulator,
) -> Result<()> {
    if advantages.len() != rollout.groups().len() {
        return Err(Error::shape("reinforce_rollout", rollout.groups().len(), advantages.len()));
    }
    let mut dlogits = vec![0.0; rollout.len()];
    for (g, &adv) in rollout.groups().iter().zip(advantages) {
        for t in g.clone() {
            let s = &rollout.steps()[t];
            dlogits[t] = (f64::from(s.action) - s.prob) * adv;
        }
    }
    bptt_logits(params, rollout, &dlogits, acc)
}

/// Per-group batch means of the group rewards, used as the baseline.
pub fn group_baseline(records: &[RewardRecord]) -> Vec<f64> {
    let groups = records.first().map_or(0, |r| r.group.len());
    let mut b = vec![0.0; groups];
    for r in records {
        linalg::axpy(1.0, &r.group, &mut b);
    }
    b.iter_mut().for_each(|x| *x /= records.len() as f64);
    b
}

/// REINFORCE contribution of a batch: for each triplet, each of its three
/// rollouts is credited with that triplet's group rewards (minus the batch
/// baseline when enabled). Summed, not averaged.
pub fn reinforce_grads(
    params: &PolicyParams,
    rollouts: &[[Rollout; 3]],
    records: &[RewardRecord],
    baseline_subtract: bool,
    acc: &mut GradAccumulator,
) -> Result<()> {
    if rollouts.len() != records.len() {
        return Err(Error::shape("reinforce_grads", rollouts.len(), records.len()));
    }
    let baseline = if baseline_subtract && !records.is_empty() {
        group_baseline(records)
    } else {
        vec![0.0; records.first().map_or(0, |r| r.group.len())]
    };
    for (triplet, rec) in rollouts.iter().zip(records) {
        let adv: Vec<f64> = rec.group.iter().zip(&baseline).map(|(r, b)| r - b).collect();
        for r in triplet {
            reinforce_rollout(params, r, &adv, acc)?;
        }
    }
    Ok(())
}

/// Analytic `∇θ R^G` for one triplet, on the relaxed (probability) codes.
pub fn global_grads(params: &PolicyParams, triplet: &[Rollout; 3], margin: f64, acc: &mut GradAccumulator) -> Result<()> {
    let [a, p, n] = triplet;
    let grads = global_reward_subgrads(&a.probs(), &p.probs(), &n.probs(), margin)?;
    for (r, g) in triplet.iter().zip(&grads) {
        if g.iter().any(|x| *x != 0.0) {
            bptt(params, r, g, acc)?;
        }
    }
    Ok(())
}

fn check_finite(acc: &GradAccumulator, what: &str) -> Result<()> {
    match acc.first_non_finite() {
        Some((name, i)) => Err(Error::NonFinite(format!("{what} gradient {name}[{i}]"))),
        None => Ok(()),
    }
}

/// SGD with optional momentum over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer {
    velocity: Vec<f64>,
    decay_mask: Vec<bool>,
}

impl Optimizer {
    pub fn new(decay_mask: Vec<bool>) -> Self {
        Optimizer {
            velocity: vec![0.0; decay_mask.len()],
            decay_mask,
        }
    }

    pub fn for_policy(shape: PolicyShape) -> Result<Self> {
        let zeros = PolicyParams::zeros(shape)?;
        let mask = zeros
            .tensors()
            .iter()
            .enumerate()
            .flat_map(|(i, (_, t))| std::iter::repeat_n(PolicyParams::is_weight(i), t.len()))
            .collect();
        Ok(Optimizer::new(mask))
    }

    /// `θ ← θ + lr·ascent - lr·wd·θ_weights`, with the whole increment routed
    /// through the momentum buffer when `momentum > 0`.
    pub fn apply(&mut self, theta: &mut [f64], ascent: &[f64], lr: f64, config: &TrainConfig) {
        for i in 0..theta.len() {
            let decay = if self.decay_mask[i] { config.weight_decay * theta[i] } else { 0.0 };
            let delta = lr * (ascent[i] - decay);
            if config.momentum > 0.0 {
                self.velocity[i] = config.momentum * self.velocity[i] + delta;
                theta[i] += self.velocity[i];
            } else {
                theta[i] += delta;
            }
        }
    }
}

/// One plain SGD step on the combined ascent direction
/// `reinforce_weight · g_reinforce + global_weight · g_global`.
pub fn sgd_step(
    params: &PolicyParams,
    g_reinforce: &GradAccumulator,
    g_global: &GradAccumulator,
    step: usize,
    config: &TrainConfig,
) -> Result<PolicyParams> {
    let mut opt = Optimizer::for_policy(params.shape())?;
    let mut out = params.clone();
    sgd_step_with(&mut out, g_reinforce, g_global, step, config, &mut opt)?;
    Ok(out)
}

fn sgd_step_with(
    params: &mut PolicyParams,
    g_reinforce: &GradAccumulator,
    g_global: &GradAccumulator,
    step: usize,
    config: &TrainConfig,
    opt: &mut Optimizer,
) -> Result<()> {
    if g_reinforce.0.shape() != params.shape() || g_global.0.shape() != params.shape() {
        return Err(Error::shape("sgd_step", format!("{:?}", params.shape()), "gradient shape"));
    }
    check_finite(g_reinforce, "reinforce")?;
    check_finite(g_global, "global")?;
    let mut ascent = g_reinforce.to_flat();
    ascent.iter_mut().for_each(|x| *x *= config.reinforce_weight);
    linalg::axpy(config.global_weight, &g_global.to_flat(), &mut ascent);
    let mut theta = params.to_flat();
    opt.apply(&mut theta, &ascent, config.lr(step), config);
    if let Some(i) = theta.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("parameter {i} after step {step}")));
    }
    params.set_flat(&theta)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub mean_j: f64,
    pub mean_r_group: f64,
    pub eval_map: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// MAP of the initial parameters on the split.
    pub initial_map: Option<f64>,
}

impl TrainLog {
    pub fn final_map(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_map)
    }

    /// Mean of `mean_j` over consecutive windows of `window` steps.
    pub fn windowed_mean_j(&self, window: usize) -> Vec<f64> {
        self.rows
            .chunks(window)
            .filter(|c| c.len() == window)
            .map(|c| c.iter().map(|r| r.mean_j).sum::<f64>() / window as f64)
            .collect()
    }

    /// CSV with columns `step,lr,mean_J,mean_R_group,eval_MAP`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,lr,mean_J,mean_R_group,eval_MAP")?;
        for r in &self.rows {
            let map = r.eval_map.map(|m| m.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{}", r.step, r.lr, r.mean_j, r.mean_r_group, map)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<P> {
    pub params: P,
    pub log: TrainLog,
}

/// Initial parameters exactly as [`train`] draws them.
pub fn initial_params(config: &TrainConfig, feature_dim: usize) -> Result<PolicyParams> {
    PolicyParams::init(config.shape(feature_dim), &mut Rng::new(config.seed).fork(streams::INIT))
}

fn eval_map<E: Encoder + Sync>(encoder: &E, dataset: &Dataset, split: &Split, config: &TrainConfig) -> Result<f64> {
    let opts = EvalOptions {
        similarity: config.similarity,
        ..EvalOptions::default()
    };
    Ok(retrieval::evaluate_split(encoder, dataset, split, &opts)?.map)
}

/// Sample triplets, roll out with sampled actions, reward, differentiate,
/// step. Deterministic for a given config.
pub fn train(dataset: &Dataset, split: &Split, config: &TrainConfig) -> Result<TrainOutcome<PolicyParams>> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let mut params = initial_params(config, dataset.dim())?;
    let sampler = TripletSampler::new(dataset, &split.train, config.similarity)?;
    let mut sample_rng = root.fork(streams::SAMPLER);
    let mut action_rng = root.fork(streams::ACTIONS);
    let mut opt = Optimizer::for_policy(params.shape())?;
    let mut log = TrainLog::default();
    if config.steps > 0 && !split.query.is_empty() {
        log.initial_map = Some(eval_map(&params, dataset, split, config)?);
    }
    let inv_batch = 1.0 / config.batch_size as f64;

    for step in 0..config.steps {
        let triplets = sampler.sample(config.batch_size, &mut sample_rng);
        let rollouts: Vec<[Rollout; 3]> = triplets
            .iter()
            .map(|t| triplet_rollouts(&params, dataset, t, &mut action_rng))
            .collect::<Result<_>>()?;
        let records: Vec<RewardRecord> = rollouts
            .iter()
            .map(|[a, p, n]| reward::rewards_for(a, p, n, config.margin, config.reward_mode))
            .collect::<Result<_>>()?;
        let mean_j = rollouts
            .iter()
            .map(|[a, p, n]| reward::triplet_loss(&a.probs(), &p.probs(), &n.probs(), config.margin))
            .sum::<Result<f64>>()?
            * inv_batch;
        let mean_r_group = records.iter().map(|r| r.mean_group()).sum::<f64>() * inv_batch;

        let shape = params.shape();
        let per_triplet: Vec<GradAccumulator> = rollouts
            .par_iter()
            .map(|tr| {
                let mut acc = GradAccumulator::zeros(shape)?;
                global_grads(&params, tr, config.margin, &mut acc)?;
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        let mut g_global = GradAccumulator::zeros(shape)?;
        for acc in &per_triplet {
            g_global.add_scaled(acc, inv_batch);
        }
        let mut g_reinforce = GradAccumulator::zeros(shape)?;
        if config.reinforce_weight != 0.0 {
            reinforce_grads(&params, &rollouts, &records, config.baseline_subtract, &mut g_reinforce)?;
            g_reinforce.scale(inv_batch);
        }

        let lr = config.lr(step);
        sgd_step_with(&mut params, &g_reinforce, &g_global, step, config, &mut opt)?;

        let eval_now = step + 1 == config.steps
            || (config.eval_every > 0 && (step + 1) % config.eval_every == 0);
        let eval_map = if eval_now && !split.query.is_empty() {
            Some(eval_map(&params, dataset, split, config)?)
        } else {
            None
        };
        log.rows.push(LogRow {
            step,
            lr,
            mean_j,
            mean_r_group,
            eval_map,
        });
    }
    Ok(TrainOutcome { params, log })
}

fn triplet_rollouts(params: &PolicyParams, ds: &Dataset, t: &Triplet, rng: &mut Rng) -> Result<[Rollout; 3]> {
    Ok([
        params.rollout(ds.feature(t.anchor), ActionMode::Sample(rng))?,
        params.rollout(ds.feature(t.positive), ActionMode::Sample(rng))?,
        params.rollout(ds.feature(t.negative), ActionMode::Sample(rng))?,
    ])
}

/// Single fully connected hashing layer `h = sigmoid(W x + b)`, trained on
/// the triplet hinge alone.
#[derive(Clone, Debug, PartialEq)]
pub struct NoSeqParams {
    pub weights: Matrix,
    pub bias: Vector,
}

impl NoSeqParams {
    pub fn init(bits: usize, feature: usize, rng: &mut Rng) -> Result<Self> {
        if bits == 0 || feature == 0 {
            return Err(Error::InvalidArgument("bits and feature must be >= 1".into()));
        }
        let s = (6.0 / (feature + bits) as f64).sqrt();
        Ok(NoSeqParams {
            weights: Matrix::uniform(bits, feature, s, rng),
            bias: Vector::zeros(bits),
        })
    }

    pub fn bits(&self) -> usize {
        self.weights.rows()
    }

    pub fn probs(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let z = linalg::matvec(&self.weights, feature)?;
        Ok(z.iter().zip(self.bias.iter()).map(|(z, b)| linalg::sigmoid(z + b)).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.weights.data().iter().chain(self.bias.iter()).copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let nw = self.weights.data().len();
        if flat.len() != nw + self.bias.dim() {
            return Err(Error::shape("NoSeqParams::set_flat", nw + self.bias.dim(), flat.len()));
        }
        self.weights.data_mut().copy_from_slice(&flat[..nw]);
        self.bias.copy_from_slice(&flat[nw..]);
        Ok(())
    }

    /// `∇θ R^G` for one triplet of features, flattened as [`Self::to_flat`].
    pub fn global_grad(&self, a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<Vec<f64>> {
        let feats = [a, p, n];
        let probs = [self.probs(a)?, self.probs(p)?, self.probs(n)?];
        let grads = global_reward_subgrads(&probs[0], &probs[1], &probs[2], margin)?;
        let mut gw = Matrix::zeros(self.bits(), self.weights.cols());
        let mut gb = vec![0.0; self.bits()];
        for ((x, h), g) in feats.iter().zip(&probs).zip(&grads) {
            let dz: Vec<f64> = h.iter().zip(g.iter()).map(|(h, g)| g * h * (1.0 - h)).collect();
            gw.add_outer(1.0, &dz, x)?;
            linalg::axpy(1.0, &dz, &mut gb);
        }
        let mut out = gw.data().to_vec();
        out.extend_from_slice(&gb);
        Ok(out)
    }
}

/// The no-sequence baseline: same sampler, schedule and weight decay as
/// [`train`], hinge gradient only.
pub fn train_noseq(dataset: &Dataset, split: &Split, config: &TrainConfig) -> Result<TrainOutcome<NoSeqParams>> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let mut params = NoSeqParams::init(config.bits, dataset.dim(), &mut root.fork(streams::INIT))?;
    let sampler = TripletSampler::new(dataset, &split.train, config.similarity)?;
    let mut sample_rng = root.fork(streams::SAMPLER);
    let nw = params.weights.data().len();
    let mask: Vec<bool> = (0..nw + params.bias.dim()).map(|i| i < nw).collect();
    let mut opt = Optimizer::new(mask);
    let mut log = TrainLog::default();
    if config.steps > 0 && !split.query.is_empty() {
        log.initial_map = Some(eval_map(&params, dataset, split, config)?);
    }
    let inv_batch = 1.0 / config.batch_size as f64;

    for step in 0..config.steps {
        let triplets = sampler.sample(config.batch_size, &mut sample_rng);
        let mut grad = vec![0.0; nw + params.bias.dim()];
        let mut mean_j = 0.0;
        for t in &triplets {
            let (a, p, n) = (dataset.feature(t.anchor), dataset.feature(t.positive), dataset.feature(t.negative));
            mean_j += reward::triplet_loss(&params.probs(a)?, &params.probs(p)?, &params.probs(n)?, config.margin)?;
            linalg::axpy(inv_batch, &params.global_grad(a, p, n, config.margin)?, &mut grad);
        }
        mean_j *= inv_batch;
        if let Some(i) = grad.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("noseq gradient {i} at step {step}")));
        }
        grad.iter_mut().for_each(|g| *g *= config.global_weight);
        let lr = config.lr(step);
        let mut theta = params.to_flat();
        opt.apply(&mut theta, &grad, lr, config);
        params.set_flat(&theta)?;

        let eval_now = step + 1 == config.steps
            || (config.eval_every > 0 && (step + 1) % config.eval_every == 0);
        let eval_map = if eval_now && !split.query.is_empty() {
            Some(eval_map(&params, dataset, split, config)?)
        } else {
            None
        };
        log.rows.push(LogRow {
            step,
            lr,
            mean_j,
            mean_r_group: -mean_j,
            eval_map,
        });
    }
    Ok(TrainOutcome { params, log })
}

impl Encoder for NoSeqParams {
    fn code_len(&self) -> usize {
        self.bits()
    }

    fn encode(&self, feature: &[f64]) -> Result<HashCode> {
        let bits: Vec<u8> = self.probs(feature)?.iter().map(|&h| u8::from(h >= 0.5)).collect();
        Ok(HashCode::from_bits(&bits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{make_split, synth_clusters, SplitConfig};
    use crate::linalg::finite_diff;

    fn shape(h: usize, d: usize, q: usize, k: usize) -> PolicyShape {
        PolicyShape {
            hidden: h,
            feature: d,
            bits: q,
            group: k,
            tied: false,
        }
    }

    fn random_params(s: PolicyShape, rng: &mut Rng, scale: f64) -> PolicyParams {
        let mut p = PolicyParams::zeros(s).unwrap();
        let flat: Vec<f64> = (0..p.num_params()).map(|_| scale * rng.normal()).collect();
        p.set_flat(&flat).unwrap();
        p
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn subgrads_vanish_when_hinge_inactive_or_symmetric() {
        let [a, p, n] = global_reward_subgrads(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
        assert!(a.iter().chain(p.iter()).chain(n.iter()).all(|x| *x == 0.0));
        let h = [0.2, 0.7, 0.4];
        let g = global_reward_subgrads(&h, &h, &h, 1.0).unwrap();
        assert!(g.iter().all(|v| v.iter().all(|x| *x == 0.0)));
        assert!(global_reward_subgrads(&h, &h[..2], &h, 1.0).is_err());
    }

    #[test]
    fn loss_subgrads_match_finite_differences_of_the_hinge() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let v: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.uniform()).collect()).collect();
            let margin = 1.0;
            let s = reward::hinge_argument(&v[0], &v[1], &v[2], margin).unwrap();
            if s.abs() < 1e-3 {
                continue;
            }
            let loss = triplet_loss_subgrads(&v[0], &v[1], &v[2], margin).unwrap();
            let reward = global_reward_subgrads(&v[0], &v[1], &v[2], margin).unwrap();
            for role in 0..3 {
                let fd = finite_diff(
                    |x| {
                        let mut args = v.clone();
                        args[role] = x.to_vec();
                        reward::triplet_loss(&args[0], &args[1], &args[2], margin).unwrap()
                    },
                    &v[role],
                    1e-6,
                )
                .unwrap();
                for i in 0..5 {
                    assert!(rel_err(loss[role][i], fd[i]) < 1e-6, "role {role}: {} vs {}", loss[role][i], fd[i]);
                    assert_eq!(reward[role][i], -loss[role][i]);
                }
            }
        }
    }

    #[test]
    fn bptt_with_zero_output_grads_is_zero() {
        let mut rng = Rng::new(1);
        let p = random_params(shape(4, 3, 6, 3), &mut rng, 0.5);
        let r = p.rollout(&[0.3, -0.1, 0.8], ActionMode::Greedy).unwrap();
        let mut acc = GradAccumulator::zeros(p.shape()).unwrap();
        bptt(&p, &r, &[0.0; 6], &mut acc).unwrap();
        assert!(acc.to_flat().iter().all(|x| *x == 0.0));
        assert!(bptt(&p, &r, &[0.0; 5], &mut acc).is_err());
    }

    #[test]
    fn single_bit_bptt_is_plain_backprop() {
        let mut rng = Rng::new(2);
        let p = random_params(shape(3, 2, 1, 1), &mut rng, 0.7);
        let x = [0.4, -1.2];
        let r = p.rollout(&x, ActionMode::Greedy).unwrap();
        let mut acc = GradAccumulator::zeros(p.shape()).unwrap();
        bptt(&p, &r, &[1.0], &mut acc).unwrap();
        // Hand chain rule: h = σ(w·tanh(W x + b1 + b2) + v)
        let c = r.hidden(0);
        let h = r.steps()[0].prob;
        let dz = h * (1.0 - h);
        let g = acc.as_params();
        assert!((g.b_policy[0] - dz).abs() < 1e-15);
        for i in 0..3 {
            assert!((g.w_policy.get(0, i) - dz * c[i]).abs() < 1e-15);
            let dpre = dz * p.w_policy.get(0, i) * (1.0 - c[i] * c[i]);
            assert!((g.b_input[i] - dpre).abs() < 1e-15);
            for j in 0..2 {
                assert!((g.w_embed.get(i, j) - dpre * x[j]).abs() < 1e-15);
            }
        }
        assert!(g.w_hidden.data().iter().chain(g.w_input.data()).all(|v| *v == 0.0));
    }

    fn global_objective(p: &PolicyParams, feats: &[Vec<f64>; 3], margin: f64) -> f64 {
        let probs: Vec<Vec<f64>> = feats
            .iter()
            .map(|f| p.rollout(f, ActionMode::Greedy).unwrap().probs())
            .collect();
        -reward::triplet_loss(&probs[0], &probs[1], &probs[2], margin).unwrap()
    }

    #[test]
    fn global_gradient_matches_finite_differences() {
        let mut rng = Rng::new(3);
        for s in [shape(8, 8, 6, 3), shape(5, 4, 7, 3), shape(4, 6, 5, 5), shape(4, 3, 4, 1)] {
            let p = random_params(s, &mut rng, 0.6);
            let feats: [Vec<f64>; 3] = std::array::from_fn(|_| (0..s.feature).map(|_| rng.normal()).collect());
            let rollouts: [Rollout; 3] =
                std::array::from_fn(|i| p.rollout(&feats[i], ActionMode::Greedy).unwrap());
            let mut acc = GradAccumulator::zeros(s).unwrap();
            global_grads(&p, &rollouts, 1.0, &mut acc).unwrap();
            let analytic = acc.to_flat();
            let fd = finite_diff(
                |theta| {
                    let mut q = p.clone();
                    q.set_flat(theta).unwrap();
                    global_objective(&q, &feats, 1.0)
                },
                &p.to_flat(),
                1e-5,
            )
            .unwrap();
            let worst = analytic.iter().zip(fd.iter()).map(|(a, b)| rel_err(*a, *b)).fold(0.0, f64::max);
            assert!(worst < 1e-5, "{s:?}: worst rel err {worst}");
        }
    }

    #[test]
    fn reinforce_single_bit_identity() {
        // k = 1, a = 1: ∂ log h / ∂θ = (∂h/∂θ) / h.
        let mut rng = Rng::new(4);
        let p = random_params(shape(3, 2, 1, 1), &mut rng, 0.5);
        let r = p.rollout(&[0.5, 0.1], ActionMode::Greedy).unwrap().with_actions(&[1]).unwrap();
        let h = r.steps()[0].prob;
        let mut score = GradAccumulator::zeros(p.shape()).unwrap();
        reinforce_rollout(&p, &r, &[1.0], &mut score).unwrap();
        let mut dh = GradAccumulator::zeros(p.shape()).unwrap();
        bptt(&p, &r, &[1.0], &mut dh).unwrap();
        for (s, d) in score.to_flat().iter().zip(dh.to_flat()) {
            assert!((s - d / h).abs() < 1e-12);
        }
    }

    #[test]
    fn reinforce_with_zero_rewards_is_zero() {
        let mut rng = Rng::new(5);
        let p = random_params(shape(4, 3, 6, 2), &mut rng, 0.5);
        let r = p.rollout(&[0.1, 0.2, 0.3], ActionMode::Sample(&mut rng)).unwrap();
        let rec = RewardRecord {
            group: vec![0.0; 3],
            global: 0.0,
        };
        let mut acc = GradAccumulator::zeros(p.shape()).unwrap();
        reinforce_grads(&p, &[[r.clone(), r.clone(), r]], &[rec], false, &mut acc).unwrap();
        assert!(acc.to_flat().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn reinforce_matches_finite_differences_of_log_probability() {
        let mut rng = Rng::new(6);
        let s = shape(5, 4, 7, 3);
        let p = random_params(s, &mut rng, 0.6);
        let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let r = p.rollout(&x, ActionMode::Sample(&mut rng)).unwrap();
        let adv = [-0.7, 0.3, -1.1];
        let mut acc = GradAccumulator::zeros(s).unwrap();
        reinforce_rollout(&p, &r, &adv, &mut acc).unwrap();
        let actions = r.actions();
        let fd = finite_diff(
            |theta| {
                let mut q = p.clone();
                q.set_flat(theta).unwrap();
                let rq = q.rollout(&x, ActionMode::Greedy).unwrap().with_actions(&actions).unwrap();
                (0..3).map(|j| rq.action_group_log_prob(j) * adv[j]).sum()
            },
            &p.to_flat(),
            1e-5,
        )
        .unwrap();
        for (a, b) in acc.to_flat().iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b) < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr(0), 0.001);
        assert_eq!(c.lr(9999), 0.001);
        assert!((c.lr(10_000) - 0.0001).abs() < 1e-18);
        assert!((c.lr(25_000) - 0.00001).abs() < 1e-18);
        let mut last = f64::INFINITY;
        for step in (0..50_000).step_by(977) {
            assert!(c.lr(step) <= last);
            last = c.lr(step);
        }
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let s = shape(3, 3, 4, 2);
        let p = PolicyParams::init(s, &mut Rng::new(7)).unwrap();
        let z = GradAccumulator::zeros(s).unwrap();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        assert_eq!(sgd_step(&p, &z, &z, 0, &cfg).unwrap(), p);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let s = shape(2, 2, 2, 1);
        let mut p = PolicyParams::zeros(s).unwrap();
        p.set_flat(&vec![1.0; p.num_params()]).unwrap();
        let z = GradAccumulator::zeros(s).unwrap();
        let cfg = TrainConfig {
            lr0: 0.1,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let q = sgd_step(&p, &z, &z, 0, &cfg).unwrap();
        assert!(q.w_embed.data().iter().all(|x| (*x - 0.95).abs() < 1e-15));
        assert!(q.w_policy.data().iter().all(|x| (*x - 0.95).abs() < 1e-15));
        assert!(q.b_input.iter().chain(q.b_hidden.iter()).chain(q.b_policy.iter()).all(|x| *x == 1.0));
    }

    #[test]
    fn sgd_step_combines_signals_with_weights() {
        let s = shape(2, 2, 2, 2);
        let p = PolicyParams::zeros(s).unwrap();
        let mut gr = GradAccumulator::zeros(s).unwrap();
        let mut gg = GradAccumulator::zeros(s).unwrap();
        gr.0.b_policy[0] = 1.0;
        gg.0.b_policy[0] = 2.0;
        let cfg = TrainConfig {
            lr0: 0.5,
            reinforce_weight: 3.0,
            global_weight: 0.25,
            ..TrainConfig::default()
        };
        let q = sgd_step(&p, &gr, &gg, 0, &cfg).unwrap();
        assert!((q.b_policy[0] - 0.5 * (3.0 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let s = shape(2, 2, 2, 2);
        let p = PolicyParams::zeros(s).unwrap();
        let mut g = GradAccumulator::zeros(s).unwrap();
        g.0.w_hidden.set(1, 0, f64::NAN);
        let z = GradAccumulator::zeros(s).unwrap();
        let err = sgd_step(&p, &g, &z, 0, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("w_hidden")), "{err}");
    }

    #[test]
    fn noseq_gradient_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let mut p = NoSeqParams::init(6, 5, &mut rng).unwrap();
        let flat: Vec<f64> = p.to_flat().iter().map(|_| rng.normal()).collect();
        p.set_flat(&flat).unwrap();
        let f: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let analytic = p.global_grad(&f[0], &f[1], &f[2], 1.0).unwrap();
        let fd = finite_diff(
            |theta| {
                let mut q = p.clone();
                q.set_flat(theta).unwrap();
                let probs: Vec<Vec<f64>> = f.iter().map(|x| q.probs(x).unwrap()).collect();
                -reward::triplet_loss(&probs[0], &probs[1], &probs[2], 1.0).unwrap()
            },
            &p.to_flat(),
            1e-5,
        )
        .unwrap();
        for (a, b) in analytic.iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b) < 1e-4, "{a} vs {b}");
        }
    }

    fn tiny_problem() -> (Dataset, Split) {
        let ds = synth_clusters(3, 12, 6, 0.1, &mut Rng::new(21)).unwrap();
        let cfg = SplitConfig {
            query_per_class: 2,
            train_per_class: 10,
            query_in_db: false,
        };
        let split = make_split(&ds, &cfg, &mut Rng::new(21)).unwrap();
        (ds, split)
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            hidden: 6,
            bits: 6,
            group: 3,
            steps: 20,
            batch_size: 4,
            lr0: 0.2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let (ds, split) = tiny_problem();
        let cfg = TrainConfig {
            steps: 0,
            ..tiny_config()
        };
        let out = train(&ds, &split, &cfg).unwrap();
        assert_eq!(out.params, initial_params(&cfg, ds.dim()).unwrap());
        assert!(out.log.rows.is_empty());
        let ns = train_noseq(&ds, &split, &cfg).unwrap();
        let init = NoSeqParams::init(cfg.bits, ds.dim(), &mut Rng::new(cfg.seed).fork(streams::INIT)).unwrap();
        assert_eq!(ns.params, init);
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, split) = tiny_problem();
        for mode in [RewardMode::Relaxed, RewardMode::Sampled] {
            let cfg = TrainConfig {
                reward_mode: mode,
                momentum: 0.5,
                baseline_subtract: true,
                ..tiny_config()
            };
            let a = train(&ds, &split, &cfg).unwrap();
            let b = train(&ds, &split, &cfg).unwrap();
            assert_eq!(a.params.to_bytes(), b.params.to_bytes());
            assert_eq!(a.log, b.log);
            assert_eq!(a.log.rows.len(), 20);
            assert!(a.log.final_map().is_some());
        }
    }

    #[test]
    fn log_csv_header() {
        let (ds, split) = tiny_problem();
        let out = train(&ds, &split, &tiny_config()).unwrap();
        let mut buf = Vec::new();
        out.log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,lr,mean_J,mean_R_group,eval_MAP"));
        assert_eq!(lines.count(), 20);
    }

    #[test]
    fn no_groups_is_group_length_one() {
        let c = TrainConfig::desk().no_groups();
        assert_eq!(c.group, 1);
        assert_eq!(TrainConfig { group: 12, ..c }, TrainConfig::desk());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr0: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr_decay_factor: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
