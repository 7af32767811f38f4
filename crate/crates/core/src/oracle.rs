//! Brute-force ground truth for the gradient and metric code.
//!
//! Nothing here calls into the trainer's backward pass. Exact action-space
//! expectations use a separate forward-mode (dual number) evaluation of the
//! agent written directly against the flat parameter layout; gradient checks
//! use central finite differences of the forward rollout; retrieval oracles
//! are per-bit loops and linear scans.

use std::fmt::Write as _;
use std::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};
use crate::linalg::{Rng, streams};
use crate::policy::{ActionMode, HashCode, PolicyParams, PolicyShape, Rollout};
use crate::retrieval::{self, HashIndex};
use crate::reward::{self, RewardMode};
use crate::trainer::{self, GradAccumulator, NoSeqParams};

pub const MAX_ENUMERATION_BITS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Dual {
    re: f64,
    eps: f64,
}

impl Dual {
    fn constant(re: f64) -> Self {
        Dual { re, eps: 0.0 }
    }

    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual { re: t, eps: (1.0 - t * t) * self.eps }
    }

    fn sigmoid(self) -> Self {
        let s = 1.0 / (1.0 + (-self.re).exp());
        Dual { re: s, eps: s * (1.0 - s) * self.eps }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { re: self.re + o.re, eps: self.eps + o.eps }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { re: self.re - o.re, eps: self.eps - o.eps }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { re: self.re * o.re, eps: self.re * o.eps + self.eps * o.re }
    }
}

/// Bit probabilities and, for direction `dir`, their derivative with respect
/// to flat parameter `dir`. Layout: w_embed, w_input, b_input, w_hidden,
/// b_hidden, w_policy, b_policy, all row-major.
fn dual_forward(shape: &PolicyShape, theta: &[f64], feature: &[f64], dir: Option<usize>) -> Vec<Dual> {
    let (h, d, heads) = (shape.hidden, shape.feature, shape.heads());
    let param = |i: usize| Dual { re: theta[i], eps: if dir == Some(i) { 1.0 } else { 0.0 } };
    let off_embed = 0;
    let off_input = off_embed + h * d;
    let off_b_input = off_input + h * h;
    let off_hidden = off_b_input + h;
    let off_b_hidden = off_hidden + h * h;
    let off_policy = off_b_hidden + h;
    let off_b_policy = off_policy + heads * h;

    let mut out = Vec::with_capacity(shape.bits);
    let mut c: Vec<Dual> = vec![Dual::constant(0.0); h];
    for t in 0..shape.bits {
        let group_start = t % shape.group == 0;
        let mut next = Vec::with_capacity(h);
        for i in 0..h {
            let mut acc = param(off_b_input + i) + param(off_b_hidden + i);
            if group_start {
                for (j, &x) in feature.iter().enumerate() {
                    acc = acc + param(off_embed + i * d + j) * Dual::constant(x);
                }
            } else {
                for (j, &cj) in c.iter().enumerate() {
                    acc = acc + param(off_input + i * h + j) * cj;
                }
            }
            for (j, &cj) in c.iter().enumerate() {
                acc = acc + param(off_hidden + i * h + j) * cj;
            }
            next.push(acc.tanh());
        }
        c = next;
        let head = if shape.tied { 0 } else { t };
        let mut z = param(off_b_policy + head);
        for (j, &cj) in c.iter().enumerate() {
            z = z + param(off_policy + head * h + j) * cj;
        }
        out.push(z.sigmoid());
    }
    out
}

/// `(h_t, ∂h_t/∂θ)` for every step, by forward-mode differentiation.
pub fn probability_jacobian(params: &PolicyParams, feature: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let shape = params.shape();
    if feature.len() != shape.feature {
        return Err(Error::shape("probability_jacobian", shape.feature, feature.len()));
    }
    let theta = params.to_flat();
    let probs: Vec<f64> = dual_forward(&shape, &theta, feature, None).iter().map(|d| d.re).collect();
    let mut jac = vec![vec![0.0; theta.len()]; shape.bits];
    for dir in 0..theta.len() {
        for (row, v) in jac.iter_mut().zip(dual_forward(&shape, &theta, feature, Some(dir))) {
            row[dir] = v.eps;
        }
    }
    Ok((probs, jac))
}

fn hinge(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    let mut s = margin;
    for i in 0..a.len() {
        s += (a[i] - p[i]).powi(2) - (a[i] - n[i]).powi(2);
    }
    s.max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Anchor = 0,
    Positive = 1,
    Negative = 2,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Anchor, Role::Positive, Role::Negative];
}

/// The triplet around the enumerated image: the codes of the other two
/// roles. `codes[role]` is ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletContext {
    pub role: Role,
    pub codes: [Vec<f64>; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnumEntry {
    pub actions: Vec<u8>,
    pub prob: f64,
    /// `Σ_j R^g_j` for this action sequence.
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnumerationReport {
    pub entries: Vec<EnumEntry>,
    pub total_probability: f64,
    pub expected_reward: f64,
    /// `Σ_A ∇π(A) · R(A)` over the flat parameter layout.
    pub exact_gradient: Vec<f64>,
}

/// Enumerates every `2^q` action sequence of the image in `context.role`.
pub fn enumerate_action_space(
    params: &PolicyParams,
    feature: &[f64],
    margin: f64,
    mode: RewardMode,
    context: &TripletContext,
) -> Result<EnumerationReport> {
    let shape = params.shape();
    let q = shape.bits;
    if q > MAX_ENUMERATION_BITS {
        return Err(Error::InvalidArgument(format!(
            "refusing to enumerate 2^{q} sequences (limit q <= {MAX_ENUMERATION_BITS})"
        )));
    }
    for (i, c) in context.codes.iter().enumerate() {
        if i != context.role as usize && c.len() != q {
            return Err(Error::shape("enumerate_action_space context", q, c.len()));
        }
    }
    let (probs, jac) = probability_jacobian(params, feature)?;
    let n_params = params.num_params();
    let groups: Vec<(usize, usize)> = (0..q)
        .step_by(shape.group)
        .map(|s| (s, (s + shape.group).min(q)))
        .collect();

    let mut entries = Vec::with_capacity(1 << q);
    let mut exact_gradient = vec![0.0; n_params];
    let (mut total, mut expected) = (0.0, 0.0);
    for mask in 0u32..(1u32 << q) {
        let actions: Vec<u8> = (0..q).map(|t| (mask >> t & 1) as u8).collect();
        let per_bit: Vec<f64> = (0..q)
            .map(|t| if actions[t] == 1 { probs[t] } else { 1.0 - probs[t] })
            .collect();
        let prob: f64 = per_bit.iter().product();

        let mut codes = context.codes.clone();
        codes[context.role as usize] = match mode {
            RewardMode::Relaxed => probs.clone(),
            RewardMode::Sampled => actions.iter().map(|&a| a as f64).collect(),
        };
        let reward: f64 = groups
            .iter()
            .map(|&(s, e)| -hinge(&codes[0][s..e], &codes[1][s..e], &codes[2][s..e], margin))
            .sum();

        for t in 0..q {
            let others: f64 = (0..q).filter(|&s| s != t).map(|s| per_bit[s]).product();
            let sign = if actions[t] == 1 { 1.0 } else { -1.0 };
            let scale = sign * others * reward;
            if scale != 0.0 {
                for (g, dj) in exact_gradient.iter_mut().zip(&jac[t]) {
                    *g += scale * dj;
                }
            }
        }
        total += prob;
        expected += prob * reward;
        entries.push(EnumEntry { actions, prob, reward });
    }
    Ok(EnumerationReport {
        entries,
        total_probability: total,
        expected_reward: expected,
        exact_gradient,
    })
}

/// `Σ_A π(A) · ĝ(A)` where `ĝ` is the trainer's REINFORCE estimate for the
/// enumerated role, evaluated on every sequence of the report.
pub fn reinforce_expectation(
    params: &PolicyParams,
    rollouts: &[Rollout; 3],
    margin: f64,
    mode: RewardMode,
    role: Role,
    report: &EnumerationReport,
) -> Result<Vec<f64>> {
    let mut mean = GradAccumulator::zeros(params.shape())?;
    for e in &report.entries {
        let mut rs = rollouts.clone();
        rs[role as usize] = rollouts[role as usize].with_actions(&e.actions)?;
        let rec = reward::rewards_for(&rs[0], &rs[1], &rs[2], margin, mode)?;
        let mut g = GradAccumulator::zeros(params.shape())?;
        trainer::reinforce_rollout(params, &rs[role as usize], &rec.group, &mut g)?;
        mean.add_scaled(&g, e.prob);
    }
    Ok(mean.to_flat())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckTolerances {
    pub step: f64,
    pub rel_tol: f64,
    /// Instances whose hinge argument is within this of zero are skipped.
    pub kink_eps: f64,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
}

impl Default for GradCheckTolerances {
    fn default() -> Self {
        GradCheckTolerances {
            step: 1e-5,
            rel_tol: 1e-4,
            kink_eps: 1e-6,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose finite-difference stencil crosses the hinge kink.
    pub excluded: usize,
    pub near_kink: bool,
    pub worst_rel_error: f64,
    pub worst_index: Option<usize>,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `objective`, which
/// returns `(value, hinge_argument)`.
pub fn compare_with_finite_differences<F>(
    objective: F,
    x: &[f64],
    analytic: &[f64],
    tol: &GradCheckTolerances,
) -> GradCheckReport
where
    F: Fn(&[f64]) -> (f64, f64),
{
    assert_eq!(x.len(), analytic.len());
    let (_, s0) = objective(x);
    if s0.abs() < tol.kink_eps {
        return GradCheckReport {
            checked: 0,
            excluded: x.len(),
            near_kink: true,
            worst_rel_error: 0.0,
            worst_index: None,
            passed: true,
        };
    }
    let mut probe = x.to_vec();
    let (mut checked, mut excluded) = (0, 0);
    let mut worst = 0.0f64;
    let mut worst_index = None;
    let mut finite = true;
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + tol.step;
        let (fp, sp) = objective(&probe);
        probe[i] = orig - tol.step;
        let (fm, sm) = objective(&probe);
        probe[i] = orig;
        if (sp > 0.0) != (sm > 0.0) {
            excluded += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * tol.step);
        if !fd.is_finite() || !analytic[i].is_finite() {
            finite = false;
        }
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(tol.abs_floor);
        if err > worst || err.is_nan() {
            worst = err;
            worst_index = Some(i);
        }
        checked += 1;
    }
    GradCheckReport {
        checked,
        excluded,
        near_kink: false,
        worst_rel_error: worst,
        worst_index,
        passed: finite && worst < tol.rel_tol,
    }
}

/// Analytic `∇θ R^G` of one triplet against finite differences.
pub fn check_gradients(
    params: &PolicyParams,
    features: [&[f64]; 3],
    margin: f64,
    tol: &GradCheckTolerances,
) -> Result<GradCheckReport> {
    let rollouts: [Rollout; 3] = [
        params.rollout(features[0], ActionMode::Greedy)?,
        params.rollout(features[1], ActionMode::Greedy)?,
        params.rollout(features[2], ActionMode::Greedy)?,
    ];
    let mut acc = GradAccumulator::zeros(params.shape())?;
    trainer::global_grads(params, &rollouts, margin, &mut acc)?;
    Ok(check_global_with(params, features, margin, &acc.to_flat(), tol))
}

/// Same as [`check_gradients`] with a caller-supplied analytic gradient.
pub fn check_global_with(
    params: &PolicyParams,
    features: [&[f64]; 3],
    margin: f64,
    analytic: &[f64],
    tol: &GradCheckTolerances,
) -> GradCheckReport {
    let objective = |theta: &[f64]| {
        let mut p = params.clone();
        p.set_flat(theta).expect("flat length");
        let probs: Vec<Vec<f64>> = features
            .iter()
            .map(|f| p.rollout(f, ActionMode::Greedy).expect("checked dims").probs())
            .collect();
        let s = reward::hinge_argument(&probs[0], &probs[1], &probs[2], margin).expect("equal lengths");
        (-s.max(0.0), s)
    };
    compare_with_finite_differences(objective, &params.to_flat(), analytic, tol)
}

/// Baseline hashing layer gradient against finite differences.
pub fn check_noseq_gradients(
    params: &NoSeqParams,
    features: [&[f64]; 3],
    margin: f64,
    tol: &GradCheckTolerances,
) -> Result<GradCheckReport> {
    let analytic = params.global_grad(features[0], features[1], features[2], margin)?;
    let objective = |theta: &[f64]| {
        let mut p = params.clone();
        p.set_flat(theta).expect("flat length");
        let probs: Vec<Vec<f64>> = features.iter().map(|f| p.probs(f).expect("dims")).collect();
        let s = reward::hinge_argument(&probs[0], &probs[1], &probs[2], margin).expect("equal lengths");
        (-s.max(0.0), s)
    };
    Ok(compare_with_finite_differences(objective, &params.to_flat(), &analytic, tol))
}

pub fn naive_hamming(a: &[u8], b: &[u8]) -> usize {
    let mut d = 0;
    for i in 0..a.len() {
        if a[i] != b[i] {
            d += 1;
        }
    }
    d
}

pub fn linear_scan_radius(codes: &[Vec<u8>], query: &[u8], radius: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, c) in codes.iter().enumerate() {
        if naive_hamming(c, query) <= radius {
            out.push(i);
        }
    }
    out
}

/// AP recomputing precision from scratch at every relevant rank.
pub fn brute_force_ap(relevance: &[bool]) -> Option<f64> {
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut sum = 0.0;
    for k in 1..=relevance.len() {
        if relevance[k - 1] {
            let hits = relevance[..k].iter().filter(|&&r| r).count();
            sum += hits as f64 / k as f64;
        }
    }
    Some(sum / total as f64)
}

/// Parameters with i.i.d. `N(0, scale²)` entries.
pub fn random_params(shape: PolicyShape, scale: f64, rng: &mut Rng) -> Result<PolicyParams> {
    let mut p = PolicyParams::zeros(shape)?;
    let flat: Vec<f64> = (0..p.num_params()).map(|_| scale * rng.normal()).collect();
    p.set_flat(&flat)?;
    Ok(p)
}

fn random_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub lines: Vec<CheckLine>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            let _ = writeln!(
                s,
                "[{}] {}: {:.3e} (threshold {:.1e}) {}",
                if l.passed { "PASS" } else { "FAIL" },
                l.name,
                l.value,
                l.threshold,
                l.detail
            );
        }
        s
    }

    /// `check,passed,value,threshold,detail`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("check,passed,value,threshold,detail\n");
        for l in &self.lines {
            let _ = writeln!(s, "{},{},{:e},{:e},\"{}\"", l.name, l.passed, l.value, l.threshold, l.detail);
        }
        s
    }
}

/// Worst relative error over `instances` random `H=8, D=8, q=6, k=3` triplets.
pub fn gradient_fidelity(instances: usize, seed: u64) -> Result<CheckLine> {
    let shape = PolicyShape { hidden: 8, feature: 8, bits: 6, group: 3, tied: false };
    let tol = GradCheckTolerances::default();
    let mut rng = Rng::new(seed).fork(streams::ORACLE);
    let (mut worst, mut done, mut kinks) = (0.0f64, 0, 0);
    let mut all_passed = true;
    while done < instances {
        let p = random_params(shape, 0.5, &mut rng)?;
        let f: Vec<Vec<f64>> = (0..3).map(|_| random_vec(8, &mut rng)).collect();
        let r = check_gradients(&p, [&f[0], &f[1], &f[2]], 1.0, &tol)?;
        if r.near_kink || r.checked == 0 {
            kinks += 1;
            continue;
        }
        worst = worst.max(r.worst_rel_error);
        all_passed &= r.passed;
        done += 1;
    }
    Ok(CheckLine {
        name: "gradient_fidelity".into(),
        passed: all_passed && worst < tol.rel_tol,
        value: worst,
        threshold: tol.rel_tol,
        detail: format!("{done} instances, {kinks} skipped near the hinge kink"),
    })
}

/// Max abs deviation between the REINFORCE expectation and the exact
/// enumerated gradient (sampled mode), and the largest entry of either in
/// relaxed mode, over all three roles of `instances` random triplets.
pub fn reinforce_unbiasedness(instances: usize, seed: u64) -> Result<[CheckLine; 2]> {
    let shape = PolicyShape { hidden: 8, feature: 8, bits: 4, group: 2, tied: false };
    let mut rng = Rng::new(seed).fork(streams::ORACLE).fork(streams::ACTIONS);
    let (mut sampled_dev, mut relaxed_max, mut scale) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let p = random_params(shape, 0.5, &mut rng)?;
        let label = rng.below(1 << 30) as u64;
        let mut act = rng.fork(label);
        let rollouts: [Rollout; 3] = std::array::from_fn(|_| {
            let f = random_vec(8, &mut rng);
            p.rollout(&f, ActionMode::Sample(&mut act)).expect("dims")
        });
        for mode in [RewardMode::Sampled, RewardMode::Relaxed] {
            let codes: [Vec<f64>; 3] = std::array::from_fn(|i| reward::reward_code(&rollouts[i], mode));
            for role in Role::ALL {
                let ctx = TripletContext { role, codes: codes.clone() };
                let report = enumerate_action_space(&p, rollouts[role as usize].feature(), 1.0, mode, &ctx)?;
                let mc = reinforce_expectation(&p, &rollouts, 1.0, mode, role, &report)?;
                match mode {
                    RewardMode::Sampled => {
                        for (a, b) in mc.iter().zip(&report.exact_gradient) {
                            sampled_dev = sampled_dev.max((a - b).abs());
                            scale = scale.max(b.abs());
                        }
                    }
                    RewardMode::Relaxed => {
                        for v in mc.iter().chain(&report.exact_gradient) {
                            relaxed_max = relaxed_max.max(v.abs());
                        }
                    }
                }
            }
        }
    }
    Ok([
        CheckLine {
            name: "reinforce_sampled_unbiased".into(),
            passed: sampled_dev <= 1e-8,
            value: sampled_dev,
            threshold: 1e-8,
            detail: format!("{instances} triplets x 3 roles, largest exact entry {scale:.3e}"),
        },
        CheckLine {
            name: "reinforce_relaxed_zero_mean".into(),
            passed: relaxed_max <= 1e-8,
            value: relaxed_max,
            threshold: 1e-8,
            detail: format!("{instances} triplets x 3 roles"),
        },
    ])
}

/// Packed popcount distance and index lookup against per-bit loops on
/// `n` random codes. Value is the number of disagreements.
pub fn retrieval_agreement(n: usize, bits: usize, seed: u64) -> Result<CheckLine> {
    let mut rng = Rng::new(seed).fork(streams::ORACLE).fork(streams::SAMPLER);
    let raw: Vec<Vec<u8>> = (0..n)
        .map(|_| (0..bits).map(|_| u8::from(rng.bernoulli(0.5))).collect())
        .collect();
    let codes: Vec<HashCode> = raw.iter().map(|b| HashCode::from_bits(b)).collect();
    let index = HashIndex::new(codes.clone(), (0..n as u64).collect(), vec![vec![1u8]; n])?;
    let mut disagreements = 0usize;
    for _ in 0..n {
        let (i, j) = (rng.below(n), rng.below(n));
        if retrieval::hamming(&codes[i], &codes[j])? as usize != naive_hamming(&raw[i], &raw[j]) {
            disagreements += 1;
        }
    }
    let queries = 50.min(n);
    for qi in 0..queries {
        let query = &raw[rng.below(n)];
        let r = qi % (bits + 1);
        if index.lookup_radius(&HashCode::from_bits(query), r as u32)? != linear_scan_radius(&raw, query, r) {
            disagreements += 1;
        }
    }
    for _ in 0..200 {
        let len = 1 + rng.below(60);
        let rel: Vec<bool> = (0..len).map(|_| rng.bernoulli(0.3)).collect();
        let total = rel.iter().filter(|&&r| r).count();
        match (retrieval::average_precision(&rel, total), brute_force_ap(&rel)) {
            (Some(a), Some(b)) if (a - b).abs() <= 1e-12 => {}
            (None, None) => {}
            _ => disagreements += 1,
        }
    }
    Ok(CheckLine {
        name: "retrieval_oracles".into(),
        passed: disagreements == 0,
        value: disagreements as f64,
        threshold: 0.0,
        detail: format!("{n} codes of {bits} bits, {queries} radius queries, 200 AP rankings"),
    })
}

pub fn noseq_fidelity(instances: usize, seed: u64) -> Result<CheckLine> {
    let tol = GradCheckTolerances::default();
    let mut rng = Rng::new(seed).fork(streams::ORACLE).fork(streams::INIT);
    let (mut worst, mut done) = (0.0f64, 0);
    let mut passed = true;
    while done < instances {
        let mut p = NoSeqParams::init(6, 8, &mut rng)?;
        let flat = random_vec(p.to_flat().len(), &mut rng);
        p.set_flat(&flat)?;
        let f: Vec<Vec<f64>> = (0..3).map(|_| random_vec(8, &mut rng)).collect();
        let r = check_noseq_gradients(&p, [&f[0], &f[1], &f[2]], 1.0, &tol)?;
        if r.near_kink || r.checked == 0 {
            continue;
        }
        worst = worst.max(r.worst_rel_error);
        passed &= r.passed;
        done += 1;
    }
    Ok(CheckLine {
        name: "noseq_gradient_fidelity".into(),
        passed,
        value: worst,
        threshold: tol.rel_tol,
        detail: format!("{done} instances"),
    })
}

/// The full oracle suite run by `drlih check`.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut lines = vec![gradient_fidelity(20, seed)?];
    lines.extend(reinforce_unbiasedness(3, seed)?);
    lines.push(noseq_fidelity(10, seed)?);
    lines.push(retrieval_agreement(1000, 48, seed)?);
    Ok(SuiteReport { lines })
}
