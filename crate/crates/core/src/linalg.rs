//! Dense f64 kernels used by the agent and its gradients.
//!
//! Everything is row-major `f64`. Files store `f32` and are promoted on load.

use std::fmt;
use std::ops::{Deref, DerefMut};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Outputs of [`sigmoid`] are clamped to `[PROB_EPS, 1 - PROB_EPS]` so that
/// log-probabilities and `1 / (h (1 - h))` stay finite.
pub const PROB_EPS: f64 = 1e-15;

const TANH_BOUND: f64 = 1.0 - f64::EPSILON;

#[derive(Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> Result<f64> {
        if self.dim() != other.len() {
            return Err(Error::shape("dot", self.dim(), other.len()));
        }
        Ok(dot(self, other))
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("len {}", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Entries drawn from `uniform(-scale, scale)`.
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.uniform_range(-scale, scale))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    /// `out += self · v`, no shape checks.
    pub(crate) fn matvec_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o += dot(row, v);
        }
    }

    /// `out += selfᵀ · v`, no shape checks.
    pub(crate) fn matvec_t_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&vi, row) in v.iter().zip(self.data.chunks_exact(self.cols.max(1))) {
            if vi != 0.0 {
                axpy(vi, row, out);
            }
        }
    }

    /// `self += scale · u vᵀ`.
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(Error::shape(
                "add_outer",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", u.len(), v.len()),
            ));
        }
        self.add_outer_unchecked(scale, u, v);
        Ok(())
    }

    pub(crate) fn add_outer_unchecked(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        for (&ui, row) in u.iter().zip(self.data.chunks_exact_mut(self.cols.max(1))) {
            let s = scale * ui;
            if s != 0.0 {
                axpy(s, v, row);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vector> {
    if m.cols != v.len() {
        return Err(Error::shape(
            "matvec",
            format!("matrix {}x{}", m.rows, m.cols),
            format!("vector {}", v.len()),
        ));
    }
    let mut out = vec![0.0; m.rows];
    m.matvec_acc(v, &mut out);
    Ok(Vector(out))
}

/// `mᵀ · v`
pub fn matvec_transposed(m: &Matrix, v: &[f64]) -> Result<Vector> {
    if m.rows != v.len() {
        return Err(Error::shape(
            "matvec_transposed",
            format!("matrix {}x{}", m.rows, m.cols),
            format!("vector {}", v.len()),
        ));
    }
    let mut out = vec![0.0; m.cols];
    m.matvec_t_acc(v, &mut out);
    Ok(Vector(out))
}

/// Logistic sigmoid, evaluated without overflow and clamped into the open
/// unit interval.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `tanh` clamped into the open interval (-1, 1).
pub fn tanh(x: f64) -> f64 {
    x.tanh().clamp(-TANH_BOUND, TANH_BOUND)
}

pub fn tanh_vec(v: &[f64]) -> Vector {
    Vector(v.iter().map(|&x| tanh(x)).collect())
}

pub fn sigmoid_vec(v: &[f64]) -> Vector {
    Vector(v.iter().map(|&x| sigmoid(x)).collect())
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_diff<F>(f: F, x: &[f64], step: f64) -> Result<Vector>
where
    F: Fn(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite difference step must be positive, got {step}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i}: f(x+h)={plus}, f(x-h)={minus}"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(Vector(grad))
}

/// Stream labels for [`Rng::fork`]. Each consumer draws from its own stream
/// so that adding draws in one place does not shift another.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SAMPLER: u64 = 2;
    pub const ACTIONS: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const ORACLE: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded ChaCha8 generator. The same seed yields the same sequence on every
/// platform; [`Rng::fork`] derives independent substreams.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator keyed by `(seed, label)`. Does not advance `self`.
    pub fn fork(&self, label: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(splitmix64(label));
        let derived = splitmix64(self.seed ^ splitmix64(label.wrapping_add(0x5EED)));
        Rng {
            seed: derived,
            inner,
        }
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.gen::<u64>() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        self.inner.gen_range(0..n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    #[test]
    fn matvec_examples() {
        let v = matvec(&Matrix::identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(&*v, &[1.0, 2.0, 3.0]);

        let v = matvec(&Matrix::zeros(2, 2), &[5.0, 7.0]).unwrap();
        assert_eq!(&*v, &[0.0, 0.0]);

        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(&*matvec(&m, &[1.0, 1.0]).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn matvec_dimension_mismatch_names_both_shapes() {
        let err = matvec(&Matrix::zeros(2, 3), &[1.0, 2.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("vector 2"), "{msg}");
    }

    #[test]
    fn transposed_matvec_matches_explicit_transpose() {
        let m = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let t = Matrix::from_rows(&[&[1.0, 4.0], &[2.0, 5.0], &[3.0, 6.0]]).unwrap();
        let v = [0.5, -2.0];
        assert_eq!(
            &*matvec_transposed(&m, &v).unwrap(),
            &*matvec(&t, &v).unwrap()
        );
    }

    #[test]
    fn nonlinearities_at_origin_and_saturation() {
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(40.0) - 1.0).abs() < 1e-12);
        assert!(sigmoid(40.0) < 1.0);
        assert!(sigmoid(-800.0) > 0.0);
        assert!(sigmoid(800.0).is_finite());
        assert!(tanh(1e6) < 1.0 && tanh(-1e6) > -1.0);
        let v = sigmoid_vec(&[-1e308, 0.0, 1e308]);
        assert!(v.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff(|x| dot(x, x), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);

        let g = finite_diff(|_| 3.5, &[1.0, -1.0, 0.25], 1e-5).unwrap();
        assert!(g.iter().all(|x| *x == 0.0));

        let g = finite_diff(|x| sigmoid(x[0]), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_rejects_bad_input() {
        assert!(finite_diff(|x| x[0], &[1.0], 0.0).is_err());
        assert!(matches!(
            finite_diff(|x| 1.0 / (x[0] - x[0]), &[1.0], 1e-3),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn seeded_rng_is_reproducible() {
        let draw = |seed| {
            let mut r = Rng::new(seed);
            (0..64).map(|_| r.uniform().to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn forks_are_independent_of_parent_consumption() {
        let mut a = Rng::new(11);
        let b = Rng::new(11);
        let _ = a.uniform();
        let mut fa = a.fork(streams::ACTIONS);
        let mut fb = b.fork(streams::ACTIONS);
        assert_eq!(fa.uniform().to_bits(), fb.uniform().to_bits());
        let mut other = b.fork(streams::SAMPLER);
        let mut same = b.fork(streams::ACTIONS);
        assert_ne!(other.uniform().to_bits(), same.uniform().to_bits());
    }

    #[test]
    fn frozen_first_draws() {
        const FROZEN: [u64; 3] = [4604317194420431787, 4606734539489062706, 4601373070768303508];
        // Frozen on first run; guards against silent generator changes.
        let mut r = Rng::new(42);
        let first: Vec<u64> = (0..3).map(|_| r.uniform().to_bits()).collect();
        assert_eq!(first, FROZEN);
        assert_eq!(Rng::new(42).fork(streams::INIT).below(1000), 318);
    }

    proptest! {
        #[test]
        fn matvec_is_linear(
            data in proptest::collection::vec(-10.0f64..10.0, 12),
            u in proptest::collection::vec(-10.0f64..10.0, 4),
            v in proptest::collection::vec(-10.0f64..10.0, 4),
            a in -5.0f64..5.0,
            b in -5.0f64..5.0,
        ) {
            let m = Matrix::from_vec(3, 4, data).unwrap();
            let combo: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
            let lhs = matvec(&m, &combo).unwrap();
            let mu = matvec(&m, &u).unwrap();
            let mv = matvec(&m, &v).unwrap();
            for i in 0..3 {
                prop_assert!((lhs[i] - (a * mu[i] + b * mv[i])).abs() < 1e-10);
            }
        }

        #[test]
        fn nonlinearity_ranges(x in -1e3f64..1e3) {
            let s = sigmoid(x);
            prop_assert!(s > 0.0 && s < 1.0);
            let t = tanh(x);
            prop_assert!(t > -1.0 && t < 1.0);
            prop_assert_eq!(tanh(-x), -tanh(x));
        }
    }
}
