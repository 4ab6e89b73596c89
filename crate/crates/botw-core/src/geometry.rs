//! Arm-set geometry and G-optimal experimental design.
//!
//! An arm set is a finite collection of feature vectors inside the unit ball
//! that spans the ambient space. This module validates arm sets, builds
//! moment (covariance) matrices of distributions over arms, solves small
//! symmetric positive-definite systems via an LDL^T factorization, and
//! computes near-optimal exploration designs with the Frank-Wolfe scheme:
//! the design objective is max_x x^T V(p)^{-1} x, whose optimum over the
//! simplex equals the ambient dimension d, and the D-optimal surrogate
//! -ln det V(p) admits a closed-form exact line search.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Arm feature norms may exceed 1 by at most this much.
pub const ARM_NORM_TOL: f64 = 1e-12;
/// A distribution's entries must sum to 1 within this tolerance.
pub const SIMPLEX_SUM_TOL: f64 = 1e-9;
/// Relative asymmetry tolerated when accepting a matrix as symmetric.
pub const SYMMETRY_REL_TOL: f64 = 1e-10;
/// Factorization pivots at or below this value are treated as singular.
pub const PIVOT_MIN: f64 = 1e-12;
/// Minimum eigenvalue of the uniform moment matrix required for spanning.
pub const SPANNING_MIN_EIGENVALUE: f64 = 1e-12;
/// Default relative slack for Frank-Wolfe convergence: stop at g <= d(1+tol).
pub const DESIGN_TOL_DEFAULT: f64 = 1e-3;
/// Default Frank-Wolfe iteration cap.
pub const DESIGN_MAX_ITER_DEFAULT: usize = 100_000;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("arm set needs at least 2 arms, got {count}")]
    TooFewArms { count: usize },
    #[error("arm {id:?} has norm {norm} outside the unit ball (tolerance {ARM_NORM_TOL:e})")]
    NormViolation { id: String, norm: f64 },
    #[error("arm set is rank deficient (does not span the space): uniform moment matrix has min eigenvalue {min_eigenvalue:e} <= {SPANNING_MIN_EIGENVALUE:e}")]
    RankDeficient { min_eigenvalue: f64 },
    #[error("duplicate arm id {id:?}")]
    DuplicateId { id: String },
    #[error("arm {id:?} has {got} coordinates, expected {expected}")]
    DimensionMismatch { id: String, expected: usize, got: usize },
    #[error("arm vectors must have at least one coordinate")]
    EmptyVector,
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {diff:e} exceeds relative tolerance {SYMMETRY_REL_TOL:e}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
    #[error("matrix is numerically singular: pivot {pivot:e} at index {index} is <= {PIVOT_MIN:e}")]
    SingularMatrix { index: usize, pivot: f64 },
    #[error("distribution entry {index} is negative: {value}")]
    NegativeWeight { index: usize, value: f64 },
    #[error("distribution entries sum to {sum}, more than {SIMPLEX_SUM_TOL:e} away from 1")]
    NotNormalized { sum: f64 },
    #[error("distribution has {got} entries, arm set has {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// Arm sets
// ---------------------------------------------------------------------------

/// A validated finite arm set: ids are unique, every vector lies in the unit
/// ball (up to [`ARM_NORM_TOL`]), and the vectors span the ambient space.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSet {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

impl ArmSet {
    /// Validates raw vectors with ids assigned by input order ("0", "1", ...).
    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let ids = (0..vectors.len()).map(|i| i.to_string()).collect();
        Self::from_labeled(ids, vectors)
    }

    /// Validates labeled vectors. This is the single entry point enforcing
    /// the arm-set invariants; every other constructor funnels through it.
    pub fn from_labeled(ids: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        assert_eq!(ids.len(), vectors.len(), "one id per vector");
        let count = vectors.len();
        if count < 2 {
            return Err(GeometryError::TooFewArms { count });
        }
        let dim = vectors[0].len();
        if dim == 0 {
            return Err(GeometryError::EmptyVector);
        }
        let mut seen = BTreeSet::new();
        for (id, v) in ids.iter().zip(&vectors) {
            if !seen.insert(id.clone()) {
                return Err(GeometryError::DuplicateId { id: id.clone() });
            }
            if v.len() != dim {
                return Err(GeometryError::DimensionMismatch {
                    id: id.clone(),
                    expected: dim,
                    got: v.len(),
                });
            }
            let norm = l2_norm(v);
            if !(norm <= 1.0 + ARM_NORM_TOL) {
                return Err(GeometryError::NormViolation { id: id.clone(), norm });
            }
        }
        let set = ArmSet { ids, vectors, dim };
        let uniform = SimplexDistribution::uniform(count);
        let moment = covariance(&uniform, &set);
        let min_eig = jacobi_eigenvalues(&moment)[0];
        if !(min_eig > SPANNING_MIN_EIGENVALUE) {
            return Err(GeometryError::RankDeficient { min_eigenvalue: min_eig });
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn arm(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn arms(&self) -> impl Iterator<Item = &[f64]> {
        self.vectors.iter().map(|v| v.as_slice())
    }
}

/// One labeled arm as it appears in JSON arm-set files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmRecord {
    pub id: String,
    pub vector: Vec<f64>,
}

/// Reads an arm set from disk. `.json` files hold an array of
/// `{"id": ..., "vector": [...]}` records; anything else is parsed as CSV
/// with header `id,x1,...,xd`.
pub fn read_arm_set(path: &Path) -> Result<ArmSet> {
    let is_json = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("json"))
        .unwrap_or(false);
    if is_json {
        read_arm_set_json(path)
    } else {
        read_arm_set_csv(path)
    }
}

fn parse_err(path: &Path, line: usize, message: impl fmt::Display) -> GeometryError {
    GeometryError::Parse {
        path: path.display().to_string(),
        line,
        message: message.to_string(),
    }
}

fn read_arm_set_json(path: &Path) -> Result<ArmSet> {
    let text = std::fs::read_to_string(path).map_err(|e| parse_err(path, 0, e))?;
    let records: Vec<ArmRecord> =
        serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e))?;
    let (ids, vectors) = records.into_iter().map(|r| (r.id, r.vector)).unzip();
    ArmSet::from_labeled(ids, vectors)
}

fn read_arm_set_csv(path: &Path) -> Result<ArmSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 0, e))?;
    let headers = reader.headers().map_err(|e| parse_err(path, 1, e))?.clone();
    if headers.is_empty() || &headers[0] != "id" || headers.len() < 2 {
        return Err(parse_err(path, 1, "expected header id,x1,...,xd"));
    }
    for (k, name) in headers.iter().skip(1).enumerate() {
        let expected = format!("x{}", k + 1);
        if name != expected {
            return Err(parse_err(
                path,
                1,
                format!("expected column {:?}, found {:?}", expected, name),
            ));
        }
    }
    let dim = headers.len() - 1;
    let mut ids = Vec::new();
    let mut vectors = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| parse_err(path, 0, e))?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != dim + 1 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", dim + 1, row.len()),
            ));
        }
        let mut v = Vec::with_capacity(dim);
        for field in row.iter().skip(1) {
            let x: f64 = field
                .parse()
                .map_err(|e| parse_err(path, line, format!("bad number {:?}: {}", field, e)))?;
            v.push(x);
        }
        ids.push(row[0].to_string());
        vectors.push(v);
    }
    ArmSet::from_labeled(ids, vectors)
}

// ---------------------------------------------------------------------------
// Distributions over arms
// ---------------------------------------------------------------------------

/// A probability distribution over arm indices: entries are nonnegative and
/// sum to 1 within [`SIMPLEX_SUM_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexDistribution {
    probs: Vec<f64>,
}

impl SimplexDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        for (index, &value) in probs.iter().enumerate() {
            if !(value >= 0.0) {
                return Err(GeometryError::NegativeWeight { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if !((sum - 1.0).abs() <= SIMPLEX_SUM_TOL) {
            return Err(GeometryError::NotNormalized { sum });
        }
        Ok(SimplexDistribution { probs })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution needs at least one arm");
        SimplexDistribution { probs: vec![1.0 / n as f64; n] }
    }

    /// Wraps entries already known to satisfy the simplex invariants
    /// (normalized output of the leader, mixing, or Frank-Wolfe updates).
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!(probs.iter().all(|&p| p >= 0.0));
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_SUM_TOL);
        SimplexDistribution { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

// ---------------------------------------------------------------------------
// Symmetric positive-definite linear algebra
// ---------------------------------------------------------------------------

/// A dense symmetric matrix in row-major storage. Positive definiteness is
/// established at factorization time: all LDL^T pivots must exceed
/// [`PIVOT_MIN`], otherwise the matrix is rejected as singular (no jitter).
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    n: usize,
    a: Vec<f64>,
}

impl SpdMatrix {
    /// Accepts a row-major square matrix, checking symmetry to relative
    /// tolerance [`SYMMETRY_REL_TOL`] (scaled by the largest entry).
    pub fn new(n: usize, a: Vec<f64>) -> Result<Self> {
        assert_eq!(a.len(), n * n, "row-major n x n storage");
        let scale = a.iter().fold(0.0f64, |m, &x| m.max(x.abs())).max(1e-300);
        for i in 0..n {
            for j in (i + 1)..n {
                let diff = (a[i * n + j] - a[j * n + i]).abs();
                if diff > SYMMETRY_REL_TOL * scale {
                    return Err(GeometryError::NotSymmetric { i, j, diff });
                }
            }
        }
        Ok(SpdMatrix { n, a })
    }

    /// Wraps storage that is symmetric by construction (mirrored assembly).
    pub(crate) fn from_symmetric_unchecked(n: usize, a: Vec<f64>) -> Self {
        debug_assert_eq!(a.len(), n * n);
        debug_assert!((0..n).all(|i| (0..n).all(|j| {
            let x = a[i * n + j];
            let y = a[j * n + i];
            x == y || (x.is_nan() && y.is_nan())
        })));
        SpdMatrix { n, a }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.a
    }

    /// Applies the matrix to a vector.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n);
        (0..self.n)
            .map(|i| dot(&self.a[i * self.n..(i + 1) * self.n], v))
            .collect()
    }
}

/// LDL^T factorization of an [`SpdMatrix`] (unit lower triangle L, diagonal
/// pivots D). Factor once, solve many times.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    lower: Vec<f64>,
    pivots: Vec<f64>,
}

impl LdlFactor {
    pub fn new(m: &SpdMatrix) -> Result<Self> {
        let n = m.n;
        let mut lower = vec![0.0; n * n];
        let mut pivots = vec![0.0; n];
        for j in 0..n {
            let mut d = m.entry(j, j);
            for k in 0..j {
                d -= lower[j * n + k] * lower[j * n + k] * pivots[k];
            }
            if !(d > PIVOT_MIN) {
                return Err(GeometryError::SingularMatrix { index: j, pivot: d });
            }
            pivots[j] = d;
            lower[j * n + j] = 1.0;
            for i in (j + 1)..n {
                let mut s = m.entry(i, j);
                for k in 0..j {
                    s -= lower[i * n + k] * lower[j * n + k] * pivots[k];
                }
                lower[i * n + j] = s / d;
            }
        }
        Ok(LdlFactor { n, lower, pivots })
    }

    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n);
        let n = self.n;
        let mut w = v.to_vec();
        for i in 0..n {
            for k in 0..i {
                w[i] -= self.lower[i * n + k] * w[k];
            }
        }
        for (wi, d) in w.iter_mut().zip(&self.pivots) {
            *wi /= d;
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                w[i] -= self.lower[k * n + i] * w[k];
            }
        }
        w
    }

    /// ln det of the factored matrix (sum of log pivots; L has unit diagonal).
    pub fn log_det(&self) -> f64 {
        self.pivots.iter().map(|d| d.ln()).sum()
    }
}

/// Solves m w = v for symmetric positive-definite m.
pub fn spd_solve(m: &SpdMatrix, v: &[f64]) -> Result<Vec<f64>> {
    let w = LdlFactor::new(m)?.solve(v);
    debug_assert!({
        let r = m.mul_vec(&w);
        let res: f64 = r.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        res <= 1e-8 * l2_norm(v).max(1e-300)
    });
    Ok(w)
}

/// Moment matrix V(p) = sum_x p(x) x x^T of a distribution over the arm set.
/// Assembly mirrors the upper triangle, so the output is bitwise symmetric.
pub fn covariance(dist: &SimplexDistribution, arms: &ArmSet) -> SpdMatrix {
    assert_eq!(dist.len(), arms.len(), "distribution must match the arm set");
    let d = arms.dim();
    let mut a = vec![0.0; d * d];
    for (x, &p) in arms.arms().zip(dist.probs()) {
        for i in 0..d {
            let pxi = p * x[i];
            for j in i..d {
                a[i * d + j] += pxi * x[j];
            }
        }
    }
    for i in 0..d {
        for j in (i + 1)..d {
            a[j * d + i] = a[i * d + j];
        }
    }
    SpdMatrix::from_symmetric_unchecked(d, a)
}

/// Design criterion g(p) = max_x x^T V(p)^{-1} x over the arm set.
pub fn g_value(dist: &SimplexDistribution, arms: &ArmSet) -> Result<f64> {
    let factor = LdlFactor::new(&covariance(dist, arms))?;
    Ok(g_and_argmax(&factor, arms).0)
}

/// Criterion value and the lowest-index arm attaining it.
fn g_and_argmax(factor: &LdlFactor, arms: &ArmSet) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for (i, x) in arms.arms().enumerate() {
        let a = dot(x, &factor.solve(x));
        if a > best {
            best = a;
            best_idx = i;
        }
    }
    (best, best_idx)
}

/// Output of [`frank_wolfe_design`]: the design, its criterion value, its
/// moment matrix, and how the iteration ended. `converged == false` means
/// the iteration cap was reached with g still above d(1+tol); the partial
/// result is still returned.
#[derive(Debug, Clone)]
pub struct DesignResult {
    pub weights: SimplexDistribution,
    pub g_value: f64,
    pub moment: SpdMatrix,
    pub iterations: usize,
    pub converged: bool,
}

/// Frank-Wolfe iteration for a near-G-optimal design.
///
/// Starts from the uniform design and repeatedly moves mass toward the arm
/// with the largest criterion value a = x^T V^{-1} x, using the exact
/// line-search step for the D-optimal surrogate,
/// lambda = (a - d) / (d (a - 1)). Stops once g(p) <= d(1+tol). The
/// surrogate ln det V is nondecreasing along the iteration, which is checked
/// every step in debug builds. Ties in the arm selection break toward the
/// lowest index; weights of duplicated arms are never pruned.
pub fn frank_wolfe_design(arms: &ArmSet, tol: f64, max_iter: usize) -> Result<DesignResult> {
    assert!(tol > 0.0, "convergence slack must be positive");
    let d = arms.dim();
    let n = arms.len();
    let dim = d as f64;
    let threshold = dim * (1.0 + tol);

    let mut weights = vec![1.0 / n as f64; n];
    let mut moment = covariance(&SimplexDistribution::from_normalized(weights.clone()), arms);
    let mut prev_log_det = f64::NEG_INFINITY;

    for iterations in 0..=max_iter {
        let factor = LdlFactor::new(&moment)?;
        let log_det = factor.log_det();
        debug_assert!(
            log_det >= prev_log_det - 1e-12 * prev_log_det.abs().max(1.0),
            "D-optimal surrogate regressed: {} -> {}",
            prev_log_det,
            log_det
        );
        prev_log_det = log_det;

        let (g, best) = g_and_argmax(&factor, arms);
        if g <= threshold || iterations == max_iter {
            return Ok(DesignResult {
                weights: SimplexDistribution::from_normalized(weights),
                g_value: g,
                moment,
                iterations,
                converged: g <= threshold,
            });
        }

        // g > d(1+tol) >= d >= 1 here, so the step is well defined; for
        // d >= 2 it lies in (0,1), for d = 1 it may equal exactly 1.
        let lambda = (g - dim) / (dim * (g - 1.0));
        let keep = 1.0 - lambda;
        for w in weights.iter_mut() {
            *w *= keep;
        }
        weights[best] += lambda;
        let sum: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= sum;
        }
        moment = covariance(&SimplexDistribution::from_normalized(weights.clone()), arms);
    }
    unreachable!("loop returns at iterations == max_iter");
}

// ---------------------------------------------------------------------------
// Symmetric eigenvalues (spanning check)
// ---------------------------------------------------------------------------

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
/// Used for the arm-set spanning check; matrices here are tiny (d x d).
pub fn jacobi_eigenvalues(m: &SpdMatrix) -> Vec<f64> {
    let n = m.n;
    let mut a = m.a.clone();
    if n == 1 {
        return vec![a[0]];
    }
    let fro: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let stop = 1e-13 * fro.max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() <= stop {
            break;
        }
        for p in 0..(n - 1) {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eigs.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    eigs
}
