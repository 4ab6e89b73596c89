//! Loss-generating environments and regret accounting.
//!
//! Three regimes share one interface:
//!
//! - stochastic: loss(x) = <x, theta> + noise with a fixed parameter theta;
//! - adversarial: loss(x) = <x, theta_t> where theta_t comes from a
//!   generator that sees only history through round t-1 (noise-free);
//! - corrupted stochastic: the stochastic loss plus a scalar corruption c_t
//!   with total budget sum |c_t| <= C.
//!
//! Observed losses are clipped to [-1, 1] with a flag; with unit-ball arms
//! and parameters, clipping can only trigger under corruption or
//! user-supplied heavy noise. An [`Environment`] instance is single-run
//! mutable state (history, corruption budget, generator state) and must be
//! driven with consecutive round indices.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ArmSet, SimplexDistribution};

/// Observed losses are clipped to this range.
pub const LOSS_RANGE: (f64, f64) = (-1.0, 1.0);
/// Tolerance on corruption budget conservation.
pub const BUDGET_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EnvironmentError {
    #[error("round {t} exceeds horizon {horizon}")]
    HorizonExceeded { t: usize, horizon: usize },
    #[error("corruption budget {budget} infeasible: horizon x cap allows at most {max}")]
    InfeasibleBudget { budget: f64, max: f64 },
    #[error("theta at round {t} has norm {norm}, outside the unit ball")]
    ThetaNormViolation { t: usize, norm: f64 },
    #[error("theta has {got} coordinates, arm set has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("theta sequence has {rows} rows but the horizon is {horizon}")]
    ThetaSequenceTooShort { rows: usize, horizon: usize },
    #[error("corruption needs per_round_cap > 0, got {cap}")]
    NonPositiveCap { cap: f64 },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, EnvironmentError>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// Declarative specification (serde-backed, mirrors the run config JSON)
// ---------------------------------------------------------------------------

/// Additive observation noise. `gaussian` is symmetrically truncated so the
/// observed loss stays in [-1, 1] whatever the clean mean is; truncation is
/// symmetric around zero, so the noise stays zero-mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    #[default]
    None,
    Uniform {
        sigma: f64,
    },
    Gaussian {
        sigma: f64,
    },
}

/// Built-in adversarial parameter generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdversaryKind {
    /// theta_t = v on odd rounds, -v on even rounds.
    Alternating { v: Vec<f64> },
    /// theta_t = cos(omega t) u + sin(omega t) v, projected to the unit ball.
    Sinusoidal { u: Vec<f64>, v: Vec<f64>, omega: f64 },
    /// theta_t read from a CSV file with header t,theta1,...,thetad.
    FixedFile { path: String },
    /// theta_t points along the historically most-pulled arm (normalized),
    /// penalizing whatever the learner favors; zero vector on round 1.
    FollowTheCrowd,
}

/// When and how corruption budget is spent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Cap-sized corruptions from round 1 until the budget runs out.
    FrontLoaded,
    /// Cap-sized corruptions on uniformly random distinct rounds.
    RandomRounds,
    /// Adaptive: corrupt (upward by default) only on rounds where the
    /// learner pulled the optimal arm, consuming budget lazily.
    OnOptimalRounds,
}

fn default_sign() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub budget: f64,
    pub per_round_cap: f64,
    /// Direction of the corruption; +1 pushes observed losses up.
    #[serde(default = "default_sign")]
    pub sign: f64,
}

/// Declarative environment description, as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentSpec {
    Stochastic {
        theta: Vec<f64>,
        #[serde(default)]
        noise: NoiseSpec,
    },
    Adversarial {
        adversary: AdversaryKind,
    },
    Corrupted {
        theta: Vec<f64>,
        #[serde(default)]
        noise: NoiseSpec,
        corruption: CorruptionSpec,
    },
}

// ---------------------------------------------------------------------------
// Gap profiles and regret increments
// ---------------------------------------------------------------------------

/// Suboptimality gaps of a stochastic instance: gap(x) = <x - x*, theta>.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapProfile {
    /// argmin of the mean loss; ties resolve toward the lowest index.
    pub optimal_index: usize,
    pub gaps: Vec<f64>,
    /// Smallest strictly positive gap (0 when all arms are optimal).
    pub delta_min: f64,
    /// False when several arms attain the minimum mean loss.
    pub unique_optimum: bool,
}

/// Mean losses <x, theta> for every arm.
pub fn arm_means(arms: &ArmSet, theta: &[f64]) -> Vec<f64> {
    arms.arms().map(|x| dot(x, theta)).collect()
}

/// Gap profile of the stochastic instance (arms, theta).
pub fn gap_profile(arms: &ArmSet, theta: &[f64]) -> Result<GapProfile> {
    if theta.len() != arms.dim() {
        return Err(EnvironmentError::DimensionMismatch {
            expected: arms.dim(),
            got: theta.len(),
        });
    }
    let means = arm_means(arms, theta);
    let mut optimal_index = 0;
    for (i, &m) in means.iter().enumerate() {
        if m < means[optimal_index] {
            optimal_index = i;
        }
    }
    let best = means[optimal_index];
    let gaps: Vec<f64> = means.iter().map(|m| m - best).collect();
    let unique_optimum = gaps.iter().filter(|&&g| g == 0.0).count() == 1;
    let delta_min = gaps
        .iter()
        .cloned()
        .filter(|&g| g > 0.0)
        .fold(f64::INFINITY, f64::min);
    let delta_min = if delta_min.is_finite() { delta_min } else { 0.0 };
    Ok(GapProfile { optimal_index, gaps, delta_min, unique_optimum })
}

/// Per-round pseudo-regret increments against a fixed comparator arm, from
/// the clean per-arm means of the round: the realized increment follows the
/// sampled arm, the expected increment averages over the played distribution.
pub fn pseudo_regret_increment(
    means: &[f64],
    comparator: usize,
    played: &SimplexDistribution,
    chosen: usize,
) -> (f64, f64) {
    let realized = means[chosen] - means[comparator];
    let expected =
        dot(means, played.probs()) - means[comparator];
    (realized, expected)
}

// ---------------------------------------------------------------------------
// Adversarial parameter generators
// ---------------------------------------------------------------------------

/// What an adversary is allowed to see: pulls and observed losses of rounds
/// strictly before the one being generated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub chosen: usize,
    pub observed_loss: f64,
}

/// A (possibly adaptive) parameter sequence. The interface admits only the
/// round index and the history through round t-1, so no generator can react
/// to the current round's pull.
pub trait ThetaSequence: Send {
    fn theta(&mut self, t: usize, history: &[HistoryEntry]) -> Vec<f64>;
}

struct Alternating {
    v: Vec<f64>,
}

impl ThetaSequence for Alternating {
    fn theta(&mut self, t: usize, _history: &[HistoryEntry]) -> Vec<f64> {
        let sign = if t % 2 == 1 { 1.0 } else { -1.0 };
        self.v.iter().map(|x| sign * x).collect()
    }
}

struct Sinusoidal {
    u: Vec<f64>,
    v: Vec<f64>,
    omega: f64,
}

impl ThetaSequence for Sinusoidal {
    fn theta(&mut self, t: usize, _history: &[HistoryEntry]) -> Vec<f64> {
        let phase = self.omega * t as f64;
        let (s, c) = phase.sin_cos();
        let mut theta: Vec<f64> =
            self.u.iter().zip(&self.v).map(|(ui, vi)| c * ui + s * vi).collect();
        let norm = l2_norm(&theta);
        if norm > 1.0 {
            for x in theta.iter_mut() {
                *x /= norm;
            }
        }
        theta
    }
}

struct FixedSequence {
    thetas: Vec<Vec<f64>>,
}

impl ThetaSequence for FixedSequence {
    fn theta(&mut self, t: usize, _history: &[HistoryEntry]) -> Vec<f64> {
        self.thetas[t - 1].clone()
    }
}

/// Tracks pull counts incrementally; `cursor` marks how much history has
/// already been folded in, so a full pass is never repeated.
struct FollowTheCrowd {
    arm_vectors: Vec<Vec<f64>>,
    counts: Vec<u64>,
    cursor: usize,
}

impl ThetaSequence for FollowTheCrowd {
    fn theta(&mut self, _t: usize, history: &[HistoryEntry]) -> Vec<f64> {
        while self.cursor < history.len() {
            self.counts[history[self.cursor].chosen] += 1;
            self.cursor += 1;
        }
        let dim = self.arm_vectors[0].len();
        let Some(max) = self.counts.iter().max().copied().filter(|&m| m > 0) else {
            return vec![0.0; dim];
        };
        let leader = self.counts.iter().position(|&c| c == max).expect("max exists");
        let v = &self.arm_vectors[leader];
        let norm = l2_norm(v);
        if norm > 0.0 {
            v.iter().map(|x| x / norm).collect()
        } else {
            vec![0.0; dim]
        }
    }
}

/// Reads a parameter sequence from CSV with header `t,theta1,...,thetad`;
/// rows must carry consecutive 1-based round indices.
pub fn read_theta_sequence(path: &Path) -> Result<Vec<Vec<f64>>> {
    let parse_err = |line: usize, message: String| EnvironmentError::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.is_empty() || &headers[0] != "t" || headers.len() < 2 {
        return Err(parse_err(1, "expected header t,theta1,...,thetad".into()));
    }
    for (k, name) in headers.iter().skip(1).enumerate() {
        let expected = format!("theta{}", k + 1);
        if name != expected {
            return Err(parse_err(
                1,
                format!("expected column {:?}, found {:?}", expected, name),
            ));
        }
    }
    let dim = headers.len() - 1;
    let mut thetas = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| parse_err(0, e.to_string()))?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != dim + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", dim + 1, row.len()),
            ));
        }
        let t: usize = row[0]
            .parse()
            .map_err(|e| parse_err(line, format!("bad round index {:?}: {}", &row[0], e)))?;
        if t != thetas.len() + 1 {
            return Err(parse_err(
                line,
                format!("round indices must be consecutive from 1; found {}", t),
            ));
        }
        let mut v = Vec::with_capacity(dim);
        for field in row.iter().skip(1) {
            let x: f64 = field
                .parse()
                .map_err(|e| parse_err(line, format!("bad number {:?}: {}", field, e)))?;
            v.push(x);
        }
        let norm = l2_norm(&v);
        if !(norm <= 1.0 + 1e-12) {
            return Err(EnvironmentError::ThetaNormViolation { t, norm });
        }
        thetas.push(v);
    }
    Ok(thetas)
}

// ---------------------------------------------------------------------------
// Corruption schedules
// ---------------------------------------------------------------------------

/// Builds the per-round plan for the non-adaptive corruption kinds. Entries
/// are `sign * per_round_cap` except for one remainder round; absolute
/// values sum to the budget within [`BUDGET_TOL`].
pub fn build_corruption_plan<R: Rng + ?Sized>(
    kind: CorruptionKind,
    budget: f64,
    per_round_cap: f64,
    sign: f64,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    assert!(budget >= 0.0, "corruption budget must be nonnegative");
    if budget == 0.0 {
        return Ok(vec![0.0; horizon]);
    }
    if !(per_round_cap > 0.0) {
        return Err(EnvironmentError::NonPositiveCap { cap: per_round_cap });
    }
    let max = horizon as f64 * per_round_cap;
    if budget > max {
        return Err(EnvironmentError::InfeasibleBudget { budget, max });
    }
    let full = (budget / per_round_cap).floor() as usize;
    let remainder = budget - full as f64 * per_round_cap;
    let mut amounts = vec![per_round_cap; full];
    if remainder > BUDGET_TOL {
        amounts.push(remainder);
    }
    let mut plan = vec![0.0; horizon];
    match kind {
        CorruptionKind::FrontLoaded => {
            for (t, a) in amounts.iter().enumerate() {
                plan[t] = sign * a;
            }
        }
        CorruptionKind::RandomRounds => {
            // Partial Fisher-Yates over round indices picks distinct rounds.
            let mut idx: Vec<usize> = (0..horizon).collect();
            for (k, a) in amounts.iter().enumerate() {
                let j = k + rng.random_range(0..(horizon - k));
                idx.swap(k, j);
                plan[idx[k]] = sign * a;
            }
        }
        CorruptionKind::OnOptimalRounds => {
            panic!("on_optimal_rounds is adaptive and has no fixed plan")
        }
    }
    Ok(plan)
}

// ---------------------------------------------------------------------------
// Runtime environment
// ---------------------------------------------------------------------------

/// Feedback for one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feedback {
    /// What the learner sees: clean mean + noise + corruption, clipped.
    pub observed_loss: f64,
    /// Clean mean <x_t, theta_t> of the pulled arm.
    pub clean_mean_loss: f64,
    /// Corruption added this round (0 outside the corrupted regime).
    pub corruption_applied: f64,
    /// Whether clipping to [-1, 1] changed the observed value.
    pub clipped: bool,
}

enum Regime {
    Stochastic {
        noise: NoiseSpec,
    },
    Adversarial {
        generator: Box<dyn ThetaSequence>,
    },
    Corrupted {
        noise: NoiseSpec,
        plan: Option<Vec<f64>>,
        adaptive: Option<AdaptiveCorruption>,
        budget: f64,
        spent: f64,
        optimal_index: usize,
    },
}

struct AdaptiveCorruption {
    per_round_cap: f64,
    sign: f64,
}

/// Single-run loss generator. Owns the interaction history and corruption
/// accounting; round indices must arrive as 1, 2, 3, ...
pub struct Environment {
    regime: Regime,
    horizon: usize,
    static_means: Option<Vec<f64>>,
    round_means: Vec<f64>,
    history: Vec<HistoryEntry>,
    applied_corruption: Vec<f64>,
}

impl Environment {
    /// Builds the runtime environment for one repetition. `setup_rng` seeds
    /// one-shot randomness (the random_rounds corruption plan); per-round
    /// noise draws come from the rng passed to [`Environment::emit_loss`].
    pub fn new<R: Rng + ?Sized>(
        spec: &EnvironmentSpec,
        arms: &ArmSet,
        horizon: usize,
        setup_rng: &mut R,
    ) -> Result<Self> {
        assert!(horizon >= 1);
        let check_theta = |theta: &[f64]| -> Result<()> {
            if theta.len() != arms.dim() {
                return Err(EnvironmentError::DimensionMismatch {
                    expected: arms.dim(),
                    got: theta.len(),
                });
            }
            let norm = l2_norm(theta);
            if !(norm <= 1.0 + 1e-12) {
                return Err(EnvironmentError::ThetaNormViolation { t: 0, norm });
            }
            Ok(())
        };
        let (regime, static_means) = match spec {
            EnvironmentSpec::Stochastic { theta, noise } => {
                check_theta(theta)?;
                (Regime::Stochastic { noise: *noise }, Some(arm_means(arms, theta)))
            }
            EnvironmentSpec::Adversarial { adversary } => {
                let generator = build_generator(adversary, arms, horizon)?;
                (Regime::Adversarial { generator }, None)
            }
            EnvironmentSpec::Corrupted { theta, noise, corruption } => {
                check_theta(theta)?;
                let profile = gap_profile(arms, theta)?;
                let (plan, adaptive) = match corruption.kind {
                    CorruptionKind::OnOptimalRounds => {
                        if !(corruption.per_round_cap > 0.0) && corruption.budget > 0.0 {
                            return Err(EnvironmentError::NonPositiveCap {
                                cap: corruption.per_round_cap,
                            });
                        }
                        let max = horizon as f64 * corruption.per_round_cap;
                        if corruption.budget > max {
                            return Err(EnvironmentError::InfeasibleBudget {
                                budget: corruption.budget,
                                max,
                            });
                        }
                        (
                            None,
                            Some(AdaptiveCorruption {
                                per_round_cap: corruption.per_round_cap,
                                sign: corruption.sign,
                            }),
                        )
                    }
                    kind => (
                        Some(build_corruption_plan(
                            kind,
                            corruption.budget,
                            corruption.per_round_cap,
                            corruption.sign,
                            horizon,
                            setup_rng,
                        )?),
                        None,
                    ),
                };
                (
                    Regime::Corrupted {
                        noise: *noise,
                        plan,
                        adaptive,
                        budget: corruption.budget,
                        spent: 0.0,
                        optimal_index: profile.optimal_index,
                    },
                    Some(arm_means(arms, theta)),
                )
            }
        };
        Ok(Environment {
            regime,
            horizon,
            static_means,
            round_means: Vec::new(),
            history: Vec::new(),
            applied_corruption: Vec::new(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Clean per-arm means of the round most recently emitted.
    pub fn round_arm_means(&self) -> &[f64] {
        &self.round_means
    }

    /// Corruption actually applied so far, one entry per emitted round.
    pub fn applied_corruption(&self) -> &[f64] {
        &self.applied_corruption
    }

    /// Total |c_t| spent so far.
    pub fn corruption_spent(&self) -> f64 {
        match &self.regime {
            Regime::Corrupted { spent, .. } => *spent,
            _ => 0.0,
        }
    }

    /// Emits the loss for round `t` given the learner pulled arm `chosen`.
    /// Adversarial parameters are committed from history before the pull is
    /// revealed to them; see [`ThetaSequence`].
    pub fn emit_loss<R: Rng + ?Sized>(
        &mut self,
        t: usize,
        arms: &ArmSet,
        chosen: usize,
        rng: &mut R,
    ) -> Result<Feedback> {
        if t > self.horizon {
            return Err(EnvironmentError::HorizonExceeded { t, horizon: self.horizon });
        }
        assert_eq!(t, self.history.len() + 1, "rounds must be emitted in order");

        match &mut self.regime {
            Regime::Adversarial { generator } => {
                let theta = generator.theta(t, &self.history);
                debug_assert!(l2_norm(&theta) <= 1.0 + 1e-9);
                self.round_means = arm_means(arms, &theta);
            }
            _ => {
                self.round_means =
                    self.static_means.as_ref().expect("static regime has means").clone();
            }
        }
        let clean = self.round_means[chosen];

        let noise = match &self.regime {
            Regime::Stochastic { noise } | Regime::Corrupted { noise, .. } => {
                draw_noise(*noise, clean, rng)
            }
            Regime::Adversarial { .. } => 0.0,
        };

        let corruption = match &mut self.regime {
            Regime::Corrupted { plan, adaptive, budget, spent, optimal_index, .. } => {
                let c = if let Some(plan) = plan {
                    plan[t - 1]
                } else {
                    let adaptive = adaptive.as_ref().expect("corrupted is planned or adaptive");
                    if chosen == *optimal_index {
                        let remaining = (*budget - *spent).max(0.0);
                        adaptive.sign * adaptive.per_round_cap.min(remaining)
                    } else {
                        0.0
                    }
                };
                *spent += c.abs();
                debug_assert!(*spent <= *budget + BUDGET_TOL, "corruption budget overdrawn");
                c
            }
            _ => 0.0,
        };
        self.applied_corruption.push(corruption);

        let raw = clean + noise + corruption;
        let observed = raw.clamp(LOSS_RANGE.0, LOSS_RANGE.1);
        let clipped = observed != raw;
        self.history.push(HistoryEntry { chosen, observed_loss: observed });
        Ok(Feedback {
            observed_loss: observed,
            clean_mean_loss: clean,
            corruption_applied: corruption,
            clipped,
        })
    }

    /// Test-and-diagnostics constructor for custom adversaries.
    pub fn with_generator(generator: Box<dyn ThetaSequence>, horizon: usize) -> Self {
        Environment {
            regime: Regime::Adversarial { generator },
            horizon,
            static_means: None,
            round_means: Vec::new(),
            history: Vec::new(),
            applied_corruption: Vec::new(),
        }
    }
}

fn build_generator(
    adversary: &AdversaryKind,
    arms: &ArmSet,
    horizon: usize,
) -> Result<Box<dyn ThetaSequence>> {
    let dim = arms.dim();
    let check = |name: &str, v: &[f64]| -> Result<()> {
        if v.len() != dim {
            return Err(EnvironmentError::DimensionMismatch { expected: dim, got: v.len() });
        }
        let norm = l2_norm(v);
        if !(norm <= 1.0 + 1e-12) {
            return Err(EnvironmentError::ThetaNormViolation { t: 0, norm });
        }
        let _ = name;
        Ok(())
    };
    Ok(match adversary {
        AdversaryKind::Alternating { v } => {
            check("v", v)?;
            Box::new(Alternating { v: v.clone() })
        }
        AdversaryKind::Sinusoidal { u, v, omega } => {
            check("u", u)?;
            check("v", v)?;
            Box::new(Sinusoidal { u: u.clone(), v: v.clone(), omega: *omega })
        }
        AdversaryKind::FixedFile { path } => {
            let thetas = read_theta_sequence(Path::new(path))?;
            if thetas.len() < horizon {
                return Err(EnvironmentError::ThetaSequenceTooShort {
                    rows: thetas.len(),
                    horizon,
                });
            }
            if let Some(bad) = thetas.iter().find(|v| v.len() != dim) {
                return Err(EnvironmentError::DimensionMismatch {
                    expected: dim,
                    got: bad.len(),
                });
            }
            Box::new(FixedSequence { thetas })
        }
        AdversaryKind::FollowTheCrowd => Box::new(FollowTheCrowd {
            arm_vectors: arms.arms().map(|x| x.to_vec()).collect(),
            counts: vec![0; arms.len()],
            cursor: 0,
        }),
    })
}

/// Draws one zero-mean noise sample. Gaussian noise is clamped symmetrically
/// to +-(1 - |clean_mean|): the symmetric clamp preserves the zero mean and
/// keeps the noisy loss inside [-1, 1] by construction.
pub fn draw_noise<R: Rng + ?Sized>(spec: NoiseSpec, clean_mean: f64, rng: &mut R) -> f64 {
    match spec {
        NoiseSpec::None => 0.0,
        NoiseSpec::Uniform { sigma } => {
            let u: f64 = rng.random();
            sigma * (2.0 * u - 1.0)
        }
        NoiseSpec::Gaussian { sigma } => {
            let z: f64 = rng.sample(StandardNormal);
            let bound = (1.0 - clean_mean.abs()).max(0.0);
            (sigma * z).clamp(-bound, bound)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::{Arc, Mutex};

    fn demo_arms() -> ArmSet {
        ArmSet::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.8, 0.6]]).unwrap()
    }

    #[test]
    fn gap_profile_matches_hand_computation() {
        let arms = demo_arms();
        let profile = gap_profile(&arms, &[-1.0, 0.0]).unwrap();
        assert_eq!(profile.optimal_index, 0);
        assert_eq!(profile.gaps, vec![0.0, 1.0, 0.19999999999999996]);
        assert!((profile.delta_min - 0.2).abs() <= 1e-12);
        assert!(profile.unique_optimum);
    }

    #[test]
    fn gap_profile_flags_non_unique_optimum() {
        let arms =
            ArmSet::from_vectors(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let profile = gap_profile(&arms, &[-0.5, -0.5]).unwrap();
        assert_eq!(profile.optimal_index, 0);
        assert!(!profile.unique_optimum);
        assert!((profile.delta_min - 0.0).abs() <= f64::EPSILON || profile.delta_min > 0.0);
    }

    #[test]
    fn gap_profile_with_identical_arms_has_zero_delta_min() {
        let arms = ArmSet::from_vectors(vec![vec![0.6, 0.0], vec![0.6, 0.0], vec![0.0, 0.1]])
            .unwrap();
        let profile = gap_profile(&arms, &[0.0, 0.0]).unwrap();
        assert!(!profile.unique_optimum);
        assert_eq!(profile.delta_min, 0.0);
    }

    #[test]
    fn pseudo_regret_increment_matches_hand_numbers() {
        let means = [-1.0, 0.0, -0.8];
        let p = SimplexDistribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        let (realized, expected) = pseudo_regret_increment(&means, 0, &p, 2);
        assert!((realized - 0.2).abs() <= 1e-12);
        // E[loss] = -0.5 + 0 - 0.2 = -0.7; comparator -1.0; increment 0.3.
        assert!((expected - 0.3).abs() <= 1e-12);
    }

    #[test]
    fn stochastic_noise_free_feedback_is_the_clean_mean() {
        let arms = demo_arms();
        let spec = EnvironmentSpec::Stochastic { theta: vec![-1.0, 0.0], noise: NoiseSpec::None };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut env = Environment::new(&spec, &arms, 4, &mut rng).unwrap();
        let fb = env.emit_loss(1, &arms, 2, &mut rng).unwrap();
        assert_eq!(fb.observed_loss, -0.8);
        assert_eq!(fb.clean_mean_loss, -0.8);
        assert_eq!(fb.corruption_applied, 0.0);
        assert!(!fb.clipped);
        assert_eq!(env.round_arm_means(), &[-1.0, 0.0, -0.8]);
    }

    #[test]
    fn emit_loss_rejects_rounds_past_the_horizon() {
        let arms = demo_arms();
        let spec = EnvironmentSpec::Stochastic { theta: vec![-1.0, 0.0], noise: NoiseSpec::None };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut env = Environment::new(&spec, &arms, 1, &mut rng).unwrap();
        env.emit_loss(1, &arms, 0, &mut rng).unwrap();
        match env.emit_loss(2, &arms, 0, &mut rng) {
            Err(EnvironmentError::HorizonExceeded { t: 2, horizon: 1 }) => {}
            other => panic!("expected HorizonExceeded, got {:?}", other),
        }
    }

    #[test]
    fn alternating_adversary_flips_sign_each_round() {
        let arms = demo_arms();
        let spec = EnvironmentSpec::Adversarial {
            adversary: AdversaryKind::Alternating { v: vec![0.6, 0.0] },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut env = Environment::new(&spec, &arms, 4, &mut rng).unwrap();
        let f1 = env.emit_loss(1, &arms, 0, &mut rng).unwrap();
        assert!((f1.clean_mean_loss - 0.6).abs() <= 1e-15);
        let f2 = env.emit_loss(2, &arms, 0, &mut rng).unwrap();
        assert!((f2.clean_mean_loss + 0.6).abs() <= 1e-15);
    }

    #[test]
    fn sinusoidal_adversary_matches_closed_form() {
        let arms = demo_arms();
        let omega = std::f64::consts::PI / 4.0;
        let spec = EnvironmentSpec::Adversarial {
            adversary: AdversaryKind::Sinusoidal {
                u: vec![1.0, 0.0],
                v: vec![0.0, 1.0],
                omega,
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut env = Environment::new(&spec, &arms, 8, &mut rng).unwrap();
        for t in 1..=8usize {
            let fb = env.emit_loss(t, &arms, 1, &mut rng).unwrap();
            let expected = (omega * t as f64).sin();
            assert!(
                (fb.clean_mean_loss - expected).abs() <= 1e-12,
                "t={}: {} vs {}",
                t,
                fb.clean_mean_loss,
                expected
            );
        }
    }

    #[test]
    fn follow_the_crowd_targets_the_most_pulled_arm() {
        let arms = demo_arms();
        let spec =
            EnvironmentSpec::Adversarial { adversary: AdversaryKind::FollowTheCrowd };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut env = Environment::new(&spec, &arms, 5, &mut rng).unwrap();
        // Round 1: no history, theta = 0, every mean is 0.
        let f1 = env.emit_loss(1, &arms, 2, &mut rng).unwrap();
        assert_eq!(f1.clean_mean_loss, 0.0);
        // Rounds 2-3 pull arm 2 again: it becomes the crowd favorite, so
        // theta points along (0.8, 0.6) (already unit norm).
        env.emit_loss(2, &arms, 2, &mut rng).unwrap();
        let f3 = env.emit_loss(3, &arms, 2, &mut rng).unwrap();
        assert!((f3.clean_mean_loss - 1.0).abs() <= 1e-12);
    }

    /// The adversary interface only ever sees history strictly before the
    /// round it generates; a recording probe verifies the call pattern.
    #[test]
    fn adversary_sees_exactly_the_prior_history() {
        struct Probe {
            seen: Arc<Mutex<Vec<(usize, usize)>>>,
        }
        impl ThetaSequence for Probe {
            fn theta(&mut self, t: usize, history: &[HistoryEntry]) -> Vec<f64> {
                self.seen.lock().unwrap().push((t, history.len()));
                vec![0.0, 0.0]
            }
        }
        let arms = demo_arms();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let mut env =
            Environment::with_generator(Box::new(Probe { seen: Arc::clone(&seen) }), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 1..=5 {
            env.emit_loss(t, &arms, t % 3, &mut rng).unwrap();
        }
        let seen = seen.lock().unwrap();
        assert_eq!(*seen, vec![(1, 0), (2, 1), (3, 2), (4, 3), (5, 4)]);
    }

    #[test]
    fn front_loaded_plan_spends_the_exact_budget_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan =
            build_corruption_plan(CorruptionKind::FrontLoaded, 10.0, 0.5, 1.0, 100, &mut rng)
                .unwrap();
        assert_eq!(plan.iter().filter(|&&c| c != 0.0).count(), 20);
        assert!(plan[..20].iter().all(|&c| c == 0.5));
        assert!(plan[20..].iter().all(|&c| c == 0.0));
        let total: f64 = plan.iter().map(|c| c.abs()).sum();
        assert!((total - 10.0).abs() <= BUDGET_TOL);

        let with_remainder =
            build_corruption_plan(CorruptionKind::FrontLoaded, 10.3, 0.5, 1.0, 100, &mut rng)
                .unwrap();
        let total: f64 = with_remainder.iter().map(|c| c.abs()).sum();
        assert!((total - 10.3).abs() <= BUDGET_TOL);
        assert!((with_remainder[20] - 0.3).abs() <= 1e-12);
    }

    #[test]
    fn random_rounds_plan_is_feasible_and_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let plan =
            build_corruption_plan(CorruptionKind::RandomRounds, 7.3, 0.5, -1.0, 64, &mut rng)
                .unwrap();
        let total: f64 = plan.iter().map(|c| c.abs()).sum();
        assert!((total - 7.3).abs() <= BUDGET_TOL);
        assert!(plan.iter().all(|&c| c.abs() <= 0.5 + 1e-15));
        assert!(plan.iter().all(|&c| c <= 0.0), "sign -1 pushes losses down");
        assert_eq!(plan.iter().filter(|&&c| c != 0.0).count(), 15);
    }

    #[test]
    fn infeasible_budget_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        match build_corruption_plan(CorruptionKind::FrontLoaded, 60.0, 0.5, 1.0, 100, &mut rng) {
            Err(EnvironmentError::InfeasibleBudget { budget, max }) => {
                assert_eq!(budget, 60.0);
                assert_eq!(max, 50.0);
            }
            other => panic!("expected InfeasibleBudget, got {:?}", other),
        }
    }

    #[test]
    fn adaptive_corruption_spends_only_on_optimal_pulls() {
        let arms = demo_arms();
        let spec = EnvironmentSpec::Corrupted {
            theta: vec![-1.0, 0.0],
            noise: NoiseSpec::None,
            corruption: CorruptionSpec {
                kind: CorruptionKind::OnOptimalRounds,
                budget: 1.2,
                per_round_cap: 0.5,
                sign: 1.0,
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut env = Environment::new(&spec, &arms, 10, &mut rng).unwrap();
        // Optimal arm is 0. Pull pattern: 0, 1, 0, 0, 0 -> corruption on
        // rounds 1, 3, 4 (0.5 + 0.5 + 0.2 exhausts the budget), then none.
        let pulls = [0, 1, 0, 0, 0];
        let mut applied = Vec::new();
        for (i, &arm) in pulls.iter().enumerate() {
            let fb = env.emit_loss(i + 1, &arms, arm, &mut rng).unwrap();
            applied.push(fb.corruption_applied);
        }
        assert_eq!(applied[0], 0.5);
        assert_eq!(applied[1], 0.0);
        assert_eq!(applied[2], 0.5);
        assert!((applied[3] - 0.2).abs() <= 1e-12);
        assert_eq!(applied[4], 0.0);
        assert!((env.corruption_spent() - 1.2).abs() <= BUDGET_TOL);
        // Observed loss on a corrupted optimal pull: -1 + 0.5 = -0.5.
        assert_eq!(env.applied_corruption(), applied.as_slice());
    }

    #[test]
    fn clipping_flags_out_of_range_observations() {
        let arms = demo_arms();
        let spec = EnvironmentSpec::Corrupted {
            theta: vec![0.0, 0.0],
            noise: NoiseSpec::None,
            corruption: CorruptionSpec {
                kind: CorruptionKind::FrontLoaded,
                budget: 3.0,
                per_round_cap: 1.5,
                sign: 1.0,
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut env = Environment::new(&spec, &arms, 4, &mut rng).unwrap();
        let fb = env.emit_loss(1, &arms, 0, &mut rng).unwrap();
        assert!(fb.clipped);
        assert_eq!(fb.observed_loss, 1.0);
        let fb3 = {
            env.emit_loss(2, &arms, 0, &mut rng).unwrap();
            env.emit_loss(3, &arms, 0, &mut rng).unwrap()
        };
        assert!(!fb3.clipped);
        assert_eq!(fb3.observed_loss, 0.0);
    }

    #[test]
    fn noise_is_zero_mean_and_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        for spec in [NoiseSpec::Uniform { sigma: 0.3 }, NoiseSpec::Gaussian { sigma: 0.3 }] {
            let mut sum = 0.0;
            for _ in 0..n {
                let eps = draw_noise(spec, -0.4, &mut rng);
                if let NoiseSpec::Gaussian { .. } = spec {
                    assert!((-0.4f64 + eps).abs() <= 1.0 + 1e-15);
                }
                sum += eps;
            }
            let mean = sum / n as f64;
            let bound = 3.0 * 0.3 / (n as f64).sqrt();
            assert!(mean.abs() <= bound, "{:?}: mean {} vs bound {}", spec, mean, bound);
        }
        assert_eq!(draw_noise(NoiseSpec::None, 0.5, &mut rng), 0.0);
    }

    #[test]
    fn theta_sequence_csv_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("theta.csv");
        std::fs::write(&good, "t,theta1,theta2\n1,0.5,0.0\n2,-0.5,0.5\n").unwrap();
        let thetas = read_theta_sequence(&good).unwrap();
        assert_eq!(thetas, vec![vec![0.5, 0.0], vec![-0.5, 0.5]]);

        let gap = dir.path().join("gap.csv");
        std::fs::write(&gap, "t,theta1,theta2\n1,0.5,0.0\n3,-0.5,0.5\n").unwrap();
        match read_theta_sequence(&gap) {
            Err(EnvironmentError::Parse { line: 3, .. }) => {}
            other => panic!("expected Parse at line 3, got {:?}", other),
        }

        let big = dir.path().join("big.csv");
        std::fs::write(&big, "t,theta1,theta2\n1,2.0,0.0\n").unwrap();
        match read_theta_sequence(&big) {
            Err(EnvironmentError::ThetaNormViolation { t: 1, .. }) => {}
            other => panic!("expected ThetaNormViolation, got {:?}", other),
        }

        let arms = demo_arms();
        let spec = EnvironmentSpec::Adversarial {
            adversary: AdversaryKind::FixedFile { path: good.display().to_string() },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        match Environment::new(&spec, &arms, 5, &mut rng) {
            Err(EnvironmentError::ThetaSequenceTooShort { rows: 2, horizon: 5 }) => {}
            other => panic!("expected ThetaSequenceTooShort, got {:?}", other.map(|_| ())),
        }
        let mut env = Environment::new(&spec, &arms, 2, &mut rng).unwrap();
        let fb = env.emit_loss(1, &arms, 0, &mut rng).unwrap();
        assert!((fb.clean_mean_loss - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn environment_spec_json_round_trip() {
        let spec = EnvironmentSpec::Corrupted {
            theta: vec![-1.0, 0.0],
            noise: NoiseSpec::Gaussian { sigma: 0.1 },
            corruption: CorruptionSpec {
                kind: CorruptionKind::FrontLoaded,
                budget: 50.0,
                per_round_cap: 0.5,
                sign: 1.0,
            },
        };
        let json = serde_json::to_string(&spec).unwrap();
        let back: EnvironmentSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        // Default noise and default sign are filled in when omitted.
        let text = r#"{"kind":"corrupted","theta":[0.0,0.5],
            "corruption":{"kind":"random_rounds","budget":1.0,"per_round_cap":0.25}}"#;
        match serde_json::from_str::<EnvironmentSpec>(text).unwrap() {
            EnvironmentSpec::Corrupted { noise, corruption, .. } => {
                assert_eq!(noise, NoiseSpec::None);
                assert_eq!(corruption.sign, 1.0);
            }
            other => panic!("unexpected variant {:?}", other),
        }
    }
}
