//! Experiment orchestration: seeded repetitions, horizon sweeps, regret and
//! entropy traces, aggregation, log-log slope fitting, persistence, and
//! trace-invariant verification.
//!
//! Randomness is counter-based: every (base_seed, repetition, round) triple
//! maps to a fixed generator position, so parallel execution order cannot
//! perturb any stream and repeated runs are byte-identical. Repetitions are
//! independent and may run concurrently; results are merged in repetition
//! order before aggregation.
//!
//! Regret is pseudo-regret against the clean per-round means (noise and
//! corruption excluded). The comparator is the optimal arm when the
//! parameter is fixed, and the best fixed arm in hindsight for adversarial
//! runs; in the latter case intermediate rows are materialized only after
//! the full run determines the comparator.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::environment::{
    gap_profile, Environment, EnvironmentError, EnvironmentSpec, GapProfile,
};
use crate::geometry::{
    frank_wolfe_design, read_arm_set, ArmSet, DesignResult, GeometryError,
    DESIGN_MAX_ITER_DEFAULT, DESIGN_TOL_DEFAULT,
};
use crate::policy::{
    FtrlState, LossEstimate, PolicyDecision, PolicyError, PolicyKind, UniformPolicy,
};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Generator words reserved per round; a round never consumes more than a
/// handful (one arm sample plus at most a few noise draws).
const WORDS_PER_ROUND: u128 = 256;
const ROUND_STREAM: u64 = 0;
const SETUP_STREAM: u64 = 1;

/// Header of the trace CSV, one row per recorded checkpoint.
pub const TRACE_HEADER: &str =
    "t,regret_expected,regret_realized,entropy_q,beta,gamma,one_minus_qstar,clips";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
    #[error("design did not converge after {iterations} iterations (g = {g_value})")]
    DesignNotConverged { iterations: usize, g_value: f64 },
    #[error("invalid config: {message}")]
    InvalidConfig { message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Json { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    TraceFormat { path: String, line: usize, message: String },
    #[error("mean regret at horizon {horizon} is {value}; log-log fit needs positive values")]
    NonPositiveRegret { horizon: usize, value: f64 },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Where the arm set comes from: a CSV/JSON file or inline vectors.
/// Exactly one of the two fields must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSetSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<Vec<Vec<f64>>>,
}

impl ArmSetSource {
    pub fn from_path(path: &str) -> Self {
        ArmSetSource { path: Some(path.to_string()), inline: None }
    }

    pub fn from_inline(vectors: Vec<Vec<f64>>) -> Self {
        ArmSetSource { path: None, inline: Some(vectors) }
    }

    pub fn load(&self) -> Result<ArmSet> {
        match (&self.path, &self.inline) {
            (Some(path), None) => Ok(read_arm_set(Path::new(path))?),
            (None, Some(vectors)) => Ok(ArmSet::from_vectors(vectors.clone())?),
            _ => Err(HarnessError::InvalidConfig {
                message: "arm_set_source needs exactly one of `path` or `inline`".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RecordGranularity {
    /// One trace row per round; required for full invariant verification.
    #[default]
    EveryRound,
    /// Rows at t in {1, 2, 4, ...} plus the final round.
    PowerOfTwoCheckpoints,
}

fn default_design_tol() -> f64 {
    DESIGN_TOL_DEFAULT
}

/// One experiment: an arm set, an environment, a policy, and the horizon,
/// repeated over derived seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arm_set_source: ArmSetSource,
    pub environment: EnvironmentSpec,
    pub policy: PolicyKind,
    #[serde(rename = "horizon_T")]
    pub horizon: usize,
    pub repetitions: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub record_granularity: RecordGranularity,
    #[serde(default = "default_design_tol")]
    pub design_tol: f64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(HarnessError::InvalidConfig { message: "horizon_T must be >= 1".into() });
        }
        if self.repetitions < 1 {
            return Err(HarnessError::InvalidConfig {
                message: "repetitions must be >= 1".into(),
            });
        }
        if !(self.design_tol > 0.0 && self.design_tol.is_finite()) {
            return Err(HarnessError::InvalidConfig {
                message: format!("design_tol must be positive, got {}", self.design_tol),
            });
        }
        if self.path_and_inline_conflict() {
            return Err(HarnessError::InvalidConfig {
                message: "arm_set_source needs exactly one of `path` or `inline`".into(),
            });
        }
        Ok(())
    }

    fn path_and_inline_conflict(&self) -> bool {
        matches!(
            (&self.arm_set_source.path, &self.arm_set_source.inline),
            (Some(_), Some(_)) | (None, None)
        )
    }
}

/// Hex SHA-256 of the canonical JSON encoding of the config.
pub fn config_hash(config: &RunConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Instance description consumed by trace verification: dimension and arm
/// count are always present; the gap fields only when the parameter is fixed
/// across rounds (stochastic and corrupted regimes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapsFile {
    pub dimension: usize,
    pub num_arms: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimal_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaps: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_min: Option<f64>,
}

/// Builds the verification sidecar for a config: full gap information for
/// fixed-parameter regimes, dimensions only for adversarial ones.
pub fn gaps_file_for(config: &RunConfig, arms: &ArmSet) -> Result<GapsFile> {
    let theta = match &config.environment {
        EnvironmentSpec::Stochastic { theta, .. } => Some(theta),
        EnvironmentSpec::Corrupted { theta, .. } => Some(theta),
        EnvironmentSpec::Adversarial { .. } => None,
    };
    let profile = match theta {
        Some(theta) => Some(gap_profile(arms, theta)?),
        None => None,
    };
    Ok(GapsFile {
        dimension: arms.dim(),
        num_arms: arms.len(),
        optimal_index: profile.as_ref().map(|p| p.optimal_index),
        gaps: profile.as_ref().map(|p| p.gaps.clone()),
        delta_min: profile.as_ref().map(|p| p.delta_min),
    })
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

/// One recorded checkpoint. Regret columns are cumulative pseudo-regret
/// (clean means, fixed comparator); `clips` is the cumulative clip count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub regret_expected: f64,
    pub regret_realized: f64,
    pub entropy_q: f64,
    pub beta: f64,
    pub gamma: f64,
    pub one_minus_qstar: f64,
    pub clips: u64,
}

/// Per-run health numbers collected while the run executes; these cover
/// quantities that the trace columns cannot reconstruct.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunDiagnostics {
    pub rounds: usize,
    /// max over rounds and arms of |loss estimate| / beta_t (0 when the
    /// policy does not estimate).
    pub max_estimate_rate_ratio: f64,
    pub corruption_spent: f64,
    pub clips: u64,
    /// Gap-weighted drift dominates half the selection mass of suboptimal
    /// arms; evaluated only when gaps are known.
    pub self_bounding_holds: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceMetadata {
    pub rep: usize,
    pub seed: u64,
    pub config_hash: String,
    pub g_pi: f64,
    pub policy: PolicyKind,
    pub comparator: usize,
    pub diagnostics: RunDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretTrace {
    pub rows: Vec<TraceRow>,
    pub metadata: TraceMetadata,
    /// Corruption applied per round; `Some` only in the corrupted regime.
    pub applied_corruption: Option<Vec<f64>>,
}

/// Rounds recorded under a granularity; always includes 1 and the horizon.
pub fn checkpoint_rounds(horizon: usize, granularity: RecordGranularity) -> Vec<usize> {
    assert!(horizon >= 1);
    match granularity {
        RecordGranularity::EveryRound => (1..=horizon).collect(),
        RecordGranularity::PowerOfTwoCheckpoints => {
            let mut rounds = Vec::new();
            let mut t = 1usize;
            while t <= horizon {
                rounds.push(t);
                match t.checked_mul(2) {
                    Some(next) => t = next,
                    None => break,
                }
            }
            if *rounds.last().expect("at least round 1") != horizon {
                rounds.push(horizon);
            }
            rounds
        }
    }
}

// ---------------------------------------------------------------------------
// Deterministic generator keying
// ---------------------------------------------------------------------------

/// Generator for one (seed, repetition, round) cell. Rounds occupy disjoint
/// word ranges of one stream, so recording granularity and parallel order
/// cannot change any draw.
pub fn round_rng(base_seed: u64, rep: u64, round: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(rep));
    rng.set_stream(ROUND_STREAM);
    rng.set_word_pos(round as u128 * WORDS_PER_ROUND);
    rng
}

/// Generator for a repetition's one-shot setup draws (corruption plans),
/// on a stream disjoint from every round stream.
pub fn setup_rng(base_seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(rep));
    rng.set_stream(SETUP_STREAM);
    rng
}

// ---------------------------------------------------------------------------
// Single-run execution
// ---------------------------------------------------------------------------

enum Learner {
    Estimating(FtrlState),
    Uniform(UniformPolicy),
}

impl Learner {
    fn new(kind: PolicyKind, design: &DesignResult, dim: usize, horizon: usize) -> Learner {
        match kind {
            PolicyKind::Ftrl => Learner::Estimating(FtrlState::entropy_adaptive(
                design.weights.clone(),
                design.g_value,
                dim,
                horizon,
            )),
            PolicyKind::Exp2 => Learner::Estimating(FtrlState::fixed_rate(
                design.weights.clone(),
                design.g_value,
                dim,
                horizon,
            )),
            PolicyKind::Uniform => Learner::Uniform(UniformPolicy::new(design.weights.len())),
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> Result<PolicyDecision> {
        match self {
            Learner::Estimating(state) => Ok(state.step(rng)?),
            Learner::Uniform(state) => Ok(state.step(rng)),
        }
    }

    fn absorb(
        &mut self,
        arms: &ArmSet,
        decision: &PolicyDecision,
        observed_loss: f64,
    ) -> Result<Option<LossEstimate>> {
        match self {
            Learner::Estimating(state) => {
                Ok(Some(state.absorb_feedback(arms, decision, observed_loss)?))
            }
            Learner::Uniform(state) => {
                state.absorb_feedback();
                Ok(None)
            }
        }
    }
}

struct Pending {
    t: usize,
    cum_expected: f64,
    cum_realized: f64,
    entropy: f64,
    beta: f64,
    gamma: f64,
    clips: u64,
    q_row: Vec<f64>,
    cum_means: Vec<f64>,
}

/// Executes one repetition: T rounds of policy-environment interaction,
/// recorded at the configured granularity. Deterministic in
/// (config, base_seed, rep).
pub fn run_single(
    config: &RunConfig,
    arms: &ArmSet,
    design: &DesignResult,
    rep: usize,
) -> Result<RegretTrace> {
    let horizon = config.horizon;
    let n = arms.len();
    let mut setup = setup_rng(config.base_seed, rep as u64);
    let mut env = Environment::new(&config.environment, arms, horizon, &mut setup)?;
    let profile: Option<GapProfile> = match &config.environment {
        EnvironmentSpec::Stochastic { theta, .. } | EnvironmentSpec::Corrupted { theta, .. } => {
            Some(gap_profile(arms, theta)?)
        }
        EnvironmentSpec::Adversarial { .. } => None,
    };
    let mut learner = Learner::new(config.policy, design, arms.dim(), horizon);

    let checkpoints = checkpoint_rounds(horizon, config.record_granularity);
    let mut next_checkpoint = 0usize;
    let mut pending: Vec<Pending> = Vec::with_capacity(checkpoints.len());

    let mut cum_means = vec![0.0; n];
    let mut cum_expected = 0.0;
    let mut cum_realized = 0.0;
    let mut clips = 0u64;
    let mut max_ratio = 0.0f64;
    let mut drift_sum = 0.0;
    let mut selection_sum = 0.0;

    for t in 1..=horizon {
        let mut rng = round_rng(config.base_seed, rep as u64, t);
        let decision = learner.step(&mut rng)?;
        let feedback = env.emit_loss(t, arms, decision.chosen, &mut rng)?;
        let means = env.round_arm_means();

        for (acc, m) in cum_means.iter_mut().zip(means) {
            *acc += m;
        }
        cum_expected +=
            decision.p.probs().iter().zip(means).map(|(p, m)| p * m).sum::<f64>();
        cum_realized += means[decision.chosen];
        clips += feedback.clipped as u64;

        if let Some(profile) = &profile {
            let drift: f64 = decision
                .q
                .probs()
                .iter()
                .zip(&profile.gaps)
                .map(|(q, gap)| q * gap)
                .sum();
            drift_sum += (1.0 - decision.gamma) * drift;
            selection_sum += 1.0 - decision.q.prob(profile.optimal_index);
        }

        let estimate = learner.absorb(arms, &decision, feedback.observed_loss)?;
        if let Some(est) = estimate {
            let worst = est.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            max_ratio = max_ratio.max(worst / decision.beta);
        }

        if next_checkpoint < checkpoints.len() && t == checkpoints[next_checkpoint] {
            next_checkpoint += 1;
            pending.push(Pending {
                t,
                cum_expected,
                cum_realized,
                entropy: decision.entropy_q,
                beta: decision.beta,
                gamma: decision.gamma,
                clips,
                q_row: decision.q.probs().to_vec(),
                cum_means: cum_means.clone(),
            });
        }
    }

    let comparator = match &profile {
        Some(p) => p.optimal_index,
        None => {
            let mut best = 0;
            for (i, &m) in cum_means.iter().enumerate() {
                if m < cum_means[best] {
                    best = i;
                }
            }
            best
        }
    };
    let rows: Vec<TraceRow> = pending
        .into_iter()
        .map(|p| TraceRow {
            t: p.t,
            regret_expected: p.cum_expected - p.cum_means[comparator],
            regret_realized: p.cum_realized - p.cum_means[comparator],
            entropy_q: p.entropy,
            beta: p.beta,
            gamma: p.gamma,
            one_minus_qstar: 1.0 - p.q_row[comparator],
            clips: p.clips,
        })
        .collect();

    let self_bounding_holds = profile
        .as_ref()
        .map(|p| drift_sum + 1e-9 >= 0.5 * p.delta_min * selection_sum);
    let applied_corruption = match &config.environment {
        EnvironmentSpec::Corrupted { .. } => Some(env.applied_corruption().to_vec()),
        _ => None,
    };
    Ok(RegretTrace {
        rows,
        applied_corruption,
        metadata: TraceMetadata {
            rep,
            seed: config.base_seed.wrapping_add(rep as u64),
            config_hash: config_hash(config),
            g_pi: design.g_value,
            policy: config.policy,
            comparator,
            diagnostics: RunDiagnostics {
                rounds: horizon,
                max_estimate_rate_ratio: max_ratio,
                corruption_spent: env.corruption_spent(),
                clips,
                self_bounding_holds,
            },
        },
    })
}

// ---------------------------------------------------------------------------
// Repetitions and aggregation
// ---------------------------------------------------------------------------

/// Mean and sample standard deviation across repetitions at one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointAggregate {
    pub t: usize,
    pub mean_regret_expected: f64,
    pub std_regret_expected: f64,
    pub mean_regret_realized: f64,
    pub std_regret_realized: f64,
    pub mean_entropy_q: f64,
    pub std_entropy_q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionSet {
    pub traces: Vec<RegretTrace>,
    pub aggregates: Vec<CheckpointAggregate>,
    pub g_pi: f64,
}

/// Runs the design step, erroring out when the iteration cap was hit.
pub fn prepare_design(arms: &ArmSet, tol: f64, max_iter: usize) -> Result<DesignResult> {
    let design = frank_wolfe_design(arms, tol, max_iter)?;
    if !design.converged {
        return Err(HarnessError::DesignNotConverged {
            iterations: design.iterations,
            g_value: design.g_value,
        });
    }
    Ok(design)
}

fn collect_serial(
    config: &RunConfig,
    arms: &ArmSet,
    design: &DesignResult,
) -> Result<Vec<RegretTrace>> {
    (0..config.repetitions).map(|rep| run_single(config, arms, design, rep)).collect()
}

/// Parallelism cap from the BOTW_THREADS variable; unset means the default
/// pool, 1 forces the serial path.
fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("BOTW_THREADS") {
        Ok(raw) => {
            let n: usize = raw.trim().parse().map_err(|_| HarnessError::InvalidConfig {
                message: format!("BOTW_THREADS must be a positive integer, got {:?}", raw),
            })?;
            if n == 0 {
                return Err(HarnessError::InvalidConfig {
                    message: "BOTW_THREADS must be a positive integer, got \"0\"".into(),
                });
            }
            Ok(Some(n))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(HarnessError::InvalidConfig { message: format!("BOTW_THREADS: {}", e) }),
    }
}

#[cfg(feature = "parallel")]
fn collect_traces(
    config: &RunConfig,
    arms: &ArmSet,
    design: &DesignResult,
) -> Result<Vec<RegretTrace>> {
    let par = |config: &RunConfig, arms: &ArmSet, design: &DesignResult| {
        (0..config.repetitions)
            .into_par_iter()
            .map(|rep| run_single(config, arms, design, rep))
            .collect::<Result<Vec<_>>>()
    };
    match thread_cap()? {
        Some(1) => collect_serial(config, arms, design),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(k).build().map_err(|e| {
                HarnessError::InvalidConfig { message: format!("thread pool: {}", e) }
            })?;
            pool.install(|| par(config, arms, design))
        }
        None => par(config, arms, design),
    }
}

#[cfg(not(feature = "parallel"))]
fn collect_traces(
    config: &RunConfig,
    arms: &ArmSet,
    design: &DesignResult,
) -> Result<Vec<RegretTrace>> {
    let _ = thread_cap()?;
    collect_serial(config, arms, design)
}

#[derive(Clone, Copy, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample standard deviation; 0 for fewer than two observations.
    fn sample_std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).sqrt()
        }
    }
}

fn aggregate_checkpoints(traces: &[RegretTrace]) -> Vec<CheckpointAggregate> {
    let rows = traces[0].rows.len();
    assert!(traces.iter().all(|t| t.rows.len() == rows), "traces share the checkpoint set");
    (0..rows)
        .map(|j| {
            let t = traces[0].rows[j].t;
            let mut expected = Welford::default();
            let mut realized = Welford::default();
            let mut entropy = Welford::default();
            for trace in traces {
                let row = trace.rows[j];
                assert_eq!(row.t, t, "traces share the checkpoint set");
                expected.push(row.regret_expected);
                realized.push(row.regret_realized);
                entropy.push(row.entropy_q);
            }
            CheckpointAggregate {
                t,
                mean_regret_expected: expected.mean(),
                std_regret_expected: expected.sample_std(),
                mean_regret_realized: realized.mean(),
                std_regret_realized: realized.sample_std(),
                mean_entropy_q: entropy.mean(),
                std_entropy_q: entropy.sample_std(),
            }
        })
        .collect()
}

/// Runs all repetitions (concurrently when the `parallel` feature is active
/// and BOTW_THREADS does not force the serial path), merging results in
/// repetition order.
pub fn run_repetitions(config: &RunConfig) -> Result<RepetitionSet> {
    config.validate()?;
    let arms = config.arm_set_source.load()?;
    let design = prepare_design(&arms, config.design_tol, DESIGN_MAX_ITER_DEFAULT)?;
    let traces = collect_traces(config, &arms, &design)?;
    let aggregates = aggregate_checkpoints(&traces);
    Ok(RepetitionSet { traces, aggregates, g_pi: design.g_value })
}

/// Like [`run_repetitions`] but always sequential, whatever the features;
/// reference path for concurrency-soundness checks and benchmarks.
pub fn run_repetitions_serial(config: &RunConfig) -> Result<RepetitionSet> {
    config.validate()?;
    let arms = config.arm_set_source.load()?;
    let design = prepare_design(&arms, config.design_tol, DESIGN_MAX_ITER_DEFAULT)?;
    let traces = collect_serial(config, &arms, &design)?;
    let aggregates = aggregate_checkpoints(&traces);
    Ok(RepetitionSet { traces, aggregates, g_pi: design.g_value })
}

// ---------------------------------------------------------------------------
// Horizon sweeps and slope fitting
// ---------------------------------------------------------------------------

/// Final-checkpoint statistics for one horizon of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonStats {
    pub horizon: usize,
    pub mean_final_regret_expected: f64,
    pub std_final_regret_expected: f64,
    pub mean_final_regret_realized: f64,
    pub std_final_regret_realized: f64,
    pub mean_final_entropy_q: f64,
}

/// Summary written next to traces: config echo, per-horizon statistics, the
/// fitted log-log slope (sweeps only), the achieved design value, and a
/// digest of the invariant report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub g_pi: f64,
    pub per_horizon: Vec<HorizonStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_residual_rms: Option<f64>,
    pub invariants_passed: bool,
    pub invariant_digest: String,
}

fn stats_from(horizon: usize, set: &RepetitionSet) -> HorizonStats {
    let last = set.aggregates.last().expect("at least one checkpoint");
    HorizonStats {
        horizon,
        mean_final_regret_expected: last.mean_regret_expected,
        std_final_regret_expected: last.std_regret_expected,
        mean_final_regret_realized: last.mean_regret_realized,
        std_final_regret_realized: last.std_regret_realized,
        mean_final_entropy_q: last.mean_entropy_q,
    }
}

/// Ordinary least squares of ln(value) on ln(horizon); returns the slope and
/// the root-mean-square residual in log space.
pub fn fit_loglog_slope(horizons: &[usize], values: &[f64]) -> Result<(f64, f64)> {
    if horizons.len() != values.len() {
        return Err(HarnessError::InvalidConfig {
            message: format!(
                "slope fit needs matching lengths, got {} horizons and {} values",
                horizons.len(),
                values.len()
            ),
        });
    }
    if horizons.len() < 2 {
        return Err(HarnessError::InvalidConfig {
            message: "slope fit needs at least two horizons".into(),
        });
    }
    for (&t, &v) in horizons.iter().zip(values) {
        if !(v > 0.0) {
            return Err(HarnessError::NonPositiveRegret { horizon: t, value: v });
        }
    }
    let xs: Vec<f64> = horizons.iter().map(|&t| (t as f64).ln()).collect();
    let ys: Vec<f64> = values.iter().map(|&v| v.ln()).collect();
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let rss: f64 =
        xs.iter().zip(&ys).map(|(x, y)| (y - (intercept + slope * x)).powi(2)).sum();
    Ok((slope, (rss / n).sqrt()))
}

fn validate_grid(grid: &[usize]) -> Result<()> {
    if grid.is_empty() {
        return Err(HarnessError::InvalidConfig { message: "horizon grid is empty".into() });
    }
    for window in grid.windows(2) {
        if window[1] <= window[0] {
            return Err(HarnessError::InvalidConfig {
                message: "horizon grid must be strictly increasing".into(),
            });
        }
    }
    if let Some(&bad) = grid.iter().find(|&&t| !t.is_power_of_two()) {
        return Err(HarnessError::InvalidConfig {
            message: format!("horizon grid entries must be powers of two, got {}", bad),
        });
    }
    Ok(())
}

/// Runs the config once per horizon in the grid (the rate schedule is
/// re-derived for each T, so traces of different horizons are not prefixes
/// of one another) and fits the log-log slope of mean final regret.
pub fn sweep_horizons(config: &RunConfig, grid: &[usize]) -> Result<RunSummary> {
    validate_grid(grid)?;
    config.validate()?;
    let arms = config.arm_set_source.load()?;
    let mut per_horizon = Vec::with_capacity(grid.len());
    let mut g_pi = 0.0;
    let mut reports = Vec::new();
    for &horizon in grid {
        let mut cfg = config.clone();
        cfg.horizon = horizon;
        let set = run_repetitions(&cfg)?;
        g_pi = set.g_pi;
        per_horizon.push(stats_from(horizon, &set));
        let gaps = gaps_file_for(&cfg, &arms)?;
        reports.push(invariant_report_for_traces(&set.traces, &gaps));
    }
    let means: Vec<f64> =
        per_horizon.iter().map(|s| s.mean_final_regret_expected).collect();
    let (slope, residual) = fit_loglog_slope(grid, &means)?;
    let merged = InvariantReport::merge(reports);
    Ok(RunSummary {
        config: config.clone(),
        g_pi,
        per_horizon,
        slope: Some(slope),
        slope_residual_rms: Some(residual),
        invariants_passed: merged.passed,
        invariant_digest: merged.digest(),
    })
}

/// Summary for a single-horizon run (no slope).
pub fn summarize_run(config: &RunConfig, set: &RepetitionSet, gaps: &GapsFile) -> RunSummary {
    let report = invariant_report_for_traces(&set.traces, gaps);
    RunSummary {
        config: config.clone(),
        g_pi: set.g_pi,
        per_horizon: vec![stats_from(config.horizon, set)],
        slope: None,
        slope_residual_rms: None,
        invariants_passed: report.passed,
        invariant_digest: report.digest(),
    }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

/// Writes repetitions concatenated in order, one header line, floats at 17
/// significant digits so reading back is bit-exact.
pub fn write_traces_csv(path: &Path, traces: &[RegretTrace]) -> Result<()> {
    let mut out = String::with_capacity(64 * (1 + traces.iter().map(|t| t.rows.len()).sum::<usize>()));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for trace in traces {
        for row in &trace.rows {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
                row.t,
                row.regret_expected,
                row.regret_realized,
                row.entropy_q,
                row.beta,
                row.gamma,
                row.one_minus_qstar,
                row.clips,
            ));
        }
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// Reads a trace CSV back into per-repetition segments (a row with t = 1
/// starts a new segment).
pub fn read_traces_csv(path: &Path) -> Result<Vec<Vec<TraceRow>>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let format_err = |line: usize, message: String| HarnessError::TraceFormat {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == TRACE_HEADER => {}
        Some((_, header)) => {
            return Err(format_err(1, format!("expected header {:?}, found {:?}", TRACE_HEADER, header)))
        }
        None => return Err(format_err(1, "empty file".into())),
    }
    let mut segments: Vec<Vec<TraceRow>> = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(format_err(lineno, format!("expected 8 fields, found {}", fields.len())));
        }
        let parse_f = |k: usize| -> Result<f64> {
            fields[k].parse().map_err(|e| {
                format_err(lineno, format!("bad number {:?}: {}", fields[k], e))
            })
        };
        let t: usize = fields[0]
            .parse()
            .map_err(|e| format_err(lineno, format!("bad round index {:?}: {}", fields[0], e)))?;
        let clips: u64 = fields[7]
            .parse()
            .map_err(|e| format_err(lineno, format!("bad clip count {:?}: {}", fields[7], e)))?;
        let row = TraceRow {
            t,
            regret_expected: parse_f(1)?,
            regret_realized: parse_f(2)?,
            entropy_q: parse_f(3)?,
            beta: parse_f(4)?,
            gamma: parse_f(5)?,
            one_minus_qstar: parse_f(6)?,
            clips,
        };
        if t == 1 || segments.is_empty() {
            segments.push(Vec::new());
        }
        segments.last_mut().expect("segment exists").push(row);
    }
    Ok(segments)
}

/// Writes per-round applied corruption as CSV (`t,c`), repetitions
/// concatenated in order like the trace CSV. Errors when the config did not
/// run the corrupted regime.
pub fn write_corruption_csv(path: &Path, traces: &[RegretTrace]) -> Result<()> {
    let mut out = String::from("t,c\n");
    for trace in traces {
        let applied = trace.applied_corruption.as_ref().ok_or_else(|| {
            HarnessError::InvalidConfig {
                message: "corruption export needs a corrupted-regime run".into(),
            }
        })?;
        for (i, c) in applied.iter().enumerate() {
            out.push_str(&format!("{},{:.16e}\n", i + 1, c));
        }
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// Serializes a value as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Design output in wire form: weights keyed by arm id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignFile {
    pub weights: BTreeMap<String, f64>,
    pub g_value: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl DesignFile {
    pub fn from_result(arms: &ArmSet, design: &DesignResult) -> Self {
        let weights = arms
            .ids()
            .iter()
            .zip(design.weights.probs())
            .map(|(id, &w)| (id.clone(), w))
            .collect();
        DesignFile {
            weights,
            g_value: design.g_value,
            iterations: design.iterations,
            converged: design.converged,
        }
    }
}

// ---------------------------------------------------------------------------
// Trace-invariant verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub passed: bool,
    /// (repetition segment, round) of the first violation.
    pub first_violation: Option<(usize, usize)>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantReport {
    pub checks: Vec<InvariantCheck>,
    pub passed: bool,
}

impl InvariantReport {
    fn from_checks(checks: Vec<InvariantCheck>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        InvariantReport { checks, passed }
    }

    fn merge(reports: Vec<InvariantReport>) -> Self {
        let mut checks = Vec::new();
        for report in reports {
            checks.extend(report.checks);
        }
        InvariantReport::from_checks(checks)
    }

    /// Hex SHA-256 over the rendered check lines.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for check in &self.checks {
            hasher.update(render_check(check).as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().iter().map(|b| format!("{:02x}", b)).collect()
    }
}

/// One printable line per check, used by the CLI and the report digest.
pub fn render_check(check: &InvariantCheck) -> String {
    match (check.passed, check.first_violation) {
        (true, _) => format!("PASS {}", check.name),
        (false, Some((seg, t))) => {
            format!("FAIL {} (rep {}, t {}): {}", check.name, seg, t, check.detail)
        }
        (false, None) => format!("FAIL {}: {}", check.name, check.detail),
    }
}

struct CheckBuilder {
    name: &'static str,
    passed: bool,
    first_violation: Option<(usize, usize)>,
    detail: String,
}

impl CheckBuilder {
    fn new(name: &'static str) -> Self {
        CheckBuilder { name, passed: true, first_violation: None, detail: String::new() }
    }

    fn fail(&mut self, seg: usize, t: usize, detail: String) {
        if self.passed {
            self.passed = false;
            self.first_violation = Some((seg, t));
            self.detail = detail;
        }
    }

    fn fail_global(&mut self, detail: String) {
        if self.passed {
            self.passed = false;
            self.detail = detail;
        }
    }

    fn build(self) -> InvariantCheck {
        InvariantCheck {
            name: self.name,
            passed: self.passed,
            first_violation: self.first_violation,
            detail: self.detail,
        }
    }
}

const CHECK_TOL: f64 = 1e-9;

fn is_contiguous(rows: &[TraceRow]) -> bool {
    rows.iter().enumerate().all(|(i, row)| row.t == i + 1)
}

/// Evaluates trace inequalities on per-repetition segments.
///
/// Row-wise checks (monotonicity, ranges) hold on any recorded subset of
/// rounds; the aggregate entropy bounds additionally require every-round
/// granularity, which is what `require_every_round` enforces for the
/// file-based verifier. With the flag off, aggregate checks are evaluated
/// only on contiguous segments and skipped otherwise.
fn build_report(
    segments: &[&[TraceRow]],
    gaps: &GapsFile,
    require_every_round: bool,
) -> InvariantReport {
    let mut checks = Vec::new();

    let mut consistent = CheckBuilder::new("gaps_file_consistent");
    if gaps.num_arms < 2 {
        consistent.fail_global(format!("num_arms must be >= 2, got {}", gaps.num_arms));
    }
    if gaps.dimension < 1 {
        consistent.fail_global(format!("dimension must be >= 1, got {}", gaps.dimension));
    }
    if let Some(g) = &gaps.gaps {
        if g.len() != gaps.num_arms {
            consistent
                .fail_global(format!("{} gaps for {} arms", g.len(), gaps.num_arms));
        }
        if let Some(&bad) = g.iter().find(|&&x| !(x >= 0.0)) {
            consistent.fail_global(format!("negative gap {}", bad));
        }
    }
    if let Some(i) = gaps.optimal_index {
        if i >= gaps.num_arms {
            consistent.fail_global(format!("optimal_index {} out of range", i));
        }
    }
    let gaps_ok = consistent.passed;
    checks.push(consistent.build());

    let mut nonempty = CheckBuilder::new("trace_nonempty");
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        nonempty.fail_global("no trace rows".into());
    }
    checks.push(nonempty.build());

    let mut contiguous = CheckBuilder::new("rounds_contiguous");
    let all_contiguous = segments.iter().all(|s| is_contiguous(s));
    if require_every_round && !all_contiguous {
        let (seg, row) = segments
            .iter()
            .enumerate()
            .find_map(|(i, s)| {
                s.iter().enumerate().find(|(j, row)| row.t != j + 1).map(|(_, row)| (i, row.t))
            })
            .unwrap_or((0, 0));
        contiguous.fail(
            seg,
            row,
            "verification requires every_round recording granularity".into(),
        );
    }
    checks.push(contiguous.build());

    let ln_n = (gaps.num_arms.max(2) as f64).ln();

    let mut rate = CheckBuilder::new("rate_nondecreasing");
    let mut explore_cap = CheckBuilder::new("exploration_capped");
    let mut explore_mono = CheckBuilder::new("exploration_nonincreasing_after_cap");
    let mut entropy_range = CheckBuilder::new("entropy_in_range");
    let mut selection_range = CheckBuilder::new("selection_fraction_in_range");
    let mut clips_mono = CheckBuilder::new("clips_nondecreasing");
    let mut regret_mono = CheckBuilder::new("regret_expected_nondecreasing");
    let mut entropy_selection = CheckBuilder::new("entropy_selection_bound");
    let mut rate_entropy = CheckBuilder::new("rate_increment_entropy_bound");
    let mut drift_floor = CheckBuilder::new("exploration_drift_floor");

    for (seg, rows) in segments.iter().enumerate() {
        let mut prev: Option<&TraceRow> = None;
        let mut below_cap = false;
        for row in rows.iter() {
            if let Some(prev) = prev {
                if row.beta + CHECK_TOL * (1.0 + prev.beta.abs()) < prev.beta {
                    rate.fail(
                        seg,
                        row.t,
                        format!("beta fell from {} to {}", prev.beta, row.beta),
                    );
                }
                if below_cap && row.gamma > prev.gamma + CHECK_TOL {
                    explore_mono.fail(
                        seg,
                        row.t,
                        format!("gamma rose from {} to {} after leaving the cap", prev.gamma, row.gamma),
                    );
                }
                if row.clips < prev.clips {
                    clips_mono.fail(
                        seg,
                        row.t,
                        format!("clip count fell from {} to {}", prev.clips, row.clips),
                    );
                }
                if gaps.optimal_index.is_some()
                    && row.regret_expected + CHECK_TOL * (1.0 + prev.regret_expected.abs())
                        < prev.regret_expected
                {
                    regret_mono.fail(
                        seg,
                        row.t,
                        format!(
                            "expected regret fell from {} to {}",
                            prev.regret_expected, row.regret_expected
                        ),
                    );
                }
            }
            if !(-CHECK_TOL..=0.5 + CHECK_TOL).contains(&row.gamma) {
                explore_cap.fail(seg, row.t, format!("gamma = {} outside [0, 1/2]", row.gamma));
            }
            if row.gamma < 0.5 - CHECK_TOL {
                below_cap = true;
            }
            if !(-CHECK_TOL..=ln_n + CHECK_TOL).contains(&row.entropy_q) {
                entropy_range.fail(
                    seg,
                    row.t,
                    format!("entropy {} outside [0, ln {}]", row.entropy_q, gaps.num_arms),
                );
            }
            if !(-CHECK_TOL..=1.0 + CHECK_TOL).contains(&row.one_minus_qstar) {
                selection_range.fail(
                    seg,
                    row.t,
                    format!("1 - q(x*) = {} outside [0, 1]", row.one_minus_qstar),
                );
            }
            prev = Some(row);
        }

        // Aggregate bounds over the recorded rows.
        let sum_entropy: f64 = rows.iter().map(|r| r.entropy_q).sum();
        let sum_selection: f64 = rows.iter().map(|r| r.one_minus_qstar).sum();
        let drift: f64 = rows.iter().map(|r| (1.0 - r.gamma) * r.one_minus_qstar).sum();
        if drift + CHECK_TOL * (1.0 + sum_selection) < 0.5 * sum_selection {
            drift_floor.fail(
                seg,
                rows.last().map(|r| r.t).unwrap_or(0),
                format!("sum (1-gamma)(1-q*) = {} below half of {}", drift, sum_selection),
            );
        }

        if is_contiguous(rows) && !rows.is_empty() && gaps_ok {
            let horizon = rows.len();
            // Entropy is bounded through the selection mass of suboptimal
            // arms: sum H(q_t) <= S ln(e n T / S) with S = sum (1 - q_t(x*)).
            if sum_selection <= CHECK_TOL {
                if sum_entropy > CHECK_TOL {
                    entropy_selection.fail(
                        seg,
                        rows[0].t,
                        format!(
                            "entropy sum {} positive while selection sum is 0",
                            sum_entropy
                        ),
                    );
                }
            } else {
                let bound = sum_selection
                    * (std::f64::consts::E * gaps.num_arms as f64 * horizon as f64
                        / sum_selection)
                        .ln();
                if sum_entropy > bound + CHECK_TOL * (1.0 + bound.abs()) {
                    entropy_selection.fail(
                        seg,
                        rows[0].t,
                        format!("entropy sum {} exceeds bound {}", sum_entropy, bound),
                    );
                }
            }
            // Rate increments are damped by accumulated entropy:
            // sum (beta_{t+1} - beta_t) H(q_{t+1}) <= 2 c sqrt(ln n * sum H).
            let c = (gaps.dimension as f64 * (horizon.max(2) as f64).ln() / ln_n).sqrt();
            let lhs: f64 = rows
                .windows(2)
                .map(|w| (w[1].beta - w[0].beta) * w[1].entropy_q)
                .sum();
            let rhs = 2.0 * c * (ln_n * sum_entropy).sqrt();
            if lhs > rhs + CHECK_TOL * (1.0 + rhs.abs()) {
                rate_entropy.fail(
                    seg,
                    rows[0].t,
                    format!("weighted rate increments {} exceed bound {}", lhs, rhs),
                );
            }
        }
    }

    checks.push(rate.build());
    checks.push(explore_cap.build());
    checks.push(explore_mono.build());
    checks.push(entropy_range.build());
    checks.push(selection_range.build());
    checks.push(clips_mono.build());
    if gaps.optimal_index.is_some() {
        checks.push(regret_mono.build());
    }
    checks.push(drift_floor.build());
    checks.push(entropy_selection.build());
    checks.push(rate_entropy.build());

    InvariantReport::from_checks(checks)
}

/// File-level verification: every inequality the trace columns can express,
/// requiring every-round granularity for the aggregate entropy bounds.
pub fn verify_trace_invariants(segments: &[Vec<TraceRow>], gaps: &GapsFile) -> InvariantReport {
    let refs: Vec<&[TraceRow]> = segments.iter().map(|s| s.as_slice()).collect();
    build_report(&refs, gaps, true)
}

/// In-memory verification of freshly produced traces: trace-column checks
/// (aggregate bounds only on contiguous traces) plus the diagnostics that
/// trace columns cannot reconstruct.
pub fn invariant_report_for_traces(traces: &[RegretTrace], gaps: &GapsFile) -> InvariantReport {
    let refs: Vec<&[TraceRow]> = traces.iter().map(|t| t.rows.as_slice()).collect();
    let mut report = build_report(&refs, gaps, false);

    let mut ratio = CheckBuilder::new("estimate_within_rate");
    let mut kernel = CheckBuilder::new("gap_drift_dominates_selection");
    for trace in traces {
        let d = &trace.metadata.diagnostics;
        if trace.metadata.policy == PolicyKind::Ftrl && d.max_estimate_rate_ratio > 1.0 + CHECK_TOL
        {
            ratio.fail(
                trace.metadata.rep,
                d.rounds,
                format!("max |estimate|/beta = {}", d.max_estimate_rate_ratio),
            );
        }
        if d.self_bounding_holds == Some(false) {
            kernel.fail(trace.metadata.rep, d.rounds, "gap-weighted drift fell below half the suboptimal selection mass".into());
        }
    }
    report.checks.push(ratio.build());
    report.checks.push(kernel.build());
    report.passed = report.checks.iter().all(|c| c.passed);
    report
}
