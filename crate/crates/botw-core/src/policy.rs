//! Follow-the-regularized-leader over the arm simplex.
//!
//! The learner maintains cumulative loss estimates L and plays
//!
//! ```text
//! q_t = argmin_p <L, p> - beta_t H(p)        (negative-entropy regularizer)
//! p_t = gamma_t pi + (1 - gamma_t) q_t       (forced exploration mix)
//! ```
//!
//! where pi is a near-G-optimal design and H is Shannon entropy. The argmin
//! has the closed form q_t(x) proportional to exp(-L(x)/beta_t). After
//! observing the loss of the sampled arm, the full loss vector is estimated
//! by least squares through the moment matrix of p_t:
//!
//! ```text
//! lhat_t(x) = x^T Sigma_t^{-1} x_t * loss(x_t),   Sigma_t = sum_x p_t(x) x x^T
//! ```
//!
//! which is unbiased and bounded by g(pi)/gamma_t in magnitude.
//!
//! The learning rate grows with the observed entropy history:
//!
//! ```text
//! beta_t = 2 g(pi) + c + sum_{tau=1}^{t-1} c / sqrt(1 + (ln n)^{-1} sum_{s<=tau} H(q_s))
//! c      = sqrt(d ln T / ln n)
//! gamma_t = min(g(pi)/beta_t, 1/2)
//! ```
//!
//! maintained incrementally in O(1) per round. A fixed-rate variant
//! (constant beta = sqrt(d T / ln n), the classic exponential-weights
//! baseline) and a uniform-play baseline share the same interfaces.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{covariance, ArmSet, GeometryError, LdlFactor, SimplexDistribution};

/// Leader probabilities are floored at this value before renormalization.
pub const LEADER_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite value in leader input")]
    NonFiniteInput,
    #[error("observed loss {value} outside [-1, 1]")]
    LossOutOfRange { value: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

/// Shannon entropy of a distribution, with 0 ln 0 = 0. Nonnegative.
pub fn entropy(p: &SimplexDistribution) -> f64 {
    let h: f64 = p
        .probs()
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum();
    h.max(0.0)
}

/// Closed-form FTRL leader: q(x) proportional to exp(-L(x)/beta).
///
/// Stabilized by subtracting the minimum cumulative loss before
/// exponentiation; entries are floored at [`LEADER_FLOOR`] and renormalized,
/// so every arm keeps strictly positive probability.
pub fn regularized_leader(cum_loss: &[f64], beta: f64) -> Result<SimplexDistribution> {
    assert!(beta > 0.0, "leader needs a positive learning rate");
    if cum_loss.iter().any(|x| !x.is_finite()) || !beta.is_finite() {
        return Err(PolicyError::NonFiniteInput);
    }
    let m = cum_loss.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = cum_loss.iter().map(|&l| (-(l - m) / beta).exp()).collect();
    let sum: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x = (*x / sum).max(LEADER_FLOOR);
    }
    let sum2: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= sum2;
    }
    Ok(SimplexDistribution::from_normalized(w))
}

/// Exploration mix p = gamma pi + (1 - gamma) q, entrywise.
pub fn mix(
    q: &SimplexDistribution,
    design: &SimplexDistribution,
    gamma: f64,
) -> SimplexDistribution {
    assert!((0.0..=0.5).contains(&gamma), "mixing weight {} outside [0, 1/2]", gamma);
    assert_eq!(q.len(), design.len());
    let p: Vec<f64> = q
        .probs()
        .iter()
        .zip(design.probs())
        .map(|(&qi, &pii)| gamma * pii + (1.0 - gamma) * qi)
        .collect();
    SimplexDistribution::from_normalized(p)
}

/// Samples an arm index by inverse CDF over the stated arm order.
pub fn sample_arm<R: Rng + ?Sized>(p: &SimplexDistribution, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.probs().iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Per-arm loss estimates produced by one round of feedback.
#[derive(Debug, Clone)]
pub struct LossEstimate {
    pub values: Vec<f64>,
}

/// Least-squares loss estimator through the sampling distribution's moment
/// matrix: lhat(x) = x^T Sigma^{-1} x_chosen * observed_loss.
///
/// Costs one SPD factorization plus one inner product per arm. When the
/// sampling distribution dominates `gamma * design`, every estimate is
/// bounded by g(pi)/gamma in magnitude; that bound is asserted on each call
/// (`g_pi` is the achieved design value, `gamma` the mixing weight used).
pub fn estimate_loss(
    arms: &ArmSet,
    sampling: &SimplexDistribution,
    chosen: usize,
    observed_loss: f64,
    gamma: f64,
    g_pi: f64,
) -> Result<LossEstimate> {
    if !(observed_loss.abs() <= 1.0) {
        return Err(PolicyError::LossOutOfRange { value: observed_loss });
    }
    let factor = LdlFactor::new(&covariance(sampling, arms)).map_err(PolicyError::Geometry)?;
    let w = factor.solve(arms.arm(chosen));
    let bound = g_pi / gamma * (1.0 + 1e-9) + 1e-12;
    let values: Vec<f64> = arms
        .arms()
        .map(|x| {
            let v = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() * observed_loss;
            assert!(
                v.abs() <= bound,
                "loss estimate {} exceeds g(pi)/gamma = {}",
                v,
                g_pi / gamma
            );
            v
        })
        .collect();
    Ok(LossEstimate { values })
}

/// Which learner a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Entropy-adaptive FTRL (the main algorithm).
    Ftrl,
    /// Fixed-rate exponential weights over the same estimator and mix.
    Exp2,
    /// Uniform random play; linear-regret floor for sanity checks.
    Uniform,
}

/// Learning-rate schedule shared by the FTRL learner and its fixed-rate
/// baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
enum RateSchedule {
    /// beta_t = 2 g(pi) + c + sum of entropy-damped increments.
    EntropyAdaptive,
    /// Constant beta (exponential-weights baseline).
    Constant(f64),
}

/// One committed round: the leader, the played mixture, the sampled arm, and
/// the schedule values in force. `p` equals `gamma * design + (1-gamma) * q`
/// entrywise by construction.
#[derive(Debug, Clone)]
pub struct PolicyDecision {
    pub round: usize,
    pub beta: f64,
    pub gamma: f64,
    pub q: SimplexDistribution,
    pub p: SimplexDistribution,
    pub chosen: usize,
    pub entropy_q: f64,
}

/// Mutable learner state for the FTRL algorithm and the fixed-rate baseline.
///
/// `round` is 1-based. `beta` is strictly increasing under the adaptive
/// schedule and never depends on the current round's feedback: the increment
/// absorbed after round t uses entropies of q_1..q_t only.
#[derive(Debug, Clone)]
pub struct FtrlState {
    round: usize,
    cum_loss_est: Vec<f64>,
    cum_entropy: f64,
    rate_increments: f64,
    beta: f64,
    gamma: f64,
    horizon: usize,
    c: f64,
    ln_arms: f64,
    g_pi: f64,
    design: SimplexDistribution,
    schedule: RateSchedule,
}

impl FtrlState {
    /// Entropy-adaptive learner. `g_pi` is the achieved design criterion
    /// value; `dim` the ambient dimension; `horizon` the planned number of
    /// rounds T (the schedule constant c = sqrt(d ln T / ln n) depends on it).
    pub fn entropy_adaptive(
        design: SimplexDistribution,
        g_pi: f64,
        dim: usize,
        horizon: usize,
    ) -> Self {
        assert!(horizon >= 1);
        let n = design.len() as f64;
        let c = (dim as f64 * (horizon as f64).ln() / n.ln()).sqrt();
        Self::with_schedule(design, g_pi, horizon, c, RateSchedule::EntropyAdaptive)
    }

    /// Fixed-rate exponential-weights baseline: constant
    /// beta = sqrt(d T / ln n), gamma = min(g(pi)/beta, 1/2).
    pub fn fixed_rate(
        design: SimplexDistribution,
        g_pi: f64,
        dim: usize,
        horizon: usize,
    ) -> Self {
        assert!(horizon >= 1);
        let n = design.len() as f64;
        let beta = (dim as f64 * horizon as f64 / n.ln()).sqrt();
        Self::with_schedule(design, g_pi, horizon, 0.0, RateSchedule::Constant(beta))
    }

    fn with_schedule(
        design: SimplexDistribution,
        g_pi: f64,
        horizon: usize,
        c: f64,
        schedule: RateSchedule,
    ) -> Self {
        assert!(design.len() >= 2, "need at least two arms");
        assert!(g_pi > 0.0);
        let n = design.len();
        let mut state = FtrlState {
            round: 1,
            cum_loss_est: vec![0.0; n],
            cum_entropy: 0.0,
            rate_increments: 0.0,
            beta: 0.0,
            gamma: 0.0,
            horizon,
            c,
            ln_arms: (n as f64).ln(),
            g_pi,
            design,
            schedule,
        };
        state.beta = state.current_beta();
        state.gamma = state.current_gamma();
        state
    }

    /// beta_t for the round about to be played.
    pub fn current_beta(&self) -> f64 {
        match self.schedule {
            RateSchedule::EntropyAdaptive => 2.0 * self.g_pi + self.c + self.rate_increments,
            RateSchedule::Constant(beta) => beta,
        }
    }

    /// gamma_t = min(g(pi)/beta_t, 1/2) for the round about to be played.
    pub fn current_gamma(&self) -> f64 {
        (self.g_pi / self.current_beta()).min(0.5)
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn g_pi(&self) -> f64 {
        self.g_pi
    }

    /// Schedule constant c = sqrt(d ln T / ln n) (0 for the fixed-rate baseline).
    pub fn schedule_constant(&self) -> f64 {
        self.c
    }

    pub fn cumulative_entropy(&self) -> f64 {
        self.cum_entropy
    }

    pub fn cumulative_loss_estimates(&self) -> &[f64] {
        &self.cum_loss_est
    }

    /// Computes the leader, mixes in exploration, and samples an arm.
    /// Pure in the state: calling twice without feedback replays the same
    /// distributions (the sample consumes randomness from `rng`).
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<PolicyDecision> {
        let beta = self.current_beta();
        let gamma = self.current_gamma();
        self.beta = beta;
        self.gamma = gamma;
        let q = regularized_leader(&self.cum_loss_est, beta)?;
        let entropy_q = entropy(&q);
        let p = mix(&q, &self.design, gamma);
        let chosen = sample_arm(&p, rng);
        Ok(PolicyDecision {
            round: self.round,
            beta,
            gamma,
            q,
            p,
            chosen,
            entropy_q,
        })
    }

    /// Absorbs one round of feedback: estimates the loss vector, accumulates
    /// it, and advances the learning-rate schedule with H(q_t).
    pub fn absorb_feedback(
        &mut self,
        arms: &ArmSet,
        decision: &PolicyDecision,
        observed_loss: f64,
    ) -> Result<LossEstimate> {
        debug_assert_eq!(decision.round, self.round, "feedback must match the open round");
        let est = estimate_loss(
            arms,
            &decision.p,
            decision.chosen,
            observed_loss,
            decision.gamma,
            self.g_pi,
        )?;
        for (acc, v) in self.cum_loss_est.iter_mut().zip(&est.values) {
            *acc += v;
        }
        self.cum_entropy += decision.entropy_q;
        if let RateSchedule::EntropyAdaptive = self.schedule {
            self.rate_increments += self.c / (1.0 + self.cum_entropy / self.ln_arms).sqrt();
        }
        self.round += 1;
        let beta_next = self.current_beta();
        debug_assert!(beta_next >= self.beta, "learning rate must not decrease");
        self.beta = beta_next;
        self.gamma = self.current_gamma();
        Ok(est)
    }
}

/// Uniform-play baseline: p_t is uniform every round, nothing is learned.
/// Reported with beta = gamma = 0 and entropy ln n.
#[derive(Debug, Clone)]
pub struct UniformPolicy {
    round: usize,
    n: usize,
    ln_n: f64,
}

impl UniformPolicy {
    pub fn new(n: usize) -> Self {
        assert!(n >= 2);
        UniformPolicy { round: 1, n, ln_n: (n as f64).ln() }
    }

    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> PolicyDecision {
        let q = SimplexDistribution::uniform(self.n);
        let p = q.clone();
        let chosen = sample_arm(&p, rng);
        PolicyDecision {
            round: self.round,
            beta: 0.0,
            gamma: 0.0,
            q,
            p,
            chosen,
            entropy_q: self.ln_n,
        }
    }

    pub fn absorb_feedback(&mut self) {
        self.round += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn four_arm_design() -> SimplexDistribution {
        SimplexDistribution::uniform(4)
    }

    /// d = 2, n = 4, T = 1024, g(pi) = 2 worked example:
    /// c = sqrt(2 ln 1024 / ln 4) = sqrt(10), beta_1 = 4 + sqrt(10).
    #[test]
    fn adaptive_rate_matches_worked_first_round() {
        let state = FtrlState::entropy_adaptive(four_arm_design(), 2.0, 2, 1024);
        let expected = 4.0 + 10.0f64.sqrt();
        assert!((state.current_beta() - expected).abs() <= 1e-9, "{}", state.current_beta());
        assert!((state.current_beta() - 7.16228).abs() <= 1e-5);
        // gamma_1 = min(2 / beta_1, 1/2) = 0.27924...
        assert!((state.current_gamma() - 2.0 / expected).abs() <= 1e-12);
        assert!((state.current_gamma() - 0.27924).abs() <= 1e-5);
    }

    /// Same instance after absorbing H(q_1) = ln 4: the increment is
    /// c/sqrt(2) = sqrt(5), so beta_2 = 4 + sqrt(10) + sqrt(5).
    #[test]
    fn adaptive_rate_matches_worked_second_round() {
        let arms = ArmSet::from_vectors(vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
            vec![0.0, -1.0],
        ])
        .unwrap();
        let mut state = FtrlState::entropy_adaptive(four_arm_design(), 2.0, 2, 1024);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let decision = state.step(&mut rng).unwrap();
        // Zero cumulative losses: the leader is uniform, entropy ln 4.
        assert!((decision.entropy_q - 4.0f64.ln()).abs() <= 1e-12);
        state.absorb_feedback(&arms, &decision, 0.25).unwrap();
        let expected = 4.0 + 10.0f64.sqrt() + 5.0f64.sqrt();
        assert!((state.current_beta() - expected).abs() <= 1e-9, "{}", state.current_beta());
        assert!((state.current_beta() - 9.39835).abs() <= 1e-5);
        // The increment itself: c / sqrt(2) = 2.23607...
        assert!((state.rate_increments - 5.0f64.sqrt()).abs() <= 1e-9);
    }

    /// With all entropies zero the schedule reduces to beta_t = 2g + c + (t-1)c.
    #[test]
    fn adaptive_rate_with_zero_entropy_grows_linearly() {
        let design = SimplexDistribution::uniform(4);
        let mut state = FtrlState::with_schedule(
            design,
            2.0,
            1024,
            (2.0 * 1024.0f64.ln() / 4.0f64.ln()).sqrt(),
            RateSchedule::EntropyAdaptive,
        );
        let c = state.c;
        for t in 1..=5 {
            assert!((state.current_beta() - (4.0 + c + (t - 1) as f64 * c)).abs() <= 1e-9);
            // Absorb a synthetic zero-entropy round directly.
            state.cum_entropy += 0.0;
            state.rate_increments += c / (1.0 + state.cum_entropy / state.ln_arms).sqrt();
            state.round += 1;
        }
    }

    #[test]
    fn entropy_matches_hand_computed_values() {
        let p = SimplexDistribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        assert!((entropy(&p) - 1.0397207708399179).abs() <= 1e-12);
        let u = SimplexDistribution::uniform(4);
        assert!((entropy(&u) - 4.0f64.ln()).abs() <= 1e-12);
        let point = SimplexDistribution::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(entropy(&point), 0.0);
    }

    /// KKT stationarity of the closed-form leader: at an interior optimum of
    /// <L, p> + beta sum p ln p the quantity L_i + beta (1 + ln q_i) is the
    /// same for every arm.
    #[test]
    fn leader_satisfies_interior_stationarity() {
        let cases: [(&[f64], f64); 3] = [
            (&[0.1, 0.4, 0.9], 0.7),
            (&[2.0, 2.0, 2.0, 2.0], 1.3),
            (&[-0.5, 0.25, 0.0], 2.0),
        ];
        for (loss, beta) in cases {
            let q = regularized_leader(loss, beta).unwrap();
            let grads: Vec<f64> = loss
                .iter()
                .zip(q.probs())
                .map(|(&l, &qi)| l + beta * (1.0 + qi.ln()))
                .collect();
            for g in &grads[1..] {
                assert!((g - grads[0]).abs() <= 1e-9, "gradients {:?}", grads);
            }
        }
    }

    #[test]
    fn leader_handles_extreme_loss_spreads_without_overflow() {
        // Widely separated losses: best arm takes essentially all mass, the
        // rest stay at the floor, and everything remains finite.
        let q = regularized_leader(&[0.0, 1e6, 2e6], 1.0).unwrap();
        assert!(q.probs().iter().all(|p| p.is_finite() && *p > 0.0));
        assert!((q.prob(0) - 1.0).abs() <= 1e-12);
        // Equal losses: exactly uniform.
        let u = regularized_leader(&[5.0, 5.0, 5.0, 5.0], 0.3).unwrap();
        for i in 0..4 {
            assert!((u.prob(i) - 0.25).abs() <= 1e-15);
        }
        match regularized_leader(&[f64::NAN, 0.0], 1.0) {
            Err(PolicyError::NonFiniteInput) => {}
            other => panic!("expected NonFiniteInput, got {:?}", other),
        }
    }

    #[test]
    fn mix_is_exact_convex_combination() {
        let q = SimplexDistribution::new(vec![0.7, 0.2, 0.1]).unwrap();
        let pi = SimplexDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        let gamma = 0.25;
        let p = mix(&q, &pi, gamma);
        for i in 0..3 {
            let expected = gamma * pi.prob(i) + (1.0 - gamma) * q.prob(i);
            assert!((p.prob(i) - expected).abs() <= 1e-12);
        }
        let same = mix(&q, &pi, 0.0);
        assert_eq!(same.probs(), q.probs());
    }

    #[test]
    fn sample_arm_frequencies_match_probabilities() {
        let p = SimplexDistribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample_arm(&p, &mut rng)] += 1;
        }
        for (i, &count) in counts.iter().enumerate() {
            let freq = count as f64 / n as f64;
            assert!((freq - p.prob(i)).abs() <= 0.01, "arm {}: {}", i, freq);
        }
    }

    #[test]
    fn sample_arm_skips_zero_probability_prefix() {
        struct FixedU64(u64);
        impl rand::RngCore for FixedU64 {
            fn next_u32(&mut self) -> u32 {
                self.0 as u32
            }
            fn next_u64(&mut self) -> u64 {
                self.0
            }
            fn fill_bytes(&mut self, dest: &mut [u8]) {
                dest.fill(0);
            }
        }
        let p = SimplexDistribution::new(vec![0.0, 1.0]).unwrap();
        // u = 0.0: the zero-probability arm 0 must not be selected.
        assert_eq!(sample_arm(&p, &mut FixedU64(0)), 1);
        // u -> 1: falls through to the final arm.
        assert_eq!(sample_arm(&p, &mut FixedU64(u64::MAX)), 1);
    }

    /// Exact unbiasedness by enumeration: sum over chosen arms of
    /// p(x_t) lhat(y | x_t) recovers <y, theta> for every arm y.
    #[test]
    fn estimator_is_unbiased_by_enumeration() {
        let arms = ArmSet::from_vectors(vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.8, 0.6],
            vec![-0.5, 0.5],
        ])
        .unwrap();
        let p = SimplexDistribution::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let theta = [0.3, -0.6];
        let mut recovered = vec![0.0; arms.len()];
        for chosen in 0..arms.len() {
            let loss: f64 = arms.arm(chosen).iter().zip(&theta).map(|(a, b)| a * b).sum();
            let est = estimate_loss(&arms, &p, chosen, loss, 0.25, 2.0).unwrap();
            for (acc, v) in recovered.iter_mut().zip(&est.values) {
                *acc += p.prob(chosen) * v;
            }
        }
        for (y, rec) in arms.arms().zip(&recovered) {
            let truth: f64 = y.iter().zip(&theta).map(|(a, b)| a * b).sum();
            assert!((rec - truth).abs() <= 1e-10, "recovered {} vs {}", rec, truth);
        }
    }

    #[test]
    fn estimator_rejects_out_of_range_loss() {
        let arms = ArmSet::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = SimplexDistribution::uniform(2);
        match estimate_loss(&arms, &p, 0, 1.5, 0.25, 2.0) {
            Err(PolicyError::LossOutOfRange { value }) => assert_eq!(value, 1.5),
            other => panic!("expected LossOutOfRange, got {:?}", other),
        }
    }

    #[test]
    fn estimator_propagates_singular_moment_matrix() {
        let arms = ArmSet::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = SimplexDistribution::new(vec![1.0, 0.0]).unwrap();
        match estimate_loss(&arms, &p, 0, 0.5, 0.25, 2.0) {
            Err(PolicyError::Geometry(GeometryError::SingularMatrix { .. })) => {}
            other => panic!("expected SingularMatrix, got {:?}", other),
        }
    }

    #[test]
    fn uniform_policy_reports_constant_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pol = UniformPolicy::new(5);
        let d1 = pol.step(&mut rng);
        assert_eq!(d1.round, 1);
        assert_eq!(d1.beta, 0.0);
        assert_eq!(d1.gamma, 0.0);
        assert!((d1.entropy_q - 5.0f64.ln()).abs() <= 1e-12);
        pol.absorb_feedback();
        assert_eq!(pol.step(&mut rng).round, 2);
    }

    #[test]
    fn fixed_rate_baseline_uses_constant_rate() {
        let arms = ArmSet::from_vectors(vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
            vec![0.0, -1.0],
        ])
        .unwrap();
        let mut state = FtrlState::fixed_rate(SimplexDistribution::uniform(4), 2.0, 2, 1024);
        let expected = (2.0 * 1024.0 / 4.0f64.ln()).sqrt();
        assert!((state.current_beta() - expected).abs() <= 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let d = state.step(&mut rng).unwrap();
            state.absorb_feedback(&arms, &d, 0.1).unwrap();
            assert!((state.current_beta() - expected).abs() <= 1e-12);
        }
    }

    /// beta never incorporates the current round's entropy before the round
    /// is absorbed, and is strictly increasing across absorbed rounds.
    #[test]
    fn adaptive_rate_is_causal_and_strictly_increasing() {
        let arms = ArmSet::from_vectors(vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.8, 0.6],
            vec![-0.5, 0.5],
        ])
        .unwrap();
        let design = frank_wolfe_design_for_tests(&arms);
        let mut state =
            FtrlState::entropy_adaptive(design.0, design.1, arms.dim(), 256);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut last_beta = 0.0;
        for t in 1..=50 {
            let before = state.current_beta();
            let d = state.step(&mut rng).unwrap();
            assert_eq!(d.beta, before, "step must not advance the schedule");
            assert!(before > last_beta, "round {}: beta {} vs {}", t, before, last_beta);
            let loss = 0.3 * arms.arm(d.chosen)[0] - 0.2 * arms.arm(d.chosen)[1];
            state.absorb_feedback(&arms, &d, loss).unwrap();
            last_beta = before;
        }
    }

    fn frank_wolfe_design_for_tests(arms: &ArmSet) -> (SimplexDistribution, f64) {
        let r = crate::geometry::frank_wolfe_design(arms, 1e-3, 100_000).unwrap();
        assert!(r.converged);
        (r.weights, r.g_value)
    }
}
