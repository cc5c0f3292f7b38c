//! Exact numerical checks of the telescoping identity, the penalized
//! performance bound, the sampling log-likelihood inequality and the mutual
//! information step behind it.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exbmdp::{DpError, EndoMdp, ExBmdpSpec, ExbmdpError, OccupancyScaling, PolicyTable, TransitionTable};
use crate::rng::{dirichlet_ones, stream, StreamRng};

pub const TELESCOPING_TOL: f64 = 1e-8;
pub const BOUND_TOL: f64 = 1e-8;
pub const LIKELIHOOD_TOL: f64 = 1e-9;
pub const MI_TOL: f64 = 1e-10;
pub const ASSUMPTION_TOL: f64 = 1e-9;
pub const DEFAULT_POLICY_CAP: usize = 4096;
pub const DEFAULT_PATH_CAP: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("{what} has {size} elements, above the enumeration cap {cap} (instance: {n_states} states, {n_actions} actions)")]
    TooLarge { what: &'static str, size: u128, cap: usize, n_states: usize, n_actions: usize },
    #[error("policies do not share an action marginal: spread {spread:e} exceeds {tol:e}")]
    AssumptionViolated { spread: f64, tol: f64 },
    #[error("penalty weight must be finite and > 0, got {0}")]
    Lambda(f64),
    #[error("no valid instance could be generated for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },
    #[error("argument error: {0}")]
    Argument(String),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Env(#[from] ExbmdpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Telescoping,
    PerformanceBound,
    SamplingLikelihood,
    MixtureMi,
}

impl CheckKind {
    pub const ALL: [CheckKind; 4] =
        [CheckKind::Telescoping, CheckKind::PerformanceBound, CheckKind::SamplingLikelihood, CheckKind::MixtureMi];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckKind::Telescoping => "telescoping",
            CheckKind::PerformanceBound => "performance_bound",
            CheckKind::SamplingLikelihood => "sampling_likelihood",
            CheckKind::MixtureMi => "mixture_mi",
        }
    }
}

impl std::fmt::Display for CheckKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CheckKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CheckKind::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown check '{s}' (expected one of telescoping, performance_bound, sampling_likelihood, mixture_mi)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDescriptor {
    pub seed: Option<u64>,
    pub n_states: usize,
    pub n_actions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_policies: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub check: CheckKind,
    pub lhs: f64,
    pub rhs: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub instance: InstanceDescriptor,
    #[serde(default)]
    pub details: BTreeMap<String, f64>,
}

impl TheoryReport {
    fn with_seed(mut self, seed: u64) -> Self {
        self.instance.seed = Some(seed);
        self
    }
}

/// `G(s, a) = E_{T~}[V] - E_T[V]` for a fixed value vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GapTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl GapTable {
    pub fn new(truth: &TransitionTable, alt: &TransitionTable, v: &[f64]) -> GapTable {
        let (n, na) = (truth.n_states(), truth.n_actions());
        let values = (0..n * na)
            .map(|i| {
                let (s, a) = (i / na, i % na);
                alt.row(s, a).iter().zip(truth.row(s, a)).zip(v).map(|((p, q), x)| (p - q) * x).sum()
            })
            .collect();
        GapTable { n_states: n, n_actions: na, values }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

fn describe(mdp: &EndoMdp) -> InstanceDescriptor {
    InstanceDescriptor {
        seed: None,
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
        gamma: Some(mdp.discount),
        n_policies: None,
        horizon: None,
    }
}

/// Both sides of the telescoping identity for one policy.
pub fn check_telescoping(mdp: &EndoMdp, alt: &TransitionTable, policy: &PolicyTable) -> Result<TheoryReport, TheoryError> {
    let gamma = mdp.discount;
    let alt_mdp = mdp.with_transitions(alt.clone());
    let lhs = alt_mdp.expected_return(policy)? - mdp.expected_return(policy)?;
    let v = mdp.policy_values(policy)?;
    let gap = GapTable::new(&mdp.transitions, alt, &v);
    let rho = alt_mdp.occupancy(policy, OccupancyScaling::Raw)?;
    let rhs = gamma * rho.expect(&gap.values);
    let residual = (lhs - rhs).abs();
    let mut details = BTreeMap::new();
    details.insert("residual".into(), residual);
    details.insert("sup_abs_gap".into(), gap.sup_abs());
    Ok(TheoryReport {
        check: CheckKind::Telescoping,
        lhs,
        rhs,
        tolerance: TELESCOPING_TOL,
        pass: residual <= TELESCOPING_TOL,
        instance: describe(mdp),
        details,
    })
}

/// Per-cell error estimate `u(s, a) = gamma * max_V |E_{T~} V - E_T V| / lambda`
/// over the value functions of the supplied policies, so `lambda * u >= |gamma * G|`.
pub fn admissible_penalty(
    mdp: &EndoMdp,
    learned: &TransitionTable,
    policies: &[PolicyTable],
    lambda: f64,
) -> Result<Vec<f64>, TheoryError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(TheoryError::Lambda(lambda));
    }
    let mut u = vec![0.0f64; mdp.n_states() * mdp.n_actions()];
    for pi in policies {
        let v = mdp.policy_values(pi)?;
        let gap = GapTable::new(&mdp.transitions, learned, &v);
        for (slot, g) in u.iter_mut().zip(&gap.values) {
            *slot = slot.max(g.abs());
        }
    }
    for x in &mut u {
        *x *= mdp.discount / lambda;
    }
    Ok(u)
}

/// Plans on the learned model penalized by `lambda * u` and checks the
/// resulting policy against every candidate's penalized lower bound.
///
/// `penalty` overrides the constructed admissible estimator, which is how a
/// deliberately inadmissible one is injected.
pub fn check_performance_bound(
    mdp: &EndoMdp,
    learned: &TransitionTable,
    lambda: f64,
    policy_cap: usize,
    penalty: Option<&[f64]>,
) -> Result<TheoryReport, TheoryError> {
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let candidates = PolicyTable::enumerate_deterministic(n, na, policy_cap).ok_or(TheoryError::TooLarge {
        what: "deterministic policy set",
        size: (na as u128).saturating_pow(n as u32),
        cap: policy_cap,
        n_states: n,
        n_actions: na,
    })?;
    let u = match penalty {
        Some(u) if u.len() == n * na => u.to_vec(),
        Some(u) => return Err(TheoryError::Argument(format!("penalty has {} cells, expected {}", u.len(), n * na))),
        None => admissible_penalty(mdp, learned, &candidates, lambda)?,
    };
    let learned_mdp = mdp.with_transitions(learned.clone());
    let penalized = learned_mdp.with_reward(mdp.reward.iter().zip(&u).map(|(r, x)| r - lambda * x).collect());
    let planned = penalized.optimal_policy()?;
    let epsilon = |pi: &PolicyTable| -> Result<f64, TheoryError> {
        Ok(learned_mdp.occupancy(pi, OccupancyScaling::Raw)?.expect(&u))
    };
    let lhs = mdp.expected_return(&planned)?;
    let mut rhs = f64::NEG_INFINITY;
    for pi in &candidates {
        rhs = rhs.max(mdp.expected_return(pi)? - 2.0 * lambda * epsilon(pi)?);
    }
    let mut details = BTreeMap::new();
    details.insert("lambda".into(), lambda);
    details.insert("epsilon_planned".into(), epsilon(&planned)?);
    details.insert("optimal_return".into(), mdp.expected_return(&mdp.optimal_policy()?)?);
    details.insert("candidates".into(), candidates.len() as f64);
    Ok(TheoryReport {
        check: CheckKind::PerformanceBound,
        lhs,
        rhs,
        tolerance: BOUND_TOL,
        pass: lhs >= rhs - BOUND_TOL,
        instance: describe(mdp),
        details,
    })
}

/// Which state distribution weights a policy's action marginal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalBasis {
    /// The policy's own normalized discounted occupancy.
    Occupancy,
    Uniform,
}

pub fn action_marginal(policy: &PolicyTable, state_dist: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; policy.n_actions()];
    for (s, w) in state_dist.iter().enumerate() {
        for (a, slot) in p.iter_mut().enumerate() {
            *slot += w * policy.prob(s, a);
        }
    }
    p
}

fn state_distribution(mdp: &EndoMdp, policy: &PolicyTable, basis: MarginalBasis) -> Result<Vec<f64>, TheoryError> {
    Ok(match basis {
        MarginalBasis::Occupancy => mdp.occupancy(policy, OccupancyScaling::Normalized)?.state_marginal(),
        MarginalBasis::Uniform => vec![1.0 / mdp.n_states() as f64; mdp.n_states()],
    })
}

/// Largest deviation of any policy's action marginal from the first policy's.
pub fn marginal_spread(mdp: &EndoMdp, policies: &[PolicyTable], basis: MarginalBasis) -> Result<f64, TheoryError> {
    let marginals: Vec<Vec<f64>> = policies
        .iter()
        .map(|pi| Ok(action_marginal(pi, &state_distribution(mdp, pi, basis)?)))
        .collect::<Result<_, TheoryError>>()?;
    Ok(marginals
        .iter()
        .flat_map(|m| m.iter().zip(&marginals[0]).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max))
}

/// How trajectories in the mixed batch are distributed and scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureScoring {
    /// Union of the per-policy batches, actions scored by the mixture policy.
    #[default]
    BatchUnion,
    /// Rollouts of the state-wise mixture policy, scored by that same policy.
    PolicyRollout,
}

impl std::str::FromStr for MixtureScoring {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch_union" => Ok(MixtureScoring::BatchUnion),
            "policy_rollout" => Ok(MixtureScoring::PolicyRollout),
            other => Err(format!("unknown scoring '{other}' (expected batch_union or policy_rollout)")),
        }
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Expected exogenous log-likelihood of a length-`horizon` trajectory; identical for every policy.
pub fn exo_loglik(spec: &ExBmdpSpec, horizon: usize) -> f64 {
    let mut m = spec.init_exo.clone();
    let mut total: f64 = m.iter().map(|&p| xlogy(p, p)).sum();
    for _ in 1..horizon {
        let mut next = vec![0.0; spec.n_exo];
        for (x, &w) in m.iter().enumerate() {
            let row = spec.exo_trans.row(x, 0);
            total += w * row.iter().map(|&q| xlogy(q, q)).sum::<f64>();
            for (slot, q) in next.iter_mut().zip(row) {
                *slot += w * q;
            }
        }
        m = next;
    }
    total
}

/// `E_{tau ~ data}[ln p_score(tau)]` over endogenous states and actions, by
/// enumerating every length-`horizon` path.
pub fn enumerated_loglik(spec: &ExBmdpSpec, data: &PolicyTable, score: &PolicyTable, horizon: usize) -> f64 {
    struct Walk<'a> {
        spec: &'a ExBmdpSpec,
        data: &'a PolicyTable,
        score: &'a PolicyTable,
        horizon: usize,
    }
    impl Walk<'_> {
        fn go(&self, t: usize, s: usize, prob: f64, logp: f64) -> f64 {
            let mut acc = 0.0;
            for a in 0..self.spec.n_act {
                let pa = self.data.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                let lp = logp + self.score.prob(s, a).ln();
                if t + 1 == self.horizon {
                    acc += prob * pa * lp;
                    continue;
                }
                for (s2, &q) in self.spec.endo_trans.row(s, a).iter().enumerate() {
                    if q > 0.0 {
                        acc += self.go(t + 1, s2, prob * pa * q, lp + q.ln());
                    }
                }
            }
            acc
        }
    }
    if horizon == 0 {
        return 0.0;
    }
    let walk = Walk { spec, data, score, horizon };
    spec.init_endo
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(s, &p)| walk.go(0, s, p, p.ln()))
        .sum()
}

pub fn path_count(n_states: usize, n_actions: usize, horizon: usize) -> u128 {
    (n_states as u128 * n_actions as u128).saturating_pow(horizon as u32)
}

/// Mixed-batch expected log-likelihood against the average per-policy one.
pub fn check_sampling_likelihood(
    spec: &ExBmdpSpec,
    policies: &[PolicyTable],
    horizon: usize,
    path_cap: usize,
    scoring: MixtureScoring,
) -> Result<TheoryReport, TheoryError> {
    if policies.is_empty() {
        return Err(TheoryError::Argument("at least one policy is required".into()));
    }
    let paths = path_count(spec.n_endo, spec.n_act, horizon);
    if paths > path_cap as u128 {
        return Err(TheoryError::TooLarge {
            what: "trajectory set",
            size: paths,
            cap: path_cap,
            n_states: spec.n_endo,
            n_actions: spec.n_act,
        });
    }
    let mdp = spec.endo_mdp();
    let spread = marginal_spread(&mdp, policies, MarginalBasis::Occupancy)?;
    if spread > ASSUMPTION_TOL {
        return Err(TheoryError::AssumptionViolated { spread, tol: ASSUMPTION_TOL });
    }
    let uniform_spread = marginal_spread(&mdp, policies, MarginalBasis::Uniform)?;
    let n = policies.len() as f64;
    let mix = PolicyTable::average(policies);
    let exo = exo_loglik(spec, horizon);
    let rhs = policies.iter().map(|pi| enumerated_loglik(spec, pi, pi, horizon)).sum::<f64>() / n + exo;
    let lhs = match scoring {
        MixtureScoring::BatchUnion => policies.iter().map(|pi| enumerated_loglik(spec, pi, &mix, horizon)).sum::<f64>() / n,
        MixtureScoring::PolicyRollout => enumerated_loglik(spec, &mix, &mix, horizon),
    } + exo;
    let margin = rhs - lhs;
    let mut details = BTreeMap::new();
    details.insert("margin".into(), margin);
    details.insert("exo_loglik".into(), exo);
    details.insert("occupancy_marginal_spread".into(), spread);
    details.insert("uniform_marginal_spread".into(), uniform_spread);
    details.insert("paths".into(), paths as f64);
    Ok(TheoryReport {
        check: CheckKind::SamplingLikelihood,
        lhs,
        rhs,
        tolerance: LIKELIHOOD_TOL,
        pass: margin >= -LIKELIHOOD_TOL,
        instance: InstanceDescriptor {
            seed: None,
            n_states: spec.n_endo,
            n_actions: spec.n_act,
            gamma: Some(spec.discount),
            n_policies: Some(policies.len()),
            horizon: Some(horizon),
        },
        details,
    })
}

/// `I(a; s)` in nats for `s ~ state_dist`, `a ~ policy(.|s)`.
pub fn mutual_information(policy: &PolicyTable, state_dist: &[f64]) -> f64 {
    let p = action_marginal(policy, state_dist);
    let mut mi = 0.0;
    for (s, &w) in state_dist.iter().enumerate() {
        for (a, &pa) in p.iter().enumerate() {
            let q = policy.prob(s, a);
            if w > 0.0 && q > 0.0 {
                mi += w * q * (q / pa).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Mixture-policy mutual information against the per-policy average under a shared state law.
pub fn check_mixture_mi(policies: &[PolicyTable], state_dist: &[f64]) -> Result<TheoryReport, TheoryError> {
    if policies.is_empty() {
        return Err(TheoryError::Argument("at least one policy is required".into()));
    }
    let marginals: Vec<Vec<f64>> = policies.iter().map(|pi| action_marginal(pi, state_dist)).collect();
    let spread = marginals
        .iter()
        .flat_map(|m| m.iter().zip(&marginals[0]).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    if spread > ASSUMPTION_TOL {
        return Err(TheoryError::AssumptionViolated { spread, tol: ASSUMPTION_TOL });
    }
    let mix = PolicyTable::average(policies);
    let lhs = mutual_information(&mix, state_dist);
    let rhs = policies.iter().map(|pi| mutual_information(pi, state_dist)).sum::<f64>() / policies.len() as f64;
    let mut details = BTreeMap::new();
    details.insert("margin".into(), rhs - lhs);
    Ok(TheoryReport {
        check: CheckKind::MixtureMi,
        lhs,
        rhs,
        tolerance: MI_TOL,
        pass: lhs <= rhs + MI_TOL,
        instance: InstanceDescriptor {
            seed: None,
            n_states: policies[0].n_states(),
            n_actions: policies[0].n_actions(),
            gamma: None,
            n_policies: Some(policies.len()),
            horizon: None,
        },
        details,
    })
}

pub fn random_transitions<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> TransitionTable {
    let rows: Vec<Vec<f64>> = (0..n_states * n_actions).map(|_| dirichlet_ones(n_states, rng)).collect();
    TransitionTable::from_rows(n_states, n_actions, &rows)
}

pub fn random_endo_mdp<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> EndoMdp {
    let transitions = random_transitions(n_states, n_actions, rng);
    let reward = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
    let init = dirichlet_ones(n_states, rng);
    EndoMdp { transitions, reward, init, discount: gamma }
}

/// `(1 - beta) * T + beta * D` with a fresh random table `D`.
pub fn perturb_transitions<R: Rng + ?Sized>(t: &TransitionTable, beta: f64, rng: &mut R) -> TransitionTable {
    let d = random_transitions(t.n_states(), t.n_actions(), rng);
    TransitionTable::new(
        t.n_states(),
        t.n_actions(),
        t.data().iter().zip(d.data()).map(|(p, q)| (1.0 - beta) * p + beta * q).collect(),
    )
}

fn random_policy<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> PolicyTable {
    let rows: Vec<Vec<f64>> = (0..n_states).map(|_| dirichlet_ones(n_actions, rng)).collect();
    PolicyTable::from_rows(&rows)
}

#[derive(Debug, Clone)]
pub struct TelescopingInstance {
    pub seed: u64,
    pub mdp: EndoMdp,
    pub alt: TransitionTable,
    pub policy: PolicyTable,
}

/// Up to 6 states, up to 3 actions, `gamma` in `[0, 0.95)`.
pub fn telescoping_instance(seed: u64) -> TelescopingInstance {
    let mut rng = stream(seed, 0);
    let n = rng.random_range(1..=6);
    let na = rng.random_range(1..=3);
    let gamma = rng.random_range(0.0..0.95);
    let mdp = random_endo_mdp(n, na, gamma, &mut rng);
    let alt = random_transitions(n, na, &mut rng);
    let policy = random_policy(n, na, &mut rng);
    TelescopingInstance { seed, mdp, alt, policy }
}

#[derive(Debug, Clone)]
pub struct BoundInstance {
    pub seed: u64,
    pub mdp: EndoMdp,
    pub learned: TransitionTable,
    pub lambda: f64,
}

pub const LAMBDA_GRID: [f64; 3] = [0.1, 1.0, 10.0];

/// 2 to 4 states, 2 or 3 actions; the learned model is a random perturbation
/// of the truth, or an unrelated random table when `corrupt` is set.
pub fn bound_instance(seed: u64, corrupt: bool) -> BoundInstance {
    let mut rng = stream(seed, 1);
    let n = rng.random_range(2..=4);
    let na = rng.random_range(2..=3);
    let gamma = rng.random_range(0.5..0.95);
    let mdp = random_endo_mdp(n, na, gamma, &mut rng);
    let beta = if corrupt { 1.0 } else { rng.random_range(0.05..0.5) };
    let learned = perturb_transitions(&mdp.transitions, beta, &mut rng);
    let lambda = LAMBDA_GRID[rng.random_range(0..LAMBDA_GRID.len())];
    BoundInstance { seed, mdp, learned, lambda }
}

/// A spec with policies that share one action marginal, both under their own
/// discounted occupancy and under the uniform endogenous distribution.
#[derive(Debug, Clone)]
pub struct Assumption3Instance {
    pub seed: u64,
    pub spec: ExBmdpSpec,
    pub policies: Vec<PolicyTable>,
    pub action_marginal: Vec<f64>,
    pub horizon: usize,
}

const PROJECTION_ITERS: usize = 400;
const POSITIVITY_FLOOR: f64 = 1e-3;

fn small_spec(rng: &mut StreamRng, n_endo: usize, n_act: usize, gamma: f64) -> ExBmdpSpec {
    let mdp = random_endo_mdp(n_endo, n_act, gamma, rng);
    let n_exo = 2;
    let exo_trans = random_transitions(n_exo, 1, rng);
    ExBmdpSpec {
        n_endo,
        n_exo,
        n_act,
        endo_trans: mdp.transitions,
        exo_trans,
        reward: mdp.reward,
        emission: (0..n_endo * n_exo).collect(),
        init_endo: mdp.init,
        init_exo: dirichlet_ones(n_exo, rng),
        discount: gamma,
    }
}

/// Projects a policy onto `{rows sum to 1, d^T pi = p, u^T pi = p}` for fixed
/// `d`, then pulls it toward the constant-`p` policy until entries clear the floor.
fn project_policy(x: &[f64], d: &[f64], p: &[f64], n: usize, na: usize) -> Vec<f64> {
    let m = n + 2 * na;
    let mut c = DMatrix::<f64>::zeros(m, n * na);
    let mut b = DVector::<f64>::zeros(m);
    for s in 0..n {
        for a in 0..na {
            c[(s, s * na + a)] = 1.0;
            c[(n + a, s * na + a)] = d[s];
            c[(n + na + a, s * na + a)] = 1.0 / n as f64;
        }
        b[s] = 1.0;
    }
    for a in 0..na {
        b[n + a] = p[a];
        b[n + na + a] = p[a];
    }
    let xv = DVector::from_column_slice(x);
    let pinv = c.clone().pseudo_inverse(1e-12).expect("pseudo-inverse with nonnegative epsilon");
    let projected = &xv - pinv * (&c * &xv - b);
    let mut t: f64 = 1.0;
    for (i, &v) in projected.iter().enumerate() {
        let base = p[i % na];
        if v < POSITIVITY_FLOOR {
            t = t.min((base - POSITIVITY_FLOOR) / (base - v));
        }
    }
    projected.iter().enumerate().map(|(i, &v)| p[i % na] + t * (v - p[i % na])).collect()
}

fn try_assumption3(seed: u64, attempt: u64) -> Option<Assumption3Instance> {
    let mut rng = stream(seed, 100 + attempt);
    let n = rng.random_range(3..=4);
    let na = rng.random_range(2..=3);
    let k = rng.random_range(2..=3);
    let gamma = rng.random_range(0.5..0.9);
    let horizon = if n * na <= 6 { 5 } else { 4 };
    let spec = small_spec(&mut rng, n, na, gamma);
    let mdp = spec.endo_mdp();
    let p: Vec<f64> = dirichlet_ones(na, &mut rng).iter().map(|x| 0.5 * x + 0.5 / na as f64).collect();
    let mut policies = Vec::with_capacity(k);
    for _ in 0..k {
        let mut x: Vec<f64> = (0..n)
            .flat_map(|_| {
                let r = dirichlet_ones(na, &mut rng);
                r.into_iter().zip(&p).map(|(ri, pi)| 0.4 * ri + 0.6 * pi).collect::<Vec<_>>()
            })
            .collect();
        let mut converged = false;
        for _ in 0..PROJECTION_ITERS {
            let pi = PolicyTable::new(n, na, x.clone());
            let d = mdp.occupancy(&pi, OccupancyScaling::Normalized).ok()?.state_marginal();
            let residual = action_marginal(&pi, &d).iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if residual < 1e-12 {
                converged = true;
                break;
            }
            x = project_policy(&x, &d, &p, n, na);
        }
        let deviation = x.iter().enumerate().map(|(i, v)| (v - p[i % na]).abs()).fold(0.0, f64::max);
        if !converged || deviation < 1e-3 {
            return None;
        }
        policies.push(PolicyTable::new(n, na, x));
    }
    Some(Assumption3Instance { seed, spec, policies, action_marginal: p, horizon })
}

pub fn assumption3_instance(seed: u64) -> Result<Assumption3Instance, TheoryError> {
    (0..32)
        .find_map(|attempt| try_assumption3(seed, attempt))
        .ok_or(TheoryError::Generation { seed, reason: "marginal projection did not converge".into() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub checks: Vec<CheckKind>,
    pub instances: usize,
    pub seed: u64,
    pub scoring: MixtureScoring,
    /// Corrupt the learned model and force a zero penalty in the bound check.
    pub inject_violation: bool,
    pub policy_cap: usize,
    pub path_cap: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            checks: CheckKind::ALL.to_vec(),
            instances: 100,
            seed: 0,
            scoring: MixtureScoring::BatchUnion,
            inject_violation: false,
            policy_cap: DEFAULT_POLICY_CAP,
            path_cap: DEFAULT_PATH_CAP,
        }
    }
}

fn instance_seed(master: u64, check: CheckKind, i: usize) -> u64 {
    crate::rng::derive_seed(master, ((check as u64) << 32) | i as u64)
}

/// One report per (check, instance), in check then instance order.
pub fn run_check(config: &SuiteConfig, check: CheckKind, i: usize) -> Result<TheoryReport, TheoryError> {
    let seed = instance_seed(config.seed, check, i);
    let report = match check {
        CheckKind::Telescoping => {
            let inst = telescoping_instance(seed);
            check_telescoping(&inst.mdp, &inst.alt, &inst.policy)?
        }
        CheckKind::PerformanceBound => {
            let inst = bound_instance(seed, config.inject_violation);
            let zero = vec![0.0; inst.mdp.n_states() * inst.mdp.n_actions()];
            let forced = config.inject_violation.then_some(zero.as_slice());
            check_performance_bound(&inst.mdp, &inst.learned, inst.lambda, config.policy_cap, forced)?
        }
        CheckKind::SamplingLikelihood => {
            let inst = assumption3_instance(seed)?;
            check_sampling_likelihood(&inst.spec, &inst.policies, inst.horizon, config.path_cap, config.scoring)?
        }
        CheckKind::MixtureMi => {
            let inst = assumption3_instance(seed)?;
            let uniform = vec![1.0 / inst.spec.n_endo as f64; inst.spec.n_endo];
            let mut r = check_mixture_mi(&inst.policies, &uniform)?;
            r.instance.gamma = Some(inst.spec.discount);
            r
        }
    };
    Ok(report.with_seed(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub check: CheckKind,
    pub index: usize,
    pub result: Result<TheoryReport, String>,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        matches!(&self.result, Ok(r) if r.pass)
    }
}

pub fn run_suite(config: &SuiteConfig) -> Vec<SuiteOutcome> {
    let jobs: Vec<(CheckKind, usize)> =
        config.checks.iter().flat_map(|&c| (0..config.instances).map(move |i| (c, i))).collect();
    jobs.into_par_iter()
        .map(|(check, index)| SuiteOutcome {
            check,
            index,
            result: run_check(config, check, index).map_err(|e| e.to_string()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_vanishes_for_identical_tables() {
        let mut rng = stream(3, 0);
        let mdp = random_endo_mdp(4, 2, 0.9, &mut rng);
        let g = GapTable::new(&mdp.transitions, &mdp.transitions, &[1.0, -2.0, 3.0, 0.5]);
        assert_eq!(g.sup_abs(), 0.0);
    }

    #[test]
    fn telescoping_trivial_cases() {
        let mut rng = stream(5, 0);
        let mdp = random_endo_mdp(3, 2, 0.8, &mut rng);
        let pi = random_policy(3, 2, &mut rng);
        let r = check_telescoping(&mdp, &mdp.transitions, &pi).unwrap();
        assert!(r.lhs.abs() < 1e-12 && r.rhs.abs() < 1e-12);
        let zero = EndoMdp { discount: 0.0, ..mdp.clone() };
        let alt = random_transitions(3, 2, &mut rng);
        let r = check_telescoping(&zero, &alt, &pi).unwrap();
        assert!(r.lhs.abs() < 1e-12 && r.rhs == 0.0);
    }

    #[test]
    fn exact_model_bound_is_tight_at_optimum() {
        let mut rng = stream(9, 0);
        let mdp = random_endo_mdp(3, 2, 0.9, &mut rng);
        let r = check_performance_bound(&mdp, &mdp.transitions, 1.0, 64, None).unwrap();
        let opt = mdp.expected_return(&mdp.optimal_policy().unwrap()).unwrap();
        assert!(r.pass);
        assert!((r.lhs - opt).abs() < 1e-9 && (r.rhs - opt).abs() < 1e-9);
    }

    #[test]
    fn bound_refuses_oversized_policy_sets() {
        let mut rng = stream(1, 0);
        let mdp = random_endo_mdp(5, 3, 0.9, &mut rng);
        let err = check_performance_bound(&mdp, &mdp.transitions, 1.0, 100, None).unwrap_err();
        assert!(matches!(err, TheoryError::TooLarge { size: 243, .. }));
    }

    #[test]
    fn mixture_mi_closed_form() {
        let a = PolicyTable::deterministic(2, &[0, 1]);
        let b = PolicyTable::deterministic(2, &[1, 0]);
        let r = check_mixture_mi(&[a.clone(), b], &[0.5, 0.5]).unwrap();
        assert!(r.lhs.abs() < 1e-15);
        assert!((r.rhs - 2f64.ln()).abs() < 1e-12);
        let same = check_mixture_mi(&[a.clone(), a], &[0.5, 0.5]).unwrap();
        assert!((same.lhs - same.rhs).abs() < 1e-15);
    }

    #[test]
    fn exo_loglik_of_deterministic_chain_is_zero() {
        let mut rng = stream(2, 0);
        let mut spec = small_spec(&mut rng, 2, 2, 0.9);
        spec.exo_trans = TransitionTable::identity(2);
        spec.init_exo = vec![1.0, 0.0];
        assert_eq!(exo_loglik(&spec, 5), 0.0);
    }

    #[test]
    fn projection_meets_both_marginals() {
        let inst = assumption3_instance(11).unwrap();
        let mdp = inst.spec.endo_mdp();
        assert!(marginal_spread(&mdp, &inst.policies, MarginalBasis::Occupancy).unwrap() < 1e-9);
        assert!(marginal_spread(&mdp, &inst.policies, MarginalBasis::Uniform).unwrap() < 1e-9);
        assert!(inst.policies.iter().all(|p| p.is_valid(1e-9)));
    }
}
