//! Exact dynamic programming on a finite MDP: policy evaluation, discounted
//! occupancy, value iteration and greedy extraction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::table::{PolicyTable, TransitionTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpError {
    #[error("discount must lie in [0, 1), got {0}")]
    InvalidDiscount(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("policy evaluation system is singular")]
    Singular,
    #[error("non-finite reward at state {state}, action {action}")]
    NonFiniteReward { state: usize, action: usize },
}

pub(crate) fn check_discount(gamma: f64) -> Result<(), DpError> {
    if (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(DpError::InvalidDiscount(gamma))
    }
}

/// A finite MDP over a single state factor with rewards on `(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndoMdp {
    pub transitions: TransitionTable,
    /// Row-major `[state][action]`.
    pub reward: Vec<f64>,
    pub init: Vec<f64>,
    pub discount: f64,
}

impl EndoMdp {
    pub fn n_states(&self) -> usize {
        self.transitions.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.transitions.n_actions()
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions() + a]
    }

    pub fn with_transitions(&self, transitions: TransitionTable) -> EndoMdp {
        EndoMdp {
            transitions,
            ..self.clone()
        }
    }

    pub fn with_reward(&self, reward: Vec<f64>) -> EndoMdp {
        EndoMdp {
            reward,
            ..self.clone()
        }
    }

    fn check_policy(&self, policy: &PolicyTable) -> Result<(), DpError> {
        if policy.n_states() != self.n_states() || policy.n_actions() != self.n_actions() {
            return Err(DpError::Shape(format!(
                "policy is {}x{}, mdp is {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states(),
                self.n_actions()
            )));
        }
        Ok(())
    }

    /// `V^pi` by solving `(I - gamma P_pi) V = r_pi`.
    pub fn policy_values(&self, policy: &PolicyTable) -> Result<Vec<f64>, DpError> {
        check_discount(self.discount)?;
        self.check_policy(policy)?;
        let n = self.n_states();
        let gamma = self.discount;
        let mut a_mat = DMatrix::<f64>::identity(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for s in 0..n {
            for a in 0..self.n_actions() {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                b[s] += pa * self.reward(s, a);
                for (next, &p) in self.transitions.row(s, a).iter().enumerate() {
                    a_mat[(s, next)] -= gamma * pa * p;
                }
            }
        }
        let lu = a_mat.clone().lu();
        let mut v = lu.solve(&b).ok_or(DpError::Singular)?;
        // one round of iterative refinement keeps the residual well under 1e-10
        let residual = &b - &a_mat * &v;
        if residual.amax() > 1e-13 {
            if let Some(dv) = lu.solve(&residual) {
                v += dv;
            }
        }
        Ok(v.iter().copied().collect())
    }

    /// Expected discounted return from the initial distribution.
    pub fn expected_return(&self, policy: &PolicyTable) -> Result<f64, DpError> {
        let v = self.policy_values(policy)?;
        Ok(self.init.iter().zip(&v).map(|(m, x)| m * x).sum())
    }

    /// `Q(s, a) = r(s, a) + gamma * E[V(s')]` for a given value vector.
    pub fn q_values(&self, values: &[f64]) -> Vec<f64> {
        let na = self.n_actions();
        let mut q = vec![0.0; self.n_states() * na];
        for s in 0..self.n_states() {
            for a in 0..na {
                q[s * na + a] = self.reward(s, a) + self.discount * self.transitions.expect(s, a, values);
            }
        }
        q
    }

    pub fn occupancy(&self, policy: &PolicyTable, scaling: OccupancyScaling) -> Result<OccupancyMeasure, DpError> {
        self.check_policy(policy)?;
        occupancy(&self.transitions, &self.init, policy, self.discount, scaling)
    }

    /// Optimal values by value iteration, stopping once the sup-norm update falls to `tol`.
    pub fn value_iteration(&self, tol: f64) -> Result<ValueIteration, DpError> {
        check_discount(self.discount)?;
        for s in 0..self.n_states() {
            for a in 0..self.n_actions() {
                if !self.reward(s, a).is_finite() {
                    return Err(DpError::NonFiniteReward { state: s, action: a });
                }
            }
        }
        let n = self.n_states();
        let na = self.n_actions();
        let mut v = vec![0.0; n];
        let mut residuals = Vec::new();
        loop {
            let q = self.q_values(&v);
            let next: Vec<f64> = (0..n)
                .map(|s| q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let delta = next.iter().zip(&v).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            v = next;
            residuals.push(delta);
            if delta <= tol || residuals.len() >= MAX_SWEEPS {
                break;
            }
        }
        Ok(ValueIteration { values: v, residuals })
    }

    /// Greedy deterministic policy; ties go to the lowest action id.
    pub fn greedy(&self, values: &[f64]) -> PolicyTable {
        let na = self.n_actions();
        let q = self.q_values(values);
        let choice: Vec<usize> = (0..self.n_states())
            .map(|s| argmax_lowest(&q[s * na..(s + 1) * na]))
            .collect();
        PolicyTable::deterministic(na, &choice)
    }

    /// An optimal deterministic policy, polished by exact policy iteration.
    pub fn optimal_policy(&self) -> Result<PolicyTable, DpError> {
        let vi = self.value_iteration(1e-12)?;
        let mut policy = self.greedy(&vi.values);
        for _ in 0..MAX_POLICY_ITERATIONS {
            let v = self.policy_values(&policy)?;
            let next = self.improve(&policy, &v);
            if next == policy {
                break;
            }
            policy = next;
        }
        Ok(policy)
    }

    /// A worst-return deterministic policy (the optimum under negated reward).
    pub fn pessimal_policy(&self) -> Result<PolicyTable, DpError> {
        let negated = self.with_reward(self.reward.iter().map(|r| -r).collect());
        negated.optimal_policy()
    }

    /// Policy-improvement step that keeps the current action unless another is strictly better.
    fn improve(&self, policy: &PolicyTable, values: &[f64]) -> PolicyTable {
        let na = self.n_actions();
        let q = self.q_values(values);
        let current = policy.as_deterministic();
        let choice: Vec<usize> = (0..self.n_states())
            .map(|s| {
                let row = &q[s * na..(s + 1) * na];
                let best = argmax_lowest(row);
                match &current {
                    Some(c) if row[c[s]] >= row[best] - tie_tolerance(row[best]) => c[s],
                    _ => best,
                }
            })
            .collect();
        PolicyTable::deterministic(na, &choice)
    }
}

const MAX_SWEEPS: usize = 1_000_000;
const MAX_POLICY_ITERATIONS: usize = 1_000;

fn tie_tolerance(x: f64) -> f64 {
    1e-12 * x.abs().max(1.0)
}

/// Index of the maximum; near-ties (within 1e-12 relative) resolve to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = tie_tolerance(best);
    values.iter().position(|&q| q >= best - tol).unwrap_or(0)
}

#[derive(Debug, Clone)]
pub struct ValueIteration {
    pub values: Vec<f64>,
    /// Sup-norm change per sweep.
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupancyScaling {
    /// `sum_t gamma^t Pr(s_t, a_t)`, total mass `1 / (1 - gamma)`.
    Raw,
    /// Raw measure multiplied by `1 - gamma`, total mass 1.
    Normalized,
}

/// Discounted state-action visitation measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    pub n_states: usize,
    pub n_actions: usize,
    pub rho: Vec<f64>,
    pub scaling: OccupancyScaling,
}

impl OccupancyMeasure {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.rho[s * self.n_actions + a]
    }

    pub fn total(&self) -> f64 {
        self.rho.iter().sum()
    }

    /// `sum_{s,a} rho(s, a) f(s, a)` for `f` laid out like a reward table.
    pub fn expect(&self, f: &[f64]) -> f64 {
        self.rho.iter().zip(f).map(|(r, x)| r * x).sum()
    }

    /// Marginal over states.
    pub fn state_marginal(&self) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| (0..self.n_actions).map(|a| self.get(s, a)).sum())
            .collect()
    }
}

/// Discounted occupancy by forward flow propagation.
///
/// Accumulates `gamma^t d_t` until the remaining geometric tail
/// `gamma^(t+1) / (1 - gamma)` drops below 1e-14.
pub fn occupancy(
    transitions: &TransitionTable,
    init: &[f64],
    policy: &PolicyTable,
    gamma: f64,
    scaling: OccupancyScaling,
) -> Result<OccupancyMeasure, DpError> {
    check_discount(gamma)?;
    let n = transitions.n_states();
    let na = transitions.n_actions();
    if init.len() != n || policy.n_states() != n || policy.n_actions() != na {
        return Err(DpError::Shape("occupancy inputs disagree on state/action counts".into()));
    }
    let mut state_occ = vec![0.0; n];
    let mut dist = init.to_vec();
    let mut weight = 1.0;
    let mass: f64 = init.iter().sum::<f64>().abs().max(1.0);
    let mut steps = 0usize;
    loop {
        for (acc, d) in state_occ.iter_mut().zip(&dist) {
            *acc += weight * d;
        }
        weight *= gamma;
        steps += 1;
        if weight * mass / (1.0 - gamma) <= 1e-14 || steps >= MAX_SWEEPS {
            break;
        }
        let mut next = vec![0.0; n];
        for s in 0..n {
            if dist[s] == 0.0 {
                continue;
            }
            for a in 0..na {
                let w = dist[s] * policy.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                for (acc, p) in next.iter_mut().zip(transitions.row(s, a)) {
                    *acc += w * p;
                }
            }
        }
        dist = next;
    }
    let factor = match scaling {
        OccupancyScaling::Raw => 1.0,
        OccupancyScaling::Normalized => 1.0 - gamma,
    };
    let mut rho = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            rho[s * na + a] = factor * state_occ[s] * policy.prob(s, a);
        }
    }
    Ok(OccupancyMeasure {
        n_states: n,
        n_actions: na,
        rho,
        scaling,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_state(gamma: f64, r: f64) -> EndoMdp {
        EndoMdp {
            transitions: TransitionTable::from_rows(1, 2, &[vec![1.0], vec![1.0]]),
            reward: vec![r, r],
            init: vec![1.0],
            discount: gamma,
        }
    }

    #[test]
    fn geometric_series_return() {
        let m = single_state(0.9, 1.0);
        let eta = m.expected_return(&PolicyTable::uniform(1, 2)).unwrap();
        assert!((eta - 10.0).abs() < 1e-8);
    }

    #[test]
    fn discount_must_be_below_one() {
        let m = single_state(1.0, 1.0);
        assert_eq!(
            m.expected_return(&PolicyTable::uniform(1, 2)),
            Err(DpError::InvalidDiscount(1.0))
        );
    }

    #[test]
    fn zero_discount_occupancy_is_initial_step() {
        let t = TransitionTable::from_rows(2, 2, &[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5], vec![0.2, 0.8]]);
        let pi = PolicyTable::from_rows(&[vec![0.3, 0.7], vec![0.6, 0.4]]);
        let init = [0.25, 0.75];
        let occ = occupancy(&t, &init, &pi, 0.0, OccupancyScaling::Raw).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                assert_eq!(occ.get(s, a), init[s] * pi.prob(s, a));
            }
        }
    }

    #[test]
    fn two_state_cycle_matches_truncated_enumeration() {
        // deterministic 0 -> 1 -> 0 regardless of action; uniform policy
        let t = TransitionTable::from_fn(2, 2, |s, _, next| if next != s { 1.0 } else { 0.0 });
        let pi = PolicyTable::uniform(2, 2);
        let gamma = 0.8;
        let occ = occupancy(&t, &[1.0, 0.0], &pi, gamma, OccupancyScaling::Raw).unwrap();
        // hand enumeration: state at time t is t mod 2
        let mut expect = [0.0f64; 2];
        for step in 0..=200 {
            expect[step % 2] += gamma.powi(step as i32);
        }
        for s in 0..2 {
            for a in 0..2 {
                assert!((occ.get(s, a) - 0.5 * expect[s]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn greedy_ties_prefer_lowest_action() {
        let m = single_state(0.9, 1.0);
        let vi = m.value_iteration(1e-12).unwrap();
        assert!((vi.values[0] - 10.0).abs() < 1e-9);
        assert_eq!(m.greedy(&vi.values).as_deterministic().unwrap(), vec![0]);
    }
}
