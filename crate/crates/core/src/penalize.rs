//! Ensemble uncertainty, the uncertainty-penalized MDP, exact planning and
//! evaluation of learned policies in the true environment.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{OfflineDataset, Provenance};
use crate::exbmdp::{DpError, EndoMdp, ExBmdpSpec, ExbmdpError, PolicyTable, TransitionTable};
use crate::sepmodel::{EnsembleModel, FactorDecoder, ModelLayout, SepModelError};

pub const POLICY_FORMAT_VERSION: u32 = 1;

pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum PenalizeError {
    #[error("penalty weight must be finite and >= 0, got {0}")]
    Lambda(f64),
    #[error("penalized reward is not finite at state {state}, action {action}; refit the model with alpha > 0")]
    NonFiniteReward { state: usize, action: usize },
    #[error("normalization range is empty: min {min} equals max {max}")]
    Normalization { min: f64, max: f64 },
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Env(#[from] ExbmdpError),
    #[error(transparent)]
    Model(#[from] SepModelError),
    #[error("policy format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed policy document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Summed squared deviation of member next-state vectors from their mean.
    Md,
    /// Across-member variance of log next-state probability.
    Vlp,
}

impl std::str::FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "md" => Ok(Estimator::Md),
            "vlp" => Ok(Estimator::Vlp),
            other => Err(format!("unknown estimator '{other}' (expected md or vlp)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyFlag {
    /// Only one member: disagreement is zero by definition.
    SingleMember,
    /// Some member gives zero probability to a successor the ensemble mean supports.
    ZeroProbability,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Uncertainty {
    pub value: f64,
    pub flag: Option<UncertaintyFlag>,
}

/// `sum_i || mu_i - mu_bar ||^2` over member probability vectors.
pub fn md_from_rows(rows: &[&[f64]]) -> Uncertainty {
    if rows.len() < 2 {
        return Uncertainty { value: 0.0, flag: Some(UncertaintyFlag::SingleMember) };
    }
    let k = rows.len() as f64;
    let n = rows[0].len();
    let mut value = 0.0;
    for j in 0..n {
        if rows.iter().all(|r| r[j] == rows[0][j]) {
            continue;
        }
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / k;
        value += rows.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<f64>();
    }
    Uncertainty { value, flag: None }
}

/// `E_{s' ~ mu_bar}[ Var_i ln T_i(s') ]` with the population variance over members.
pub fn vlp_from_rows(rows: &[&[f64]]) -> Uncertainty {
    if rows.is_empty() {
        return Uncertainty { value: 0.0, flag: Some(UncertaintyFlag::SingleMember) };
    }
    let k = rows.len() as f64;
    let law: Vec<f64> = (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / k).collect();
    vlp_under_law(rows, &law)
}

/// Log-probability variance averaged under an explicit successor law.
pub fn vlp_under_law(rows: &[&[f64]], law: &[f64]) -> Uncertainty {
    if rows.len() < 2 {
        return Uncertainty { value: 0.0, flag: Some(UncertaintyFlag::SingleMember) };
    }
    let k = rows.len() as f64;
    let mut value = 0.0;
    for (j, &w) in law.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        if rows.iter().any(|r| r[j] == 0.0) {
            return Uncertainty { value: f64::INFINITY, flag: Some(UncertaintyFlag::ZeroProbability) };
        }
        if rows.iter().all(|r| r[j] == rows[0][j]) {
            continue;
        }
        let logs: Vec<f64> = rows.iter().map(|r| r[j].ln()).collect();
        let mean_log = logs.iter().sum::<f64>() / k;
        let var = logs.iter().map(|l| (l - mean_log) * (l - mean_log)).sum::<f64>() / k;
        value += w * var;
    }
    Uncertainty { value, flag: None }
}

fn member_rows(model: &EnsembleModel, s: usize, a: usize) -> Vec<&[f64]> {
    model.members.iter().map(|m| m.row(s, a)).collect()
}

pub fn uncertainty_md(model: &EnsembleModel, s: usize, a: usize) -> Uncertainty {
    md_from_rows(&member_rows(model, s, a))
}

pub fn uncertainty_vlp(model: &EnsembleModel, s: usize, a: usize) -> Uncertainty {
    vlp_from_rows(&member_rows(model, s, a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyTable {
    pub estimator: Estimator,
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
    pub flagged: Vec<(usize, usize)>,
}

impl UncertaintyTable {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    /// Mean over cells with at least one full-data visit.
    pub fn mean_over_visited(&self, visits: &[u64]) -> f64 {
        let picked: Vec<f64> = self
            .values
            .iter()
            .zip(visits)
            .filter(|(_, &c)| c > 0)
            .map(|(u, _)| *u)
            .collect();
        if picked.is_empty() {
            0.0
        } else {
            picked.iter().sum::<f64>() / picked.len() as f64
        }
    }
}

pub fn uncertainty_table(model: &EnsembleModel, estimator: Estimator) -> UncertaintyTable {
    let (n, na) = (model.n_states, model.n_actions);
    let cells: Vec<Uncertainty> = (0..n * na)
        .into_par_iter()
        .map(|i| match estimator {
            Estimator::Md => uncertainty_md(model, i / na, i % na),
            Estimator::Vlp => uncertainty_vlp(model, i / na, i % na),
        })
        .collect();
    let flagged = cells
        .iter()
        .enumerate()
        .filter(|(_, u)| u.flag == Some(UncertaintyFlag::ZeroProbability))
        .map(|(i, _)| (i / na, i % na))
        .collect();
    let values = cells.iter().map(|u| u.value).collect();
    UncertaintyTable { estimator, n_states: n, n_actions: na, values, flagged }
}

/// Estimated MDP with `r~ = r^ - lambda * u` and the ensemble-mean dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenalizedMdp {
    pub mdp: EndoMdp,
    pub reward_hat: Vec<f64>,
    pub uncertainty: UncertaintyTable,
    pub lambda: f64,
}

pub fn penalize_reward(reward: &[f64], uncertainty: &[f64], lambda: f64) -> Vec<f64> {
    reward.iter().zip(uncertainty).map(|(r, u)| r - lambda * u).collect()
}

pub fn build_penalized(model: &EnsembleModel, estimator: Estimator, lambda: f64, gamma: f64) -> Result<PenalizedMdp, PenalizeError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(PenalizeError::Lambda(lambda));
    }
    let uncertainty = uncertainty_table(model, estimator);
    let reward = penalize_reward(&model.reward, &uncertainty.values, lambda);
    let mut transitions = model.mean_transitions();
    renormalize_rows(&mut transitions);
    Ok(PenalizedMdp {
        mdp: EndoMdp { transitions, reward, init: model.init.clone(), discount: gamma },
        reward_hat: model.reward.clone(),
        uncertainty,
        lambda,
    })
}

fn renormalize_rows(t: &mut TransitionTable) {
    for s in 0..t.n_states() {
        for a in 0..t.n_actions() {
            let row = t.row_mut(s, a);
            let total: f64 = row.iter().sum();
            if total > 0.0 && (total - 1.0).abs() > 0.0 {
                row.iter_mut().for_each(|p| *p /= total);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub policy: PolicyTable,
    pub values: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// Value iteration to a sup-norm update of `tol`, then greedy extraction (lowest action on ties).
pub fn plan(pm: &PenalizedMdp, tol: f64) -> Result<Plan, PenalizeError> {
    let na = pm.mdp.n_actions();
    if let Some(i) = pm.mdp.reward.iter().position(|r| !r.is_finite()) {
        return Err(PenalizeError::NonFiniteReward { state: i / na, action: i % na });
    }
    let vi = pm.mdp.value_iteration(tol)?;
    let policy = pm.mdp.greedy(&vi.values);
    Ok(Plan { policy, values: vi.values, residuals: vi.residuals })
}

/// Episode-return range used for normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRange {
    pub min: f64,
    pub max: f64,
}

impl NormalizationRange {
    /// Minimum and maximum per-episode return across the given datasets (all tiers of one task).
    pub fn from_datasets<'a>(datasets: impl IntoIterator<Item = &'a OfflineDataset>) -> NormalizationRange {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for ds in datasets {
            min = min.min(ds.stats.min);
            max = max.max(ds.stats.max);
        }
        NormalizationRange { min, max }
    }

    pub fn normalize(&self, score: f64) -> Result<f64, PenalizeError> {
        normalize(score, self.min, self.max)
    }
}

/// `(score - min) / (max - min)`.
pub fn normalize(score: f64, min: f64, max: f64) -> Result<f64, PenalizeError> {
    if !(max > min) {
        return Err(PenalizeError::Normalization { min, max });
    }
    Ok((score - min) / (max - min))
}

/// Exact return of an endogenous policy and its normalized score.
pub fn evaluate_policy(spec: &ExBmdpSpec, policy: &PolicyTable, range: &NormalizationRange) -> Result<(f64, f64), PenalizeError> {
    let ret = spec.exact_return(policy)?;
    Ok((ret, range.normalize(ret)?))
}

/// Exact returns under the original and under a replaced exogenous chain,
/// each recomputed on the full latent product chain.
pub fn distractor_swap_eval(
    spec: &ExBmdpSpec,
    policy: &PolicyTable,
    new_exo: TransitionTable,
    new_init_exo: Vec<f64>,
) -> Result<(f64, f64), PenalizeError> {
    if policy.n_states() != spec.n_endo || policy.n_actions() != spec.n_act {
        return Err(ExbmdpError::Dimension(format!(
            "policy is {}x{}, spec has {} endogenous states and {} actions",
            policy.n_states(),
            policy.n_actions(),
            spec.n_endo,
            spec.n_act
        ))
        .into());
    }
    let swapped = spec.with_exo_chain(new_exo, new_init_exo)?;
    let row = |z: crate::exbmdp::LatentState| policy.row(z.endo).to_vec();
    Ok((spec.exact_return_latent(row)?, swapped.exact_return_latent(row)?))
}

/// A planned policy over a model's state space, with the provenance needed to evaluate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedPolicy {
    pub layout: ModelLayout,
    pub factor_sizes: [usize; 2],
    pub table: PolicyTable,
    pub env_fingerprint: String,
    pub model_fingerprint: String,
    pub estimator: Estimator,
    pub lambda: f64,
    #[serde(default)]
    pub provenance: Provenance,
}

impl LearnedPolicy {
    pub fn from_plan(model: &EnsembleModel, plan: &Plan, estimator: Estimator, lambda: f64) -> LearnedPolicy {
        LearnedPolicy {
            layout: model.layout,
            factor_sizes: model.factor_sizes,
            table: plan.policy.clone(),
            env_fingerprint: model.env_fingerprint.clone(),
            model_fingerprint: crate::io::sha256_hex(model.to_json().as_bytes()),
            estimator,
            lambda,
            provenance: model.provenance.clone(),
        }
    }

    pub fn state_of(&self, pair: [usize; 2]) -> usize {
        match self.layout {
            ModelLayout::Separated { partition } => partition.endo_of(pair),
            ModelLayout::Joint => pair[0] * self.factor_sizes[1] + pair[1],
        }
    }

    /// Exact return in the true environment, reading states through the decoder.
    pub fn exact_return(&self, spec: &ExBmdpSpec, decoder: &FactorDecoder) -> Result<f64, PenalizeError> {
        let na = spec.n_act;
        let rows: Result<Vec<Vec<f64>>, SepModelError> = (0..spec.n_endo * spec.n_exo)
            .map(|z| {
                let latent = crate::exbmdp::LatentState { endo: z / spec.n_exo, exo: z % spec.n_exo };
                let pair = decoder.decode(spec.emit(latent))?;
                Ok(self.table.row(self.state_of(pair)).to_vec())
            })
            .collect();
        let rows = rows?;
        let ret = spec.exact_return_latent(|z| rows[z.endo * spec.n_exo + z.exo].clone())?;
        debug_assert!(rows.iter().all(|r| r.len() == na));
        Ok(ret)
    }

    /// The policy as a table over the true endogenous state, when it ignores the exogenous state.
    pub fn endo_policy(&self, spec: &ExBmdpSpec, decoder: &FactorDecoder) -> Result<Option<PolicyTable>, PenalizeError> {
        let mut rows = Vec::with_capacity(spec.n_endo);
        for e in 0..spec.n_endo {
            let mut row: Option<Vec<f64>> = None;
            for x in 0..spec.n_exo {
                let pair = decoder.decode(spec.emit(crate::exbmdp::LatentState { endo: e, exo: x }))?;
                let r = self.table.row(self.state_of(pair)).to_vec();
                match &row {
                    None => row = Some(r),
                    Some(prev) if *prev != r => return Ok(None),
                    Some(_) => {}
                }
            }
            rows.push(row.unwrap_or_default());
        }
        Ok(Some(PolicyTable::from_rows(&rows)))
    }

    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("policy serializes");
        v["format_version"] = POLICY_FORMAT_VERSION.into();
        serde_json::to_string_pretty(&v).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<LearnedPolicy, PenalizeError> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let found = v.get("format_version").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
        if found != POLICY_FORMAT_VERSION {
            return Err(PenalizeError::Version { found, expected: POLICY_FORMAT_VERSION });
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), PenalizeError> {
        crate::io::write_atomic(path, self.to_json().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LearnedPolicy, PenalizeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
