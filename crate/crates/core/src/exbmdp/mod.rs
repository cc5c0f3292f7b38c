//! Ground-truth exogenous block MDP.
//!
//! The latent state is a pair `(endo, exo)`. The endogenous factor moves under
//! the agent's action, the exogenous factor follows its own action-free chain,
//! and every latent pair emits a distinct observation id (block structure), so
//! the true decoder is a table inversion.

pub mod dp;
pub mod table;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use dp::{occupancy, DpError, EndoMdp, OccupancyMeasure, OccupancyScaling};
pub use table::{PolicyTable, TransitionTable};

use crate::rng::sample_categorical;

pub const SPEC_FORMAT_VERSION: u32 = 1;

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ExbmdpError {
    #[error("{what} id {id} out of range (size {size})")]
    OutOfRange { what: &'static str, id: usize, size: usize },
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("spec format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed spec document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Full ground-truth factored MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExBmdpSpec {
    pub n_endo: usize,
    pub n_exo: usize,
    pub n_act: usize,
    /// `T(s+' | s+, a)`.
    pub endo_trans: TransitionTable,
    /// `T(s-' | s-)`, stored with a single dummy action.
    pub exo_trans: TransitionTable,
    /// `r(s+, a)`, row-major.
    pub reward: Vec<f64>,
    /// Observation id of `(s+, s-)` at index `s+ * n_exo + s-`.
    pub emission: Vec<usize>,
    pub init_endo: Vec<f64>,
    pub init_exo: Vec<f64>,
    pub discount: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentState {
    pub endo: usize,
    pub exo: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next: LatentState,
    pub reward: f64,
    pub observation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Shape { field: &'static str, expected: usize, found: usize },
    EndoRow { state: usize, action: usize, sum: f64 },
    ExoRow { state: usize, sum: f64 },
    RewardRange { state: usize, action: usize, value: f64 },
    InitEndo { sum: f64 },
    InitExo { sum: f64 },
    Discount { value: f64 },
    /// Two latent pairs share an observation id.
    BlockStructure { first: (usize, usize), second: (usize, usize), observation: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct SpecDocument {
    format_version: u32,
    #[serde(flatten)]
    spec: ExBmdpSpec,
}

fn row_sum(row: &[f64]) -> f64 {
    row.iter().sum()
}

fn row_ok(row: &[f64]) -> bool {
    table::is_distribution(row, ROW_TOL)
}

impl ExBmdpSpec {
    /// Checks every structural invariant and reports all violations found.
    pub fn validate(&self) -> ValidationReport {
        let mut v = Vec::new();
        let mut shape = |field, expected, found| {
            if expected != found {
                v.push(Violation::Shape { field, expected, found });
                false
            } else {
                true
            }
        };
        let endo_ok = shape("endo_trans.n_states", self.n_endo, self.endo_trans.n_states())
            & shape("endo_trans.n_actions", self.n_act, self.endo_trans.n_actions());
        let exo_ok = shape("exo_trans.n_states", self.n_exo, self.exo_trans.n_states())
            & shape("exo_trans.n_actions", 1, self.exo_trans.n_actions());
        let reward_ok = shape("reward", self.n_endo * self.n_act, self.reward.len());
        let emission_ok = shape("emission", self.n_endo * self.n_exo, self.emission.len());
        let init_endo_ok = shape("init_endo", self.n_endo, self.init_endo.len());
        let init_exo_ok = shape("init_exo", self.n_exo, self.init_exo.len());

        if endo_ok {
            for s in 0..self.n_endo {
                for a in 0..self.n_act {
                    let row = self.endo_trans.row(s, a);
                    if !row_ok(row) {
                        v.push(Violation::EndoRow { state: s, action: a, sum: row_sum(row) });
                    }
                }
            }
        }
        if exo_ok {
            for s in 0..self.n_exo {
                let row = self.exo_trans.row(s, 0);
                if !row_ok(row) {
                    v.push(Violation::ExoRow { state: s, sum: row_sum(row) });
                }
            }
        }
        if reward_ok {
            for s in 0..self.n_endo {
                for a in 0..self.n_act {
                    let r = self.reward[s * self.n_act + a];
                    if !(0.0..=1.0).contains(&r) {
                        v.push(Violation::RewardRange { state: s, action: a, value: r });
                    }
                }
            }
        }
        if init_endo_ok && !row_ok(&self.init_endo) {
            v.push(Violation::InitEndo { sum: row_sum(&self.init_endo) });
        }
        if init_exo_ok && !row_ok(&self.init_exo) {
            v.push(Violation::InitExo { sum: row_sum(&self.init_exo) });
        }
        if !(0.0..1.0).contains(&self.discount) {
            v.push(Violation::Discount { value: self.discount });
        }
        if emission_ok {
            let mut seen = std::collections::HashMap::new();
            for e in 0..self.n_endo {
                for x in 0..self.n_exo {
                    let obs = self.emission[e * self.n_exo + x];
                    if let Some(&first) = seen.get(&obs) {
                        v.push(Violation::BlockStructure { first, second: (e, x), observation: obs });
                    } else {
                        seen.insert(obs, (e, x));
                    }
                }
            }
        }
        ValidationReport { violations: v }
    }

    pub fn reward(&self, endo: usize, action: usize) -> f64 {
        self.reward[endo * self.n_act + action]
    }

    pub fn emit(&self, state: LatentState) -> usize {
        self.emission[state.endo * self.n_exo + state.exo]
    }

    /// Inverse of the emission map, indexed by observation id.
    pub fn decode_table(&self) -> Vec<Option<LatentState>> {
        let n_obs = self.emission.iter().copied().max().map_or(0, |m| m + 1);
        let mut out = vec![None; n_obs];
        for endo in 0..self.n_endo {
            for exo in 0..self.n_exo {
                let st = LatentState { endo, exo };
                out[self.emit(st)] = Some(st);
            }
        }
        out
    }

    fn check_state(&self, state: LatentState) -> Result<(), ExbmdpError> {
        if state.endo >= self.n_endo {
            return Err(ExbmdpError::OutOfRange { what: "endogenous state", id: state.endo, size: self.n_endo });
        }
        if state.exo >= self.n_exo {
            return Err(ExbmdpError::OutOfRange { what: "exogenous state", id: state.exo, size: self.n_exo });
        }
        Ok(())
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentState {
        let endo = sample_categorical(&self.init_endo, rng);
        let exo = sample_categorical(&self.init_exo, rng);
        LatentState { endo, exo }
    }

    /// One environment transition. The two factors are drawn independently.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: LatentState,
        action: usize,
        rng: &mut R,
    ) -> Result<StepOutcome, ExbmdpError> {
        self.check_state(state)?;
        if action >= self.n_act {
            return Err(ExbmdpError::OutOfRange { what: "action", id: action, size: self.n_act });
        }
        let endo = sample_categorical(self.endo_trans.row(state.endo, action), rng);
        let exo = sample_categorical(self.exo_trans.row(state.exo, 0), rng);
        let next = LatentState { endo, exo };
        Ok(StepOutcome { next, reward: self.reward(state.endo, action), observation: self.emit(next) })
    }

    /// The endogenous MDP `(T, r, mu+, gamma)`.
    pub fn endo_mdp(&self) -> EndoMdp {
        EndoMdp {
            transitions: self.endo_trans.clone(),
            reward: self.reward.clone(),
            init: self.init_endo.clone(),
            discount: self.discount,
        }
    }

    /// `eta = E[sum_t gamma^t r(s+_t, a_t)]` for a policy on the endogenous state.
    pub fn exact_return(&self, policy: &PolicyTable) -> Result<f64, ExbmdpError> {
        if policy.n_states() != self.n_endo || policy.n_actions() != self.n_act {
            return Err(ExbmdpError::Dimension(format!(
                "policy is {}x{}, spec has {} endogenous states and {} actions",
                policy.n_states(),
                policy.n_actions(),
                self.n_endo,
                self.n_act
            )));
        }
        Ok(self.endo_mdp().expected_return(policy)?)
    }

    /// The full latent MDP over `z = endo * n_exo + exo`.
    pub fn product_mdp(&self) -> EndoMdp {
        let (ne, nx, na) = (self.n_endo, self.n_exo, self.n_act);
        let n = ne * nx;
        let transitions = TransitionTable::from_fn(n, na, |z, a, z2| {
            let (e, x) = (z / nx, z % nx);
            let (e2, x2) = (z2 / nx, z2 % nx);
            self.endo_trans.prob(e, a, e2) * self.exo_trans.prob(x, 0, x2)
        });
        let mut reward = Vec::with_capacity(n * na);
        let mut init = Vec::with_capacity(n);
        for z in 0..n {
            let (e, x) = (z / nx, z % nx);
            for a in 0..na {
                reward.push(self.reward(e, a));
            }
            init.push(self.init_endo[e] * self.init_exo[x]);
        }
        EndoMdp { transitions, reward, init, discount: self.discount }
    }

    /// Exact return of a policy that may read both latent factors.
    pub fn exact_return_latent(
        &self,
        policy: impl Fn(LatentState) -> Vec<f64>,
    ) -> Result<f64, ExbmdpError> {
        let mdp = self.product_mdp();
        let nx = self.n_exo;
        let rows: Vec<Vec<f64>> = (0..self.n_endo * nx)
            .map(|z| policy(LatentState { endo: z / nx, exo: z % nx }))
            .collect();
        if rows.iter().any(|r| r.len() != self.n_act) {
            return Err(ExbmdpError::Dimension("latent policy row has wrong action count".into()));
        }
        Ok(mdp.expected_return(&PolicyTable::from_rows(&rows))?)
    }

    pub fn occupancy(&self, policy: &PolicyTable, scaling: OccupancyScaling) -> Result<OccupancyMeasure, ExbmdpError> {
        Ok(self.endo_mdp().occupancy(policy, scaling)?)
    }

    /// Same endogenous part, new exogenous chain; observation ids are reassigned densely.
    pub fn with_exo_chain(&self, exo_trans: TransitionTable, init_exo: Vec<f64>) -> Result<ExBmdpSpec, ExbmdpError> {
        if exo_trans.n_actions() != 1 || init_exo.len() != exo_trans.n_states() {
            return Err(ExbmdpError::Dimension(format!(
                "exogenous chain has {} states, {} actions and an initial vector of length {}",
                exo_trans.n_states(),
                exo_trans.n_actions(),
                init_exo.len()
            )));
        }
        let n_exo = exo_trans.n_states();
        let emission = if n_exo == self.n_exo {
            self.emission.clone()
        } else {
            (0..self.n_endo * n_exo).collect()
        };
        Ok(ExBmdpSpec { n_exo, exo_trans, init_exo, emission, ..self.clone() })
    }

    pub fn to_json(&self) -> String {
        let doc = SpecDocument { format_version: SPEC_FORMAT_VERSION, spec: self.clone() };
        serde_json::to_string_pretty(&doc).expect("spec serializes")
    }

    pub fn from_json(text: &str) -> Result<ExBmdpSpec, ExbmdpError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != SPEC_FORMAT_VERSION {
            return Err(ExbmdpError::Version { found, expected: SPEC_FORMAT_VERSION });
        }
        let doc: SpecDocument = serde_json::from_value(value)?;
        Ok(doc.spec)
    }

    pub fn save(&self, path: &Path) -> Result<(), ExbmdpError> {
        crate::io::write_atomic(path, self.to_json().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExBmdpSpec, ExbmdpError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(&SpecDocument { format_version: SPEC_FORMAT_VERSION, spec: self.clone() })
            .expect("spec serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    pub(crate) fn tiny_spec() -> ExBmdpSpec {
        ExBmdpSpec {
            n_endo: 2,
            n_exo: 2,
            n_act: 2,
            endo_trans: TransitionTable::from_rows(
                2,
                2,
                &[vec![0.9, 0.1], vec![0.2, 0.8], vec![0.5, 0.5], vec![0.0, 1.0]],
            ),
            exo_trans: TransitionTable::from_rows(2, 1, &[vec![0.3, 0.7], vec![0.6, 0.4]]),
            reward: vec![0.0, 0.1, 1.0, 0.5],
            emission: vec![3, 0, 2, 1],
            init_endo: vec![0.5, 0.5],
            init_exo: vec![1.0, 0.0],
            discount: 0.9,
        }
    }

    #[test]
    fn well_formed_spec_validates_clean() {
        assert!(tiny_spec().validate().is_valid());
    }

    #[test]
    fn short_row_is_reported_with_indices() {
        let mut spec = tiny_spec();
        spec.endo_trans.row_mut(1, 0)[0] = 0.4;
        let report = spec.validate();
        assert_eq!(report.violations.len(), 1);
        match &report.violations[0] {
            Violation::EndoRow { state, action, sum } => {
                assert_eq!((*state, *action), (1, 0));
                assert!((sum - 0.9).abs() < 1e-12);
            }
            other => panic!("unexpected violation {other:?}"),
        }
    }

    #[test]
    fn shared_observation_breaks_block_structure() {
        let mut spec = tiny_spec();
        // emission(0,0) = emission(1,0)
        spec.emission[2] = spec.emission[0];
        let report = spec.validate();
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::BlockStructure { first: (0, 0), second: (1, 0), .. })));
    }

    #[test]
    fn deterministic_spec_steps_to_unique_successor() {
        let mut spec = tiny_spec();
        spec.endo_trans = TransitionTable::from_fn(2, 2, |s, a, n| if n == (s + a) % 2 { 1.0 } else { 0.0 });
        spec.exo_trans = TransitionTable::from_fn(2, 1, |s, _, n| if n != s { 1.0 } else { 0.0 });
        for seed in 0..20 {
            let mut rng = stream(seed, 0);
            let out = spec.step(LatentState { endo: 1, exo: 0 }, 0, &mut rng).unwrap();
            assert_eq!(out.next, LatentState { endo: 1, exo: 1 });
            assert_eq!(out.reward, spec.reward(1, 0));
            assert_eq!(out.observation, spec.emit(out.next));
        }
    }

    #[test]
    fn step_rejects_out_of_range_ids() {
        let spec = tiny_spec();
        let mut rng = stream(0, 0);
        assert!(matches!(
            spec.step(LatentState { endo: 2, exo: 0 }, 0, &mut rng),
            Err(ExbmdpError::OutOfRange { .. })
        ));
        assert!(matches!(
            spec.step(LatentState { endo: 0, exo: 0 }, 5, &mut rng),
            Err(ExbmdpError::OutOfRange { what: "action", .. })
        ));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut spec = tiny_spec();
        spec.endo_trans.row_mut(0, 0).copy_from_slice(&[0.1 + 0.2, 1.0 - (0.1 + 0.2)]);
        let text = spec.to_json();
        let back = ExBmdpSpec::from_json(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.to_json(), text);
        assert_eq!(back.fingerprint(), spec.fingerprint());
    }

    #[test]
    fn bumped_spec_version_is_rejected() {
        let text = tiny_spec().to_json().replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(ExBmdpSpec::from_json(&text), Err(ExbmdpError::Version { found: 2, .. })));
    }

    #[test]
    fn product_chain_agrees_with_endo_chain() {
        let spec = tiny_spec();
        let pi = PolicyTable::from_rows(&[vec![0.3, 0.7], vec![0.9, 0.1]]);
        let a = spec.exact_return(&pi).unwrap();
        let b = spec.exact_return_latent(|z| pi.row(z.endo).to_vec()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
