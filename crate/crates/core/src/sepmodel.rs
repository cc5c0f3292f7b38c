//! Learning the separated model from an offline dataset.
//!
//! Observations decode to a pair of factors, but the learner is not told which
//! factor is action-controlled. Sampling schedules pick training batches,
//! factored plug-in likelihood scores the two candidate partitions, and
//! bootstrap ensembles of add-alpha count estimates form the dynamics model.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{OfflineDataset, Provenance, Trajectory};
use crate::exbmdp::{ExBmdpSpec, TransitionTable};
use crate::rng::stream;

pub const DECODER_FORMAT_VERSION: u32 = 1;
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Default add-alpha smoothing.
pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SepModelError {
    #[error("observation {0} has no decoding")]
    UnknownObservation(usize),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("partition is degenerate: neither factor depends on the action")]
    DegeneratePartition,
    #[error("{kind} format version {found} is not supported (expected {expected})")]
    Version { kind: &'static str, found: u32, expected: u32 },
    #[error("malformed document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    First,
    Second,
}

impl Factor {
    pub fn index(self) -> usize {
        match self {
            Factor::First => 0,
            Factor::Second => 1,
        }
    }

    pub fn other(self) -> Factor {
        match self {
            Factor::First => Factor::Second,
            Factor::Second => Factor::First,
        }
    }
}

/// Which decoded factor is treated as endogenous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    pub endo: Factor,
}

impl Partition {
    pub const CANDIDATES: [Partition; 2] = [Partition { endo: Factor::First }, Partition { endo: Factor::Second }];

    pub fn exo(self) -> Factor {
        self.endo.other()
    }

    pub fn endo_of(self, pair: [usize; 2]) -> usize {
        pair[self.endo.index()]
    }

    pub fn exo_of(self, pair: [usize; 2]) -> usize {
        pair[self.exo().index()]
    }
}

/// Observation id -> factor pair. The factor order is arbitrary from the learner's point of view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorDecoder {
    pub factor_sizes: [usize; 2],
    pub pairs: Vec<Option<[usize; 2]>>,
    pub env_fingerprint: String,
}

impl FactorDecoder {
    /// Inverts the spec's emission. With `swapped`, the exogenous factor comes first.
    pub fn from_spec(spec: &ExBmdpSpec, swapped: bool) -> FactorDecoder {
        let pairs = spec
            .decode_table()
            .into_iter()
            .map(|z| z.map(|z| if swapped { [z.exo, z.endo] } else { [z.endo, z.exo] }))
            .collect();
        let factor_sizes = if swapped { [spec.n_exo, spec.n_endo] } else { [spec.n_endo, spec.n_exo] };
        FactorDecoder { factor_sizes, pairs, env_fingerprint: spec.fingerprint() }
    }

    pub fn decode(&self, obs: usize) -> Result<[usize; 2], SepModelError> {
        self.pairs.get(obs).copied().flatten().ok_or(SepModelError::UnknownObservation(obs))
    }

    /// Observation emitted by a factor pair, if any.
    pub fn encode(&self, pair: [usize; 2]) -> Option<usize> {
        self.pairs.iter().position(|p| *p == Some(pair))
    }

    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("decoder serializes");
        v["format_version"] = DECODER_FORMAT_VERSION.into();
        serde_json::to_string_pretty(&v).expect("decoder serializes")
    }

    pub fn from_json(text: &str) -> Result<FactorDecoder, SepModelError> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        check_version(&v, "decoder", DECODER_FORMAT_VERSION)?;
        Ok(serde_json::from_value(v)?)
    }

    pub fn load(path: &Path) -> Result<FactorDecoder, SepModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn check_version(v: &serde_json::Value, kind: &'static str, expected: u32) -> Result<(), SepModelError> {
    let found = v.get("format_version").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
    if found != expected {
        return Err(SepModelError::Version { kind, found, expected });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Conservative,
    Random,
}

impl std::str::FromStr for SamplingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conservative" | "cs" => Ok(SamplingMode::Conservative),
            "random" | "rs" => Ok(SamplingMode::Random),
            other => Err(format!("unknown sampling mode '{other}'")),
        }
    }
}

/// Epoch-indexed batch selection.
///
/// Each batch is `windows` sub-sequences of length `window_len`. Under the
/// conservative mode, epoch `m <= n` takes every window from trajectory
/// `tau_m`; later epochs, and every epoch of the random mode, take windows
/// from distinct trajectories drawn uniformly from the whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSchedule {
    pub mode: SamplingMode,
    /// Epoch of the next batch, starting at 1.
    pub epoch: usize,
    pub windows: usize,
    pub window_len: usize,
}

impl SamplingSchedule {
    pub fn new(mode: SamplingMode, windows: usize, window_len: usize) -> Self {
        Self { mode, epoch: 1, windows: windows.max(1), window_len: window_len.max(2) }
    }

    /// One-based trajectory index used by the conservative mode at epoch `m`.
    ///
    /// `j = ((m - 1) mod min(m, n)) + 1` while `m <= n`, which always satisfies
    /// `j <= min(m, n)`.
    pub fn conservative_index(m: usize, n: usize) -> Option<usize> {
        if m == 0 || m > n {
            return None;
        }
        Some((m - 1) % m.min(n) + 1)
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, ds: &OfflineDataset, rng: &mut R) -> Vec<Trajectory> {
        let m = self.epoch;
        self.epoch += 1;
        let n = ds.trajectories.len();
        if n == 0 {
            return Vec::new();
        }
        let sources: Vec<usize> = match (self.mode, Self::conservative_index(m, n)) {
            (SamplingMode::Conservative, Some(j)) => vec![j - 1; self.windows],
            _ if self.windows <= n => sample(rng, n, self.windows).into_vec(),
            _ => (0..self.windows).map(|_| rng.random_range(0..n)).collect(),
        };
        sources
            .into_iter()
            .map(|i| {
                let t = &ds.trajectories[i];
                if self.window_len >= t.len() {
                    t.clone()
                } else {
                    let start = rng.random_range(0..=t.len() - self.window_len);
                    t.window(start, self.window_len)
                }
            })
            .collect()
    }
}

/// Sufficient statistics of a batch under one partition.
#[derive(Debug, Clone)]
struct PartitionCounts {
    n_endo: usize,
    n_exo: usize,
    n_act: usize,
    /// `[s+][a]`
    action: Vec<f64>,
    /// `[s+][a][s+']`
    endo: Vec<f64>,
    /// `[s-][s-']`
    exo: Vec<f64>,
}

impl PartitionCounts {
    fn new(decoder: &FactorDecoder, partition: Partition, n_act: usize) -> Self {
        let n_endo = decoder.factor_sizes[partition.endo.index()];
        let n_exo = decoder.factor_sizes[partition.exo().index()];
        Self {
            n_endo,
            n_exo,
            n_act,
            action: vec![0.0; n_endo * n_act],
            endo: vec![0.0; n_endo * n_act * n_endo],
            exo: vec![0.0; n_exo * n_exo],
        }
    }

    fn add(&mut self, batch: &[Trajectory], decoder: &FactorDecoder, partition: Partition) -> Result<(), SepModelError> {
        for t in batch {
            let pairs = decode_all(t, decoder)?;
            for (i, pair) in pairs.iter().enumerate() {
                let (e, x, a) = (partition.endo_of(*pair), partition.exo_of(*pair), t.actions[i]);
                self.action[e * self.n_act + a] += 1.0;
                if let Some(next) = pairs.get(i + 1) {
                    let (e2, x2) = (partition.endo_of(*next), partition.exo_of(*next));
                    self.endo[(e * self.n_act + a) * self.n_endo + e2] += 1.0;
                    self.exo[x * self.n_exo + x2] += 1.0;
                }
            }
        }
        Ok(())
    }
}

fn decode_all(t: &Trajectory, decoder: &FactorDecoder) -> Result<Vec<[usize; 2]>, SepModelError> {
    t.observations.iter().map(|&o| decoder.decode(o)).collect()
}

/// `ln` of the add-alpha estimate `(c + alpha) / (total + alpha * k)`.
fn smoothed_log(c: f64, total: f64, alpha: f64, k: usize) -> f64 {
    let denom = total + alpha * k as f64;
    if denom <= 0.0 {
        // unseen conditioning event with alpha = 0
        return f64::NEG_INFINITY;
    }
    ((c + alpha) / denom).ln()
}

/// The four per-step terms of the factored trajectory log-likelihood, summed over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoglikTerms {
    /// Zero under the exact decoder.
    pub observation: f64,
    pub action: f64,
    pub endo: f64,
    pub exo: f64,
    /// Set when some scored event had zero estimated probability.
    pub flagged: bool,
}

impl LoglikTerms {
    pub fn total(&self) -> f64 {
        self.observation + self.action + self.endo + self.exo
    }
}

fn n_actions_of(batches: &[&[Trajectory]]) -> usize {
    batches
        .iter()
        .flat_map(|b| b.iter())
        .flat_map(|t| t.actions.iter())
        .copied()
        .max()
        .map_or(1, |m| m + 1)
}

/// Plug-in factored log-likelihood: conditionals are fit and scored on the same batch.
pub fn factored_loglik(
    batch: &[Trajectory],
    decoder: &FactorDecoder,
    partition: Partition,
    alpha: f64,
) -> Result<LoglikTerms, SepModelError> {
    factored_loglik_heldout(batch, batch, decoder, partition, alpha)
}

/// Factored log-likelihood of `eval` under conditionals fit on `fit`.
pub fn factored_loglik_heldout(
    fit: &[Trajectory],
    eval: &[Trajectory],
    decoder: &FactorDecoder,
    partition: Partition,
    alpha: f64,
) -> Result<LoglikTerms, SepModelError> {
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(SepModelError::Argument(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let n_act = n_actions_of(&[fit, eval]);
    let mut counts = PartitionCounts::new(decoder, partition, n_act);
    counts.add(fit, decoder, partition)?;
    let (ne, nx) = (counts.n_endo, counts.n_exo);

    let action_totals: Vec<f64> = (0..ne).map(|e| counts.action[e * n_act..(e + 1) * n_act].iter().sum()).collect();
    let endo_totals: Vec<f64> = (0..ne * n_act).map(|r| counts.endo[r * ne..(r + 1) * ne].iter().sum()).collect();
    let exo_totals: Vec<f64> = (0..nx).map(|x| counts.exo[x * nx..(x + 1) * nx].iter().sum()).collect();

    let mut terms = LoglikTerms { observation: 0.0, action: 0.0, endo: 0.0, exo: 0.0, flagged: false };
    for t in eval {
        let pairs = decode_all(t, decoder)?;
        for (i, pair) in pairs.iter().enumerate() {
            let (e, x, a) = (partition.endo_of(*pair), partition.exo_of(*pair), t.actions[i]);
            terms.action += smoothed_log(counts.action[e * n_act + a], action_totals[e], alpha, n_act);
            if let Some(next) = pairs.get(i + 1) {
                let (e2, x2) = (partition.endo_of(*next), partition.exo_of(*next));
                let row = e * n_act + a;
                terms.endo += smoothed_log(counts.endo[row * ne + e2], endo_totals[row], alpha, ne);
                terms.exo += smoothed_log(counts.exo[x * nx + x2], exo_totals[x], alpha, nx);
            }
        }
    }
    terms.flagged = !terms.total().is_finite();
    Ok(terms)
}

/// Largest total-variation distance between `T(.|s, a)` and `T(.|s, a')` over
/// visited rows of one factor's own empirical chain.
pub fn action_dependence(ds: &OfflineDataset, decoder: &FactorDecoder, factor: Factor) -> Result<f64, SepModelError> {
    let partition = Partition { endo: factor };
    let n_act = n_actions_of(&[&ds.trajectories]);
    let mut counts = PartitionCounts::new(decoder, partition, n_act);
    counts.add(&ds.trajectories, decoder, partition)?;
    let n = counts.n_endo;
    let row = |s: usize, a: usize| -> Option<Vec<f64>> {
        let r = &counts.endo[(s * n_act + a) * n..(s * n_act + a + 1) * n];
        let total: f64 = r.iter().sum();
        (total > 0.0).then(|| r.iter().map(|c| c / total).collect())
    };
    let mut best = 0.0f64;
    for s in 0..n {
        let rows: Vec<Option<Vec<f64>>> = (0..n_act).map(|a| row(s, a)).collect();
        for a in 0..n_act {
            for b in a + 1..n_act {
                if let (Some(p), Some(q)) = (&rows[a], &rows[b]) {
                    let tv = 0.5 * p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f64>();
                    best = best.max(tv);
                }
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionDecision {
    Resolved { partition: Partition },
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub decision: PartitionDecision,
    /// Accumulated log-likelihood with the first / second factor as endogenous.
    pub loglik: [f64; 2],
    pub action_dependence: [f64; 2],
    pub tie_broken: bool,
    pub epochs: usize,
}

impl PartitionReport {
    pub fn partition(&self) -> Result<Partition, SepModelError> {
        match self.decision {
            PartitionDecision::Resolved { partition } => Ok(partition),
            PartitionDecision::Degenerate => Err(SepModelError::DegeneratePartition),
        }
    }
}

/// Scores both candidate partitions over `epochs` scheduled batches and keeps the likelier.
///
/// Exact ties fall back to the factor whose empirical transitions depend more
/// on the action; when neither factor shows any action dependence the result
/// is [`PartitionDecision::Degenerate`].
pub fn discover_partition<R: Rng + ?Sized>(
    ds: &OfflineDataset,
    decoder: &FactorDecoder,
    schedule: &SamplingSchedule,
    alpha: f64,
    epochs: usize,
    rng: &mut R,
) -> Result<PartitionReport, SepModelError> {
    if epochs == 0 {
        return Err(SepModelError::Argument("need at least one epoch".into()));
    }
    if ds.trajectories.is_empty() {
        return Err(SepModelError::Argument("dataset is empty".into()));
    }
    let mut schedule = schedule.clone();
    let mut loglik = [0.0f64; 2];
    for _ in 0..epochs {
        let batch = schedule.next_batch(ds, rng);
        for p in Partition::CANDIDATES {
            loglik[p.endo.index()] += factored_loglik(&batch, decoder, p, alpha)?.total();
        }
    }
    let dependence = [
        action_dependence(ds, decoder, Factor::First)?,
        action_dependence(ds, decoder, Factor::Second)?,
    ];
    let scale = 1.0 + loglik[0].abs().max(loglik[1].abs());
    let tied = (loglik[0] - loglik[1]).abs() <= 1e-9 * scale;
    let (decision, tie_broken) = if !tied {
        let endo = if loglik[0] > loglik[1] { Factor::First } else { Factor::Second };
        (PartitionDecision::Resolved { partition: Partition { endo } }, false)
    } else if dependence[0] <= 1e-12 && dependence[1] <= 1e-12 {
        (PartitionDecision::Degenerate, true)
    } else {
        let endo = if dependence[0] >= dependence[1] { Factor::First } else { Factor::Second };
        (PartitionDecision::Resolved { partition: Partition { endo } }, true)
    };
    Ok(PartitionReport { decision, loglik, action_dependence: dependence, tie_broken, epochs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelLayout {
    /// Dynamics over the endogenous factor only, plus a separate exogenous chain.
    Separated { partition: Partition },
    /// Dynamics over the undecomposed pair `z = first * n_second + second`.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub members: usize,
    pub alpha: f64,
    /// Trajectory-level bootstrap per member; disabled, every member sees the full dataset.
    pub bootstrap: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { members: 5, alpha: DEFAULT_ALPHA, bootstrap: true }
    }
}

/// Bootstrap ensemble of count-based dynamics plus reward and initial-state estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub layout: ModelLayout,
    pub factor_sizes: [usize; 2],
    pub n_states: usize,
    pub n_actions: usize,
    pub members: Vec<TransitionTable>,
    /// Exogenous chain, separated layout only.
    pub exo: Option<TransitionTable>,
    /// Count-weighted mean reward per `(s, a)`; zero where unvisited.
    pub reward: Vec<f64>,
    /// Full-data visit counts per `(s, a)`.
    pub visits: Vec<u64>,
    pub init: Vec<f64>,
    pub alpha: f64,
    pub bootstrap: bool,
    pub dataset_fingerprint: String,
    pub env_fingerprint: String,
    #[serde(default)]
    pub provenance: Provenance,
}

impl EnsembleModel {
    pub fn k(&self) -> usize {
        self.members.len()
    }

    /// Model state of a decoded factor pair.
    pub fn state_of(&self, pair: [usize; 2]) -> usize {
        match self.layout {
            ModelLayout::Separated { partition } => partition.endo_of(pair),
            ModelLayout::Joint => pair[0] * self.factor_sizes[1] + pair[1],
        }
    }

    pub fn mean_transitions(&self) -> TransitionTable {
        TransitionTable::mean_of(&self.members)
    }

    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("model serializes");
        v["format_version"] = MODEL_FORMAT_VERSION.into();
        serde_json::to_string_pretty(&v).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<EnsembleModel, SepModelError> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        check_version(&v, "model", MODEL_FORMAT_VERSION)?;
        Ok(serde_json::from_value(v)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), SepModelError> {
        crate::io::write_atomic(path, self.to_json().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EnsembleModel, SepModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Per-trajectory decoded model states, used by both model layouts.
fn model_states(
    ds: &OfflineDataset,
    decoder: &FactorDecoder,
    state_of: impl Fn([usize; 2]) -> usize,
) -> Result<Vec<Vec<usize>>, SepModelError> {
    ds.trajectories
        .iter()
        .map(|t| Ok(decode_all(t, decoder)?.into_iter().map(&state_of).collect()))
        .collect()
}

fn smoothed_table(counts: &[f64], n_states: usize, n_actions: usize, alpha: f64) -> TransitionTable {
    TransitionTable::from_fn(n_states, n_actions, |s, a, next| {
        let row = &counts[(s * n_actions + a) * n_states..(s * n_actions + a + 1) * n_states];
        let total: f64 = row.iter().sum::<f64>() + alpha * n_states as f64;
        if total > 0.0 {
            (row[next] + alpha) / total
        } else {
            1.0 / n_states as f64
        }
    })
}

fn transition_counts(states: &[Vec<usize>], actions: &[&[usize]], which: &[usize], n: usize, na: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n * na * n];
    for &i in which {
        let (s, a) = (&states[i], actions[i]);
        for t in 0..s.len().saturating_sub(1) {
            counts[(s[t] * na + a[t]) * n + s[t + 1]] += 1.0;
        }
    }
    counts
}

#[allow(clippy::too_many_arguments)]
fn fit_ensemble(
    ds: &OfflineDataset,
    states: &[Vec<usize>],
    n_states: usize,
    layout: ModelLayout,
    factor_sizes: [usize; 2],
    exo: Option<TransitionTable>,
    config: FitConfig,
    seed: u64,
) -> Result<EnsembleModel, SepModelError> {
    let na = n_actions_of(&[&ds.trajectories]);
    let actions: Vec<&[usize]> = ds.trajectories.iter().map(|t| t.actions.as_slice()).collect();
    let n_traj = ds.trajectories.len();
    let members: Vec<TransitionTable> = (0..config.members)
        .into_par_iter()
        .map(|i| {
            let which: Vec<usize> = if config.bootstrap {
                let mut rng = stream(seed, i as u64);
                (0..n_traj).map(|_| rng.random_range(0..n_traj)).collect()
            } else {
                (0..n_traj).collect()
            };
            let counts = transition_counts(states, &actions, &which, n_states, na);
            smoothed_table(&counts, n_states, na, config.alpha)
        })
        .collect();

    let mut reward_sum = vec![0.0; n_states * na];
    let mut visits = vec![0u64; n_states * na];
    let mut init = vec![0.0; n_states];
    for (t, s) in ds.trajectories.iter().zip(states) {
        init[s[0]] += 1.0;
        for (i, &st) in s.iter().enumerate() {
            let cell = st * na + t.actions[i];
            reward_sum[cell] += t.rewards[i];
            visits[cell] += 1;
        }
    }
    let reward = reward_sum
        .iter()
        .zip(&visits)
        .map(|(r, &c)| if c > 0 { r / c as f64 } else { 0.0 })
        .collect();
    for x in &mut init {
        *x /= n_traj as f64;
    }
    Ok(EnsembleModel {
        layout,
        factor_sizes,
        n_states,
        n_actions: na,
        members,
        exo,
        reward,
        visits,
        init,
        alpha: config.alpha,
        bootstrap: config.bootstrap,
        dataset_fingerprint: ds.fingerprint(),
        env_fingerprint: ds.env_fingerprint.clone(),
        provenance: ds.provenance.clone(),
    })
}

fn check_fit_inputs(ds: &OfflineDataset, config: &FitConfig) -> Result<(), SepModelError> {
    if ds.trajectories.is_empty() {
        return Err(SepModelError::Argument("dataset is empty".into()));
    }
    if config.members == 0 {
        return Err(SepModelError::Argument("ensemble needs at least one member".into()));
    }
    if config.alpha < 0.0 || !config.alpha.is_finite() {
        return Err(SepModelError::Argument(format!("alpha must be finite and >= 0, got {}", config.alpha)));
    }
    Ok(())
}

/// Fits `K` bootstrap members over the endogenous factor; the exogenous chain
/// and the reward table are fit once on the full dataset.
pub fn fit_separated_model(
    ds: &OfflineDataset,
    decoder: &FactorDecoder,
    partition: Partition,
    config: FitConfig,
    seed: u64,
) -> Result<EnsembleModel, SepModelError> {
    check_fit_inputs(ds, &config)?;
    let n_endo = decoder.factor_sizes[partition.endo.index()];
    let n_exo = decoder.factor_sizes[partition.exo().index()];
    let states = model_states(ds, decoder, |p| partition.endo_of(p))?;
    let exo_states = model_states(ds, decoder, |p| partition.exo_of(p))?;
    let zero_actions: Vec<Vec<usize>> = exo_states.iter().map(|s| vec![0; s.len()]).collect();
    let zero_refs: Vec<&[usize]> = zero_actions.iter().map(|v| v.as_slice()).collect();
    let all: Vec<usize> = (0..ds.trajectories.len()).collect();
    let exo_counts = transition_counts(&exo_states, &zero_refs, &all, n_exo, 1);
    let exo = smoothed_table(&exo_counts, n_exo, 1, config.alpha);
    fit_ensemble(
        ds,
        &states,
        n_endo,
        ModelLayout::Separated { partition },
        decoder.factor_sizes,
        Some(exo),
        config,
        seed,
    )
}

/// Joint-latent baseline: the same estimator over the undecomposed factor pair.
pub fn fit_joint_model(
    ds: &OfflineDataset,
    decoder: &FactorDecoder,
    config: FitConfig,
    seed: u64,
) -> Result<EnsembleModel, SepModelError> {
    check_fit_inputs(ds, &config)?;
    let n2 = decoder.factor_sizes[1];
    let n_states = decoder.factor_sizes[0] * n2;
    let states = model_states(ds, decoder, |p| p[0] * n2 + p[1])?;
    fit_ensemble(ds, &states, n_states, ModelLayout::Joint, decoder.factor_sizes, None, config, seed)
}
