//! Behavior policies at three quality tiers, offline dataset collection,
//! per-episode return statistics and the line-oriented dataset file format.
//!
//! A dataset file is a header line (JSON object) followed by one JSON object
//! per trajectory. Rewards are written as decimal strings so that the stored
//! text round-trips to identical `f64` bits.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exbmdp::{ExBmdpSpec, ExbmdpError, PolicyTable};
use crate::rng::{dirichlet_ones, sample_categorical, stream};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Medium-tier policies land in this band of the optimal return.
pub const MEDIUM_BAND: (f64, f64) = (0.4, 0.6);
/// Return ratio the medium bisection aims for, near the top of the band so the tiers stay apart.
pub const MEDIUM_TARGET: f64 = 0.575;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("medium-tier target unreachable for spec {fingerprint}: {reason}")]
    Unreachable { fingerprint: String, reason: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Env(#[from] ExbmdpError),
    #[error("dataset format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("dataset truncated: header announces {expected} trajectories, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("environment fingerprint mismatch: dataset has {dataset}, spec has {spec}")]
    Fingerprint { dataset: String, spec: String },
    #[error("stored return statistics disagree with the trajectories")]
    StatsMismatch,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Random,
    MediumReplay,
    Medium,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Random, Tier::MediumReplay, Tier::Medium];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Random => "random",
            Tier::MediumReplay => "medium_replay",
            Tier::Medium => "medium",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Tier::Random),
            "medium_replay" | "medrep" => Ok(Tier::MediumReplay),
            "medium" => Ok(Tier::Medium),
            other => Err(format!("unknown tier '{other}' (expected random, medium_replay or medium)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPolicy {
    pub id: usize,
    pub table: PolicyTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPolicySet {
    pub tier: Tier,
    pub policies: Vec<BehaviorPolicy>,
}

impl BehaviorPolicySet {
    pub fn from_tables(tier: Tier, tables: Vec<PolicyTable>) -> Self {
        let policies = tables
            .into_iter()
            .enumerate()
            .map(|(id, table)| BehaviorPolicy { id, table })
            .collect();
        Self { tier, policies }
    }

    pub fn ids(&self) -> Vec<usize> {
        self.policies.iter().map(|p| p.id).collect()
    }
}

/// Result of the medium-tier construction, kept so the replay tier can walk toward it.
#[derive(Debug, Clone)]
pub struct MediumConstruction {
    pub base: PolicyTable,
    pub mixing: f64,
    pub policy: PolicyTable,
    pub optimal_return: f64,
    pub medium_return: f64,
}

fn unreachable(spec: &ExBmdpSpec, reason: impl Into<String>) -> DatagenError {
    DatagenError::Unreachable { fingerprint: spec.fingerprint(), reason: reason.into() }
}

/// Mixes the optimal policy with a weak base policy at a bisected rate so the
/// return lands inside [`MEDIUM_BAND`] of the optimum.
///
/// The base is the uniform policy; when uniform is already above the band the
/// worst deterministic policy is used instead. The target ratio is
/// [`MEDIUM_TARGET`], raised to halfway between the base and the band's top when
/// the base already lies above it, so the medium policy never trails its base.
pub fn medium_policy(spec: &ExBmdpSpec) -> Result<MediumConstruction, DatagenError> {
    let mdp = spec.endo_mdp();
    let optimal = mdp.optimal_policy().map_err(ExbmdpError::from)?;
    let eta_opt = spec.exact_return(&optimal)?;
    if !(eta_opt > 0.0) {
        return Err(unreachable(spec, format!("optimal return {eta_opt} is not positive")));
    }
    let ratio = |p: &PolicyTable| -> Result<f64, DatagenError> { Ok(spec.exact_return(p)? / eta_opt) };
    let (lo, hi) = MEDIUM_BAND;

    let uniform = PolicyTable::uniform(spec.n_endo, spec.n_act);
    let base = if ratio(&uniform)? <= hi {
        uniform
    } else {
        let worst = mdp.pessimal_policy().map_err(ExbmdpError::from)?;
        if ratio(&worst)? > hi {
            return Err(unreachable(spec, "every policy earns more than 60% of the optimal return"));
        }
        worst
    };

    let mut mixing = 0.0;
    let base_ratio = ratio(&base)?;
    let target = MEDIUM_TARGET.max(0.5 * (base_ratio + hi));
    if base_ratio < target {
        let (mut a, mut b) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            let r = ratio(&optimal.mix(&base, mid))?;
            mixing = mid;
            if (r - target).abs() < 1e-3 {
                break;
            }
            if r < target {
                a = mid;
            } else {
                b = mid;
            }
        }
    }
    let policy = optimal.mix(&base, mixing);
    let medium_return = spec.exact_return(&policy)?;
    let r = medium_return / eta_opt;
    if !(lo..=hi).contains(&r) {
        return Err(unreachable(spec, format!("bisection ended at return ratio {r}")));
    }
    Ok(MediumConstruction { base, mixing, policy, optimal_return: eta_opt, medium_return })
}

/// Snapshots of conservative policy iteration from the medium base toward the medium return.
///
/// Each step mixes the current policy with its greedy improvement, which can
/// only raise the value in every state, so returns along the sequence never
/// decrease. The path stops short of the medium return and ends at the medium
/// policy itself. `count` snapshots are taken evenly along the path.
pub fn replay_snapshots(
    spec: &ExBmdpSpec,
    medium: &MediumConstruction,
    count: usize,
    step: f64,
) -> Result<Vec<PolicyTable>, DatagenError> {
    let mdp = spec.endo_mdp();
    let mut current = medium.base.clone();
    let mut eta = spec.exact_return(&current)?;
    let mut path = vec![current.clone()];
    for _ in 0..MAX_REPLAY_ITERATIONS {
        if eta >= medium.medium_return {
            break;
        }
        let values = mdp.policy_values(&current).map_err(ExbmdpError::from)?;
        let greedy = mdp.greedy(&values);
        let next = greedy.mix(&current, step);
        let next_eta = spec.exact_return(&next)?;
        if next_eta <= eta + 1e-12 || next_eta >= medium.medium_return {
            break;
        }
        current = next;
        eta = next_eta;
        path.push(current.clone());
    }
    if eta < medium.medium_return {
        path.push(medium.policy.clone());
    }
    let last = path.len() - 1;
    Ok((0..count)
        .map(|i| {
            let idx = if count == 1 { last } else { (i * last + (count - 1) / 2) / (count - 1) };
            path[idx].clone()
        })
        .collect())
}

const MAX_REPLAY_ITERATIONS: usize = 10_000;
/// Mixing step of each replay improvement.
pub const REPLAY_STEP: f64 = 0.2;

pub fn make_behavior_policies<R: Rng + ?Sized>(
    spec: &ExBmdpSpec,
    tier: Tier,
    count: usize,
    rng: &mut R,
) -> Result<BehaviorPolicySet, DatagenError> {
    if count == 0 {
        return Err(DatagenError::Argument("behavior policy count must be at least 1".into()));
    }
    let tables = match tier {
        Tier::Random => (0..count)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..spec.n_endo).map(|_| dirichlet_ones(spec.n_act, rng)).collect();
                PolicyTable::from_rows(&rows)
            })
            .collect(),
        Tier::Medium => vec![medium_policy(spec)?.policy],
        Tier::MediumReplay => {
            let medium = medium_policy(spec)?;
            replay_snapshots(spec, &medium, count, REPLAY_STEP)?
        }
    };
    Ok(BehaviorPolicySet::from_tables(tier, tables))
}

/// One episode: `observations[t]` is seen, `actions[t]` taken, `rewards[t]` received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub policy_id: usize,
    pub observations: Vec<usize>,
    pub actions: Vec<usize>,
    #[serde(with = "decimal_strings")]
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    fn check(&self) -> Result<(), String> {
        let t = self.observations.len();
        if self.actions.len() != t || self.rewards.len() != t {
            return Err(format!(
                "sequence lengths disagree: {} observations, {} actions, {} rewards",
                t,
                self.actions.len(),
                self.rewards.len()
            ));
        }
        if let Some(r) = self.rewards.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(format!("reward {r} outside [0, 1]"));
        }
        Ok(())
    }

    /// Discounted return `sum_t gamma^t r_t`.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut w = 1.0;
        let mut total = 0.0;
        for r in &self.rewards {
            total += w * r;
            w *= gamma;
        }
        total
    }

    /// The contiguous window `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Trajectory {
        let end = (start + len).min(self.len());
        Trajectory {
            policy_id: self.policy_id,
            observations: self.observations[start..end].to_vec(),
            actions: self.actions[start..end].to_vec(),
            rewards: self.rewards[start..end].to_vec(),
        }
    }
}

mod decimal_strings {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(values.iter().map(|v| v.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter()
            .map(|s| s.parse::<f64>().map_err(|e| D::Error::custom(format!("bad reward '{s}': {e}"))))
            .collect()
    }
}

/// Summary of per-episode returns, in the layout of a dataset statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnStats {
    pub episodes: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
}

impl ReturnStats {
    pub fn from_returns(returns: &[f64]) -> ReturnStats {
        let n = returns.len();
        if n == 0 {
            return ReturnStats { episodes: 0, mean: 0.0, std: 0.0, min: 0.0, p25: 0.0, median: 0.0, p75: 0.0, max: 0.0 };
        }
        let mean = returns.iter().sum::<f64>() / n as f64;
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
        let mut sorted = returns.to_vec();
        sorted.sort_by(f64::total_cmp);
        let pct = |q: f64| {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        };
        ReturnStats {
            episodes: n,
            mean,
            std: var.sqrt(),
            min: sorted[0],
            p25: pct(0.25),
            median: pct(0.5),
            p75: pct(0.75),
            max: sorted[n - 1],
        }
    }
}

/// Where an artifact came from; embedded in every file the harness writes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub tier: Tier,
    pub env_fingerprint: String,
    pub policy_ids: Vec<usize>,
    pub horizon: usize,
    /// Discount used for the per-episode returns in `stats`.
    pub return_discount: f64,
    pub trajectories: Vec<Trajectory>,
    pub stats: ReturnStats,
    pub provenance: Provenance,
}

impl OfflineDataset {
    pub fn episode_returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.discounted_return(self.return_discount)).collect()
    }

    pub fn recompute_stats(&self) -> ReturnStats {
        ReturnStats::from_returns(&self.episode_returns())
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// SHA-256 of the serialized dataset.
    pub fn fingerprint(&self) -> String {
        crate::io::sha256_hex(self.to_jsonl().as_bytes())
    }

    pub fn to_jsonl(&self) -> String {
        let header = DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            tier: self.tier,
            env_fingerprint: self.env_fingerprint.clone(),
            n_trajectories: self.trajectories.len(),
            horizon: self.horizon,
            return_discount: self.return_discount,
            policy_ids: self.policy_ids.clone(),
            stats: self.stats.clone(),
            config_hash: self.provenance.config_hash.clone(),
            seed: self.provenance.seed,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for t in &self.trajectories {
            out.push_str(&serde_json::to_string(t).expect("trajectory serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    tier: Tier,
    env_fingerprint: String,
    n_trajectories: usize,
    horizon: usize,
    return_discount: f64,
    policy_ids: Vec<usize>,
    stats: ReturnStats,
    #[serde(default)]
    config_hash: String,
    #[serde(default)]
    seed: u64,
}

fn rollout(spec: &ExBmdpSpec, policy: &PolicyTable, horizon: usize, seed: u64, index: u64) -> Result<Vec<(usize, usize, f64)>, ExbmdpError> {
    let mut rng = stream(seed, index);
    let mut state = spec.sample_initial(&mut rng);
    let mut steps = Vec::with_capacity(horizon);
    let mut obs = spec.emit(state);
    for _ in 0..horizon {
        let action = sample_categorical(policy.row(state.endo), &mut rng);
        let out = spec.step(state, action, &mut rng)?;
        steps.push((obs, action, out.reward));
        state = out.next;
        obs = out.observation;
    }
    Ok(steps)
}

/// Rolls out `n_traj` episodes, assigning behavior policies round-robin.
///
/// Trajectory `i` draws from its own stream derived from `(seed, i)`, so the
/// result does not depend on how the work is scheduled.
pub fn collect(
    spec: &ExBmdpSpec,
    policies: &BehaviorPolicySet,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<OfflineDataset, DatagenError> {
    if n_traj == 0 {
        return Err(DatagenError::Argument("need at least one trajectory".into()));
    }
    if horizon < 2 {
        return Err(DatagenError::Argument("horizon must be at least 2".into()));
    }
    if policies.policies.is_empty() {
        return Err(DatagenError::Argument("behavior policy set is empty".into()));
    }
    let trajectories = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let bp = &policies.policies[i % policies.policies.len()];
            let steps = rollout(spec, &bp.table, horizon, seed, i as u64)?;
            Ok(Trajectory {
                policy_id: bp.id,
                observations: steps.iter().map(|s| s.0).collect(),
                actions: steps.iter().map(|s| s.1).collect(),
                rewards: steps.iter().map(|s| s.2).collect(),
            })
        })
        .collect::<Result<Vec<_>, ExbmdpError>>()?;
    let mut ds = OfflineDataset {
        tier: policies.tier,
        env_fingerprint: spec.fingerprint(),
        policy_ids: policies.ids(),
        horizon,
        return_discount: spec.discount,
        trajectories,
        stats: ReturnStats::from_returns(&[]),
        provenance: Provenance::default(),
    };
    ds.stats = ds.recompute_stats();
    Ok(ds)
}

/// Shannon entropy (nats) of the pooled action frequencies of a batch.
pub fn action_entropy(batch: &[Trajectory]) -> Result<f64, DatagenError> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for t in batch {
        for &a in &t.actions {
            *counts.entry(a).or_default() += 1;
        }
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(DatagenError::Argument("action entropy needs at least one action".into()));
    }
    let n = total as f64;
    Ok(counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum())
}

pub fn save_dataset(ds: &OfflineDataset, path: &Path) -> Result<(), DatagenError> {
    crate::io::write_atomic(path, ds.to_jsonl().as_bytes())?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset, DatagenError> {
    let file = std::fs::File::open(path)?;
    parse_dataset(BufReader::new(file))
}

/// Loads a dataset and checks it was generated from `spec`.
pub fn load_dataset_for(path: &Path, spec: &ExBmdpSpec) -> Result<OfflineDataset, DatagenError> {
    let ds = load_dataset(path)?;
    let fp = spec.fingerprint();
    if ds.env_fingerprint != fp {
        return Err(DatagenError::Fingerprint { dataset: ds.env_fingerprint, spec: fp });
    }
    Ok(ds)
}

pub fn parse_dataset<R: BufRead>(reader: R) -> Result<OfflineDataset, DatagenError> {
    let mut lines = reader.lines();
    let first = match lines.next() {
        Some(l) => l?,
        None => return Err(DatagenError::Parse { line: 1, message: "missing header".into() }),
    };
    let raw: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| DatagenError::Parse { line: 1, message: e.to_string() })?;
    let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != DATASET_FORMAT_VERSION {
        return Err(DatagenError::Version { found, expected: DATASET_FORMAT_VERSION });
    }
    let header: DatasetHeader =
        serde_json::from_value(raw).map_err(|e| DatagenError::Parse { line: 1, message: e.to_string() })?;

    let mut trajectories = Vec::with_capacity(header.n_trajectories);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory =
            serde_json::from_str(&line).map_err(|e| DatagenError::Parse { line: line_no, message: e.to_string() })?;
        t.check().map_err(|message| DatagenError::Parse { line: line_no, message })?;
        if !header.policy_ids.contains(&t.policy_id) {
            return Err(DatagenError::Parse {
                line: line_no,
                message: format!("policy id {} is not registered in the header", t.policy_id),
            });
        }
        trajectories.push(t);
    }
    if trajectories.len() != header.n_trajectories {
        return Err(DatagenError::Truncated { expected: header.n_trajectories, found: trajectories.len() });
    }
    let ds = OfflineDataset {
        tier: header.tier,
        env_fingerprint: header.env_fingerprint,
        policy_ids: header.policy_ids,
        horizon: header.horizon,
        return_discount: header.return_discount,
        trajectories,
        stats: header.stats,
        provenance: Provenance { config_hash: header.config_hash, seed: header.seed },
    };
    if ds.recompute_stats() != ds.stats {
        return Err(DatagenError::StatsMismatch);
    }
    Ok(ds)
}
