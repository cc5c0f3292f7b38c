//! Experiment configuration, environment generation and the file-based
//! pipeline stages driven by the `exoplan` binary.

use std::collections::BTreeMap;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::datagen::{
    self, action_entropy, collect, make_behavior_policies, DatagenError, OfflineDataset, Provenance, Tier,
};
use crate::exbmdp::{ExBmdpSpec, ExbmdpError, LatentState, PolicyTable, TransitionTable};
use crate::io::{sha256_hex, write_atomic};
use crate::penalize::{
    build_penalized, distractor_swap_eval, plan, uncertainty_table, Estimator, LearnedPolicy, NormalizationRange,
    PenalizeError, PenalizedMdp,
};
use crate::rng::{derive_seed, dirichlet_ones, stream};
use crate::sepmodel::{
    discover_partition, fit_joint_model, fit_separated_model, EnsembleModel, Factor, FactorDecoder, FitConfig,
    Partition, PartitionReport, SamplingMode, SamplingSchedule, SepModelError,
};
use crate::theory::{run_suite, CheckKind, MixtureScoring, SuiteConfig, SuiteOutcome, TheoryError};

pub const CONFIG_FORMAT_VERSION: u32 = 1;
pub const ARTIFACT_FORMAT_VERSION: u32 = 1;
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Epochs shown in the action-entropy series.
pub const ENTROPY_EPOCHS: usize = 30;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing artifact {}: run `{stage}` first", path.display())]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("unreadable artifact {}: {message}", path.display())]
    Artifact { path: PathBuf, message: String },
    #[error("fingerprint mismatch for {artifact}: expected {expected}, found {found}")]
    Fingerprint { artifact: String, expected: String, found: String },
    #[error("{failed} of {total} checks failed")]
    ChecksFailed { failed: usize, total: usize },
    #[error(transparent)]
    Env(#[from] ExbmdpError),
    #[error(transparent)]
    Data(#[from] DatagenError),
    #[error(transparent)]
    Model(#[from] SepModelError),
    #[error(transparent)]
    Penalize(#[from] PenalizeError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// 1 check failure, 2 usage error, 3 artifact or fingerprint error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::MissingArtifact { .. } | HarnessError::Artifact { .. } | HarnessError::Fingerprint { .. } => 3,
            HarnessError::Data(
                DatagenError::Fingerprint { .. }
                | DatagenError::Version { .. }
                | DatagenError::Truncated { .. }
                | DatagenError::Parse { .. }
                | DatagenError::StatsMismatch,
            ) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftProfile {
    Static,
    SlowCycle,
    FastRandomWalk,
}

impl std::str::FromStr for DriftProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(DriftProfile::Static),
            "slow_cycle" => Ok(DriftProfile::SlowCycle),
            "fast_random_walk" => Ok(DriftProfile::FastRandomWalk),
            other => Err(format!("unknown drift profile '{other}' (expected static, slow_cycle or fast_random_walk)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Separated,
    Joint,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Separated => "separated",
            ModelKind::Joint => "joint",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "separated" => Ok(ModelKind::Separated),
            "joint" => Ok(ModelKind::Joint),
            other => Err(format!("unknown model kind '{other}' (expected separated or joint)")),
        }
    }
}

fn mode_str(mode: SamplingMode) -> &'static str {
    match mode {
        SamplingMode::Conservative => "conservative",
        SamplingMode::Random => "random",
    }
}

fn estimator_str(e: Estimator) -> &'static str {
    match e {
        Estimator::Md => "md",
        Estimator::Vlp => "vlp",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub tiers: Vec<Tier>,
    pub schedules: Vec<SamplingMode>,
    pub models: Vec<ModelKind>,
    pub estimators: Vec<Estimator>,
    pub lambdas: Vec<f64>,
    pub seeds: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            tiers: vec![Tier::Random],
            schedules: vec![SamplingMode::Conservative, SamplingMode::Random],
            models: vec![ModelKind::Separated, ModelKind::Joint],
            estimators: vec![Estimator::Md],
            lambdas: vec![1.0],
            seeds: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub checks: Vec<CheckKind>,
    pub instances: usize,
    pub scoring: MixtureScoring,
    pub inject_violation: bool,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            checks: CheckKind::ALL.to_vec(),
            instances: 100,
            scoring: MixtureScoring::BatchUnion,
            inject_violation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for data collection, sampling schedules and model fitting.
    pub seed: u64,
    pub env_seed: u64,
    pub n_endo: usize,
    pub n_exo: usize,
    pub n_act: usize,
    pub drift: DriftProfile,
    /// Probability mass each action puts on its intended successor.
    pub action_strength: f64,
    pub gamma: f64,
    pub tier: Tier,
    pub n_traj: usize,
    pub horizon: usize,
    pub trajs_per_random_policy: usize,
    pub replay_snapshots: usize,
    pub schedule: SamplingMode,
    pub windows: usize,
    pub window_len: usize,
    /// Partition-discovery epochs; `None` means one per trajectory.
    pub epochs: Option<usize>,
    pub model: ModelKind,
    pub members: usize,
    pub alpha: f64,
    pub bootstrap: bool,
    pub lambda: f64,
    pub estimator: Estimator,
    pub plan_tol: f64,
    pub grid: GridConfig,
    pub theory: TheoryConfig,
    /// Not part of the config hash.
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            env_seed: 0,
            n_endo: 6,
            n_exo: 6,
            n_act: 3,
            drift: DriftProfile::SlowCycle,
            action_strength: 0.8,
            gamma: 0.9,
            tier: Tier::Random,
            n_traj: 40,
            horizon: 100,
            trajs_per_random_policy: 1,
            replay_snapshots: 5,
            schedule: SamplingMode::Conservative,
            windows: 8,
            window_len: 25,
            epochs: None,
            model: ModelKind::Separated,
            members: 5,
            alpha: 0.1,
            bootstrap: true,
            lambda: 1.0,
            estimator: Estimator::Md,
            plan_tol: 1e-10,
            grid: GridConfig::default(),
            theory: TheoryConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        for (name, v, lo, hi) in [
            ("n_endo", self.n_endo, 1, 64),
            ("n_exo", self.n_exo, 1, 64),
            ("n_act", self.n_act, 1, 8),
            ("n_traj", self.n_traj, 1, 100_000),
            ("horizon", self.horizon, 2, 100_000),
            ("trajs_per_random_policy", self.trajs_per_random_policy, 1, 100_000),
            ("replay_snapshots", self.replay_snapshots, 1, 1000),
            ("windows", self.windows, 1, 10_000),
            ("window_len", self.window_len, 2, 100_000),
            ("members", self.members, 1, 256),
        ] {
            if !(lo..=hi).contains(&v) {
                return bad(format!("{name} must lie in [{lo}, {hi}], got {v}"));
            }
        }
        if self.epochs == Some(0) {
            return bad("epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.action_strength) {
            return bad(format!("action_strength must lie in [0, 1], got {}", self.action_strength));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.plan_tol > 0.0) {
            return bad(format!("plan_tol must be positive, got {}", self.plan_tol));
        }
        if self.drift == DriftProfile::FastRandomWalk && self.n_exo < 2 {
            return bad("fast_random_walk needs n_exo >= 2".into());
        }
        if self.grid.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("grid lambdas must be finite and >= 0".into());
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(self.n_traj)
    }

    /// SHA-256 of the canonical JSON form with `out_dir` cleared.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let mut v = serde_json::to_value(&c).expect("config serializes");
        v["format_version"] = CONFIG_FORMAT_VERSION.into();
        sha256_hex(serde_json::to_string(&v).expect("config serializes").as_bytes())
    }

    pub fn provenance(&self) -> Provenance {
        Provenance { config_hash: self.config_hash(), seed: self.seed }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig { members: self.members, alpha: self.alpha, bootstrap: self.bootstrap }
    }

    pub fn schedule_for(&self, mode: SamplingMode) -> SamplingSchedule {
        SamplingSchedule::new(mode, self.windows, self.window_len)
    }

    /// Builds a config from defaults, then a JSON document, then `overrides` (later wins).
    pub fn layered(file: Option<&Value>, overrides: &[(String, Value)]) -> Result<ExperimentConfig, HarnessError> {
        let mut v = serde_json::to_value(ExperimentConfig::default()).expect("config serializes");
        if let Some(file) = file {
            let Value::Object(map) = file else {
                return Err(HarnessError::Config("config file must hold a JSON object".into()));
            };
            for (k, x) in map {
                if k == "format_version" {
                    continue;
                }
                merge(&mut v, k, x.clone());
            }
        }
        for (k, x) in overrides {
            let mut cursor = &mut v;
            let parts: Vec<&str> = k.split('.').collect();
            for p in &parts[..parts.len() - 1] {
                cursor = &mut cursor[*p];
            }
            merge(cursor, parts[parts.len() - 1], x.clone());
        }
        let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn paths(&self) -> RunPaths {
        RunPaths::new(&self.out_dir)
    }
}

fn merge(target: &mut Value, key: &str, value: Value) {
    match (target.get_mut(key), value) {
        (Some(existing @ Value::Object(_)), Value::Object(map)) => {
            for (k, x) in map {
                merge(existing, &k, x);
            }
        }
        (_, value) => target[key] = value,
    }
}

#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        RunPaths { root: root.to_path_buf() }
    }
    pub fn env(&self) -> PathBuf {
        self.root.join("env.json")
    }
    pub fn decoder(&self) -> PathBuf {
        self.root.join("decoder.json")
    }
    pub fn dataset(&self, tier: Tier) -> PathBuf {
        self.root.join("datasets").join(format!("{}.jsonl", tier.as_str()))
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }
    pub fn train_summary(&self) -> PathBuf {
        self.root.join("train_summary.json")
    }
    pub fn penalized(&self) -> PathBuf {
        self.root.join("penalized.json")
    }
    pub fn policy(&self) -> PathBuf {
        self.root.join("policy.json")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }
    pub fn ablation_csv(&self) -> PathBuf {
        self.root.join("ablation.csv")
    }
    pub fn theory_dir(&self) -> PathBuf {
        self.root.join("theory")
    }
}

fn exo_chain(profile: DriftProfile, n: usize) -> TransitionTable {
    let mut t = TransitionTable::from_fn(n, 1, |_, _, _| 0.0);
    for x in 0..n {
        let row = t.row_mut(x, 0);
        match profile {
            DriftProfile::Static => row[x] = 1.0,
            DriftProfile::SlowCycle => {
                row[x] += 0.9;
                row[(x + 1) % n] += 0.1;
            }
            DriftProfile::FastRandomWalk => {
                row[(x + n - 1) % n] += 0.4;
                row[x] += 0.2;
                row[(x + 1) % n] += 0.4;
            }
        }
    }
    t
}

/// Intended successor on a ring: action 0 stays, then +1, -1, +2, -2, ...
fn ring_target(s: usize, a: usize, n: usize) -> usize {
    let step = a.div_ceil(2) % n;
    if a % 2 == 1 {
        (s + step) % n
    } else {
        (s + n - step) % n
    }
}

/// Random EX-BMDP with a goal-reaching endogenous part, the configured
/// exogenous drift and a randomly permuted emission.
pub fn generate_env(cfg: &ExperimentConfig) -> Result<ExBmdpSpec, HarnessError> {
    cfg.validate()?;
    let (ne, nx, na) = (cfg.n_endo, cfg.n_exo, cfg.n_act);
    let mut rng = stream(cfg.env_seed, 0);
    let mut rows = Vec::with_capacity(ne * na);
    for s in 0..ne {
        for a in 0..na {
            let noise = dirichlet_ones(ne, &mut rng);
            let mut row: Vec<f64> = noise.iter().map(|p| (1.0 - cfg.action_strength) * p).collect();
            row[ring_target(s, a, ne)] += cfg.action_strength;
            rows.push(row);
        }
    }
    let goal = rng.random_range(0..ne);
    let reward: Vec<f64> = (0..ne * na)
        .map(|i| {
            let bonus = if i / na == goal { 0.9 } else { 0.0 };
            bonus + 0.1 * rng.random::<f64>()
        })
        .collect();
    let mut emission: Vec<usize> = (0..ne * nx).collect();
    emission.shuffle(&mut rng);
    let spec = ExBmdpSpec {
        n_endo: ne,
        n_exo: nx,
        n_act: na,
        endo_trans: TransitionTable::from_rows(ne, na, &rows),
        exo_trans: exo_chain(cfg.drift, nx),
        reward,
        emission,
        init_endo: vec![1.0 / ne as f64; ne],
        init_exo: vec![1.0 / nx as f64; nx],
        discount: cfg.gamma,
    };
    let report = spec.validate();
    if !report.is_valid() {
        return Err(HarnessError::Config(format!("generated spec is invalid: {:?}", report.violations)));
    }
    Ok(spec)
}

/// Whether the decoder lists the exogenous factor first; fixed by the environment seed.
pub fn decoder_swapped(env_seed: u64) -> bool {
    derive_seed(env_seed, 1) & 1 == 1
}

pub fn true_partition(swapped: bool) -> Partition {
    Partition { endo: if swapped { Factor::Second } else { Factor::First } }
}

const TIER_STREAM: u64 = 10;
const POLICY_STREAM: u64 = 20;
const ENTROPY_STREAM: u64 = 30;
const DISCOVERY_STREAM: u64 = 40;
const FIT_STREAM: u64 = 50;
const SWAP_STREAM: u64 = 60;

fn tier_index(tier: Tier) -> u64 {
    Tier::ALL.iter().position(|t| *t == tier).unwrap_or(0) as u64
}

pub fn behavior_count(cfg: &ExperimentConfig, tier: Tier) -> usize {
    match tier {
        Tier::Random => cfg.n_traj.div_ceil(cfg.trajs_per_random_policy),
        Tier::MediumReplay => cfg.replay_snapshots,
        Tier::Medium => 1,
    }
}

pub fn collect_tier(cfg: &ExperimentConfig, spec: &ExBmdpSpec, tier: Tier) -> Result<OfflineDataset, HarnessError> {
    let mut rng = stream(cfg.seed, POLICY_STREAM + tier_index(tier));
    let policies = make_behavior_policies(spec, tier, behavior_count(cfg, tier), &mut rng)?;
    let mut ds = collect(spec, &policies, cfg.n_traj, cfg.horizon, derive_seed(cfg.seed, TIER_STREAM + tier_index(tier)))?;
    ds.provenance = cfg.provenance();
    Ok(ds)
}

pub fn collect_all(cfg: &ExperimentConfig, spec: &ExBmdpSpec) -> Result<BTreeMap<Tier, OfflineDataset>, HarnessError> {
    Tier::ALL
        .par_iter()
        .map(|&t| Ok((t, collect_tier(cfg, spec, t)?)))
        .collect::<Result<Vec<_>, HarnessError>>()
        .map(|v| v.into_iter().collect())
}

/// Mean uncertainty over cells visited in the full dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub endo_md: Option<f64>,
    pub joint_md: f64,
    pub endo_vlp: Option<f64>,
    pub joint_vlp: f64,
}

pub fn model_uncertainty(model: &EnsembleModel, estimator: Estimator) -> f64 {
    uncertainty_table(model, estimator).mean_over_visited(&model.visits)
}

/// Everything the training stage learns from data alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: ModelKind,
    pub schedule: SamplingMode,
    pub partition: PartitionReport,
    pub entropy_conservative: Vec<f64>,
    pub entropy_random: Vec<f64>,
    pub uncertainty: UncertaintySummary,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: EnsembleModel,
    pub summary: TrainSummary,
}

/// Action entropy of the first `min(n, ENTROPY_EPOCHS)` batches of a schedule.
pub fn entropy_series(cfg: &ExperimentConfig, ds: &OfflineDataset, mode: SamplingMode) -> Result<Vec<f64>, HarnessError> {
    let epochs = ds.trajectories.len().min(ENTROPY_EPOCHS);
    let mut schedule = cfg.schedule_for(mode);
    let mut rng = stream(cfg.seed, ENTROPY_STREAM + (mode == SamplingMode::Random) as u64);
    (0..epochs)
        .map(|_| Ok(action_entropy(&schedule.next_batch(ds, &mut rng))?))
        .collect()
}

/// Partition discovery, model fit and the data-only diagnostics.
///
/// Takes the dataset and the factor decoder only; the ground-truth spec is not available here.
pub fn train(cfg: &ExperimentConfig, ds: &OfflineDataset, decoder: &FactorDecoder) -> Result<TrainOutput, HarnessError> {
    if ds.env_fingerprint != decoder.env_fingerprint {
        return Err(HarnessError::Fingerprint {
            artifact: "dataset".into(),
            expected: decoder.env_fingerprint.clone(),
            found: ds.env_fingerprint.clone(),
        });
    }
    let mut rng = stream(cfg.seed, DISCOVERY_STREAM);
    let partition =
        discover_partition(ds, decoder, &cfg.schedule_for(cfg.schedule), cfg.alpha, cfg.epochs(), &mut rng)?;
    let fit_seed = derive_seed(cfg.seed, FIT_STREAM);
    let fit = cfg.fit_config();
    let joint = fit_joint_model(ds, decoder, fit, fit_seed)?;
    let separated = match partition.partition() {
        Ok(p) => Some(fit_separated_model(ds, decoder, p, fit, fit_seed)?),
        Err(_) => None,
    };
    let uncertainty = UncertaintySummary {
        endo_md: separated.as_ref().map(|m| model_uncertainty(m, Estimator::Md)),
        joint_md: model_uncertainty(&joint, Estimator::Md),
        endo_vlp: separated.as_ref().map(|m| model_uncertainty(m, Estimator::Vlp)),
        joint_vlp: model_uncertainty(&joint, Estimator::Vlp),
    };
    let model = match cfg.model {
        ModelKind::Joint => joint,
        ModelKind::Separated => separated.ok_or(SepModelError::DegeneratePartition)?,
    };
    let summary = TrainSummary {
        model: cfg.model,
        schedule: cfg.schedule,
        partition,
        entropy_conservative: entropy_series(cfg, ds, SamplingMode::Conservative)?,
        entropy_random: entropy_series(cfg, ds, SamplingMode::Random)?,
        uncertainty,
    };
    let mut model = model;
    model.provenance = cfg.provenance();
    Ok(TrainOutput { model, summary })
}

/// Penalized planning on a fitted model; the ground-truth spec is not available here.
pub fn plan_policy(cfg: &ExperimentConfig, model: &EnsembleModel) -> Result<(PenalizedMdp, LearnedPolicy), HarnessError> {
    let pm = build_penalized(model, cfg.estimator, cfg.lambda, cfg.gamma)?;
    let planned = plan(&pm, cfg.plan_tol)?;
    let mut policy = LearnedPolicy::from_plan(model, &planned, cfg.estimator, cfg.lambda);
    policy.provenance = cfg.provenance();
    Ok((pm, policy))
}

/// A replacement exogenous chain with one more state than the original.
pub fn replacement_exo_chain(n_exo: usize, seed: u64) -> (TransitionTable, Vec<f64>) {
    let mut rng = stream(seed, SWAP_STREAM);
    let n = n_exo + 1;
    let rows: Vec<Vec<f64>> = (0..n).map(|_| dirichlet_ones(n, &mut rng)).collect();
    (TransitionTable::from_rows(n, 1, &rows), dirichlet_ones(n, &mut rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub env_seed: u64,
    pub tier: Tier,
    pub model: ModelKind,
    pub schedule: SamplingMode,
    pub estimator: Estimator,
    pub lambda: f64,
    pub exact_return: f64,
    pub normalized_return: f64,
    pub normalization: NormalizationRange,
    pub optimal_return: f64,
    pub partition_recovered: Option<bool>,
    pub entropy_conservative: Vec<f64>,
    pub entropy_random: Vec<f64>,
    pub uncertainty: UncertaintySummary,
    /// `|return before - return after|` under a replaced exogenous chain, for
    /// policies that read only the endogenous state.
    pub distractor_gap: Option<f64>,
    pub policy_reads_exo: bool,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    spec: &ExBmdpSpec,
    decoder: &FactorDecoder,
    policy: &LearnedPolicy,
    summary: &TrainSummary,
    datasets: &BTreeMap<Tier, OfflineDataset>,
) -> Result<RunReport, HarnessError> {
    let fp = spec.fingerprint();
    for (artifact, found) in [("policy", &policy.env_fingerprint), ("decoder", &decoder.env_fingerprint)] {
        if *found != fp {
            return Err(HarnessError::Fingerprint { artifact: artifact.into(), expected: fp, found: found.clone() });
        }
    }
    let range = NormalizationRange::from_datasets(datasets.values());
    let exact_return = policy.exact_return(spec, decoder)?;
    let normalized_return = range.normalize(exact_return)?;
    let optimal_return = spec.exact_return(&spec.endo_mdp().optimal_policy().map_err(ExbmdpError::from)?)?;
    let truth = true_partition(*decoder != FactorDecoder::from_spec(spec, false));
    let partition_recovered = summary.partition.partition().ok().map(|p| p == truth);
    let endo_policy = policy.endo_policy(spec, decoder)?;
    let distractor_gap = match &endo_policy {
        Some(endo) => {
            let (exo, init) = replacement_exo_chain(spec.n_exo, cfg.seed);
            let (before, after) = distractor_swap_eval(spec, endo, exo, init)?;
            Some((before - after).abs())
        }
        None => None,
    };
    Ok(RunReport {
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        env_seed: cfg.env_seed,
        tier: cfg.tier,
        model: cfg.model,
        schedule: cfg.schedule,
        estimator: cfg.estimator,
        lambda: cfg.lambda,
        exact_return,
        normalized_return,
        normalization: range,
        optimal_return,
        partition_recovered,
        entropy_conservative: summary.entropy_conservative.clone(),
        entropy_random: summary.entropy_random.clone(),
        uncertainty: summary.uncertainty,
        distractor_gap,
        policy_reads_exo: endo_policy.is_none(),
    })
}

/// The whole pipeline in memory.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let spec = generate_env(cfg)?;
    let decoder = FactorDecoder::from_spec(&spec, decoder_swapped(cfg.env_seed));
    let datasets = collect_all(cfg, &spec)?;
    let trained = train(cfg, &datasets[&cfg.tier], &decoder)?;
    let (_, policy) = plan_policy(cfg, &trained.model)?;
    evaluate(cfg, &spec, &decoder, &policy, &trained.summary, &datasets)
}

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn fmt_flag(x: Option<bool>) -> String {
    x.map(|b| (b as u8).to_string()).unwrap_or_default()
}

pub const RUN_CSV_COLUMNS: [&str; 20] = [
    "schema_version",
    "config_hash",
    "seed",
    "env_seed",
    "tier",
    "model",
    "schedule",
    "estimator",
    "lambda",
    "return",
    "normalized",
    "partition_recovered",
    "entropy_conservative",
    "entropy_random",
    "u_endo_md",
    "u_joint_md",
    "u_endo_vlp",
    "u_joint_vlp",
    "distractor_gap",
    "policy_reads_exo",
];

impl RunReport {
    fn csv_fields(&self) -> Vec<String> {
        vec![
            CSV_SCHEMA_VERSION.to_string(),
            self.config_hash.clone(),
            self.seed.to_string(),
            self.env_seed.to_string(),
            self.tier.to_string(),
            self.model.as_str().into(),
            mode_str(self.schedule).into(),
            estimator_str(self.estimator).into(),
            fmt_f64(self.lambda),
            fmt_f64(self.exact_return),
            fmt_f64(self.normalized_return),
            fmt_flag(self.partition_recovered),
            fmt_f64(mean(&self.entropy_conservative)),
            fmt_f64(mean(&self.entropy_random)),
            fmt_opt(self.uncertainty.endo_md),
            fmt_f64(self.uncertainty.joint_md),
            fmt_opt(self.uncertainty.endo_vlp),
            fmt_f64(self.uncertainty.joint_vlp),
            fmt_opt(self.distractor_gap),
            (self.policy_reads_exo as u8).to_string(),
        ]
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", RUN_CSV_COLUMNS.join(","), self.csv_fields().join(","))
    }
}

fn with_provenance(value: Value, cfg: &ExperimentConfig) -> String {
    let mut doc = json!({
        "format_version": ARTIFACT_FORMAT_VERSION,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
    });
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                doc[k.as_str()] = v;
            }
        }
        other => doc["data"] = other,
    }
    serde_json::to_string_pretty(&doc).expect("json serializes") + "\n"
}

fn write_doc(path: &Path, value: Value, cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    write_atomic(path, with_provenance(value, cfg).as_bytes())?;
    Ok(())
}

fn read_text(path: &Path, stage: &'static str) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => HarnessError::MissingArtifact { path: path.to_path_buf(), stage },
        _ => HarnessError::Artifact { path: path.to_path_buf(), message: e.to_string() },
    })
}

fn artifact_err(path: &Path) -> impl Fn(String) -> HarnessError + '_ {
    move |message| HarnessError::Artifact { path: path.to_path_buf(), message }
}

fn read_doc<T: serde::de::DeserializeOwned>(path: &Path, stage: &'static str) -> Result<T, HarnessError> {
    let text = read_text(path, stage)?;
    let v: Value = serde_json::from_str(&text).map_err(|e| artifact_err(path)(e.to_string()))?;
    let found = v.get("format_version").and_then(Value::as_u64).unwrap_or(0);
    if found != ARTIFACT_FORMAT_VERSION as u64 {
        return Err(artifact_err(path)(format!(
            "format version {found} is not supported (expected {ARTIFACT_FORMAT_VERSION})"
        )));
    }
    serde_json::from_value(v).map_err(|e| artifact_err(path)(e.to_string()))
}

pub fn load_env(paths: &RunPaths) -> Result<ExBmdpSpec, HarnessError> {
    let path = paths.env();
    ExBmdpSpec::from_json(&read_text(&path, "generate-env")?).map_err(|e| artifact_err(&path)(e.to_string()))
}

fn load_decoder(paths: &RunPaths) -> Result<FactorDecoder, HarnessError> {
    let path = paths.decoder();
    FactorDecoder::from_json(&read_text(&path, "collect")?).map_err(|e| artifact_err(&path)(e.to_string()))
}

fn load_tier(paths: &RunPaths, tier: Tier, spec: Option<&ExBmdpSpec>) -> Result<OfflineDataset, HarnessError> {
    let path = paths.dataset(tier);
    read_text(&path, "collect")?;
    Ok(match spec {
        Some(spec) => datagen::load_dataset_for(&path, spec)?,
        None => datagen::load_dataset(&path)?,
    })
}

#[derive(Deserialize)]
struct SummaryDoc {
    summary: TrainSummary,
}

pub fn stage_generate_env(cfg: &ExperimentConfig) -> Result<ExBmdpSpec, HarnessError> {
    let spec = generate_env(cfg)?;
    let mut v: Value = serde_json::from_str(&spec.to_json()).expect("spec json parses");
    v["config_hash"] = cfg.config_hash().into();
    v["seed"] = cfg.seed.into();
    v["env_seed"] = cfg.env_seed.into();
    write_atomic(&cfg.paths().env(), (serde_json::to_string_pretty(&v).expect("json serializes") + "\n").as_bytes())?;
    Ok(spec)
}

/// Collects all three tiers and writes the factor decoder the learner will use.
pub fn stage_collect(cfg: &ExperimentConfig) -> Result<BTreeMap<Tier, OfflineDataset>, HarnessError> {
    let paths = cfg.paths();
    let spec = load_env(&paths)?;
    let decoder = FactorDecoder::from_spec(&spec, decoder_swapped(cfg.env_seed));
    let datasets = collect_all(cfg, &spec)?;
    for (tier, ds) in &datasets {
        datagen::save_dataset(ds, &paths.dataset(*tier))?;
    }
    let dv: Value = serde_json::from_str(&decoder.to_json()).expect("decoder json parses");
    let mut dv = dv;
    dv["config_hash"] = cfg.config_hash().into();
    dv["seed"] = cfg.seed.into();
    write_atomic(&paths.decoder(), (serde_json::to_string_pretty(&dv).expect("json serializes") + "\n").as_bytes())?;
    Ok(datasets)
}

pub fn stage_train(cfg: &ExperimentConfig) -> Result<TrainOutput, HarnessError> {
    let paths = cfg.paths();
    let decoder = load_decoder(&paths)?;
    let ds = load_tier(&paths, cfg.tier, None)?;
    let out = train(cfg, &ds, &decoder)?;
    out.model.save(&paths.model())?;
    write_doc(&paths.train_summary(), json!({ "summary": out.summary }), cfg)?;
    Ok(out)
}

pub fn stage_plan(cfg: &ExperimentConfig) -> Result<LearnedPolicy, HarnessError> {
    let paths = cfg.paths();
    let path = paths.model();
    read_text(&path, "train-model")?;
    let model = EnsembleModel::load(&path).map_err(|e| artifact_err(&path)(e.to_string()))?;
    let (pm, policy) = plan_policy(cfg, &model)?;
    write_doc(&paths.penalized(), json!({ "penalized": pm }), cfg)?;
    policy.save(&paths.policy())?;
    Ok(policy)
}

pub fn stage_evaluate(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let paths = cfg.paths();
    let spec = load_env(&paths)?;
    let decoder = load_decoder(&paths)?;
    let policy_path = paths.policy();
    read_text(&policy_path, "plan")?;
    let policy = LearnedPolicy::load(&policy_path).map_err(|e| artifact_err(&policy_path)(e.to_string()))?;
    let summary: SummaryDoc = read_doc(&paths.train_summary(), "train-model")?;
    let datasets = Tier::ALL
        .iter()
        .map(|&t| Ok((t, load_tier(&paths, t, Some(&spec))?)))
        .collect::<Result<BTreeMap<_, _>, HarnessError>>()?;
    let report = evaluate(cfg, &spec, &decoder, &policy, &summary.summary, &datasets)?;
    write_doc(&paths.report_json(), json!({ "report": report }), cfg)?;
    write_atomic(&paths.report_csv(), report.to_csv().as_bytes())?;
    Ok(report)
}

/// One ablation grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub tier: Tier,
    pub schedule: SamplingMode,
    pub model: ModelKind,
    pub estimator: Estimator,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub cell: GridCell,
    pub seed_index: usize,
    pub result: Result<RunReport, String>,
}

pub fn grid_cells(grid: &GridConfig) -> Vec<GridCell> {
    let mut cells = Vec::new();
    for &tier in &grid.tiers {
        for &schedule in &grid.schedules {
            for &model in &grid.models {
                for &estimator in &grid.estimators {
                    for &lambda in &grid.lambdas {
                        cells.push(GridCell { tier, schedule, model, estimator, lambda });
                    }
                }
            }
        }
    }
    cells
}

/// Per-seed config: the environment and data seeds are shared by every cell.
pub fn seed_config(base: &ExperimentConfig, seed_index: usize) -> ExperimentConfig {
    ExperimentConfig {
        seed: derive_seed(base.seed, seed_index as u64),
        env_seed: derive_seed(base.env_seed, seed_index as u64),
        ..base.clone()
    }
}

fn run_cell(base: &ExperimentConfig, spec: &ExBmdpSpec, datasets: &BTreeMap<Tier, OfflineDataset>, cell: GridCell) -> Result<RunReport, HarnessError> {
    let cfg = ExperimentConfig {
        tier: cell.tier,
        schedule: cell.schedule,
        model: cell.model,
        estimator: cell.estimator,
        lambda: cell.lambda,
        ..base.clone()
    };
    let decoder = FactorDecoder::from_spec(spec, decoder_swapped(cfg.env_seed));
    let trained = train(&cfg, &datasets[&cfg.tier], &decoder)?;
    let (_, policy) = plan_policy(&cfg, &trained.model)?;
    evaluate(&cfg, spec, &decoder, &policy, &trained.summary, datasets)
}

pub fn run_grid(cfg: &ExperimentConfig) -> Result<Vec<GridRow>, HarnessError> {
    let cells = grid_cells(&cfg.grid);
    if cells.is_empty() || cfg.grid.seeds == 0 {
        return Err(HarnessError::Config("ablation grid is empty".into()));
    }
    let per_seed: Vec<Vec<GridRow>> = (0..cfg.grid.seeds)
        .into_par_iter()
        .map(|i| {
            let scfg = seed_config(cfg, i);
            let prepared = generate_env(&scfg).and_then(|spec| Ok((collect_all(&scfg, &spec)?, spec)));
            cells
                .par_iter()
                .map(|&cell| GridRow {
                    cell,
                    seed_index: i,
                    result: match &prepared {
                        Ok((datasets, spec)) => run_cell(&scfg, spec, datasets, cell).map_err(|e| e.to_string()),
                        Err(e) => Err(e.to_string()),
                    },
                })
                .collect()
        })
        .collect();
    let mut rows: Vec<GridRow> = per_seed.into_iter().flatten().collect();
    let order = |c: &GridCell| cells.iter().position(|x| x == c).unwrap_or(usize::MAX);
    rows.sort_by_key(|r| (order(&r.cell), r.seed_index));
    Ok(rows)
}

pub const ABLATION_CSV_COLUMNS: [&str; 20] = [
    "schema_version",
    "row_type",
    "tier",
    "schedule",
    "model",
    "estimator",
    "lambda",
    "seed_index",
    "return",
    "normalized",
    "partition_recovered",
    "entropy_conservative",
    "entropy_random",
    "u_endo_md",
    "u_joint_md",
    "u_endo_vlp",
    "u_joint_vlp",
    "distractor_gap",
    "n_ok",
    "error",
];

fn row_metrics(r: &RunReport) -> [Option<f64>; 10] {
    [
        Some(r.exact_return),
        Some(r.normalized_return),
        r.partition_recovered.map(|b| b as u8 as f64),
        Some(mean(&r.entropy_conservative)),
        Some(mean(&r.entropy_random)),
        r.uncertainty.endo_md,
        Some(r.uncertainty.joint_md),
        r.uncertainty.endo_vlp,
        Some(r.uncertainty.joint_vlp),
        r.distractor_gap,
    ]
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Data rows in grid order, then `mean` and `std` rows per cell over successful seeds.
pub fn ablation_csv(rows: &[GridRow]) -> String {
    let mut out = ABLATION_CSV_COLUMNS.join(",") + "\n";
    let cell_cols = |c: &GridCell| {
        vec![
            c.tier.to_string(),
            mode_str(c.schedule).to_string(),
            c.model.as_str().to_string(),
            estimator_str(c.estimator).to_string(),
            fmt_f64(c.lambda),
        ]
    };
    for r in rows {
        let mut f = vec![CSV_SCHEMA_VERSION.to_string(), "data".into()];
        f.extend(cell_cols(&r.cell));
        f.push(r.seed_index.to_string());
        match &r.result {
            Ok(rep) => {
                f.extend(row_metrics(rep).iter().map(|m| fmt_opt(*m)));
                f.push("1".into());
                f.push(String::new());
            }
            Err(e) => {
                f.extend(std::iter::repeat_n(String::new(), 10));
                f.push("0".into());
                f.push(csv_escape(e));
            }
        }
        out += &(f.join(",") + "\n");
    }
    let mut seen: Vec<GridCell> = Vec::new();
    for r in rows {
        if !seen.contains(&r.cell) {
            seen.push(r.cell);
        }
    }
    for cell in seen {
        let ok: Vec<[Option<f64>; 10]> = rows
            .iter()
            .filter(|r| r.cell == cell)
            .filter_map(|r| r.result.as_ref().ok().map(row_metrics))
            .collect();
        for kind in ["mean", "std"] {
            let mut f = vec![CSV_SCHEMA_VERSION.to_string(), kind.into()];
            f.extend(cell_cols(&cell));
            f.push(String::new());
            for j in 0..10 {
                let xs: Vec<f64> = ok.iter().filter_map(|m| m[j]).collect();
                if xs.is_empty() {
                    f.push(String::new());
                    continue;
                }
                let mu = mean(&xs);
                let v = if kind == "mean" {
                    mu
                } else {
                    (xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / xs.len() as f64).sqrt()
                };
                f.push(fmt_f64(v));
            }
            f.push(ok.len().to_string());
            f.push(String::new());
            out += &(f.join(",") + "\n");
        }
    }
    out
}

pub fn stage_ablate(cfg: &ExperimentConfig) -> Result<Vec<GridRow>, HarnessError> {
    let rows = run_grid(cfg)?;
    write_atomic(&cfg.paths().ablation_csv(), ablation_csv(&rows).as_bytes())?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub check: CheckKind,
    pub instances: usize,
    pub passed: usize,
    pub errors: usize,
    pub pass: bool,
}

pub fn suite_config(cfg: &ExperimentConfig) -> Result<SuiteConfig, HarnessError> {
    if cfg.theory.checks.is_empty() {
        return Err(HarnessError::Config("no theory checks selected".into()));
    }
    if cfg.theory.instances == 0 {
        return Err(HarnessError::Config("theory instances must be at least 1".into()));
    }
    Ok(SuiteConfig {
        checks: cfg.theory.checks.clone(),
        instances: cfg.theory.instances,
        seed: cfg.seed,
        scoring: cfg.theory.scoring,
        inject_violation: cfg.theory.inject_violation,
        ..SuiteConfig::default()
    })
}

pub fn summarize_suite(checks: &[CheckKind], outcomes: &[SuiteOutcome]) -> Vec<CheckSummary> {
    checks
        .iter()
        .map(|&check| {
            let rows: Vec<&SuiteOutcome> = outcomes.iter().filter(|o| o.check == check).collect();
            let passed = rows.iter().filter(|o| o.passed()).count();
            CheckSummary {
                check,
                instances: rows.len(),
                passed,
                errors: rows.iter().filter(|o| o.result.is_err()).count(),
                pass: passed == rows.len(),
            }
        })
        .collect()
}

/// Runs the selected checks, writing one JSON file per check and `summary.json`.
pub fn stage_verify_theory(cfg: &ExperimentConfig) -> Result<Vec<CheckSummary>, HarnessError> {
    let suite = suite_config(cfg)?;
    let outcomes = run_suite(&suite);
    let dir = cfg.paths().theory_dir();
    for &check in &suite.checks {
        let rows: Vec<&SuiteOutcome> = outcomes.iter().filter(|o| o.check == check).collect();
        write_doc(&dir.join(format!("{check}.json")), json!({ "check": check, "outcomes": rows }), cfg)?;
    }
    let summary = summarize_suite(&suite.checks, &outcomes);
    let all_pass = summary.iter().all(|s| s.pass);
    write_doc(&dir.join("summary.json"), json!({ "checks": summary, "pass": all_pass }), cfg)?;
    Ok(summary)
}

/// Exact return of a fixed endogenous policy evaluated through the full latent chain.
pub fn latent_return(spec: &ExBmdpSpec, policy: &PolicyTable) -> Result<f64, HarnessError> {
    Ok(spec.exact_return_latent(|z: LatentState| policy.row(z.endo).to_vec())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drift_profiles() {
        let t = exo_chain(DriftProfile::Static, 4);
        assert_eq!(t, TransitionTable::identity(4));
        let w = exo_chain(DriftProfile::FastRandomWalk, 2);
        for x in 0..2 {
            assert!(w.row(x, 0).iter().filter(|p| **p > 0.0).count() >= 2);
            assert!((w.row(x, 0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn generated_env_is_valid_and_seeded() {
        let cfg = ExperimentConfig::default();
        let a = generate_env(&cfg).unwrap();
        assert!(a.validate().is_valid());
        assert_eq!(a.to_json(), generate_env(&cfg).unwrap().to_json());
        let other = generate_env(&ExperimentConfig { env_seed: 1, ..cfg }).unwrap();
        assert_ne!(a.fingerprint(), other.fingerprint());
    }

    #[test]
    fn layered_config_precedence() {
        let file = json!({ "n_endo": 5, "lambda": 2.0, "grid": { "seeds": 7 } });
        let cfg = ExperimentConfig::layered(Some(&file), &[("lambda".into(), json!(3.0))]).unwrap();
        assert_eq!(cfg.n_endo, 5);
        assert_eq!(cfg.lambda, 3.0);
        assert_eq!(cfg.grid.seeds, 7);
        assert_eq!(cfg.grid.lambdas, vec![1.0]);
        let bad = ExperimentConfig::layered(Some(&json!({ "gamma": 1.0 })), &[]);
        assert!(matches!(bad, Err(HarnessError::Config(_))));
        let unknown = ExperimentConfig::layered(Some(&json!({ "bogus": 1 })), &[]);
        assert!(matches!(unknown, Err(HarnessError::Config(_))));
    }

    #[test]
    fn config_hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { out_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), ExperimentConfig { seed: 1, ..a.clone() }.config_hash());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(HarnessError::Config("x".into()).exit_code(), 2);
        assert_eq!(HarnessError::MissingArtifact { path: "m".into(), stage: "plan" }.exit_code(), 3);
        assert_eq!(HarnessError::ChecksFailed { failed: 1, total: 2 }.exit_code(), 1);
    }
}
