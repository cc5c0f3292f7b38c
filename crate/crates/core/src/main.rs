use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use exoplan_core::datagen::Tier;
use exoplan_core::harness::{
    stage_ablate, stage_collect, stage_evaluate, stage_generate_env, stage_plan, stage_train,
    stage_verify_theory, DriftProfile, ExperimentConfig, HarnessError, ModelKind,
};
use exoplan_core::penalize::Estimator;
use exoplan_core::sepmodel::SamplingMode;
use exoplan_core::theory::{CheckKind, MixtureScoring};

#[derive(Parser)]
#[command(name = "exoplan", version, about = "Separated-model offline planning on tabular exogenous block MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an environment spec (env.json).
    GenerateEnv(ConfigArgs),
    /// Collect the three dataset tiers and the factor decoder.
    Collect(ConfigArgs),
    /// Discover the partition and fit the ensemble model from the configured tier.
    TrainModel(ConfigArgs),
    /// Build the penalized MDP and plan a policy.
    Plan(ConfigArgs),
    /// Evaluate the planned policy in the true environment.
    Evaluate(ConfigArgs),
    /// Run the ablation grid and write ablation.csv.
    Ablate(ConfigArgs),
    /// Run the numerical theory checks.
    VerifyTheory(ConfigArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON file with any subset of the configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    env_seed: Option<u64>,
    #[arg(long)]
    n_endo: Option<usize>,
    #[arg(long)]
    n_exo: Option<usize>,
    #[arg(long)]
    n_act: Option<usize>,
    /// static, slow_cycle or fast_random_walk
    #[arg(long)]
    drift: Option<DriftProfile>,
    #[arg(long)]
    action_strength: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// random, medium_replay or medium
    #[arg(long)]
    tier: Option<Tier>,
    #[arg(long)]
    n_traj: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    trajs_per_random_policy: Option<usize>,
    #[arg(long)]
    replay_snapshots: Option<usize>,
    /// conservative (cs) or random (rs)
    #[arg(long)]
    schedule: Option<SamplingMode>,
    #[arg(long)]
    windows: Option<usize>,
    #[arg(long)]
    window_len: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// separated or joint
    #[arg(long)]
    model: Option<ModelKind>,
    /// Ensemble size K.
    #[arg(long)]
    members: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    bootstrap: Option<bool>,
    #[arg(long)]
    lambda: Option<f64>,
    /// md or vlp
    #[arg(long)]
    estimator: Option<Estimator>,
    #[arg(long)]
    plan_tol: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    grid_tiers: Option<Vec<Tier>>,
    #[arg(long, value_delimiter = ',')]
    grid_schedules: Option<Vec<SamplingMode>>,
    #[arg(long, value_delimiter = ',')]
    grid_models: Option<Vec<ModelKind>>,
    #[arg(long, value_delimiter = ',')]
    grid_estimators: Option<Vec<Estimator>>,
    #[arg(long, value_delimiter = ',')]
    grid_lambdas: Option<Vec<f64>>,
    #[arg(long)]
    grid_seeds: Option<usize>,
    /// Comma-separated subset of telescoping, performance_bound, sampling_likelihood, mixture_mi.
    #[arg(long, value_delimiter = ',')]
    checks: Option<Vec<CheckKind>>,
    #[arg(long)]
    instances: Option<usize>,
    /// batch_union or policy_rollout
    #[arg(long)]
    scoring: Option<MixtureScoring>,
    /// Corrupt the learned model and force a zero penalty in the bound check.
    #[arg(long)]
    inject_violation: bool,
}

fn push<T: serde::Serialize>(out: &mut Vec<(String, Value)>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key.to_string(), serde_json::to_value(v).expect("flag value serializes")));
    }
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut o = Vec::new();
        push(&mut o, "out_dir", &self.out_dir);
        push(&mut o, "seed", &self.seed);
        push(&mut o, "env_seed", &self.env_seed);
        push(&mut o, "n_endo", &self.n_endo);
        push(&mut o, "n_exo", &self.n_exo);
        push(&mut o, "n_act", &self.n_act);
        push(&mut o, "drift", &self.drift);
        push(&mut o, "action_strength", &self.action_strength);
        push(&mut o, "gamma", &self.gamma);
        push(&mut o, "tier", &self.tier);
        push(&mut o, "n_traj", &self.n_traj);
        push(&mut o, "horizon", &self.horizon);
        push(&mut o, "trajs_per_random_policy", &self.trajs_per_random_policy);
        push(&mut o, "replay_snapshots", &self.replay_snapshots);
        push(&mut o, "schedule", &self.schedule);
        push(&mut o, "windows", &self.windows);
        push(&mut o, "window_len", &self.window_len);
        push(&mut o, "epochs", &self.epochs);
        push(&mut o, "model", &self.model);
        push(&mut o, "members", &self.members);
        push(&mut o, "alpha", &self.alpha);
        push(&mut o, "bootstrap", &self.bootstrap);
        push(&mut o, "lambda", &self.lambda);
        push(&mut o, "estimator", &self.estimator);
        push(&mut o, "plan_tol", &self.plan_tol);
        push(&mut o, "grid.tiers", &self.grid_tiers);
        push(&mut o, "grid.schedules", &self.grid_schedules);
        push(&mut o, "grid.models", &self.grid_models);
        push(&mut o, "grid.estimators", &self.grid_estimators);
        push(&mut o, "grid.lambdas", &self.grid_lambdas);
        push(&mut o, "grid.seeds", &self.grid_seeds);
        push(&mut o, "theory.checks", &self.checks);
        push(&mut o, "theory.instances", &self.instances);
        push(&mut o, "theory.scoring", &self.scoring);
        if self.inject_violation {
            o.push(("theory.inject_violation".into(), Value::Bool(true)));
        }
        o
    }

    fn resolve(&self) -> Result<ExperimentConfig, HarnessError> {
        let file = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
                Some(
                    serde_json::from_str::<Value>(&text)
                        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?,
                )
            }
            None => None,
        };
        ExperimentConfig::layered(file.as_ref(), &self.overrides())
    }
}

fn run(command: Command) -> Result<(), HarnessError> {
    let started = Instant::now();
    let (name, args) = match &command {
        Command::GenerateEnv(a) => ("generate-env", a),
        Command::Collect(a) => ("collect", a),
        Command::TrainModel(a) => ("train-model", a),
        Command::Plan(a) => ("plan", a),
        Command::Evaluate(a) => ("evaluate", a),
        Command::Ablate(a) => ("ablate", a),
        Command::VerifyTheory(a) => ("verify-theory", a),
    };
    let cfg = args.resolve()?;
    let paths = cfg.paths();
    match command {
        Command::GenerateEnv(_) => {
            let spec = stage_generate_env(&cfg)?;
            println!("wrote {} (fingerprint {})", paths.env().display(), spec.fingerprint());
        }
        Command::Collect(_) => {
            for (tier, ds) in stage_collect(&cfg)? {
                println!(
                    "wrote {}: {} trajectories, mean return {:.4}",
                    paths.dataset(tier).display(),
                    ds.trajectories.len(),
                    ds.stats.mean
                );
            }
        }
        Command::TrainModel(_) => {
            let out = stage_train(&cfg)?;
            println!(
                "wrote {}: {} model, {} states, K={}",
                paths.model().display(),
                cfg.model.as_str(),
                out.model.n_states,
                out.model.k()
            );
        }
        Command::Plan(_) => {
            stage_plan(&cfg)?;
            println!("wrote {}", paths.policy().display());
        }
        Command::Evaluate(_) => {
            let r = stage_evaluate(&cfg)?;
            println!("return {:.6}, normalized {:.6}", r.exact_return, r.normalized_return);
            println!("wrote {}", paths.report_csv().display());
        }
        Command::Ablate(_) => {
            let rows = stage_ablate(&cfg)?;
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            println!("wrote {}: {} rows, {} failed", paths.ablation_csv().display(), rows.len(), failed);
        }
        Command::VerifyTheory(_) => {
            let summary = stage_verify_theory(&cfg)?;
            for s in &summary {
                let verdict = if s.pass { "PASS" } else { "FAIL" };
                println!("{verdict} {} {}/{} ({} errors)", s.check, s.passed, s.instances, s.errors);
            }
            println!("wrote {}", paths.theory_dir().join("summary.json").display());
            let failed: usize = summary.iter().map(|s| s.instances - s.passed).sum();
            if failed > 0 {
                let total = summary.iter().map(|s| s.instances).sum();
                return Err(HarnessError::ChecksFailed { failed, total });
            }
        }
    }
    log::info!("{name} finished in {:.3}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
