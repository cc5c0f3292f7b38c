use std::io::Cursor;

use rayon::prelude::*;

use exoplan_core::datagen::{
    action_entropy, collect, load_dataset, load_dataset_for, make_behavior_policies, medium_policy, parse_dataset,
    replay_snapshots, save_dataset, BehaviorPolicySet, DatagenError, Tier, Trajectory, MEDIUM_BAND, REPLAY_STEP,
};
use exoplan_core::harness::{collect_all, generate_env, seed_config, ExperimentConfig};
use exoplan_core::rng::stream;
use exoplan_core::PolicyTable;

fn env(i: usize) -> (ExperimentConfig, exoplan_core::ExBmdpSpec) {
    let cfg = seed_config(&ExperimentConfig::default(), i);
    let spec = generate_env(&cfg).unwrap();
    (cfg, spec)
}

#[test]
fn empirical_transitions_converge_to_tables() {
    let (_, spec) = env(0);
    let set = BehaviorPolicySet::from_tables(Tier::Random, vec![PolicyTable::uniform(spec.n_endo, spec.n_act)]);
    let ds = collect(&spec, &set, 1000, 100, 9).unwrap();
    let decode = spec.decode_table();
    let (ne, na, nx) = (spec.n_endo, spec.n_act, spec.n_exo);
    let mut endo = vec![0usize; ne * na * ne];
    let mut exo = vec![0usize; nx * nx];
    for t in &ds.trajectories {
        for w in 0..t.len() - 1 {
            let now = decode[t.observations[w]].unwrap();
            let next = decode[t.observations[w + 1]].unwrap();
            endo[(now.endo * na + t.actions[w]) * ne + next.endo] += 1;
            exo[now.exo * nx + next.exo] += 1;
        }
    }
    assert!(ds.total_steps() >= 100_000);
    let mut worst = 0.0f64;
    for s in 0..ne {
        for a in 0..na {
            let row = &endo[(s * na + a) * ne..(s * na + a + 1) * ne];
            let total: usize = row.iter().sum();
            for (s2, &c) in row.iter().enumerate() {
                worst = worst.max((c as f64 / total as f64 - spec.endo_trans.prob(s, a, s2)).abs());
            }
        }
    }
    for x in 0..nx {
        let row = &exo[x * nx..(x + 1) * nx];
        let total: usize = row.iter().sum();
        for (x2, &c) in row.iter().enumerate() {
            worst = worst.max((c as f64 / total as f64 - spec.exo_trans.prob(x, 0, x2)).abs());
        }
    }
    assert!(worst < 0.02, "largest frequency error {worst}");
}

#[test]
fn disjoint_deterministic_pool_has_entropy_ln2() {
    let traj = |a: usize| Trajectory { policy_id: a, observations: vec![0; 7], actions: vec![a; 7], rewards: vec![0.0; 7] };
    let h = action_entropy(&[traj(0), traj(2)]).unwrap();
    assert!((h - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn medium_tier_band_and_replay_monotonicity_across_seeds() {
    (0..20).into_par_iter().for_each(|i| {
        let (_, spec) = env(i);
        let medium = medium_policy(&spec).unwrap();
        let ratio = medium.medium_return / medium.optimal_return;
        assert!(ratio >= MEDIUM_BAND.0 && ratio <= MEDIUM_BAND.1, "seed {i}: {ratio}");
        let snaps = replay_snapshots(&spec, &medium, 12, REPLAY_STEP).unwrap();
        let returns: Vec<f64> = snaps.iter().map(|p| spec.exact_return(p).unwrap()).collect();
        for w in returns.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "seed {i}: {returns:?}");
        }
    });
}

#[test]
fn tier_means_are_ordered_on_most_environments() {
    let seeds = 40;
    let ordered = (0..seeds)
        .into_par_iter()
        .filter(|&i| {
            let (cfg, spec) = env(i);
            let ds = collect_all(&cfg, &spec).unwrap();
            let m: Vec<f64> = Tier::ALL.iter().map(|t| ds[t].stats.mean).collect();
            m[0] <= m[1] && m[1] <= m[2]
        })
        .count();
    assert!(ordered * 10 >= seeds * 9, "ordered on {ordered}/{seeds}");
}

#[test]
fn collection_is_deterministic_and_stats_recompute() {
    let (cfg, spec) = env(3);
    let a = collect_all(&cfg, &spec).unwrap();
    let b = collect_all(&cfg, &spec).unwrap();
    for t in Tier::ALL {
        assert_eq!(a[&t].to_jsonl(), b[&t].to_jsonl());
        assert_eq!(a[&t].recompute_stats(), a[&t].stats);
        let s = &a[&t].stats;
        assert!(s.min <= s.p25 && s.p25 <= s.median && s.median <= s.p75 && s.p75 <= s.max);
    }
}

#[test]
fn random_tier_policies_are_dirichlet_rows() {
    let (_, spec) = env(1);
    let set = make_behavior_policies(&spec, Tier::Random, 5, &mut stream(1, 2)).unwrap();
    assert_eq!(set.policies.len(), 5);
    assert!(set.policies.iter().all(|p| p.table.is_valid(1e-12)));
    assert_ne!(set.policies[0].table, set.policies[1].table);
}

#[test]
fn dataset_files_round_trip_and_reject_bad_input() {
    let (cfg, spec) = env(2);
    let ds = collect_all(&cfg, &spec).unwrap().remove(&Tier::Medium).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("medium.jsonl");
    save_dataset(&ds, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), ds);
    assert!(load_dataset_for(&path, &spec).is_ok());

    let (_, other) = env(5);
    assert!(matches!(load_dataset_for(&path, &other), Err(DatagenError::Fingerprint { .. })));

    let text = ds.to_jsonl();
    let bumped = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
    assert!(matches!(parse_dataset(Cursor::new(bumped)), Err(DatagenError::Version { found: 2, .. })));

    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut t: Trajectory = serde_json::from_str(&lines[3]).unwrap();
    t.actions.pop();
    lines[3] = serde_json::to_string(&t).unwrap();
    match parse_dataset(Cursor::new(lines.join("\n"))) {
        Err(DatagenError::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected a parse error, got {other:?}"),
    }

    let truncated: Vec<&str> = text.lines().take(3).collect();
    assert!(matches!(parse_dataset(Cursor::new(truncated.join("\n"))), Err(DatagenError::Truncated { .. })));
}
