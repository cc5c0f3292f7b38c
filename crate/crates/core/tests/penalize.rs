use proptest::prelude::*;

use exoplan_core::datagen::Provenance;
use exoplan_core::exbmdp::EndoMdp;
use exoplan_core::harness::{replacement_exo_chain, generate_env, seed_config, ExperimentConfig};
use exoplan_core::penalize::{
    build_penalized, distractor_swap_eval, evaluate_policy, normalize, penalize_reward, plan, Estimator,
    LearnedPolicy, NormalizationRange, PenalizeError, PenalizedMdp, UncertaintyTable,
};
use exoplan_core::sepmodel::{EnsembleModel, ModelLayout};
use exoplan_core::{PolicyTable, TransitionTable};

/// Start state 0 chooses between a rewarding absorbing state 1 reached through a
/// contested transition and a plainer absorbing state 2 reached for certain.
fn fork_model() -> EnsembleModel {
    let rows = |contested: [f64; 3]| {
        vec![contested.to_vec(), vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]]
    };
    EnsembleModel {
        layout: ModelLayout::Joint,
        factor_sizes: [3, 1],
        n_states: 3,
        n_actions: 2,
        members: vec![
            TransitionTable::from_rows(3, 2, &rows([0.0, 1.0, 0.0])),
            TransitionTable::from_rows(3, 2, &rows([0.0, 0.8, 0.2])),
        ],
        exo: None,
        reward: vec![0.0, 0.0, 1.0, 1.0, 0.5, 0.5],
        visits: vec![1; 6],
        init: vec![1.0, 0.0, 0.0],
        alpha: 0.0,
        bootstrap: false,
        dataset_fingerprint: String::new(),
        env_fingerprint: String::new(),
        provenance: Provenance::default(),
    }
}

#[test]
fn large_lambda_flips_the_choice_at_the_fork() {
    let model = fork_model();
    // md at (0, 0) is 2 * (0.1^2 + 0.1^2) = 0.04, zero elsewhere.
    // Q(0,0) = -0.04 lambda + 0.9 * (0.9 * 10 + 0.1 * 5) = 8.55 - 0.04 lambda, Q(0,1) = 0.9 * 5 = 4.5,
    // so the choice flips once lambda exceeds 101.25.
    let q = |lambda: f64| (8.55 - 0.04 * lambda, 4.5);
    for (lambda, expected) in [(0.0, 0), (1.0, 0), (100.0, 0), (102.0, 1), (500.0, 1)] {
        let pm = build_penalized(&model, Estimator::Md, lambda, 0.9).unwrap();
        assert!((pm.uncertainty.get(0, 0) - 0.04).abs() < 1e-15);
        let p = plan(&pm, 1e-12).unwrap();
        assert_eq!(p.policy.as_deterministic().unwrap()[0], expected, "lambda {lambda}");
        let (q0, q1) = q(lambda);
        assert!((p.values[0] - q0.max(q1)).abs() < 1e-8);
    }
}

fn single_state(reward: f64) -> PenalizedMdp {
    let mdp = EndoMdp {
        transitions: TransitionTable::from_rows(1, 2, &[vec![1.0], vec![1.0]]),
        reward: vec![reward; 2],
        init: vec![1.0],
        discount: 0.9,
    };
    PenalizedMdp {
        mdp,
        reward_hat: vec![reward; 2],
        uncertainty: UncertaintyTable {
            estimator: Estimator::Md,
            n_states: 1,
            n_actions: 2,
            values: vec![0.0; 2],
            flagged: vec![],
        },
        lambda: 0.0,
    }
}

#[test]
fn single_state_plan_is_geometric_and_ties_pick_action_zero() {
    let p = plan(&single_state(1.0), 1e-12).unwrap();
    assert!((p.values[0] - 10.0).abs() < 1e-8);
    assert_eq!(p.policy.as_deterministic().unwrap(), vec![0]);
    let z = plan(&single_state(0.0), 1e-12).unwrap();
    assert_eq!(z.values, vec![0.0]);
    assert_eq!(z.policy.as_deterministic().unwrap(), vec![0]);
}

#[test]
fn non_finite_penalized_reward_is_rejected() {
    let mut pm = single_state(1.0);
    pm.mdp.reward[1] = f64::NEG_INFINITY;
    assert!(matches!(plan(&pm, 1e-10), Err(PenalizeError::NonFiniteReward { state: 0, action: 1 })));
}

#[test]
fn reward_penalty_arithmetic() {
    assert_eq!(penalize_reward(&[0.8, 0.2], &[0.05, 0.3], 0.0), vec![0.8, 0.2]);
    assert!((penalize_reward(&[0.8], &[0.05], 10.0)[0] - 0.3).abs() < 1e-15);
    assert_eq!(normalize(5.0, 5.0, 598.0).unwrap(), 0.0);
    assert!(matches!(normalize(1.0, 2.0, 2.0), Err(PenalizeError::Normalization { .. })));
}

proptest! {
    #[test]
    fn penalized_reward_never_rises_with_lambda(
        r in proptest::collection::vec(0.0f64..1.0, 6),
        u in proptest::collection::vec(0.0f64..2.0, 6),
        l1 in 0.0f64..50.0,
        dl in 0.0f64..50.0,
    ) {
        let lo = penalize_reward(&r, &u, l1);
        let hi = penalize_reward(&r, &u, l1 + dl);
        for (a, b) in lo.iter().zip(&hi) {
            prop_assert!(b <= a);
        }
    }
}

#[test]
fn endogenous_policies_ignore_a_resized_exo_chain() {
    let cfg = seed_config(&ExperimentConfig::default(), 4);
    let spec = generate_env(&cfg).unwrap();
    let policy = PolicyTable::from_rows(&(0..spec.n_endo).map(|s| {
        let mut row = vec![0.1; spec.n_act];
        row[s % spec.n_act] += 1.0 - 0.1 * spec.n_act as f64;
        row
    }).collect::<Vec<_>>());
    let (exo, init) = replacement_exo_chain(spec.n_exo, 3);
    assert_eq!(exo.n_states(), spec.n_exo + 1);
    let (before, after) = distractor_swap_eval(&spec, &policy, exo, init).unwrap();
    assert!((before - after).abs() <= 1e-12);
    let identity = distractor_swap_eval(&spec, &policy, spec.exo_trans.clone(), spec.init_exo.clone()).unwrap();
    assert!((identity.0 - identity.1).abs() <= 1e-12);
    let range = NormalizationRange { min: 0.0, max: 2.0 * before };
    let (ret, norm) = evaluate_policy(&spec, &policy, &range).unwrap();
    assert!((ret - before).abs() <= 1e-12 && (norm - 0.5).abs() <= 1e-12);
}

#[test]
fn learned_policy_file_round_trip() {
    let model = fork_model();
    let pm = build_penalized(&model, Estimator::Md, 1.0, 0.9).unwrap();
    let p = plan(&pm, 1e-10).unwrap();
    let learned = LearnedPolicy::from_plan(&model, &p, Estimator::Md, 1.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.json");
    learned.save(&path).unwrap();
    assert_eq!(LearnedPolicy::load(&path).unwrap(), learned);
    let bumped = learned.to_json().replacen("\"format_version\": 1", "\"format_version\": 9", 1);
    assert!(matches!(LearnedPolicy::from_json(&bumped), Err(PenalizeError::Version { found: 9, .. })));
}
