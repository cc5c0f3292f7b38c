mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use exoplan_core::exbmdp::OccupancyScaling;
use exoplan_core::harness::{generate_env, ExperimentConfig};
use exoplan_core::theory::{random_endo_mdp, random_transitions};
use exoplan_core::{ExBmdpSpec, LatentState, PolicyTable, TransitionTable};

fn two_by_two() -> ExBmdpSpec {
    ExBmdpSpec {
        n_endo: 2,
        n_exo: 2,
        n_act: 2,
        endo_trans: TransitionTable::from_rows(2, 2, &[vec![0.5, 0.5], vec![0.9, 0.1], vec![0.3, 0.7], vec![0.0, 1.0]]),
        exo_trans: TransitionTable::from_rows(2, 1, &[vec![0.0, 1.0], vec![1.0, 0.0]]),
        reward: vec![0.0, 0.5, 1.0, 0.2],
        emission: vec![2, 0, 3, 1],
        init_endo: vec![0.5, 0.5],
        init_exo: vec![1.0, 0.0],
        discount: 0.9,
    }
}

#[test]
fn endogenous_step_frequency_matches_table() {
    let spec = two_by_two();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 100_000;
    let mut hits = 0usize;
    for _ in 0..n {
        let out = spec.step(LatentState { endo: 0, exo: 0 }, 0, &mut rng).unwrap();
        hits += (out.next.endo == 0) as usize;
        assert_eq!(out.next.exo, 1, "deterministic exogenous move");
    }
    assert!((hits as f64 / n as f64 - 0.5).abs() < 0.01);
}

#[test]
fn joint_successor_law_factorizes() {
    let mut spec = two_by_two();
    spec.exo_trans = TransitionTable::from_rows(2, 1, &[vec![0.3, 0.7], vec![0.6, 0.4]]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let start = LatentState { endo: 1, exo: 0 };
    let mut counts = [[0usize; 2]; 2];
    for _ in 0..n {
        let next = spec.step(start, 0, &mut rng).unwrap().next;
        counts[next.endo][next.exo] += 1;
    }
    for (e, row) in counts.iter().enumerate() {
        for (x, &c) in row.iter().enumerate() {
            let product = spec.endo_trans.prob(1, 0, e) * spec.exo_trans.prob(0, 0, x);
            assert!((c as f64 / n as f64 - product).abs() < 0.01, "({e},{x})");
        }
    }
}

#[test]
fn exact_return_agrees_with_monte_carlo() {
    let cfg = ExperimentConfig { n_endo: 4, n_exo: 3, n_act: 2, env_seed: 3, ..ExperimentConfig::default() };
    let spec = generate_env(&cfg).unwrap();
    let policy = PolicyTable::from_rows(&[vec![0.3, 0.7], vec![0.5, 0.5], vec![1.0, 0.0], vec![0.2, 0.8]]);
    let exact = spec.exact_return(&policy).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rollouts = 100_000;
    let horizon = 300; // 0.9^300 is below 1e-13
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..rollouts {
        let mut state = spec.sample_initial(&mut rng);
        let (mut g, mut w) = (0.0, 1.0);
        for _ in 0..horizon {
            let a = exoplan_core::rng::sample_categorical(policy.row(state.endo), &mut rng);
            let out = spec.step(state, a, &mut rng).unwrap();
            g += w * out.reward;
            w *= spec.discount;
            state = out.next;
        }
        sum += g;
        sum_sq += g * g;
    }
    let mean = sum / rollouts as f64;
    let se = ((sum_sq / rollouts as f64 - mean * mean) / rollouts as f64).sqrt();
    assert!((mean - exact).abs() <= 3.0 * se, "exact {exact}, monte carlo {mean} +- {se}");
}

#[test]
fn single_state_unit_reward_is_geometric() {
    let mdp = exoplan_core::exbmdp::EndoMdp {
        transitions: TransitionTable::identity(1),
        reward: vec![1.0],
        init: vec![1.0],
        discount: 0.9,
    };
    let v = mdp.expected_return(&PolicyTable::uniform(1, 1)).unwrap();
    assert!((v - 10.0).abs() < 1e-8);
}

#[test]
fn all_zero_reward_gives_zero_return() {
    let mut spec = two_by_two();
    spec.reward = vec![0.0; 4];
    assert_eq!(spec.exact_return(&PolicyTable::uniform(2, 2)).unwrap(), 0.0);
}

#[test]
fn swapped_exo_chain_keeps_block_structure() {
    let spec = two_by_two();
    let bigger = spec
        .with_exo_chain(TransitionTable::uniform(3, 1), vec![1.0 / 3.0; 3])
        .unwrap();
    assert!(bigger.validate().is_valid());
    assert_eq!(bigger.emission.len(), 6);
}

fn policy_strategy(n: usize, na: usize) -> impl Strategy<Value = PolicyTable> {
    proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, na), n).prop_map(|rows| {
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|r| {
                let t: f64 = r.iter().sum();
                r.into_iter().map(|x| x / t).collect()
            })
            .collect();
        PolicyTable::from_rows(&rows)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimal_policy_beats_every_deterministic_policy(seed in 0u64..10_000, n in 1usize..5, na in 1usize..4, gamma in 0.0f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = random_endo_mdp(n, na, gamma, &mut rng);
        let best = mdp.optimal_policy().unwrap();
        let v_best = common::iterated_values(&mdp, &best);
        for pi in common::all_deterministic(n, na) {
            let v = common::iterated_values(&mdp, &pi);
            for s in 0..n {
                prop_assert!(v_best[s] >= v[s] - 1e-8);
            }
        }
    }

    #[test]
    fn policy_values_match_fixed_point_iteration(seed in 0u64..10_000, gamma in 0.0f64..0.95, pi in policy_strategy(4, 3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = random_endo_mdp(4, 3, gamma, &mut rng);
        let lu = mdp.policy_values(&pi).unwrap();
        let it = common::iterated_values(&mdp, &pi);
        for (a, b) in lu.iter().zip(&it) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!((mdp.expected_return(&pi).unwrap() - common::forward_return(&mdp, &pi)).abs() < 1e-9);
    }

    #[test]
    fn normalized_occupancy_is_a_distribution(seed in 0u64..10_000, gamma in 0.0f64..0.99, pi in policy_strategy(3, 2)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = random_endo_mdp(3, 2, gamma, &mut rng);
        let occ = mdp.occupancy(&pi, OccupancyScaling::Normalized).unwrap();
        prop_assert!((occ.total() - 1.0).abs() < 1e-10);
        let raw = mdp.occupancy(&pi, OccupancyScaling::Raw).unwrap();
        let oracle = common::raw_occupancy(&mdp.transitions, &mdp.init, gamma, &pi);
        for s in 0..3 {
            for a in 0..2 {
                prop_assert!((raw.get(s, a) - oracle[s * 2 + a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn value_iteration_is_a_contraction(seed in 0u64..10_000, gamma in 0.1f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mdp = random_endo_mdp(4, 2, gamma, &mut rng);
        mdp.transitions = random_transitions(4, 2, &mut rng);
        let vi = mdp.value_iteration(1e-10).unwrap();
        for w in vi.residuals.windows(2) {
            prop_assert!(w[1] <= gamma * w[0] + 1e-12);
        }
    }
}
