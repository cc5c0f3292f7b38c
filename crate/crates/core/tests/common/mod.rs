#![allow(dead_code)]

//! Reference computations that avoid the library's linear solves: returns and
//! occupancies by forward propagation, values by fixed-point iteration, and
//! trajectory laws by explicit path enumeration.

use std::path::{Path, PathBuf};

use exoplan_core::exbmdp::EndoMdp;
use exoplan_core::{ExBmdpSpec, PolicyTable, TransitionTable};

/// Number of propagation steps after which `gamma^t` is negligible.
fn steps_for(gamma: f64) -> usize {
    if gamma == 0.0 {
        1
    } else {
        ((1e-17f64).ln() / gamma.ln()).ceil() as usize + 1
    }
}

/// `sum_t gamma^t Pr(s_t = s, a_t = a)` by pushing the state law forward.
pub fn raw_occupancy(t: &TransitionTable, init: &[f64], gamma: f64, policy: &PolicyTable) -> Vec<f64> {
    let (n, na) = (t.n_states(), t.n_actions());
    let mut law = init.to_vec();
    let mut rho = vec![0.0; n * na];
    let mut w = 1.0;
    for _ in 0..steps_for(gamma) {
        let mut next = vec![0.0; n];
        for s in 0..n {
            for a in 0..na {
                let p = law[s] * policy.prob(s, a);
                rho[s * na + a] += w * p;
                for (s2, q) in t.row(s, a).iter().enumerate() {
                    next[s2] += p * q;
                }
            }
        }
        law = next;
        w *= gamma;
    }
    rho
}

pub fn forward_return(mdp: &EndoMdp, policy: &PolicyTable) -> f64 {
    raw_occupancy(&mdp.transitions, &mdp.init, mdp.discount, policy)
        .iter()
        .zip(&mdp.reward)
        .map(|(r, x)| r * x)
        .sum()
}

/// `V = r_pi + gamma P_pi V` by repeated substitution.
pub fn iterated_values(mdp: &EndoMdp, policy: &PolicyTable) -> Vec<f64> {
    let (n, na) = (mdp.transitions.n_states(), mdp.transitions.n_actions());
    let mut v = vec![0.0; n];
    for _ in 0..steps_for(mdp.discount) {
        v = (0..n)
            .map(|s| {
                (0..na)
                    .map(|a| {
                        let ev: f64 = mdp.transitions.row(s, a).iter().zip(&v).map(|(q, x)| q * x).sum();
                        policy.prob(s, a) * (mdp.reward[s * na + a] + mdp.discount * ev)
                    })
                    .sum()
            })
            .collect();
    }
    v
}

/// Every deterministic policy, enumerated as base-`na` counters.
pub fn all_deterministic(n: usize, na: usize) -> Vec<PolicyTable> {
    let total = na.pow(n as u32);
    (0..total)
        .map(|mut code| {
            let choice: Vec<usize> = (0..n)
                .map(|_| {
                    let a = code % na;
                    code /= na;
                    a
                })
                .collect();
            PolicyTable::deterministic(na, &choice)
        })
        .collect()
}

/// Endogenous states `s_0..s_{H-1}` and actions `a_0..a_{H-1}`.
#[derive(Debug, Clone)]
pub struct EndoPath {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

/// All length-`horizon` state-action paths reachable from the initial law.
pub fn enumerate_paths(spec: &ExBmdpSpec, horizon: usize) -> Vec<EndoPath> {
    let mut frontier: Vec<EndoPath> = (0..spec.n_endo)
        .filter(|&s| spec.init_endo[s] > 0.0)
        .map(|s| EndoPath { states: vec![s], actions: vec![] })
        .collect();
    for t in 0..horizon {
        let mut next = Vec::new();
        for p in &frontier {
            let s = *p.states.last().unwrap();
            for a in 0..spec.n_act {
                if t + 1 == horizon {
                    let mut q = p.clone();
                    q.actions.push(a);
                    next.push(q);
                    continue;
                }
                for s2 in 0..spec.n_endo {
                    if spec.endo_trans.prob(s, a, s2) > 0.0 {
                        let mut q = p.clone();
                        q.actions.push(a);
                        q.states.push(s2);
                        next.push(q);
                    }
                }
            }
        }
        frontier = next;
    }
    frontier
}

/// Endogenous path probability under `policy`; zero when the policy never takes a listed action.
pub fn path_prob(spec: &ExBmdpSpec, path: &EndoPath, policy: &PolicyTable) -> f64 {
    let mut p = spec.init_endo[path.states[0]];
    for (t, &a) in path.actions.iter().enumerate() {
        let s = path.states[t];
        p *= policy.prob(s, a);
        if let Some(&s2) = path.states.get(t + 1) {
            p *= spec.endo_trans.prob(s, a, s2);
        }
    }
    p
}

/// `avg_i KL(p_i || p_mix)` over endogenous paths, the batch-union likelihood margin.
pub fn mixture_margin(spec: &ExBmdpSpec, policies: &[PolicyTable], horizon: usize) -> f64 {
    let mix = PolicyTable::average(policies);
    let paths = enumerate_paths(spec, horizon);
    let mut total = 0.0;
    for pi in policies {
        for path in &paths {
            let p = path_prob(spec, path, pi);
            if p > 0.0 {
                total += p * (p / path_prob(spec, path, &mix)).ln();
            }
        }
    }
    total / policies.len() as f64
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// `H(a) - H(a | s)` for `s ~ dist`.
pub fn mutual_information(policy: &PolicyTable, dist: &[f64]) -> f64 {
    let na = policy.n_actions();
    let marginal: Vec<f64> =
        (0..na).map(|a| dist.iter().enumerate().map(|(s, w)| w * policy.prob(s, a)).sum()).collect();
    let conditional: f64 = dist.iter().enumerate().map(|(s, w)| w * entropy(policy.row(s))).sum();
    entropy(&marginal) - conditional
}

/// Relative path to bytes for every file under `root`, sorted.
pub fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}
