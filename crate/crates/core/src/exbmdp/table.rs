use serde::{Deserialize, Serialize};

/// Row-stochastic transition table indexed by `(state, action) -> next state`.
///
/// Action-free chains (the exogenous factor) use `n_actions == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ShapedDoc", into = "ShapedDoc")]
pub struct TransitionTable {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

/// Flat data with an explicit shape, the on-disk form of every table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapedDoc {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TransitionTable {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Self {
        assert_eq!(
            probs.len(),
            n_states * n_actions * n_states,
            "transition data length does not match shape"
        );
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn from_fn(n_states: usize, n_actions: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut probs = Vec::with_capacity(n_states * n_actions * n_states);
        for s in 0..n_states {
            for a in 0..n_actions {
                for next in 0..n_states {
                    probs.push(f(s, a, next));
                }
            }
        }
        Self::new(n_states, n_actions, probs)
    }

    pub fn from_rows(n_states: usize, n_actions: usize, rows: &[Vec<f64>]) -> Self {
        assert_eq!(rows.len(), n_states * n_actions);
        let probs = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(n_states, n_actions, probs)
    }

    pub fn identity(n_states: usize) -> Self {
        Self::from_fn(n_states, 1, |s, _, next| if s == next { 1.0 } else { 0.0 })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_states as f64;
        Self::from_fn(n_states, n_actions, |_, _, _| p)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.probs[start..start + self.n_states]
    }

    pub fn row_mut(&mut self, s: usize, a: usize) -> &mut [f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &mut self.probs[start..start + self.n_states]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.row(s, a)[next]
    }

    pub fn data(&self) -> &[f64] {
        &self.probs
    }

    /// `(s, a)` pairs whose row is not a distribution within `tol`.
    pub fn invalid_rows(&self, tol: f64) -> Vec<(usize, usize)> {
        let mut bad = Vec::new();
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                if !is_distribution(self.row(s, a), tol) {
                    bad.push((s, a));
                }
            }
        }
        bad
    }

    /// Expected value of `values` under row `(s, a)`.
    pub fn expect(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        self.row(s, a).iter().zip(values).map(|(p, v)| p * v).sum()
    }

    /// Elementwise mean of equally-shaped tables.
    pub fn mean_of(tables: &[TransitionTable]) -> TransitionTable {
        assert!(!tables.is_empty());
        let k = tables.len() as f64;
        let mut probs = vec![0.0; tables[0].probs.len()];
        for t in tables {
            assert_eq!(t.probs.len(), probs.len());
            for (acc, p) in probs.iter_mut().zip(&t.probs) {
                *acc += p;
            }
        }
        for p in &mut probs {
            *p /= k;
        }
        TransitionTable::new(tables[0].n_states, tables[0].n_actions, probs)
    }
}

impl TryFrom<ShapedDoc> for TransitionTable {
    type Error = String;

    fn try_from(doc: ShapedDoc) -> Result<Self, Self::Error> {
        match doc.shape.as_slice() {
            &[n, a, m] if n == m && doc.data.len() == n * a * m => Ok(Self {
                n_states: n,
                n_actions: a,
                probs: doc.data,
            }),
            _ => Err(format!(
                "transition table shape {:?} inconsistent with {} entries",
                doc.shape,
                doc.data.len()
            )),
        }
    }
}

impl From<TransitionTable> for ShapedDoc {
    fn from(t: TransitionTable) -> Self {
        ShapedDoc {
            shape: vec![t.n_states, t.n_actions, t.n_states],
            data: t.probs,
        }
    }
}

/// Stochastic policy `pi(a | s)` over a finite state set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ShapedDoc", into = "ShapedDoc")]
pub struct PolicyTable {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), n_states * n_actions, "policy data length does not match shape");
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self::new(n_states, n_actions, vec![1.0 / n_actions as f64; n_states * n_actions])
    }

    pub fn deterministic(n_actions: usize, choice: &[usize]) -> Self {
        let mut probs = vec![0.0; choice.len() * n_actions];
        for (s, &a) in choice.iter().enumerate() {
            assert!(a < n_actions);
            probs[s * n_actions + a] = 1.0;
        }
        Self::new(choice.len(), n_actions, probs)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_actions = rows.first().map_or(0, |r| r.len());
        let probs = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), n_actions, probs)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn data(&self) -> &[f64] {
        &self.probs
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        (0..self.n_states).all(|s| is_distribution(self.row(s), tol))
    }

    /// Action chosen with probability one in each state, if the policy is deterministic.
    pub fn as_deterministic(&self) -> Option<Vec<usize>> {
        (0..self.n_states)
            .map(|s| self.row(s).iter().position(|&p| p == 1.0))
            .collect()
    }

    /// Pointwise convex combination `w * self + (1 - w) * other`.
    pub fn mix(&self, other: &PolicyTable, w: f64) -> PolicyTable {
        assert_eq!(self.probs.len(), other.probs.len());
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(p, q)| w * p + (1.0 - w) * q)
            .collect();
        PolicyTable::new(self.n_states, self.n_actions, probs)
    }

    /// Uniform average of several policies of identical shape.
    pub fn average(policies: &[PolicyTable]) -> PolicyTable {
        assert!(!policies.is_empty());
        let n = policies.len() as f64;
        let mut probs = vec![0.0; policies[0].probs.len()];
        for p in policies {
            for (acc, x) in probs.iter_mut().zip(&p.probs) {
                *acc += x / n;
            }
        }
        PolicyTable::new(policies[0].n_states, policies[0].n_actions, probs)
    }

    /// All `n_actions ^ n_states` deterministic policies, or `None` past `cap`.
    pub fn enumerate_deterministic(n_states: usize, n_actions: usize, cap: usize) -> Option<Vec<PolicyTable>> {
        let count = (n_actions as u128).checked_pow(n_states as u32)?;
        if count > cap as u128 {
            return None;
        }
        let mut out = Vec::with_capacity(count as usize);
        let mut choice = vec![0usize; n_states];
        loop {
            out.push(PolicyTable::deterministic(n_actions, &choice));
            let mut i = 0;
            loop {
                if i == n_states {
                    return Some(out);
                }
                choice[i] += 1;
                if choice[i] < n_actions {
                    break;
                }
                choice[i] = 0;
                i += 1;
            }
        }
    }
}

impl TryFrom<ShapedDoc> for PolicyTable {
    type Error = String;

    fn try_from(doc: ShapedDoc) -> Result<Self, Self::Error> {
        match doc.shape.as_slice() {
            &[n, a] if doc.data.len() == n * a => Ok(Self {
                n_states: n,
                n_actions: a,
                probs: doc.data,
            }),
            _ => Err(format!(
                "policy shape {:?} inconsistent with {} entries",
                doc.shape,
                doc.data.len()
            )),
        }
    }
}

impl From<PolicyTable> for ShapedDoc {
    fn from(p: PolicyTable) -> Self {
        ShapedDoc {
            shape: vec![p.n_states, p.n_actions],
            data: p.probs,
        }
    }
}

pub fn is_distribution(row: &[f64], tol: f64) -> bool {
    row.iter().all(|&p| p >= 0.0 && p.is_finite()) && (row.iter().sum::<f64>() - 1.0).abs() <= tol
}
