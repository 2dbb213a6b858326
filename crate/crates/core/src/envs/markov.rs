use serde::{Deserialize, Serialize};

use super::EnvError;

/// Finite-state first-order Markov chain over real levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovChain {
    pub levels: Vec<f64>,
    /// Row-stochastic, `transition[i][j] = P(next = j | current = i)`.
    pub transition: Vec<Vec<f64>>,
}

impl MarkovChain {
    pub fn new(levels: Vec<f64>, transition: Vec<Vec<f64>>) -> Result<Self, EnvError> {
        let chain = MarkovChain { levels, transition };
        chain.validate()?;
        Ok(chain)
    }

    /// `k` evenly spaced levels on `[lo, hi]`; stay with probability `stay`,
    /// move one level up or down with `(1 − stay)/2` each, reflecting at the
    /// ends.
    pub fn tridiagonal(lo: f64, hi: f64, k: usize, stay: f64) -> Result<Self, EnvError> {
        if k < 2 {
            return Err(EnvError::Invalid("a chain needs at least two levels".into()));
        }
        let levels = (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect();
        let mv = (1.0 - stay) / 2.0;
        let mut transition = vec![vec![0.0; k]; k];
        for (i, row) in transition.iter_mut().enumerate() {
            row[i] = stay;
            match i {
                0 => row[1] += 2.0 * mv,
                _ if i == k - 1 => row[k - 2] += 2.0 * mv,
                _ => {
                    row[i - 1] = mv;
                    row[i + 1] = mv;
                }
            }
        }
        Self::new(levels, transition)
    }

    pub fn identity(levels: Vec<f64>) -> Result<Self, EnvError> {
        let k = levels.len();
        let transition = (0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        Self::new(levels, transition)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let k = self.levels.len();
        if k == 0 {
            return Err(EnvError::Invalid("chain has no levels".into()));
        }
        if self.levels.iter().any(|v| !v.is_finite()) {
            return Err(EnvError::Invalid("chain levels must be finite".into()));
        }
        if self.levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(EnvError::Invalid("chain levels must be strictly increasing".into()));
        }
        if self.transition.len() != k {
            return Err(EnvError::Invalid(format!("transition has {} rows for {k} levels", self.transition.len())));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != k || row.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
                return Err(EnvError::Invalid(format!("transition row {i} is not a probability vector")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(EnvError::Invalid(format!("transition row {i} sums to {sum}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn max_level(&self) -> f64 {
        *self.levels.last().expect("non-empty")
    }

    /// Inverse-CDF draw of the next index for `u ∈ [0, 1)`.
    pub fn step(&self, index: usize, u: f64) -> usize {
        let row = &self.transition[index];
        let mut acc = 0.0;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        row.iter().rposition(|p| *p > 0.0).unwrap_or(index)
    }

    /// Index of the level equal to `value` up to `1e-9` relative.
    pub fn index_of(&self, value: f64) -> Option<usize> {
        let i = self.nearest(value);
        let tol = 1e-9 * self.levels[i].abs().max(1.0);
        ((self.levels[i] - value).abs() <= tol).then_some(i)
    }

    pub fn nearest(&self, value: f64) -> usize {
        let mut best = 0;
        for (i, l) in self.levels.iter().enumerate() {
            if (l - value).abs() < (self.levels[best] - value).abs() {
                best = i;
            }
        }
        best
    }

    /// Stationary distribution by power iteration from the uniform vector.
    pub fn stationary(&self) -> Vec<f64> {
        let k = self.len();
        let mut pi = vec![1.0 / k as f64; k];
        for _ in 0..100_000 {
            let mut next = vec![0.0; k];
            for (i, row) in self.transition.iter().enumerate() {
                for (j, p) in row.iter().enumerate() {
                    next[j] += pi[i] * p;
                }
            }
            let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if diff < 1e-15 {
                break;
            }
        }
        pi
    }
}
