//! Dense `(state, action)` tables of Q-values.

use crate::error::{Error, Result};

/// Row-major `n_states × n_actions` table.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(Error::Shape(format!(
                "table of {n_states}x{n_actions} needs {} values, got {}",
                n_states * n_actions,
                values.len()
            )));
        }
        Ok(Self { n_states, n_actions, values })
    }

    pub fn from_fn(n_states: usize, n_actions: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                values.push(f(s, a));
            }
        }
        Self { n_states, n_actions, values }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Greedy action per state, ties broken toward the lowest action id.
    pub fn greedy_policy(&self) -> Vec<usize> {
        (0..self.n_states).map(|s| argmax(self.row(s))).collect()
    }

    pub fn same_shape(&self, other: &QTable) -> bool {
        self.n_states == other.n_states && self.n_actions == other.n_actions
    }

    /// `max |self − other|` over all entries.
    pub fn sup_distance(&self, other: &QTable) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::Shape("tables differ in shape".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs())))
    }

    /// Entrywise maximum of several tables.
    pub fn pointwise_max(tables: &[QTable]) -> Result<QTable> {
        let first = tables
            .first()
            .ok_or_else(|| Error::Validation("pointwise max over an empty list".into()))?;
        let mut out = first.clone();
        for t in &tables[1..] {
            if !t.same_shape(first) {
                return Err(Error::Shape("tables differ in shape".into()));
            }
            for (o, v) in out.values.iter_mut().zip(&t.values) {
                *o = o.max(*v);
            }
        }
        Ok(out)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0, 1.0]), 0);
        assert_eq!(argmax(&[0.0, 5.0, 5.0]), 1);
    }

    #[test]
    fn pointwise_max_and_sup() {
        let a = QTable::new(1, 2, vec![1.0, 4.0]).unwrap();
        let b = QTable::new(1, 2, vec![3.0, 2.0]).unwrap();
        let m = QTable::pointwise_max(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.values(), &[3.0, 4.0]);
        assert_eq!(a.sup_distance(&b).unwrap(), 2.0);
        assert!(QTable::pointwise_max(&[]).is_err());
    }
}
