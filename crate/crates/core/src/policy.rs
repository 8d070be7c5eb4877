//! Behaviour policies and GPI action values.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::mdp::SyntheticMDP;
use crate::mlp::NetworkParams;
use crate::rng::Rng;
use crate::table::{argmax, QTable};

/// Behaviour policy as configured. Epsilon decays linearly from `start` to
/// `end` over the first `decay_fraction` of the iterations, then stays at
/// `end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Greedy,
    EpsilonGreedy { start: f64, end: f64, decay_fraction: f64 },
    Softmax { temperature: f64 },
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::EpsilonGreedy { start: 1.0, end: 0.05, decay_fraction: 0.2 }
    }
}

/// A policy resolved at one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActionRule {
    Greedy,
    EpsilonGreedy(f64),
    Softmax(f64),
}

impl PolicySpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PolicySpec::Greedy => Ok(()),
            PolicySpec::EpsilonGreedy { start, end, decay_fraction } => {
                ensure((0.0..=1.0).contains(&start) && (0.0..=1.0).contains(&end), || {
                    format!("epsilon must lie in [0,1], got start={start} end={end}")
                })?;
                ensure((0.0..=1.0).contains(&decay_fraction), || {
                    format!("decay_fraction must lie in [0,1], got {decay_fraction}")
                })
            }
            PolicySpec::Softmax { temperature } => ensure(temperature > 0.0 && temperature.is_finite(), || {
                format!("temperature must be positive, got {temperature}")
            }),
        }
    }

    /// Rule in force at iteration `t` (0-based) of `total`.
    pub fn rule_at(&self, t: usize, total: usize) -> ActionRule {
        match *self {
            PolicySpec::Greedy => ActionRule::Greedy,
            PolicySpec::Softmax { temperature } => ActionRule::Softmax(temperature),
            PolicySpec::EpsilonGreedy { start, end, decay_fraction } => {
                let horizon = decay_fraction * total as f64;
                let eps = if horizon <= 0.0 || t as f64 >= horizon {
                    end
                } else {
                    start + (end - start) * (t as f64 / horizon)
                };
                ActionRule::EpsilonGreedy(eps)
            }
        }
    }
}

/// Picks an action from per-action values. Greedy ties go to the lowest id.
pub fn select_action(q: &[f64], rule: ActionRule, rng: &mut Rng) -> Result<usize> {
    ensure(!q.is_empty(), || "no actions to choose from".into())?;
    if q.iter().any(|v| v.is_nan()) {
        return Err(Error::Validation("action values contain NaN".into()));
    }
    match rule {
        ActionRule::Greedy => Ok(argmax(q)),
        ActionRule::EpsilonGreedy(eps) => {
            if rng.gen::<f64>() < eps {
                Ok(rng.gen_range(0..q.len()))
            } else {
                Ok(argmax(q))
            }
        }
        ActionRule::Softmax(temp) => {
            let top = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = q.iter().map(|v| ((v - top) / temp).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (a, w) in weights.iter().enumerate() {
                if u < *w {
                    return Ok(a);
                }
                u -= w;
            }
            Ok(argmax(q))
        }
    }
}

/// `max_c ψ(Θ_c; s, a)ᵀ w` for every action.
pub fn q_values_gpi(sfs: &[&NetworkParams], w: &[f64], mdp: &SyntheticMDP, s: usize) -> Result<Vec<f64>> {
    ensure(!sfs.is_empty(), || "GPI needs at least one SF network".into())?;
    ensure(s < mdp.n_states(), || format!("state {s} out of range"))?;
    if w.len() != mdp.d_phi() {
        return Err(Error::Shape(format!("w has length {}, d_phi is {}", w.len(), mdp.d_phi())));
    }
    for net in sfs {
        if net.head_dim() != mdp.d_phi() || net.shape().input_dim() != mdp.input_dim() {
            return Err(Error::Shape("SF network does not match the MDP dimensions".into()));
        }
    }
    Ok((0..mdp.n_actions())
        .map(|a| {
            let x = mdp.feature(s, a);
            sfs.iter().map(|n| n.forward_dot(x, w)).fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// GPI Q-table over every state.
pub fn gpi_table(sfs: &[&NetworkParams], w: &[f64], mdp: &SyntheticMDP) -> Result<QTable> {
    let mut values = Vec::with_capacity(mdp.n_states() * mdp.n_actions());
    for s in 0..mdp.n_states() {
        values.extend(q_values_gpi(sfs, w, mdp, s)?);
    }
    QTable::new(mdp.n_states(), mdp.n_actions(), values)
}

/// Fraction of states whose greedy actions differ.
pub fn policy_mismatch(a: &QTable, b: &QTable) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("Q-tables differ in shape".into()));
    }
    let pa = a.greedy_policy();
    let pb = b.greedy_policy();
    let diff = pa.iter().zip(&pb).filter(|(x, y)| x != y).count();
    Ok(diff as f64 / a.n_states() as f64)
}
