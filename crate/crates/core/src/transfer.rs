//! Zero-shot transfer, transfer bounds and the GPI-effect sweep.

use crate::error::{ensure, Error, Result};
use crate::linalg;
use crate::mdp::{EnvConfig, SyntheticMDP};
use crate::mlp::NetworkParams;
use crate::policy::gpi_table;
use crate::rng;
use crate::table::QTable;
use crate::trainer::{train_task, InitSpec, TaskResult, TrainerConfig, ORACLE_TOL};

/// `max_j ψ(Θ_j; s, a)ᵀ w_target` for every pair.
pub fn sf_transfer_q(sources: &[&NetworkParams], w_target: &[f64], mdp: &SyntheticMDP) -> Result<QTable> {
    gpi_table(sources, w_target, mdp)
}

/// `sup_{s,a} |Q*(s,a) − Q^π(s,a)|` where `π` is greedy for `q_est` and both
/// sides use the reward `φᵀ w_target`.
pub fn transfer_error(q_est: &QTable, w_target: &[f64], mdp: &SyntheticMDP) -> Result<f64> {
    transfer_error_against(q_est, w_target, mdp, &optimal_q(mdp, w_target)?)
}

/// Optimal Q-table by exact evaluation of the tabular optimal policy.
pub fn optimal_q(mdp: &SyntheticMDP, w: &[f64]) -> Result<QTable> {
    let oracle = mdp.tabular_sf_solve(w, ORACLE_TOL)?;
    mdp.evaluate_policy(w, &oracle.policy)
}

/// [`transfer_error`] with a precomputed optimum.
pub fn transfer_error_against(q_est: &QTable, w_target: &[f64], mdp: &SyntheticMDP, q_star: &QTable) -> Result<f64> {
    if q_est.n_states() != mdp.n_states() || q_est.n_actions() != mdp.n_actions() {
        return Err(Error::Shape("Q estimate does not match the MDP".into()));
    }
    let q_pi = mdp.evaluate_policy(w_target, &q_est.greedy_policy())?;
    q_star.sup_distance(&q_pi)
}

/// `min_j ‖w_j − w_target‖`.
pub fn min_task_distance(sources: &[&[f64]], target: &[f64]) -> Result<f64> {
    ensure(!sources.is_empty(), || "need at least one source task".into())?;
    for w in sources {
        if w.len() != target.len() {
            return Err(Error::Shape("source and target reward mappings differ in length".into()));
        }
    }
    Ok(sources.iter().map(|w| linalg::distance(w, target)).fold(f64::INFINITY, f64::min))
}

fn bound(mdp: &SyntheticMDP, coeff: f64, sources: &[&[f64]], target: &[f64], psi_err: f64) -> Result<f64> {
    let g = mdp.gamma();
    ensure(g < 1.0, || "bounds need gamma < 1".into())?;
    ensure(psi_err >= 0.0 && psi_err.is_finite(), || format!("psi_err must be >= 0, got {psi_err}"))?;
    let min_d = min_task_distance(sources, target)?;
    Ok(coeff * mdp.phi_max() * min_d + psi_err * linalg::norm(target) / (1.0 - g))
}

/// SF-DQN transfer bound
/// `2γ/(1−γ) · φ_max · min_j ‖w_j − w‖ + psi_err · ‖w‖ / (1−γ)`, where
/// `psi_err` is the measured sup-norm SF error of the sources.
pub fn thm3_bound(mdp: &SyntheticMDP, sources: &[&[f64]], target: &[f64], psi_err: f64) -> Result<f64> {
    let g = mdp.gamma();
    bound(mdp, 2.0 * g / (1.0 - g), sources, target, psi_err)
}

/// DQN transfer bound: as [`thm3_bound`] with first coefficient `2/(1−γ)`.
pub fn thm4_bound(mdp: &SyntheticMDP, sources: &[&[f64]], target: &[f64], psi_err: f64) -> Result<f64> {
    let g = mdp.gamma();
    bound(mdp, 2.0 / (1.0 - g), sources, target, psi_err)
}

/// Task relevance `(1+γ) R_max / (1−γ) · min_i ‖w_i − w_j‖ / ‖Θ_j^(0) − Θ_j*‖`.
pub fn q_star(mdp: &SyntheticMDP, priors: &[&[f64]], new_task: &[f64], theta_init_dist: f64) -> Result<f64> {
    ensure(theta_init_dist > 0.0 && theta_init_dist.is_finite(), || {
        format!("initial distance must be positive, got {theta_init_dist}")
    })?;
    let g = mdp.gamma();
    let min_d = min_task_distance(priors, new_task)?;
    Ok((1.0 + g) * mdp.r_max() / (1.0 - g) * min_d / theta_init_dist)
}

/// `sup_{s,a} ‖ψ(Θ; s,a) − ψ_ref(s,a)‖` against an SF table.
pub fn psi_sup_error(theta: &NetworkParams, psi_ref: &[f64], mdp: &SyntheticMDP) -> Result<f64> {
    let d = mdp.d_phi();
    if psi_ref.len() != mdp.n_states() * mdp.n_actions() * d || theta.head_dim() != d {
        return Err(Error::Shape("SF table does not match the MDP".into()));
    }
    let table = mdp.sf_table(theta);
    Ok(table
        .chunks(d)
        .zip(psi_ref.chunks(d))
        .map(|(a, b)| linalg::distance(a, b))
        .fold(0.0, f64::max))
}

/// Fixed evaluation start states and the reward range used to normalize
/// returns on one task.
#[derive(Clone, Debug)]
pub struct ReturnScale {
    pub starts: Vec<usize>,
    /// Mean optimal return over `starts`.
    pub best: f64,
    /// Mean return of the worst deterministic policy over `starts`.
    pub worst: f64,
}

impl ReturnScale {
    pub fn new(mdp: &SyntheticMDP, w: &[f64], starts: Vec<usize>) -> Result<Self> {
        ensure(!starts.is_empty(), || "need at least one evaluation start state".into())?;
        let best_sol = mdp.tabular_sf_solve(w, ORACLE_TOL)?;
        let neg: Vec<f64> = w.iter().map(|v| -v).collect();
        let worst_sol = mdp.tabular_sf_solve(&neg, ORACLE_TOL)?;
        let best = mean_return(mdp, w, &best_sol.policy, &starts)?;
        let worst = mean_return(mdp, w, &worst_sol.policy, &starts)?;
        Ok(Self { starts, best, worst })
    }

    /// `(R_π − R_worst) / (R_best − R_worst)` clipped to `[0, 1]`.
    pub fn normalize(&self, mdp: &SyntheticMDP, w: &[f64], policy: &[usize]) -> Result<f64> {
        let r = mean_return(mdp, w, policy, &self.starts)?;
        let span = self.best - self.worst;
        if span <= 1e-12 {
            return Ok(1.0);
        }
        Ok(((r - self.worst) / span).clamp(0.0, 1.0))
    }
}

/// Exact expected discounted return averaged over `starts`.
pub fn mean_return(mdp: &SyntheticMDP, w: &[f64], policy: &[usize], starts: &[usize]) -> Result<f64> {
    let v = mdp.policy_values(w, policy)?;
    Ok(starts.iter().map(|&s| v[s]).sum::<f64>() / starts.len() as f64)
}

/// Evaluation start states drawn from the `eval` stream.
pub fn eval_starts(mdp: &SyntheticMDP, seed: u64, episodes: usize) -> Vec<usize> {
    use rand::Rng as _;
    let mut r = rng::substream(seed, "eval", 0);
    (0..episodes).map(|_| r.gen_range(0..mdp.n_states())).collect()
}

/// Mean normalized reward of the GPI (or plain) greedy policy over the
/// snapshots of a target-task run.
pub fn average_normalized_reward(
    mdp: &SyntheticMDP,
    task: usize,
    priors: &[&NetworkParams],
    run: &TaskResult,
    scale: &ReturnScale,
) -> Result<f64> {
    ensure(!run.snapshots.is_empty(), || "run has no snapshots".into())?;
    let w_true = &mdp.task(task)?.w;
    let mut total = 0.0;
    for snap in &run.snapshots {
        let mut set = priors.to_vec();
        set.push(&snap.theta);
        let policy = gpi_table(&set, &snap.w, mdp)?.greedy_policy();
        total += scale.normalize(mdp, w_true, &policy)?;
    }
    Ok(total / run.snapshots.len() as f64)
}

/// One distance of the GPI-effect sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct GpiRow {
    /// Requested perturbation size.
    pub distance: f64,
    /// Mean of `‖w_1 − w_2‖` after normalization.
    pub realized_distance: f64,
    pub with_gpi_mean: f64,
    pub with_gpi_std: f64,
    pub without_gpi_mean: f64,
    pub without_gpi_std: f64,
    pub seeds: usize,
}

pub const GPI_SCHEMA: &str = "sfdqn-gpi-effect v1";

impl GpiRow {
    pub const HEADER: &'static str =
        "distance,realized_distance,with_gpi_mean,with_gpi_std,without_gpi_mean,without_gpi_std,seeds";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.distance,
            self.realized_distance,
            self.with_gpi_mean,
            self.with_gpi_std,
            self.without_gpi_mean,
            self.without_gpi_std,
            self.seeds
        )
    }

    pub fn gap(&self) -> f64 {
        self.with_gpi_mean - self.without_gpi_mean
    }
}

/// Settings of [`gpi_effect_table`].
#[derive(Clone, Debug)]
pub struct GpiSweep {
    pub env: EnvConfig,
    pub distances: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Training of the source task.
    pub source: TrainerConfig,
    /// Training of the target task; `gpi` is overridden per arm and the
    /// network starts from a fresh random draw.
    pub target: TrainerConfig,
    /// Evaluation start states per snapshot.
    pub episodes: usize,
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Normalized average reward on a perturbed target task, with and without
/// GPI over the trained source network, per perturbation size.
pub fn gpi_effect_table(sweep: &GpiSweep) -> Result<Vec<GpiRow>> {
    ensure(!sweep.seeds.is_empty(), || "need at least one seed".into())?;
    ensure(sweep.distances.iter().all(|&d| d >= 0.0 && d.is_finite()), || {
        "distances must be finite and >= 0".into()
    })?;
    ensure(sweep.target.snapshot_every.is_some(), || "target runs need snapshot_every".into())?;
    let n = sweep.distances.len();
    let mut with = vec![Vec::new(); n];
    let mut without = vec![Vec::new(); n];
    let mut realized = vec![Vec::new(); n];
    for &seed in &sweep.seeds {
        let env = EnvConfig { seed: rng::substream_seed(seed, "env", 0), ..sweep.env.clone() };
        let base = SyntheticMDP::generate(&env)?;
        let source_cfg = TrainerConfig { seed: rng::substream_seed(seed, "train", 0), ..sweep.source.clone() };
        let source = train_task(&base, 0, &[], &source_cfg)?;
        for (i, &delta) in sweep.distances.iter().enumerate() {
            let mut mdp = base.clone();
            let task = mdp.add_perturbed_task(0, delta, rng::substream_seed(seed, "task", i as u64))?;
            let w_target = mdp.task(task)?.w.clone();
            realized[i].push(linalg::distance(&w_target, &mdp.tasks()[0].w));
            let scale = ReturnScale::new(&mdp, &w_target, eval_starts(&mdp, seed, sweep.episodes))?;
            let priors = [source.theta.clone()];
            for (gpi, out) in [(true, &mut with[i]), (false, &mut without[i])] {
                let cfg = TrainerConfig {
                    gpi,
                    init: InitSpec::Random,
                    seed: rng::substream_seed(seed, "train", 1),
                    ..sweep.target.clone()
                };
                let run = train_task(&mdp, task, &priors, &cfg)?;
                let eval_priors: Vec<&NetworkParams> = if gpi { vec![&source.theta] } else { Vec::new() };
                out.push(average_normalized_reward(&mdp, task, &eval_priors, &run, &scale)?);
            }
        }
    }
    Ok((0..n)
        .map(|i| {
            let (wm, ws) = mean_std(&with[i]);
            let (om, os) = mean_std(&without[i]);
            GpiRow {
                distance: sweep.distances[i],
                realized_distance: mean_std(&realized[i]).0,
                with_gpi_mean: wm,
                with_gpi_std: ws,
                without_gpi_mean: om,
                without_gpi_std: os,
                seeds: sweep.seeds.len(),
            }
        })
        .collect())
}
