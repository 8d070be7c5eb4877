//! Numerical checks of the convergence analysis on tiny instances:
//! feature and gradient second moments, the finite-difference Hessian of the
//! population loss at the planted network, and rate fits on training logs.

use nalgebra::DMatrix;

use crate::error::{ensure, Error, Result};
use crate::linalg::{self, linear_fit, symmetric_eigenvalues};
use crate::mdp::{sample_index, SyntheticMDP};
use crate::mlp::NetworkParams;
use crate::rng;
use crate::trainer::{full_batch, full_batch_w_errors, w_spectral_factor, KappaSchedule, TrainingLog};

/// Where `(s, a, s')` is drawn from when estimating `E[φφᵀ]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PhiDistribution {
    /// Exact enumeration: `(s, a)` uniform, `s'` from `P`.
    Uniform,
    /// Monte-Carlo estimate of the same measure, as seen by a uniformly
    /// exploring behaviour policy.
    Sampled { samples: usize, seed: u64 },
}

/// `E[φ(s,a,s') φ(s,a,s')ᵀ]` under `dist`.
pub fn phi_second_moment(mdp: &SyntheticMDP, dist: PhiDistribution) -> DMatrix<f64> {
    let (ns, na, d) = (mdp.n_states(), mdp.n_actions(), mdp.d_phi());
    let mut m = DMatrix::zeros(d, d);
    let mut add = |phi: &[f64], weight: f64| {
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] += weight * phi[i] * phi[j];
            }
        }
    };
    match dist {
        PhiDistribution::Uniform => {
            let pair_weight = 1.0 / (ns * na) as f64;
            for s in 0..ns {
                for a in 0..na {
                    for (sn, &p) in mdp.transition_row(s, a).iter().enumerate() {
                        if p > 0.0 {
                            add(mdp.phi(s, a, sn), pair_weight * p);
                        }
                    }
                }
            }
        }
        PhiDistribution::Sampled { samples, seed } => {
            let mut r = rng::substream(seed, "rho2", 0);
            let weight = 1.0 / samples.max(1) as f64;
            for _ in 0..samples {
                let s = rand::Rng::gen_range(&mut r, 0..ns);
                let a = rand::Rng::gen_range(&mut r, 0..na);
                let sn = sample_index(mdp.transition_row(s, a), &mut r);
                add(mdp.phi(s, a, sn), weight);
            }
        }
    }
    m
}

/// Smallest eigenvalue of `E[φφᵀ]`, clamped at 0 against round-off.
pub fn rho2_compute(mdp: &SyntheticMDP, dist: PhiDistribution) -> f64 {
    symmetric_eigenvalues(&phi_second_moment(mdp, dist))[0].max(0.0)
}

/// Population of the loss: `(s, π*(s))` for every state reachable under the
/// planted policy, weighted uniformly.
pub fn population_pairs(mdp: &SyntheticMDP) -> Vec<(usize, usize)> {
    let policy = mdp.planted_policy();
    mdp.reachable_states(&policy).into_iter().map(|s| (s, policy[s])).collect()
}

/// Regression targets `E_{s'}[φ(s,a,s') + γ ψ(Θ*; s', π*(s'))]` for `pairs`,
/// rows of length `d_phi`.
fn population_targets(mdp: &SyntheticMDP, pairs: &[(usize, usize)]) -> Vec<f64> {
    let policy = mdp.planted_policy();
    let psi_star = mdp.planted_sf_table();
    let (na, d) = (mdp.n_actions(), mdp.d_phi());
    let mut out = vec![0.0; pairs.len() * d];
    for (i, &(s, a)) in pairs.iter().enumerate() {
        let o = &mut out[i * d..(i + 1) * d];
        for (sn, &p) in mdp.transition_row(s, a).iter().enumerate() {
            if p > 0.0 {
                let an = policy[sn];
                linalg::axpy(p, mdp.phi(s, a, sn), o);
                linalg::axpy(p * mdp.gamma(), &psi_star[(sn * na + an) * d..(sn * na + an + 1) * d], o);
            }
        }
    }
    out
}

/// Population loss `f(Θ) = E_{(s,a)} ‖ψ(Θ; s, a) − target(s, a)‖²` with the
/// bootstrap held at the planted network.
pub struct PopulationLoss<'a> {
    mdp: &'a SyntheticMDP,
    pairs: Vec<(usize, usize)>,
    targets: Vec<f64>,
}

impl<'a> PopulationLoss<'a> {
    pub fn new(mdp: &'a SyntheticMDP) -> Self {
        let pairs = population_pairs(mdp);
        let targets = population_targets(mdp, &pairs);
        Self { mdp, pairs, targets }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn value(&self, theta: &NetworkParams) -> f64 {
        let d = self.mdp.d_phi();
        let mut total = 0.0;
        for (i, &(s, a)) in self.pairs.iter().enumerate() {
            let x = self.mdp.feature(s, a);
            for k in 0..d {
                let r = theta.trunk_output(k, x) - self.targets[i * d + k];
                total += r * r;
            }
        }
        total / self.pairs.len() as f64
    }

    /// Smallest |pre-activation| of `theta` over the population inputs.
    pub fn kink_margin(&self, theta: &NetworkParams) -> f64 {
        self.pairs
            .iter()
            .map(|&(s, a)| theta.min_abs_preactivation(self.mdp.feature(s, a)))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Flat indices of layer `layer` across all trunks.
pub fn layer_indices(theta: &NetworkParams, layer: usize) -> Result<Vec<usize>> {
    if layer >= theta.shape().depth() {
        return Err(Error::Validation(format!(
            "layer {layer} out of range (depth {})",
            theta.shape().depth()
        )));
    }
    Ok((0..theta.head_dim()).flat_map(|k| theta.layer_range_in(k, layer)).collect())
}

/// `E_{(s,a)}[Σ_k ∇ψ_k ∇ψ_kᵀ]` restricted to `layer`, over the loss
/// population.
pub fn layer_gradient_moment(theta: &NetworkParams, mdp: &SyntheticMDP, layer: usize) -> Result<DMatrix<f64>> {
    let inputs: Vec<&[f64]> = population_pairs(mdp).into_iter().map(|(s, a)| mdp.feature(s, a)).collect();
    gradient_moment(theta, &inputs, layer)
}

/// Mean of `Σ_k ∇ψ_k(x) ∇ψ_k(x)ᵀ` over `inputs`, restricted to `layer`.
pub fn gradient_moment(theta: &NetworkParams, inputs: &[&[f64]], layer: usize) -> Result<DMatrix<f64>> {
    ensure(!inputs.is_empty(), || "gradient moment needs at least one input".into())?;
    let idx = layer_indices(theta, layer)?;
    let n = idx.len();
    let mut m = DMatrix::zeros(n, n);
    let mut g = vec![0.0; theta.len()];
    for &x in inputs {
        for k in 0..theta.head_dim() {
            g.iter_mut().for_each(|v| *v = 0.0);
            let pass = theta.trunk_pass(k, x);
            theta.accumulate_trunk_grad(k, &pass, 1.0, &mut g);
            let v: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
            for i in 0..n {
                if v[i] != 0.0 {
                    for j in 0..n {
                        m[(i, j)] += v[i] * v[j];
                    }
                }
            }
        }
    }
    Ok(m / inputs.len() as f64)
}

/// Smallest eigenvalue of [`layer_gradient_moment`] at the planted network.
pub fn rho1_hat(mdp: &SyntheticMDP, layer: usize) -> Result<f64> {
    let m = layer_gradient_moment(mdp.planted_theta(), mdp, layer)?;
    Ok(symmetric_eigenvalues(&m)[0])
}

/// Central finite-difference Hessian of `f` at `x` over coordinates `idx`,
/// before symmetrization.
pub fn fd_hessian(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], idx: &[usize], h: f64) -> DMatrix<f64> {
    let n = idx.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut probe = x.to_vec();
    let mut eval = |di: f64, dj: f64, i: usize, j: usize| {
        probe[idx[i]] += di;
        probe[idx[j]] += dj;
        let v = f(&probe);
        probe[idx[i]] = x[idx[i]];
        probe[idx[j]] = x[idx[j]];
        v
    };
    for i in 0..n {
        for j in 0..n {
            let v = eval(h, h, i, j) - eval(h, -h, i, j) - eval(-h, h, i, j) + eval(-h, -h, i, j);
            hess[(i, j)] = v / (4.0 * h * h);
        }
    }
    hess
}

/// Largest `|H − Hᵀ|` entry relative to the largest `|H|` entry.
pub fn relative_asymmetry(h: &DMatrix<f64>) -> f64 {
    let scale = h.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (h - h.transpose()).amax() / scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct HessianSpectrum {
    pub layer: usize,
    pub n_params: usize,
    pub min_eig: f64,
    pub max_eig: f64,
    /// Relative asymmetry of the raw finite-difference matrix.
    pub asymmetry: f64,
}

pub const HESSIAN_STEP: f64 = 1e-5;
pub const KINK_MARGIN: f64 = 1e-4;
pub const HESSIAN_MAX_PARAMS: usize = 200;

/// Extreme eigenvalues of the layer-`layer` block of the population-loss
/// Hessian at `theta`, by central differences on the symmetrized matrix.
pub fn hessian_spectrum_at(theta: &NetworkParams, mdp: &SyntheticMDP, layer: usize) -> Result<HessianSpectrum> {
    if theta.head_dim() != mdp.d_phi() || theta.shape().input_dim() != mdp.input_dim() {
        return Err(Error::Shape("network does not match the MDP".into()));
    }
    ensure(theta.len() <= HESSIAN_MAX_PARAMS, || {
        format!("finite-difference Hessian needs at most {HESSIAN_MAX_PARAMS} parameters, got {}", theta.len())
    })?;
    let idx = layer_indices(theta, layer)?;
    let loss = PopulationLoss::new(mdp);
    let margin = loss.kink_margin(theta);
    if margin < KINK_MARGIN {
        return Err(Error::KinkProximity { min_abs: margin, margin: KINK_MARGIN });
    }
    let mut probe = theta.clone();
    let f = |p: &[f64]| {
        probe.as_mut_slice().copy_from_slice(p);
        loss.value(&probe)
    };
    let raw = fd_hessian(f, theta.as_slice(), &idx, HESSIAN_STEP);
    let asymmetry = relative_asymmetry(&raw);
    let ev = symmetric_eigenvalues(&raw);
    Ok(HessianSpectrum { layer, n_params: idx.len(), min_eig: ev[0], max_eig: ev[ev.len() - 1], asymmetry })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WRateFit {
    /// Per-step contraction `exp(slope)` of `log error` against `t`.
    pub ratio: f64,
    pub r2: f64,
    pub points: usize,
    /// Set when the series is constant and carries no rate.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaRateFit {
    pub loglog_slope: f64,
    pub r2: f64,
    pub points: usize,
    pub degenerate: bool,
}

pub const MIN_FIT_POINTS: usize = 20;
const FIT_FLOOR: f64 = 1e-12;

fn usable(ts: &[f64], errors: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if ts.len() != errors.len() {
        return Err(Error::Shape("time and error series differ in length".into()));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = ts
        .iter()
        .zip(errors)
        .filter(|(_, &e)| e > FIT_FLOOR && e.is_finite())
        .map(|(&t, &e)| (t, e.ln()))
        .unzip();
    ensure(xs.len() >= MIN_FIT_POINTS, || {
        format!("rate fit needs at least {MIN_FIT_POINTS} points above {FIT_FLOOR:e}, got {}", xs.len())
    })?;
    Ok((xs, ys))
}

fn is_flat(ys: &[f64]) -> bool {
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo <= 1e-12
}

/// Least-squares fit of `log e_t` against `t`.
pub fn fit_geometric(ts: &[f64], errors: &[f64]) -> Result<WRateFit> {
    let (xs, ys) = usable(ts, errors)?;
    let degenerate = is_flat(&ys);
    let (slope, _, r2) = linear_fit(&xs, &ys);
    let slope = if degenerate { 0.0 } else { slope };
    Ok(WRateFit { ratio: slope.exp(), r2, points: xs.len(), degenerate })
}

/// Least-squares fit of `log e_t` against `log t` over the second half of
/// the series.
pub fn fit_loglog_tail(ts: &[f64], errors: &[f64]) -> Result<ThetaRateFit> {
    if ts.len() != errors.len() {
        return Err(Error::Shape("time and error series differ in length".into()));
    }
    ensure(ts.iter().all(|&t| t > 0.0), || "log-log fit needs positive times".into())?;
    let half = ts.len() / 2;
    let logs: Vec<f64> = ts[half..].iter().map(|t| t.ln()).collect();
    let (xs, ys) = usable(&logs, &errors[half..])?;
    let degenerate = is_flat(&ys);
    let (slope, _, r2) = linear_fit(&xs, &ys);
    Ok(ThetaRateFit { loglog_slope: if degenerate { 0.0 } else { slope }, r2, points: xs.len(), degenerate })
}

fn log_times(log: &TrainingLog) -> Vec<f64> {
    log.rows.iter().map(|r| r.t as f64).collect()
}

/// Geometric-rate fit of the log's `w_error` column.
pub fn rate_fit_w(log: &TrainingLog) -> Result<WRateFit> {
    fit_geometric(&log_times(log), &log.column(|r| r.w_error))
}

/// Tail log-log slope of the log's `theta_error` column.
pub fn rate_fit_theta(log: &TrainingLog) -> Result<ThetaRateFit> {
    fit_loglog_tail(&log_times(log), &log.column(|r| r.theta_error))
}

/// Summary constants written next to a run's logs.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoryConstants {
    /// One entry per hidden layer.
    pub rho1_hat: Vec<f64>,
    pub rho2: f64,
    /// Geometric fit of the training run's `w_error`.
    pub w_ratio: Option<f64>,
    /// Tail log-log slope of the training run's `theta_error`.
    pub theta_slope: Option<f64>,
    /// `theta_error(T) / theta_error(T/10)`.
    pub theta_error_ratio: Option<f64>,
    /// Geometric fit of full-batch reward-mapping updates from `w = 0`.
    pub full_batch_w_ratio: Option<f64>,
    pub full_batch_w_r2: Option<f64>,
    /// Largest `|1 − κλ|` over the eigenvalues of the full-batch `Σφφᵀ`.
    pub w_spectral_factor: f64,
}

pub const THEORY_SCHEMA: &str = "sfdqn-theory v1";
pub const FULL_BATCH_ITERATIONS: usize = 200;

impl TheoryConstants {
    /// Constants of task 1 of `mdp`; `log` is its training log and `kappa`
    /// the reward-mapping step rule, applied to the full batch.
    pub fn compute(mdp: &SyntheticMDP, log: Option<&TrainingLog>, kappa: &KappaSchedule) -> Result<Self> {
        let depth = mdp.planted_theta().shape().depth();
        let rho1_hat = (0..depth).map(|l| rho1_hat(mdp, l)).collect::<Result<Vec<_>>>()?;
        let rho2 = rho2_compute(mdp, PhiDistribution::Uniform);
        let w_ratio = log.and_then(|l| rate_fit_w(l).ok()).filter(|f| !f.degenerate).map(|f| f.ratio);
        let theta_slope = log.and_then(|l| rate_fit_theta(l).ok()).filter(|f| !f.degenerate).map(|f| f.loglog_slope);
        let theta_error_ratio = log.and_then(|l| {
            let n = l.rows.len();
            (n >= 10).then(|| l.rows[n - 1].theta_error / l.rows[n / 10 - 1].theta_error)
        });

        let k = kappa.value(mdp, full_batch(mdp, 0).len());
        let errors = full_batch_w_errors(mdp, 0, &vec![0.0; mdp.d_phi()], k, FULL_BATCH_ITERATIONS)?;
        let ts: Vec<f64> = (1..=errors.len()).map(|t| t as f64).collect();
        let fit = fit_geometric(&ts, &errors).ok().filter(|f| !f.degenerate);
        Ok(Self {
            rho1_hat,
            rho2,
            w_ratio,
            theta_slope,
            theta_error_ratio,
            full_batch_w_ratio: fit.as_ref().map(|f| f.ratio),
            full_batch_w_r2: fit.as_ref().map(|f| f.r2),
            w_spectral_factor: w_spectral_factor(mdp, k),
        })
    }

    /// `(quantity, value)` pairs; absent fits are NaN.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> =
            self.rho1_hat.iter().enumerate().map(|(l, &r)| (format!("rho1_hat_layer{}", l + 1), r)).collect();
        let opt = |v: Option<f64>| v.unwrap_or(f64::NAN);
        out.push(("rho2".into(), self.rho2));
        out.push(("w_ratio".into(), opt(self.w_ratio)));
        out.push(("theta_loglog_slope".into(), opt(self.theta_slope)));
        out.push(("theta_error_ratio".into(), opt(self.theta_error_ratio)));
        out.push(("full_batch_w_ratio".into(), opt(self.full_batch_w_ratio)));
        out.push(("full_batch_w_r2".into(), opt(self.full_batch_w_r2)));
        out.push(("w_spectral_factor".into(), self.w_spectral_factor));
        out
    }
}
