//! Synthetic finite MDPs with a planted successor feature.
//!
//! Generation draws a transition kernel, unit-norm state-action features and a
//! random ReLU network `Θ*`, tabulates `ψ*(s,a) = ψ(Θ*; x(s,a))`, and then
//! defines the transition feature pointwise as
//!
//! ```text
//! φ(s,a,s') = ψ*(s,a) − γ · ψ*(s', a*(s'))
//! ```
//!
//! where `a*` is greedy for `ψ*ᵀ w*_1`. The successor-feature Bellman identity
//! then holds exactly for task 1 and `Q*_1 = ψ*ᵀ w*_1`. Other tasks reuse `φ`
//! with their own reward mapping and are solved exactly by
//! [`SyntheticMDP::tabular_sf_solve`].

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{ensure, Error, Result};
use crate::linalg;
use crate::mlp::{NetShape, NetworkParams};
use crate::rng::{self, Rng};
use crate::table::{argmax, QTable};

/// Parameters of [`SyntheticMDP::generate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub d_phi: usize,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Number of successor states with positive probability per `(s,a)`;
    /// 0 means dense.
    #[serde(default)]
    pub branching: usize,
    /// Smallest allowed gap between the best and second-best task-1 optimal
    /// action values; planted draws below it are rejected. 0 disables.
    #[serde(default)]
    pub min_action_gap: f64,
    /// Smallest allowed eigenvalue, per hidden layer, of the planted
    /// network's gradient second moment over the task-1 optimal pairs of
    /// reachable states; planted draws below it are rejected. 0 disables.
    #[serde(default)]
    pub min_rho1: f64,
}

impl EnvConfig {
    /// Default desk scale: 50 states, 4 actions, `d_φ = 4`, two hidden layers
    /// of width 16.
    pub fn desk(seed: u64) -> Self {
        Self {
            n_states: 50,
            n_actions: 4,
            d_phi: 4,
            input_dim: 8,
            hidden: vec![16, 16],
            gamma: 0.9,
            seed,
            branching: 0,
            min_action_gap: 0.0,
            min_rho1: 0.0,
        }
    }

    pub fn net_shape(&self) -> Result<NetShape> {
        NetShape::new(self.input_dim, self.hidden.clone())
    }
}

/// How a task's reward mapping came to be.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskOrigin {
    /// Task 1 of a generated MDP; `ψ*` is the planted network.
    Planted,
    Explicit,
    /// `normalize(w_base + delta · u)` for a random unit `u`.
    Perturbed { base: usize, delta: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub w: Vec<f64>,
    pub origin: TaskOrigin,
}

/// One environment step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    /// Reward under the task that was active when the step was taken.
    pub reward: f64,
}

/// Explicit tables for [`SyntheticMDP::from_parts`].
#[derive(Clone, Debug)]
pub struct MdpParts {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// `P(s'|s,a)` at index `(s * n_actions + a) * n_states + s'`.
    pub transition: Vec<f64>,
    /// `x(s,a)` rows of length `input_dim`.
    pub features: Vec<f64>,
    /// `φ(s,a,s')` rows of length `d_phi`, indexed like `transition`.
    pub phi: Vec<f64>,
    pub tasks: Vec<Task>,
    /// Network whose output is `ψ*` for task 1 (need not be realizable for
    /// hand-built instances).
    pub planted_theta: NetworkParams,
}

/// Exact solution of a task by tabular fixed-point iteration.
#[derive(Clone, Debug)]
pub struct SfSolution {
    /// `ψ(s,a)` rows of length `d_phi`.
    pub psi: Vec<f64>,
    pub q: QTable,
    pub policy: Vec<usize>,
    pub iterations: usize,
    /// Sup-norm residual of the SF Bellman equation under `policy`.
    pub psi_residual: f64,
    /// Sup-norm Bellman optimality residual of `q`.
    pub q_residual: f64,
    /// Per-iteration sup-norm change of `ψ`.
    pub residual_trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SyntheticMDP {
    config: EnvConfig,
    transition: Vec<f64>,
    features: Vec<f64>,
    phi: Vec<f64>,
    phi_bar: Vec<f64>,
    phi_max: f64,
    r_max: f64,
    tasks: Vec<Task>,
    planted_theta: NetworkParams,
}

const ACTIVITY_RANGE: (f64, f64) = (0.1, 0.9);

impl SyntheticMDP {
    /// Builds a planted instance from `cfg`.
    pub fn generate(cfg: &EnvConfig) -> Result<Self> {
        ensure(cfg.n_states >= 2, || format!("n_states must be >= 2, got {}", cfg.n_states))?;
        ensure(cfg.n_actions >= 1, || "n_actions must be >= 1".into())?;
        ensure(cfg.d_phi >= 1, || "d_phi must be >= 1".into())?;
        ensure((0.0..1.0).contains(&cfg.gamma), || format!("gamma must lie in [0,1), got {}", cfg.gamma))?;
        ensure(cfg.branching <= cfg.n_states, || {
            format!("branching {} exceeds n_states {}", cfg.branching, cfg.n_states)
        })?;
        let shape = cfg.net_shape()?;
        let (ns, na, d) = (cfg.n_states, cfg.n_actions, cfg.d_phi);

        let mut rng = rng::substream(cfg.seed, "env", 0);
        let transition = draw_kernel(ns, na, cfg.branching, &mut rng);

        let mut features = Vec::with_capacity(ns * na * cfg.input_dim);
        for _ in 0..ns * na {
            features.extend(rng::unit_vector(&mut rng, cfg.input_dim));
        }

        ensure(cfg.min_action_gap >= 0.0 && cfg.min_action_gap.is_finite(), || {
            format!("min_action_gap must be >= 0, got {}", cfg.min_action_gap)
        })?;
        ensure(cfg.min_rho1 >= 0.0 && cfg.min_rho1.is_finite(), || {
            format!("min_rho1 must be >= 0, got {}", cfg.min_rho1)
        })?;
        const PLANT_ATTEMPTS: usize = 1000;
        let mut attempt = 0;
        let (planted_theta, w1, psi_star, greedy) = loop {
            let theta = draw_planted(&shape, d, &features, cfg.input_dim, &mut rng);
            let w1: Vec<f64> = {
                let v: Vec<f64> = (0..d).map(|_| rng::normal(&mut rng).abs() + 1e-3).collect();
                let n = linalg::norm(&v);
                v.into_iter().map(|x| x / n).collect()
            };
            let psi: Vec<f64> = (0..ns * na)
                .flat_map(|i| theta.forward_unchecked(&features[i * cfg.input_dim..(i + 1) * cfg.input_dim]))
                .collect();
            let mut gap = f64::INFINITY;
            let greedy: Vec<usize> = (0..ns)
                .map(|s| {
                    let q: Vec<f64> = (0..na)
                        .map(|a| linalg::dot(&psi[(s * na + a) * d..(s * na + a + 1) * d], &w1))
                        .collect();
                    let best = argmax(&q);
                    for (a, v) in q.iter().enumerate() {
                        if a != best {
                            gap = gap.min(q[best] - v);
                        }
                    }
                    best
                })
                .collect();
            attempt += 1;
            if gap >= cfg.min_action_gap
                && (cfg.min_rho1 == 0.0
                    || planted_rho1(&theta, &transition, &features, &greedy, cfg)? >= cfg.min_rho1)
            {
                break (theta, w1, psi, greedy);
            }
            if attempt == PLANT_ATTEMPTS {
                return Err(Error::Validation(format!(
                    "no planted network met min_action_gap {} and min_rho1 {} in {PLANT_ATTEMPTS} draws",
                    cfg.min_action_gap, cfg.min_rho1
                )));
            }
        };

        let mut phi = vec![0.0; ns * na * ns * d];
        for s in 0..ns {
            for a in 0..na {
                let here = &psi_star[(s * na + a) * d..(s * na + a + 1) * d];
                for sn in 0..ns {
                    let an = greedy[sn];
                    let next = &psi_star[(sn * na + an) * d..(sn * na + an + 1) * d];
                    let out = &mut phi[((s * na + a) * ns + sn) * d..((s * na + a) * ns + sn + 1) * d];
                    for k in 0..d {
                        out[k] = here[k] - cfg.gamma * next[k];
                    }
                }
            }
        }

        let tasks = vec![Task { w: w1, origin: TaskOrigin::Planted }];
        Ok(Self::assemble(cfg.clone(), transition, features, phi, tasks, planted_theta))
    }

    /// Builds an MDP from explicit tables, validating every structural
    /// invariant.
    pub fn from_parts(parts: MdpParts) -> Result<Self> {
        let MdpParts { n_states: ns, n_actions: na, gamma, transition, features, phi, tasks, planted_theta } = parts;
        ensure(ns >= 1 && na >= 1, || "need at least one state and one action".into())?;
        ensure((0.0..1.0).contains(&gamma), || format!("gamma must lie in [0,1), got {gamma}"))?;
        let d = planted_theta.head_dim();
        let din = planted_theta.shape().input_dim();
        if transition.len() != ns * na * ns {
            return Err(Error::Shape(format!("transition table needs {} entries", ns * na * ns)));
        }
        if features.len() != ns * na * din {
            return Err(Error::Shape(format!("feature table needs {} entries", ns * na * din)));
        }
        if phi.len() != ns * na * ns * d {
            return Err(Error::Shape(format!("phi table needs {} entries", ns * na * ns * d)));
        }
        for (i, row) in transition.chunks(ns).enumerate() {
            ensure(row.iter().all(|&p| p >= 0.0 && p.is_finite()), || {
                format!("transition row {i} has negative or non-finite entries")
            })?;
            let sum: f64 = row.iter().sum();
            ensure((sum - 1.0).abs() <= 1e-12, || format!("transition row {i} sums to {sum}"))?;
        }
        for (i, x) in features.chunks(din).enumerate() {
            let n = linalg::norm(x);
            ensure(n <= 1.0 + 1e-12 && n.is_finite(), || format!("feature {i} has norm {n}"))?;
        }
        ensure(phi.iter().all(|v| v.is_finite()), || "phi must be finite".into())?;
        for (i, t) in tasks.iter().enumerate() {
            if t.w.len() != d {
                return Err(Error::Shape(format!("task {i} has length {}, d_phi is {d}", t.w.len())));
            }
        }
        let config = EnvConfig {
            n_states: ns,
            n_actions: na,
            d_phi: d,
            input_dim: din,
            hidden: planted_theta.shape().widths().to_vec(),
            gamma,
            seed: 0,
            branching: 0,
            min_action_gap: 0.0,
            min_rho1: 0.0,
        };
        Ok(Self::assemble(config, transition, features, phi, tasks, planted_theta))
    }

    fn assemble(
        config: EnvConfig,
        transition: Vec<f64>,
        features: Vec<f64>,
        phi: Vec<f64>,
        tasks: Vec<Task>,
        planted_theta: NetworkParams,
    ) -> Self {
        let (ns, na, d) = (config.n_states, config.n_actions, config.d_phi);
        let phi_max = phi.chunks(d).map(linalg::norm).fold(0.0, f64::max);
        let mut phi_bar = vec![0.0; ns * na * d];
        for sa in 0..ns * na {
            let out = &mut phi_bar[sa * d..(sa + 1) * d];
            for sn in 0..ns {
                let p = transition[sa * ns + sn];
                if p != 0.0 {
                    linalg::axpy(p, &phi[(sa * ns + sn) * d..(sa * ns + sn + 1) * d], out);
                }
            }
        }
        let mut mdp = Self { config, transition, features, phi, phi_bar, phi_max, r_max: 0.0, tasks, planted_theta };
        mdp.r_max = (0..mdp.tasks.len()).map(|i| mdp.task_reward_bound(i)).fold(0.0, f64::max);
        mdp
    }

    fn task_reward_bound(&self, task: usize) -> f64 {
        let w = &self.tasks[task].w;
        self.phi
            .chunks(self.config.d_phi)
            .map(|p| linalg::dot(p, w).abs())
            .fold(0.0, f64::max)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn n_states(&self) -> usize {
        self.config.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.config.n_actions
    }

    pub fn d_phi(&self) -> usize {
        self.config.d_phi
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn gamma(&self) -> f64 {
        self.config.gamma
    }

    pub fn phi_max(&self) -> f64 {
        self.phi_max
    }

    /// Largest `|φᵀ w_i|` over all transitions and tasks.
    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, i: usize) -> Result<&Task> {
        self.tasks
            .get(i)
            .ok_or_else(|| Error::Validation(format!("task {i} does not exist ({} tasks)", self.tasks.len())))
    }

    pub fn planted_theta(&self) -> &NetworkParams {
        &self.planted_theta
    }

    pub fn transition_table(&self) -> &[f64] {
        &self.transition
    }

    pub fn feature_table(&self) -> &[f64] {
        &self.features
    }

    pub fn phi_table(&self) -> &[f64] {
        &self.phi
    }

    pub fn feature(&self, s: usize, a: usize) -> &[f64] {
        let din = self.config.input_dim;
        let i = s * self.config.n_actions + a;
        &self.features[i * din..(i + 1) * din]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let ns = self.config.n_states;
        let i = s * self.config.n_actions + a;
        &self.transition[i * ns..(i + 1) * ns]
    }

    pub fn phi(&self, s: usize, a: usize, s_next: usize) -> &[f64] {
        let d = self.config.d_phi;
        let i = (s * self.config.n_actions + a) * self.config.n_states + s_next;
        &self.phi[i * d..(i + 1) * d]
    }

    /// `E_{s'}[φ(s,a,s')]`.
    pub fn expected_phi(&self, s: usize, a: usize) -> &[f64] {
        let d = self.config.d_phi;
        let i = s * self.config.n_actions + a;
        &self.phi_bar[i * d..(i + 1) * d]
    }

    pub fn reward(&self, task: usize, s: usize, a: usize, s_next: usize) -> Result<f64> {
        let w = &self.task(task)?.w;
        Ok(linalg::dot(self.phi(s, a, s_next), w))
    }

    fn check_ids(&self, s: usize, a: usize) -> Result<()> {
        ensure(s < self.n_states(), || format!("state {s} out of range"))?;
        ensure(a < self.n_actions(), || format!("action {a} out of range"))
    }

    /// Appends a task with an explicit reward mapping.
    pub fn add_task(&mut self, w: Vec<f64>) -> Result<usize> {
        if w.len() != self.d_phi() {
            return Err(Error::Shape(format!("reward mapping has length {}, d_phi is {}", w.len(), self.d_phi())));
        }
        ensure(w.iter().all(|v| v.is_finite()), || "reward mapping must be finite".into())?;
        self.push_task(Task { w, origin: TaskOrigin::Explicit })
    }

    /// Appends `normalize(w_base + delta · u)` for a seeded random unit `u`.
    /// `delta = 0` copies the base mapping exactly.
    pub fn add_perturbed_task(&mut self, base: usize, delta: f64, seed: u64) -> Result<usize> {
        ensure(delta >= 0.0 && delta.is_finite(), || format!("delta must be >= 0, got {delta}"))?;
        let w_base = self.task(base)?.w.clone();
        let w = if delta == 0.0 {
            w_base
        } else {
            let raw = perturb(&w_base, delta, seed);
            let n = linalg::norm(&raw);
            ensure(n > 1e-12, || "perturbation cancelled the base mapping".into())?;
            raw.into_iter().map(|v| v / n).collect()
        };
        self.push_task(Task { w, origin: TaskOrigin::Perturbed { base, delta, seed } })
    }

    fn push_task(&mut self, task: Task) -> Result<usize> {
        self.tasks.push(task);
        let id = self.tasks.len() - 1;
        self.r_max = self.r_max.max(self.task_reward_bound(id));
        Ok(id)
    }

    /// Samples `s' ~ P(·|s,a)` and reports the reward of `task`.
    pub fn step(&self, s: usize, a: usize, task: usize, rng: &mut Rng) -> Result<Transition> {
        self.check_ids(s, a)?;
        let w = &self.task(task)?.w;
        let s_next = sample_index(self.transition_row(s, a), rng);
        let reward = linalg::dot(self.phi(s, a, s_next), w);
        Ok(Transition { s, a, s_next, reward })
    }

    /// `ψ(Θ*; x(s,a))` for every pair, rows of length `d_phi`.
    pub fn planted_sf_table(&self) -> Vec<f64> {
        self.sf_table(&self.planted_theta)
    }

    /// `ψ(θ; x(s,a))` for every pair.
    pub fn sf_table(&self, theta: &NetworkParams) -> Vec<f64> {
        (0..self.n_states() * self.n_actions())
            .flat_map(|i| {
                let din = self.config.input_dim;
                theta.forward_unchecked(&self.features[i * din..(i + 1) * din])
            })
            .collect()
    }

    /// Greedy policy of `ψᵀ w` for an SF table.
    pub fn greedy_from_sf(&self, psi: &[f64], w: &[f64]) -> Vec<usize> {
        self.q_from_sf(psi, w).greedy_policy()
    }

    pub fn q_from_sf(&self, psi: &[f64], w: &[f64]) -> QTable {
        let d = self.d_phi();
        let na = self.n_actions();
        QTable::from_fn(self.n_states(), na, |s, a| {
            linalg::dot(&psi[(s * na + a) * d..(s * na + a + 1) * d], w)
        })
    }

    /// Task-1 optimal policy implied by the planted network.
    pub fn planted_policy(&self) -> Vec<usize> {
        self.greedy_from_sf(&self.planted_sf_table(), &self.tasks[0].w)
    }

    /// `(E_{s'} ψ(s', π(s')))` for every pair, rows of length `d_phi`.
    fn expected_next(&self, psi: &[f64], policy: &[usize]) -> Vec<f64> {
        let (ns, na, d) = (self.n_states(), self.n_actions(), self.d_phi());
        let mut out = vec![0.0; ns * na * d];
        for sa in 0..ns * na {
            let row = &self.transition[sa * ns..(sa + 1) * ns];
            let o = &mut out[sa * d..(sa + 1) * d];
            for (sn, &p) in row.iter().enumerate() {
                if p != 0.0 {
                    let an = policy[sn];
                    linalg::axpy(p, &psi[(sn * na + an) * d..(sn * na + an + 1) * d], o);
                }
            }
        }
        out
    }

    /// `sup_{s,a,k} |ψ(s,a) − E_{s'}[φ + γ ψ(s', π(s'))]|`.
    pub fn sf_bellman_residual(&self, psi: &[f64], policy: &[usize]) -> f64 {
        let next = self.expected_next(psi, policy);
        let g = self.gamma();
        psi.iter()
            .zip(&self.phi_bar)
            .zip(&next)
            .map(|((p, f), n)| (p - f - g * n).abs())
            .fold(0.0, f64::max)
    }

    /// Sup-norm Bellman optimality residual of a Q-table for reward `φᵀw`.
    pub fn bellman_optimality_residual(&self, q: &QTable, w: &[f64]) -> f64 {
        let (ns, na) = (self.n_states(), self.n_actions());
        let v: Vec<f64> = (0..ns).map(|s| q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        let mut worst: f64 = 0.0;
        for s in 0..ns {
            for a in 0..na {
                let row = self.transition_row(s, a);
                let ev: f64 = row.iter().zip(&v).map(|(p, x)| p * x).sum();
                let target = linalg::dot(self.expected_phi(s, a), w) + self.gamma() * ev;
                worst = worst.max((q.get(s, a) - target).abs());
            }
        }
        worst
    }

    /// Optimal SF, Q-table and policy for reward mapping `w` by fixed-point
    /// iteration of the SF Bellman equation under greedy improvement. Stops
    /// once both residuals fall below `tol · (1 − γ)`, which keeps the
    /// returned Q-table within `tol` of the true optimum.
    pub fn tabular_sf_solve(&self, w: &[f64], tol: f64) -> Result<SfSolution> {
        ensure(tol > 0.0, || format!("tol must be positive, got {tol}"))?;
        if w.len() != self.d_phi() {
            return Err(Error::Shape(format!("w has length {}, d_phi is {}", w.len(), self.d_phi())));
        }
        const MAX_ITERS: usize = 100_000;
        let g = self.gamma();
        let stop = tol * (1.0 - g);
        let mut psi = self.phi_bar.clone();
        let mut trace = Vec::new();
        for it in 0..MAX_ITERS {
            let q = self.q_from_sf(&psi, w);
            let policy = q.greedy_policy();
            let ev = self.expected_next(&psi, &policy);
            let next: Vec<f64> = self.phi_bar.iter().zip(&ev).map(|(f, e)| f + g * e).collect();
            let psi_res = psi.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let q_next = self.q_from_sf(&next, w);
            let q_res = q.sup_distance(&q_next)?;
            trace.push(psi_res);
            if psi_res <= stop && q_res <= stop {
                return Ok(SfSolution {
                    psi,
                    q,
                    policy,
                    iterations: it,
                    psi_residual: psi_res,
                    q_residual: q_res,
                    residual_trace: trace,
                });
            }
            psi = next;
        }
        Err(Error::NoConvergence {
            what: "tabular SF iteration",
            iterations: MAX_ITERS,
            residual: trace.last().copied().unwrap_or(f64::NAN),
        })
    }

    /// Exact successor features of a deterministic policy, via the linear
    /// system `(I − γ P_π) V = φ̄_π`.
    pub fn evaluate_policy_sf(&self, policy: &[usize]) -> Result<Vec<f64>> {
        let (ns, na, d) = (self.n_states(), self.n_actions(), self.d_phi());
        if policy.len() != ns || policy.iter().any(|&a| a >= na) {
            return Err(Error::Shape("policy must give one valid action per state".into()));
        }
        let g = self.gamma();
        let mut m = DMatrix::<f64>::identity(ns, ns);
        let mut rhs = DMatrix::<f64>::zeros(ns, d);
        for s in 0..ns {
            let a = policy[s];
            for (sn, &p) in self.transition_row(s, a).iter().enumerate() {
                m[(s, sn)] -= g * p;
            }
            for (k, v) in self.expected_phi(s, a).iter().enumerate() {
                rhs[(s, k)] = *v;
            }
        }
        let v = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::State("policy evaluation system is singular".into()))?;
        let mut psi = self.phi_bar.clone();
        for s in 0..ns {
            for a in 0..na {
                let sa = s * na + a;
                for (sn, &p) in self.transition_row(s, a).iter().enumerate() {
                    if p != 0.0 {
                        for k in 0..d {
                            psi[sa * d + k] += g * p * v[(sn, k)];
                        }
                    }
                }
            }
        }
        Ok(psi)
    }

    /// Exact `Q^π` for reward `φᵀw`.
    pub fn evaluate_policy(&self, w: &[f64], policy: &[usize]) -> Result<QTable> {
        if w.len() != self.d_phi() {
            return Err(Error::Shape("w length differs from d_phi".into()));
        }
        Ok(self.q_from_sf(&self.evaluate_policy_sf(policy)?, w))
    }

    /// Exact state values `V^π(s)` for reward `φᵀw`.
    pub fn policy_values(&self, w: &[f64], policy: &[usize]) -> Result<Vec<f64>> {
        let q = self.evaluate_policy(w, policy)?;
        Ok((0..self.n_states()).map(|s| q.get(s, policy[s])).collect())
    }

    /// States with positive probability of being entered under `policy`
    /// from some state.
    pub fn reachable_states(&self, policy: &[usize]) -> Vec<usize> {
        let ns = self.n_states();
        let mut seen = vec![false; ns];
        for (s, &a) in policy.iter().enumerate() {
            for (sn, &p) in self.transition_row(s, a).iter().enumerate() {
                if p > 0.0 {
                    seen[sn] = true;
                }
            }
        }
        (0..ns).filter(|&s| seen[s]).collect()
    }

    /// Serializes the whole instance: header, `P`, `x`, `φ`, tasks and the
    /// planted network.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(b"SFMD");
        codec::put_u32(&mut out, 1);
        codec::put_len(&mut out, c.n_states)?;
        codec::put_len(&mut out, c.n_actions)?;
        codec::put_len(&mut out, c.d_phi)?;
        codec::put_len(&mut out, c.input_dim)?;
        codec::put_f64(&mut out, c.gamma);
        codec::put_u64(&mut out, c.seed);
        codec::put_len(&mut out, c.branching)?;
        codec::put_f64(&mut out, c.min_action_gap);
        codec::put_f64(&mut out, c.min_rho1);
        codec::put_f64s(&mut out, &self.transition);
        codec::put_f64s(&mut out, &self.features);
        codec::put_f64s(&mut out, &self.phi);
        codec::put_len(&mut out, self.tasks.len())?;
        for t in &self.tasks {
            match t.origin {
                TaskOrigin::Planted => {
                    codec::put_u32(&mut out, 0);
                    codec::put_u32(&mut out, 0);
                    codec::put_f64(&mut out, 0.0);
                    codec::put_u64(&mut out, 0);
                }
                TaskOrigin::Explicit => {
                    codec::put_u32(&mut out, 1);
                    codec::put_u32(&mut out, 0);
                    codec::put_f64(&mut out, 0.0);
                    codec::put_u64(&mut out, 0);
                }
                TaskOrigin::Perturbed { base, delta, seed } => {
                    codec::put_u32(&mut out, 2);
                    codec::put_len(&mut out, base)?;
                    codec::put_f64(&mut out, delta);
                    codec::put_u64(&mut out, seed);
                }
            }
            codec::put_f64s(&mut out, &t.w);
        }
        self.planted_theta.encode(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(mut input: &[u8]) -> Result<Self> {
        let input = &mut input;
        codec::expect_magic(input, b"SFMD")?;
        let version = codec::get_u32(input)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported MDP archive version {version}")));
        }
        let ns = codec::get_len(input)?;
        let na = codec::get_len(input)?;
        let d = codec::get_len(input)?;
        let din = codec::get_len(input)?;
        let gamma = codec::get_f64(input)?;
        let seed = codec::get_u64(input)?;
        let branching = codec::get_len(input)?;
        let min_action_gap = codec::get_f64(input)?;
        let min_rho1 = codec::get_f64(input)?;
        let transition = codec::get_f64s(input, ns * na * ns)?;
        let features = codec::get_f64s(input, ns * na * din)?;
        let phi = codec::get_f64s(input, ns * na * ns * d)?;
        let n_tasks = codec::get_len(input)?;
        let mut tasks = Vec::with_capacity(n_tasks);
        for _ in 0..n_tasks {
            let tag = codec::get_u32(input)?;
            let base = codec::get_len(input)?;
            let delta = codec::get_f64(input)?;
            let tseed = codec::get_u64(input)?;
            let origin = match tag {
                0 => TaskOrigin::Planted,
                1 => TaskOrigin::Explicit,
                2 => TaskOrigin::Perturbed { base, delta, seed: tseed },
                t => return Err(Error::Format(format!("unknown task origin tag {t}"))),
            };
            let w = codec::get_f64s(input, d)?;
            tasks.push(Task { w, origin });
        }
        let planted_theta = NetworkParams::decode(input)?;
        if !input.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in MDP archive", input.len())));
        }
        if planted_theta.head_dim() != d || planted_theta.shape().input_dim() != din {
            return Err(Error::Format("planted network does not match archive header".into()));
        }
        let mut mdp = Self::from_parts(MdpParts {
            n_states: ns,
            n_actions: na,
            gamma,
            transition,
            features,
            phi,
            tasks,
            planted_theta,
        })
        .map_err(|e| Error::Format(format!("archive violates MDP invariants: {e}")))?;
        mdp.config.seed = seed;
        mdp.config.branching = branching;
        mdp.config.min_action_gap = min_action_gap;
        mdp.config.min_rho1 = min_rho1;
        Ok(mdp)
    }
}

/// Smallest per-layer eigenvalue of the gradient second moment of `theta`
/// over `(s, greedy(s))` for every state entered under `greedy`.
fn planted_rho1(
    theta: &NetworkParams,
    transition: &[f64],
    features: &[f64],
    greedy: &[usize],
    cfg: &EnvConfig,
) -> Result<f64> {
    let (ns, na, din) = (cfg.n_states, cfg.n_actions, cfg.input_dim);
    let mut reached = vec![false; ns];
    for (s, &a) in greedy.iter().enumerate() {
        for (sn, &p) in transition[(s * na + a) * ns..(s * na + a + 1) * ns].iter().enumerate() {
            reached[sn] |= p > 0.0;
        }
    }
    let inputs: Vec<&[f64]> = (0..ns)
        .filter(|&s| reached[s])
        .map(|s| &features[(s * na + greedy[s]) * din..(s * na + greedy[s] + 1) * din])
        .collect();
    let mut worst = f64::INFINITY;
    for layer in 0..theta.shape().depth() {
        let m = crate::theory::gradient_moment(theta, &inputs, layer)?;
        worst = worst.min(linalg::symmetric_eigenvalues(&m)[0]);
    }
    Ok(worst)
}

/// `w_base + delta · u` for a seeded random unit `u` (before normalization).
pub fn perturb(w_base: &[f64], delta: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng::substream(seed, "task-perturbation", 0);
    let u = rng::unit_vector(&mut rng, w_base.len());
    w_base.iter().zip(&u).map(|(b, d)| b + delta * d).collect()
}

fn draw_kernel(ns: usize, na: usize, branching: usize, rng: &mut Rng) -> Vec<f64> {
    let mut out = vec![0.0; ns * na * ns];
    let support = if branching == 0 { ns } else { branching };
    let mut idx: Vec<usize> = (0..ns).collect();
    for row in out.chunks_mut(ns) {
        // partial Fisher-Yates picks the support
        for i in 0..support {
            let j = rng.gen_range(i..ns);
            idx.swap(i, j);
        }
        let mut total = 0.0;
        for &sn in &idx[..support] {
            let u: f64 = rng.gen();
            let e = -(1.0 - u).ln();
            row[sn] = e;
            total += e;
        }
        for p in row.iter_mut() {
            *p /= total;
        }
        // push the rounding residue onto the largest entry so rows sum to 1
        let sum: f64 = row.iter().sum();
        let big = argmax(row);
        row[big] += 1.0 - sum;
    }
    out
}

fn unit_activity(theta: &NetworkParams, features: &[f64], din: usize) -> (f64, f64) {
    let mut lo: f64 = 1.0;
    let mut hi: f64 = 0.0;
    let n = features.len() / din;
    for k in 0..theta.head_dim() {
        let passes: Vec<_> = (0..n).map(|i| theta.trunk_pass(k, &features[i * din..(i + 1) * din])).collect();
        let counts = passes.iter().fold(Vec::<usize>::new(), |mut acc, p| {
            let flags = p.activity();
            if acc.is_empty() {
                acc = vec![0; flags.len()];
            }
            for (c, f) in acc.iter_mut().zip(flags) {
                *c += usize::from(f);
            }
            acc
        });
        for c in counts {
            let frac = c as f64 / n as f64;
            lo = lo.min(frac);
            hi = hi.max(frac);
        }
    }
    (lo, hi)
}

/// Random planted network whose hidden units are all active on a non-trivial
/// fraction of the state-action features.
fn draw_planted(shape: &NetShape, d: usize, features: &[f64], din: usize, rng: &mut Rng) -> NetworkParams {
    let mut best: Option<(f64, NetworkParams)> = None;
    for _ in 0..200 {
        let cand = NetworkParams::random(shape.clone(), d, rng);
        let (lo, hi) = unit_activity(&cand, features, din);
        if lo >= ACTIVITY_RANGE.0 && hi <= ACTIVITY_RANGE.1 {
            return cand;
        }
        let score = lo.min(1.0 - hi);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, cand));
        }
    }
    best.expect("at least one candidate").1
}

pub(crate) fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticMDP {
        SyntheticMDP::generate(&EnvConfig {
            n_states: 20,
            n_actions: 3,
            d_phi: 3,
            input_dim: 5,
            hidden: vec![8],
            gamma: 0.8,
            seed,
            branching: 0,
            min_action_gap: 0.0,
            min_rho1: 0.0,
        })
        .unwrap()
    }

    #[test]
    fn action_gap_rejection() {
        let cfg = EnvConfig { input_dim: 4, hidden: vec![1], gamma: 0.5, min_action_gap: 0.01, ..EnvConfig::desk(0) };
        let m = SyntheticMDP::generate(&cfg).unwrap();
        let q = m.q_from_sf(&m.planted_sf_table(), &m.tasks()[0].w);
        for s in 0..m.n_states() {
            let mut row = q.row(s).to_vec();
            row.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert!(row[0] - row[1] >= 0.01);
        }
        let tiny = EnvConfig { n_states: 2, n_actions: 2, d_phi: 1, input_dim: 2, hidden: vec![1], min_action_gap: 10.0, ..cfg };
        assert!(matches!(SyntheticMDP::generate(&tiny), Err(Error::Validation(_))));
    }

    #[test]
    fn rho1_rejection() {
        let cfg = EnvConfig {
            n_states: 12,
            n_actions: 2,
            d_phi: 2,
            input_dim: 2,
            hidden: vec![4],
            gamma: 0.9,
            seed: 0,
            branching: 0,
            min_action_gap: 0.0,
            min_rho1: 1e-5,
        };
        let m = SyntheticMDP::generate(&cfg).unwrap();
        assert!(crate::theory::rho1_hat(&m, 0).unwrap() >= 1e-5);
        let back = SyntheticMDP::from_bytes(&m.to_bytes().unwrap()).unwrap();
        assert_eq!(back.config().min_rho1, 1e-5);
        // Four units on two inputs can never be identifiable.
        let starved = EnvConfig { n_states: 2, n_actions: 1, ..cfg.clone() };
        assert!(matches!(SyntheticMDP::generate(&starved), Err(Error::Validation(_))));
        assert!(SyntheticMDP::generate(&EnvConfig { min_rho1: -1.0, ..cfg }).is_err());
    }

    #[test]
    fn rows_are_stochastic_and_features_bounded() {
        let m = small(1);
        for s in 0..m.n_states() {
            for a in 0..m.n_actions() {
                let row = m.transition_row(s, a);
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(linalg::norm(m.feature(s, a)) <= 1.0 + 1e-12);
            }
        }
        assert!((linalg::norm(&m.tasks()[0].w) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sparse_kernel_respects_branching() {
        let mut cfg = EnvConfig::desk(3);
        cfg.branching = 5;
        let m = SyntheticMDP::generate(&cfg).unwrap();
        for s in 0..m.n_states() {
            let nz = m.transition_row(s, 0).iter().filter(|&&p| p > 0.0).count();
            assert_eq!(nz, 5);
        }
    }

    #[test]
    fn construction_identity_holds() {
        for seed in 0..3 {
            let m = small(seed);
            let psi = m.planted_sf_table();
            let res = m.sf_bellman_residual(&psi, &m.planted_policy());
            assert!(res < 1e-12, "seed {seed}: {res}");
        }
    }

    #[test]
    fn gamma_zero_phi_ignores_next_state() {
        let mut cfg = EnvConfig::desk(4);
        cfg.gamma = 0.0;
        cfg.n_states = 10;
        let m = SyntheticMDP::generate(&cfg).unwrap();
        let psi = m.planted_sf_table();
        for s in 0..m.n_states() {
            for a in 0..m.n_actions() {
                for sn in 0..m.n_states() {
                    let d = m.d_phi();
                    assert_eq!(m.phi(s, a, sn), &psi[(s * 4 + a) * d..(s * 4 + a + 1) * d]);
                }
            }
        }
    }

    #[test]
    fn phi_max_matches_enumeration() {
        let m = SyntheticMDP::generate(&EnvConfig { n_states: 50, n_actions: 4, d_phi: 4, seed: 7, ..EnvConfig::desk(7) })
            .unwrap();
        let mut brute: f64 = 0.0;
        for s in 0..50 {
            for a in 0..4 {
                for sn in 0..50 {
                    let v = m.phi(s, a, sn);
                    brute = brute.max((v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt());
                }
            }
        }
        assert_eq!(m.phi_max(), brute);
    }

    #[test]
    fn generate_rejects_degenerate_configs() {
        let mut cfg = EnvConfig::desk(1);
        cfg.n_states = 1;
        assert!(SyntheticMDP::generate(&cfg).is_err());
        let mut cfg = EnvConfig::desk(1);
        cfg.gamma = 1.0;
        assert!(SyntheticMDP::generate(&cfg).is_err());
        let mut cfg = EnvConfig::desk(1);
        cfg.hidden = vec![];
        assert!(SyntheticMDP::generate(&cfg).is_err());
    }

    #[test]
    fn perturbed_tasks() {
        let mut m = small(2);
        let dup = m.add_perturbed_task(0, 0.0, 9).unwrap();
        assert_eq!(m.tasks()[dup].w, m.tasks()[0].w);

        let raw = perturb(&m.tasks()[0].w, 0.1, 11);
        assert!((linalg::distance(&raw, &m.tasks()[0].w) - 0.1).abs() < 1e-9);
        let id = m.add_perturbed_task(0, 0.1, 11).unwrap();
        let w = m.tasks()[id].w.clone();
        assert!((linalg::norm(&w) - 1.0).abs() < 1e-12);

        for s in 0..m.n_states() {
            for a in 0..m.n_actions() {
                for sn in 0..m.n_states() {
                    let r = m.reward(id, s, a, sn).unwrap();
                    let p = m.phi(s, a, sn);
                    let brute: f64 = (0..3).map(|k| p[k] * w[k]).sum();
                    assert!((r - brute).abs() < 1e-15);
                    assert!(r.abs() <= m.r_max());
                }
            }
        }
        assert!(matches!(m.add_task(vec![1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn step_samples_and_rewards() {
        let m = small(5);
        let mut rng = rng::from_seed(1);
        for _ in 0..50 {
            let t = m.step(3, 1, 0, &mut rng).unwrap();
            let want = linalg::dot(m.phi(3, 1, t.s_next), &m.tasks()[0].w);
            assert_eq!(t.reward, want);
        }
        assert!(m.step(99, 0, 0, &mut rng).is_err());
        assert!(m.step(0, 9, 0, &mut rng).is_err());
    }

    fn two_state_mdp(row: [f64; 2]) -> SyntheticMDP {
        let theta = NetworkParams::zeros(NetShape::new(1, vec![1]).unwrap(), 1);
        SyntheticMDP::from_parts(MdpParts {
            n_states: 2,
            n_actions: 1,
            gamma: 0.5,
            transition: vec![row[0], row[1], 0.0, 1.0],
            features: vec![0.5, 0.5],
            phi: vec![1.0, 2.0, 0.0, 0.0],
            tasks: vec![Task { w: vec![1.0], origin: TaskOrigin::Explicit }],
            planted_theta: theta,
        })
        .unwrap()
    }

    #[test]
    fn deterministic_row_always_lands() {
        let m = two_state_mdp([0.0, 1.0]);
        let mut rng = rng::from_seed(2);
        for _ in 0..100 {
            assert_eq!(m.step(0, 0, 0, &mut rng).unwrap().s_next, 1);
        }
    }

    #[test]
    fn step_frequencies_follow_kernel() {
        let m = two_state_mdp([0.3, 0.7]);
        let mut rng = rng::from_seed(3);
        let n = 100_000;
        let hits = (0..n).filter(|_| m.step(0, 0, 0, &mut rng).unwrap().s_next == 0).count();
        let f = hits as f64 / n as f64;
        assert!((f - 0.3).abs() < 0.01, "{f}");
    }

    #[test]
    fn from_parts_validates() {
        let theta = NetworkParams::zeros(NetShape::new(1, vec![1]).unwrap(), 1);
        let bad = SyntheticMDP::from_parts(MdpParts {
            n_states: 1,
            n_actions: 1,
            gamma: 0.5,
            transition: vec![0.9],
            features: vec![0.5],
            phi: vec![1.0],
            tasks: vec![],
            planted_theta: theta,
        });
        assert!(bad.is_err());
    }

    #[test]
    fn solver_recovers_planted_optimum() {
        let m = small(6);
        let sol = m.tabular_sf_solve(&m.tasks()[0].w, 1e-9).unwrap();
        let planted = m.q_from_sf(&m.planted_sf_table(), &m.tasks()[0].w);
        assert!(sol.q.sup_distance(&planted).unwrap() <= 1e-9);
        assert_eq!(sol.policy, m.planted_policy());
        assert!(m.bellman_optimality_residual(&sol.q, &m.tasks()[0].w) < 1e-9);
        assert!(m.sf_bellman_residual(&sol.psi, &sol.policy) < 1e-9);
    }

    #[test]
    fn solver_with_gamma_zero_is_expected_reward() {
        let mut cfg = EnvConfig::desk(8);
        cfg.gamma = 0.0;
        cfg.n_states = 12;
        let m = SyntheticMDP::generate(&cfg).unwrap();
        let w = vec![0.3, -0.5, 0.2, 0.9];
        let sol = m.tabular_sf_solve(&w, 1e-10).unwrap();
        for s in 0..12 {
            for a in 0..4 {
                let want: f64 = (0..12)
                    .map(|sn| m.transition_row(s, a)[sn] * linalg::dot(m.phi(s, a, sn), &w))
                    .sum();
                assert!((sol.q.get(s, a) - want).abs() < 1e-12);
            }
        }
    }

    /// Independent scalar value iteration on `r = φᵀw`.
    fn scalar_value_iteration(m: &SyntheticMDP, w: &[f64], tol: f64) -> QTable {
        let (ns, na) = (m.n_states(), m.n_actions());
        let mut r = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                r[s * na + a] = (0..ns)
                    .map(|sn| m.transition_row(s, a)[sn] * linalg::dot(m.phi(s, a, sn), w))
                    .sum();
            }
        }
        let mut q = vec![0.0; ns * na];
        loop {
            let v: Vec<f64> = (0..ns)
                .map(|s| q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let mut delta: f64 = 0.0;
            let mut next = vec![0.0; ns * na];
            for s in 0..ns {
                for a in 0..na {
                    let ev: f64 = (0..ns).map(|sn| m.transition_row(s, a)[sn] * v[sn]).sum();
                    next[s * na + a] = r[s * na + a] + m.gamma() * ev;
                    delta = delta.max((next[s * na + a] - q[s * na + a]).abs());
                }
            }
            q = next;
            if delta < tol * (1.0 - m.gamma()) * 1e-2 {
                break;
            }
        }
        QTable::new(ns, na, q).unwrap()
    }

    #[test]
    fn solver_agrees_with_scalar_value_iteration() {
        let m = small(9);
        let w = vec![0.4, -0.7, 0.6];
        let tol = 1e-8;
        let sol = m.tabular_sf_solve(&w, tol).unwrap();
        let vi = scalar_value_iteration(&m, &w, tol);
        assert!(sol.q.sup_distance(&vi).unwrap() <= 2.0 * tol);
    }

    #[test]
    fn solver_residual_trace_contracts_once_policy_settles() {
        let m = small(10);
        let sol = m.tabular_sf_solve(&[0.2, 0.9, -0.3], 1e-10).unwrap();
        let tail = &sol.residual_trace[sol.residual_trace.len() / 2..];
        assert!(tail.windows(2).all(|w| w[1] <= w[0]));
        assert!(matches!(m.tabular_sf_solve(&[1.0], 1e-6), Err(Error::Shape(_))));
        assert!(m.tabular_sf_solve(&[1.0, 0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn q_bounded_by_geometric_series() {
        let m = small(11);
        for w in [vec![1.0, 0.0, 0.0], vec![-0.3, 0.5, 0.8]] {
            let sol = m.tabular_sf_solve(&w, 1e-9).unwrap();
            let bound = m.phi_max() * linalg::norm(&w) / (1.0 - m.gamma());
            assert!(sol.q.values().iter().all(|q| q.abs() <= bound + 1e-9));
        }
    }

    #[test]
    fn exact_policy_evaluation_is_a_fixed_point() {
        let m = small(12);
        let policy: Vec<usize> = (0..m.n_states()).map(|s| s % m.n_actions()).collect();
        let psi = m.evaluate_policy_sf(&policy).unwrap();
        assert!(m.sf_bellman_residual(&psi, &policy) < 1e-12);
        let sol = m.tabular_sf_solve(&m.tasks()[0].w, 1e-10).unwrap();
        let q = m.evaluate_policy(&m.tasks()[0].w, &sol.policy).unwrap();
        assert!(q.sup_distance(&sol.q).unwrap() < 1e-9);
    }

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let mut m = small(13);
        m.add_perturbed_task(0, 0.5, 3).unwrap();
        m.add_task(vec![0.1, 0.2, 0.3]).unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = SyntheticMDP::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.tasks(), m.tasks());
        assert_eq!(back.phi_max(), m.phi_max());
        assert_eq!(back.r_max(), m.r_max());
        assert_eq!(back.config(), m.config());
        assert!(SyntheticMDP::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
