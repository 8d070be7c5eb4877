//! SF-DQN training: alternating reward-mapping and SF-network updates with a
//! GPI behaviour policy, task after task.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linalg;
use crate::mdp::{SyntheticMDP, Transition};
use crate::mlp::{init_near, param_distance, NetworkParams};
use crate::policy::{policy_mismatch, q_values_gpi, select_action, PolicySpec};
use crate::replay::ReplayBuffer;
use crate::rng::{self, Rng};
use crate::table::QTable;

/// Step size of the network update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EtaSchedule {
    /// `η_t = eta0 / (t + 1)` for iterations `t = 1, 2, …`.
    InverseTime { eta0: f64 },
    Constant { eta: f64 },
}

impl EtaSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            EtaSchedule::InverseTime { eta0 } => eta0 / (t as f64 + 1.0),
            EtaSchedule::Constant { eta } => eta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            EtaSchedule::InverseTime { eta0 } => eta0,
            EtaSchedule::Constant { eta } => eta,
        };
        ensure(v >= 0.0 && v.is_finite(), || format!("eta must be finite and >= 0, got {v}"))
    }
}

/// Step size of the reward-mapping update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KappaSchedule {
    /// `κ = scale / (B · φ_max²)`. The update sums over the batch, so the
    /// batch size enters the normalization.
    PhiMaxNormalized { scale: f64 },
    Constant { kappa: f64 },
}

impl KappaSchedule {
    pub fn value(&self, mdp: &SyntheticMDP, batch_size: usize) -> f64 {
        match *self {
            KappaSchedule::PhiMaxNormalized { scale } => {
                scale / (batch_size as f64 * mdp.phi_max() * mdp.phi_max())
            }
            KappaSchedule::Constant { kappa } => kappa,
        }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            KappaSchedule::PhiMaxNormalized { scale } => scale,
            KappaSchedule::Constant { kappa } => kappa,
        };
        ensure(v > 0.0 && v.is_finite(), || format!("kappa must be positive, got {v}"))
    }
}

/// Initial SF network for every task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// Uniform on the sphere of `radius` around the planted network.
    NearPlanted { radius: f64 },
    /// He initialization.
    Random,
}

/// Initial reward mapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WInit {
    Zeros,
    /// Uniform on the sphere of `radius` around the task's true mapping.
    NearTarget { radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Steps before the agent is reset to a uniformly random state.
    pub episode_length: usize,
    /// Environment steps collected before the first update.
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    pub eta: EtaSchedule,
    pub kappa: KappaSchedule,
    pub policy: PolicySpec,
    pub init: InitSpec,
    pub w_init: WInit,
    /// Act and bootstrap with GPI over earlier tasks' final networks.
    pub gpi: bool,
    /// Refresh a frozen copy of the network every this many iterations and
    /// bootstrap from it. Absent: bootstrap from the current network.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_sync: Option<usize>,
    /// Keep `(θ, w)` every this many iterations (plus the initial point).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<usize>,
    /// Root of the `init`, `act` and `replay` streams. Experiments derive it
    /// from their own seed list.
    #[serde(default)]
    pub seed: u64,
}

fn default_warmup() -> usize {
    100
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 32,
            buffer_capacity: 10_000,
            episode_length: 50,
            warmup: default_warmup(),
            eta: EtaSchedule::InverseTime { eta0: 1.0 },
            kappa: KappaSchedule::PhiMaxNormalized { scale: 1.0 },
            policy: PolicySpec::default(),
            init: InitSpec::NearPlanted { radius: 0.1 },
            w_init: WInit::Zeros,
            gpi: true,
            target_sync: None,
            snapshot_every: None,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.batch_size >= 1, || "batch_size must be >= 1".into())?;
        ensure(self.buffer_capacity >= 1, || "buffer_capacity must be >= 1".into())?;
        ensure(self.episode_length >= 1, || "episode_length must be >= 1".into())?;
        ensure(self.target_sync != Some(0), || "target_sync must be >= 1".into())?;
        ensure(self.snapshot_every != Some(0), || "snapshot_every must be >= 1".into())?;
        if let InitSpec::NearPlanted { radius } = self.init {
            ensure(radius >= 0.0 && radius.is_finite(), || format!("init radius must be >= 0, got {radius}"))?;
        }
        if let WInit::NearTarget { radius } = self.w_init {
            ensure(radius >= 0.0 && radius.is_finite(), || format!("w init radius must be >= 0, got {radius}"))?;
        }
        self.eta.validate()?;
        self.kappa.validate()?;
        self.policy.validate()
    }
}

/// One logged iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub t: usize,
    /// `‖Θ − Θ*‖` for the planted task; sup-norm error of `ψ(Θ)ᵀ w*` against
    /// the exact optimum for other tasks.
    pub theta_error: f64,
    pub w_error: f64,
    /// Mean norm of the TD residual over the mini-batch.
    pub td_residual: f64,
    /// Fraction of states whose greedy action differs from the optimum.
    pub policy_mismatch: f64,
    /// Sup-norm error of the learned Q-estimate.
    pub q_error: f64,
    pub reward: f64,
    pub episode_return: f64,
    pub cumulative_reward: f64,
}

impl LogRow {
    const HEADER: &'static str =
        "t,theta_error,w_error,td_residual,policy_mismatch,q_error,reward,episode_return,cumulative_reward";

    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.t,
            self.theta_error,
            self.w_error,
            self.td_residual,
            self.policy_mismatch,
            self.q_error,
            self.reward,
            self.episode_return,
            self.cumulative_reward
        )
    }

    pub fn all_finite(&self) -> bool {
        [
            self.theta_error,
            self.w_error,
            self.td_residual,
            self.policy_mismatch,
            self.q_error,
            self.reward,
            self.episode_return,
            self.cumulative_reward,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingLog {
    /// `sf` or `dqn`.
    pub agent: String,
    pub task: usize,
    pub rows: Vec<LogRow>,
}

pub const LOG_SCHEMA: &str = "sfdqn-training-log v1";

impl TrainingLog {
    pub fn new(agent: &str, task: usize) -> Self {
        Self { agent: agent.to_string(), task, rows: Vec::new() }
    }

    pub fn column(&self, f: impl Fn(&LogRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(LogRow::all_finite)
    }

    /// CSV with a schema line and `extra_header` lines as `#` comments.
    pub fn to_csv(&self, extra_header: &str) -> String {
        let mut out = format!("# schema: {LOG_SCHEMA}\n# agent={} task={}\n", self.agent, self.task);
        for line in extra_header.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        out.push_str(LogRow::HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }

    /// Parses the body written by [`TrainingLog::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut agent = None;
        let mut task = None;
        let mut rows = Vec::new();
        let mut saw_header = false;
        for (i, line) in text.lines().enumerate() {
            if let Some(c) = line.strip_prefix("# ") {
                if let Some(rest) = c.strip_prefix("agent=") {
                    let mut parts = rest.split(" task=");
                    agent = parts.next().map(str::to_string);
                    task = parts.next().and_then(|t| t.parse().ok());
                }
                continue;
            }
            if !saw_header {
                if line != LogRow::HEADER {
                    return Err(Error::Format(format!("line {}: unexpected log header", i + 1)));
                }
                saw_header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::Format(format!("line {}: expected 9 fields", i + 1)));
            }
            let num = |j: usize| -> Result<f64> {
                f[j].parse().map_err(|_| Error::Format(format!("line {}: bad number {:?}", i + 1, f[j])))
            };
            rows.push(LogRow {
                t: f[0].parse().map_err(|_| Error::Format(format!("line {}: bad iteration", i + 1)))?,
                theta_error: num(1)?,
                w_error: num(2)?,
                td_residual: num(3)?,
                policy_mismatch: num(4)?,
                q_error: num(5)?,
                reward: num(6)?,
                episode_return: num(7)?,
                cumulative_reward: num(8)?,
            });
        }
        match (agent, task) {
            (Some(agent), Some(task)) => Ok(Self { agent, task, rows }),
            _ => Err(Error::Format("log is missing its agent/task comment".into())),
        }
    }
}

/// Parameters captured during training.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub t: usize,
    pub theta: NetworkParams,
    pub w: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TaskResult {
    pub task: usize,
    pub theta: NetworkParams,
    pub w: Vec<f64>,
    pub log: TrainingLog,
    pub snapshots: Vec<Snapshot>,
}

/// `w − κ Σ_m (φ_mᵀ w − r_m) φ_m`.
pub fn w_update(w: &[f64], batch: &[Transition], mdp: &SyntheticMDP, kappa: f64) -> Result<Vec<f64>> {
    ensure(!batch.is_empty(), || "w update needs a non-empty batch".into())?;
    ensure(kappa > 0.0, || format!("kappa must be positive, got {kappa}"))?;
    if w.len() != mdp.d_phi() {
        return Err(Error::Shape(format!("w has length {}, d_phi is {}", w.len(), mdp.d_phi())));
    }
    let mut out = w.to_vec();
    for tr in batch {
        let phi = mdp.phi(tr.s, tr.a, tr.s_next);
        let err = linalg::dot(phi, w) - tr.reward;
        linalg::axpy(-kappa * err, phi, &mut out);
    }
    Ok(out)
}

/// Result of one network step.
#[derive(Clone, Debug)]
pub struct ThetaStep {
    pub theta: NetworkParams,
    /// Mean `‖ψ(s,a) − φ − γ ψ(s', a')‖` over the batch, before the step.
    pub td_residual: f64,
}

/// Bootstrap action `argmax_a max_c ψ(Θ_c; s', a)ᵀ w`.
fn bootstrap_action(gpi_set: &[&NetworkParams], w: &[f64], mdp: &SyntheticMDP, s: usize) -> Result<usize> {
    let q = q_values_gpi(gpi_set, w, mdp, s)?;
    Ok(crate::table::argmax(&q))
}

/// Semi-gradient SF step. `gpi_set` chooses the bootstrap action and must
/// contain the network being trained; the bootstrap value itself comes from
/// `target` (the current network when `None`).
pub fn theta_update(
    theta: &NetworkParams,
    batch: &[Transition],
    mdp: &SyntheticMDP,
    w: &[f64],
    gpi_set: &[&NetworkParams],
    target: Option<&NetworkParams>,
    eta: f64,
) -> Result<ThetaStep> {
    ensure(!batch.is_empty(), || "theta update needs a non-empty batch".into())?;
    ensure(eta >= 0.0 && eta.is_finite(), || format!("eta must be >= 0, got {eta}"))?;
    if theta.head_dim() != mdp.d_phi() || theta.shape().input_dim() != mdp.input_dim() {
        return Err(Error::Validation(format!(
            "network head_dim {} / input_dim {} does not match d_phi {} / input_dim {}",
            theta.head_dim(),
            theta.shape().input_dim(),
            mdp.d_phi(),
            mdp.input_dim()
        )));
    }
    let target = target.unwrap_or(theta);
    let gamma = mdp.gamma();
    let d = mdp.d_phi();
    let mut grad = vec![0.0; theta.len()];
    let mut td_total = 0.0;
    for tr in batch {
        let a_next = bootstrap_action(gpi_set, w, mdp, tr.s_next)?;
        let x = mdp.feature(tr.s, tr.a);
        let x_next = mdp.feature(tr.s_next, a_next);
        let phi = mdp.phi(tr.s, tr.a, tr.s_next);
        let mut sq = 0.0;
        for k in 0..d {
            let pass = theta.trunk_pass(k, x);
            let delta = pass.output() - phi[k] - gamma * target.trunk_output(k, x_next);
            sq += delta * delta;
            theta.accumulate_trunk_grad(k, &pass, delta, &mut grad);
        }
        td_total += sq.sqrt();
    }
    let mut next = theta.clone();
    linalg::axpy(-eta, &grad, next.as_mut_slice());
    Ok(ThetaStep { theta: next, td_residual: td_total / batch.len() as f64 })
}

/// `ψ(Θ; s, a)ᵀ w` for every pair.
pub fn q_estimate(theta: &NetworkParams, w: &[f64], mdp: &SyntheticMDP) -> Result<QTable> {
    if w.len() != theta.head_dim() || theta.head_dim() != mdp.d_phi() {
        return Err(Error::Shape("w, network and MDP dimensions disagree".into()));
    }
    if theta.shape().input_dim() != mdp.input_dim() {
        return Err(Error::Shape("network input_dim does not match the MDP".into()));
    }
    Ok(QTable::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| theta.forward_dot(mdp.feature(s, a), w)))
}

/// Tolerance used for the exact per-task optimum.
pub const ORACLE_TOL: f64 = 1e-10;

/// Initial network for `task` under `cfg`.
pub fn initial_theta(mdp: &SyntheticMDP, task: usize, cfg: &TrainerConfig) -> Result<NetworkParams> {
    let seed = rng::substream_seed(cfg.seed, "init", task as u64);
    match cfg.init {
        InitSpec::NearPlanted { radius } => init_near(mdp.planted_theta(), radius, seed),
        InitSpec::Random => {
            let shape = mdp.planted_theta().shape().clone();
            Ok(NetworkParams::random(shape, mdp.d_phi(), &mut rng::from_seed(seed)))
        }
    }
}

/// Initial reward mapping for `task` under `cfg`.
pub fn initial_w(mdp: &SyntheticMDP, task: usize, cfg: &TrainerConfig) -> Result<Vec<f64>> {
    let target = &mdp.task(task)?.w;
    Ok(match cfg.w_init {
        WInit::Zeros => vec![0.0; target.len()],
        WInit::NearTarget { radius } => {
            let mut r = rng::substream(cfg.seed, "w-init", task as u64);
            let u = rng::unit_vector(&mut r, target.len());
            target.iter().zip(&u).map(|(t, d)| t + radius * d).collect()
        }
    })
}

fn with_current<'a>(priors: &[&'a NetworkParams], theta: &'a NetworkParams) -> Vec<&'a NetworkParams> {
    let mut set = priors.to_vec();
    set.push(theta);
    set
}

/// Shared acting/bookkeeping state of a training run.
pub(crate) struct Rollout {
    pub(crate) state: usize,
    steps_in_episode: usize,
    episode_length: usize,
    pub(crate) episode_return: f64,
    pub(crate) cumulative: f64,
}

impl Rollout {
    pub(crate) fn new(mdp: &SyntheticMDP, episode_length: usize, rng: &mut Rng) -> Self {
        Self {
            state: rng.gen_range(0..mdp.n_states()),
            steps_in_episode: 0,
            episode_length,
            episode_return: 0.0,
            cumulative: 0.0,
        }
    }

    /// Starts a fresh episode with zeroed reward totals.
    pub(crate) fn restart(&mut self, mdp: &SyntheticMDP, rng: &mut Rng) {
        self.state = rng.gen_range(0..mdp.n_states());
        self.steps_in_episode = 0;
        self.episode_return = 0.0;
        self.cumulative = 0.0;
    }

    /// Records a step; returns the episode return including it.
    pub(crate) fn advance(&mut self, tr: &Transition, mdp: &SyntheticMDP, rng: &mut Rng) -> f64 {
        self.cumulative += tr.reward;
        self.episode_return += tr.reward;
        let ret = self.episode_return;
        self.steps_in_episode += 1;
        if self.steps_in_episode == self.episode_length {
            self.state = rng.gen_range(0..mdp.n_states());
            self.steps_in_episode = 0;
            self.episode_return = 0.0;
        } else {
            self.state = tr.s_next;
        }
        ret
    }
}

/// Trains one task. `priors` are earlier tasks' final networks, used for GPI
/// when `cfg.gpi` is set.
pub fn train_task(
    mdp: &SyntheticMDP,
    task: usize,
    priors: &[NetworkParams],
    cfg: &TrainerConfig,
) -> Result<TaskResult> {
    cfg.validate()?;
    let w_star = mdp.task(task)?.w.clone();
    let oracle = mdp.tabular_sf_solve(&w_star, ORACLE_TOL)?;
    let planted = task == 0;

    let mut theta = initial_theta(mdp, task, cfg)?;
    let mut w = initial_w(mdp, task, cfg)?;
    let mut target_net = cfg.target_sync.map(|_| theta.clone());
    let priors: Vec<&NetworkParams> = if cfg.gpi { priors.iter().collect() } else { Vec::new() };

    let mut act_rng = rng::substream(cfg.seed, "act", task as u64);
    let mut sample_rng = rng::substream(cfg.seed, "replay", task as u64);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut rollout = Rollout::new(mdp, cfg.episode_length, &mut act_rng);
    let kappa = cfg.kappa.value(mdp, cfg.batch_size);

    let warm_rule = cfg.policy.rule_at(0, cfg.iterations);
    for _ in 0..cfg.warmup {
        let q = q_values_gpi(&with_current(&priors, &theta), &w, mdp, rollout.state)?;
        let a = select_action(&q, warm_rule, &mut act_rng)?;
        let tr = mdp.step(rollout.state, a, task, &mut act_rng)?;
        buffer.push(tr);
        rollout.advance(&tr, mdp, &mut act_rng);
    }
    rollout.restart(mdp, &mut act_rng);

    let mut log = TrainingLog::new("sf", task);
    let mut snapshots = Vec::new();
    if cfg.snapshot_every.is_some() {
        snapshots.push(Snapshot { t: 0, theta: theta.clone(), w: w.clone() });
    }

    for t in 1..=cfg.iterations {
        let rule = cfg.policy.rule_at(t - 1, cfg.iterations);
        let set = with_current(&priors, &theta);
        let q = q_values_gpi(&set, &w, mdp, rollout.state)?;
        let a = select_action(&q, rule, &mut act_rng)?;
        let tr = mdp.step(rollout.state, a, task, &mut act_rng)?;
        buffer.push(tr);
        let episode_return = rollout.advance(&tr, mdp, &mut act_rng);

        let batch = buffer.sample(cfg.batch_size, &mut sample_rng)?;
        let step = theta_update(&theta, &batch, mdp, &w, &set, target_net.as_ref(), cfg.eta.at(t))?;
        let w_next = w_update(&w, &batch, mdp, kappa)?;
        theta = step.theta;
        w = w_next;
        if let (Some(every), Some(tn)) = (cfg.target_sync, target_net.as_mut()) {
            if t % every == 0 {
                *tn = theta.clone();
            }
        }

        let q_hat = q_estimate(&theta, &w, mdp)?;
        let theta_error = if planted {
            param_distance(&theta, mdp.planted_theta())?
        } else {
            q_estimate(&theta, &w_star, mdp)?.sup_distance(&oracle.q)?
        };
        let row = LogRow {
            t,
            theta_error,
            w_error: linalg::distance(&w, &w_star),
            td_residual: step.td_residual,
            policy_mismatch: policy_mismatch(&q_hat, &oracle.q)?,
            q_error: q_hat.sup_distance(&oracle.q)?,
            reward: tr.reward,
            episode_return,
            cumulative_reward: rollout.cumulative,
        };
        if !row.all_finite() {
            return Err(Error::State(format!("training diverged at iteration {t} on task {task}")));
        }
        log.rows.push(row);
        if let Some(every) = cfg.snapshot_every {
            if t % every == 0 {
                snapshots.push(Snapshot { t, theta: theta.clone(), w: w.clone() });
            }
        }
    }
    Ok(TaskResult { task, theta, w, log, snapshots })
}

/// Trains every task of `mdp` in order; task `i` sees the final networks of
/// tasks `0..i` as GPI priors.
pub fn train_sequence(mdp: &SyntheticMDP, cfg: &TrainerConfig) -> Result<Vec<TaskResult>> {
    ensure(mdp.n_tasks() >= 1, || "MDP has no tasks".into())?;
    let mut results: Vec<TaskResult> = Vec::with_capacity(mdp.n_tasks());
    for task in 0..mdp.n_tasks() {
        let priors: Vec<NetworkParams> = results.iter().map(|r| r.theta.clone()).collect();
        results.push(train_task(mdp, task, &priors, cfg)?);
    }
    Ok(results)
}

/// `Σ φφᵀ` over every transition with positive probability.
pub fn full_batch_moment(mdp: &SyntheticMDP) -> nalgebra::DMatrix<f64> {
    let d = mdp.d_phi();
    let mut m = nalgebra::DMatrix::<f64>::zeros(d, d);
    for tr in full_batch(mdp, 0) {
        let phi = mdp.phi(tr.s, tr.a, tr.s_next);
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] += phi[i] * phi[j];
            }
        }
    }
    m
}

/// Every transition with positive probability, rewarded under `task`.
pub fn full_batch(mdp: &SyntheticMDP, task: usize) -> Vec<Transition> {
    let w = &mdp.tasks()[task].w;
    let mut out = Vec::new();
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            for (sn, &p) in mdp.transition_row(s, a).iter().enumerate() {
                if p > 0.0 {
                    out.push(Transition { s, a, s_next: sn, reward: linalg::dot(mdp.phi(s, a, sn), w) });
                }
            }
        }
    }
    out
}

/// `max_i |1 − κ λ_i(Σ φφᵀ)|`, the asymptotic per-step contraction of
/// full-batch reward-mapping updates.
pub fn w_spectral_factor(mdp: &SyntheticMDP, kappa: f64) -> f64 {
    linalg::symmetric_eigenvalues(&full_batch_moment(mdp))
        .into_iter()
        .map(|l| (1.0 - kappa * l).abs())
        .fold(0.0, f64::max)
}

/// `‖w^(t) − w*‖` for `t = 1..=iterations` of full-batch reward-mapping
/// updates from `w0`.
pub fn full_batch_w_errors(
    mdp: &SyntheticMDP,
    task: usize,
    w0: &[f64],
    kappa: f64,
    iterations: usize,
) -> Result<Vec<f64>> {
    let w_star = mdp.task(task)?.w.clone();
    let batch = full_batch(mdp, task);
    let mut w = w0.to_vec();
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        w = w_update(&w, &batch, mdp, kappa)?;
        out.push(linalg::distance(&w, &w_star));
    }
    Ok(out)
}
