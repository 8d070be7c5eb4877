//! Experiment configuration, bundled presets, the run pipeline and the
//! stored-output verifier.
//!
//! A run generates one planted MDP per root seed, trains the task sequence,
//! and writes CSVs whose first line names their schema. Every random draw
//! comes from a named stream of the root seed (`env`, `task`, `train`,
//! `eval`), so identical configs give byte-identical outputs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::dqn::{dqn_gpi_q, dqn_shape, dqn_train};
use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{EnvConfig, SyntheticMDP};
use crate::mlp::{param_distance, NetworkParams};
use crate::rng::substream_seed;
use crate::theory::{hessian_spectrum_at, rho1_hat, HessianSpectrum, TheoryConstants, THEORY_SCHEMA};
use crate::trainer::{initial_theta, train_sequence, train_task, EtaSchedule, TrainerConfig, TrainingLog, WInit};
use crate::transfer::{
    eval_starts, gpi_effect_table, optimal_q, psi_sup_error, q_star, sf_transfer_q, thm3_bound, thm4_bound,
    transfer_error_against, GpiRow, GpiSweep, ReturnScale, GPI_SCHEMA,
};

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBlock {
    /// Also the default output directory name.
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Root seeds; each gets its own MDP and runs.
    pub seeds: Vec<u64>,
    /// Evaluation start states for normalized rewards.
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub output_dir: Option<String>,
}

fn default_episodes() -> usize {
    100
}

/// Target tasks `normalize(w*_1 + d · u)`, one per distance, trained after
/// the planted task.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksBlock {
    #[serde(default)]
    pub distances: Vec<f64>,
}

/// Scalar DQN baseline on every task, same trainer settings.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DqnBlock {
    /// Step-size rule for the DQN network; defaults to the trainer's.
    #[serde(default)]
    pub eta: Option<EtaSchedule>,
}

/// With/without-GPI comparison on perturbed targets trained from scratch.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpiSweepBlock {
    pub distances: Vec<f64>,
    pub target_iterations: usize,
    pub snapshot_every: usize,
}

/// Task-1 runs from reward mappings initialized at these distances.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSweepBlock {
    pub w_radii: Vec<f64>,
}

/// Finite-difference Hessian of the population loss at the planted network.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvexityBlock {}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentBlock,
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub tasks: TasksBlock,
    #[serde(default)]
    pub dqn: Option<DqnBlock>,
    #[serde(default)]
    pub gpi_sweep: Option<GpiSweepBlock>,
    #[serde(default)]
    pub init_sweep: Option<InitSweepBlock>,
    #[serde(default)]
    pub convexity: Option<ConvexityBlock>,
}

/// 1-based line of `key` inside `[section]`, or of the section header when
/// `key` is `None`.
fn locate(src: &str, section: &str, key: Option<&str>) -> Option<usize> {
    let mut inside = false;
    for (i, line) in src.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            inside = t.trim_matches(|c| c == '[' || c == ']').trim() == section;
            if inside && key.is_none() {
                return Some(i + 1);
            }
            continue;
        }
        if let (true, Some(k)) = (inside, key) {
            if t.strip_prefix(k).is_some_and(|rest| rest.trim_start().starts_with('=')) {
                return Some(i + 1);
            }
        }
    }
    None
}

fn config_error(src: &str, section: &str, key: Option<&str>, msg: impl std::fmt::Display) -> Error {
    match locate(src, section, key).or_else(|| locate(src, section, None)) {
        Some(line) => Error::Config(format!("line {line}: [{section}] {msg}")),
        None => Error::Config(format!("[{section}] {msg}")),
    }
}

const TRAINER_KEYS: [&str; 13] = [
    "buffer_capacity",
    "episode_length",
    "snapshot_every",
    "target_sync",
    "batch_size",
    "iterations",
    "w_init",
    "warmup",
    "policy",
    "kappa",
    "init",
    "eta",
    "gpi",
];

/// Anchors a validation message from `section` at the key it names.
fn anchor(src: &str, section: &str, keys: &[&str], e: Error) -> Error {
    let msg = match e {
        Error::Validation(m) | Error::Shape(m) => m,
        other => other.to_string(),
    };
    let key = keys.iter().find(|k| msg.starts_with(**k) || msg.starts_with(&k.replace('_', " "))).copied();
    config_error(src, section, key, msg)
}

impl ExperimentConfig {
    /// Parses and validates TOML text. Every failure is [`Error::Config`]
    /// with the offending line when it can be found.
    pub fn parse(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate(src)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let src = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg = Self::parse(&src).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((cfg, src))
    }

    fn validate(&self, src: &str) -> Result<()> {
        let x = &self.experiment;
        let err = |section: &str, key: &str, msg: String| config_error(src, section, Some(key), msg);
        if x.name.is_empty() || !x.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(err("experiment", "name", format!("name must be non-empty [A-Za-z0-9_-], got {:?}", x.name)));
        }
        if x.seeds.is_empty() {
            return Err(err("experiment", "seeds", "seeds must not be empty".into()));
        }
        if x.seeds.iter().collect::<BTreeSet<_>>().len() != x.seeds.len() {
            return Err(err("experiment", "seeds", "seeds must be distinct".into()));
        }
        if x.episodes == 0 {
            return Err(err("experiment", "episodes", "episodes must be >= 1".into()));
        }

        let e = &self.env;
        for key in ["seed"] {
            if locate(src, "env", Some(key)).is_some() {
                return Err(err("env", key, "env seed is derived from experiment.seeds; remove it".into()));
            }
        }
        let env_checks: [(&str, bool, String); 6] = [
            ("n_states", e.n_states >= 2, format!("n_states must be >= 2, got {}", e.n_states)),
            ("n_actions", e.n_actions >= 1, "n_actions must be >= 1".into()),
            ("d_phi", e.d_phi >= 1, "d_phi must be >= 1".into()),
            ("gamma", (0.0..1.0).contains(&e.gamma), format!("gamma must lie in [0, 1), got {}", e.gamma)),
            ("branching", e.branching <= e.n_states, format!("branching {} exceeds n_states", e.branching)),
            (
                "min_action_gap",
                e.min_action_gap >= 0.0 && e.min_action_gap.is_finite() && e.min_rho1 >= 0.0 && e.min_rho1.is_finite(),
                "min_action_gap and min_rho1 must be finite and >= 0".into(),
            ),
        ];
        for (key, ok, msg) in env_checks {
            if !ok {
                return Err(err("env", key, msg));
            }
        }
        e.net_shape().map_err(|er| anchor(src, "env", &["input_dim", "hidden"], er))?;

        if locate(src, "trainer", Some("seed")).is_some() {
            return Err(err("trainer", "seed", "trainer seed is derived from experiment.seeds; remove it".into()));
        }
        self.trainer.validate().map_err(|er| anchor(src, "trainer", &TRAINER_KEYS, er))?;

        if !self.tasks.distances.iter().all(|d| d.is_finite() && *d >= 0.0) {
            return Err(err("tasks", "distances", "distances must be finite and >= 0".into()));
        }
        if let Some(DqnBlock { eta: Some(eta) }) = &self.dqn {
            eta.validate().map_err(|er| anchor(src, "dqn", &["eta"], er))?;
        }
        if let Some(g) = &self.gpi_sweep {
            if g.distances.is_empty() || !g.distances.iter().all(|d| d.is_finite() && *d >= 0.0) {
                return Err(err("gpi_sweep", "distances", "distances must be non-empty, finite and >= 0".into()));
            }
            if g.target_iterations == 0 {
                return Err(err("gpi_sweep", "target_iterations", "target_iterations must be >= 1".into()));
            }
            if g.snapshot_every == 0 || g.snapshot_every > g.target_iterations {
                return Err(err("gpi_sweep", "snapshot_every", "snapshot_every must lie in 1..=target_iterations".into()));
            }
        }
        if let Some(s) = &self.init_sweep {
            if s.w_radii.is_empty() || !s.w_radii.iter().all(|r| r.is_finite() && *r >= 0.0) {
                return Err(err("init_sweep", "w_radii", "w_radii must be non-empty, finite and >= 0".into()));
            }
        }
        Ok(())
    }

    /// Output directory when none is given on the command line.
    pub fn default_output_dir(&self) -> PathBuf {
        match &self.experiment.output_dir {
            Some(d) => PathBuf::from(d),
            None => Path::new("runs").join(&self.experiment.name),
        }
    }

    fn seed_env(&self, seed: u64) -> EnvConfig {
        EnvConfig { seed: substream_seed(seed, "env", 0), ..self.env.clone() }
    }

    fn seed_trainer(&self, seed: u64) -> TrainerConfig {
        TrainerConfig { seed: substream_seed(seed, "train", 0), ..self.trainer.clone() }
    }

    fn seed_mdp(&self, seed: u64) -> Result<SyntheticMDP> {
        let mut mdp = SyntheticMDP::generate(&self.seed_env(seed))?;
        for (i, &d) in self.tasks.distances.iter().enumerate() {
            mdp.add_perturbed_task(0, d, substream_seed(seed, "task", i as u64))?;
        }
        Ok(mdp)
    }
}

pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub toml: &'static str,
}

const PRESETS: [Preset; 6] = [
    Preset {
        name: "desk_default",
        description: "two tasks on the default 50-state MDP with the DQN baseline",
        toml: include_str!("../presets/desk_default.toml"),
    },
    Preset {
        name: "table2_desk",
        description: "normalized reward with and without GPI over four task distances",
        toml: include_str!("../presets/table2_desk.toml"),
    },
    Preset {
        name: "fig1_init",
        description: "task-1 learning curves from three reward-mapping initializations",
        toml: include_str!("../presets/fig1_init.toml"),
    },
    Preset {
        name: "fig_transfer_sf_vs_dqn",
        description: "zero-shot transfer error of SF-DQN against DQN on a two-task MDP",
        toml: include_str!("../presets/fig_transfer_sf_vs_dqn.toml"),
    },
    Preset {
        name: "thm1_rates",
        description: "convergence rates of the network and reward mapping on task 1",
        toml: include_str!("../presets/thm1_rates.toml"),
    },
    Preset {
        name: "lemma_convexity",
        description: "Hessian spectrum of the population loss at the planted network",
        toml: include_str!("../presets/lemma_convexity.toml"),
    },
];

pub fn presets() -> &'static [Preset] {
    &PRESETS
}

pub fn preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

/// Zero-shot transfer to one target task from all earlier tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferRow {
    pub seed: u64,
    pub target_task: usize,
    pub n_sources: usize,
    /// `min_j ‖w_j − w_target‖` over the sources.
    pub task_distance: f64,
    /// Largest sup-norm SF error of the source networks.
    pub psi_err: f64,
    pub sf_transfer_error: f64,
    pub dqn_transfer_error: Option<f64>,
    pub thm3_bound: f64,
    pub thm4_bound: f64,
    /// NaN when the target network starts at the planted network.
    pub q_star: f64,
    pub sf_normalized_reward: f64,
}

pub const TRANSFER_SCHEMA: &str = "sfdqn-transfer-report v1";

impl TransferRow {
    pub const HEADER: &'static str = "seed,target_task,n_sources,task_distance,psi_sup_error,sf_transfer_error,\
dqn_transfer_error,thm3_bound,thm4_bound,q_star,sf_normalized_reward";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.target_task,
            self.n_sources,
            self.task_distance,
            self.psi_err,
            self.sf_transfer_error,
            self.dqn_transfer_error.unwrap_or(f64::NAN),
            self.thm3_bound,
            self.thm4_bound,
            self.q_star,
            self.sf_normalized_reward
        )
    }
}

#[derive(Clone, Debug)]
pub struct SeedSummary {
    pub seed: u64,
    pub theory: TheoryConstants,
    pub transfer: Vec<TransferRow>,
    pub convexity: Vec<HessianSpectrum>,
    pub logs: Vec<TrainingLog>,
    pub dqn_logs: Vec<TrainingLog>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub seeds: Vec<SeedSummary>,
    pub gpi: Vec<GpiRow>,
    /// Every CSV written, relative to `out_dir`, in write order.
    pub csv_files: Vec<PathBuf>,
}

impl RunSummary {
    /// Median over seeds of `f`, skipping NaN.
    pub fn median_over_seeds(&self, f: impl Fn(&SeedSummary) -> f64) -> f64 {
        let v: Vec<f64> = self.seeds.iter().map(f).filter(|x| !x.is_nan()).collect();
        linalg::median(&v)
    }
}

struct Writer {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn put(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
        let rel = rel.as_ref();
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        if rel.extension().is_some_and(|e| e == "csv") {
            self.files.push(rel.to_path_buf());
        }
        Ok(())
    }
}

fn csv_head(schema: &str, name: &str, header: &str) -> String {
    format!("# schema: {schema}\n# experiment={name}\n{header}\n")
}

/// Runs `cfg` and writes everything under `out`. `src` is the config text,
/// copied alongside the outputs.
pub fn run(cfg: &ExperimentConfig, src: &str, out: &Path) -> Result<RunSummary> {
    let name = &cfg.experiment.name;
    let mut w = Writer { root: out.to_path_buf(), files: Vec::new() };
    w.put("config.toml", src.as_bytes())?;

    let mut transfer_csv = csv_head(TRANSFER_SCHEMA, name, TransferRow::HEADER);
    let mut theory_csv = csv_head(THEORY_SCHEMA, name, "seed,quantity,value");
    let mut convexity_csv =
        csv_head(CONVEXITY_SCHEMA, name, "seed,layer,n_params,min_eig,max_eig,rho1_hat,asymmetry");
    let mut init_runs: Vec<Vec<TrainingLog>> = Vec::new();
    let mut seeds = Vec::new();

    for &seed in &cfg.experiment.seeds {
        let dir = PathBuf::from(format!("seed{seed}"));
        let mdp = cfg.seed_mdp(seed)?;
        w.put(dir.join("mdp.bin"), &mdp.to_bytes()?)?;
        let tcfg = cfg.seed_trainer(seed);
        let results = train_sequence(&mdp, &tcfg)?;
        let note = format!("experiment={name} seed={seed}");
        for r in &results {
            w.put(dir.join(format!("sf_task{}.csv", r.task)), r.log.to_csv(&note).as_bytes())?;
        }

        let mut dqn_nets = Vec::new();
        let mut dqn_logs = Vec::new();
        if let Some(block) = &cfg.dqn {
            let dcfg = TrainerConfig { eta: block.eta.clone().unwrap_or_else(|| tcfg.eta.clone()), ..tcfg.clone() };
            let shape = dqn_shape(&mdp)?;
            for task in 0..mdp.n_tasks() {
                let r = dqn_train(&mdp, task, &dcfg, &shape)?;
                w.put(dir.join(format!("dqn_task{task}.csv")), r.log.to_csv(&note).as_bytes())?;
                dqn_nets.push(r.q_net);
                dqn_logs.push(r.log);
            }
        }

        let thetas: Vec<&NetworkParams> = results.iter().map(|r| &r.theta).collect();
        let transfer = transfer_rows(&mdp, seed, &tcfg, &thetas, &dqn_nets, cfg.experiment.episodes)?;
        for row in &transfer {
            transfer_csv.push_str(&row.csv());
            transfer_csv.push('\n');
        }

        let theory = TheoryConstants::compute(&mdp, Some(&results[0].log), &tcfg.kappa)?;
        for (q, v) in theory.entries() {
            theory_csv.push_str(&format!("{seed},{q},{v}\n"));
        }

        let mut convexity = Vec::new();
        if cfg.convexity.is_some() {
            for layer in 0..mdp.planted_theta().shape().depth() {
                let h = hessian_spectrum_at(mdp.planted_theta(), &mdp, layer)?;
                convexity_csv.push_str(&format!(
                    "{seed},{},{},{},{},{},{}\n",
                    layer + 1,
                    h.n_params,
                    h.min_eig,
                    h.max_eig,
                    rho1_hat(&mdp, layer)?,
                    h.asymmetry
                ));
                convexity.push(h);
            }
        }

        if let Some(sweep) = &cfg.init_sweep {
            let logs = sweep
                .w_radii
                .iter()
                .map(|&radius| {
                    let c = TrainerConfig { w_init: WInit::NearTarget { radius }, ..tcfg.clone() };
                    train_task(&mdp, 0, &[], &c).map(|r| r.log)
                })
                .collect::<Result<Vec<_>>>()?;
            init_runs.push(logs);
        }

        seeds.push(SeedSummary {
            seed,
            theory,
            transfer,
            convexity,
            logs: results.into_iter().map(|r| r.log).collect(),
            dqn_logs,
        });
    }

    w.put("transfer_report.csv", transfer_csv.as_bytes())?;
    w.put("theory.csv", theory_csv.as_bytes())?;
    if cfg.convexity.is_some() {
        w.put("convexity.csv", convexity_csv.as_bytes())?;
    }
    if let Some(sweep) = &cfg.init_sweep {
        w.put("init_curves.csv", init_curves_csv(name, &sweep.w_radii, &init_runs).as_bytes())?;
    }

    let mut gpi = Vec::new();
    if let Some(g) = &cfg.gpi_sweep {
        let sweep = GpiSweep {
            env: cfg.env.clone(),
            distances: g.distances.clone(),
            seeds: cfg.experiment.seeds.clone(),
            source: cfg.trainer.clone(),
            target: TrainerConfig {
                iterations: g.target_iterations,
                snapshot_every: Some(g.snapshot_every),
                ..cfg.trainer.clone()
            },
            episodes: cfg.experiment.episodes,
        };
        gpi = gpi_effect_table(&sweep)?;
        let mut text = csv_head(GPI_SCHEMA, name, GpiRow::HEADER);
        for row in &gpi {
            text.push_str(&row.csv());
            text.push('\n');
        }
        w.put("gpi_effect.csv", text.as_bytes())?;
    }

    Ok(RunSummary { out_dir: out.to_path_buf(), seeds, gpi, csv_files: w.files })
}

pub const CONVEXITY_SCHEMA: &str = "sfdqn-convexity v1";
pub const INIT_CURVES_SCHEMA: &str = "sfdqn-init-curves v1";

/// True SF of the optimal policy of `task`: the planted table for task 1,
/// the tabular solution otherwise.
fn true_sf(mdp: &SyntheticMDP, task: usize) -> Result<Vec<f64>> {
    if task == 0 {
        Ok(mdp.planted_sf_table())
    } else {
        Ok(mdp.tabular_sf_solve(&mdp.task(task)?.w, crate::trainer::ORACLE_TOL)?.psi)
    }
}

fn transfer_rows(
    mdp: &SyntheticMDP,
    seed: u64,
    tcfg: &TrainerConfig,
    thetas: &[&NetworkParams],
    dqn_nets: &[NetworkParams],
    episodes: usize,
) -> Result<Vec<TransferRow>> {
    let mut psi_errs = Vec::with_capacity(thetas.len());
    for (j, theta) in thetas.iter().enumerate() {
        psi_errs.push(psi_sup_error(theta, &true_sf(mdp, j)?, mdp)?);
    }
    let starts = eval_starts(mdp, seed, episodes);
    let mut rows = Vec::new();
    for target in 1..mdp.n_tasks() {
        let w = mdp.task(target)?.w.clone();
        let sources: Vec<&[f64]> = mdp.tasks()[..target].iter().map(|t| t.w.as_slice()).collect();
        let psi_err = psi_errs[..target].iter().copied().fold(0.0, f64::max);
        let q_opt = optimal_q(mdp, &w)?;
        let sf_q = sf_transfer_q(&thetas[..target], &w, mdp)?;
        let dqn_transfer_error = if dqn_nets.is_empty() {
            None
        } else {
            let refs: Vec<&NetworkParams> = dqn_nets[..target].iter().collect();
            Some(transfer_error_against(&dqn_gpi_q(&refs, mdp)?, &w, mdp, &q_opt)?)
        };
        let init_dist = param_distance(&initial_theta(mdp, target, tcfg)?, mdp.planted_theta())?;
        let q = if init_dist > 0.0 { q_star(mdp, &sources, &w, init_dist)? } else { f64::NAN };
        let scale = ReturnScale::new(mdp, &w, starts.clone())?;
        rows.push(TransferRow {
            seed,
            target_task: target,
            n_sources: target,
            task_distance: crate::transfer::min_task_distance(&sources, &w)?,
            psi_err,
            sf_transfer_error: transfer_error_against(&sf_q, &w, mdp, &q_opt)?,
            dqn_transfer_error,
            thm3_bound: thm3_bound(mdp, &sources, &w, psi_err)?,
            thm4_bound: thm4_bound(mdp, &sources, &w, psi_err)?,
            q_star: q,
            sf_normalized_reward: scale.normalize(mdp, &w, &sf_q.greedy_policy())?,
        });
    }
    Ok(rows)
}

/// Seed-averaged cumulative reward and Q-error per iteration and radius.
fn init_curves_csv(name: &str, radii: &[f64], runs: &[Vec<TrainingLog>]) -> String {
    let mut header = String::from("t");
    for r in radii {
        header.push_str(&format!(",cumulative_reward_w{r},q_error_w{r}"));
    }
    let mut text = csv_head(INIT_CURVES_SCHEMA, name, &header);
    let n = runs.first().map_or(0, |logs| logs[0].rows.len());
    let k = runs.len() as f64;
    for i in 0..n {
        text.push_str(&(i + 1).to_string());
        for j in 0..radii.len() {
            let reward = runs.iter().map(|logs| logs[j].rows[i].cumulative_reward).sum::<f64>() / k;
            let q = runs.iter().map(|logs| logs[j].rows[i].q_error).sum::<f64>() / k;
            text.push_str(&format!(",{reward},{q}"));
        }
        text.push('\n');
    }
    text
}

/// One re-checked invariant of a stored run.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Header and numeric rows of a schema-tagged CSV.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: missing header", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("{} row {}: {e}", path.display(), i + 1)))?;
        if row.len() != header.len() {
            return Err(Error::Format(format!("{} row {}: wrong column count", path.display(), i + 1)));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header.iter().position(|h| h == name).ok_or_else(|| Error::Format(format!("missing column {name}")))
}

/// Re-checks stored outputs of a run directory against the invariants the
/// pipeline guarantees. Fails only when the directory has no readable
/// config; individual problems are reported as failed checks.
pub fn verify(run_dir: &Path) -> Result<Vec<Check>> {
    let (cfg, _) = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let mut checks = Vec::new();
    let mut push = |name: String, outcome: Result<String>| {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(e) => (false, e.to_string()),
        };
        checks.push(Check { name, passed, detail });
    };
    let fail = |msg: String| -> Result<String> { Err(Error::State(msg)) };
    let n_tasks = 1 + cfg.tasks.distances.len();

    for &seed in &cfg.experiment.seeds {
        let dir = run_dir.join(format!("seed{seed}"));
        push(format!("seed{seed}/mdp.bin planted realizability"), (|| {
            let mdp = SyntheticMDP::from_bytes(&fs::read(dir.join("mdp.bin"))?)?;
            let res = mdp.sf_bellman_residual(&mdp.planted_sf_table(), &mdp.planted_policy());
            if mdp.n_tasks() != n_tasks {
                return fail(format!("{} tasks stored, config implies {n_tasks}", mdp.n_tasks()));
            }
            if res < 1e-10 {
                Ok(format!("residual {res:e}"))
            } else {
                fail(format!("SF Bellman residual {res:e}"))
            }
        })());
        let mut agents = vec!["sf"];
        if cfg.dqn.is_some() {
            agents.push("dqn");
        }
        for agent in agents {
            for task in 0..n_tasks {
                let file = format!("{agent}_task{task}.csv");
                push(format!("seed{seed}/{file}"), (|| {
                    let log = TrainingLog::from_csv(&fs::read_to_string(dir.join(&file))?)?;
                    let ts_ok = log.rows.iter().enumerate().all(|(i, r)| r.t == i + 1);
                    if log.agent != agent || log.task != task {
                        fail(format!("log is {} task {}", log.agent, log.task))
                    } else if log.rows.len() != cfg.trainer.iterations || !ts_ok {
                        fail(format!("{} rows, expected t = 1..={}", log.rows.len(), cfg.trainer.iterations))
                    } else if !log.all_finite() {
                        fail("non-finite entries".into())
                    } else {
                        Ok(format!("{} rows", log.rows.len()))
                    }
                })());
            }
        }
    }

    push("transfer_report.csv".into(), (|| {
        let (h, rows) = read_csv(&run_dir.join("transfer_report.csv"))?;
        let (err, b3, b4) =
            (column(&h, "sf_transfer_error")?, column(&h, "thm3_bound")?, column(&h, "thm4_bound")?);
        let expected = cfg.experiment.seeds.len() * (n_tasks - 1);
        if rows.len() != expected {
            return fail(format!("{} rows, expected {expected}", rows.len()));
        }
        for (i, r) in rows.iter().enumerate() {
            if !(r[err] >= 0.0 && r[err] <= r[b3] + 1e-9 && r[b4] >= r[b3]) {
                return fail(format!("row {}: error {} bound3 {} bound4 {}", i + 1, r[err], r[b3], r[b4]));
            }
        }
        Ok(format!("{} rows within bounds", rows.len()))
    })());

    push("theory.csv".into(), (|| {
        let text = fs::read_to_string(run_dir.join("theory.csv"))?;
        let mut rho2 = 0;
        for line in text.lines().filter(|l| l.contains(",rho2,")) {
            let v: f64 = line.rsplit(',').next().unwrap_or("").parse().map_err(|_| Error::Format(line.into()))?;
            if v < 0.0 || !v.is_finite() {
                return fail(format!("rho2 {v}"));
            }
            rho2 += 1;
        }
        if rho2 != cfg.experiment.seeds.len() {
            return fail(format!("{rho2} rho2 entries for {} seeds", cfg.experiment.seeds.len()));
        }
        Ok("rho2 >= 0 for every seed".into())
    })());

    if let Some(g) = &cfg.gpi_sweep {
        push("gpi_effect.csv".into(), (|| {
            let (h, rows) = read_csv(&run_dir.join("gpi_effect.csv"))?;
            let (a, b) = (column(&h, "with_gpi_mean")?, column(&h, "without_gpi_mean")?);
            if rows.len() != g.distances.len() {
                return fail(format!("{} rows, expected {}", rows.len(), g.distances.len()));
            }
            if rows.iter().any(|r| !(0.0..=1.0).contains(&r[a]) || !(0.0..=1.0).contains(&r[b])) {
                return fail("normalized reward outside [0, 1]".into());
            }
            Ok(format!("{} rows", rows.len()))
        })());
    }
    if cfg.convexity.is_some() {
        push("convexity.csv".into(), (|| {
            let (h, rows) = read_csv(&run_dir.join("convexity.csv"))?;
            let asym = column(&h, "asymmetry")?;
            if rows.is_empty() || rows.iter().any(|r| r.iter().any(|v| !v.is_finite()) || r[asym] > 1e-6) {
                return fail("missing, non-finite or asymmetric Hessian rows".into());
            }
            Ok(format!("{} rows", rows.len()))
        })());
    }
    if cfg.init_sweep.is_some() {
        push("init_curves.csv".into(), (|| {
            let (_, rows) = read_csv(&run_dir.join("init_curves.csv"))?;
            if rows.len() != cfg.trainer.iterations || rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
                return fail(format!("{} rows or non-finite entries", rows.len()));
            }
            Ok(format!("{} rows", rows.len()))
        })());
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
[experiment]
name = "small"
seeds = [3, 4]
episodes = 20

[env]
n_states = 10
n_actions = 2
d_phi = 2
input_dim = 3
hidden = [4]
gamma = 0.8

[trainer]
iterations = 60
batch_size = 8
buffer_capacity = 500
episode_length = 20
warmup = 20
gpi = true
eta = { kind = "inverse_time", eta0 = 1.0 }
kappa = { kind = "phi_max_normalized", scale = 1.0 }
policy = { kind = "epsilon_greedy", start = 1.0, end = 0.1, decay_fraction = 0.5 }
init = { kind = "near_planted", radius = 0.1 }
w_init = { kind = "zeros" }

[tasks]
distances = [0.5]

[dqn]

[gpi_sweep]
distances = [0.1, 1.0]
target_iterations = 40
snapshot_every = 20

[init_sweep]
w_radii = [0.1, 0.5]

[convexity]
"#;

    #[test]
    fn every_preset_parses() {
        let names: Vec<&str> = presets().iter().map(|p| p.name).collect();
        for wanted in ["desk_default", "table2_desk", "fig1_init", "fig_transfer_sf_vs_dqn", "thm1_rates", "lemma_convexity"] {
            assert!(names.contains(&wanted), "{wanted}");
        }
        for p in presets() {
            let cfg = ExperimentConfig::parse(p.toml).unwrap_or_else(|e| panic!("{}: {e}", p.name));
            assert_eq!(cfg.experiment.name, p.name);
            assert!(preset(p.name).is_some());
        }
        assert!(preset("nope").is_none());
    }

    #[test]
    fn thm1_preset_uses_inverse_time_steps() {
        let cfg = ExperimentConfig::parse(preset("thm1_rates").unwrap().toml).unwrap();
        assert_eq!(cfg.trainer.eta, EtaSchedule::InverseTime { eta0: 1.0 });
        assert_eq!(cfg.trainer.eta.at(1), 0.5);
    }

    #[test]
    fn table2_preset_sweeps_four_distances() {
        let cfg = ExperimentConfig::parse(preset("table2_desk").unwrap().toml).unwrap();
        assert_eq!(cfg.gpi_sweep.unwrap().distances, vec![0.01, 0.1, 1.0, 10.0]);
        let fig1 = ExperimentConfig::parse(preset("fig1_init").unwrap().toml).unwrap();
        assert_eq!(fig1.init_sweep.unwrap().w_radii, vec![0.01, 0.1, 0.5]);
    }

    fn expect_config_error(src: &str, needle: &str) {
        match ExperimentConfig::parse(src) {
            Err(Error::Config(m)) => assert!(m.contains(needle), "{m:?} lacks {needle:?}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let src = SMALL.replace("gamma = 0.8", "gamma = 0.8\ngama = 0.8");
        let line = src.lines().position(|l| l.starts_with("gama")).unwrap() + 1;
        expect_config_error(&src, &format!("line {line}"));
        expect_config_error(&src, "gama");
    }

    #[test]
    fn semantic_errors_point_at_their_key() {
        let src = SMALL.replace("gamma = 0.8", "gamma = 1.0");
        let line = src.lines().position(|l| l.starts_with("gamma")).unwrap() + 1;
        expect_config_error(&src, &format!("line {line}: [env] gamma"));

        let src = SMALL.replace("batch_size = 8", "batch_size = 0");
        let line = src.lines().position(|l| l.starts_with("batch_size")).unwrap() + 1;
        expect_config_error(&src, &format!("line {line}: [trainer] batch_size"));

        let src = SMALL.replace("w_init = { kind = \"zeros\" }", "w_init = { kind = \"near_target\", radius = -1.0 }");
        let line = src.lines().position(|l| l.starts_with("w_init")).unwrap() + 1;
        expect_config_error(&src, &format!("line {line}: [trainer]"));

        expect_config_error(&SMALL.replace("seeds = [3, 4]", "seeds = []"), "seeds");
        expect_config_error(&SMALL.replace("seeds = [3, 4]", "seeds = [3, 3]"), "distinct");
        expect_config_error(&SMALL.replace("gamma = 0.8", "gamma = 0.8\nseed = 1"), "derived");
        expect_config_error(&SMALL.replace("snapshot_every = 20", "snapshot_every = 400"), "snapshot_every");
        expect_config_error(&SMALL.replace("hidden = [4]", "hidden = []"), "[env]");
        expect_config_error("[experiment\n", "line 1");
    }

    #[test]
    fn small_run_writes_and_verifies() {
        let cfg = ExperimentConfig::parse(SMALL).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let summary = run(&cfg, SMALL, dir.path()).unwrap();
        assert_eq!(summary.seeds.len(), 2);
        assert_eq!(summary.gpi.len(), 2);
        let s = &summary.seeds[0];
        assert_eq!(s.logs.len(), 2);
        assert_eq!(s.dqn_logs.len(), 2);
        assert_eq!(s.transfer.len(), 1);
        assert_eq!(s.convexity.len(), 1);
        let t = &s.transfer[0];
        assert!(t.sf_transfer_error <= t.thm3_bound && t.thm3_bound <= t.thm4_bound);
        assert!(t.dqn_transfer_error.is_some());
        for f in ["transfer_report.csv", "theory.csv", "convexity.csv", "init_curves.csv", "gpi_effect.csv"] {
            assert!(summary.csv_files.contains(&PathBuf::from(f)), "{f}");
            let text = fs::read_to_string(dir.path().join(f)).unwrap();
            assert!(text.starts_with("# schema: sfdqn-"), "{f}");
        }
        assert!(dir.path().join("seed4/dqn_task1.csv").exists());
        let (_, curves) = read_csv(&dir.path().join("init_curves.csv")).unwrap();
        assert_eq!(curves.len(), 60);
        assert_eq!(curves[0].len(), 5);

        let checks = verify(dir.path()).unwrap();
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
        assert!(checks.len() >= 10);

        // Corrupt a log and a bound: both must be caught.
        fs::write(dir.path().join("seed3/sf_task1.csv"), "# schema: sfdqn-training-log v1\n").unwrap();
        let report = dir.path().join("transfer_report.csv");
        let text = fs::read_to_string(&report).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let mut cells: Vec<String> = lines[3].split(',').map(str::to_string).collect();
        cells[5] = "1e9".into();
        lines[3] = cells.join(",");
        fs::write(&report, lines.join("\n") + "\n").unwrap();
        let failed: Vec<String> = verify(dir.path()).unwrap().into_iter().filter(|c| !c.passed).map(|c| c.name).collect();
        assert_eq!(failed, vec!["seed3/sf_task1.csv".to_string(), "transfer_report.csv".to_string()]);
    }

    #[test]
    fn runs_are_byte_identical() {
        let src = SMALL.replace("[gpi_sweep]\ndistances = [0.1, 1.0]\ntarget_iterations = 40\nsnapshot_every = 20\n", "");
        let cfg = ExperimentConfig::parse(&src).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let sa = run(&cfg, &src, a.path()).unwrap();
        let sb = run(&cfg, &src, b.path()).unwrap();
        assert_eq!(sa.csv_files, sb.csv_files);
        for f in &sa.csv_files {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{}", f.display());
        }
        assert_eq!(fs::read(a.path().join("seed3/mdp.bin")).unwrap(), fs::read(b.path().join("seed3/mdp.bin")).unwrap());
    }
}
