//! Scalar DQN baseline on the same state-action features and training loop.

use crate::error::{ensure, Error, Result};
use crate::mdp::{SyntheticMDP, Transition};
use crate::mlp::{NetShape, NetworkParams};
use crate::policy::{policy_mismatch, select_action};
use crate::replay::ReplayBuffer;
use crate::rng;
use crate::table::QTable;
use crate::trainer::{LogRow, Rollout, TrainerConfig, TrainingLog};
use crate::transfer::optimal_q;

/// Hidden widths for a scalar network whose parameter count is as close as
/// possible to `head_dim` trunks of `shape`, keeping the width ratios.
pub fn parity_widths(shape: &NetShape, head_dim: usize) -> Vec<usize> {
    let target = (shape.trunk_len() * head_dim) as f64;
    let count = |ws: &[usize]| -> usize {
        let mut prev = shape.input_dim();
        ws.iter()
            .map(|&w| {
                let c = prev * w;
                prev = w;
                c
            })
            .sum()
    };
    let mut best = shape.widths().to_vec();
    let mut best_err = f64::INFINITY;
    let mut c = 1.0;
    while c <= 2.0 * head_dim as f64 {
        let ws: Vec<usize> = shape.widths().iter().map(|&k| ((k as f64 * c).round() as usize).max(1)).collect();
        let err = (count(&ws) as f64 - target).abs();
        if err < best_err {
            best_err = err;
            best = ws;
        }
        c += 1e-3;
    }
    best
}

/// Scalar Q-network for `mdp` with [`parity_widths`] of the planted shape.
pub fn dqn_shape(mdp: &SyntheticMDP) -> Result<NetShape> {
    let planted = mdp.planted_theta().shape();
    NetShape::new(planted.input_dim(), parity_widths(planted, mdp.d_phi()))
}

/// `Q(ω; s, a)` for every pair.
pub fn dqn_q_table(net: &NetworkParams, mdp: &SyntheticMDP) -> Result<QTable> {
    if net.head_dim() != 1 || net.shape().input_dim() != mdp.input_dim() {
        return Err(Error::Shape("DQN network must be scalar on the MDP's features".into()));
    }
    Ok(QTable::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| net.trunk_output(0, mdp.feature(s, a))))
}

/// `max_j Q(ω_j; s, a)` for every pair.
pub fn dqn_gpi_q(nets: &[&NetworkParams], mdp: &SyntheticMDP) -> Result<QTable> {
    ensure(!nets.is_empty(), || "need at least one Q-network".into())?;
    let tables = nets.iter().map(|n| dqn_q_table(n, mdp)).collect::<Result<Vec<_>>>()?;
    QTable::pointwise_max(&tables)
}

#[derive(Clone, Debug)]
pub struct DqnResult {
    pub task: usize,
    pub q_net: NetworkParams,
    pub log: TrainingLog,
}

fn q_row(net: &NetworkParams, mdp: &SyntheticMDP, s: usize) -> Vec<f64> {
    (0..mdp.n_actions()).map(|a| net.trunk_output(0, mdp.feature(s, a))).collect()
}

/// Semi-gradient step on `Σ_m (Q(s,a) − r − γ max_a' Q_target(s',a'))²/2`.
/// Returns the new network and the mean absolute TD error before the step.
pub fn dqn_update(
    net: &NetworkParams,
    target: Option<&NetworkParams>,
    batch: &[Transition],
    mdp: &SyntheticMDP,
    eta: f64,
) -> Result<(NetworkParams, f64)> {
    ensure(!batch.is_empty(), || "DQN update needs a non-empty batch".into())?;
    ensure(eta >= 0.0 && eta.is_finite(), || format!("eta must be >= 0, got {eta}"))?;
    let target = target.unwrap_or(net);
    let mut grad = vec![0.0; net.len()];
    let mut td = 0.0;
    for tr in batch {
        let next = q_row(target, mdp, tr.s_next).into_iter().fold(f64::NEG_INFINITY, f64::max);
        let pass = net.trunk_pass(0, mdp.feature(tr.s, tr.a));
        let delta = pass.output() - tr.reward - mdp.gamma() * next;
        td += delta.abs();
        net.accumulate_trunk_grad(0, &pass, delta, &mut grad);
    }
    let mut out = net.clone();
    crate::linalg::axpy(-eta, &grad, out.as_mut_slice());
    Ok((out, td / batch.len() as f64))
}

/// Trains a fresh scalar Q-network on `task` with the schedule, batch,
/// buffer and behaviour policy of `cfg`. The log's `theta_error` and
/// `q_error` both hold the sup-norm Q-error; `w_error` is 0.
pub fn dqn_train(mdp: &SyntheticMDP, task: usize, cfg: &TrainerConfig, shape: &NetShape) -> Result<DqnResult> {
    cfg.validate()?;
    if shape.input_dim() != mdp.input_dim() {
        return Err(Error::Shape("DQN input_dim must match the MDP features".into()));
    }
    let w_star = mdp.task(task)?.w.clone();
    let q_star = optimal_q(mdp, &w_star)?;
    let mut net = NetworkParams::random(
        shape.clone(),
        1,
        &mut rng::substream(cfg.seed, "dqn-init", task as u64),
    );
    let mut target_net = cfg.target_sync.map(|_| net.clone());
    let mut act_rng = rng::substream(cfg.seed, "dqn-act", task as u64);
    let mut sample_rng = rng::substream(cfg.seed, "dqn-replay", task as u64);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut rollout = Rollout::new(mdp, cfg.episode_length, &mut act_rng);

    let warm_rule = cfg.policy.rule_at(0, cfg.iterations);
    for _ in 0..cfg.warmup {
        let a = select_action(&q_row(&net, mdp, rollout.state), warm_rule, &mut act_rng)?;
        let tr = mdp.step(rollout.state, a, task, &mut act_rng)?;
        buffer.push(tr);
        rollout.advance(&tr, mdp, &mut act_rng);
    }
    rollout.restart(mdp, &mut act_rng);

    let mut log = TrainingLog::new("dqn", task);
    for t in 1..=cfg.iterations {
        let rule = cfg.policy.rule_at(t - 1, cfg.iterations);
        let a = select_action(&q_row(&net, mdp, rollout.state), rule, &mut act_rng)?;
        let tr = mdp.step(rollout.state, a, task, &mut act_rng)?;
        buffer.push(tr);
        let episode_return = rollout.advance(&tr, mdp, &mut act_rng);

        let batch = buffer.sample(cfg.batch_size, &mut sample_rng)?;
        let (next, td) = dqn_update(&net, target_net.as_ref(), &batch, mdp, cfg.eta.at(t))?;
        net = next;
        if let (Some(every), Some(tn)) = (cfg.target_sync, target_net.as_mut()) {
            if t % every == 0 {
                *tn = net.clone();
            }
        }

        let q = dqn_q_table(&net, mdp)?;
        let q_error = q.sup_distance(&q_star)?;
        let row = LogRow {
            t,
            theta_error: q_error,
            w_error: 0.0,
            td_residual: td,
            policy_mismatch: policy_mismatch(&q, &q_star)?,
            q_error,
            reward: tr.reward,
            episode_return,
            cumulative_reward: rollout.cumulative,
        };
        if !row.all_finite() {
            return Err(Error::State(format!("DQN training diverged at iteration {t} on task {task}")));
        }
        log.rows.push(row);
    }
    Ok(DqnResult { task, q_net: net, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::EnvConfig;
    use crate::policy::PolicySpec;
    use crate::rng::from_seed;
    use crate::trainer::EtaSchedule;

    fn mdp(gamma: f64, seed: u64) -> SyntheticMDP {
        SyntheticMDP::generate(&EnvConfig {
            n_states: 20,
            n_actions: 3,
            d_phi: 3,
            input_dim: 4,
            hidden: vec![6],
            gamma,
            seed,
            branching: 0,
            min_action_gap: 0.0,
            min_rho1: 0.0,
        })
        .unwrap()
    }

    #[test]
    fn parity_is_within_five_percent() {
        for (din, widths, d) in [(8, vec![16, 16], 4), (4, vec![6], 3), (3, vec![4], 2), (8, vec![32, 16, 8], 4)] {
            let shape = NetShape::new(din, widths).unwrap();
            let ws = parity_widths(&shape, d);
            let dqn = NetShape::new(din, ws).unwrap();
            let target = (shape.trunk_len() * d) as f64;
            let rel = (dqn.trunk_len() as f64 - target).abs() / target;
            assert!(rel <= 0.05, "{rel}");
        }
        assert_eq!(parity_widths(&NetShape::new(8, vec![16, 16]).unwrap(), 4), vec![35, 35]);
    }

    #[test]
    fn gpi_max_examples() {
        let m = mdp(0.5, 1);
        let shape = dqn_shape(&m).unwrap();
        let nets: Vec<NetworkParams> = (0..3).map(|i| NetworkParams::random(shape.clone(), 1, &mut from_seed(i))).collect();
        let single = dqn_gpi_q(&[&nets[0]], &m).unwrap();
        assert_eq!(single, dqn_q_table(&nets[0], &m).unwrap());
        assert_eq!(dqn_gpi_q(&[&nets[0], &nets[0]], &m).unwrap(), single);
        let all = dqn_gpi_q(&[&nets[0], &nets[1], &nets[2]], &m).unwrap();
        for s in 0..20 {
            for a in 0..3 {
                let brute = nets
                    .iter()
                    .map(|n| n.forward_scalar(m.feature(s, a)).unwrap())
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(all.get(s, a), brute);
                assert!(all.get(s, a) >= single.get(s, a));
            }
        }
        assert!(dqn_gpi_q(&[], &m).is_err());
    }

    #[test]
    fn zero_step_keeps_network() {
        let m = mdp(0.5, 2);
        let cfg = TrainerConfig {
            iterations: 20,
            batch_size: 4,
            eta: EtaSchedule::Constant { eta: 0.0 },
            seed: 3,
            ..TrainerConfig::default()
        };
        let shape = dqn_shape(&m).unwrap();
        let r = dqn_train(&m, 0, &cfg, &shape).unwrap();
        let init = NetworkParams::random(shape, 1, &mut rng::substream(3, "dqn-init", 0));
        assert_eq!(r.q_net, init);
    }

    #[test]
    fn deterministic_logs() {
        let m = mdp(0.5, 3);
        let cfg = TrainerConfig { iterations: 50, batch_size: 8, seed: 1, ..TrainerConfig::default() };
        let shape = dqn_shape(&m).unwrap();
        let a = dqn_train(&m, 0, &cfg, &shape).unwrap();
        let b = dqn_train(&m, 0, &cfg, &shape).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.agent, "dqn");
        assert!(a.log.rows.iter().all(|r| r.w_error == 0.0 && r.theta_error == r.q_error));
    }

    #[test]
    fn myopic_dqn_learns_expected_reward() {
        let m = mdp(0.0, 4);
        let cfg = TrainerConfig {
            iterations: 3000,
            batch_size: 32,
            eta: EtaSchedule::InverseTime { eta0: 20.0 },
            policy: PolicySpec::EpsilonGreedy { start: 1.0, end: 1.0, decay_fraction: 0.0 },
            seed: 5,
            ..TrainerConfig::default()
        };
        let r = dqn_train(&m, 0, &cfg, &dqn_shape(&m).unwrap()).unwrap();
        let last = r.log.rows.last().unwrap().q_error;
        assert!(last < 0.1 * m.r_max(), "sup error {last}, r_max {}", m.r_max());
    }
}
