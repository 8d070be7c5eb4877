use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[experiment]
name = "cli_small"
seeds = [7]
episodes = 10

[env]
n_states = 8
n_actions = 2
d_phi = 2
input_dim = 3
hidden = [3]
gamma = 0.7

[trainer]
iterations = 40
batch_size = 4
buffer_capacity = 200
episode_length = 10
warmup = 10
gpi = true
eta = { kind = "inverse_time", eta0 = 1.0 }
kappa = { kind = "phi_max_normalized", scale = 1.0 }
policy = { kind = "epsilon_greedy", start = 1.0, end = 0.1, decay_fraction = 0.5 }
init = { kind = "near_planted", radius = 0.1 }
w_init = { kind = "zeros" }

[tasks]
distances = [0.5]

[dqn]
"#;

fn sfdqn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfdqn")).args(args).output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn run_small(dir: &Path, out: &str) -> Output {
    let cfg = dir.join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    sfdqn(&["run", cfg.to_str().unwrap(), "--out", dir.join(out).to_str().unwrap()])
}

#[test]
fn presets_are_listed_and_printable() {
    let out = sfdqn(&["presets"]);
    assert!(out.status.success());
    let listing = text(&out.stdout);
    for name in ["table2_desk", "fig_transfer_sf_vs_dqn", "thm1_rates", "fig1_init", "lemma_convexity", "desk_default"] {
        assert!(listing.contains(name), "{name}");
        let printed = sfdqn(&["preset", name]);
        assert!(printed.status.success());
        assert!(text(&printed.stdout).contains(&format!("name = \"{name}\"")));
    }
    assert_eq!(sfdqn(&["preset", "no_such"]).status.code(), Some(2));
}

#[test]
fn identical_configs_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_small(dir.path(), "a");
    assert!(a.status.success(), "{}", text(&a.stderr));
    assert!(run_small(dir.path(), "b").status.success());
    let files = [
        "transfer_report.csv",
        "theory.csv",
        "seed7/sf_task0.csv",
        "seed7/sf_task1.csv",
        "seed7/dqn_task1.csv",
        "seed7/mdp.bin",
    ];
    for f in files {
        let (x, y) = (fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
        assert_eq!(x, y, "{f}");
    }
    let verify = sfdqn(&["verify", dir.path().join("a").to_str().unwrap()]);
    assert!(verify.status.success(), "{}", text(&verify.stdout));
    assert!(text(&verify.stdout).contains("0 failed"));
}

#[test]
fn bad_configs_exit_two_with_a_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, SMALL.replace("gamma = 0.7", "gamma = 1.5")).unwrap();
    let out = sfdqn(&["run", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let line = SMALL.lines().position(|l| l.starts_with("gamma")).unwrap() + 1;
    assert!(text(&out.stderr).contains(&format!("line {line}")), "{}", text(&out.stderr));

    fs::write(&cfg, SMALL.replace("episodes = 10", "episodes = 10\nepisode = 3")).unwrap();
    let out = sfdqn(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("episode"));

    let missing = sfdqn(&["run", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn verify_flags_tampered_runs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_small(dir.path(), "a").status.success());
    let log = dir.path().join("a/seed7/sf_task0.csv");
    let truncated: String = fs::read_to_string(&log).unwrap().lines().take(10).map(|l| format!("{l}\n")).collect();
    fs::write(&log, truncated).unwrap();
    let out = sfdqn(&["verify", dir.path().join("a").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stdout).contains("FAIL seed7/sf_task0.csv"));

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(sfdqn(&["verify", empty.path().to_str().unwrap()]).status.code(), Some(2));
}
