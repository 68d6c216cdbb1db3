//! End-to-end CLI checks: the documented grammar, exit codes, run-directory
//! artifacts, and byte-level reproducibility of the data files.

use std::path::Path;
use std::process::Command;

fn catk() -> Command {
    Command::new(env!("CARGO_BIN_EXE_catk"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn catk");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("spawn catk").status.code().unwrap_or(-1)
}

#[test]
fn unknown_flag_and_subcommand_exit_one() {
    assert_eq!(exit_code(catk().arg("--definitely-not-a-flag")), 1);
    assert_eq!(exit_code(catk().arg("frobnicate")), 1);
    assert_eq!(
        exit_code(catk().args(["gen-scenarios", "--bogus", "--out", "x.jsonl"])),
        1
    );
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    // finetune without a base model
    assert_eq!(
        exit_code(catk().args([
            "finetune",
            "--scenarios",
            "nope.jsonl",
            "--vocab",
            "nope.txt",
            "--out",
            dir.path().join("run").to_str().unwrap(),
        ])),
        1
    );
    // malformed branch probabilities
    assert_eq!(
        exit_code(catk().args([
            "gen-scenarios",
            "--branch-probs",
            "0.5,0.5",
            "--out",
            dir.path().join("s.jsonl").to_str().unwrap(),
        ])),
        1
    );
    // missing spec file
    assert_eq!(
        exit_code(catk().args([
            "sweep",
            "--spec",
            "missing.toml",
            "--out",
            dir.path().join("sweep").to_str().unwrap(),
        ])),
        1
    );
}

#[test]
fn full_pipeline_writes_run_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let scen = dir.path().join("scen.jsonl");
    let vocab = dir.path().join("vocab.txt");
    run_ok(catk().args([
        "gen-scenarios",
        "--n",
        "40",
        "--agents",
        "2",
        "--noise-std",
        "0.15",
        "--seed",
        "7",
        "--out",
        scen.to_str().unwrap(),
    ]));
    run_ok(catk().args([
        "build-vocab",
        "--scenarios",
        scen.to_str().unwrap(),
        "--size",
        "24",
        "--seed",
        "0",
        "--out",
        vocab.to_str().unwrap(),
    ]));

    let bc_dir = dir.path().join("bc");
    run_ok(catk().args([
        "pretrain",
        "--scenarios",
        scen.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--out",
        bc_dir.to_str().unwrap(),
        "--epochs",
        "2",
        "--hidden",
        "16",
        "--seed",
        "3",
    ]));
    for f in ["run.toml", "metrics.csv", "model_final.bin"] {
        assert!(bc_dir.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(bc_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# catk-metrics v1\n"));
    assert!(metrics.lines().nth(1).unwrap().starts_with("epoch,loss,"));

    let ft_dir = dir.path().join("ft");
    run_ok(catk().args([
        "finetune",
        "--scenarios",
        scen.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--model",
        bc_dir.join("model_final.bin").to_str().unwrap(),
        "--strategy",
        "catk",
        "--k",
        "8",
        "--epochs",
        "1",
        "--out",
        ft_dir.to_str().unwrap(),
        "--seed",
        "3",
    ]));

    let eval_out = run_ok(catk().args([
        "eval",
        "--run-dir",
        ft_dir.to_str().unwrap(),
        "--rollouts",
        "2",
        "--k-infer",
        "4",
    ]));
    assert!(eval_out.contains("# catk-metrics v1"));
    assert!(ft_dir.join("eval_report.csv").exists());
    assert!(ft_dir.join("eval_report.json").exists());

    // Rollout dump: one JSON record per scenario, loadable.
    let dump = dir.path().join("records.jsonl");
    run_ok(catk().args([
        "rollout",
        "--scenarios",
        scen.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--model",
        ft_dir.join("model_final.bin").to_str().unwrap(),
        "--strategy",
        "catk",
        "--k",
        "4",
        "--limit",
        "5",
        "--out",
        dump.to_str().unwrap(),
    ]));
    let records = catk_core::rollout::load_records(&dump).unwrap();
    assert_eq!(records.len(), 5);
}

fn write_tiny_spec(path: &Path) {
    std::fs::write(
        path,
        r#"
name = "tiny"
seed = 5

[scenario]
n_scenarios = 40
n_agents = 2
noise_std = 0.15
holdout_count = 8

[vocab]
size = 24

[model]
hidden = 16

[pretrain]
epochs = 2

[[finetune]]
strategy = "catk"
epochs = 1
k = 8

[[finetune]]
strategy = "trajeglish"
epochs = 1
k = 5
tau = 0.05

[eval]
rollouts = 2
k_infer = 4
"#,
    )
    .unwrap();
}

#[test]
fn sweep_ablation_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("exp.toml");
    write_tiny_spec(&spec);
    let out = dir.path().join("ablation");
    run_ok(catk().args([
        "sweep",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    // Config snapshot is stored verbatim.
    assert_eq!(
        std::fs::read(&spec).unwrap(),
        std::fs::read(out.join("config.toml")).unwrap()
    );
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(csv.starts_with("# catk-metrics v1\n"));
    assert!(csv.contains("bc_pretrain,ok,"));
    assert!(csv.contains("ft_catk_k8,ok,"));
    assert!(csv.contains("ft_trajeglish_k5,ok,"));
    // Both fine-tune rows share the base checkpoint hash.
    let hash_of = |row: &str| {
        csv.lines()
            .find(|l| l.starts_with(row))
            .unwrap()
            .split(',')
            .nth(2)
            .unwrap()
            .to_string()
    };
    assert_eq!(hash_of("ft_catk_k8"), hash_of("ft_trajeglish_k5"));

    // The report subcommand rebuilds a table covering every run directory.
    let report = run_ok(catk().args(["report", "--dir", out.to_str().unwrap()]));
    assert!(report.contains("bc_pretrain"));
    assert!(report.contains("ft_catk_k8"));
    assert!(report.contains("ft_trajeglish_k5"));
}

#[test]
fn k_sweep_creates_one_run_dir_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("exp.toml");
    write_tiny_spec(&spec);
    let out = dir.path().join("ksweep");
    run_ok(catk().args([
        "sweep",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--param",
        "K",
        "--values",
        "2,6",
    ]));
    assert!(out.join("K_2").join("model_final.bin").exists());
    assert!(out.join("K_6").join("model_final.bin").exists());
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "# catk-metrics v1");
    assert!(lines.next().unwrap().starts_with("K,status,"));
    assert!(csv.contains("\n2,ok,"));
    assert!(csv.contains("\n6,ok,"));
}

#[test]
fn equal_seed_reruns_reproduce_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let scen = dir.path().join("scen.jsonl");
    let vocab = dir.path().join("vocab.txt");
    run_ok(catk().args([
        "gen-scenarios", "--n", "30", "--seed", "11", "--out", scen.to_str().unwrap(),
    ]));
    run_ok(catk().args([
        "build-vocab",
        "--scenarios",
        scen.to_str().unwrap(),
        "--size",
        "16",
        "--out",
        vocab.to_str().unwrap(),
    ]));
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        run_ok(catk().args([
            "pretrain",
            "--scenarios",
            scen.to_str().unwrap(),
            "--vocab",
            vocab.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--epochs",
            "2",
            "--hidden",
            "16",
            "--seed",
            "9",
        ]));
        outputs.push((
            std::fs::read(run.join("metrics.csv")).unwrap(),
            std::fs::read(run.join("model_final.bin")).unwrap(),
        ));
    }
    assert_eq!(outputs[0].0, outputs[1].0, "metrics bytes differ");
    assert_eq!(outputs[0].1, outputs[1].1, "model bytes differ");
}
