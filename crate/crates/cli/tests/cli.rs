use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn flowsur(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowsur"))
        .args(args)
        .current_dir(dir)
        .env_remove("FLOWSUR_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(out: Output) -> String {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Dataset, small flow and surrogate checkpoints in `dir`.
fn prepare(dir: &Path) {
    ok(flowsur(dir, &["gen-data", "--n", "80", "--seed", "1", "--out", "designs.csv"]));
    ok(flowsur(
        dir,
        &["train-flow", "--data", "designs.csv", "--epochs", "30", "--hidden", "16", "--out", "flow.json"],
    ));
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    assert!(dir.join("designs.csv").exists() && dir.join("designs.csv.stats.csv").exists());
    let header = fs::read_to_string(dir.join("designs.csv")).unwrap();
    assert!(header.lines().next().unwrap().ends_with(",cl"));

    ok(flowsur(dir, &["train-surrogate", "--data", "designs.csv", "--epochs", "300", "--out", "sur.json"]));
    fs::write(dir.join("run.cfg"), "strategy = energy\nsteps = 20\nn = 4\nlambda = 1\noutput = out\n").unwrap();
    let stdout = ok(flowsur(dir, &["generate", "--config", "run.cfg", "--set", "seed=3"]));
    assert!(stdout.contains("energy tc=0 T=20"), "{stdout}");
    for f in ["report.csv", "report.json", "samples.csv", "config.txt"] {
        assert!(dir.join("out").join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(dir.join("out/config.txt")).unwrap().contains("seed = 3"));

    let table = ok(flowsur(dir, &["report", "--dir", "out"]));
    assert!(table.starts_with("label"), "{table}");

    let diag = ok(flowsur(
        dir,
        &[
            "diagnose",
            "--config",
            "run.cfg",
            "--set",
            "evaluator=surrogate",
            "--set",
            "surrogate=sur.json",
            "--set",
            "dataset=designs.csv",
            "--set",
            "iterations=3",
        ],
    ));
    assert!(diag.contains("early MC-dropout sigma"), "{diag}");
    for f in ["alignment.csv", "gap.csv", "uq.csv"] {
        assert!(dir.join("out").join(f).exists(), "{f}");
    }
}

#[test]
fn conditional_training_needs_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(flowsur(dir, &["gen-data", "--n", "40", "--out", "designs.csv"]));
    ok(flowsur(
        dir,
        &["train-flow", "--data", "designs.csv", "--epochs", "2", "--hidden", "8", "--conditional", "--out", "c.json"],
    ));
    // Drop the label column.
    let text: String = fs::read_to_string(dir.join("designs.csv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
        .collect();
    fs::write(dir.join("bare.csv"), text).unwrap();
    let out = flowsur(dir, &["train-flow", "--data", "bare.csv", "--epochs", "2", "--conditional", "--out", "c.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);

    // I/O: missing config file and missing checkpoint.
    assert_eq!(code(&flowsur(dir, &["generate", "--config", "absent.cfg"])), 3);
    assert_eq!(code(&flowsur(dir, &["generate", "--set", "model=absent.json", "--set", "steps=5"])), 3);

    // Configuration: unknown key, bad value, dimension mismatch, usage error.
    assert_eq!(code(&flowsur(dir, &["generate", "--set", "colour=red"])), 2);
    assert_eq!(code(&flowsur(dir, &["generate", "--set", "cutoff=2"])), 2);
    let dim = flowsur(dir, &["generate", "--set", "dim=2", "--set", "steps=5", "--set", "n=2"]);
    assert_eq!(code(&dim), 2);
    let msg = String::from_utf8_lossy(&dim.stderr);
    assert!(msg.contains("d=16") && msg.contains("d=2"), "{msg}");
    assert_eq!(code(&flowsur(dir, &["frobnicate"])), 2);

    // Numeric: a step size far beyond stability makes every sample fail.
    let out = flowsur(
        dir,
        &["generate", "--set", "lambda=1e9", "--set", "steps=10", "--set", "n=3", "--set", "output=blown"],
    );
    assert_eq!(code(&out), 4, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("blown/report.csv").exists());
}

#[test]
fn output_dir_env_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    let out = Command::new(env!("CARGO_BIN_EXE_flowsur"))
        .args([
            "generate",
            "--set",
            "strategy=uncond",
            "--set",
            "steps=5",
            "--set",
            "n=2",
            "--set",
            "output=configured",
        ])
        .current_dir(dir)
        .env("FLOWSUR_OUTPUT_DIR", dir.join("from_env"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("from_env/report.csv").exists());
    assert!(!dir.join("configured").exists());
}

#[test]
fn repeated_runs_give_identical_reports_apart_from_wall_time() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    let strip = |p: &Path| -> Vec<String> {
        fs::read_to_string(p).unwrap().lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
    };
    let mut reports = Vec::new();
    for out in ["a", "b"] {
        let o = format!("output={out}");
        ok(flowsur(
            dir,
            &[
                "generate",
                "--set",
                "strategy=dflow",
                "--set",
                "steps=5",
                "--set",
                "n=3",
                "--set",
                "iterations=4",
                "--set",
                &o,
            ],
        ));
        assert_eq!(fs::read(dir.join(out).join("samples.csv")).unwrap(), fs::read(dir.join("a/samples.csv")).unwrap());
        reports.push(strip(&dir.join(out).join("report.csv")));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn direct_flags_match_set_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    ok(flowsur(
        dir,
        &[
            "generate",
            "--strategy",
            "energy",
            "--lambda",
            "5",
            "--tc",
            "0.2",
            "--steps",
            "8",
            "--n",
            "3",
            "--seed",
            "4",
            "--out",
            "flags",
        ],
    ));
    ok(flowsur(
        dir,
        &[
            "generate",
            "--set",
            "strategy=energy",
            "--set",
            "lambda=5",
            "--set",
            "cutoff=0.2",
            "--set",
            "steps=8",
            "--set",
            "n=3",
            "--set",
            "seed=4",
            "--set",
            "output=sets",
        ],
    ));
    assert_eq!(fs::read(dir.join("flags/samples.csv")).unwrap(), fs::read(dir.join("sets/samples.csv")).unwrap());
    ok(flowsur(
        dir,
        &[
            "generate",
            "--strategy",
            "dflow",
            "--steps",
            "5",
            "--iters",
            "3",
            "--tau",
            "0.05",
            "--tol",
            "1e-6",
            "--n",
            "2",
            "--out",
            "d",
        ],
    ));
    let trace = fs::read_to_string(dir.join("d/trace.csv")).unwrap();
    assert!(trace.lines().count() > 1);
}
