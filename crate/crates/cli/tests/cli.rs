use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("sdbc-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn sdbc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdbc"))
        .current_dir(dir)
        .env("SDBC_GA__POPULATION", "8")
        .env("SDBC_GA__GENERATIONS", "3")
        .env("SDBC_GA__TRIALS", "2")
        .env("SDBC_NOVELTY__K", "3")
        .env("SDBC_TASKS__RESOURCE_SHARING__MAX_STEPS", "80")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn same_seed_gives_identical_logs() {
    let d = scratch("det");
    ok(sdbc(
        &d,
        &["run", "--method", "ns-sd+", "--seed", "3", "--out", "a"],
    ));
    ok(sdbc(
        &d,
        &["run", "--method", "ns-sd+", "--seed", "3", "--out", "b"],
    ));
    for f in ["log.csv", "samples.csv", "features.csv", "best_genome.txt"] {
        let a = fs::read(d.join("a/resource-sharing-ns-sd-plus-s3").join(f)).unwrap();
        let b = fs::read(d.join("b/resource-sharing-ns-sd-plus-s3").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    fs::remove_dir_all(&d).unwrap();
}

#[test]
fn thread_count_does_not_change_results() {
    let d = scratch("par");
    ok(sdbc(
        &d,
        &[
            "run",
            "--method",
            "ns-ts",
            "--runs",
            "2",
            "--parallel",
            "1",
            "--out",
            "p1",
        ],
    ));
    ok(sdbc(
        &d,
        &[
            "run",
            "--method",
            "ns-ts",
            "--runs",
            "2",
            "--parallel",
            "2",
            "--out",
            "p2",
        ],
    ));
    for seed in [1, 2] {
        let run = format!("resource-sharing-ns-ts-s{seed}");
        for f in ["log.csv", "samples.csv", "archive.csv"] {
            assert_eq!(
                fs::read(d.join("p1").join(&run).join(f)).unwrap(),
                fs::read(d.join("p2").join(&run).join(f)).unwrap(),
                "{run}/{f}"
            );
        }
    }
    fs::remove_dir_all(&d).unwrap();
}

#[test]
fn unknown_method_is_rejected() {
    let d = scratch("bad");
    let out = sdbc(&d, &["run", "--method", "ns-zz", "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("method"));
    assert!(!d.join("x").exists());
    fs::write(d.join("c.toml"), "[ga]\nmutation_sigma = -1.0\n").unwrap();
    assert!(!sdbc(&d, &["run", "--config", "c.toml"]).status.success());
    fs::remove_dir_all(&d).unwrap();
}

#[test]
fn replay_reproduces_recorded_trial() {
    let d = scratch("replay");
    ok(sdbc(&d, &["run", "--method", "fit", "--out", "r"]));
    let run = d.join("r/resource-sharing-fit-s1");
    let best = fs::read_to_string(run.join("best.csv")).unwrap();
    let first: Vec<&str> = best.lines().nth(1).unwrap().split(',').collect();
    let stdout = ok(sdbc(
        &d,
        &[
            "replay",
            "r/resource-sharing-fit-s1/best_genome.txt",
            "--out",
            "t.csv",
        ],
    ));
    assert!(stdout.contains(&format!("seed={}", first[1])), "{stdout}");
    assert!(
        stdout.contains(&format!("fitness={}\t", first[2])),
        "{stdout}"
    );
    let traj = fs::read_to_string(d.join("t.csv")).unwrap();
    assert!(traj.starts_with("step,robot,"));
    fs::remove_dir_all(&d).unwrap();
}

#[test]
fn corrupted_genome_fails_cleanly() {
    let d = scratch("corrupt");
    ok(sdbc(&d, &["run", "--method", "fit", "--out", "r"]));
    let path = d.join("r/resource-sharing-fit-s1/best_genome.txt");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("# spec = 6-", "# spec = 7-", 1)).unwrap();
    let out = sdbc(&d, &["replay", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    fs::write(&path, "# sdbc genome\nnot numbers\n").unwrap();
    assert!(!sdbc(&d, &["replay", path.to_str().unwrap()])
        .status
        .success());
    fs::remove_dir_all(&d).unwrap();
}

#[test]
fn analyze_and_defaults() {
    let d = scratch("analyze");
    ok(sdbc(
        &d,
        &["run", "--method", "fit", "--runs", "2", "--out", "r"],
    ));
    ok(sdbc(
        &d,
        &["run", "--method", "ns-sd", "--runs", "2", "--out", "r"],
    ));
    let stdout = ok(sdbc(&d, &["analyze", "r", "--out", "a"]));
    assert!(stdout.contains("resource-sharing\tfit\truns=2"), "{stdout}");
    assert!(d.join("a/mann_whitney.csv").exists());
    let defaults = ok(sdbc(&d, &["print-defaults"]));
    assert!(defaults.contains("trials = 10  # published"));
    fs::remove_dir_all(&d).unwrap();
}
