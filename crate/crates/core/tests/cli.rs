//! End-to-end tests of the command-line binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_peerfx"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn");
    assert!(
        out.status.success(),
        "peerfx {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_fixture(dir: &Path) {
    // Two schools: school a is an in-star around a1 (a1 itself has no
    // friends), school b holds a 4-chain plus an isolated node.
    fs::write(
        dir.join("nodes.csv"),
        "school_id,node_id,x1,x2,gpa\n\
         a,a1,0.5,2,1.1\n\
         a,a2,-1.0,0,0.3\n\
         a,a3,2.5,1,2.0\n\
         a,a4,0.0,3,-0.4\n\
         a,a5,1.5,1,0.9\n\
         b,b1,0.2,1,1.0\n\
         b,b2,-0.3,2,0.1\n\
         b,b3,1.1,0,1.7\n\
         b,b4,0.8,1,0.6\n\
         b,b5,-1.2,2,-0.9\n",
    )
    .unwrap();
    fs::write(
        dir.join("edges.csv"),
        "school_id,src,dst\n\
         a,a2,a1\n\
         a,a3,a1\n\
         a,a4,a1\n\
         a,a5,a1\n\
         b,b1,b2\n\
         b,b2,b3\n\
         b,b3,b4\n",
    )
    .unwrap();
}

#[test]
fn simulate_then_estimate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(
        &cfg,
        "variant = \"A\"\nschools = 5\nschool_size = 30\nseed = 42\n",
    )
    .unwrap();
    let out_dir = dir.path().join("sim");
    run_ok(&[
        "--out",
        out_dir.to_str().unwrap(),
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    for f in ["nodes.csv", "edges.csv", "params.json", "run_meta.json"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }

    // Same config, same seed: byte-identical data.
    let again = dir.path().join("sim2");
    run_ok(&[
        "--out",
        again.to_str().unwrap(),
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read(out_dir.join("nodes.csv")).unwrap(),
        fs::read(again.join("nodes.csv")).unwrap()
    );
    assert_eq!(
        fs::read(out_dir.join("edges.csv")).unwrap(),
        fs::read(again.join("edges.csv")).unwrap()
    );

    let est = dir.path().join("est");
    run_ok(&[
        "--out",
        est.to_str().unwrap(),
        "estimate",
        "--nodes",
        out_dir.join("nodes.csv").to_str().unwrap(),
        "--edges",
        out_dir.join("edges.csv").to_str().unwrap(),
        "--model",
        "4",
        "--varcomp",
    ]);
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(est.join("estimate.json")).unwrap()).unwrap();
    assert_eq!(doc["model"], "model4");
    let lambda = doc["coefficients"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "lambda")
        .unwrap()["estimate"]
        .as_f64()
        .unwrap();
    // True value 0.7; five schools of thirty is noisy but not this noisy.
    assert!((lambda - 0.7).abs() < 0.25, "lambda = {lambda}");
    assert!(doc["variance_components"]["sigma_eps2"].as_f64().unwrap() > 0.0);
    assert!(doc["diagnostics"]["weak_iv_f"].as_f64().unwrap() > 0.0);
}

#[test]
fn unknown_node_in_edges_is_a_readable_error() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    fs::write(
        dir.path().join("edges.csv"),
        "school_id,src,dst\na,a1,zz9\n",
    )
    .unwrap();
    let out = bin()
        .args([
            "--out",
            dir.path().to_str().unwrap(),
            "check-ident",
            "--nodes",
            dir.path().join("nodes.csv").to_str().unwrap(),
            "--edges",
            dir.path().join("edges.csv").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    // Machine-readable: one JSON object naming the offending node.
    let parsed: serde_json::Value =
        serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert!(parsed["error"].as_str().unwrap().contains("zz9"), "{stderr}");
}

#[test]
fn check_ident_flags_the_chain_school() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    run_ok(&[
        "--out",
        dir.path().to_str().unwrap(),
        "check-ident",
        "--nodes",
        dir.path().join("nodes.csv").to_str().unwrap(),
        "--edges",
        dir.path().join("edges.csv").to_str().unwrap(),
    ]);
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ident.json")).unwrap())
            .unwrap();
    let schools = doc["schools"].as_array().unwrap();
    // School a is an in-star: every path ends at the hub after one step.
    // School b is a 4-chain: b1 -> b4 has distance three.
    let a = schools.iter().find(|s| s["school_id"] == "a").unwrap();
    let b = schools.iter().find(|s| s["school_id"] == "b").unwrap();
    assert_eq!(a["distance3"], false);
    assert_eq!(b["distance3"], true);
    assert_eq!(doc["any_distance3"], true);
}

#[test]
fn alpha_shock_histogram_is_a_single_spike() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    run_ok(&[
        "--out",
        dir.path().to_str().unwrap(),
        "shock",
        "--nodes",
        dir.path().join("nodes.csv").to_str().unwrap(),
        "--edges",
        dir.path().join("edges.csv").to_str().unwrap(),
        "--kind",
        "alpha",
        "--magnitude",
        "2.0",
        "--lambda",
        "0.7",
    ]);
    let shock = fs::read_to_string(dir.path().join("shock.csv")).unwrap();
    for line in shock.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[3].parse::<f64>().unwrap(), 1.0, "{line}");
    }
    let hist = fs::read_to_string(dir.path().join("shock_hist.csv")).unwrap();
    let counts: Vec<u64> = hist
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(counts.iter().sum::<u64>(), 10);
    assert_eq!(counts.iter().filter(|&&c| c > 0).count(), 1);
}

#[test]
fn mc_outputs_and_reseeding() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(
        &cfg,
        "variant = \"A\"\nschools = 3\nschool_size = 25\nreplications = 2\n\
         seed = 5\nmodels = [4]\nvarcomp_models = []\n",
    )
    .unwrap();
    let o1 = dir.path().join("r1");
    let o2 = dir.path().join("r2");
    for o in [&o1, &o2] {
        run_ok(&[
            "--out",
            o.to_str().unwrap(),
            "mc",
            "--config",
            cfg.to_str().unwrap(),
        ]);
    }
    assert_eq!(
        fs::read(o1.join("mc_raw.csv")).unwrap(),
        fs::read(o2.join("mc_raw.csv")).unwrap()
    );
    let summary = fs::read_to_string(o1.join("mc_summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("model4,lambda,")));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(o1.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 5);
    assert_eq!(meta["command"], "mc");

    // The global --seed flag overrides the config seed.
    let o3 = dir.path().join("r3");
    run_ok(&[
        "--seed",
        "99",
        "--out",
        o3.to_str().unwrap(),
        "mc",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_ne!(
        fs::read(o1.join("mc_raw.csv")).unwrap(),
        fs::read(o3.join("mc_raw.csv")).unwrap()
    );
}

#[test]
fn estimate_without_gpa_fails() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("nodes.csv"),
        "school_id,node_id,x1\na,a1,0.5\na,a2,1.0\na,a3,-0.5\n",
    )
    .unwrap();
    fs::write(dir.path().join("edges.csv"), "school_id,src,dst\na,a1,a2\n").unwrap();
    let out = bin()
        .args([
            "--out",
            dir.path().to_str().unwrap(),
            "estimate",
            "--nodes",
            dir.path().join("nodes.csv").to_str().unwrap(),
            "--edges",
            dir.path().join("edges.csv").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("gpa"), "{stderr}");
}
