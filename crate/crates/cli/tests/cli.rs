use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn gla(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gla"));
    cmd.args(args).env_remove("GLA_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn gla")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_SYNTHETIC: &str = r#"{
    "dataset": {"kind": "preset", "name": "gauss_same_cov", "n": 80},
    "train": {"epochs": 15, "batch": 80}
}"#;

const SMALL_ADAPT: &str = r#"{
    "dataset": {"kind": "shifted", "task": "moons", "shift": {"rotation_deg": 30}, "n": 64},
    "train": {"epochs": 2, "batch": 32}
}"#;

fn run_synthetic(tmp: &Path, out: &str) -> Output {
    let cfg = write_config(tmp, "syn.json", SMALL_SYNTHETIC);
    let out = tmp.join(out);
    gla(
        &["synthetic", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[],
    )
}

#[test]
fn synthetic_writes_outputs_and_echoes_preset_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_synthetic(tmp.path(), "run");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = tmp.path().join("run");
    for f in [
        "metrics.csv",
        "summary.json",
        "scatter_initial.csv",
        "scatter_final.csv",
        "checkpoint.bin",
        "config_echo.json",
        "timing.csv",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let echo = json(&run.join("config_echo.json"));
    let params = &echo["provenance"]["params"];
    assert_eq!(echo["provenance"]["generator"], "gauss_same_cov");
    assert_eq!(params["source_mean"], serde_json::json!([5.0, 5.0]));
    assert_eq!(params["target_mean"], serde_json::json!([1.0, 1.0]));
    assert_eq!(params["source_cov"], serde_json::json!([[4.0, 2.0], [2.0, 2.0]]));
    assert_eq!(params["target_cov"], serde_json::json!([[4.0, 2.0], [2.0, 2.0]]));
    let summary = json(&run.join("summary.json"));
    assert!(summary["final_energy"].as_f64().unwrap() >= 0.0);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 16);
    assert!(metrics.starts_with("epoch,dal\n"));
}

#[test]
fn rerun_with_same_config_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_synthetic(tmp.path(), "a")), 0);
    assert_eq!(code(&run_synthetic(tmp.path(), "b")), 0);
    for f in ["metrics.csv", "summary.json", "scatter_initial.csv", "scatter_final.csv", "checkpoint.bin"] {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn missing_output_directory_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "syn.json", SMALL_SYNTHETIC);
    let o = gla(&["synthetic", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("output directory"), "{}", stderr(&o));
    let deep = tmp.path().join("no/such/dir");
    let o = gla(
        &["synthetic", "--config", cfg.to_str().unwrap(), "--out", deep.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("output directory"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    for (name, text) in [
        ("variant.json", r#"{"train": {"variant": "dfa_magic"}}"#),
        ("key.json", r#"{"train": {"epochs": 1}, "colour": "blue"}"#),
        ("lr.json", r#"{"train": {"lr": -1}}"#),
        ("csv.json", r#"{"dataset": {"kind": "csv", "path": "/no/such/file.csv"}}"#),
    ] {
        let cfg = write_config(tmp.path(), name, text);
        let o = gla(
            &["adapt", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
            &[],
        );
        assert_eq!(code(&o), 2, "{name}: {}", stderr(&o));
        assert!(!out.join("metrics.csv").exists());
    }
    assert_eq!(code(&gla(&["adapt", "--config"], &[])), 2);
    assert_eq!(code(&gla(&["frobnicate"], &[])), 2);
}

#[test]
fn adapt_echoes_paper_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.json", SMALL_ADAPT);
    let out = tmp.path().join("ent");
    let o = gla(&["adapt", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo = json(&out.join("config_echo.json"));
    assert_eq!(echo["config"]["train"]["variant"], "dfa_ent");
    assert_eq!(echo["config"]["train"]["alpha"], 0.01);
    assert_eq!(echo["config"]["train"]["beta"], 10.0);
    let summary = json(&out.join("summary.json"));
    assert!(summary["target_accuracy"].as_f64().is_some());
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,total,cls,ent,kld,dal,target_acc\n"), "{metrics}");

    let mcd = write_config(
        tmp.path(),
        "m.json",
        &SMALL_ADAPT.replace(r#""epochs": 2"#, r#""epochs": 1, "variant": "dfa_mcd""#),
    );
    let out = tmp.path().join("mcd");
    let o = gla(&["adapt", "--config", mcd.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo = json(&out.join("config_echo.json"));
    assert_eq!(echo["config"]["train"]["mcd_inner_n"], 4);
}

#[test]
fn seed_flag_beats_environment_beats_file() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL_ADAPT.replace(r#""epochs": 2"#, r#""epochs": 1, "seed": 3"#);
    let cfg = write_config(tmp.path(), "a.json", &text);
    let seed_of = |out: &str, extra: &[&str], envs: &[(&str, &str)]| {
        let out = tmp.path().join(out);
        let mut args = vec!["adapt", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = gla(&args, envs);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        json(&out.join("config_echo.json"))["config"]["train"]["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of("file", &[], &[]), 3);
    assert_eq!(seed_of("env", &[], &[("GLA_SEED", "5")]), 5);
    assert_eq!(seed_of("flag", &["--seed", "9"], &[("GLA_SEED", "5")]), 9);
    let o = gla(
        &["adapt", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("bad").to_str().unwrap()],
        &[("GLA_SEED", "minus one")],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn latent_histogram_is_written_on_request() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL_ADAPT.replace(r#""train""#, r#""metrics": ["latent_histogram"], "train""#);
    let cfg = write_config(tmp.path(), "a.json", &text);
    let out = tmp.path().join("h");
    let o = gla(&["adapt", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let hist = std::fs::read_to_string(out.join("latent_histogram.csv")).unwrap();
    assert!(hist.contains("# source") && hist.contains("# target"));
}

#[test]
fn ablation_honours_partial_lists_and_tags_ids() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL_ADAPT.replace(r#""epochs": 2"#, r#""epochs": 1"#);
    let partial = text.replace(r#""train""#, r#""ablation_variants": [4, 1], "train""#);
    let cfg = write_config(tmp.path(), "p.json", &partial);
    let out = tmp.path().join("partial");
    let o = gla(&["ablation", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let ids: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["4", "1"]);

    let cfg = write_config(tmp.path(), "f.json", &text);
    let out = tmp.path().join("full");
    let o = gla(
        &["ablation", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "2"],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], (i + 1).to_string());
        let acc: f64 = row[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("| ")).count(), 7);

    let bad = text.replace(r#""train""#, r#""ablation_variants": [7], "train""#);
    let cfg = write_config(tmp.path(), "b.json", &bad);
    let o = gla(
        &["ablation", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("bad").to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gla(&["gradcheck", "--seeds", "2", "--out", tmp.path().to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    for name in ["cls", "kld", "dal", "ent", "adv", "recon", "klddir", "daldir", "feature_norm", "dfa_ent/source"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{name},"))), "{name} missing");
    }
    assert!(tmp.path().join("gradcheck.csv").is_file());
    let o = gla(&["gradcheck", "--seeds", "1", "--negative-control"], &[]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn report_compares_runs_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&gla(&["report", empty.to_str().unwrap()], &[])), 2);

    let runs = tmp.path().join("runs");
    std::fs::create_dir(&runs).unwrap();
    for (name, variant) in [("b_source", "source_only"), ("a_dfa", "dfa_ent")] {
        let out = runs.join(name);
        let c = write_config(
            tmp.path(),
            &format!("{name}.json"),
            &SMALL_ADAPT.replace(r#""epochs": 2"#, &format!(r#""epochs": 1, "variant": "{variant}""#)),
        );
        let o = gla(&["adapt", "--config", c.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let first = gla(&["report", runs.to_str().unwrap()], &[]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let md = stdout(&first);
    let rows: Vec<&str> = md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| run")).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].contains("a_dfa") && rows[0].contains("dfa_ent"));
    assert!(rows[1].contains("b_source") && rows[1].contains("source_only"));
    let target = tmp.path().join("report.md");
    let second = gla(&["report", runs.to_str().unwrap(), "--out", target.to_str().unwrap()], &[]);
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(std::fs::read_to_string(target).unwrap(), md);
}
