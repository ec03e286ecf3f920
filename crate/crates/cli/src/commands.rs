use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use gla_core::autodiff::{BackwardFault, GradCheck};
use gla_core::checks::gradient_suite;
use gla_core::datasets::{fmt_sig9, DomainPair};
use gla_core::metrics::latent_histogram;
use gla_core::model::{save_checkpoint, CheckpointMeta};
use gla_core::training::{model_inputs, run_ablation_suite, train, AblationVariant, TrainOutcome};
use serde_json::json;

use crate::config::{usage, ExperimentConfig, Metric};

/// Bins and range of `latent_histogram.csv`.
const HIST_BINS: usize = 40;
const HIST_RANGE: (f64, f64) = (-4.0, 4.0);

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let mut w = create(dir, name)?;
    w.write_all(text.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(w.flush()?)
}

fn write_echo(cfg: &ExperimentConfig, data: &DomainPair, out: &Path) -> Result<()> {
    let echo = json!({
        "config": cfg,
        "config_hash": cfg.train.hash(),
        "provenance": data.provenance(),
    });
    write_text(out, "config_echo.json", &serde_json::to_string_pretty(&echo)?)
}

/// `metrics.csv`, `timing.csv`, `summary.json`, `checkpoint.bin` and the
/// selected optional outputs.
fn write_run(cfg: &ExperimentConfig, data: &DomainPair, outcome: &TrainOutcome, out: &Path) -> Result<()> {
    let report = &outcome.report;
    let mut w = create(out, "metrics.csv")?;
    report.write_metrics_csv(&mut w)?;
    w.flush()?;
    let mut w = create(out, "timing.csv")?;
    report.write_timing_csv(&mut w)?;
    w.flush()?;
    write_text(out, "summary.json", &report.summary_json()?)?;
    let meta = CheckpointMeta {
        seed: cfg.train.seed,
        config_hash: cfg.train.hash(),
    };
    save_checkpoint(&out.join("checkpoint.bin"), &outcome.model, &meta)?;

    if cfg.metrics.contains(&Metric::LatentHistogram) {
        let (xs, xt) = model_inputs(data, &cfg.train)?;
        let mut w = create(out, "latent_histogram.csv")?;
        for (domain, x) in [("source", xs), ("target", xt)] {
            let (_, tap) = outcome.model.encode_eval_with_tap(&x)?;
            let dims: Vec<usize> = (0..tap.cols().min(4)).collect();
            writeln!(w, "# {domain}")?;
            latent_histogram(&tap, &dims, HIST_BINS, HIST_RANGE)?.write_csv(&mut w)?;
        }
        w.flush()?;
    }
    if cfg.metrics.contains(&Metric::NormTrace) {
        let mut w = create(out, "norm_trace.csv")?;
        writeln!(w, "iteration,mean_norm")?;
        for (i, v) in outcome.norm_trace.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, fmt_sig9(*v))?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn synthetic(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = cfg.dataset.load(cfg.train.seed)?;
    write_echo(cfg, &data, out)?;
    let outcome = train(&data, &cfg.train)?;
    write_run(cfg, &data, &outcome, out)?;
    let (initial, last) = outcome.scatter.as_ref().expect("alignment runs dump scatter");
    for (name, dump) in [("scatter_initial.csv", initial), ("scatter_final.csv", last)] {
        let mut w = create(out, name)?;
        dump.write_csv(&mut w)?;
        w.flush()?;
    }
    let s = &outcome.report.summary;
    println!(
        "{}: energy {} -> {}, mean gap {} -> {}",
        data.provenance().generator,
        s["initial_energy"],
        s["final_energy"],
        s["initial_mean_gap"],
        s["final_mean_gap"]
    );
    Ok(())
}

pub fn adapt(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = cfg.dataset.load(cfg.train.seed)?;
    write_echo(cfg, &data, out)?;
    let outcome = train(&data, &cfg.train)?;
    write_run(cfg, &data, &outcome, out)?;
    let s = &outcome.report.summary;
    match s.get("target_accuracy") {
        Some(acc) => println!("{}: target accuracy {acc}", cfg.train.variant),
        None => println!("{}: finished (no target labels)", cfg.train.variant),
    }
    Ok(())
}

pub fn ablation(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<()> {
    let variants = cfg
        .ablation_variants
        .iter()
        .map(|&id| {
            AblationVariant::ALL
                .into_iter()
                .find(|v| v.id() == id)
                .ok_or_else(|| usage(format!("unknown ablation variant id {id} (expected 1 to 6)")))
        })
        .collect::<Result<Vec<_>>>()?;
    if variants.is_empty() {
        return Err(usage("ablation_variants is empty"));
    }
    let data = cfg.dataset.load(cfg.train.seed)?;
    write_echo(cfg, &data, out)?;
    let rows = run_ablation_suite(&data, &cfg.train, &variants, jobs)?;

    let mut w = create(out, "ablation.csv")?;
    writeln!(w, "id,variant,accuracy")?;
    for r in &rows {
        writeln!(w, "{},{},{}", r.id, r.variant, fmt_sig9(r.accuracy))?;
    }
    w.flush()?;
    let mut summary = serde_json::Map::new();
    summary.insert("seed".into(), json!(cfg.train.seed));
    summary.insert("config_hash".into(), json!(cfg.train.hash()));
    summary.insert("variant".into(), json!("ablation"));
    for r in &rows {
        summary.insert(format!("accuracy_{}_{}", r.id, r.variant), json!(r.accuracy));
    }
    write_text(out, "summary.json", &serde_json::to_string_pretty(&summary)?)?;

    println!("| id | variant | accuracy |");
    println!("|---:|---|---:|");
    for r in &rows {
        println!("| {} | {} | {:.4} |", r.id, r.variant, r.accuracy);
    }
    Ok(())
}

/// Prints one line per check; returns whether all passed.
pub fn gradcheck(seeds: u64, negative_control: bool, out: Option<&Path>) -> Result<bool> {
    if seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    if let Some(dir) = out {
        if !dir.is_dir() {
            return Err(usage(format!("output directory {} does not exist", dir.display())));
        }
    }
    let check = GradCheck {
        fault: negative_control.then_some(BackwardFault {
            kind: "log",
            factor: 1.5,
        }),
        ..GradCheck::default()
    };
    let rows = gradient_suite(seeds, &check)?;
    let mut text = String::from("check,seeds,max_rel_error,redraws,passed\n");
    for r in &rows {
        text += &format!(
            "{},{},{:.3e},{},{}\n",
            r.name,
            r.seeds,
            r.max_rel_error,
            r.redraws,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    print!("{text}");
    if let Some(dir) = out {
        std::fs::write(dir.join("gradcheck.csv"), &text)?;
    }
    let passed = rows.iter().all(|r| r.passed);
    if negative_control {
        eprintln!("negative control: log backward rule scaled by 1.5");
    }
    Ok(passed)
}
