use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::datasets::{fmt_sig9, DomainPair};
use crate::error::{Error, Result};

use super::{train, AblationVariant, TrainConfig, Variant};

/// Applies `f` to every item on up to `jobs` threads; results keep input
/// order, so output never depends on scheduling.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                out.lock().expect("no panics while held")[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("threads joined")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}

fn final_accuracy(data: &DomainPair, cfg: &TrainConfig) -> Result<f64> {
    let outcome = train(data, cfg)?;
    outcome
        .report
        .summary
        .get("target_accuracy")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::InvalidArgument("target labels are required to score a run".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub id: usize,
    pub variant: &'static str,
    pub accuracy: f64,
}

/// One run per alignment variant under an identical budget and seed.
pub fn run_ablation_suite(
    data: &DomainPair,
    cfg: &TrainConfig,
    variants: &[AblationVariant],
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::InvalidArgument("no ablation variants selected".into()));
    }
    par_map(variants, jobs, |&v| {
        let cfg = TrainConfig {
            variant: Variant::Ablation(v),
            ..cfg.clone()
        };
        Ok(AblationRow {
            id: v.id(),
            variant: v.name(),
            accuracy: final_accuracy(data, &cfg)?,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub beta: f64,
    pub accuracy: f64,
}

/// One run per `(α, β)` in the grid, α varying fastest within each β.
pub fn sensitivity_sweep(
    data: &DomainPair,
    alphas: &[f64],
    betas: &[f64],
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<Vec<SweepPoint>> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::InvalidArgument("sweep grids must be non-empty".into()));
    }
    let grid: Vec<(f64, f64)> = betas
        .iter()
        .flat_map(|&b| alphas.iter().map(move |&a| (a, b)))
        .collect();
    par_map(&grid, jobs, |&(alpha, beta)| {
        let cfg = TrainConfig {
            alpha,
            beta,
            ..cfg.clone()
        };
        Ok(SweepPoint {
            alpha,
            beta,
            accuracy: final_accuracy(data, &cfg)?,
        })
    })
    .into_iter()
    .collect()
}

pub fn write_sweep_csv<W: Write>(mut w: W, points: &[SweepPoint]) -> Result<()> {
    writeln!(w, "alpha,beta,accuracy")?;
    for p in points {
        writeln!(w, "{},{},{}", fmt_sig9(p.alpha), fmt_sig9(p.beta), fmt_sig9(p.accuracy))?;
    }
    Ok(())
}
