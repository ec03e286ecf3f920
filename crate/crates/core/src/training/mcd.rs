use std::time::Instant;

use crate::autodiff::Tape;
use crate::datasets::DomainPair;
use crate::error::{Error, Result};
use crate::losses::{dal, kld_to_prior, mcd_discrepancy, softmax_cross_entropy};
use crate::metrics::{accuracy, ensemble_probs, RunReport};
use crate::model::{Forward, Mode, ModelBundle, ParamId, ParamStore, PriorSampler};
use crate::rng::SeedStreams;
use crate::tensor::Tensor;

use super::{
    combine, epoch_batches, finish_summary, train_step, EpochMeans, Optimizer, Prepared,
    TrainConfig, TrainOutcome, Variant,
};

const COLUMNS: [&str; 5] = ["cls", "kld", "adv_step2", "adv", "dal"];

fn snapshot(params: &ParamStore, ids: &[ParamId]) -> Vec<(ParamId, Tensor)> {
    ids.iter().map(|&id| (id, params.get(id).clone())).collect()
}

/// Fails with [`Error::FrozenModified`] if any snapshotted parameter changed
/// by even one bit.
pub fn assert_unchanged(params: &ParamStore, before: &[(ParamId, Tensor)]) -> Result<()> {
    for (id, old) in before {
        let now = params.get(*id);
        let same = now.shape() == old.shape()
            && now
                .data()
                .iter()
                .zip(old.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::FrozenModified(params.name(*id).to_string()));
        }
    }
    Ok(())
}

/// Per-epoch evaluation from one eval-mode pass over the target domain: the
/// two heads' mean absolute disagreement, and with labels the ensemble and
/// first-head accuracies.
fn evaluate_target(model: &ModelBundle, data: &DomainPair, xt: &Tensor) -> Result<(f64, Option<(f64, f64)>)> {
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &model.params, Mode::Eval).frozen();
    let x = fwd.input(xt.clone())?;
    let z = model.encode(&mut fwd, x)?;
    let l1 = model.classify(&mut fwd, z, 0)?;
    let l2 = model.classify(&mut fwd, z, 1)?;
    let p1 = fwd.tape().softmax_rows(l1)?;
    let p2 = fwd.tape().softmax_rows(l2)?;
    let d = mcd_discrepancy(fwd.tape(), p1, p2)?;
    let tape = fwd.tape_ref();
    let disc = tape.value(d).item()?;
    let Some(eval) = data.eval_view() else {
        return Ok((disc, None));
    };
    let (l1, l2) = (tape.value(l1), tape.value(l2));
    let both = accuracy(&ensemble_probs(l1, l2)?, eval.target_labels)?;
    Ok((disc, Some((both, accuracy(l1, eval.target_labels)?))))
}

/// Three steps per minibatch:
/// 1. update G, F1, F2 on `L_cls + α L_kld`;
/// 2. fix G, update F1, F2 on `L_cls − L_adv + α L_kld`;
/// 3. fix F1, F2, `mcd_inner_n` times update G, D on `L_adv + β L_dal`,
///    with a fresh prior batch each time.
pub fn train_dfa_mcd(data: &DomainPair, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let cfg = &TrainConfig {
        variant: Variant::DfaMcd,
        ..cfg.clone()
    };
    cfg.validate()?;
    let prep = Prepared::new(data, cfg)?;
    let ys = prep.labels()?.to_vec();
    let w = cfg.weights();

    let mut model = ModelBundle::new(cfg.architecture(prep.classes), cfg.seed)?;
    let streams = SeedStreams::new(cfg.seed);
    let mut batch_rng = streams.stream("batching");
    let mut prior = PriorSampler::new(model.arch.latent, streams.stream("prior"));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.params);

    let encoder = model.encoder_params();
    let decoder = model.decoder_params();
    let heads = model.all_classifier_params();
    let step1: Vec<ParamId> = encoder.iter().chain(&heads).copied().collect();
    let step3: Vec<ParamId> = encoder.iter().chain(&decoder).copied().collect();
    let fixed_in_step2: Vec<ParamId> = step3.clone();

    let mut columns = COLUMNS.to_vec();
    columns.push("target_disc");
    if data.has_target_labels() {
        columns.extend(["target_acc", "target_acc_f1"]);
    }
    let mut report = RunReport::new(&columns, cfg.seed);

    for _ in 0..cfg.epochs {
        let started = Instant::now();
        let mut means = EpochMeans::new(COLUMNS.len());
        for (si, ti) in epoch_batches(prep.xs.rows(), prep.xt.rows(), cfg.batch, &mut batch_rng)? {
            let xs = prep.xs.select_rows(&si);
            let xt = prep.xt.select_rows(&ti);
            let yb: Vec<usize> = si.iter().map(|&i| ys[i]).collect();
            let m = xs.rows();

            let classify_source = |model: &ModelBundle, fwd: &mut Forward<'_>| -> Result<_> {
                let x = fwd.input(xs.clone())?;
                let z = model.encode(fwd, x)?;
                let l1 = model.classify(fwd, z, 0)?;
                let l2 = model.classify(fwd, z, 1)?;
                let c1 = softmax_cross_entropy(fwd.tape(), l1, &yb)?;
                let c2 = softmax_cross_entropy(fwd.tape(), l2, &yb)?;
                let cls = fwd.tape().add(c1, c2)?;
                let kld = kld_to_prior(fwd.tape(), z)?;
                Ok((cls, kld))
            };
            let disagreement = |model: &ModelBundle, fwd: &mut Forward<'_>| -> Result<_> {
                let x = fwd.input(xt.clone())?;
                let z = model.encode(fwd, x)?;
                let l1 = model.classify(fwd, z, 0)?;
                let l2 = model.classify(fwd, z, 1)?;
                let p1 = fwd.tape().softmax_rows(l1)?;
                let p2 = fwd.tape().softmax_rows(l2)?;
                Ok((z, mcd_discrepancy(fwd.tape(), p1, p2)?))
            };

            let v1 = train_step(&mut model, &mut opt, &step1, |model, fwd| {
                let (cls, kld) = classify_source(model, fwd)?;
                combine(fwd, &[(1.0, cls), (w.alpha, kld)])
            })?;

            let before = snapshot(&model.params, &fixed_in_step2);
            let v2 = train_step(&mut model, &mut opt, &heads, |model, fwd| {
                let (cls, kld) = classify_source(model, fwd)?;
                let (_, adv) = disagreement(model, fwd)?;
                combine(fwd, &[(1.0, cls), (-1.0, adv), (w.alpha, kld)])
            })?;
            assert_unchanged(&model.params, &before)?;

            let before = snapshot(&model.params, &heads);
            let (mut adv, mut dal_sum) = (0.0, 0.0);
            for _ in 0..cfg.mcd_inner_n {
                let zn = prior.sample(m)?;
                let v3 = train_step(&mut model, &mut opt, &step3, |model, fwd| {
                    let (zt, adv) = disagreement(model, fwd)?;
                    let zn = fwd.input(zn)?;
                    let rt = model.decode(fwd, zt)?;
                    let rn = model.decode(fwd, zn)?;
                    let d = dal(fwd.tape(), rt, rn)?;
                    combine(fwd, &[(1.0, adv), (w.beta, d)])
                })?;
                adv += v3[1];
                dal_sum += v3[2];
            }
            assert_unchanged(&model.params, &before)?;

            let n = cfg.mcd_inner_n as f64;
            means.add(&[v1[1], v1[2], v2[2], adv / n, dal_sum / n]);
        }
        let mut row = means.means();
        let (disc, acc) = evaluate_target(&model, data, &prep.xt)?;
        row.push(disc);
        if let Some((both, first)) = acc {
            row.extend([both, first]);
        }
        report.push_row(row, started.elapsed().as_secs_f64())?;
    }
    finish_summary(&mut report, &model, data, &prep, cfg, None)?;
    report.set_summary("mcd_inner_n", cfg.mcd_inner_n)?;
    Ok(TrainOutcome {
        model,
        report,
        scatter: None,
        norm_trace: Vec::new(),
    })
}
