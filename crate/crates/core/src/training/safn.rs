use std::time::Instant;

use crate::autodiff::Tape;
use crate::datasets::DomainPair;
use crate::error::Result;
use crate::losses::{dal, entropy_loss, feature_norm, kld_to_prior, safn_feature_norm, softmax_cross_entropy};
use crate::metrics::RunReport;
use crate::model::{Forward, Mode, ModelBundle, ParamId, PriorSampler};
use crate::rng::SeedStreams;
use crate::tensor::Tensor;

use super::{
    combine, epoch_batches, finish_summary, target_accuracy, train_step, EpochMeans, Optimizer, Prepared,
    TrainConfig, TrainOutcome, Variant,
};

/// Iterations whose whole-data mean feature norm is recorded.
pub const NORM_TRACE_ITERS: usize = 10;

const COLUMNS: [&str; 7] = ["total", "cls", "ent", "feat", "kld", "dal", "mean_norm"];

/// Per-sample classifier feature norms, train-mode batchnorm, no state change.
fn norms(model: &ModelBundle, x: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &model.params, Mode::Train).frozen();
    let xv = fwd.input(x.clone())?;
    let z = model.encode(&mut fwd, xv)?;
    let (_, f) = model.classify_with_features(&mut fwd, z, 0)?;
    let h = feature_norm(fwd.tape(), f)?;
    Ok(fwd.tape_ref().value(h).data().to_vec())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `L_cls + L_ent + κ E[L_d] + α L_kld + β L_dal`, where `L_d` pulls each
/// sample's feature norm toward its value at its previous visit plus `δr`.
pub fn train_dfa_safn(data: &DomainPair, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let cfg = &TrainConfig {
        variant: Variant::DfaSafn,
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
    let trainable: Vec<ParamId> = model.params.ids().collect();

    let mut cache_s: Vec<Option<f64>> = vec![None; prep.xs.rows()];
    let mut cache_t: Vec<Option<f64>> = vec![None; prep.xt.rows()];
    let mut norm_trace = Vec::new();

    let mut columns = COLUMNS.to_vec();
    if data.has_target_labels() {
        columns.push("target_acc");
    }
    let mut report = RunReport::new(&columns, cfg.seed);
    let mut iteration = 0;

    for _ in 0..cfg.epochs {
        let started = Instant::now();
        let mut means = EpochMeans::new(COLUMNS.len());
        for (si, ti) in epoch_batches(prep.xs.rows(), prep.xt.rows(), cfg.batch, &mut batch_rng)? {
            let xs = prep.xs.select_rows(&si);
            let xt = prep.xt.select_rows(&ti);
            let yb: Vec<usize> = si.iter().map(|&i| ys[i]).collect();
            let zn = prior.sample(xs.rows())?;

            let mut values = train_step(&mut model, &mut opt, &trainable, |model, fwd| {
                let xsv = fwd.input(xs.clone())?;
                let xtv = fwd.input(xt.clone())?;
                let zs = model.encode(fwd, xsv)?;
                let zt = model.encode(fwd, xtv)?;
                let (ls, fs) = model.classify_with_features(fwd, zs, 0)?;
                let (lt, ft) = model.classify_with_features(fwd, zt, 0)?;
                let cls = softmax_cross_entropy(fwd.tape(), ls, &yb)?;
                let ent = entropy_loss(fwd.tape(), lt)?;

                let hs = feature_norm(fwd.tape(), fs)?;
                let ht = feature_norm(fwd.tape(), ft)?;
                // unvisited samples start from their current norm
                let prev = |cache: &[Option<f64>], idx: &[usize], cur: &Tensor| -> Result<Tensor> {
                    let v = idx
                        .iter()
                        .zip(cur.data())
                        .map(|(&i, &c)| cache[i].unwrap_or(c))
                        .collect();
                    Tensor::new(idx.len(), 1, v)
                };
                let ps = prev(&cache_s, &si, fwd.tape_ref().value(hs))?;
                let pt = prev(&cache_t, &ti, fwd.tape_ref().value(ht))?;
                let ps = fwd.input(ps)?;
                let pt = fwd.input(pt)?;
                let ds = safn_feature_norm(fwd.tape(), ps, hs, w.delta_r)?;
                let dt = safn_feature_norm(fwd.tape(), pt, ht, w.delta_r)?;
                let (ms, mt) = (si.len() as f64, ti.len() as f64);
                let ds = fwd.tape().scale(ds, ms / (ms + mt))?;
                let dt = fwd.tape().scale(dt, mt / (ms + mt))?;
                let feat = fwd.tape().add(ds, dt)?;

                let kld = kld_to_prior(fwd.tape(), zs)?;
                let znv = fwd.input(zn)?;
                let rt = model.decode(fwd, zt)?;
                let rn = model.decode(fwd, znv)?;
                let d = dal(fwd.tape(), rt, rn)?;
                let (total, mut values) =
                    combine(fwd, &[(1.0, cls), (1.0, ent), (w.kappa, feat), (w.alpha, kld), (w.beta, d)])?;
                let hs_v = fwd.tape_ref().value(hs).data().to_vec();
                let ht_v = fwd.tape_ref().value(ht).data().to_vec();
                values.push((hs_v.iter().sum::<f64>() + ht_v.iter().sum::<f64>()) / (ms + mt));
                Ok((total, values))
            })?;

            for (cache, idx, x) in [(&mut cache_s, &si, &xs), (&mut cache_t, &ti, &xt)] {
                for (&i, h) in idx.iter().zip(norms(&model, x)?) {
                    cache[i] = Some(h);
                }
            }
            if iteration < NORM_TRACE_ITERS {
                let (a, b) = (norms(&model, &prep.xs)?, norms(&model, &prep.xt)?);
                norm_trace.push((mean(&a) * a.len() as f64 + mean(&b) * b.len() as f64) / (a.len() + b.len()) as f64);
            }
            iteration += 1;
            values.truncate(COLUMNS.len());
            means.add(&values);
        }
        let mut row = means.means();
        if let Some(acc) = target_accuracy(&model, data, &prep, Some(0))? {
            row.push(acc);
        }
        report.push_row(row, started.elapsed().as_secs_f64())?;
    }
    finish_summary(&mut report, &model, data, &prep, cfg, Some(0))?;
    Ok(TrainOutcome {
        model,
        report,
        scatter: None,
        norm_trace,
    })
}
