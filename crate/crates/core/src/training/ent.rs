use std::time::Instant;

use crate::autodiff::Var;
use crate::datasets::DomainPair;
use crate::error::{Error, Result};
use crate::losses::{
    dal, dal_direct, entropy_loss, kld_direct_floored, kld_to_prior, recon, softmax_cross_entropy, LossWeights,
};
use crate::metrics::RunReport;
use crate::model::{Forward, ModelBundle, ParamId, PriorSampler};
use crate::rng::SeedStreams;
use crate::tensor::Tensor;

use super::{
    epoch_batches, finish_summary, target_accuracy, train_step, AblationVariant, EpochMeans, Optimizer, Prepared,
    TrainConfig, TrainOutcome, Variant,
};

fn term_names(variant: Variant) -> Result<&'static [&'static str]> {
    use AblationVariant as A;
    Ok(match variant {
        Variant::SourceOnly => &["cls"],
        Variant::EntOnly => &["cls", "ent"],
        Variant::DfaEnt | Variant::Ablation(A::Dfa) | Variant::Ablation(A::Untied) => &["cls", "ent", "kld", "dal"],
        Variant::Ablation(A::KldTarget) => &["cls", "ent", "kld", "kld_target"],
        Variant::Ablation(A::DalDirect) => &["cls", "ent", "daldir"],
        Variant::Ablation(A::KldDirect) => &["cls", "ent", "klddir"],
        Variant::Ablation(A::KldDirectRecon) => &["cls", "ent", "klddir", "recon_source", "recon_target"],
        other => return Err(Error::InvalidArgument(format!("`{other}` is not an entropy-family variant"))),
    })
}

struct Batch {
    xs: Tensor,
    ys: Vec<usize>,
    xt: Tensor,
}

/// Builds the loss terms of one step in the order given by [`term_names`].
fn terms(
    model: &ModelBundle,
    fwd: &mut Forward<'_>,
    variant: Variant,
    w: &LossWeights,
    b: Batch,
    prior: &mut PriorSampler,
) -> Result<Vec<(f64, Var)>> {
    use AblationVariant as A;
    let m = b.xs.rows();
    let xs = fwd.input(b.xs)?;
    let xt = fwd.input(b.xt)?;
    let zs = model.encode(fwd, xs)?;
    let zt = model.encode(fwd, xt)?;
    let ls = model.classify(fwd, zs, 0)?;
    let mut out = vec![(1.0, softmax_cross_entropy(fwd.tape(), ls, &b.ys)?)];
    if variant == Variant::SourceOnly {
        return Ok(out);
    }
    let lt = model.classify(fwd, zt, 0)?;
    out.push((1.0, entropy_loss(fwd.tape(), lt)?));
    match variant {
        Variant::EntOnly => {}
        Variant::DfaEnt | Variant::Ablation(A::Dfa) | Variant::Ablation(A::Untied) => {
            out.push((w.alpha, kld_to_prior(fwd.tape(), zs)?));
            let zn = fwd.input(prior.sample(m)?)?;
            let rt = model.decode(fwd, zt)?;
            let rn = model.decode(fwd, zn)?;
            out.push((w.beta, dal(fwd.tape(), rt, rn)?));
        }
        Variant::Ablation(A::KldTarget) => {
            out.push((w.alpha, kld_to_prior(fwd.tape(), zs)?));
            out.push((w.beta, kld_to_prior(fwd.tape(), zt)?));
        }
        Variant::Ablation(A::DalDirect) => {
            let rs = model.decode(fwd, zs)?;
            let rt = model.decode(fwd, zt)?;
            out.push((w.beta, dal_direct(fwd.tape(), rs, rt)?));
        }
        Variant::Ablation(A::KldDirect) => {
            out.push((w.beta, kld_direct_floored(fwd.tape(), zs, zt)?));
        }
        Variant::Ablation(A::KldDirectRecon) => {
            out.push((w.beta, kld_direct_floored(fwd.tape(), zs, zt)?));
            let rs = model.decode(fwd, zs)?;
            let rt = model.decode(fwd, zt)?;
            out.push((1.0, recon(fwd.tape(), rs, xs)?));
            out.push((1.0, recon(fwd.tape(), rt, xt)?));
        }
        _ => unreachable!("checked by term_names"),
    }
    Ok(out)
}

/// Source-only, entropy-only, the entropy-based method and its ablation
/// variants: one combined objective, one optimizer step per minibatch.
pub fn train_ent_family(data: &DomainPair, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let names = term_names(cfg.variant)?;
    let prep = Prepared::new(data, cfg)?;
    let ys = prep.labels()?.to_vec();
    let weights = cfg.weights();

    let mut model = ModelBundle::new(cfg.architecture(prep.classes), cfg.seed)?;
    let streams = SeedStreams::new(cfg.seed);
    let mut batch_rng = streams.stream("batching");
    let mut prior = PriorSampler::new(model.arch.latent, streams.stream("prior"));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.params);
    let trainable: Vec<ParamId> = model.params.ids().collect();

    let mut columns = vec!["total"];
    columns.extend_from_slice(names);
    let with_acc = data.has_target_labels();
    if with_acc {
        columns.push("target_acc");
    }
    let mut report = RunReport::new(&columns, cfg.seed);

    for _ in 0..cfg.epochs {
        let started = Instant::now();
        let mut means = EpochMeans::new(names.len() + 1);
        for (si, ti) in epoch_batches(prep.xs.rows(), prep.xt.rows(), cfg.batch, &mut batch_rng)? {
            let batch = Batch {
                xs: prep.xs.select_rows(&si),
                ys: si.iter().map(|&i| ys[i]).collect(),
                xt: prep.xt.select_rows(&ti),
            };
            let values = train_step(&mut model, &mut opt, &trainable, |model, fwd| {
                let t = terms(model, fwd, cfg.variant, &weights, batch, &mut prior)?;
                super::combine(fwd, &t)
            })?;
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
        norm_trace: Vec::new(),
    })
}

/// `L_cls + L_ent + α L_kld + β L_dal`.
pub fn train_dfa_ent(data: &DomainPair, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        variant: Variant::DfaEnt,
        ..cfg.clone()
    };
    train_ent_family(data, &cfg)
}
