use std::time::Instant;

use crate::autodiff::Tape;
use crate::datasets::{DomainPair, Point};
use crate::error::{Error, Result};
use crate::losses::dal;
use crate::metrics::{energy_distance, moment_distance, RunReport};
use crate::model::{Forward, Mode, ModelBundle, ParamId};
use crate::tensor::Tensor;

use super::{train_step, Optimizer, Prepared, TrainConfig, TrainOutcome};

/// Points for one scatter plot, in data coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatterDump {
    pub source: Vec<Point>,
    pub target: Vec<Point>,
    pub predicted: Vec<Point>,
}

impl ScatterDump {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        crate::metrics::write_scatter_csv(
            w,
            &[
                ("source", &self.source),
                ("target", &self.target),
                ("predicted", &self.predicted),
            ],
        )
    }
}

/// `D(G(x_t))` with batch statistics over the whole target set, which is
/// what every full-batch training step sees.
fn predict(model: &ModelBundle, xt: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &model.params, Mode::Train).frozen();
    let x = fwd.input(xt.clone())?;
    let z = model.encode(&mut fwd, x)?;
    let r = model.decode(&mut fwd, z)?;
    Ok(fwd.tape_ref().value(r).clone())
}

/// Trains G and D on DAL alone: `D(G(x_t))` row `i` against source row `i`
/// over fixed, unshuffled minibatches.
pub fn train_dal_only(data: &DomainPair, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let prep = Prepared::new(data, cfg)?;
    let n = prep.xs.rows().min(prep.xt.rows());
    let batch = cfg.batch.min(n);
    if batch < 2 {
        return Err(Error::InvalidArgument("each domain needs at least two points".into()));
    }
    let view = data.train_view();
    let to_data = |t: &Tensor| -> Result<Vec<Point>> {
        Ok(t.to_points()?.into_iter().map(|p| prep.transform.invert(p)).collect())
    };

    let mut model = ModelBundle::new(cfg.architecture(1), cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.params);
    let mut trainable: Vec<ParamId> = model.encoder_params();
    trainable.extend(model.decoder_params());

    let dump = |model: &ModelBundle| -> Result<ScatterDump> {
        Ok(ScatterDump {
            source: view.source_points.to_vec(),
            target: view.target_points.to_vec(),
            predicted: to_data(&predict(model, &prep.xt)?)?,
        })
    };
    let initial = dump(&model)?;

    let chunks: Vec<Vec<usize>> = (0..n / batch).map(|b| (b * batch..(b + 1) * batch).collect()).collect();
    let mut report = RunReport::new(&["dal"], cfg.seed);
    for _ in 0..cfg.epochs {
        let started = Instant::now();
        let mut total = 0.0;
        for idx in &chunks {
            let xt = prep.xt.select_rows(idx);
            let xs = prep.xs.select_rows(idx);
            let values = train_step(&mut model, &mut opt, &trainable, |model, fwd| {
                let xt = fwd.input(xt)?;
                let xs = fwd.input(xs)?;
                let z = model.encode(fwd, xt)?;
                let r = model.decode(fwd, z)?;
                let l = dal(fwd.tape(), r, xs)?;
                super::combine(fwd, &[(1.0, l)])
            })?;
            total += values[0];
        }
        report.push_row(vec![total / chunks.len() as f64], started.elapsed().as_secs_f64())?;
    }
    let last = dump(&model)?;

    for (tag, d) in [("initial", &initial), ("final", &last)] {
        let (mean_gap, cov_gap) = moment_distance(&d.predicted, &d.source)?;
        report.set_summary(&format!("{tag}_energy"), energy_distance(&d.predicted, &d.source))?;
        report.set_summary(&format!("{tag}_mean_gap"), mean_gap)?;
        report.set_summary(&format!("{tag}_cov_gap"), cov_gap)?;
    }
    report.set_summary("variant", cfg.variant.to_string())?;
    report.set_summary("config_hash", cfg.hash())?;
    report.set_summary("generator", &data.provenance().generator)?;
    Ok(TrainOutcome {
        model,
        report,
        scatter: Some((initial, last)),
        norm_trace: Vec::new(),
    })
}
