//! Training procedures: the entropy-based method and its ablations, the
//! three-step adversarial method, the feature-norm method, and alignment-only
//! runs on unlabeled 2-D domains.

mod batching;
mod dal_only;
mod ent;
mod mcd;
mod optim;
mod safn;
mod suite;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datasets::{affine_normalize, AffineTransform, DomainPair, NormalizeMode, Point};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{accuracy, feature_space_distance, RunReport};
use crate::model::{Activation, Architecture, Forward, Mode, ModelBundle, ParamId};
use crate::rng::fnv1a;
use crate::tensor::Tensor;

pub use batching::epoch_batches;
pub use dal_only::{train_dal_only, ScatterDump};
pub use ent::{train_dfa_ent, train_ent_family};
pub use mcd::{assert_unchanged, train_dfa_mcd};
pub use optim::{Optimizer, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use safn::{train_dfa_safn, NORM_TRACE_ITERS};
pub use suite::{par_map, run_ablation_suite, sensitivity_sweep, write_sweep_csv, AblationRow, SweepPoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// The six alignment strategies compared in the ablation study, numbered
/// 1 to 6 in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationVariant {
    /// DAL against the prior plus KL on the source.
    Dfa,
    /// As `Dfa` with a decoder that has its own weights.
    Untied,
    /// KL of the target latent to the prior in place of DAL.
    KldTarget,
    /// L1 between source and target reconstructions.
    DalDirect,
    /// KL between source and target latent fits.
    KldDirect,
    /// `KldDirect` plus reconstruction of both domains.
    KldDirectRecon,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Dfa,
        AblationVariant::Untied,
        AblationVariant::KldTarget,
        AblationVariant::DalDirect,
        AblationVariant::KldDirect,
        AblationVariant::KldDirectRecon,
    ];

    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&v| v == self).expect("listed") + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Dfa => "dfa",
            AblationVariant::Untied => "untied",
            AblationVariant::KldTarget => "kld_target",
            AblationVariant::DalDirect => "daldir",
            AblationVariant::KldDirect => "klddir",
            AblationVariant::KldDirectRecon => "klddir_recon",
        }
    }

    /// Accepts the numeric id or the name.
    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s || v.id().to_string() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Cross-entropy on the source only.
    SourceOnly,
    /// Cross-entropy plus target entropy.
    EntOnly,
    DfaEnt,
    DfaMcd,
    DfaSafn,
    DalOnly,
    Ablation(AblationVariant),
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::SourceOnly => f.write_str("source_only"),
            Variant::EntOnly => f.write_str("ent_only"),
            Variant::DfaEnt => f.write_str("dfa_ent"),
            Variant::DfaMcd => f.write_str("dfa_mcd"),
            Variant::DfaSafn => f.write_str("dfa_safn"),
            Variant::DalOnly => f.write_str("dal_only"),
            Variant::Ablation(a) => write!(f, "ablation_{}", a.name()),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v = match s {
            "source_only" => Variant::SourceOnly,
            "ent_only" => Variant::EntOnly,
            "dfa_ent" => Variant::DfaEnt,
            "dfa_mcd" => Variant::DfaMcd,
            "dfa_safn" => Variant::DfaSafn,
            "dal_only" => Variant::DalOnly,
            other => other
                .strip_prefix("ablation_")
                .and_then(AblationVariant::parse)
                .map(Variant::Ablation)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{other}`")))?,
        };
        Ok(v)
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub delta_r: f64,
    pub lr: f64,
    /// Minibatch size per domain.
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub mcd_inner_n: usize,
    pub variant: Variant,
    pub decoder_final: Activation,
}

impl Default for TrainConfig {
    /// The digit-experiment settings: Adam at 2e-4, batch 128, α 0.01, β 10.
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            alpha: w.alpha,
            beta: w.beta,
            kappa: w.kappa,
            delta_r: w.delta_r,
            lr: 2e-4,
            batch: 128,
            epochs: 200,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            mcd_inner_n: 4,
            variant: Variant::DfaEnt,
            decoder_final: Activation::None,
        }
    }
}

impl TrainConfig {
    /// Alignment-only runs on the 2-D presets: full batch of 500, Adam at
    /// 1e-3, 2000 iterations.
    pub fn synthetic() -> Self {
        Self {
            lr: 1e-3,
            batch: 500,
            epochs: 2000,
            variant: Variant::DalOnly,
            ..Self::default()
        }
    }

    /// The rotated-moons adaptation task: digit settings over 300 epochs.
    pub fn rotated_moons() -> Self {
        Self {
            epochs: 300,
            ..Self::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            kappa: self.kappa,
            delta_r: self.delta_r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch < 2 {
            return Err(Error::InvalidArgument("batch must be at least 2".into()));
        }
        if self.mcd_inner_n < 1 {
            return Err(Error::InvalidArgument("mcd_inner_n must be at least 1".into()));
        }
        Ok(())
    }

    /// 16 hex digits identifying the configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("serializable");
        format!("{:016x}", fnv1a(text.as_bytes()))
    }

    pub fn architecture(&self, classes: usize) -> Architecture {
        Architecture {
            classes: classes.max(1),
            decoder_final: self.decoder_final,
            tied: self.variant != Variant::Ablation(AblationVariant::Untied),
            heads: if self.variant == Variant::DfaMcd { 2 } else { 1 },
            ..Architecture::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelBundle,
    pub report: RunReport,
    /// Alignment-only runs: predictions before and after training.
    pub scatter: Option<(ScatterDump, ScatterDump)>,
    /// Feature-norm runs: mean feature norm over both domains after each of
    /// the first iterations.
    pub norm_trace: Vec<f64>,
}

/// Runs the procedure selected by `cfg.variant`.
pub fn train(data: &DomainPair, cfg: &TrainConfig) -> Result<TrainOutcome> {
    match cfg.variant {
        Variant::DfaMcd => train_dfa_mcd(data, cfg),
        Variant::DfaSafn => train_dfa_safn(data, cfg),
        Variant::DalOnly => train_dal_only(data, cfg),
        _ => train_ent_family(data, cfg),
    }
}

/// Domain data in model coordinates.
pub(crate) struct Prepared {
    pub xs: Tensor,
    pub ys: Option<Vec<usize>>,
    pub xt: Tensor,
    pub transform: AffineTransform,
    pub classes: usize,
}

impl Prepared {
    /// A non-negative output layer cannot reproduce negative coordinates, so
    /// both domains are shifted together when it is selected.
    pub fn new(data: &DomainPair, cfg: &TrainConfig) -> Result<Self> {
        let view = data.train_view();
        let mode = match cfg.decoder_final {
            Activation::Relu => NormalizeMode::ShiftToNonneg,
            Activation::None => NormalizeMode::None,
        };
        let mut all: Vec<Point> = view.source_points.to_vec();
        all.extend_from_slice(view.target_points);
        let (_, transform) = affine_normalize(&all, mode)?;
        let map = |ps: &[Point]| Tensor::from_points(&ps.iter().map(|&p| transform.apply(p)).collect::<Vec<_>>());
        if view.source_points.is_empty() || view.target_points.is_empty() {
            return Err(Error::InvalidArgument("both domains need points".into()));
        }
        Ok(Self {
            xs: map(view.source_points),
            ys: view.source_labels.map(<[usize]>::to_vec),
            xt: map(view.target_points),
            transform,
            classes: data.num_classes(),
        })
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.ys
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("this procedure needs source labels".into()))
    }

    pub fn transform_points(&self, ps: &[Point]) -> Tensor {
        Tensor::from_points(&ps.iter().map(|&p| self.transform.apply(p)).collect::<Vec<_>>())
    }
}

/// One optimizer step on `trainable`. `build` returns the total loss and the
/// unweighted component values to report.
pub(crate) fn train_step(
    model: &mut ModelBundle,
    opt: &mut Optimizer,
    trainable: &[ParamId],
    build: impl FnOnce(&ModelBundle, &mut Forward<'_>) -> Result<(Var, Vec<f64>)>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (grads, updates, values) = {
        let mut fwd = Forward::new(&mut tape, &model.params, Mode::Train).only(trainable);
        let (total, values) = build(model, &mut fwd)?;
        let grads = fwd.backward(total)?;
        (grads, fwd.take_bn_updates(), values)
    };
    opt.step(&mut model.params, &grads)?;
    model.apply_bn_updates(&updates);
    debug_assert!(!model.arch.tied || model.tying_holds());
    Ok(values)
}

/// Weighted sum of loss terms on the tape, with their plain values.
pub(crate) fn combine(fwd: &mut Forward<'_>, terms: &[(f64, Var)]) -> Result<(Var, Vec<f64>)> {
    let mut values = Vec::with_capacity(terms.len());
    let mut total: Option<Var> = None;
    for &(w, v) in terms {
        values.push(fwd.tape_ref().value(v).item()?);
        let scaled = if w == 1.0 { v } else { fwd.tape().scale(v, w)? };
        total = Some(match total {
            None => scaled,
            Some(t) => fwd.tape().add(t, scaled)?,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("no loss terms".into()))?;
    values.insert(0, fwd.tape_ref().value(total).item()?);
    Ok((total, values))
}

/// Accumulates per-step component values into epoch means.
pub(crate) struct EpochMeans {
    sums: Vec<f64>,
    steps: usize,
}

impl EpochMeans {
    pub fn new(width: usize) -> Self {
        Self {
            sums: vec![0.0; width],
            steps: 0,
        }
    }

    pub fn add(&mut self, values: &[f64]) {
        self.sums.iter_mut().zip(values).for_each(|(s, v)| *s += v);
        self.steps += 1;
    }

    pub fn means(&self) -> Vec<f64> {
        self.sums.iter().map(|s| s / self.steps.max(1) as f64).collect()
    }
}

/// Source and target points in the coordinates the model was trained in.
pub fn model_inputs(data: &DomainPair, cfg: &TrainConfig) -> Result<(Tensor, Tensor)> {
    let prep = Prepared::new(data, cfg)?;
    Ok((prep.xs, prep.xt))
}

/// Target accuracy of `head` (or the two-head ensemble when `head` is
/// `None`). Reads held-out labels; returns `None` when there are none.
pub(crate) fn target_accuracy(model: &ModelBundle, data: &DomainPair, prep: &Prepared, head: Option<usize>) -> Result<Option<f64>> {
    let Some(eval) = data.eval_view() else {
        return Ok(None);
    };
    let x = prep.transform_points(eval.target_points);
    let logits = match head {
        Some(h) => model.logits_eval(&x, h)?,
        None => crate::metrics::ensemble_probs(&model.logits_eval(&x, 0)?, &model.logits_eval(&x, 1)?)?,
    };
    Ok(Some(accuracy(&logits, eval.target_labels)?))
}

/// Summary entries shared by every labelled-source procedure.
pub(crate) fn finish_summary(
    report: &mut RunReport,
    model: &ModelBundle,
    data: &DomainPair,
    prep: &Prepared,
    cfg: &TrainConfig,
    head: Option<usize>,
) -> Result<()> {
    report.set_summary("variant", cfg.variant.to_string())?;
    report.set_summary("config_hash", cfg.hash())?;
    if let Some(ys) = &prep.ys {
        let logits = model.logits_eval(&prep.xs, head.unwrap_or(0))?;
        report.set_summary("source_accuracy", accuracy(&logits, ys)?)?;
    }
    if let Some(acc) = target_accuracy(model, data, prep, head)? {
        report.set_summary("target_accuracy", acc)?;
    }
    if let (Some(ys), Some(eval)) = (&prep.ys, data.eval_view()) {
        let zs = model.encode_eval(&prep.xs)?;
        let zt = model.encode_eval(&prep.transform_points(eval.target_points))?;
        let d = feature_space_distance(&zs, ys, &zt, eval.target_labels)?;
        report.set_summary("feature_distance_all", d.all)?;
        report.set_summary("feature_distance_per_class", d.per_class)?;
    }
    Ok(())
}
