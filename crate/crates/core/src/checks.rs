//! The finite-difference suite behind `gla gradcheck`: every loss on random
//! 4-sample batches, then the full entropy-based objective through the model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{GradCheck, GradCheckReport, Tape, Var};
use crate::error::Result;
use crate::losses::*;
use crate::model::{Architecture, Forward, Mode, ModelBundle, ParamId};
use crate::tensor::Tensor;

/// Rows per random batch.
pub const CHECK_ROWS: usize = 4;

/// Probe step for the model composite. Batchnorm over four rows leaves some
/// columns with a variance near its epsilon, and the curvature there puts the
/// truncation error of a 1e-5 central difference above 1e-4.
pub const COMPOSITE_STEP: f64 = 1e-6;

/// Draws per seed before giving up on a batch whose probes avoid every
/// relu and abs kink.
pub const MAX_DRAWS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub seeds: usize,
    /// Worst relative error over all seeds.
    pub max_rel_error: f64,
    pub passed: bool,
    /// Batches discarded because a probe stepped across a kink.
    pub redraws: usize,
}

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(rows, cols, data).expect("sized")
}

type PairLoss = fn(&mut Tape, Var, Var) -> Result<Var>;

fn cls(t: &mut Tape, x: Var, _: Var) -> Result<Var> {
    softmax_cross_entropy(t, x, &[0, 2, 1, 2])
}

fn kld(t: &mut Tape, x: Var, _: Var) -> Result<Var> {
    kld_to_prior(t, x)
}

fn ent(t: &mut Tape, x: Var, _: Var) -> Result<Var> {
    entropy_loss(t, x)
}

fn adv(t: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let (p, q) = (t.softmax_rows(x)?, t.softmax_rows(y)?);
    mcd_discrepancy(t, p, q)
}

fn safn(t: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let h = feature_norm(t, x)?;
    let prev = feature_norm(t, y)?;
    safn_feature_norm(t, prev, h, 1.0)
}

/// `(name, input width, loss of (checked input, constant partner))`.
const LOSSES: [(&str, usize, PairLoss); 9] = [
    ("cls", 3, cls),
    ("kld", 6, kld),
    ("dal", 2, dal),
    ("ent", 3, ent),
    ("adv", 3, adv),
    ("recon", 2, recon),
    ("klddir", 6, kld_direct),
    ("daldir", 2, dal_direct),
    ("feature_norm", 5, safn),
];

/// What the composite check differentiates with respect to.
#[derive(Clone, Copy)]
enum Wrt {
    Source,
    Target,
    /// The first encoder weight, which the decoder's last stage reuses.
    TiedWeight,
}

const COMPOSITES: [(&str, Wrt); 3] = [
    ("dfa_ent/source", Wrt::Source),
    ("dfa_ent/target", Wrt::Target),
    ("dfa_ent/tied_weight", Wrt::TiedWeight),
];

struct Composite<'a> {
    model: &'a ModelBundle,
    xs: Tensor,
    ys: Vec<usize>,
    xt: Tensor,
    zn: Tensor,
    weights: LossWeights,
}

impl<'a> Composite<'a> {
    fn draw(model: &'a ModelBundle, rng: &mut ChaCha8Rng) -> Self {
        Self {
            zn: normal(CHECK_ROWS, model.arch.latent, rng),
            xs: normal(CHECK_ROWS, 2, rng),
            ys: vec![0, 1, 1, 0],
            xt: normal(CHECK_ROWS, 2, rng),
            model,
            weights: LossWeights::default(),
        }
    }

    fn tied_weight(&self) -> ParamId {
        self.model.encoder_params()[0]
    }

    fn at(&self, wrt: Wrt) -> Tensor {
        match wrt {
            Wrt::Source => self.xs.clone(),
            Wrt::Target => self.xt.clone(),
            Wrt::TiedWeight => self.model.params.get(self.tied_weight()).clone(),
        }
    }

    /// `L_cls + L_ent + α L_kld + β L_dal` with batchnorm in training mode.
    fn loss(&self, tape: &mut Tape, wrt: Wrt, v: Var) -> Result<Var> {
        let mut fwd = Forward::new(tape, &self.model.params, Mode::Train).frozen();
        let xs = match wrt {
            Wrt::Source => v,
            _ => fwd.input(self.xs.clone())?,
        };
        let xt = match wrt {
            Wrt::Target => v,
            _ => fwd.input(self.xt.clone())?,
        };
        if let Wrt::TiedWeight = wrt {
            fwd.bind(self.tied_weight(), v);
        }
        let m = self.model;
        let zs = m.encode(&mut fwd, xs)?;
        let zt = m.encode(&mut fwd, xt)?;
        let ls = m.classify(&mut fwd, zs, 0)?;
        let lt = m.classify(&mut fwd, zt, 0)?;
        let zn = fwd.input(self.zn.clone())?;
        let rt = m.decode(&mut fwd, zt)?;
        let rn = m.decode(&mut fwd, zn)?;
        let t = fwd.tape();
        let c = softmax_cross_entropy(t, ls, &self.ys)?;
        let e = entropy_loss(t, lt)?;
        let k = kld_to_prior(t, zs)?;
        let d = dal(t, rt, rn)?;
        let k = t.scale(k, self.weights.alpha)?;
        let d = t.scale(d, self.weights.beta)?;
        let ce = t.add(c, e)?;
        let kd = t.add(k, d)?;
        t.add(ce, kd)
    }
}

/// Checks batches from `rng` until one has no probe across a kink, so the
/// central difference estimates the derivative that backward computes.
fn kink_free(
    rng: &mut ChaCha8Rng,
    mut attempt: impl FnMut(&mut ChaCha8Rng) -> Result<GradCheckReport>,
) -> Result<(GradCheckReport, usize)> {
    let mut redraws = 0;
    loop {
        let report = attempt(rng)?;
        if report.kink_crossings == 0 || redraws + 1 == MAX_DRAWS {
            return Ok((report, redraws));
        }
        redraws += 1;
    }
}

/// Runs every check for `seeds` seeds under `check`'s tolerance and optional
/// fault; losses use its step, the composite [`COMPOSITE_STEP`].
pub fn gradient_suite(seeds: u64, check: &GradCheck) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let mut record = |name: &'static str, runs: Vec<(GradCheckReport, usize)>| {
        let max = runs.iter().map(|(r, _)| r.max_rel_error).fold(0.0, f64::max);
        out.push(CheckOutcome {
            name,
            seeds: runs.len(),
            max_rel_error: max,
            passed: runs.iter().all(|(r, _)| r.passed),
            redraws: runs.iter().map(|(_, n)| n).sum(),
        });
    };
    for (name, width, f) in LOSSES {
        let mut runs = Vec::new();
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            runs.push(kink_free(&mut rng, |rng| {
                let x = normal(CHECK_ROWS, width, rng);
                let other = normal(CHECK_ROWS, width, rng);
                check.run(
                    |t, xv| {
                        let o = t.constant(other.clone())?;
                        f(t, xv, o)
                    },
                    &x,
                )
            })?);
        }
        record(name, runs);
    }
    let composite = GradCheck {
        step: COMPOSITE_STEP,
        ..check.clone()
    };
    for (name, wrt) in COMPOSITES {
        let mut runs = Vec::new();
        for seed in 0..seeds {
            let model = ModelBundle::new(Architecture::default(), seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            runs.push(kink_free(&mut rng, |rng| {
                let c = Composite::draw(&model, rng);
                composite.run(|t, v| c.loss(t, wrt, v), &c.at(wrt))
            })?);
        }
        record(name, runs);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::BackwardFault;

    #[test]
    fn suite_names_every_loss_and_the_composite() {
        let rows = gradient_suite(1, &GradCheck::default()).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.name).collect();
        assert_eq!(names.len(), 12);
        assert!(names.contains(&"feature_norm") && names.contains(&"dfa_ent/tied_weight"));
        assert!(rows.iter().all(|r| r.passed && r.seeds == 1), "{rows:?}");
    }

    #[test]
    fn corrupted_log_rule_is_caught() {
        let check = GradCheck {
            fault: Some(BackwardFault {
                kind: "log",
                factor: 1.5,
            }),
            ..GradCheck::default()
        };
        let rows = gradient_suite(1, &check).unwrap();
        let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name).collect();
        assert!(failed.contains(&"kld") && failed.contains(&"dfa_ent/source"), "{failed:?}");
    }
}

