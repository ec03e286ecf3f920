//! Scalar objectives, each built from tape primitives so gradients come for
//! free.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};

/// Added to every batch variance before taking its log. A ReLU unit that is
/// inactive for the whole batch leaves a constant latent column whose
/// variance is exactly zero.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Variance below which [`kld_direct`] refuses to evaluate.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Keeps the feature-norm square root differentiable at the origin.
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// KL-to-prior weight.
    pub alpha: f64,
    /// Alignment weight.
    pub beta: f64,
    /// Feature-norm trade-off.
    pub kappa: f64,
    /// Per-iteration feature-norm growth.
    pub delta_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 10.0,
            kappa: 0.05,
            delta_r: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("kappa", self.kappa),
            ("delta_r", self.delta_r),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(shape_err(format!("{what}: {}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1)));
    }
    if sa.0 == 0 {
        return Err(Error::InvalidArgument(format!("{what}: empty batch")));
    }
    Ok(())
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (m, c) = tape.value(logits).shape();
    if m == 0 {
        return Err(Error::InvalidArgument("cross-entropy of an empty batch".into()));
    }
    if labels.len() != m {
        return Err(shape_err(format!("{m} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
    }
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.pick_columns(logp, labels.to_vec())?;
    let mean = tape.mean_all(picked)?;
    tape.scale(mean, -1.0)
}

/// Per-column batch mean and biased variance, both `1 x d`.
fn fit_gaussian(tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
    if tape.value(z).rows() < 2 {
        return Err(Error::InvalidArgument("need at least two rows to fit a variance".into()));
    }
    let mu = tape.column_mean(z)?;
    let centered = tape.sub_row(z, mu)?;
    let sq = tape.square(centered)?;
    let var = tape.column_mean(sq)?;
    Ok((mu, var))
}

/// KL between the batch-fitted diagonal Gaussian of `z` and `N(0, I)`:
/// `sum_d ½(μ² + σ² − ln σ² − 1)`.
pub fn kld_to_prior(tape: &mut Tape, z: Var) -> Result<Var> {
    let (mu, var) = fit_gaussian(tape, z)?;
    let mu2 = tape.square(mu)?;
    let floored = tape.add_scalar(var, VARIANCE_FLOOR)?;
    let log_var = tape.log(floored)?;
    let t = tape.add(mu2, var)?;
    let t = tape.sub(t, log_var)?;
    let t = tape.add_scalar(t, -1.0)?;
    let s = tape.sum_all(t)?;
    tape.scale(s, 0.5)
}

/// `KL(N(μ_t, σ_t²) ‖ N(μ_s, σ_s²))` between batch-fitted diagonal Gaussians,
/// summed over dimensions. Fails if any fitted variance is degenerate.
pub fn kld_direct(tape: &mut Tape, z_s: Var, z_t: Var) -> Result<Var> {
    kld_direct_impl(tape, z_s, z_t, None)
}

/// [`kld_direct`] with [`VARIANCE_FLOOR`] added to both variances instead of
/// rejecting collapsed dimensions; used inside training loops.
pub fn kld_direct_floored(tape: &mut Tape, z_s: Var, z_t: Var) -> Result<Var> {
    kld_direct_impl(tape, z_s, z_t, Some(VARIANCE_FLOOR))
}

fn kld_direct_impl(tape: &mut Tape, z_s: Var, z_t: Var, floor: Option<f64>) -> Result<Var> {
    let (ds, dt) = (tape.value(z_s).cols(), tape.value(z_t).cols());
    if ds != dt {
        return Err(shape_err(format!("kld_direct widths {ds} vs {dt}")));
    }
    let (mu_s, var_s) = fit_gaussian(tape, z_s)?;
    let (mu_t, var_t) = fit_gaussian(tape, z_t)?;
    let (var_s, var_t) = match floor {
        Some(f) => (tape.add_scalar(var_s, f)?, tape.add_scalar(var_t, f)?),
        None => {
            for v in [var_s, var_t] {
                if let Some((d, &x)) = tape
                    .value(v)
                    .data()
                    .iter()
                    .enumerate()
                    .find(|(_, &x)| x < DEGENERATE_VARIANCE)
                {
                    return Err(Error::DegenerateVariance(x, d));
                }
            }
            (var_s, var_t)
        }
    };
    // ½ ln σ_s² − ½ ln σ_t² + (σ_t² + (μ_t − μ_s)²) / (2σ_s²) − ½
    let log_s = tape.log(var_s)?;
    let log_t = tape.log(var_t)?;
    let log_ratio = tape.sub(log_s, log_t)?;
    let diff = tape.sub(mu_t, mu_s)?;
    let diff2 = tape.square(diff)?;
    let num = tape.add(var_t, diff2)?;
    let frac = tape.div(num, var_s)?;
    let t = tape.add(log_ratio, frac)?;
    let t = tape.add_scalar(t, -1.0)?;
    let s = tape.sum_all(t)?;
    tape.scale(s, 0.5)
}

/// Mean over rows of the row-wise L1 distance.
fn mean_row_l1(tape: &mut Tape, a: Var, b: Var, what: &str) -> Result<Var> {
    same_shape(tape, a, b, what)?;
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    let rows = tape.row_sum(d)?;
    tape.mean_all(rows)
}

/// Distribution alignment: mean row-L1 between decoded target latents and
/// decoded prior draws, paired by batch index.
pub fn dal(tape: &mut Tape, xhat_t: Var, xhat_n: Var) -> Result<Var> {
    mean_row_l1(tape, xhat_t, xhat_n, "dal")
}

/// Same form as [`dal`], between source and target reconstructions.
pub fn dal_direct(tape: &mut Tape, xhat_s: Var, xhat_t: Var) -> Result<Var> {
    mean_row_l1(tape, xhat_s, xhat_t, "dal_direct")
}

/// Paired reconstruction error against the input itself.
pub fn recon(tape: &mut Tape, xhat: Var, x: Var) -> Result<Var> {
    mean_row_l1(tape, xhat, x, "recon")
}

/// Mean prediction entropy; `logits` are softmaxed here.
pub fn entropy_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    if tape.value(logits).rows() == 0 {
        return Err(Error::InvalidArgument("entropy of an empty batch".into()));
    }
    let p = tape.softmax_rows(logits)?;
    let logp = tape.log_softmax_rows(logits)?;
    let plogp = tape.mul(p, logp)?;
    let rows = tape.row_sum(plogp)?;
    let mean = tape.mean_all(rows)?;
    tape.scale(mean, -1.0)
}

/// Mean absolute difference between two classifiers' probabilities.
pub fn mcd_discrepancy(tape: &mut Tape, p1: Var, p2: Var) -> Result<Var> {
    same_shape(tape, p1, p2, "mcd_discrepancy")?;
    let d = tape.sub(p1, p2)?;
    let d = tape.abs(d)?;
    tape.mean_all(d)
}

/// Per-row L2 norm, `m x n -> m x 1`.
pub fn feature_norm(tape: &mut Tape, features: Var) -> Result<Var> {
    let sq = tape.square(features)?;
    let s = tape.row_sum(sq)?;
    let s = tape.add_scalar(s, NORM_EPS)?;
    tape.sqrt(s)
}

/// `mean((h_curr − (h_prev + δr))²)`. `h_prev` is read by value only, so no
/// gradient ever reaches it.
pub fn safn_feature_norm(tape: &mut Tape, h_prev: Var, h_curr: Var, delta_r: f64) -> Result<Var> {
    let (p, c) = (tape.value(h_prev), tape.value(h_curr));
    if p.len() != c.len() || p.cols() != 1 || c.cols() != 1 {
        return Err(shape_err(format!(
            "feature norms must be equal-length columns, got {}x{} and {}x{}",
            p.rows(),
            p.cols(),
            c.rows(),
            c.cols()
        )));
    }
    let target = tape.constant(p.map(|v| v + delta_r))?;
    let d = tape.sub(h_curr, target)?;
    let sq = tape.square(d)?;
    tape.mean_all(sq)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::tensor::Tensor;

    const LN2: f64 = std::f64::consts::LN_2;

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item().unwrap()
    }

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    fn random(m: usize, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(m, n, (0..m * n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    fn probs(m: usize, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = random(m, n, rng).map(f64::exp);
        for r in 0..m {
            let s: f64 = t.row(r).iter().sum();
            for c in 0..n {
                t.set(r, c, t.get(r, c) / s);
            }
        }
        t
    }

    /// Brute-force `sum_i sum_j |a_ij − b_ij| / M`.
    fn l1_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let mut s = 0.0;
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                s += (a.get(i, j) - b.get(i, j)).abs();
            }
        }
        s / a.rows() as f64
    }

    fn pair_loss(f: fn(&mut Tape, Var, Var) -> Result<Var>, a: &Tensor, b: &Tensor) -> f64 {
        eval(|t| {
            let a = t.constant(a.clone())?;
            let b = t.constant(b.clone())?;
            f(t, a, b)
        })
    }

    #[test]
    fn cross_entropy_values() {
        let ce = |logits: Tensor, labels: Vec<usize>| {
            eval(|t| {
                let l = t.constant(logits)?;
                softmax_cross_entropy(t, l, &labels)
            })
        };
        let v = ce(Tensor::zeros(3, 10), vec![0, 4, 9]);
        assert!((v - 10f64.ln()).abs() < 1e-12);
        let v = ce(rows(&[&[1.0, 0.0]]), vec![0]);
        assert!((v - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((v - 0.313262).abs() < 1e-6);

        let mut last = f64::INFINITY;
        for k in 0..40 {
            let v = ce(rows(&[&[k as f64, 0.0]]), vec![0]);
            assert!(v >= 0.0 && (v < last || v == 0.0));
            last = v;
        }
        assert!(last < 1e-16);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(2, 3)).unwrap();
        assert!(softmax_cross_entropy(&mut t, l, &[0, 3]).is_err());
        assert!(softmax_cross_entropy(&mut t, l, &[0]).is_err());
    }

    fn kld_prior_of(z: Tensor) -> f64 {
        eval(|t| {
            let z = t.constant(z)?;
            kld_to_prior(t, z)
        })
    }

    #[test]
    fn kld_to_prior_closed_forms() {
        // exact mean 0, biased variance 1 in every column
        let z = rows(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        assert!(kld_prior_of(z).abs() < 1e-8);
        let z = rows(&[&[0.0], &[2.0]]);
        assert!((kld_prior_of(z) - 0.5).abs() < 1e-8);
        let s = 2f64.sqrt();
        let v = kld_prior_of(rows(&[&[-s], &[s]]));
        assert!((v - 0.5 * (2.0 - LN2 - 1.0)).abs() < 1e-8);
        assert!((v - 0.153426).abs() < 1e-6);
    }

    /// `E_p[ln p(x) − ln q(x)]` over `n` draws from `p = N(mp, vp)`.
    fn mc_kl(mp: f64, vp: f64, mq: f64, vq: f64, n: usize, rng: &mut ChaCha8Rng) -> f64 {
        let ln_pdf = |x: f64, m: f64, v: f64| -0.5 * ((x - m).powi(2) / v + v.ln());
        let mut s = 0.0;
        for _ in 0..n {
            let x = mp + vp.sqrt() * rng.sample::<f64, _>(StandardNormal);
            s += ln_pdf(x, mp, vp) - ln_pdf(x, mq, vq);
        }
        s / n as f64
    }

    #[test]
    fn kld_closed_form_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = 2f64.sqrt();
        let closed = kld_prior_of(rows(&[&[-s], &[s]]));
        let mc = mc_kl(0.0, 2.0, 0.0, 1.0, 1_000_000, &mut rng);
        assert!((closed - mc).abs() < 1e-2, "{closed} vs {mc}");
    }

    #[test]
    fn kld_direct_values_and_errors() {
        let z = rows(&[&[0.0, 1.0], &[2.0, 5.0], &[1.0, -3.0]]);
        assert!(pair_loss(kld_direct, &z, &z).abs() < 1e-12);
        let a = rows(&[&[-1.0], &[1.0]]);
        let b = rows(&[&[0.0], &[2.0]]);
        assert!((pair_loss(kld_direct, &a, &b) - 0.5).abs() < 1e-12);

        let flat = rows(&[&[1.0], &[1.0]]);
        let mut t = Tape::new();
        let (f, b) = (t.constant(flat.clone()).unwrap(), t.constant(b.clone()).unwrap());
        assert!(matches!(kld_direct(&mut t, f, b), Err(Error::DegenerateVariance(_, 0))));
        assert!(kld_direct_floored(&mut t, f, b).is_ok());
        let one = t.constant(rows(&[&[1.0]])).unwrap();
        assert!(kld_direct(&mut t, one, one).is_err());
    }

    #[test]
    fn kld_to_prior_is_kld_direct_from_standard_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // columns with exact zero mean, unit biased variance
        let m = 6;
        let mut std_fit = random(m, 5, &mut rng);
        let (mu, var) = (std_fit.column_means(), std_fit.column_variances());
        for r in 0..m {
            for c in 0..5 {
                std_fit.set(r, c, (std_fit.get(r, c) - mu[c]) / var[c].sqrt());
            }
        }
        let z = random(m, 5, &mut rng).map(|v| 0.7 * v + 0.3);
        let a = kld_prior_of(z.clone());
        let b = pair_loss(kld_direct, &std_fit, &z);
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn l1_family_values() {
        let ones = Tensor::full(5, 2, 1.0);
        let zeros = Tensor::zeros(5, 2);
        for f in [dal, dal_direct, recon] {
            assert_eq!(pair_loss(f, &ones, &ones), 0.0);
            assert_eq!(pair_loss(f, &ones, &zeros), 2.0);
            let c = -0.75;
            assert_eq!(pair_loss(f, &zeros.map(|v| v + c), &zeros), 2.0 * c.abs());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let (a, b) = (random(3, 2, &mut rng), random(3, 2, &mut rng));
            for f in [dal, dal_direct, recon] {
                let v = pair_loss(f, &a, &b);
                assert!((v - l1_oracle(&a, &b)).abs() < 1e-12);
                assert_eq!(v, pair_loss(f, &b, &a));
            }
        }
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(3, 2)).unwrap();
        let b = t.constant(Tensor::zeros(4, 2)).unwrap();
        assert!(matches!(dal(&mut t, a, b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn dal_pairs_by_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (random(8, 2, &mut rng), random(8, 2, &mut rng));
        let perm = [3, 0, 7, 1, 6, 2, 5, 4];
        let base = pair_loss(dal, &a, &b);
        let joint = pair_loss(dal, &a.select_rows(&perm), &b.select_rows(&perm));
        assert!((base - joint).abs() < 1e-12);
        let single = pair_loss(dal, &a.select_rows(&perm), &b);
        assert!((base - single).abs() > 1e-3);
    }

    fn entropy_of(logits: Tensor) -> f64 {
        eval(|t| {
            let l = t.constant(logits)?;
            entropy_loss(t, l)
        })
    }

    #[test]
    fn entropy_values() {
        assert!((entropy_of(Tensor::zeros(4, 2)) - LN2).abs() < 1e-12);
        assert!(entropy_of(rows(&[&[0.0, (1e-12f64).ln()]])) < 1e-10);
        let v = entropy_of(rows(&[&[0.7f64.ln(), 0.3f64.ln()]]));
        assert!((v + 0.7 * 0.7f64.ln() + 0.3 * 0.3f64.ln()).abs() < 1e-12);
        assert!((v - 0.610864).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let v = entropy_of(random(6, 5, &mut rng).map(|x| 3.0 * x));
            assert!((0.0..=5f64.ln() + 1e-12).contains(&v));
        }
    }

    #[test]
    fn discrepancy_values() {
        let p1 = rows(&[&[1.0, 0.0]]);
        let p2 = rows(&[&[0.0, 1.0]]);
        assert_eq!(pair_loss(mcd_discrepancy, &p1, &p1), 0.0);
        assert_eq!(pair_loss(mcd_discrepancy, &p1, &p2), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let (a, b) = (probs(4, 3, &mut rng), probs(4, 3, &mut rng));
            let v = pair_loss(mcd_discrepancy, &a, &b);
            assert!((v - l1_oracle(&a, &b) / 3.0).abs() < 1e-12);
            assert!((0.0..=2.0).contains(&v));
        }
    }

    #[test]
    fn feature_norm_loss_values() {
        let safn = |prev: f64, curr: f64| {
            eval(|t| {
                let p = t.constant(Tensor::scalar(prev))?;
                let c = t.constant(Tensor::scalar(curr))?;
                safn_feature_norm(t, p, c, 1.0)
            })
        };
        assert_eq!(safn(4.0, 5.0), 0.0);
        assert_eq!(safn(4.0, 4.0), 1.0);

        let mut t = Tape::new();
        let prev = t.leaf(Tensor::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let curr = t.leaf(Tensor::new(3, 1, vec![0.5, 2.5, 3.0]).unwrap()).unwrap();
        let l = safn_feature_norm(&mut t, prev, curr, 1.0).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(prev).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(g.get(curr).is_some());

        let bad = t.constant(Tensor::zeros(2, 1)).unwrap();
        assert!(safn_feature_norm(&mut t, prev, bad, 1.0).is_err());
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        let w = LossWeights {
            beta: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }

    /// Every loss against central differences on 4-row batches.
    #[test]
    fn losses_pass_gradient_checks() {
        type Loss = Box<dyn Fn(&mut Tape, Var, Var) -> Result<Var>>;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let labels = vec![0usize, 2, 1, 2];
        let cases: Vec<(&str, usize, Loss)> = vec![
            ("cls", 3, Box::new(move |t, x, _| softmax_cross_entropy(t, x, &labels))),
            ("kld", 6, Box::new(|t, x, _| kld_to_prior(t, x))),
            ("dal", 2, Box::new(dal)),
            ("ent", 3, Box::new(|t, x, _| entropy_loss(t, x))),
            (
                "adv",
                3,
                Box::new(|t, x, y| {
                    let (p, q) = (t.softmax_rows(x)?, t.softmax_rows(y)?);
                    mcd_discrepancy(t, p, q)
                }),
            ),
            ("recon", 2, Box::new(recon)),
            ("klddir", 6, Box::new(kld_direct)),
            ("daldir", 2, Box::new(dal_direct)),
            (
                "safn",
                5,
                Box::new(|t, x, y| {
                    let h = feature_norm(t, x)?;
                    let prev = feature_norm(t, y)?;
                    safn_feature_norm(t, prev, h, 1.0)
                }),
            ),
        ];
        for (name, width, f) in &cases {
            for _ in 0..20 {
                let x = random(4, *width, &mut rng);
                let other = random(4, *width, &mut rng);
                let report = finite_difference_check(
                    |t, xv| {
                        let o = t.constant(other.clone())?;
                        f(t, xv, o)
                    },
                    &x,
                    1e-5,
                    1e-4,
                )
                .unwrap();
                assert!(report.passed, "{name}: {}", report.max_rel_error);
            }
        }
    }
}
