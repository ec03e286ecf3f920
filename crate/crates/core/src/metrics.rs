//! Evaluation quantities and run reports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use serde_json::Value;

use crate::datasets::{fmt_sig9, Point};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty batch".into()));
    }
    if labels.len() != logits.rows() {
        return Err(shape_err(format!("{} rows but {} labels", logits.rows(), labels.len())));
    }
    let hits = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = t.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for c in 0..t.cols() {
            out.set(r, c, (t.get(r, c) - max).exp() / s);
        }
    }
    out
}

/// Summed class probabilities of two heads; its argmax is the ensemble
/// prediction.
pub fn ensemble_probs(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("ensemble members must have equal shapes"));
    }
    let (pa, pb) = (softmax_rows(a), softmax_rows(b));
    let data = pa.data().iter().zip(pb.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.rows(), a.cols(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeatureDistances {
    pub per_class: Vec<(usize, f64)>,
    pub all: f64,
}

fn unit_rows(z: &Tensor) -> Tensor {
    let mut out = z.clone();
    for r in 0..z.rows() {
        let norm = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for c in 0..z.cols() {
                out.set(r, c, z.get(r, c) / norm);
            }
        }
    }
    out
}

fn centroid_of(z: &Tensor, rows: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; z.cols()];
    for &r in rows {
        c.iter_mut().zip(z.row(r)).for_each(|(a, b)| *a += b);
    }
    c.iter_mut().for_each(|v| *v /= rows.len() as f64);
    c
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Distance between the source and target centroids of unit-normalized
/// latent vectors, per class and overall.
pub fn feature_space_distance(
    z_src: &Tensor,
    labels_src: &[usize],
    z_tgt: &Tensor,
    labels_tgt: &[usize],
) -> Result<FeatureDistances> {
    if z_src.cols() != z_tgt.cols() {
        return Err(shape_err("latent widths differ"));
    }
    if z_src.rows() != labels_src.len() || z_tgt.rows() != labels_tgt.len() {
        return Err(shape_err("one label per latent row required"));
    }
    if labels_src.is_empty() || labels_tgt.is_empty() {
        return Err(Error::InvalidArgument("empty latent batch".into()));
    }
    let (us, ut) = (unit_rows(z_src), unit_rows(z_tgt));
    let group = |labels: &[usize]| {
        let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            g.entry(l).or_default().push(i);
        }
        g
    };
    let (gs, gt) = (group(labels_src), group(labels_tgt));
    let mut per_class = Vec::new();
    for c in gs.keys().chain(gt.keys()).collect::<std::collections::BTreeSet<_>>() {
        let (Some(rs), Some(rt)) = (gs.get(c), gt.get(c)) else {
            return Err(Error::InvalidArgument(format!("class {c} absent from one domain")));
        };
        per_class.push((*c, l2(&centroid_of(&us, rs), &centroid_of(&ut, rt))));
    }
    let all_s: Vec<usize> = (0..us.rows()).collect();
    let all_t: Vec<usize> = (0..ut.rows()).collect();
    let all = l2(&centroid_of(&us, &all_s), &centroid_of(&ut, &all_t));
    Ok(FeatureDistances { per_class, all })
}

fn mean_cov(p: &[Point]) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = p.len() as f64;
    let m = [
        p.iter().map(|q| q[0]).sum::<f64>() / n,
        p.iter().map(|q| q[1]).sum::<f64>() / n,
    ];
    let mut c = [[0.0; 2]; 2];
    for q in p {
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] += (q[i] - m[i]) * (q[j] - m[j]);
            }
        }
    }
    c.iter_mut().flatten().for_each(|v| *v /= n - 1.0);
    (m, c)
}

/// `(‖μ_A − μ_B‖₂, ‖Σ_A − Σ_B‖_F)` with unbiased covariances.
pub fn moment_distance(a: &[Point], b: &[Point]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("moment distance needs at least two points per set".into()));
    }
    let ((ma, ca), (mb, cb)) = (mean_cov(a), mean_cov(b));
    let mean_gap = l2(&ma, &mb);
    let cov_gap = ca
        .iter()
        .flatten()
        .zip(cb.iter().flatten())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok((mean_gap, cov_gap))
}

fn mean_pairwise<P: AsRef<[f64]>>(a: &[P], b: &[P]) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += l2(x.as_ref(), y.as_ref());
        }
    }
    s / (a.len() * b.len()) as f64
}

/// `2E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖` over all pairs, self-pairs included.
pub fn energy_distance<P: AsRef<[f64]>>(a: &[P], b: &[P]) -> f64 {
    2.0 * mean_pairwise(a, b) - mean_pairwise(a, a) - mean_pairwise(b, b)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct HistCounts {
    pub underflow: u64,
    pub counts: Vec<u64>,
    pub overflow: u64,
}

impl HistCounts {
    pub fn total(&self) -> u64 {
        self.underflow + self.overflow + self.counts.iter().sum::<u64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    pub dims: Vec<usize>,
    pub per_dim: Vec<HistCounts>,
    pub pooled: HistCounts,
}

impl Histogram {
    pub fn edges(&self) -> Vec<f64> {
        let w = (self.hi - self.lo) / self.bins as f64;
        (0..=self.bins).map(|i| self.lo + i as f64 * w).collect()
    }

    /// `bin_lo,bin_hi,pooled,dim_<d>...` with underflow and overflow rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "bin_lo,bin_hi,pooled")?;
        for d in &self.dims {
            write!(w, ",dim_{d}")?;
        }
        writeln!(w)?;
        let row = |w: &mut W, lo: f64, hi: f64, pick: &dyn Fn(&HistCounts) -> u64| -> Result<()> {
            write!(w, "{},{},{}", fmt_sig9(lo), fmt_sig9(hi), pick(&self.pooled))?;
            for h in &self.per_dim {
                write!(w, ",{}", pick(h))?;
            }
            writeln!(w)?;
            Ok(())
        };
        let edges = self.edges();
        row(&mut w, f64::NEG_INFINITY, self.lo, &|h| h.underflow)?;
        for i in 0..self.bins {
            row(&mut w, edges[i], edges[i + 1], &|h| h.counts[i])?;
        }
        row(&mut w, self.hi, f64::INFINITY, &|h| h.overflow)?;
        Ok(())
    }
}

/// Fixed-range histogram of selected latent columns plus all of them pooled.
/// Bins are half-open except the last, which also takes `hi`.
pub fn latent_histogram(z: &Tensor, dims: &[usize], bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("histogram range needs lo < hi, got ({lo}, {hi})")));
    }
    if let Some(d) = dims.iter().find(|&&d| d >= z.cols()) {
        return Err(shape_err(format!("dimension {d} out of range for width {}", z.cols())));
    }
    let width = (hi - lo) / bins as f64;
    let add = |h: &mut HistCounts, v: f64| {
        if v < lo {
            h.underflow += 1;
        } else if v > hi {
            h.overflow += 1;
        } else {
            let i = (((v - lo) / width) as usize).min(bins - 1);
            h.counts[i] += 1;
        }
    };
    let empty = HistCounts {
        counts: vec![0; bins],
        ..HistCounts::default()
    };
    let mut pooled = empty.clone();
    z.data().iter().for_each(|&v| add(&mut pooled, v));
    let per_dim = dims
        .iter()
        .map(|&d| {
            let mut h = empty.clone();
            (0..z.rows()).for_each(|r| add(&mut h, z.get(r, d)));
            h
        })
        .collect();
    Ok(Histogram {
        lo,
        hi,
        bins,
        dims: dims.to_vec(),
        per_dim,
        pooled,
    })
}

/// Writes `x0,x1,series` rows.
pub fn write_scatter_csv<W: Write>(mut w: W, series: &[(&str, &[Point])]) -> Result<()> {
    writeln!(w, "x0,x1,series")?;
    for (name, points) in series {
        for p in *points {
            writeln!(w, "{},{},{name}", fmt_sig9(p[0]), fmt_sig9(p[1]))?;
        }
    }
    Ok(())
}

/// Per-epoch rows plus a summary. Wall-clock time is kept apart from the
/// metric rows so `metrics.csv` is reproducible byte for byte.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub epoch_seconds: Vec<f64>,
    pub summary: BTreeMap<String, Value>,
    pub seed: u64,
}

impl RunReport {
    pub fn new(columns: &[&str], seed: u64) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            epoch_seconds: Vec::new(),
            summary: BTreeMap::new(),
            seed,
        }
    }

    pub fn push_row(&mut self, values: Vec<f64>, seconds: f64) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(shape_err(format!(
                "report row has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("report column `{}`", self.columns[i])));
        }
        self.rows.push(values);
        self.epoch_seconds.push(seconds);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.column(name)?.last().copied()
    }

    pub fn set_summary(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.summary.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    /// `epoch,<columns>`; epochs count from 1.
    pub fn write_metrics_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,{}", self.columns.join(","))?;
        for (i, row) in self.rows.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|&v| fmt_sig9(v)).collect();
            writeln!(w, "{},{}", i + 1, cells.join(","))?;
        }
        Ok(())
    }

    pub fn write_timing_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,seconds")?;
        for (i, s) in self.epoch_seconds.iter().enumerate() {
            writeln!(w, "{},{s:.6}", i + 1)?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        let mut doc = self.summary.clone();
        doc.insert("seed".into(), Value::from(self.seed));
        doc.insert("epochs".into(), Value::from(self.rows.len()));
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;

    #[test]
    fn accuracy_cases() {
        let logits = Tensor::from_rows(&[[2.0, 1.0], [0.0, 3.0], [1.0, 1.0]]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&logits, &[1, 0, 1]).unwrap(), 0.0);
        assert!(accuracy(&logits, &[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = 10_000;
        let data = (0..2 * m).map(|_| rng.sample(StandardNormal)).collect();
        let logits = Tensor::new(m, 2, data).unwrap();
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..2)).collect();
        assert!((accuracy(&logits, &labels).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn feature_distance_cases() {
        let z = Tensor::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]]).unwrap();
        let labels = [0, 1, 1];
        let d = feature_space_distance(&z, &labels, &z, &labels).unwrap();
        assert_eq!(d.all, 0.0);
        assert!(d.per_class.iter().all(|(_, v)| *v == 0.0));

        let e1 = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let e2 = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        let d = feature_space_distance(&e1, &[0], &e2, &[0]).unwrap();
        assert!((d.all - 2f64.sqrt()).abs() < 1e-15);

        let zt = Tensor::from_rows(&[[0.1, 2.0], [1.0, 1.0], [-0.5, 0.5]]).unwrap();
        let base = feature_space_distance(&z, &labels, &zt, &labels).unwrap();
        // power-of-two scales are exact in floating point
        let exact = feature_space_distance(&z.map(|v| 8.0 * v), &labels, &zt.map(|v| 0.25 * v), &labels).unwrap();
        assert_eq!(base, exact);
        let other = feature_space_distance(&z.map(|v| 7.5 * v), &labels, &zt.map(|v| 0.3 * v), &labels).unwrap();
        assert!((base.all - other.all).abs() < 1e-12);
        assert!(feature_space_distance(&z, &labels, &zt, &[0, 0, 0]).is_err());
    }

    #[test]
    fn moment_distance_cases() {
        let a = [[0.0, 0.0], [1.0, 2.0], [3.0, 1.0]];
        assert_eq!(moment_distance(&a, &a).unwrap(), (0.0, 0.0));
        let b: Vec<Point> = a.iter().map(|p| [p[0] + 1.0, p[1]]).collect();
        let (m, c) = moment_distance(&b, &a).unwrap();
        assert!((m - 1.0).abs() < 1e-15 && c < 1e-12);
        assert!(moment_distance(&a[..1], &a).is_err());
    }

    #[test]
    fn moment_distance_matches_parameter_gaps() {
        use crate::datasets::gen_gaussian2d;
        let ca = [[4.0, 2.0], [2.0, 2.0]];
        let cb = [[0.3, 0.2], [0.2, 0.2]];
        let a = gen_gaussian2d([5.0, 5.0], ca, 20_000, 1).unwrap();
        let b = gen_gaussian2d([1.0, 1.0], cb, 20_000, 2).unwrap();
        let (m, c) = moment_distance(&a, &b).unwrap();
        let expected_c = ca
            .iter()
            .flatten()
            .zip(cb.iter().flatten())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((m - 32f64.sqrt()).abs() < 0.1, "{m}");
        assert!((c - expected_c).abs() < 0.25, "{c} vs {expected_c}");
    }

    #[test]
    fn energy_distance_cases() {
        let a = [[0.0, 0.0], [1.0, 2.0], [3.0, 1.0]];
        assert_eq!(energy_distance(&a, &a), 0.0);
        let shuffled = [a[2], a[0], a[1]];
        assert!(energy_distance(&a, &shuffled).abs() < 1e-15);
        let d = 2.5;
        let e = energy_distance(&[[0.0, 0.0]], &[[d, 0.0]]);
        assert_eq!(e, 2.0 * d);
        let b = [[0.5, 0.0], [2.0, -1.0]];
        assert_eq!(energy_distance(&a, &b), energy_distance(&b, &a));
        assert!(energy_distance(&a, &b) > 0.0);
    }

    /// Standard normal CDF via the complementary error function series.
    fn phi(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26, |error| < 1.5e-7
        let t = 1.0 / (1.0 + 0.3275911 * x.abs() / 2f64.sqrt());
        let poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
        let erf = 1.0 - poly * (-(x * x) / 2.0).exp();
        0.5 * (1.0 + erf.copysign(x))
    }

    #[test]
    fn histogram_cases() {
        let z = Tensor::full(5, 3, 0.3);
        let h = latent_histogram(&z, &[0, 2], 4, (-1.0, 1.0)).unwrap();
        assert_eq!(h.pooled.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.pooled.total(), 15);
        assert!(h.per_dim.iter().all(|d| d.total() == 5));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let z = Tensor::new(n, 1, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let h = latent_histogram(&z, &[0], 10, (-4.0, 4.0)).unwrap();
        let edges = h.edges();
        for i in 0..10 {
            let expected = phi(edges[i + 1]) - phi(edges[i]);
            let got = h.pooled.counts[i] as f64 / n as f64;
            assert!((got - expected).abs() < 0.01, "bin {i}: {got} vs {expected}");
        }
        for bins in [1, 3, 50, 400] {
            let h = latent_histogram(&z, &[0], bins, (-2.0, 2.0)).unwrap();
            assert_eq!(h.pooled.total(), n as u64);
        }
        assert!(latent_histogram(&z, &[0], 0, (0.0, 1.0)).is_err());
        assert!(latent_histogram(&z, &[0], 3, (1.0, 1.0)).is_err());
    }

    #[test]
    fn report_rows_and_csv() {
        let mut r = RunReport::new(&["loss", "acc"], 3);
        r.push_row(vec![1.5, 0.25], 0.1).unwrap();
        r.push_row(vec![1.0, 0.5], 0.2).unwrap();
        assert!(r.push_row(vec![1.0], 0.0).is_err());
        assert!(r.push_row(vec![f64::NAN, 0.0], 0.0).is_err());
        assert_eq!(r.last("acc"), Some(0.5));
        let mut buf = Vec::new();
        r.write_metrics_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("epoch,loss,acc\n1,"));
        r.set_summary("final_acc", 0.5).unwrap();
        let v: Value = serde_json::from_str(&r.summary_json().unwrap()).unwrap();
        assert_eq!(v["final_acc"], 0.5);
        assert_eq!(v["epochs"], 2);
    }
}
