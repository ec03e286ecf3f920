//! Synthetic 2-D domains and labeled domain-shift tasks.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::rng::SeedStreams;

pub type Point = [f64; 2];

/// Default per-domain sample count of the synthetic experiments.
pub const SAMPLES_PER_DOMAIN: usize = 500;
pub const MOONS_NOISE: f64 = 0.1;
pub const BLOBS_STD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub points: Vec<Point>,
    pub labels: Vec<usize>,
}

/// Which generator produced a dataset, with what parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub params: BTreeMap<String, Value>,
    pub seed: u64,
}

fn standard_normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    (rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Lower Cholesky factor of a 2x2 SPD matrix.
fn cholesky2(cov: [[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let scale = cov[0][0].abs().max(cov[1][1].abs()).max(1.0);
    if (cov[0][1] - cov[1][0]).abs() > 1e-12 * scale || cov[0][0] <= 0.0 {
        return Err(Error::NotPositiveDefinite);
    }
    let a = cov[0][0].sqrt();
    let b = cov[1][0] / a;
    let rem = cov[1][1] - b * b;
    if rem <= 0.0 || !rem.is_finite() {
        return Err(Error::NotPositiveDefinite);
    }
    Ok([[a, 0.0], [b, rem.sqrt()]])
}

/// `n` i.i.d. draws of `mean + L z`, `L` the Cholesky factor of `cov`.
pub fn gen_gaussian2d(mean: Point, cov: [[f64; 2]; 2], n: usize, seed: u64) -> Result<Vec<Point>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let l = cholesky2(cov)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let (z0, z1) = standard_normal_pair(&mut rng);
            [mean[0] + l[0][0] * z0, mean[1] + l[1][0] * z0 + l[1][1] * z1]
        })
        .collect())
}

fn grid(k: usize) -> impl Iterator<Item = f64> {
    (0..k).map(move |i| if k == 1 { 0.0 } else { PI * i as f64 / (k - 1) as f64 })
}

/// Two interleaving half circles. The first `n / 2` points are
/// `(cos t, sin t)` with label 0, the rest `(1 - cos t, 0.5 - sin t)` with
/// label 1, `t` on an even grid over `[0, π]`; then i.i.d. Gaussian noise.
pub fn gen_moons(n: usize, noise_std: f64, seed: u64) -> Result<Labeled> {
    if n < 2 {
        return Err(Error::InvalidArgument("moons need n >= 2".into()));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise_std {noise_std} must be >= 0")));
    }
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let mut points: Vec<Point> = grid(n_outer).map(|t| [t.cos(), t.sin()]).collect();
    points.extend(grid(n_inner).map(|t| [1.0 - t.cos(), 0.5 - t.sin()]));
    let mut labels = vec![0; n_outer];
    labels.resize(n_outer + n_inner, 1);
    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut points {
            let (e0, e1) = standard_normal_pair(&mut rng);
            p[0] += noise_std * e0;
            p[1] += noise_std * e1;
        }
    }
    Ok(Labeled { points, labels })
}

/// Isotropic Gaussian clouds, label = center index.
pub fn gen_blobs(centers: &[Point], std: f64, n_per_center: usize, seed: u64) -> Result<Labeled> {
    if centers.is_empty() {
        return Err(Error::InvalidArgument("blobs need at least one center".into()));
    }
    if !(std > 0.0) {
        return Err(Error::InvalidArgument(format!("blob std {std} must be > 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(centers.len() * n_per_center);
    let mut labels = Vec::with_capacity(points.capacity());
    for (label, c) in centers.iter().enumerate() {
        for _ in 0..n_per_center {
            let (e0, e1) = standard_normal_pair(&mut rng);
            points.push([c[0] + std * e0, c[1] + std * e1]);
            labels.push(label);
        }
    }
    Ok(Labeled { points, labels })
}

/// Rotation (degrees, about the source centroid), then scale, then translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shift {
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default)]
    pub translation: Point,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for Shift {
    fn default() -> Self {
        Self::identity()
    }
}

impl Shift {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            translation: [0.0, 0.0],
            scale: 1.0,
        }
    }

    pub fn rotation(deg: f64) -> Self {
        Self {
            rotation_deg: deg,
            ..Self::identity()
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            translation: [dx, dy],
            ..Self::identity()
        }
    }

    pub fn is_invertible(&self) -> bool {
        self.scale != 0.0
            && self.scale.is_finite()
            && self.rotation_deg.is_finite()
            && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn apply(&self, p: Point, pivot: Point) -> Point {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (dx, dy) = (p[0] - pivot[0], p[1] - pivot[1]);
        [
            pivot[0] + self.scale * (c * dx - s * dy) + self.translation[0],
            pivot[1] + self.scale * (s * dx + c * dy) + self.translation[1],
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Two Gaussian classes sharing covariance `[[4,2],[2,2]]`, means `(5,5)` and `(1,1)`.
    Gauss,
    Moons,
    /// Two unit-std blobs centered at `(11,11)` and `(9,9)`.
    Blobs,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Gauss => "gauss",
            TaskKind::Moons => "moons",
            TaskKind::Blobs => "blobs",
        }
    }

    fn generate(&self, n: usize, seed: u64) -> Result<Labeled> {
        match self {
            TaskKind::Moons => gen_moons(n, MOONS_NOISE, seed),
            TaskKind::Blobs => {
                let half = n / 2;
                gen_blobs(&[[11.0, 11.0], [9.0, 9.0]], BLOBS_STD, half.max(1), seed)
            }
            TaskKind::Gauss => {
                let half = (n / 2).max(1);
                let cov = [[4.0, 2.0], [2.0, 2.0]];
                let mut points = gen_gaussian2d([5.0, 5.0], cov, half, seed)?;
                points.extend(gen_gaussian2d([1.0, 1.0], cov, half, seed.wrapping_add(1))?);
                let mut labels = vec![0; half];
                labels.resize(2 * half, 1);
                Ok(Labeled { points, labels })
            }
        }
    }
}

/// A labeled source domain and a target domain whose labels are reachable
/// only through [`DomainPair::eval_view`].
#[derive(Debug)]
pub struct DomainPair {
    source_points: Vec<Point>,
    source_labels: Option<Vec<usize>>,
    target_points: Vec<Point>,
    target_labels: Option<Vec<usize>>,
    provenance: Provenance,
    label_reads: AtomicUsize,
}

impl Clone for DomainPair {
    fn clone(&self) -> Self {
        Self {
            source_points: self.source_points.clone(),
            source_labels: self.source_labels.clone(),
            target_points: self.target_points.clone(),
            target_labels: self.target_labels.clone(),
            provenance: self.provenance.clone(),
            label_reads: AtomicUsize::new(0),
        }
    }
}

/// Everything a training procedure may see.
#[derive(Clone, Copy, Debug)]
pub struct TrainView<'a> {
    pub source_points: &'a [Point],
    pub source_labels: Option<&'a [usize]>,
    pub target_points: &'a [Point],
}

/// Held-out target labels, for evaluation code paths only.
#[derive(Clone, Copy, Debug)]
pub struct EvalView<'a> {
    pub target_points: &'a [Point],
    pub target_labels: &'a [usize],
}

impl DomainPair {
    pub fn new(
        source_points: Vec<Point>,
        source_labels: Option<Vec<usize>>,
        target_points: Vec<Point>,
        target_labels: Option<Vec<usize>>,
        provenance: Provenance,
    ) -> Result<Self> {
        let finite = |ps: &[Point]| ps.iter().flatten().all(|v| v.is_finite());
        if !finite(&source_points) || !finite(&target_points) {
            return Err(Error::InvalidArgument("non-finite point".into()));
        }
        if source_labels.as_ref().is_some_and(|l| l.len() != source_points.len())
            || target_labels.as_ref().is_some_and(|l| l.len() != target_points.len())
        {
            return Err(Error::InvalidArgument("label count differs from point count".into()));
        }
        Ok(Self {
            source_points,
            source_labels,
            target_points,
            target_labels,
            provenance,
            label_reads: AtomicUsize::new(0),
        })
    }

    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            source_points: &self.source_points,
            source_labels: self.source_labels.as_deref(),
            target_points: &self.target_points,
        }
    }

    /// Target labels for evaluation. Every call is counted.
    pub fn eval_view(&self) -> Option<EvalView<'_>> {
        let labels = self.target_labels.as_deref()?;
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        Some(EvalView {
            target_points: &self.target_points,
            target_labels: labels,
        })
    }

    /// Whether held-out target labels exist; does not count as a read.
    pub fn has_target_labels(&self) -> bool {
        self.target_labels.is_some()
    }

    /// How many times target labels were handed out.
    pub fn target_label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn num_classes(&self) -> usize {
        let max = |l: &Option<Vec<usize>>| l.as_ref().and_then(|l| l.iter().max().copied());
        max(&self.source_labels)
            .into_iter()
            .chain(max(&self.target_labels))
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Writes `x0,x1,label,domain` rows; unlabeled rows leave `label` empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x0,x1,label,domain")?;
        let mut emit = |points: &[Point], labels: Option<&[usize]>, domain: &str| -> Result<()> {
            for (i, p) in points.iter().enumerate() {
                let label = labels.map(|l| l[i].to_string()).unwrap_or_default();
                writeln!(w, "{},{},{label},{domain}", fmt_sig9(p[0]), fmt_sig9(p[1]))?;
            }
            Ok(())
        };
        emit(&self.source_points, self.source_labels.as_deref(), "source")?;
        emit(&self.target_points, self.target_labels.as_deref(), "target")?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, provenance: Provenance) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != "x0,x1,label,domain" {
            return Err(Error::InvalidArgument(format!("unexpected CSV header `{header}`")));
        }
        let mut src: (Vec<Point>, Vec<Option<usize>>) = Default::default();
        let mut tgt: (Vec<Point>, Vec<Option<usize>>) = Default::default();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::InvalidArgument(format!("malformed CSV row {}: `{line}`", lineno + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(bad());
            }
            let x0: f64 = fields[0].trim().parse().map_err(|_| bad())?;
            let x1: f64 = fields[1].trim().parse().map_err(|_| bad())?;
            let label = match fields[2].trim() {
                "" => None,
                s => Some(s.parse::<usize>().map_err(|_| bad())?),
            };
            let dest = match fields[3].trim() {
                "source" => &mut src,
                "target" => &mut tgt,
                _ => return Err(bad()),
            };
            dest.0.push([x0, x1]);
            dest.1.push(label);
        }
        let collect = |l: Vec<Option<usize>>| -> Option<Vec<usize>> {
            if l.is_empty() {
                None
            } else {
                l.into_iter().collect()
            }
        };
        Self::new(src.0, collect(src.1), tgt.0, collect(tgt.1), provenance)
    }
}

/// Nine significant digits, round-trippable through `str::parse`.
pub fn fmt_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Source = generator output; target = the same generator re-seeded, then
/// transformed by `shift` about the source centroid.
pub fn make_shifted_task(kind: TaskKind, shift: Shift, n: usize, seed: u64) -> Result<DomainPair> {
    if !shift.is_invertible() {
        return Err(Error::InvalidArgument("shift is not invertible".into()));
    }
    let streams = SeedStreams::new(seed);
    let source = kind.generate(n, streams.stream("data/source").random())?;
    let target = kind.generate(n, streams.stream("data/target").random())?;
    let pivot = centroid(&source.points);
    let target_points = target.points.iter().map(|&p| shift.apply(p, pivot)).collect();
    let mut params = BTreeMap::new();
    params.insert("n".into(), json!(n));
    params.insert("rotation_deg".into(), json!(shift.rotation_deg));
    params.insert("translation".into(), json!(shift.translation));
    params.insert("scale".into(), json!(shift.scale));
    params.insert("pivot".into(), json!(pivot));
    DomainPair::new(
        source.points,
        Some(source.labels),
        target_points,
        Some(target.labels),
        Provenance {
            generator: format!("shifted_{}", kind.name()),
            params,
            seed,
        },
    )
}

pub fn centroid(points: &[Point]) -> Point {
    let n = points.len().max(1) as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    [sx / n, sy / n]
}

/// The four alignment-only experiments on unlabeled 2-D domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticPreset {
    /// Source N((5,5), C), target N((1,1), C), `C = [[4,2],[2,2]]`.
    GaussSameCov,
    /// Source N((1,1), [[0.3,0.2],[0.2,0.2]]), target N((1,1), [[4,2],[2,2]]).
    GaussSameMean,
    /// Source the upper moon, target the lower moon, noise 0.1.
    Moons,
    /// Source blob at (11,11), target blob at (9,9), std 1.
    Blobs,
}

impl SyntheticPreset {
    pub const ALL: [SyntheticPreset; 4] = [
        SyntheticPreset::GaussSameCov,
        SyntheticPreset::GaussSameMean,
        SyntheticPreset::Moons,
        SyntheticPreset::Blobs,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SyntheticPreset::GaussSameCov => "gauss_same_cov",
            SyntheticPreset::GaussSameMean => "gauss_same_mean",
            SyntheticPreset::Moons => "moons",
            SyntheticPreset::Blobs => "blobs",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Generates `(source, target)` with `n` points per domain.
    pub fn generate(&self, n: usize, seed: u64) -> Result<DomainPair> {
        let streams = SeedStreams::new(seed);
        let s_seed: u64 = streams.stream("data/source").random();
        let t_seed: u64 = streams.stream("data/target").random();
        let mut params = BTreeMap::new();
        params.insert("n".into(), json!(n));
        let (source, target) = match self {
            SyntheticPreset::GaussSameCov | SyntheticPreset::GaussSameMean => {
                let wide = [[4.0, 2.0], [2.0, 2.0]];
                let (sm, sc, tm, tc) = if *self == SyntheticPreset::GaussSameCov {
                    ([5.0, 5.0], wide, [1.0, 1.0], wide)
                } else {
                    ([1.0, 1.0], [[0.3, 0.2], [0.2, 0.2]], [1.0, 1.0], wide)
                };
                params.insert("source_mean".into(), json!(sm));
                params.insert("source_cov".into(), json!(sc));
                params.insert("target_mean".into(), json!(tm));
                params.insert("target_cov".into(), json!(tc));
                (gen_gaussian2d(sm, sc, n, s_seed)?, gen_gaussian2d(tm, tc, n, t_seed)?)
            }
            SyntheticPreset::Moons => {
                params.insert("noise_std".into(), json!(MOONS_NOISE));
                let m = gen_moons(2 * n, MOONS_NOISE, s_seed)?;
                let split = |label| -> Vec<Point> {
                    m.points
                        .iter()
                        .zip(&m.labels)
                        .filter(|(_, &l)| l == label)
                        .map(|(p, _)| *p)
                        .collect()
                };
                (split(0), split(1))
            }
            SyntheticPreset::Blobs => {
                params.insert("source_center".into(), json!([11.0, 11.0]));
                params.insert("target_center".into(), json!([9.0, 9.0]));
                params.insert("std".into(), json!(BLOBS_STD));
                (
                    gen_blobs(&[[11.0, 11.0]], BLOBS_STD, n, s_seed)?.points,
                    gen_blobs(&[[9.0, 9.0]], BLOBS_STD, n, t_seed)?.points,
                )
            }
        };
        DomainPair::new(
            source,
            None,
            target,
            None,
            Provenance {
                generator: self.name().to_string(),
                params,
                seed,
            },
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    None,
    ShiftToNonneg,
    Standardize,
}

/// `y = (x - offset) * scale + shift`, per coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub offset: Point,
    pub scale: Point,
    pub shift: Point,
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        offset: [0.0, 0.0],
        scale: [1.0, 1.0],
        shift: [0.0, 0.0],
    };

    pub fn apply(&self, p: Point) -> Point {
        [
            (p[0] - self.offset[0]) * self.scale[0] + self.shift[0],
            (p[1] - self.offset[1]) * self.scale[1] + self.shift[1],
        ]
    }

    pub fn invert(&self, p: Point) -> Point {
        [
            (p[0] - self.shift[0]) / self.scale[0] + self.offset[0],
            (p[1] - self.shift[1]) / self.scale[1] + self.offset[1],
        ]
    }
}

pub const NONNEG_MARGIN: f64 = 0.1;

/// Normalizes points and returns the transform that was applied.
pub fn affine_normalize(points: &[Point], mode: NormalizeMode) -> Result<(Vec<Point>, AffineTransform)> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("cannot normalize an empty point set".into()));
    }
    let t = match mode {
        NormalizeMode::None => AffineTransform::IDENTITY,
        NormalizeMode::ShiftToNonneg => {
            let mut min = [f64::INFINITY; 2];
            for p in points {
                min[0] = min[0].min(p[0]);
                min[1] = min[1].min(p[1]);
            }
            AffineTransform {
                offset: min,
                scale: [1.0, 1.0],
                shift: [NONNEG_MARGIN; 2],
            }
        }
        NormalizeMode::Standardize => {
            let mean = centroid(points);
            let n = points.len() as f64;
            let mut scale = [1.0; 2];
            for d in 0..2 {
                let var = points.iter().map(|p| (p[d] - mean[d]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    scale[d] = 1.0 / var.sqrt();
                }
            }
            AffineTransform {
                offset: mean,
                scale,
                shift: [0.0; 2],
            }
        }
    };
    Ok((points.iter().map(|&p| t.apply(p)).collect(), t))
}
