//! Inputs shared by the benches.

use gla_core::datasets::{make_shifted_task, DomainPair, Point, Shift, TaskKind, SAMPLES_PER_DOMAIN};
use gla_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(rows, cols, data).expect("sized")
}

pub fn normal_points(n: usize, shift: f64, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| [shift + rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal)])
        .collect()
}

pub fn rotated_moons() -> DomainPair {
    make_shifted_task(TaskKind::Moons, Shift::rotation(30.0), SAMPLES_PER_DOMAIN, 0).expect("valid task")
}
