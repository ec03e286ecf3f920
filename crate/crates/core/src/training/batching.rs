use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index pairs for one epoch: a pass over the larger domain, the smaller one
/// cycled through fresh permutations. A trailing partial batch is dropped.
pub fn epoch_batches(
    n_source: usize,
    n_target: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if batch == 0 || batch > n_source.min(n_target) {
        return Err(Error::InvalidArgument(format!(
            "batch {batch} does not fit domains of {n_source} and {n_target} samples"
        )));
    }
    let len = n_source.max(n_target);
    let mut order = |n: usize| {
        let mut out = Vec::with_capacity(len + n);
        while out.len() < len {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            out.extend(perm);
        }
        out.truncate(len);
        out
    };
    let (s, t) = (order(n_source), order(n_target));
    Ok(s.chunks_exact(batch)
        .zip(t.chunks_exact(batch))
        .map(|(a, b)| (a.to_vec(), b.to_vec()))
        .collect())
}
