//! Batch-gradient plumbing shared by both training stages.

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::GradBuffer;

/// Gradients and loss terms of one sample.
pub type SampleOutput = (GradBuffer, Vec<f64>);

/// Evaluates `f` for every sample (in parallel when requested) and averages
/// gradients and terms in sample order, so both execution modes agree bitwise.
pub fn batch_mean<F>(exec: Execution, slots: usize, n: usize, f: F) -> Result<SampleOutput>
where
    F: Fn(usize) -> Result<SampleOutput> + Sync + Send,
{
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let outs = exec.map_range(n, f);
    let mut grads = GradBuffer::empty(slots);
    let mut terms: Vec<f64> = Vec::new();
    for out in outs {
        let (g, t) = out?;
        grads.accumulate(&g);
        if terms.is_empty() {
            terms = vec![0.0; t.len()];
        }
        for (a, b) in terms.iter_mut().zip(&t) {
            *a += b;
        }
    }
    let inv = 1.0 / n as f64;
    grads.scale(inv);
    for t in terms.iter_mut() {
        *t *= inv;
    }
    Ok((grads, terms))
}

/// SplitMix64 finalizer; derives independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Epoch-wise shuffled sample order, deterministic in `seed`.
pub struct Shuffler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    at: usize,
}

impl Shuffler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, epoch: 0, order: vec![], at: 0 }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.at == self.order.len() {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(self.seed, self.epoch));
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut rng);
                self.epoch += 1;
                self.at = 0;
            }
            out.push(self.order[self.at]);
            self.at += 1;
        }
        out
    }
}
