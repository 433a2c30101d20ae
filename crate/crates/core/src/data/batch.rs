use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AugmentPlan, Dataset, Draw, NormStats, IMAGE_BYTES};
use crate::error::Result;
use crate::tensor::Tensor;

/// Batches per epoch with the short final batch kept.
pub fn batch_count(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Shuffled order of `0..n` for one epoch, fixed by `(seed, epoch)`.
pub fn epoch_order(n: usize, epoch: u64, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let key = seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
    order
}

/// Index batches of one shuffled epoch.
#[derive(Clone, Debug)]
pub struct EpochBatches {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for EpochBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(b)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = batch_count(self.order.len() - self.pos, self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for EpochBatches {}

/// # Panics
/// If `batch_size` is zero.
pub fn epoch_batches(n: usize, batch_size: usize, epoch: u64, seed: u64) -> EpochBatches {
    assert!(batch_size >= 1, "batch size must be positive");
    EpochBatches {
        order: epoch_order(n, epoch, seed),
        batch_size,
        pos: 0,
    }
}

/// Shapes dataset bytes into normalized `[N, 3, 32, 32]` batches.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub stats: NormStats,
    pub plan: AugmentPlan,
    table: [[f32; 256]; 3],
}

impl Pipeline {
    pub fn new(stats: NormStats, plan: AugmentPlan) -> Result<Self> {
        stats.validate()?;
        Ok(Pipeline {
            table: stats.byte_table(),
            stats,
            plan,
        })
    }

    fn assemble(
        &self,
        set: &Dataset,
        indices: &[usize],
        draw: impl Fn(usize) -> Draw,
    ) -> (Tensor<f32>, Vec<usize>) {
        let mut data = vec![0.0f32; indices.len() * IMAGE_BYTES];
        for (slot, &i) in indices.iter().enumerate() {
            self.plan.write_bytes(
                set.image_bytes(i),
                &self.table,
                draw(i),
                &mut data[slot * IMAGE_BYTES..(slot + 1) * IMAGE_BYTES],
            );
        }
        let labels = indices.iter().map(|&i| set.label(i)).collect();
        let images = Tensor::new(&[indices.len(), 3, 32, 32], data).expect("batch shape");
        (images, labels)
    }

    /// Augmented training batch; each sample's draw depends on its dataset index.
    pub fn train_batch(&self, set: &Dataset, indices: &[usize], epoch: u64) -> (Tensor<f32>, Vec<usize>) {
        self.assemble(set, indices, |i| self.plan.draw(epoch, i as u64))
    }

    /// Normalization only.
    pub fn eval_batch(&self, set: &Dataset, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let id = Draw::identity(self.plan.pad);
        self.assemble(set, indices, |_| id)
    }
}
