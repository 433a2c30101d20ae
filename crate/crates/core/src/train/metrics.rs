use serde::{Deserialize, Serialize};

use crate::arch::Model;
use crate::data::{Dataset, Pipeline};
use crate::error::Result;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Percent of samples whose label ranks first.
    pub top1: f64,
    /// Percent of samples whose label ranks within the first five.
    pub top5: f64,
    /// Mean cross-entropy.
    pub loss: f64,
    pub iter: u64,
    pub samples: usize,
}

impl MetricReport {
    pub fn top1_error(&self) -> f64 {
        100.0 - self.top1
    }
}

/// Whether `label` is among the `k` highest scores. Equal scores rank the
/// lower class index first.
pub fn top_k_hit<T: Scalar>(scores: &[T], label: usize, k: usize) -> bool {
    let t = scores[label];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < label))
        .count();
    ahead < k
}

fn cross_entropy<T: Scalar>(scores: &[T], label: usize) -> f64 {
    let m = scores
        .iter()
        .fold(f64::NEG_INFINITY, |m, s| m.max(s.to_f64().expect("f64")));
    let lse = m + scores
        .iter()
        .map(|s| (s.to_f64().expect("f64") - m).exp())
        .sum::<f64>()
        .ln();
    lse - scores[label].to_f64().expect("f64")
}

/// Eval-mode metrics over the whole of `set` in sequential batches.
pub fn evaluate<T: Scalar>(
    model: &mut Model<T>,
    set: &Dataset,
    pipeline: &Pipeline,
    batch_size: usize,
    iter: u64,
) -> Result<MetricReport> {
    let (mut hit1, mut hit5, mut loss) = (0usize, 0usize, 0.0f64);
    let n = set.len();
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, labels) = pipeline.eval_batch(set, chunk);
        let logits = model.logits(&images.cast::<T>())?;
        logits.check_finite("evaluation logits")?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks_exact(k).zip(&labels) {
            hit1 += usize::from(top_k_hit(row, label, 1));
            hit5 += usize::from(top_k_hit(row, label, 5));
            loss += cross_entropy(row, label);
        }
    }
    let pct = |h: usize| if n == 0 { 0.0 } else { 100.0 * h as f64 / n as f64 };
    Ok(MetricReport {
        top1: pct(hit1),
        top5: pct(hit5),
        loss: if n == 0 { 0.0 } else { loss / n as f64 },
        iter,
        samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_rank_lower_index_first() {
        let s = [1.0f64, 3.0, 3.0, 0.0];
        assert!(top_k_hit(&s, 1, 1));
        assert!(!top_k_hit(&s, 2, 1));
        assert!(top_k_hit(&s, 2, 2));
        assert!(!top_k_hit(&s, 3, 3));
        assert!(top_k_hit(&s, 3, 4));
    }
}
