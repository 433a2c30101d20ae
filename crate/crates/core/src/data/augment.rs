use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NormStats, Sample, CHANNELS, PLANE, SIDE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Random crop placement and flip decision for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Draw {
    /// Crop origin in the padded frame, each in `0..=2 * pad`.
    pub oy: usize,
    pub ox: usize,
    pub flip: bool,
}

impl Draw {
    /// The draw that reproduces the input.
    pub fn identity(pad: usize) -> Self {
        Draw {
            oy: pad,
            ox: pad,
            flip: false,
        }
    }
}

/// Zero-pad, random 32x32 crop, random horizontal flip, normalize.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub pad: usize,
    pub hflip_prob: f64,
    pub seed: u64,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        AugmentPlan {
            pad: 4,
            hflip_prob: 0.5,
            seed: 0,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl AugmentPlan {
    pub fn with_seed(seed: u64) -> Self {
        AugmentPlan {
            seed,
            ..Self::default()
        }
    }

    /// Crop origins per axis.
    pub fn origins(&self) -> usize {
        2 * self.pad + 1
    }

    /// The draw for `(seed, epoch, index)`; nothing else feeds the stream.
    pub fn draw(&self, epoch: u64, index: u64) -> Draw {
        let key = splitmix64(splitmix64(splitmix64(self.seed) ^ epoch) ^ index);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let n = self.origins();
        Draw {
            oy: rng.random_range(0..n),
            ox: rng.random_range(0..n),
            flip: rng.random_bool(self.hflip_prob),
        }
    }

    /// Source pixel `(row, col)` for output `(y, x)`, or `None` in the
    /// zero border.
    fn source(&self, d: Draw, y: usize, x: usize) -> Option<(usize, usize)> {
        let xs = if d.flip { SIDE - 1 - x } else { x };
        let py = (y + d.oy).checked_sub(self.pad)?;
        let px = (xs + d.ox).checked_sub(self.pad)?;
        (py < SIDE && px < SIDE).then_some((py, px))
    }

    /// Geometric part only: crop and flip of `[0, 1]` pixels, zero border.
    pub fn crop_flip(&self, image: &Tensor<f32>, d: Draw) -> Tensor<f32> {
        let src = image.data();
        Tensor::from_fn(&[CHANNELS, SIDE, SIDE], |i| {
            let (c, y, x) = (i / PLANE, (i % PLANE) / SIDE, i % SIDE);
            match self.source(d, y, x) {
                Some((py, px)) => src[c * PLANE + py * SIDE + px],
                None => 0.0,
            }
        })
    }

    /// Crop, flip, then normalize. Rejects samples that are already normalized.
    pub fn apply(&self, sample: &Sample, stats: &NormStats, d: Draw) -> Result<Sample> {
        if sample.normalized {
            return Err(Error::Transform("augmenting an already-normalized sample".into()));
        }
        let cropped = self.crop_flip(&sample.image, d);
        Ok(Sample {
            image: normalized(&cropped, stats),
            label: sample.label,
            coarse_label: sample.coarse_label,
            normalized: true,
        })
    }

    pub fn augment(&self, sample: &Sample, stats: &NormStats, epoch: u64, index: u64) -> Result<Sample> {
        self.apply(sample, stats, self.draw(epoch, index))
    }

    /// Batch path straight from bytes, bitwise equal to [`AugmentPlan::apply`].
    pub(crate) fn write_bytes(&self, bytes: &[u8], table: &[[f32; 256]; 3], d: Draw, out: &mut [f32]) {
        for c in 0..CHANNELS {
            let lut = &table[c];
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let b = match self.source(d, y, x) {
                        Some((py, px)) => bytes[c * PLANE + py * SIDE + px],
                        None => 0,
                    };
                    out[c * PLANE + y * SIDE + x] = lut[usize::from(b)];
                }
            }
        }
    }
}

fn normalized(image: &Tensor<f32>, stats: &NormStats) -> Tensor<f32> {
    let data = image.data();
    Tensor::from_fn(image.shape(), |i| stats.normalize(i / PLANE, data[i]))
}

/// Test-time transform: normalization only. Normalizing twice is rejected.
pub fn eval_transform(sample: &Sample, stats: &NormStats) -> Result<Sample> {
    if sample.normalized {
        return Err(Error::Transform("sample is already normalized".into()));
    }
    Ok(Sample {
        image: normalized(&sample.image, stats),
        label: sample.label,
        coarse_label: sample.coarse_label,
        normalized: true,
    })
}
