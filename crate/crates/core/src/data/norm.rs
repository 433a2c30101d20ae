use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, CHANNELS, PLANE};
use crate::error::{Error, Result};

pub const NORM_CACHE_FILE: &str = "ressenet-norm-stats.txt";
const CACHE_HEADER: &str = "ressenet-norm-stats 1";

/// Per-channel mean and standard deviation in `[0, 1]` pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    /// Population statistics over every training pixel. Sums are taken over
    /// the integer bytes, so the result does not depend on summation order.
    pub fn compute(set: &Dataset) -> Self {
        let mut sum = [0u64; 3];
        let mut sq = [0u64; 3];
        for img in set.pixels.chunks_exact(CHANNELS * PLANE) {
            for c in 0..CHANNELS {
                for &b in &img[c * PLANE..(c + 1) * PLANE] {
                    sum[c] += u64::from(b);
                    sq[c] += u64::from(b) * u64::from(b);
                }
            }
        }
        let n = (set.len() * PLANE) as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..CHANNELS {
            let m = sum[c] as f64 / n;
            let var = (sq[c] as f64 / n - m * m).max(0.0);
            mean[c] = m / 255.0;
            std[c] = var.sqrt() / 255.0;
        }
        NormStats { mean, std }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().all(|&s| s > 0.0 && s.is_finite()) && self.mean.iter().all(|m| m.is_finite()) {
            Ok(())
        } else {
            Err(Error::config(
                "normalization stats",
                format!("standard deviations must be positive, got {:?}", self.std),
            ))
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{CACHE_HEADER}\n");
        for v in self.mean.iter().chain(&self.std) {
            s.push_str(&format!("{v}\n"));
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CACHE_HEADER) {
            return Err(bad("missing or unsupported header line"));
        }
        let vals: Vec<f64> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|_| bad("value is not a number")))
            .collect::<Result<_>>()?;
        if vals.len() != 6 {
            return Err(bad("expected six values"));
        }
        let stats = NormStats {
            mean: [vals[0], vals[1], vals[2]],
            std: [vals[3], vals[4], vals[5]],
        };
        stats.validate()?;
        Ok(stats)
    }

    /// Reads `cache` if present; otherwise computes from `train` and tries to
    /// write the cache (an unwritable location is not an error).
    pub fn load_or_compute(cache: &Path, train: &Dataset) -> Result<Self> {
        if cache.is_file() {
            return Self::from_text(&fs::read_to_string(cache)?, cache);
        }
        let stats = Self::compute(train);
        stats.validate()?;
        let _ = fs::write(cache, stats.to_text());
        Ok(stats)
    }

    /// `(v - mean) / std` for channel `c`, evaluated in double precision.
    pub fn normalize(&self, c: usize, v: f32) -> f32 {
        ((f64::from(v) - self.mean[c]) / self.std[c]) as f32
    }

    pub fn denormalize(&self, c: usize, v: f32) -> f32 {
        (f64::from(v) * self.std[c] + self.mean[c]) as f32
    }

    /// Normalized value of every byte, per channel.
    pub(crate) fn byte_table(&self) -> [[f32; 256]; 3] {
        let mut t = [[0.0; 256]; 3];
        for (c, row) in t.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                *v = self.normalize(c, b as f32 / 255.0);
            }
        }
        t
    }
}
