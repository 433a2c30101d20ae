//! Class-conditional stand-in data written in the exact CIFAR binary layout,
//! for machines without the real archives.
//!
//! Every image is a random smooth background plus per-pixel noise, with a
//! weak class-specific colored grating on top, so labels are learnable but
//! not trivially so.

use std::f32::consts::TAU;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Dataset, DatasetKind, Splits, CHANNELS, CIFAR100_FILES, CIFAR10_FILES, IMAGE_BYTES, PLANE, SIDE,
};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub kind: DatasetKind,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Amplitude of the class grating in `[0, 1]` pixel units.
    pub signal: f32,
}

impl SynthSpec {
    /// Split sizes of the real datasets.
    pub fn full(kind: DatasetKind, seed: u64) -> Self {
        let (train, test) = match kind {
            DatasetKind::Cifar10 => (5000, 1000),
            DatasetKind::Cifar100 => (500, 100),
        };
        SynthSpec {
            kind,
            train_per_class: train,
            test_per_class: test,
            seed,
            signal: 0.12,
        }
    }
}

struct Grating {
    color: [f32; 3],
    fy: f32,
    fx: f32,
    phase: f32,
}

impl Grating {
    fn random(rng: &mut ChaCha8Rng, max_freq: u32) -> Self {
        Grating {
            color: [0; 3].map(|_| rng.random_range(-1.0..1.0)),
            fy: rng.random_range(0..=max_freq) as f32,
            fx: rng.random_range(1..=max_freq) as f32,
            phase: rng.random_range(0.0..TAU),
        }
    }

    fn plane(&self) -> Vec<f32> {
        (0..PLANE)
            .map(|i| {
                let (y, x) = ((i / SIDE) as f32, (i % SIDE) as f32);
                (TAU * (self.fy * y + self.fx * x) / SIDE as f32 + self.phase).sin()
            })
            .collect()
    }
}

fn render(rng: &mut ChaCha8Rng, class: &(Grating, Vec<f32>), signal: f32, out: &mut [u8]) {
    let base: [f32; 3] = [0; 3].map(|_| rng.random_range(0.25..0.75));
    let nuisance: Vec<(Grating, Vec<f32>, f32)> = (0..2)
        .map(|_| {
            let g = Grating::random(rng, 3);
            let p = g.plane();
            (g, p, rng.random_range(0.0..0.15))
        })
        .collect();
    let (grating, pattern) = class;
    for c in 0..CHANNELS {
        for i in 0..PLANE {
            let mut v = base[c] + signal * grating.color[c] * pattern[i];
            for (g, p, amp) in &nuisance {
                v += amp * g.color[c] * p[i];
            }
            v += rng.random_range(-0.08..0.08);
            out[c * PLANE + i] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
}

fn split(spec: &SynthSpec, classes: &[(Grating, Vec<f32>)], per_class: usize, salt: u64) -> Dataset {
    let k = spec.kind.num_classes();
    let mut labels: Vec<u8> = (0..k * per_class).map(|i| (i % k) as u8).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ salt);
    labels.shuffle(&mut rng);
    let mut pixels = vec![0u8; labels.len() * IMAGE_BYTES];
    for (img, &l) in pixels.chunks_exact_mut(IMAGE_BYTES).zip(&labels) {
        render(&mut rng, &classes[usize::from(l)], spec.signal, img);
    }
    Dataset {
        kind: spec.kind,
        coarse: (spec.kind == DatasetKind::Cifar100).then(|| labels.iter().map(|l| l / 5).collect()),
        pixels,
        labels,
    }
}

pub fn generate(spec: &SynthSpec) -> Splits {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes: Vec<(Grating, Vec<f32>)> = (0..spec.kind.num_classes())
        .map(|_| {
            let g = Grating::random(&mut rng, 4);
            let p = g.plane();
            (g, p)
        })
        .collect();
    Splits {
        train: split(spec, &classes, spec.train_per_class, 0x74_7261_696e),
        test: split(spec, &classes, spec.test_per_class, 0x7465_7374),
    }
}

/// Writes records `range` of `set` to `path` in the binary layout.
fn write_records(path: &Path, set: &Dataset, range: std::ops::Range<usize>) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    for i in range {
        if let Some(coarse) = &set.coarse {
            f.write_all(&[coarse[i]])?;
        }
        f.write_all(&[set.labels[i]])?;
        f.write_all(set.image_bytes(i))?;
    }
    f.flush()?;
    Ok(())
}

/// Files in the standard layout: five train batches plus a test batch for
/// CIFAR-10, `train.bin` and `test.bin` for CIFAR-100.
pub fn write_splits(dir: &Path, splits: &Splits) -> Result<()> {
    fs::create_dir_all(dir)?;
    let train = &splits.train;
    match train.kind {
        DatasetKind::Cifar10 => {
            let n = train.len();
            for (b, name) in CIFAR10_FILES[..5].iter().enumerate() {
                write_records(&dir.join(name), train, b * n / 5..(b + 1) * n / 5)?;
            }
            write_records(&dir.join(CIFAR10_FILES[5]), &splits.test, 0..splits.test.len())
        }
        DatasetKind::Cifar100 => {
            write_records(&dir.join(CIFAR100_FILES[0]), train, 0..train.len())?;
            write_records(&dir.join(CIFAR100_FILES[1]), &splits.test, 0..splits.test.len())
        }
    }
}

/// Generates and writes a synthetic dataset, returning it as well.
pub fn write(dir: &Path, spec: &SynthSpec) -> Result<Splits> {
    let splits = generate(spec);
    write_splits(dir, &splits)?;
    Ok(splits)
}
