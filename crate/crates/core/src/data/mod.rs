//! CIFAR-10/100 binary ingestion, normalization and the train-time
//! pad/crop/flip augmentation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

mod augment;
mod batch;
mod cifar;
mod norm;
pub mod synth;

pub use augment::{eval_transform, AugmentPlan, Draw};
pub use batch::{batch_count, epoch_batches, epoch_order, EpochBatches, Pipeline};
pub use cifar::{load, load_cifar10, load_cifar100, resolve_dir, CIFAR100_FILES, CIFAR10_FILES};
pub use norm::{NormStats, NORM_CACHE_FILE};

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
pub const IMAGE_BYTES: usize = CHANNELS * PLANE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    pub fn num_classes(self) -> usize {
        match self {
            DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 => 100,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
        }
    }

    /// Directory name used by the official archives.
    pub fn archive_dir(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar-10-batches-bin",
            DatasetKind::Cifar100 => "cifar-100-binary",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "cifar100" => Ok(DatasetKind::Cifar100),
            _ => Err(Error::config(
                "dataset",
                format!("unknown `{s}`, expected cifar10 or cifar100"),
            )),
        }
    }
}

/// Raw 8-bit images with their labels, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    /// `len * 3072` bytes: R, G, B planes of 1024 row-major bytes per image.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    /// CIFAR-100 superclass labels; loaded for tooling, unused by training.
    pub coarse: Option<Vec<u8>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.kind.num_classes()
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes()];
        for &l in &self.labels {
            h[usize::from(l)] += 1;
        }
        h
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            kind: self.kind,
            pixels: self.pixels[..n * IMAGE_BYTES].to_vec(),
            labels: self.labels[..n].to_vec(),
            coarse: self.coarse.as_ref().map(|c| c[..n].to_vec()),
        }
    }

    /// A sample with pixels scaled to `[0, 1]`, not yet normalized.
    pub fn sample(&self, i: usize) -> Sample {
        let image = Tensor::new(
            &[CHANNELS, SIDE, SIDE],
            self.image_bytes(i)
                .iter()
                .map(|&b| f32::from(b) / 255.0)
                .collect(),
        )
        .expect("image shape");
        Sample {
            image,
            label: self.label(i),
            coarse_label: self.coarse.as_ref().map(|c| usize::from(c[i])),
            normalized: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, 32, 32]`, in `[0, 1]` units until normalized.
    pub image: Tensor<f32>,
    pub label: usize,
    pub coarse_label: Option<usize>,
    pub normalized: bool,
}
