use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, DatasetKind, Splits, IMAGE_BYTES};
use crate::error::{Error, Result};

pub const CIFAR10_FILES: [&str; 6] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
    "test_batch.bin",
];

pub const CIFAR100_FILES: [&str; 2] = ["train.bin", "test.bin"];

fn expected_files(kind: DatasetKind) -> &'static [&'static str] {
    match kind {
        DatasetKind::Cifar10 => &CIFAR10_FILES,
        DatasetKind::Cifar100 => &CIFAR100_FILES,
    }
}

/// The directory holding the binary files: `path` itself, or the archive's
/// standard subdirectory below it.
pub fn resolve_dir(kind: DatasetKind, path: &Path) -> Result<PathBuf> {
    let files = expected_files(kind);
    let has_all = |dir: &Path| files.iter().all(|f| dir.join(f).is_file());
    for dir in [path.to_path_buf(), path.join(kind.archive_dir())] {
        if has_all(&dir) {
            return Ok(dir);
        }
    }
    Err(Error::MissingDataset(format!(
        "{kind} binary files not found in {} (expected {} in that directory or in {}/)",
        path.display(),
        files.join(", "),
        kind.archive_dir()
    )))
}

struct Parsed {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    coarse: Vec<u8>,
}

fn parse_file(kind: DatasetKind, path: &Path, into: &mut Parsed) -> Result<()> {
    let bytes = fs::read(path)?;
    let label_bytes = match kind {
        DatasetKind::Cifar10 => 1,
        DatasetKind::Cifar100 => 2,
    };
    let record = label_bytes + IMAGE_BYTES;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "length {} is not a positive multiple of the {record}-byte record",
                bytes.len()
            ),
        });
    }
    let max = kind.num_classes() as u8 - 1;
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_bytes - 1];
        if label > max {
            return Err(Error::CorruptRecord {
                path: path.to_path_buf(),
                record: i,
                msg: format!("label {label} exceeds {max}"),
            });
        }
        if kind == DatasetKind::Cifar100 {
            if rec[0] >= 20 {
                return Err(Error::CorruptRecord {
                    path: path.to_path_buf(),
                    record: i,
                    msg: format!("coarse label {} exceeds 19", rec[0]),
                });
            }
            into.coarse.push(rec[0]);
        }
        into.labels.push(label);
        into.pixels.extend_from_slice(&rec[label_bytes..]);
    }
    Ok(())
}

fn load_files(kind: DatasetKind, dir: &Path, files: &[&str]) -> Result<Dataset> {
    let mut parsed = Parsed {
        pixels: Vec::new(),
        labels: Vec::new(),
        coarse: Vec::new(),
    };
    for f in files {
        parse_file(kind, &dir.join(f), &mut parsed)?;
    }
    Ok(Dataset {
        kind,
        pixels: parsed.pixels,
        labels: parsed.labels,
        coarse: (kind == DatasetKind::Cifar100).then_some(parsed.coarse),
    })
}

pub fn load_cifar10(path: &Path) -> Result<Splits> {
    load(DatasetKind::Cifar10, path)
}

pub fn load_cifar100(path: &Path) -> Result<Splits> {
    load(DatasetKind::Cifar100, path)
}

pub fn load(kind: DatasetKind, path: &Path) -> Result<Splits> {
    let dir = resolve_dir(kind, path)?;
    let files = expected_files(kind);
    let (train, test) = files.split_at(files.len() - 1);
    Ok(Splits {
        train: load_files(kind, &dir, train)?,
        test: load_files(kind, &dir, test)?,
    })
}
