//! Interrupt a run at a checkpoint, resume it, and compare against the
//! uninterrupted run bit for bit.
//!
//! cargo run --release --example checkpoint_resume

use ressenet::arch::{ArchConfig, ArchVariant, Checkpoint, Model};
use ressenet::data::synth::{self, SynthSpec};
use ressenet::data::{AugmentPlan, DatasetKind, NormStats, Pipeline};
use ressenet::train::{checkpoint_path, train_loop, SgdConfig, TrainConfig, TrainData, TrainState};

fn main() -> ressenet::Result<()> {
    let dir = tempfile::tempdir()?;
    let splits = synth::generate(&SynthSpec {
        train_per_class: 8,
        test_per_class: 2,
        ..SynthSpec::full(DatasetKind::Cifar10, 2)
    });
    let pipe = Pipeline::new(NormStats::compute(&splits.train), AugmentPlan::with_seed(2))?;
    let data = TrainData {
        train: &splits.train,
        test: None,
        pipeline: &pipe,
    };
    let sgd = SgdConfig {
        batch_size: 16,
        milestones: vec![10],
        max_iters: 40,
        ..SgdConfig::default()
    };
    let mut cfg = TrainConfig::new(sgd, 20, 5);
    cfg.checkpoint_dir = Some(dir.path().to_path_buf());
    let arch = ArchConfig::new(ArchVariant::ResSeNet, 8, 10);

    let mut full = TrainState::<f32>::new(Model::build_seeded(arch, 1)?);
    let whole = train_loop(&mut full, &cfg, &data, &mut |_| {})?;

    let ckpt = Checkpoint::load(&checkpoint_path(dir.path(), 10))?;
    println!(
        "checkpoint at iteration {} holds {} tensors",
        ckpt.manifest.iteration,
        ckpt.tensors.len()
    );
    let mut resumed = TrainState::<f32>::from_checkpoint(&ckpt)?;
    let tail = train_loop(&mut resumed, &cfg, &data, &mut |_| {})?;

    let same_curve = tail.records[..] == whole.records[10..];
    let same_weights = resumed
        .model
        .store
        .entries()
        .iter()
        .zip(full.model.store.entries())
        .all(|(a, b)| {
            a.value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
    println!("resumed losses identical: {same_curve}");
    println!("resumed weights identical: {same_weights}");
    Ok(())
}
