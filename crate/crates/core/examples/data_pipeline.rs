//! Writes a stand-in dataset in the CIFAR-10 binary layout, loads it back
//! and builds normalized, augmented batches.
//!
//! cargo run --release --example data_pipeline [cifar-dir]

use std::path::PathBuf;

use ressenet::data::synth::{self, SynthSpec};
use ressenet::data::{epoch_batches, load, AugmentPlan, DatasetKind, NormStats, Pipeline};

fn main() -> ressenet::Result<()> {
    let tmp = tempfile::tempdir()?;
    let dir = match std::env::args().nth(1) {
        Some(d) => PathBuf::from(d),
        None => {
            let spec = SynthSpec {
                train_per_class: 100,
                test_per_class: 20,
                ..SynthSpec::full(DatasetKind::Cifar10, 0)
            };
            synth::write(tmp.path(), &spec)?;
            tmp.path().to_path_buf()
        }
    };
    let splits = load(DatasetKind::Cifar10, &dir)?;
    println!("train {} test {}", splits.train.len(), splits.test.len());
    println!("train histogram {:?}", splits.train.class_histogram());

    let stats = NormStats::compute(&splits.train);
    println!("mean {:.4?}\nstd  {:.4?}", stats.mean, stats.std);

    let plan = AugmentPlan::with_seed(1);
    for i in 0..4 {
        println!("epoch 0 sample {i}: {:?}", plan.draw(0, i));
    }
    let pipe = Pipeline::new(stats, plan)?;
    let batches = epoch_batches(splits.train.len(), 128, 0, 1);
    println!("{} batches per epoch", batches.len());
    for (b, idx) in batches.enumerate().take(2) {
        let (x, y) = pipe.train_batch(&splits.train, &idx, 0);
        let mean = x.data().iter().map(|&v| f64::from(v)).sum::<f64>() / x.numel() as f64;
        println!(
            "batch {b}: shape {:?}, mean {mean:+.3}, labels {:?}",
            x.shape(),
            &y[..8]
        );
    }
    Ok(())
}
