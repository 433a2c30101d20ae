//! A short training run on generated data with a loss curve and test metrics.
//!
//! cargo run --release --example train_synthetic [iterations]

use ressenet::arch::{ArchConfig, ArchVariant, Model};
use ressenet::data::synth::{self, SynthSpec};
use ressenet::data::{AugmentPlan, DatasetKind, NormStats, Pipeline};
use ressenet::train::{SgdConfig, TrainConfig, TrainData, TrainState};

fn main() -> ressenet::Result<()> {
    let iters: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let splits = synth::generate(&SynthSpec {
        train_per_class: 64,
        test_per_class: 20,
        ..SynthSpec::full(DatasetKind::Cifar10, 0)
    });
    let pipe = Pipeline::new(NormStats::compute(&splits.train), AugmentPlan::with_seed(0))?;

    let model = Model::build_seeded(ArchConfig::new(ArchVariant::ResSeNet, 8, 10), 0)?;
    let mut state = TrainState::<f32>::new(model);
    let sgd = SgdConfig {
        batch_size: 32,
        milestones: vec![iters * 3 / 4],
        max_iters: iters + 1,
        ..SgdConfig::default()
    };
    let mut cfg = TrainConfig::new(sgd, iters, 0);
    cfg.eval_every = 20;
    let data = TrainData {
        train: &splits.train,
        test: Some(&splits.test),
        pipeline: &pipe,
    };
    let out = ressenet::train::train_loop(&mut state, &cfg, &data, &mut |r| {
        if r.iter % 10 == 0 {
            println!("iter {:>4} loss {:.4}", r.iter, r.loss);
        }
    })?;
    for e in &out.evals {
        println!(
            "after {:>4}: test top1 {:.1}% top5 {:.1}%",
            e.iter, e.top1, e.top5
        );
    }
    Ok(())
}
