use proptest::prelude::*;
use ressenet::arch::{ArchConfig, ArchVariant, Checkpoint, Model};
use ressenet::data::synth::{self, SynthSpec};
use ressenet::data::{AugmentPlan, DatasetKind, NormStats, Pipeline, Splits};
use ressenet::nn::{ParamKind, ParamStore};
use ressenet::train::{
    emit_curves, evaluate, lr_at, read_curves, sgd_step, top_k_hit, train_loop, CurveRecord, SgdConfig,
    TrainConfig, TrainData, TrainState, Velocity,
};
use ressenet::{Error, Tensor};

fn one_param(p: f64, g: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    let id = s
        .add("w", Tensor::new(&[1], vec![p]).unwrap(), ParamKind::Trainable)
        .unwrap();
    s.get_mut(id).set_grad(vec![g]).unwrap();
    s
}

#[test]
fn sgd_hand_example() {
    let mut s = one_param(1.0, 0.1);
    let mut v = Velocity::zeros(&s);
    sgd_step(&mut s, &mut v, 0.1, 0.9, 1e-4, 0).unwrap();
    let w = s.entries()[0].value.data()[0];
    assert!((w - 0.98999).abs() < 1e-12, "{w}");
    assert!((v.bufs[0][0] - 0.1001).abs() < 1e-12);
}

#[test]
fn momentum_accumulates_from_zero() {
    let (g, m) = (0.3, 0.9);
    let mut s = one_param(0.0, g);
    let mut v = Velocity::zeros(&s);
    assert_eq!(v.bufs[0], vec![0.0]);
    sgd_step(&mut s, &mut v, 0.01, m, 0.0, 0).unwrap();
    assert_eq!(v.bufs[0][0], g);
    let id = s.id("w").unwrap();
    s.get_mut(id).set_grad(vec![g]).unwrap();
    sgd_step(&mut s, &mut v, 0.01, m, 0.0, 1).unwrap();
    assert!((v.bufs[0][0] - g * (1.0 + m)).abs() < 1e-15);
}

#[test]
fn buffers_are_not_updated() {
    let mut s = one_param(1.0, 0.1);
    s.add(
        "bn.running_mean",
        Tensor::new(&[1], vec![2.0]).unwrap(),
        ParamKind::Buffer,
    )
    .unwrap();
    let mut v = Velocity::zeros(&s);
    sgd_step(&mut s, &mut v, 0.1, 0.9, 1e-4, 0).unwrap();
    assert_eq!(s.entries()[1].value.data(), &[2.0]);
    assert!(v.bufs[1].is_empty());
}

#[test]
fn non_finite_gradient_aborts_untouched() {
    let mut s = one_param(1.0, f64::NAN);
    let mut v = Velocity::zeros(&s);
    match sgd_step(&mut s, &mut v, 0.1, 0.9, 1e-4, 7) {
        Err(Error::NumericFault { iter, .. }) => assert_eq!(iter, Some(7)),
        other => panic!("{other:?}"),
    }
    assert_eq!(s.entries()[0].value.data(), &[1.0]);
    assert_eq!(v.bufs[0], vec![0.0]);
}

#[test]
fn schedule_steps_by_ten_at_milestones() {
    let c = SgdConfig::default();
    let lrs: Vec<f64> = [0, 31_999, 32_000, 47_999, 48_000, 63_999]
        .iter()
        .map(|&i| lr_at(i, &c))
        .collect();
    assert_eq!(lrs, vec![0.1, 0.1, 0.01, 0.01, 0.001, 0.001]);
}

#[test]
fn one_step_lowers_single_sample_loss() {
    let splits = synth::generate(&SynthSpec {
        train_per_class: 1,
        test_per_class: 1,
        ..SynthSpec::full(DatasetKind::Cifar10, 3)
    });
    let stats = NormStats::compute(&splits.train);
    let pipe = Pipeline::new(stats, AugmentPlan::with_seed(0)).unwrap();
    let (x, y) = pipe.eval_batch(&splits.train, &[0]);
    let x = x.cast::<f64>();
    let mut m: Model<f64> = Model::build_seeded(ArchConfig::new(ArchVariant::ResSeNet, 20, 10), 11).unwrap();
    let mut v = Velocity::zeros(&m.store);
    let before = m.loss_and_grads(&x, &y).unwrap();
    sgd_step(&mut m.store, &mut v, 1e-4, 0.9, 1e-4, 0).unwrap();
    let after = m.loss_and_grads(&x, &y).unwrap();
    assert!(after < before, "{before} -> {after}");
}

fn tiny() -> (Splits, Pipeline) {
    let splits = synth::generate(&SynthSpec {
        train_per_class: 6,
        test_per_class: 2,
        ..SynthSpec::full(DatasetKind::Cifar10, 5)
    });
    let stats = NormStats::compute(&splits.train);
    let pipe = Pipeline::new(stats, AugmentPlan::with_seed(9)).unwrap();
    (splits, pipe)
}

fn tiny_cfg(budget: u64) -> TrainConfig {
    let sgd = SgdConfig {
        batch_size: 16,
        milestones: vec![5],
        max_iters: 20,
        ..SgdConfig::default()
    };
    let mut c = TrainConfig::new(sgd, budget, 21);
    c.eval_every = 4;
    c
}

fn tiny_model() -> Model<f32> {
    Model::build_seeded(ArchConfig::new(ArchVariant::ResSeNet, 8, 10), 4).unwrap()
}

fn run(
    budget: u64,
    state: &mut TrainState<f32>,
    cfg: &TrainConfig,
    splits: &Splits,
    pipe: &Pipeline,
) -> Vec<CurveRecord> {
    let data = TrainData {
        train: &splits.train,
        test: Some(&splits.test),
        pipeline: pipe,
    };
    let cfg = TrainConfig {
        budget,
        ..cfg.clone()
    };
    train_loop(state, &cfg, &data, &mut |_| {}).unwrap().records
}

fn store_bits(m: &Model<f32>) -> Vec<u32> {
    m.store
        .entries()
        .iter()
        .flat_map(|e| e.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn training_is_deterministic() {
    let (splits, pipe) = tiny();
    let cfg = tiny_cfg(9);
    let mut a = TrainState::new(tiny_model());
    let mut b = TrainState::new(tiny_model());
    let ra = run(9, &mut a, &cfg, &splits, &pipe);
    let rb = run(9, &mut b, &cfg, &splits, &pipe);
    assert_eq!(ra, rb);
    assert_eq!(store_bits(&a.model), store_bits(&b.model));
    assert_eq!(ra.len(), 9);
    assert_eq!(
        ra.iter().map(|r| r.iter).collect::<Vec<_>>(),
        (0..9).collect::<Vec<_>>()
    );
    let evals: Vec<u64> = ra.iter().filter(|r| r.top1.is_some()).map(|r| r.iter).collect();
    assert_eq!(evals, vec![3, 7, 8]);
}

#[test]
fn resume_from_checkpoint_is_bitwise() {
    let (splits, pipe) = tiny();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg(11);
    cfg.checkpoint_dir = Some(dir.path().to_path_buf());

    let mut full = TrainState::new(tiny_model());
    let curve = run(11, &mut full, &cfg, &splits, &pipe);

    let mid = Checkpoint::load(&dir.path().join("ckpt-5.bin")).unwrap();
    assert_eq!(mid.manifest.iteration, 5);
    assert!(mid.get("optimizer.momentum.stem.conv.weight").is_some());
    let mut resumed = TrainState::from_checkpoint(&mid).unwrap();
    assert_eq!(resumed.iter, 5);
    let rest = run(11, &mut resumed, &cfg, &splits, &pipe);
    assert_eq!(rest, curve[5..].to_vec());
    assert_eq!(store_bits(&resumed.model), store_bits(&full.model));
    assert_eq!(resumed.velocity, full.velocity);
}

#[test]
fn checkpoints_at_milestones_and_end() {
    let (splits, pipe) = tiny();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg(7);
    cfg.checkpoint_dir = Some(dir.path().to_path_buf());
    let data = TrainData {
        train: &splits.train,
        test: None,
        pipeline: &pipe,
    };
    let mut s = TrainState::new(tiny_model());
    let out = train_loop(&mut s, &cfg, &data, &mut |_| {}).unwrap();
    let names: Vec<String> = out
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, vec!["ckpt-5.bin", "ckpt-7.bin"]);
    assert!(out.evals.is_empty());
}

#[test]
fn zero_budget_gives_empty_curve() {
    let (splits, pipe) = tiny();
    let mut s = TrainState::new(tiny_model());
    let before = store_bits(&s.model);
    assert!(run(0, &mut s, &tiny_cfg(0), &splits, &pipe).is_empty());
    assert_eq!(store_bits(&s.model), before);
}

#[test]
fn evaluation_leaves_batch_norm_statistics_alone() {
    let (splits, pipe) = tiny();
    let mut s = TrainState::new(tiny_model());
    run(3, &mut s, &tiny_cfg(3), &splits, &pipe);
    let before = store_bits(&s.model);
    let a = evaluate(&mut s.model, &splits.test, &pipe, 7, 3).unwrap();
    let b = evaluate(&mut s.model, &splits.test, &pipe, 500, 3).unwrap();
    assert_eq!(store_bits(&s.model), before);
    assert_eq!((a.top1, a.top5), (b.top1, b.top5));
    assert!((a.loss - b.loss).abs() < 1e-9);
    assert_eq!(a.samples, 20);
}

#[test]
fn curve_file_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let recs = vec![
        CurveRecord {
            iter: 0,
            loss: std::f64::consts::LN_10,
            top1: None,
            top5: None,
        },
        CurveRecord {
            iter: 1,
            loss: 0.1 + 0.2,
            top1: Some(12.5),
            top5: Some(1.0 / 3.0),
        },
    ];
    let p = dir.path().join("curve.csv");
    emit_curves(&recs, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("iter,loss,top1,top5\n"));
    assert_eq!(read_curves(&p).unwrap(), recs);

    let plain = &recs[..1];
    emit_curves(plain, &p).unwrap();
    assert!(std::fs::read_to_string(&p).unwrap().starts_with("iter,loss\n"));
    assert_eq!(read_curves(&p).unwrap(), plain);
}

/// Rank by descending score with a stable sort, then look up the label.
fn argsort_hit(scores: &[f64], label: usize, k: usize) -> bool {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    idx[..k.min(idx.len())].contains(&label)
}

proptest! {
    #[test]
    fn top_k_matches_argsort(
        scores in prop::collection::vec(prop::sample::select(vec![-1.0, 0.0, 0.5, 1.0, 2.0]), 1..12),
        label_seed in 0usize..100,
        k in 1usize..7,
    ) {
        let label = label_seed % scores.len();
        prop_assert_eq!(top_k_hit(&scores, label, k), argsort_hit(&scores, label, k));
    }

    #[test]
    fn lr_never_increases(a in 0u64..64_000, b in 0u64..64_000) {
        let c = SgdConfig::default();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(lr_at(hi, &c) <= lr_at(lo, &c));
    }
}
