//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Uses the real archives when `RESSENET_DATA` points at them and
//! generated stand-in data with the same layout and split sizes otherwise.
//! `ACCEPTANCE_ONLY=5,7` runs a subset.

mod common;

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ressenet::arch::{ArchConfig, ArchVariant, Model};
use ressenet::checks;
use ressenet::cli;
use ressenet::data::synth::{self, SynthSpec};
use ressenet::data::{self, AugmentPlan, Dataset, DatasetKind, NormStats, Pipeline, Splits};
use ressenet::nn::{Ctx, Mode, ParamStore, SeBlock};
use ressenet::tensor::OpKind;
use ressenet::train::{evaluate, train_loop, CurveRecord, SgdConfig, TrainConfig, TrainData, TrainState};
use ressenet::{Tape, Tensor};

type Outcome = ressenet::Result<(bool, String)>;

struct Source {
    splits: Splits,
    stats: NormStats,
    origin: String,
}

fn scratch() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = std::env::temp_dir().join(format!("ressenet-acceptance-{}", std::process::id()));
        std::fs::create_dir_all(&dir).expect("scratch dir");
        dir
    })
}

fn load_source(kind: DatasetKind) -> Source {
    if let Some(root) = std::env::var_os(cli::DATA_ENV).map(PathBuf::from) {
        if let Ok(dir) = data::resolve_dir(kind, &root) {
            let splits = data::load(kind, &dir).expect("dataset under RESSENET_DATA");
            let stats = NormStats::compute(&splits.train);
            return Source {
                splits,
                stats,
                origin: format!("{}", dir.display()),
            };
        }
    }
    let dir = scratch().join(kind.name());
    synth::write(&dir, &SynthSpec::full(kind, 0)).expect("write synthetic data");
    let splits = data::load(kind, &dir).expect("reload synthetic data");
    let stats = NormStats::compute(&splits.train);
    Source {
        splits,
        stats,
        origin: "synthetic".into(),
    }
}

fn source(kind: DatasetKind) -> &'static Source {
    static C10: OnceLock<Source> = OnceLock::new();
    static C100: OnceLock<Source> = OnceLock::new();
    match kind {
        DatasetKind::Cifar10 => C10.get_or_init(|| load_source(kind)),
        DatasetKind::Cifar100 => C100.get_or_init(|| load_source(kind)),
    }
}

fn pipeline(src: &Source, seed: u64) -> Pipeline {
    Pipeline::new(src.stats, AugmentPlan::with_seed(seed)).expect("valid stats")
}

fn reduction(args: &[&str]) -> ressenet::Result<f64> {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["ressenet", "params", "--compare"];
    full.extend_from_slice(args);
    let code = cli::run(full, &mut out, &mut err);
    let text = String::from_utf8_lossy(&out);
    let line = text
        .lines()
        .find(|l| l.starts_with("reduction:"))
        .filter(|_| code == 0)
        .ok_or_else(|| ressenet::Error::GradCheck(String::from_utf8_lossy(&err).into_owned()))?;
    Ok(line["reduction:".len()..]
        .trim()
        .trim_end_matches('%')
        .parse()
        .expect("percentage"))
}

fn c1_parameter_reduction() -> Outcome {
    let t = Instant::now();
    let a = reduction(&["res-se-net:44", "baseline:110"])?;
    let b = reduction(&["res-se-net:44", "se-resnet:110"])?;
    let secs = t.elapsed().as_secs_f64();
    let ok = (a - 61.75).abs() <= 0.5 && (b - 62.06).abs() <= 0.5 && secs < 1.0;
    Ok((
        ok,
        format!("vs baseline-110 {a:.3}%, vs se-resnet-110 {b:.3}% in {secs:.3} s"),
    ))
}

fn c2_family_coverage() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f32>::from_fn(&[2, 3, 32, 32], |_| rng.random_range(-2.0..2.0));
    let mut built = 0;
    let mut bad = Vec::new();
    for v in ArchVariant::ALL {
        for d in [20, 32, 44, 56, 110] {
            for k in [10, 100] {
                let mut m = Model::<f32>::build_seeded(ArchConfig::new(v, d, k), 1)?;
                let y = m.logits(&x)?;
                built += 1;
                if y.shape() != [2, k] || !y.is_finite() {
                    bad.push(format!("{v}-{d}/{k}"));
                }
            }
        }
    }
    let rejected = ArchConfig::new(ArchVariant::ResSeNet, 21, 10).validate().is_err()
        && Model::<f32>::build_seeded(ArchConfig::new(ArchVariant::Baseline, 21, 10), 0).is_err();
    let secs = t.elapsed().as_secs_f64();
    Ok((
        bad.is_empty() && rejected && secs < 120.0,
        format!(
            "{built} networks finite with correct shape, depth 21 rejected: {rejected}, {secs:.1} s{}",
            if bad.is_empty() {
                String::new()
            } else {
                format!(", bad: {}", bad.join(" "))
            }
        ),
    ))
}

fn c3_gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut worst_prim = 0.0f64;
    let mut worst_e2e = 0.0f64;
    let mut failing = Vec::new();
    let mut n = 0;
    for case in checks::suite() {
        let o = case.run(0)?;
        n += 1;
        if o.tolerance == checks::END_TO_END_TOL {
            worst_e2e = worst_e2e.max(o.report.max_rel_error);
        } else {
            worst_prim = worst_prim.max(o.report.max_rel_error);
        }
        if !o.passed() {
            failing.push(o.name);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Ok((
        failing.is_empty() && secs < 300.0,
        format!(
            "{n} cases, worst primitive/block {worst_prim:.2e} (< 1e-4), end-to-end {worst_e2e:.2e} (< 1e-3), {secs:.1} s{}",
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(" ")) }
        ),
    ))
}

fn c4_se_gating() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut gates_ok, mut ratio_ok, mut half_ok) = (true, true, true);
    let mut worst_spread = 0.0f64;
    for _ in 0..1000 {
        let c = rng.random_range(1..=64);
        let r = [1, 2, 4, 8, 16][rng.random_range(0..5)];
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let scale = 10f64.powf(rng.random_range(-2.0..1.7));
        let mut store = ParamStore::<f64>::new();
        let se = SeBlock::new(&mut store, "se", c, r, &mut rng)?;
        for e in store.entries_mut() {
            for v in e.value.data_mut() {
                *v *= scale;
            }
        }
        let x = Tensor::from_fn(&[1, c, h, w], |_| rng.random_range(-scale..scale));
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (s, y) = {
            let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Eval);
            (se.excitation(&mut ctx, xv)?, se.forward(&mut ctx, xv)?)
        };
        let s = tape.value(s).detach();
        let y = tape.value(y).detach();
        gates_ok &= s.data().iter().all(|&g| g > 0.0 && g < 1.0);
        for ch in 0..c {
            let plane = h * w;
            let ratios: Vec<f64> = (0..plane)
                .filter(|&i| x.data()[ch * plane + i] != 0.0)
                .map(|i| y.data()[ch * plane + i] / x.data()[ch * plane + i])
                .collect();
            if let Some(&r0) = ratios.first() {
                let spread = ratios.iter().fold(0.0f64, |m, &v| m.max((v - r0).abs()));
                worst_spread = worst_spread.max(spread);
                ratio_ok &= spread < 1e-10;
            }
        }
        for id in [se.reduce.weight, se.reduce.bias, se.expand.weight, se.expand.bias] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let z = {
            let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Eval);
            se.forward(&mut ctx, xv)?
        };
        half_ok &= tape
            .value(z)
            .data()
            .iter()
            .zip(x.data())
            .all(|(a, b)| *a == 0.5 * b);
    }
    Ok((
        gates_ok && ratio_ok && half_ok,
        format!(
            "1000 inputs: gates in (0,1) {gates_ok}, ratio spread {worst_spread:.1e} (< 1e-10), zero-init halves exactly {half_ok}"
        ),
    ))
}

fn sgd(batch_size: usize) -> SgdConfig {
    SgdConfig {
        batch_size,
        ..SgdConfig::default()
    }
}

fn c5_overfit() -> Outcome {
    let src = source(DatasetKind::Cifar10);
    let train = src.splits.train.take(100);
    let pipe = pipeline(src, 5);
    let t = Instant::now();
    let mut state = TrainState::<f32>::new(Model::build_seeded(
        ArchConfig::new(ArchVariant::ResSeNet, 20, 10),
        5,
    )?);
    let cfg = TrainConfig::new(sgd(128), 500, 5);
    let data = TrainData {
        train: &train,
        test: None,
        pipeline: &pipe,
    };
    let out = train_loop(&mut state, &cfg, &data, &mut |_| {})?;
    let report = evaluate(&mut state.model, &train, &pipe, 100, state.iter)?;
    let secs = t.elapsed().as_secs_f64();
    Ok((
        report.top1 >= 95.0 && secs < 900.0,
        format!(
            "res-se-net-20, 100 {} samples, 500 iterations at lr 0.1: train top-1 {:.1}% (>= 95%), loss {:.3} -> {:.3}, {secs:.0} s",
            src.origin,
            report.top1,
            out.records[0].loss,
            out.records.last().expect("records").loss
        ),
    ))
}

fn c6_loss_descent() -> Outcome {
    let src = source(DatasetKind::Cifar10);
    let train = src.splits.train.take(5000);
    let pipe = pipeline(src, 6);
    let mut ok = true;
    let mut parts = Vec::new();
    let t = Instant::now();
    for v in [
        ArchVariant::Baseline,
        ArchVariant::SeResnet,
        ArchVariant::ResSeNet,
    ] {
        let mut state = TrainState::<f32>::new(Model::build_seeded(ArchConfig::new(v, 20, 10), 6)?);
        let cfg = TrainConfig::new(sgd(128), 2000, 6);
        let data = TrainData {
            train: &train,
            test: None,
            pipeline: &pipe,
        };
        let rec = train_loop(&mut state, &cfg, &data, &mut |_| {})?.records;
        let first = rec[0].loss;
        let last = rec.last().expect("records").loss;
        let tail = rec[rec.len() - 50..].iter().map(|r| r.loss).sum::<f64>() / 50.0;
        let finite = rec.iter().all(|r| r.loss.is_finite());
        let this =
            rec.len() == 2000 && last < first && tail < first && (v != ArchVariant::ResSeNet || finite);
        ok &= this;
        parts.push(format!(
            "{v} {first:.3} -> {last:.3} (last-50 mean {tail:.3}{})",
            if finite { ", finite" } else { ", NON-FINITE" }
        ));
    }
    Ok((
        ok,
        format!("{}; {:.0} s", parts.join("; "), t.elapsed().as_secs_f64()),
    ))
}

fn bits(m: &Model<f32>) -> Vec<u32> {
    m.store
        .entries()
        .iter()
        .flat_map(|e| e.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn c7_determinism() -> Outcome {
    let src = source(DatasetKind::Cifar10);
    let train = src.splits.train.take(5000);
    let pipe = pipeline(src, 7);
    let data = TrainData {
        train: &train,
        test: None,
        pipeline: &pipe,
    };
    let arch = ArchConfig::new(ArchVariant::ResSeNet, 20, 10);
    let t = Instant::now();
    let run = |budget: u64,
               state: &mut TrainState<f32>,
               dir: Option<PathBuf>|
     -> ressenet::Result<Vec<CurveRecord>> {
        let mut cfg = TrainConfig::new(sgd(128), budget, 7);
        cfg.checkpoint_dir = dir;
        Ok(train_loop(state, &cfg, &data, &mut |_| {})?.records)
    };
    let mut a = TrainState::new(Model::build_seeded(arch.clone(), 7)?);
    let mut b = TrainState::new(Model::build_seeded(arch.clone(), 7)?);
    let ra = run(200, &mut a, None)?;
    let rb = run(200, &mut b, None)?;
    let same = ra.len() == 200
        && ra
            .iter()
            .zip(&rb)
            .all(|(x, y)| x.loss.to_bits() == y.loss.to_bits());

    let dir = scratch().join("resume");
    let mut c = TrainState::new(Model::build_seeded(arch, 7)?);
    let mut rc = run(100, &mut c, Some(dir.clone()))?;
    let ckpt = ressenet::arch::Checkpoint::load(&ressenet::train::checkpoint_path(&dir, 100))?;
    let mut resumed = TrainState::<f32>::from_checkpoint(&ckpt)?;
    rc.extend(run(200, &mut resumed, None)?);
    let resumed_same = rc.len() == 200
        && rc
            .iter()
            .zip(&ra)
            .all(|(x, y)| x.iter == y.iter && x.loss.to_bits() == y.loss.to_bits())
        && bits(&resumed.model) == bits(&a.model);
    Ok((
        same && resumed_same && bits(&a.model) == bits(&b.model),
        format!(
            "two seeded 200-step runs bitwise equal: {same}; resume at 100 reproduces losses and weights bitwise: {resumed_same}; {:.0} s",
            t.elapsed().as_secs_f64()
        ),
    ))
}

fn histogram_ok(set: &Dataset, per_class: usize) -> bool {
    set.class_histogram().iter().all(|&n| n == per_class)
}

fn c8_data_pipeline() -> Outcome {
    let c10 = source(DatasetKind::Cifar10);
    let c100 = source(DatasetKind::Cifar100);
    let hist = histogram_ok(&c10.splits.train, 5000)
        && histogram_ok(&c10.splits.test, 1000)
        && histogram_ok(&c100.splits.train, 500)
        && histogram_ok(&c100.splits.test, 100);

    let plan = AugmentPlan::with_seed(8);
    let draws = 100_000u64;
    let mut cells = [0u64; 81];
    let mut flips = 0u64;
    for i in 0..draws {
        let d = plan.draw(i / 50_000, i % 50_000);
        cells[d.oy * 9 + d.ox] += 1;
        flips += u64::from(d.flip);
    }
    let expect = draws as f64 / 81.0;
    let chi2: f64 = cells.iter().map(|&n| (n as f64 - expect).powi(2) / expect).sum();
    let crop_ok = (chi2 - 80.0).abs() < 3.0 * 160f64.sqrt();
    let rate = flips as f64 / draws as f64;
    let flip_ok = (rate - 0.5).abs() < 0.005;

    let pipe = pipeline(c100, 0);
    let mut m = Model::<f32>::build_seeded(ArchConfig::new(ArchVariant::ResSeNet, 20, 100), 8)?;
    let r = evaluate(&mut m, &c100.splits.test, &pipe, 500, 0)?;
    let n = r.samples as f64;
    let band = |p: f64| 100.0 * 3.0 * (p * (1.0 - p) / n).sqrt();
    let (b1, b5) = (band(0.01), band(0.05));
    let chance = (r.top1 - 1.0).abs() <= b1 && (r.top5 - 5.0).abs() <= b5;
    Ok((
        hist && crop_ok && flip_ok && chance,
        format!(
            "{}/{} histograms exact: {hist}; crop chi2 {chi2:.1} (80 dof); flip rate {rate:.4}; untrained cifar100 top-1 {:.2}% (1 ± {b1:.2}), top-5 {:.2}% (5 ± {b5:.2})",
            c10.origin, c100.origin, r.top1, r.top5
        ),
    ))
}

fn transition_adds(v: ArchVariant) -> ressenet::Result<usize> {
    let mut m = Model::<f32>::build_seeded(ArchConfig::new(v, 20, 10), 0)?;
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f32>::zeros(&[1, 3, 32, 32]));
    m.forward(&mut tape, x, Mode::Eval)?;
    Ok(tape
        .ops()
        .filter(|(k, scope)| {
            *k == OpKind::Add && (scope.starts_with("group2.block0") || scope.starts_with("group3.block0"))
        })
        .count())
}

fn c9_structural_ablations() -> Outcome {
    let nb = transition_adds(ArchVariant::NoBridge)?;
    let base = transition_adds(ArchVariant::Baseline)?;
    let mut diffs_ok = true;
    for d in [8, 14, 20, 32, 44, 56, 110] {
        for k in [10, 100] {
            for r in [4, 16] {
                let count = |v| ressenet::arch::count_params(&ArchConfig::new(v, d, k).with_reduction(r));
                diffs_ok &=
                    count(ArchVariant::ResSeNet)? - count(ArchVariant::Baseline)? == common::bridge_se(r);
            }
        }
    }
    Ok((
        nb == 0 && base == 2 && diffs_ok,
        format!("no-bridge transition additions {nb} (baseline {base}); res-se-net minus baseline equals two bridge SE blocks at every depth: {diffs_ok}"),
    ))
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
    (1, "parameter-reduction", c1_parameter_reduction),
    (2, "depth-family-coverage", c2_family_coverage),
    (3, "gradient-suite", c3_gradient_suite),
    (4, "se-gating", c4_se_gating),
    (5, "overfit-sanity", c5_overfit),
    (6, "loss-descent", c6_loss_descent),
    (7, "determinism-checkpointing", c7_determinism),
    (8, "data-pipeline", c8_data_pipeline),
    (9, "structural-ablations", c9_structural_ablations),
];

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut total = Duration::ZERO;
    for &(n, name, f) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let dt = t.elapsed();
        total += dt;
        println!(
            "{} criterion {n} {name}: {detail} [{:.1} s]",
            if ok { "PASS" } else { "FAIL" },
            dt.as_secs_f64()
        );
        failed += usize::from(!ok);
    }
    let _ = std::fs::remove_dir_all(scratch());
    println!("acceptance: {failed} failed, {:.0} s total", total.as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
