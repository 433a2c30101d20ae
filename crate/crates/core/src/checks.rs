//! Named finite-difference gradient checks over every primitive, every block
//! variant and one end-to-end network, all in double precision.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchConfig, ArchVariant, Model};
use crate::error::Result;
use crate::nn::{BasicBlock, Ctx, Mode, ParamKind, ParamStore, SeBlock, SePosition, ShortcutSpec};
use crate::tensor::gradcheck::{
    grad_check, grad_check_fn, grad_check_fn_with_kinks, grad_check_multi, GradCheckReport,
};
use crate::tensor::{kernels, BnMode, Tape, Tensor, Var};

/// Finite-difference step used by every case.
pub const EPS: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

/// Which coordinates of each trainable tensor to probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coords {
    All,
    /// `total` scalars drawn uniformly over all trainable parameters, plus
    /// one random coordinate from every trainable tensor.
    Subsample {
        total: usize,
    },
}

/// Gradient check of `loss` with respect to the trainable entries of `store`.
///
/// `loss` is rebuilt from scratch for every probe on a fresh copy of the
/// store, in train mode.
pub fn grad_check_params<F, R>(
    store: &ParamStore<f64>,
    loss: F,
    coords: Coords,
    eps: f64,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let run = |st: &mut ParamStore<f64>, track: bool| -> Result<(f64, Tape<f64>, Var)> {
        let mut tape = Tape::new();
        let out = {
            let mut ctx = Ctx::new(&mut tape, st, Mode::Train);
            ctx.track_grads = track;
            loss(&mut ctx)?
        };
        Ok((tape.value(out).item(), tape, out))
    };

    let mut analytic = store.clone();
    let (_, mut tape, out) = run(&mut analytic, true)?;
    tape.backward(out)?;
    analytic.zero_grads();
    analytic.collect_grads(&mut tape)?;

    let trainable: Vec<_> = store
        .ids()
        .filter(|&id| store.entries()[id.index()].kind == ParamKind::Trainable)
        .collect();
    let mut picks: Vec<Vec<usize>> = trainable
        .iter()
        .map(|&id| match coords {
            Coords::All => (0..store.get(id).numel()).collect(),
            Coords::Subsample { .. } => vec![rng.random_range(0..store.get(id).numel())],
        })
        .collect();
    if let Coords::Subsample { total } = coords {
        let sizes: Vec<usize> = trainable.iter().map(|&id| store.get(id).numel()).collect();
        let all: usize = sizes.iter().sum();
        for flat in sample(rng, all, total.min(all)) {
            let mut rest = flat;
            for (t, &n) in sizes.iter().enumerate() {
                if rest < n {
                    if !picks[t].contains(&rest) {
                        picks[t].push(rest);
                    }
                    break;
                }
                rest -= n;
            }
        }
    }

    let mut report = GradCheckReport::default();
    for (&id, coords) in trainable.iter().zip(&picks) {
        let value = store.get(id);
        let grad = analytic
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; value.numel()]);
        let r = grad_check_fn_with_kinks(
            |probe| {
                let mut st = store.clone();
                st.get_mut(id).data_mut().copy_from_slice(probe);
                let (loss, tape, _) = run(&mut st, false)?;
                Ok((loss, tape.relu_fingerprint()))
            },
            value.data(),
            &grad,
            eps,
            Some(coords),
        )?;
        report = report.merge(r);
    }
    Ok(report)
}

/// One named check.
#[derive(Clone, Copy, Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    run: fn(&mut ChaCha8Rng) -> Result<GradCheckReport>,
    /// Expected to fail; excluded from the default suite.
    pub fixture: bool,
}

#[derive(Clone, Debug)]
pub struct CaseOutcome {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

impl GradCase {
    pub fn run(&self, seed: u64) -> Result<CaseOutcome> {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let report = (self.run)(&mut rng)?;
        Ok(CaseOutcome {
            name: self.name,
            tolerance: self.tolerance,
            report,
            elapsed: start.elapsed(),
        })
    }
}

const fn case(name: &'static str, run: fn(&mut ChaCha8Rng) -> Result<GradCheckReport>) -> GradCase {
    GradCase {
        name,
        tolerance: PRIMITIVE_TOL,
        run,
        fixture: false,
    }
}

const CASES: &[GradCase] = &[
    case("conv2d-k3-s1-p1", |r| conv_case(r, 3, 1, 1)),
    case("conv2d-k3-s2-p1", |r| conv_case(r, 3, 2, 1)),
    case("conv2d-k1-s2-p0", |r| conv_case(r, 1, 2, 0)),
    case("relu", relu_case),
    case("sigmoid", sigmoid_case),
    case("global-avg-pool", gap_case),
    case("avg-pool", avg_pool_case),
    case("fully-connected", linear_case),
    case("batch-norm-train", |r| bn_case(r, true)),
    case("batch-norm-eval", |r| bn_case(r, false)),
    case("add", add_case),
    case("scale-channels", scale_case),
    case("softmax-cross-entropy", xent_case),
    case("fan-out", fan_out_case),
    case("se-block", se_case),
    case("block-identity", |r| {
        block_case(r, ShortcutSpec::Identity { se: false }, false)
    }),
    case("block-identity-skip-se", |r| {
        block_case(r, ShortcutSpec::Identity { se: true }, false)
    }),
    case("block-residual-se", |r| {
        block_case(r, ShortcutSpec::Identity { se: false }, true)
    }),
    case("block-bridge", |r| {
        block_case(r, ShortcutSpec::Projection(SePosition::None), false)
    }),
    case("block-bridge-se-after", |r| {
        block_case(r, ShortcutSpec::Projection(SePosition::AfterDownsample), false)
    }),
    case("block-bridge-se-before", |r| {
        block_case(r, ShortcutSpec::Projection(SePosition::BeforeDownsample), false)
    }),
    case("block-bridge-residual-se", |r| {
        block_case(r, ShortcutSpec::Projection(SePosition::None), true)
    }),
    case("block-no-bridge", |r| block_case(r, ShortcutSpec::Absent, false)),
    GradCase {
        name: "end-to-end-res-se-net-20",
        tolerance: END_TO_END_TOL,
        run: end_to_end_case,
        fixture: false,
    },
    GradCase {
        name: "fixture-wrong-backward",
        tolerance: PRIMITIVE_TOL,
        run: wrong_backward_case,
        fixture: true,
    },
];

/// The default suite, in run order.
pub fn suite() -> impl Iterator<Item = &'static GradCase> {
    CASES.iter().filter(|c| !c.fixture)
}

/// Any case by name, fixtures included.
pub fn find(name: &str) -> Option<&'static GradCase> {
    CASES.iter().find(|c| c.name == name)
}

pub fn case_names() -> impl Iterator<Item = &'static str> {
    CASES.iter().map(|c| c.name)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random linear functional of `y`, so no gradient cancels by symmetry.
fn probe_loss(tape: &mut Tape<f64>, y: Var, coeffs: &Tensor<f64>) -> Result<Var> {
    tape.dot(y, coeffs)
}

fn conv_case(rng: &mut ChaCha8Rng, k: usize, stride: usize, pad: usize) -> Result<GradCheckReport> {
    let x = uniform(rng, &[2, 3, 7, 7], -1.0, 1.0);
    let w = uniform(rng, &[4, 3, k, k], -1.0, 1.0);
    let ho = kernels::conv_out_extent(7, k, stride, pad).expect("valid geometry");
    let c = uniform(rng, &[2, 4, ho, ho], -1.0, 1.0);
    grad_check_multi(
        |t, v| {
            let y = t.conv2d(v[0], v[1], stride, pad)?;
            probe_loss(t, y, &c)
        },
        &[x, w],
        EPS,
    )
}

fn relu_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = uniform(rng, &[3, 4, 5], -1.0, 1.0);
    let c = uniform(rng, &[3, 4, 5], -1.0, 1.0);
    grad_check(
        |t, x| {
            let y = t.relu(x);
            probe_loss(t, y, &c)
        },
        &x,
        EPS,
    )
}

fn sigmoid_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = uniform(rng, &[3, 4, 5], -6.0, 6.0);
    let c = uniform(rng, &[3, 4, 5], -1.0, 1.0);
    grad_check(
        |t, x| {
            let y = t.sigmoid(x);
            probe_loss(t, y, &c)
        },
        &x,
        EPS,
    )
}

fn gap_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = uniform(rng, &[2, 3, 4, 5], -1.0, 1.0);
    let c = uniform(rng, &[2, 3, 1, 1], -1.0, 1.0);
    grad_check(
        |t, x| {
            let y = t.global_avg_pool(x)?;
            probe_loss(t, y, &c)
        },
        &x,
        EPS,
    )
}

fn avg_pool_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = uniform(rng, &[2, 3, 4, 6], -1.0, 1.0);
    let c = uniform(rng, &[2, 3, 2, 3], -1.0, 1.0);
    grad_check(
        |t, x| {
            let y = t.avg_pool(x, 2)?;
            probe_loss(t, y, &c)
        },
        &x,
        EPS,
    )
}

fn linear_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = uniform(rng, &[4, 7], -1.0, 1.0);
    let w = uniform(rng, &[3, 7], -1.0, 1.0);
    let b = uniform(rng, &[3], -1.0, 1.0);
    let c = uniform(rng, &[4, 3], -1.0, 1.0);
    grad_check_multi(
        |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            probe_loss(t, y, &c)
        },
        &[x, w, b],
        EPS,
    )
}

fn bn_case(rng: &mut ChaCha8Rng, train: bool) -> Result<GradCheckReport> {
    let x = uniform(rng, &[3, 2, 3, 4], -2.0, 2.0);
    let gamma = uniform(rng, &[2], 0.5, 1.5);
    let beta = uniform(rng, &[2], -0.5, 0.5);
    let c = uniform(rng, &[3, 2, 3, 4], -1.0, 1.0);
    let (rm, rv) = (vec![0.3, -0.2], vec![1.5, 0.7]);
    grad_check_multi(
        |t, v| {
            let (mut m, mut s) = (rm.clone(), rv.clone());
            let mode = if train {
                BnMode::Train {
                    running_mean: &mut m,
                    running_var: &mut s,
                    momentum: 0.1,
                }
            } else {
                BnMode::Eval {
                    running_mean: &m,
                    running_var: &s,
                }
            };
            let y = t.batch_norm(v[0], v[1], v[2], mode, 1e-5)?;
            probe_loss(t, y, &c)
        },
        &[x, gamma, beta],
        EPS,
    )
}

fn add_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let a = uniform(rng, &[2, 3, 4], -1.0, 1.0);
    let b = uniform(rng, &[2, 3, 4], -1.0, 1.0);
    let c = uniform(rng, &[2, 3, 4], -1.0, 1.0);
    grad_check_multi(
        |t, v| {
            let y = t.add(v[0], v[1])?;
            probe_loss(t, y, &c)
        },
        &[a, b],
        EPS,
    )
}

fn scale_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = uniform(rng, &[2, 3, 4, 4], -1.0, 1.0);
    let s = uniform(rng, &[2, 3, 1, 1], 0.1, 0.9);
    let c = uniform(rng, &[2, 3, 4, 4], -1.0, 1.0);
    grad_check_multi(
        |t, v| {
            let y = t.scale_channels(v[0], v[1])?;
            probe_loss(t, y, &c)
        },
        &[x, s],
        EPS,
    )
}

fn xent_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let logits = uniform(rng, &[4, 10], -3.0, 3.0);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..10)).collect();
    grad_check(|t, x| t.softmax_cross_entropy(x, &labels), &logits, EPS)
}

fn fan_out_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = uniform(rng, &[2, 3, 4, 4], -1.0, 1.0);
    let c = uniform(rng, &[2, 3, 4, 4], -1.0, 1.0);
    grad_check(
        |t, x| {
            let s = t.sigmoid(x);
            let r = t.relu(x);
            let a = t.add(s, r)?;
            let y = t.add(a, x)?;
            probe_loss(t, y, &c)
        },
        &x,
        EPS,
    )
}

/// Moves BN affine terms and biases away from their initial constants.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for e in store.entries_mut() {
        if e.kind != ParamKind::Trainable {
            continue;
        }
        let (lo, hi) = if e.name.ends_with(".gamma") {
            (0.5, 1.5)
        } else if e.name.ends_with(".beta") || e.name.ends_with(".bias") {
            (-0.5, 0.5)
        } else {
            continue;
        };
        for v in e.value.data_mut() {
            *v = rng.random_range(lo..hi);
        }
    }
}

/// Parameter and input checks of one module on a fixed random input.
fn module_check<F>(
    rng: &mut ChaCha8Rng,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    out_shape: &[usize],
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>,
{
    let c = uniform(rng, out_shape, -1.0, 1.0);
    let params = grad_check_params(
        store,
        |ctx| {
            let xv = ctx.tape.leaf(x.detach());
            let y = forward(ctx, xv)?;
            ctx.tape.dot(y, &c)
        },
        Coords::All,
        EPS,
        rng,
    )?;
    let input = grad_check(
        |tape, xv| {
            let mut st = store.clone();
            let mut ctx = Ctx::new(tape, &mut st, Mode::Train);
            ctx.track_grads = false;
            let y = forward(&mut ctx, xv)?;
            ctx.tape.dot(y, &c)
        },
        x,
        EPS,
    )?;
    Ok(params.merge(input))
}

fn se_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let se = SeBlock::new(&mut store, "se", 8, 2, rng)?;
    jitter(&mut store, rng);
    let x = uniform(rng, &[2, 8, 3, 3], -1.0, 1.0);
    module_check(rng, &store, &x, &[2, 8, 3, 3], |ctx, x| se.forward(ctx, x))
}

fn block_case(rng: &mut ChaCha8Rng, shortcut: ShortcutSpec, residual_se: bool) -> Result<GradCheckReport> {
    let transition = !matches!(shortcut, ShortcutSpec::Identity { .. });
    let (c_in, c_out, stride) = if transition { (4, 8, 2) } else { (4, 4, 1) };
    let mut store = ParamStore::new();
    let block = BasicBlock::new(
        &mut store,
        "block",
        c_in,
        c_out,
        stride,
        shortcut,
        residual_se,
        2,
        rng,
    )?;
    jitter(&mut store, rng);
    let x = uniform(rng, &[2, c_in, 6, 6], -1.0, 1.0);
    let ho = 6 / stride;
    module_check(rng, &store, &x, &[2, c_out, ho, ho], |ctx, x| {
        block.forward(ctx, x)
    })
}

fn end_to_end_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let config = ArchConfig::new(ArchVariant::ResSeNet, 20, 10);
    let model = Model::<f64>::build(config, rng)?;
    let x = uniform(rng, &[2, 3, 32, 32], -1.0, 1.0);
    let labels = [rng.random_range(0..10), rng.random_range(0..10)];
    grad_check_params(
        &model.store,
        |ctx| {
            let xv = ctx.tape.leaf(x.detach());
            let logits = model.forward_ctx(ctx, xv)?;
            ctx.tape.softmax_cross_entropy(logits, &labels)
        },
        Coords::Subsample { total: 50 },
        EPS,
        rng,
    )
}

/// Sigmoid checked against the derivative `s` instead of `s (1 - s)`; the
/// checker must flag it.
fn wrong_backward_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
    let wrong: Vec<f64> = x.iter().map(|&v| kernels::sigmoid(v)).collect();
    grad_check_fn(
        |p| Ok(p.iter().map(|&v| kernels::sigmoid(v)).sum()),
        &x,
        &wrong,
        EPS,
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_fixture_hidden() {
        let mut names: Vec<_> = case_names().collect();
        names.sort_unstable();
        let n = names.len();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(suite().all(|c| c.name != "fixture-wrong-backward"));
        assert!(find("fixture-wrong-backward").is_some());
    }

    #[test]
    fn wrong_backward_is_detected() {
        let out = find("fixture-wrong-backward").unwrap().run(0).unwrap();
        assert!(!out.passed(), "{:?}", out.report);
    }
}
