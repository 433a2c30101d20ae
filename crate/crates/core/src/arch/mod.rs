//! The 6n+2 CIFAR residual family and every variant compared against it.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BasicBlock, BatchNorm2d, Conv2d, Ctx, Linear, Mode, ParamStore, SePosition, ShortcutSpec};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub mod checkpoint;
mod summary;

pub use checkpoint::{Checkpoint, Manifest};
pub use summary::{LayerKind, LayerRow};

/// Channel widths of the three block groups.
pub const WIDTHS: [usize; 3] = [16, 32, 64];
pub const DEFAULT_REDUCTION: usize = 16;
pub const IMAGE_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchVariant {
    /// Projection bridges, no SE anywhere.
    Baseline,
    /// Transition blocks have no shortcut at all.
    NoBridge,
    /// SE on every residual mapping before the addition.
    SeResnet,
    /// SE on both bridges, after the strided projection.
    ResSeNet,
    /// SE on both bridges, before the strided projection.
    ResSeNetPreDown,
    /// `ResSeNet` plus SE on every identity skip path.
    SeAllSkips,
}

impl ArchVariant {
    pub const ALL: [ArchVariant; 6] = [
        ArchVariant::Baseline,
        ArchVariant::NoBridge,
        ArchVariant::SeResnet,
        ArchVariant::ResSeNet,
        ArchVariant::ResSeNetPreDown,
        ArchVariant::SeAllSkips,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchVariant::Baseline => "baseline",
            ArchVariant::NoBridge => "no-bridge",
            ArchVariant::SeResnet => "se-resnet",
            ArchVariant::ResSeNet => "res-se-net",
            ArchVariant::ResSeNetPreDown => "res-se-net-pre-down",
            ArchVariant::SeAllSkips => "se-all-skips",
        }
    }

    fn transition_shortcut(self) -> ShortcutSpec {
        match self {
            ArchVariant::NoBridge => ShortcutSpec::Absent,
            ArchVariant::ResSeNet | ArchVariant::SeAllSkips => {
                ShortcutSpec::Projection(SePosition::AfterDownsample)
            }
            ArchVariant::ResSeNetPreDown => ShortcutSpec::Projection(SePosition::BeforeDownsample),
            ArchVariant::Baseline | ArchVariant::SeResnet => ShortcutSpec::Projection(SePosition::None),
        }
    }
}

impl fmt::Display for ArchVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ArchVariant::ALL.iter().map(|v| v.name()).collect();
                Error::config(
                    "variant",
                    format!("unknown `{s}`, expected one of {}", names.join(", ")),
                )
            })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub variant: ArchVariant,
    pub depth: usize,
    pub num_classes: usize,
    pub reduction: usize,
}

impl ArchConfig {
    pub fn new(variant: ArchVariant, depth: usize, num_classes: usize) -> Self {
        ArchConfig {
            variant,
            depth,
            num_classes,
            reduction: DEFAULT_REDUCTION,
        }
    }

    pub fn with_reduction(mut self, r: usize) -> Self {
        self.reduction = r;
        self
    }

    pub fn validate(&self) -> Result<()> {
        validate_depth(self.depth)?;
        if self.num_classes < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        if self.reduction == 0 {
            return Err(Error::config("reduction ratio", "must be at least 1"));
        }
        Ok(())
    }

    /// Blocks per group, `n` in `depth = 6n + 2`.
    pub fn blocks_per_group(&self) -> usize {
        (self.depth - 2) / 6
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.variant, self.depth)
    }
}

pub fn validate_depth(depth: usize) -> Result<usize> {
    if depth < 8 || !(depth - 2).is_multiple_of(6) {
        return Err(Error::config(
            "depth",
            format!(
                "{depth} is not in the 6n+2 family (depth = 6n + 2 with n >= 1: 8, 14, 20, 32, 44, 56, 110, ...)"
            ),
        ));
    }
    Ok((depth - 2) / 6)
}

/// A built network: layer wiring plus its named parameter registry.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ArchConfig,
    pub store: ParamStore<T>,
    pub stem_conv: Conv2d,
    pub stem_bn: BatchNorm2d,
    pub blocks: Vec<BasicBlock>,
    pub fc: Linear,
}

impl<T: Scalar> Model<T> {
    pub fn build<R: Rng + ?Sized>(config: ArchConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let n = config.blocks_per_group();
        let r = config.reduction;
        let mut store = ParamStore::new();
        let stem_conv = Conv2d::new(&mut store, "stem.conv", 3, WIDTHS[0], 3, 1, 1, rng)?;
        let stem_bn = BatchNorm2d::new(&mut store, "stem.bn", WIDTHS[0])?;
        let mut blocks = Vec::with_capacity(3 * n);
        let mut c_in = WIDTHS[0];
        for (g, &width) in WIDTHS.iter().enumerate() {
            for b in 0..n {
                let name = format!("group{}.block{}", g + 1, b);
                let transition = c_in != width;
                let stride = if transition { 2 } else { 1 };
                let shortcut = if transition {
                    config.variant.transition_shortcut()
                } else {
                    ShortcutSpec::Identity {
                        se: config.variant == ArchVariant::SeAllSkips,
                    }
                };
                let residual_se = config.variant == ArchVariant::SeResnet;
                blocks.push(BasicBlock::new(
                    &mut store,
                    &name,
                    c_in,
                    width,
                    stride,
                    shortcut,
                    residual_se,
                    r,
                    rng,
                )?);
                c_in = width;
            }
        }
        let fc = Linear::new(&mut store, "fc", WIDTHS[2], config.num_classes, rng)?;
        Ok(Model {
            config,
            store,
            stem_conv,
            stem_bn,
            blocks,
            fc,
        })
    }

    pub fn build_seeded(config: ArchConfig, seed: u64) -> Result<Self> {
        Self::build(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Logits `[N, classes]` for an `[N, 3, 32, 32]` batch already on the tape.
    pub fn forward_ctx(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(
                "model",
                format!("expected [N, 3, H, W], got {shape:?}"),
            ));
        }
        let n = shape[0];
        let h = ctx.scoped("stem", |ctx| -> Result<Var> {
            let h = self.stem_conv.forward(ctx, x)?;
            let h = self.stem_bn.forward(ctx, h)?;
            Ok(ctx.tape.relu(h))
        })?;
        let mut h = h;
        for block in &self.blocks {
            h = block.forward(ctx, h)?;
        }
        ctx.scoped("head", |ctx| {
            let pooled = ctx.tape.global_avg_pool(h)?;
            let flat = ctx.tape.reshape(pooled, &[n, WIDTHS[2]])?;
            self.fc.forward(ctx, flat)
        })
    }

    /// Forward pass; the model's store is split off from `self` so running
    /// statistics can be updated in train mode.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut store = std::mem::take(&mut self.store);
        let out = {
            let mut ctx = Ctx::new(tape, &mut store, mode);
            self.forward_ctx(&mut ctx, x)
        };
        self.store = store;
        out
    }

    /// Eval-mode logits without recording gradients.
    pub fn logits(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.detach());
        let y = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(y).detach())
    }

    /// Train-mode loss; gradients are left in the store.
    pub fn loss_and_grads(&mut self, images: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.detach());
        let logits = self.forward(&mut tape, x, Mode::Train)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        self.store.zero_grads();
        self.store.collect_grads(&mut tape)?;
        Ok(value)
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Bridge projections in the network (two for every variant but `NoBridge`).
    pub fn bridge_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.bridge().is_some()).count()
    }

    pub fn se_count(&self) -> usize {
        self.blocks.iter().map(|b| b.se_blocks().len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut store = ParamStore::new();
        for e in self.store.entries() {
            store
                .add(&e.name, e.value.cast(), e.kind)
                .expect("names are unique");
        }
        Model {
            config: self.config.clone(),
            store,
            stem_conv: self.stem_conv.clone(),
            stem_bn: self.stem_bn.clone(),
            blocks: self.blocks.clone(),
            fc: self.fc.clone(),
        }
    }
}

/// Trainable parameter count of a configuration.
pub fn count_params(config: &ArchConfig) -> Result<usize> {
    Ok(Model::<f32>::build_seeded(config.clone(), 0)?.param_count())
}

/// Percentage by which `a` has fewer parameters than `b`: `100 * (1 - |a| / |b|)`.
pub fn reduction_report(a: &ArchConfig, b: &ArchConfig) -> Result<f64> {
    let ca = count_params(a)? as f64;
    let cb = count_params(b)? as f64;
    Ok(100.0 * (1.0 - ca / cb))
}
