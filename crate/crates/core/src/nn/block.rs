use rand::Rng;

use super::{BatchNorm2d, Conv2d, Ctx, ParamStore, SeBlock};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Var};

/// Where a bridge's SE block sits relative to the strided projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SePosition {
    None,
    AfterDownsample,
    BeforeDownsample,
}

/// Projection shortcut between block groups: 1x1 stride-2 conv and batch norm,
/// optionally recalibrated by an SE block.
#[derive(Clone, Debug)]
pub struct Bridge {
    pub proj: Conv2d,
    pub bn: BatchNorm2d,
    pub se: Option<SeBlock>,
    pub position: SePosition,
}

impl Bridge {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        position: SePosition,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let proj = Conv2d::new(store, &format!("{name}.proj"), c_in, c_out, 1, 2, 0, rng)?;
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), c_out)?;
        let se = match position {
            SePosition::None => None,
            SePosition::AfterDownsample => {
                Some(SeBlock::new(store, &format!("{name}.se"), c_out, reduction, rng)?)
            }
            SePosition::BeforeDownsample => {
                Some(SeBlock::new(store, &format!("{name}.se"), c_in, reduction, rng)?)
            }
        };
        Ok(Bridge {
            proj,
            bn,
            se,
            position,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        ctx.scoped("bridge", |ctx| {
            let input = match (&self.se, self.position) {
                (Some(se), SePosition::BeforeDownsample) => se.forward(ctx, x)?,
                _ => x,
            };
            let y = self.proj.forward(ctx, input)?;
            let y = self.bn.forward(ctx, y)?;
            match (&self.se, self.position) {
                (Some(se), SePosition::AfterDownsample) => se.forward(ctx, y),
                _ => Ok(y),
            }
        })
    }

    pub fn param_count(&self) -> usize {
        self.projection_param_count() + self.se.as_ref().map_or(0, SeBlock::param_count)
    }

    pub fn projection_param_count(&self) -> usize {
        self.proj.param_count() + self.bn.param_count()
    }
}

#[derive(Clone, Debug)]
pub enum Shortcut {
    /// `x` carried unchanged, optionally through an SE block.
    Identity {
        se: Option<SeBlock>,
    },
    Bridge(Bridge),
    /// No skip path: the block computes `relu(F(x))`.
    Absent,
}

/// Shortcut requested when building a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShortcutSpec {
    Identity { se: bool },
    Projection(SePosition),
    Absent,
}

/// Two 3x3 conv-BN layers with post-activation ReLU after the skip addition.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub name: String,
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    /// SE applied to the residual mapping before the addition.
    pub residual_se: Option<SeBlock>,
    pub shortcut: Shortcut,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl BasicBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        shortcut: ShortcutSpec,
        residual_se: bool,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let matches = c_in == c_out && stride == 1;
        match shortcut {
            ShortcutSpec::Identity { .. } if !matches => {
                return Err(Error::config(
                    "shortcut",
                    format!("{name}: identity skip needs equal shapes ({c_in}->{c_out}, stride {stride})"),
                ));
            }
            ShortcutSpec::Projection(_) if stride != 2 => {
                return Err(Error::config(
                    "shortcut",
                    format!("{name}: bridge projections always use stride 2"),
                ));
            }
            _ => {}
        }
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1, rng)?;
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), c_out)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng)?;
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), c_out)?;
        let residual_se = if residual_se {
            Some(SeBlock::new(
                store,
                &format!("{name}.residual_se"),
                c_out,
                reduction,
                rng,
            )?)
        } else {
            None
        };
        let shortcut = match shortcut {
            ShortcutSpec::Identity { se } => Shortcut::Identity {
                se: if se {
                    Some(SeBlock::new(
                        store,
                        &format!("{name}.skip_se"),
                        c_in,
                        reduction,
                        rng,
                    )?)
                } else {
                    None
                },
            },
            ShortcutSpec::Projection(position) => Shortcut::Bridge(Bridge::new(
                store,
                &format!("{name}.bridge"),
                c_in,
                c_out,
                position,
                reduction,
                rng,
            )?),
            ShortcutSpec::Absent => Shortcut::Absent,
        };
        Ok(BasicBlock {
            name: name.to_string(),
            conv1,
            bn1,
            conv2,
            bn2,
            residual_se,
            shortcut,
            c_in,
            c_out,
            stride,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        ctx.scoped(&self.name, |ctx| {
            let f = ctx.scoped("residual", |ctx| -> Result<Var> {
                let h = self.conv1.forward(ctx, x)?;
                let h = self.bn1.forward(ctx, h)?;
                let h = ctx.tape.relu(h);
                let h = self.conv2.forward(ctx, h)?;
                let h = self.bn2.forward(ctx, h)?;
                match &self.residual_se {
                    Some(se) => se.forward(ctx, h),
                    None => Ok(h),
                }
            })?;
            let y = match &self.shortcut {
                Shortcut::Identity { se } => {
                    let skip = match se {
                        Some(se) => ctx.scoped("skip", |ctx| se.forward(ctx, x))?,
                        None => x,
                    };
                    ctx.tape.add(f, skip)?
                }
                Shortcut::Bridge(bridge) => {
                    let skip = bridge.forward(ctx, x)?;
                    ctx.tape.add(f, skip)?
                }
                Shortcut::Absent => f,
            };
            Ok(ctx.tape.relu(y))
        })
    }

    pub fn bridge(&self) -> Option<&Bridge> {
        match &self.shortcut {
            Shortcut::Bridge(b) => Some(b),
            _ => None,
        }
    }

    /// Every SE block in the block: residual, skip and bridge.
    pub fn se_blocks(&self) -> Vec<&SeBlock> {
        let mut out: Vec<&SeBlock> = self.residual_se.iter().collect();
        match &self.shortcut {
            Shortcut::Identity { se: Some(se) } => out.push(se),
            Shortcut::Bridge(Bridge { se: Some(se), .. }) => out.push(se),
            _ => {}
        }
        out
    }

    pub fn residual_param_count(&self) -> usize {
        self.conv1.param_count() + self.bn1.param_count() + self.conv2.param_count() + self.bn2.param_count()
    }

    pub fn param_count(&self) -> usize {
        let shortcut = match &self.shortcut {
            Shortcut::Identity { se } => se.as_ref().map_or(0, SeBlock::param_count),
            Shortcut::Bridge(b) => b.param_count(),
            Shortcut::Absent => 0,
        };
        self.residual_param_count() + self.residual_se.as_ref().map_or(0, SeBlock::param_count) + shortcut
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        self.conv1.out_hw(h, w)
    }
}
