use rand::Rng;

use super::{Ctx, Linear, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Var};

/// Hidden width of the excitation bottleneck: `max(1, floor(channels / r))`.
pub fn se_hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// Squeeze-and-excitation: global pooling, a reduce/expand bottleneck and a
/// sigmoid gate that rescales each channel.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub reduce: Linear,
    pub expand: Linear,
    pub channels: usize,
    pub hidden: usize,
    pub reduction: usize,
}

impl SeBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::config("reduction ratio", "must be at least 1"));
        }
        let hidden = se_hidden_width(channels, reduction);
        Ok(SeBlock {
            reduce: Linear::new(store, &format!("{name}.reduce"), channels, hidden, rng)?,
            expand: Linear::new(store, &format!("{name}.expand"), hidden, channels, rng)?,
            channels,
            hidden,
            reduction,
        })
    }

    /// Per-channel gate `s` of shape `[N, C, 1, 1]`, every entry in (0, 1).
    pub fn excitation<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(
                "se_forward",
                format!("block expects {} channels, got {shape:?}", self.channels),
            ));
        }
        let n = shape[0];
        let squeezed = ctx.tape.global_avg_pool(x)?;
        let flat = ctx.tape.reshape(squeezed, &[n, self.channels])?;
        let h = self.reduce.forward(ctx, flat)?;
        let h = ctx.tape.relu(h);
        let logits = self.expand.forward(ctx, h)?;
        let gate = ctx.tape.sigmoid(logits);
        ctx.tape.reshape(gate, &[n, self.channels, 1, 1])
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        ctx.scoped("se", |ctx| {
            let s = self.excitation(ctx, x)?;
            ctx.tape.scale_channels(x, s)
        })
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count() + self.expand.param_count()
    }
}
