use rand::Rng;

use super::{he_init, Ctx, Mode, ParamId, ParamKind, ParamStore};
use crate::error::Result;
use crate::tensor::{BnMode, Scalar, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Bias-free square-kernel convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = [c_out, c_in, kernel, kernel];
        let w = he_init(&shape, c_in * kernel * kernel, rng)?;
        let weight = store.add(&format!("{name}.weight"), w, ParamKind::Trainable)?;
        Ok(Conv2d {
            weight,
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        ctx.tape.conv2d(x, w, self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |s: usize| (s + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let c = [channels];
        Ok(BatchNorm2d {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&c), ParamKind::Trainable)?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&c), ParamKind::Trainable)?,
            running_mean: store.add(
                &format!("{name}.running_mean"),
                Tensor::zeros(&c),
                ParamKind::Buffer,
            )?,
            running_var: store.add(
                &format!("{name}.running_var"),
                Tensor::ones(&c),
                ParamKind::Buffer,
            )?,
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let eps = T::from_f64_lossy(BN_EPS);
        match ctx.mode {
            Mode::Train => {
                let (mean, var) = ctx.store.pair_mut(self.running_mean, self.running_var);
                let mode = BnMode::Train {
                    running_mean: mean.data_mut(),
                    running_var: var.data_mut(),
                    momentum: T::from_f64_lossy(BN_MOMENTUM),
                };
                ctx.tape.batch_norm(x, gamma, beta, mode, eps)
            }
            Mode::Eval => {
                let mode = BnMode::Eval {
                    running_mean: ctx.store.get(self.running_mean).data(),
                    running_var: ctx.store.get(self.running_var).data(),
                };
                ctx.tape.batch_norm(x, gamma, beta, mode, eps)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Fully connected layer with bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = he_init(&[d_out, d_in], d_in, rng)?;
        Ok(Linear {
            weight: store.add(&format!("{name}.weight"), w, ParamKind::Trainable)?,
            bias: store.add(
                &format!("{name}.bias"),
                Tensor::zeros(&[d_out]),
                ParamKind::Trainable,
            )?,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.d_out * self.d_in + self.d_out
    }
}
