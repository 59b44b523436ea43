//! Parameterized building blocks shared by the attention blocks and models.

use rand::Rng;

use crate::engine::{ParamId, ParamKind, ParamStore, Real, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::StreamRng;

/// Everything a forward pass touches besides the input.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a mut ParamStore<T>,
    pub training: bool,
    /// Source of dropout and DropBlock masks.
    pub rng: &'a mut StreamRng,
}

impl<T: Real> Ctx<'_, T> {
    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// He-normal initialization for a layer with the given fan-in.
fn kaiming<T: Real>(shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming(&[out_c, in_c, kernel, kernel], fan_in, rng),
            ParamKind::Trainable,
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_c]), ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.add(
                format!("{name}.weight"),
                kaiming(&[fan_out, fan_in], fan_in, rng),
                ParamKind::Trainable,
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), ParamKind::Trainable)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.linear(x, w, Some(b))
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamKind::Trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Trainable)?,
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            )?,
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::ones(&[channels]),
                ParamKind::Buffer,
            )?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if !ctx.training {
            let mean = ctx.store.get(self.running_mean).data().to_vec();
            let var = ctx.store.get(self.running_var).data().to_vec();
            return ctx.tape.batch_norm_eval(x, gamma, beta, &mean, &var);
        }
        let (y, stats) = ctx.tape.batch_norm_train(x, gamma, beta)?;
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - m;
        // running variance tracks the unbiased estimate
        let unbias = if stats.count > 1 {
            T::from_usize(stats.count).unwrap() / T::from_usize(stats.count - 1).unwrap()
        } else {
            T::one()
        };
        for (r, &b) in ctx.store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in ctx.store.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b * unbias;
        }
        Ok(y)
    }
}

/// Inverted dropout; identity outside training.
pub fn dropout<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, rate: f64) -> Result<Var> {
    if !ctx.training || rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let scale = T::from_f64_lossy(1.0 / keep);
    let shape = ctx.tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<T> = (0..n)
        .map(|_| if ctx.rng.random_bool(keep) { scale } else { T::zero() })
        .collect();
    let mask = ctx.tape.constant(Tensor::new(&shape, mask)?);
    ctx.tape.mul(x, mask)
}
