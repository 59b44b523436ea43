//! Channel and spatial attention blocks.
//!
//! * [`SeBlock`]: squeeze-excitation channel gating.
//! * [`CoordAttnBlock`]: coordinate attention with separate row and column
//!   gates.
//! * [`CbamBlock`]: sequential channel-then-spatial attention.
//! * [`BalancedAttnBlock`]: convex combination of coordinate attention and
//!   squeeze-excitation, `σ(α)·CoordAttn(x) + (1 − σ(α))·SE(x)`, with a
//!   learnable scalar `α`.

use crate::engine::{sigmoid, ParamId, ParamKind, ParamStore, PoolAxis, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, Ctx};
use crate::rng::StreamRng;

pub const SE_REDUCTION: usize = 16;
pub const COORD_REDUCTION: usize = 8;
pub const CBAM_REDUCTION: usize = 16;
pub const CBAM_SPATIAL_KERNEL: usize = 7;

/// Bottleneck width, never below one channel.
pub fn bottleneck(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

fn check_channels<T: Real>(ctx: &Ctx<'_, T>, x: Var, channels: usize, block: &str) -> Result<()> {
    let shape = ctx.tape.shape(x);
    if shape.len() != 4 || shape[1] != channels {
        return Err(Error::shape(format!(
            "{block} built for {channels} channels received input of shape {shape:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SeBlock {
    pub channels: usize,
    pub reduction: usize,
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl SeBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let hidden = bottleneck(channels, reduction);
        Ok(SeBlock {
            channels,
            reduction,
            fc1: Conv2d::new(store, &format!("{name}.fc1"), channels, hidden, 1, 1, 0, true, rng)?,
            fc2: Conv2d::new(store, &format!("{name}.fc2"), hidden, channels, 1, 1, 0, true, rng)?,
        })
    }

    /// Per-channel gate `σ(FC₂(ReLU(FC₁(GAP(x)))))`, shape `b×c×1×1`.
    pub fn gate<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_channels(ctx, x, self.channels, "SE block")?;
        let squeezed = ctx.tape.global_avg_pool(x)?;
        let h = self.fc1.forward(ctx, squeezed)?;
        let h = ctx.tape.relu(h);
        let h = self.fc2.forward(ctx, h)?;
        Ok(ctx.tape.sigmoid(h))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = self.gate(ctx, x)?;
        ctx.tape.mul_broadcast(x, g)
    }
}

#[derive(Clone, Debug)]
pub struct CoordAttnBlock {
    pub channels: usize,
    pub reduction: usize,
    /// Shared 1×1 transform over the concatenated row/column descriptors.
    pub transform: Conv2d,
    pub bn: BatchNorm2d,
    pub proj_h: Conv2d,
    pub proj_w: Conv2d,
}

impl CoordAttnBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let mid = bottleneck(channels, reduction);
        Ok(CoordAttnBlock {
            channels,
            reduction,
            transform: Conv2d::new(store, &format!("{name}.transform"), channels, mid, 1, 1, 0, true, rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), mid)?,
            proj_h: Conv2d::new(store, &format!("{name}.proj_h"), mid, channels, 1, 1, 0, true, rng)?,
            proj_w: Conv2d::new(store, &format!("{name}.proj_w"), mid, channels, 1, 1, 0, true, rng)?,
        })
    }

    pub fn mid_channels(&self) -> usize {
        bottleneck(self.channels, self.reduction)
    }

    /// Row gate `b×c×H×1` and column gate `b×c×1×W`.
    pub fn gates<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        check_channels(ctx, x, self.channels, "coordinate attention")?;
        let (b, c, h, w) = ctx.tape.value(x).dims4()?;
        let z_h = ctx.tape.directional_pool(x, PoolAxis::Height)?;
        let z_w = ctx.tape.directional_pool(x, PoolAxis::Width)?;
        let z_w = ctx.tape.reshape(z_w, &[b, c, w, 1])?;
        let joint = ctx.tape.concat(&[z_h, z_w], 2)?;
        let y = self.transform.forward(ctx, joint)?;
        let y = self.bn.forward(ctx, y)?;
        let y = ctx.tape.relu(y);
        let mid = self.mid_channels();
        let y_h = ctx.tape.slice(y, 2, 0, h)?;
        let y_w = ctx.tape.slice(y, 2, h, w)?;
        let y_w = ctx.tape.reshape(y_w, &[b, mid, 1, w])?;
        let g_h = self.proj_h.forward(ctx, y_h)?;
        let g_h = ctx.tape.sigmoid(g_h);
        let g_w = self.proj_w.forward(ctx, y_w)?;
        let g_w = ctx.tape.sigmoid(g_w);
        Ok((g_h, g_w))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g_h, g_w) = self.gates(ctx, x)?;
        let y = ctx.tape.mul_broadcast(x, g_h)?;
        ctx.tape.mul_broadcast(y, g_w)
    }
}

#[derive(Clone, Debug)]
pub struct CbamBlock {
    pub channels: usize,
    pub reduction: usize,
    /// Hidden layer of the shared MLP; bias-free.
    pub mlp_fc1: Conv2d,
    pub mlp_fc2: Conv2d,
    pub spatial: Conv2d,
}

impl CbamBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let hidden = bottleneck(channels, reduction);
        let k = CBAM_SPATIAL_KERNEL;
        Ok(CbamBlock {
            channels,
            reduction,
            mlp_fc1: Conv2d::new(store, &format!("{name}.mlp.fc1"), channels, hidden, 1, 1, 0, false, rng)?,
            mlp_fc2: Conv2d::new(store, &format!("{name}.mlp.fc2"), hidden, channels, 1, 1, 0, true, rng)?,
            spatial: Conv2d::new(store, &format!("{name}.spatial"), 2, 1, k, 1, k / 2, true, rng)?,
        })
    }

    fn mlp<T: Real>(&self, ctx: &mut Ctx<'_, T>, v: Var) -> Result<Var> {
        let h = self.mlp_fc1.forward(ctx, v)?;
        let h = ctx.tape.relu(h);
        self.mlp_fc2.forward(ctx, h)
    }

    /// `σ(MLP(AvgPool(x)) + MLP(MaxPool(x)))`, shape `b×c×1×1`.
    pub fn channel_gate<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_channels(ctx, x, self.channels, "CBAM block")?;
        let avg = ctx.tape.global_avg_pool(x)?;
        let max = ctx.tape.global_max_pool(x)?;
        let a = self.mlp(ctx, avg)?;
        let m = self.mlp(ctx, max)?;
        let s = ctx.tape.add(a, m)?;
        Ok(ctx.tape.sigmoid(s))
    }

    /// `σ(Conv₇ₓ₇([AvgPool_c(x); MaxPool_c(x)]))`, shape `b×1×H×W`.
    pub fn spatial_gate<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let avg = ctx.tape.channel_mean(x)?;
        let max = ctx.tape.channel_max(x)?;
        let both = ctx.tape.concat(&[avg, max], 1)?;
        let s = self.spatial.forward(ctx, both)?;
        Ok(ctx.tape.sigmoid(s))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let fc = self.channel_gate(ctx, x)?;
        let x1 = ctx.tape.mul_broadcast(x, fc)?;
        let fs = self.spatial_gate(ctx, x1)?;
        ctx.tape.mul_broadcast(x1, fs)
    }
}

#[derive(Clone, Debug)]
pub struct BalancedAttnBlock {
    pub coord: CoordAttnBlock,
    pub se: SeBlock,
    /// Learnable fusion logit; `σ(alpha)` weights the coordinate path.
    pub alpha: ParamId,
}

impl BalancedAttnBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut StreamRng) -> Result<Self> {
        Ok(BalancedAttnBlock {
            coord: CoordAttnBlock::new(store, &format!("{name}.coord"), channels, COORD_REDUCTION, rng)?,
            se: SeBlock::new(store, &format!("{name}.se"), channels, SE_REDUCTION, rng)?,
            alpha: store.add(format!("{name}.alpha"), Tensor::zeros(&[1]), ParamKind::Trainable)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let spatial = self.coord.forward(ctx, x)?;
        let spectral = self.se.forward(ctx, x)?;
        let alpha = ctx.param(self.alpha);
        let w_spatial = ctx.tape.sigmoid(alpha);
        let w_spectral = ctx.tape.one_minus(w_spatial);
        let a = ctx.tape.mul_scalar(spatial, w_spatial)?;
        let b = ctx.tape.mul_scalar(spectral, w_spectral)?;
        ctx.tape.add(a, b)
    }

    /// Raw fusion logit `α`.
    pub fn alpha<T: Real>(&self, store: &ParamStore<T>) -> f64 {
        store.get(self.alpha).data()[0].to_f64().unwrap_or(f64::NAN)
    }

    /// Weight of the spatial (coordinate attention) path, `σ(α)`.
    pub fn fusion_weight<T: Real>(&self, store: &ParamStore<T>) -> f64 {
        sigmoid(self.alpha(store))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tape;
    use crate::rng;

    fn run<F>(store: &mut ParamStore<f64>, x: &Tensor<f64>, f: F) -> Result<Tensor<f64>>
    where
        F: Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut r = rng::stream(0, "test");
        let mut ctx = Ctx {
            tape: &mut tape,
            store,
            training: false,
            rng: &mut r,
        };
        let y = f(&mut ctx, xv)?;
        Ok(tape.value(y).clone())
    }

    fn zero_weights(store: &mut ParamStore<f64>) {
        for id in store.trainable_ids() {
            if !store.param(id).name().ends_with("gamma") {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut r = rng::stream(1, "t");
        let mut s = ParamStore::new();
        let se = SeBlock::new(&mut s, "se", 8, SE_REDUCTION, &mut r).unwrap();
        let coord = CoordAttnBlock::new(&mut s, "coord", 8, COORD_REDUCTION, &mut r).unwrap();
        let cbam = CbamBlock::new(&mut s, "cbam", 8, CBAM_REDUCTION, &mut r).unwrap();
        let bal = BalancedAttnBlock::new(&mut s, "bal", 8, &mut r).unwrap();
        for id in s.trainable_ids() {
            if s.param(id).name().ends_with("bias") {
                s.get_mut(id).data_mut().fill(0.0);
            }
        }
        let x = Tensor::zeros(&[2, 8, 5, 4]);
        let outs = [
            run(&mut s, &x, |c, v| se.forward(c, v)).unwrap(),
            run(&mut s, &x, |c, v| coord.forward(c, v)).unwrap(),
            run(&mut s, &x, |c, v| cbam.forward(c, v)).unwrap(),
            run(&mut s, &x, |c, v| bal.forward(c, v)).unwrap(),
        ];
        for y in outs {
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_weights_give_half_gates() {
        let mut r = rng::stream(2, "t");
        let mut s = ParamStore::new();
        let se = SeBlock::new(&mut s, "se", 6, SE_REDUCTION, &mut r).unwrap();
        let coord = CoordAttnBlock::new(&mut s, "coord", 6, COORD_REDUCTION, &mut r).unwrap();
        zero_weights(&mut s);
        let x = Tensor::randn(&[2, 6, 3, 5], 1.0, &mut r);
        let half: Vec<f64> = x.data().iter().map(|v| 0.5 * v).collect();
        let quarter: Vec<f64> = x.data().iter().map(|v| 0.25 * v).collect();
        assert!(close(run(&mut s, &x, |c, v| se.forward(c, v)).unwrap().data(), &half, 1e-15));
        assert!(close(run(&mut s, &x, |c, v| coord.forward(c, v)).unwrap().data(), &quarter, 1e-15));
    }

    #[test]
    fn gate_shapes_and_ranges() {
        let mut r = rng::stream(3, "t");
        let mut s = ParamStore::new();
        let cbam = CbamBlock::new(&mut s, "cbam", 8, CBAM_REDUCTION, &mut r).unwrap();
        let coord = CoordAttnBlock::new(&mut s, "coord", 8, COORD_REDUCTION, &mut r).unwrap();
        let x = Tensor::randn(&[2, 8, 5, 6], 3.0, &mut r);
        let cg = run(&mut s, &x, |c, v| cbam.channel_gate(c, v)).unwrap();
        let sg = run(&mut s, &x, |c, v| cbam.spatial_gate(c, v)).unwrap();
        assert_eq!(cg.shape(), &[2, 8, 1, 1]);
        assert_eq!(sg.shape(), &[2, 1, 5, 6]);
        let gh = run(&mut s, &x, |c, v| Ok(coord.gates(c, v)?.0)).unwrap();
        let gw = run(&mut s, &x, |c, v| Ok(coord.gates(c, v)?.1)).unwrap();
        assert_eq!(gh.shape(), &[2, 8, 5, 1]);
        assert_eq!(gw.shape(), &[2, 8, 1, 6]);
        for g in [cg, sg, gh, gw] {
            assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn constant_map_gives_uniform_spatial_gate() {
        let mut r = rng::stream(4, "t");
        let mut s = ParamStore::new();
        let cbam = CbamBlock::new(&mut s, "cbam", 4, CBAM_REDUCTION, &mut r).unwrap();
        let vals = [0.3, -1.2, 2.0, 0.7];
        let data: Vec<f64> = vals.iter().flat_map(|&v| std::iter::repeat_n(v, 9 * 9)).collect();
        let x = Tensor::new(&[1, 4, 9, 9], data).unwrap();
        // the padded border differs, so only positions whose 7×7 window
        // lies inside the map are uniform
        let x1 = run(&mut s, &x, |c, v| {
            let g = cbam.channel_gate(c, v)?;
            c.tape.mul_broadcast(v, g)
        })
        .unwrap();
        let sg = run(&mut s, &x1, |c, v| cbam.spatial_gate(c, v)).unwrap();
        let inner: Vec<f64> = (3..6).flat_map(|i| (3..6).map(move |j| (i, j))).map(|(i, j)| sg.data()[i * 9 + j]).collect();
        assert!(inner.iter().all(|&v| (v - inner[0]).abs() < 1e-12));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut r = rng::stream(5, "t");
        let mut s = ParamStore::new();
        let se = SeBlock::new(&mut s, "se", 8, SE_REDUCTION, &mut r).unwrap();
        let coord = CoordAttnBlock::new(&mut s, "coord", 8, COORD_REDUCTION, &mut r).unwrap();
        let cbam = CbamBlock::new(&mut s, "cbam", 8, CBAM_REDUCTION, &mut r).unwrap();
        let x = Tensor::zeros(&[1, 4, 3, 3]);
        assert!(matches!(run(&mut s, &x, |c, v| se.forward(c, v)), Err(Error::Shape(_))));
        assert!(matches!(run(&mut s, &x, |c, v| coord.forward(c, v)), Err(Error::Shape(_))));
        assert!(matches!(run(&mut s, &x, |c, v| cbam.forward(c, v)), Err(Error::Shape(_))));
    }

    #[test]
    fn bottleneck_never_collapses() {
        assert_eq!(bottleneck(8, 16), 1);
        assert_eq!(bottleneck(64, 16), 4);
        assert_eq!(bottleneck(64, 8), 8);
        let mut r = rng::stream(6, "t");
        let mut s = ParamStore::<f32>::new();
        let cbam = CbamBlock::new(&mut s, "cbam", 32, CBAM_REDUCTION, &mut r).unwrap();
        // one MLP shared by both pooled descriptors
        assert_eq!(s.num_trainable(), 32 * 2 + 2 * 32 + 32 + 2 * 49 + 1);
        assert_eq!(cbam.reduction, 16);
    }

    #[test]
    fn fusion_weight_is_sigmoid_of_alpha() {
        let mut r = rng::stream(7, "t");
        let mut s = ParamStore::<f64>::new();
        let bal = BalancedAttnBlock::new(&mut s, "bal", 16, &mut r).unwrap();
        assert_eq!(bal.fusion_weight(&s), 0.5);
        s.get_mut(bal.alpha).data_mut()[0] = 20.0;
        assert!((bal.fusion_weight(&s) - 1.0).abs() < 1e-8);
        for a in [-7.3, -0.1, 0.57, 3.0] {
            s.get_mut(bal.alpha).data_mut()[0] = a;
            let w = bal.fusion_weight(&s);
            assert_eq!(w + (1.0 - w), 1.0);
            assert_eq!(bal.alpha(&s), a);
        }
    }
}
