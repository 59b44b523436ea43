//! Test-only oracles: a central finite-difference gradient checker and
//! direct loop evaluations of the attention blocks that never touch the
//! autodiff engine.
#![allow(dead_code)]

use rand::seq::index::sample;
use satnet::engine::{ParamStore, Real, Tape, Tensor, Var};
use satnet::layers::Ctx;
use satnet::rng::{self, StreamRng};
use satnet::Result;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Coordinates per tensor compared against finite differences.
pub const MAX_COORDS: usize = 12;

/// `|a − n| / max(|a|, |n|, 1e-3)`. The floor keeps round-off in the
/// difference quotient (about 1e-11 here) from dominating when both
/// gradients are essentially zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn coords(len: usize, rng: &mut StreamRng) -> Vec<usize> {
    if len <= MAX_COORDS {
        (0..len).collect()
    } else {
        sample(rng, len, MAX_COORDS).into_vec()
    }
}

/// Scalarizes an output as `Σ out ⊙ r` for a fixed random `r`, so every
/// output element contributes a distinct weight.
fn project(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(out, rv)?;
    Ok(tape.sum(p))
}

/// Worst relative error between the tape's gradients and central
/// differences, over sampled coordinates of every input.
pub fn check_fn<F>(inputs: &[Tensor<f64>], f: F, rng: &mut StreamRng) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let r = if tape.shape(out).iter().product::<usize>() == 1 {
        Tensor::ones(tape.shape(out))
    } else {
        Tensor::randn(tape.shape(out), 1.0, rng)
    };
    let loss = project(&mut tape, out, &r)?;
    let grads = tape.backward(loss)?;
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        let l = project(&mut t, o, &r)?;
        t.value(l).item()
    };
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in coords(inputs[i].len(), rng) {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += FD_STEP;
            let plus = eval(&xs)?;
            xs[i].data_mut()[j] -= 2.0 * FD_STEP;
            let minus = eval(&xs)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Like [`check_fn`] for a parameterized block: compares gradients with
/// respect to the input and to every trainable parameter in `store`.
/// Random masks are replayed from the same stream on every evaluation.
pub fn check_block<F>(store: &mut ParamStore<f64>, x: &Tensor<f64>, training: bool, f: F, rng: &mut StreamRng) -> Result<f64>
where
    F: Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>,
{
    let run = |store: &mut ParamStore<f64>, x: &Tensor<f64>, leaf: bool| -> Result<(Tape<f64>, Var, Var)> {
        let mut tape = Tape::new();
        let xv = if leaf { tape.leaf(x.clone()) } else { tape.constant(x.clone()) };
        let mut mask_rng = rng::stream(0, "gradcheck-masks");
        let mut ctx = Ctx {
            tape: &mut tape,
            store,
            training,
            rng: &mut mask_rng,
        };
        let out = f(&mut ctx, xv)?;
        Ok((tape, xv, out))
    };
    let (mut tape, xv, out) = run(store, x, true)?;
    let r = Tensor::randn(tape.shape(out), 1.0, rng);
    let loss = project(&mut tape, out, &r)?;
    let grads = tape.backward(loss)?;
    drop(tape);
    let scalar = |store: &mut ParamStore<f64>, x: &Tensor<f64>| -> Result<f64> {
        let (mut t, _, o) = run(store, x, false)?;
        let l = project(&mut t, o, &r)?;
        t.value(l).item()
    };
    let mut worst = 0.0f64;
    let gx = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    for j in coords(x.len(), rng) {
        let mut xp = x.clone();
        xp.data_mut()[j] += FD_STEP;
        let plus = scalar(store, &xp)?;
        xp.data_mut()[j] -= 2.0 * FD_STEP;
        let minus = scalar(store, &xp)?;
        worst = worst.max(rel_err(gx.data()[j], (plus - minus) / (2.0 * FD_STEP)));
    }
    for id in store.trainable_ids() {
        let g = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for j in coords(g.len(), rng) {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let plus = scalar(store, x)?;
            store.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let minus = scalar(store, x)?;
            store.get_mut(id).data_mut()[j] = orig;
            worst = worst.max(rel_err(g.data()[j], (plus - minus) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}

pub fn param<T: Real>(store: &ParamStore<T>, name: &str) -> Vec<f64> {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get(id).data().iter().map(|v| v.to_f64().unwrap()).collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y[o] = Σ_i w[o][i]·x[i] + b[o]`, weights stored row-major `out×in`.
fn dense(w: &[f64], b: Option<&[f64]>, x: &[f64], out: usize) -> Vec<f64> {
    let n = x.len();
    (0..out)
        .map(|o| (0..n).map(|i| w[o * n + i] * x[i]).sum::<f64>() + b.map_or(0.0, |b| b[o]))
        .collect()
}

/// Plain 4-D array helper, `b×c×h×w` row-major.
#[derive(Clone, Debug)]
pub struct Nd {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Nd {
    pub fn new(t: &Tensor<f64>) -> Nd {
        let (b, c, h, w) = t.dims4().unwrap();
        Nd {
            dims: [b, c, h, w],
            data: t.data().to_vec(),
        }
    }

    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        let [_, cc, h, w] = self.dims;
        self.data[((n * cc + c) * h + i) * w + j]
    }
}

/// `x ⊙ σ(FC₂(ReLU(FC₁(GAP(x)))))`.
pub fn se_direct(store: &ParamStore<f64>, name: &str, x: &Nd) -> Vec<f64> {
    let [b, c, h, w] = x.dims;
    let (w1, b1) = (param(store, &format!("{name}.fc1.weight")), param(store, &format!("{name}.fc1.bias")));
    let (w2, b2) = (param(store, &format!("{name}.fc2.weight")), param(store, &format!("{name}.fc2.bias")));
    let hid = b1.len();
    let mut out = vec![0.0; x.data.len()];
    for n in 0..b {
        let gap: Vec<f64> = (0..c)
            .map(|ch| (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).map(|(i, j)| x.at(n, ch, i, j)).sum::<f64>() / (h * w) as f64)
            .collect();
        let z: Vec<f64> = dense(&w1, Some(&b1), &gap, hid).into_iter().map(|v| v.max(0.0)).collect();
        let gate: Vec<f64> = dense(&w2, Some(&b2), &z, c).into_iter().map(sig).collect();
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[((n * c + ch) * h + i) * w + j] = x.at(n, ch, i, j) * gate[ch];
                }
            }
        }
    }
    out
}

/// `x ⊙ σ(f_h(z_h)) ⊙ σ(f_w(z_w))` with the shared transform, batch-norm
/// (batch statistics when `training`, else running statistics) and ReLU
/// applied to the joint row/column descriptors.
#[allow(clippy::needless_range_loop)]
pub fn coord_direct(store: &ParamStore<f64>, name: &str, x: &Nd, training: bool) -> Vec<f64> {
    let [b, c, h, w] = x.dims;
    let p = |s: &str| param(store, &format!("{name}.{s}"));
    let (tw, tb) = (p("transform.weight"), p("transform.bias"));
    let (gamma, beta) = (p("bn.gamma"), p("bn.beta"));
    let (hw_, hb) = (p("proj_h.weight"), p("proj_h.bias"));
    let (ww, wb) = (p("proj_w.weight"), p("proj_w.bias"));
    let mid = tb.len();
    // per sample: descriptors for each row then each column, c values each
    let mut joint = vec![vec![vec![0.0; mid]; h + w]; b];
    for n in 0..b {
        for i in 0..h {
            let zh: Vec<f64> = (0..c).map(|ch| (0..w).map(|j| x.at(n, ch, i, j)).sum::<f64>() / w as f64).collect();
            joint[n][i] = dense(&tw, Some(&tb), &zh, mid);
        }
        for j in 0..w {
            let zw: Vec<f64> = (0..c).map(|ch| (0..h).map(|i| x.at(n, ch, i, j)).sum::<f64>() / h as f64).collect();
            joint[n][h + j] = dense(&tw, Some(&tb), &zw, mid);
        }
    }
    let (mean, var) = if training {
        let cnt = (b * (h + w)) as f64;
        let mean: Vec<f64> = (0..mid).map(|m| joint.iter().flatten().map(|v| v[m]).sum::<f64>() / cnt).collect();
        let var: Vec<f64> = (0..mid)
            .map(|m| joint.iter().flatten().map(|v| (v[m] - mean[m]).powi(2)).sum::<f64>() / cnt)
            .collect();
        (mean, var)
    } else {
        (p("bn.running_mean"), p("bn.running_var"))
    };
    let act = |v: &[f64]| -> Vec<f64> {
        (0..mid)
            .map(|m| (gamma[m] * (v[m] - mean[m]) / (var[m] + 1e-5).sqrt() + beta[m]).max(0.0))
            .collect()
    };
    let mut out = vec![0.0; x.data.len()];
    for n in 0..b {
        let gh: Vec<Vec<f64>> = (0..h).map(|i| dense(&hw_, Some(&hb), &act(&joint[n][i]), c).into_iter().map(sig).collect()).collect();
        let gw: Vec<Vec<f64>> = (0..w).map(|j| dense(&ww, Some(&wb), &act(&joint[n][h + j]), c).into_iter().map(sig).collect()).collect();
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[((n * c + ch) * h + i) * w + j] = x.at(n, ch, i, j) * gh[i][ch] * gw[j][ch];
                }
            }
        }
    }
    out
}

/// Channel gate from the shared MLP over average and max descriptors,
/// then the 7×7 spatial gate over `[mean_c; max_c]` of the gated map.
pub fn cbam_direct(store: &ParamStore<f64>, name: &str, x: &Nd) -> Vec<f64> {
    let [b, c, h, w] = x.dims;
    let p = |s: &str| param(store, &format!("{name}.{s}"));
    let (w1, w2, b2) = (p("mlp.fc1.weight"), p("mlp.fc2.weight"), p("mlp.fc2.bias"));
    let (sw, sb) = (p("spatial.weight"), p("spatial.bias"));
    let hid = w1.len() / c;
    let k = 7usize;
    let pad = 3isize;
    let mut out = vec![0.0; x.data.len()];
    for n in 0..b {
        let cells = || (0..h).flat_map(|i| (0..w).map(move |j| (i, j)));
        let avg: Vec<f64> = (0..c).map(|ch| cells().map(|(i, j)| x.at(n, ch, i, j)).sum::<f64>() / (h * w) as f64).collect();
        let max: Vec<f64> = (0..c)
            .map(|ch| cells().map(|(i, j)| x.at(n, ch, i, j)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mlp = |v: &[f64]| {
            let z: Vec<f64> = dense(&w1, None, v, hid).into_iter().map(|v| v.max(0.0)).collect();
            dense(&w2, Some(&b2), &z, c)
        };
        let (ma, mm) = (mlp(&avg), mlp(&max));
        let fc: Vec<f64> = (0..c).map(|ch| sig(ma[ch] + mm[ch])).collect();
        let x1 = |ch: usize, i: usize, j: usize| x.at(n, ch, i, j) * fc[ch];
        let mean_c: Vec<f64> = cells().map(|(i, j)| (0..c).map(|ch| x1(ch, i, j)).sum::<f64>() / c as f64).collect();
        let max_c: Vec<f64> = cells()
            .map(|(i, j)| (0..c).map(|ch| x1(ch, i, j)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        for i in 0..h {
            for j in 0..w {
                let mut s = sb[0];
                for (plane, desc) in [&mean_c, &max_c].into_iter().enumerate() {
                    for di in 0..k {
                        for dj in 0..k {
                            let (ii, jj) = (i as isize + di as isize - pad, j as isize + dj as isize - pad);
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                s += sw[(plane * k + di) * k + dj] * desc[ii as usize * w + jj as usize];
                            }
                        }
                    }
                }
                let fs = sig(s);
                for ch in 0..c {
                    out[((n * c + ch) * h + i) * w + j] = x1(ch, i, j) * fs;
                }
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
