mod common;

use rand::Rng;
use satnet::engine::{ParamStore, Tape, Tensor, Var};
use satnet::models::{Model, ModelSpec, Variant};
use satnet::rng;
use satnet::training::{Optimizer, OptimizerKind};

fn tiny_balanced(dropblock: bool) -> ModelSpec {
    let mut spec = ModelSpec::new(Variant::Balanced12, 4).with_channels(vec![8, 16, 32, 64]);
    if !dropblock {
        spec.dropblock = None;
    }
    spec
}

/// `Σ logits ⊙ r` with masks replayed from a fixed stream.
fn projected(model: &mut Model<f64>, x: &Tensor<f64>, r: &Tensor<f64>, leaf: bool) -> (Tape<f64>, Var, Var) {
    let mut tape = Tape::new();
    let xv = if leaf { tape.leaf(x.clone()) } else { tape.constant(x.clone()) };
    let mut masks = rng::stream(0, "masks");
    let logits = model.forward(&mut tape, xv, true, &mut masks).unwrap();
    let rv = tape.constant(r.clone());
    let p = tape.mul(logits, rv).unwrap();
    let loss = tape.sum(p);
    (tape, xv, loss)
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    const TOL: f64 = 1e-3;
    // thousands of ReLU and max-pool switches sit in this network; a
    // smaller step keeps the difference quotient on one linear piece
    const STEP: f64 = 1e-6;
    let mut model = Model::<f64>::build(&tiny_balanced(true), 3).unwrap();
    let mut rng = rng::stream(3, "e2e");
    // nonzero fusion logits so both paths and α itself carry gradient
    for b in model.balanced_blocks().unwrap() {
        model.store_mut().get_mut(b.alpha).data_mut()[0] = rng.random_range(-1.0..1.0);
    }
    let x = Tensor::<f64>::randn(&[2, 3, 64, 64], 1.0, &mut rng);
    let r = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
    let (tape, xv, loss) = projected(&mut model, &x, &r, true);
    let grads = tape.backward(loss).unwrap();
    let gx = grads.wrt(xv).unwrap().clone();
    drop(tape);

    let value = |model: &mut Model<f64>, x: &Tensor<f64>| {
        let (tape, _, loss) = projected(model, x, &r, false);
        tape.value(loss).item().unwrap()
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..8 {
        let j = rng.random_range(0..x.len());
        let mut xp = x.clone();
        xp.data_mut()[j] += STEP;
        let plus = value(&mut model, &xp);
        xp.data_mut()[j] -= 2.0 * STEP;
        let minus = value(&mut model, &xp);
        let e = common::rel_err(gx.data()[j], (plus - minus) / (2.0 * STEP));
        assert!(e < TOL, "input[{j}]: relative error {e}");
        worst = worst.max(e);
        checked += 1;
    }
    let ids = model.store().trainable_ids();
    for &id in ids.iter() {
        let name = model.store().param(id).name().to_string();
        let g = grads.param(id).unwrap_or_else(|| panic!("no gradient for {name}")).clone();
        // every fusion logit, and a sample of the other tensors
        let picks = usize::from(name.ends_with("alpha") || rng.random_bool(0.25));
        for _ in 0..picks {
            let j = rng.random_range(0..g.len());
            let orig = model.store().get(id).data()[j];
            model.store_mut().get_mut(id).data_mut()[j] = orig + STEP;
            let plus = value(&mut model, &x);
            model.store_mut().get_mut(id).data_mut()[j] = orig - STEP;
            let minus = value(&mut model, &x);
            model.store_mut().get_mut(id).data_mut()[j] = orig;
            let e = common::rel_err(g.data()[j], (plus - minus) / (2.0 * STEP));
            assert!(e < TOL, "{name}[{j}]: relative error {e}");
            worst = worst.max(e);
            checked += 1;
        }
    }
    println!("{checked} coordinates, worst relative error {worst:.2e}");
}

fn get(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    common::param(store, name)
}

/// Plain residual forward written against parameter names alone, with no
/// attention anywhere. Eval-mode batch norm.
fn plain_residual(store: &ParamStore<f64>, spec: &ModelSpec, x: &Tensor<f64>) -> Tensor<f64> {
    let mut t = Tape::new();
    let p = |t: &mut Tape<f64>, name: &str| t.constant(store.get(store.id(name).unwrap()).clone());
    let bn = |t: &mut Tape<f64>, v: Var, name: &str| {
        let (g, b) = (p(t, &format!("{name}.gamma")), p(t, &format!("{name}.beta")));
        let (m, var) = (get(store, &format!("{name}.running_mean")), get(store, &format!("{name}.running_var")));
        t.batch_norm_eval(v, g, b, &m, &var).unwrap()
    };
    let conv = |t: &mut Tape<f64>, v: Var, name: &str, stride: usize, pad: usize| {
        let w = p(t, &format!("{name}.weight"));
        t.conv2d(v, w, None, stride, pad).unwrap()
    };
    let mut h = t.constant(x.clone());
    h = conv(&mut t, h, "stem.conv", 1, 1);
    h = bn(&mut t, h, "stem.bn");
    h = t.relu(h);
    h = t.max_pool2d(h).unwrap();
    for (s, &n) in spec.blocks.iter().enumerate() {
        for j in 0..n {
            let name = format!("stage{s}.block{j}");
            let stride = if s > 0 && j == 0 { 2 } else { 1 };
            let skip = if store.id(&format!("{name}.shortcut.conv.weight")).is_some() {
                let v = conv(&mut t, h, &format!("{name}.shortcut.conv"), stride, 0);
                bn(&mut t, v, &format!("{name}.shortcut.bn"))
            } else {
                h
            };
            let mut y = conv(&mut t, h, &format!("{name}.conv1"), stride, 1);
            y = bn(&mut t, y, &format!("{name}.bn1"));
            y = t.relu(y);
            y = conv(&mut t, y, &format!("{name}.conv2"), 1, 1);
            y = bn(&mut t, y, &format!("{name}.bn2"));
            y = t.add(y, skip).unwrap();
            h = t.relu(y);
        }
    }
    let pooled = t.global_avg_pool(h).unwrap();
    let c = t.shape(pooled)[1];
    let f = t.reshape(pooled, &[x.shape()[0], c]).unwrap();
    let (w, b) = (p(&mut t, "head.fc.weight"), p(&mut t, "head.fc.bias"));
    let y = t.linear(f, w, Some(b)).unwrap();
    t.value(y).clone()
}

#[test]
fn saturated_gates_reduce_to_plain_residual_blocks() {
    let spec = tiny_balanced(true);
    let mut model = Model::<f64>::build(&spec, 5).unwrap();
    let mut rng = rng::stream(5, "surgery");
    let names: Vec<String> = model.store().iter().map(|(_, p)| p.name().to_string()).collect();
    let store = model.store_mut();
    for name in &names {
        let id = store.id(name).unwrap();
        if name.contains(".attn.") {
            // SE gate σ(0·x + 40) = 1 and spectral weight 1 − σ(−40) = 1
            let v = if name.ends_with("se.fc2.bias") {
                40.0
            } else if name.ends_with("alpha") {
                -40.0
            } else {
                0.0
            };
            store.get_mut(id).data_mut().fill(v);
        } else if name.ends_with("running_var") {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
        } else if name.ends_with("running_mean") || name.ends_with("beta") {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let x = Tensor::<f64>::randn(&[2, 3, 64, 64], 1.0, &mut rng);
    let got = model.predict(&x).unwrap();
    let want = plain_residual(model.store(), &spec, &x);
    let d = common::max_abs_diff(got.data(), want.data());
    assert!(d < 1e-12, "max deviation {d:e}");
}

#[test]
fn one_small_step_reduces_the_loss() {
    let mut rng = rng::stream(8, "descent");
    let x = Tensor::<f32>::randn(&[4, 3, 64, 64], 1.0, &mut rng);
    let labels = [0, 1, 2, 3];
    let weights = [1.0f32; 4];
    for variant in Variant::ALL {
        let mut spec = ModelSpec::new(variant, 4);
        spec = match variant {
            Variant::Baseline => spec.with_channels(vec![8, 16, 16]),
            Variant::Cbam7 => spec.with_channels(vec![8, 8, 16, 16, 16, 16, 16]),
            Variant::Balanced12 => spec.with_channels(vec![8, 16, 32, 64]),
        };
        let mut model = Model::<f32>::build(&spec, 8).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::AdamW, 0.0);
        // masks replayed so both evaluations see the same network
        let loss = |model: &mut Model<f32>, backward: bool| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let mut masks = rng::stream(1, "masks");
            let logits = model.forward(&mut tape, xv, true, &mut masks).unwrap();
            let l = tape.weighted_cross_entropy(logits, &labels, &weights).unwrap();
            let v = tape.value(l).item().unwrap();
            if backward {
                let g = tape.backward(l).unwrap();
                drop(tape);
                model.store_mut().load_grads(&g);
            }
            v
        };
        let before = loss(&mut model, true);
        opt.step(model.store_mut(), 1e-4).unwrap();
        let after = loss(&mut model, false);
        assert!(after < before, "{variant}: loss {before} → {after}");
    }
}
