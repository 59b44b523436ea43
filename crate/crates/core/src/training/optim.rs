use crate::engine::{ParamId, ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Weight decay enters the gradient (L2 penalty).
    Adam,
    /// Weight decay shrinks the parameter directly.
    AdamW,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (expected adam or adamw)"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Real>(
    kind: OptimizerKind,
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
    hp: AdamParams,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() {
        return Err(Error::shape(format!(
            "optimizer step with {} parameters, {} gradients and {} moment slots",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c = T::from_f64_lossy;
    let (b1, b2) = (c(hp.beta1), c(hp.beta2));
    let (one_b1, one_b2) = (c(1.0 - hp.beta1), c(1.0 - hp.beta2));
    let bc1 = c(1.0 - hp.beta1.powi(t));
    let bc2_sqrt = c((1.0 - hp.beta2.powi(t)).sqrt());
    let step_size = c(lr) / bc1;
    let eps = c(hp.eps);
    let wd = c(weight_decay);
    let shrink = c(1.0 - lr * weight_decay);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        let g = match kind {
            OptimizerKind::Adam if weight_decay != 0.0 => g + wd * *p,
            _ => g,
        };
        if kind == OptimizerKind::AdamW {
            *p *= shrink;
        }
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        let denom = v.sqrt() / bc2_sqrt + eps;
        *p -= step_size * *m / denom;
    }
    Ok(())
}

/// AdamW: decoupled weight decay, then the Adam update.
pub fn adamw_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
    hp: AdamParams,
) -> Result<()> {
    adam_step(OptimizerKind::AdamW, param, grad, state, lr, weight_decay, hp)
}

/// Adam or AdamW over every trainable tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub hp: AdamParams,
    states: Vec<Option<AdamState<T>>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            weight_decay,
            hp: AdamParams::default(),
            states: Vec::new(),
        }
    }

    /// Applies the gradients held in `store` (see [`ParamStore::load_grads`]).
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.states.resize(store.len(), None);
        for id in store.trainable_ids() {
            let Some(grad) = store.param(id).grad().cloned() else {
                continue;
            };
            let state = self.states[id.index()].get_or_insert_with(|| AdamState::new(grad.len()));
            adam_step(
                self.kind,
                store.get_mut(id).data_mut(),
                grad.data(),
                state,
                lr,
                self.weight_decay,
                self.hp,
            )?;
        }
        Ok(())
    }

    pub fn state(&self, id: ParamId) -> Option<&AdamState<T>> {
        self.states.get(id.index()).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = vec![1.5f64, -2.0];
        let mut s = AdamState::new(2);
        for _ in 0..10 {
            adamw_step(&mut p, &[0.0, 0.0], &mut s, 1e-3, 0.0, AdamParams::default()).unwrap();
        }
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn decoupled_decay_scales_the_parameter() {
        let mut p = vec![2.0f64];
        let mut s = AdamState::new(1);
        for k in 1..=5 {
            adamw_step(&mut p, &[0.0], &mut s, 1e-3, 0.05, AdamParams::default()).unwrap();
            let expect = 2.0 * (1.0 - 1e-3 * 0.05f64).powi(k);
            assert!((p[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_converges() {
        let mut x = vec![1.0f64];
        let mut s = AdamState::new(1);
        for _ in 0..200 {
            let g = [2.0 * x[0]];
            adamw_step(&mut x, &g, &mut s, 0.1, 0.0, AdamParams::default()).unwrap();
        }
        assert!(x[0].abs() < 0.05, "{}", x[0]);
    }

    #[test]
    fn adam_and_adamw_agree_without_decay() {
        let (mut a, mut b) = (vec![0.3f64, -0.7], vec![0.3f64, -0.7]);
        let (mut sa, mut sb) = (AdamState::new(2), AdamState::new(2));
        for k in 0..50 {
            let g = [(k as f64).sin(), (k as f64 * 0.3).cos()];
            adam_step(OptimizerKind::Adam, &mut a, &g, &mut sa, 1e-2, 0.0, AdamParams::default()).unwrap();
            adamw_step(&mut b, &g, &mut sb, 1e-2, 0.0, AdamParams::default()).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut s = AdamState::<f64>::new(2);
        assert!(adamw_step(&mut [0.0], &[0.0, 1.0], &mut s, 1e-3, 0.0, AdamParams::default()).is_err());
    }
}
