use super::params::{Gradients, Parameters};
use super::real::Real;
use crate::error::{Error, Result};

fn check_step<T: Real>(params: &Parameters<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    params.ensure_layout(grads, "optimizer step")?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient contains NaN or infinity; training aborted".into()));
    }
    Ok(())
}

/// `W <- W - lr * grad`, elementwise. Parameters are left untouched on error.
pub fn sgd_step<T: Real>(params: &mut Parameters<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
    check_step(params, grads, lr)?;
    params.axpy(T::from_f64(-lr), grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Parameters<T>,
    v: Parameters<T>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like `params`, step 0.
    pub fn new(params: &Parameters<T>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn first_moment(&self) -> &Parameters<T> {
        &self.m
    }

    pub fn second_moment(&self) -> &Parameters<T> {
        &self.v
    }
}

/// One bias-corrected Adam update with rate `lr`.
pub fn adam_step<T: Real>(
    params: &mut Parameters<T>,
    grads: &Gradients<T>,
    lr: f64,
    state: &mut AdamState<T>,
) -> Result<()> {
    check_step(params, grads, lr)?;
    params.ensure_layout(&state.m, "adam moments")?;
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let tensors = params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().zip(state.v.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((w, &gi), (mi, vi)) in it {
            let gf = gi.as_f64();
            let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
            *mi = T::from_f64(mf);
            *vi = T::from_f64(vf);
            let update = lr * (mf / c1) / ((vf / c2).sqrt() + state.eps);
            *w = T::from_f64(w.as_f64() - update);
        }
    }
    Ok(())
}

/// Optimizer with its per-parameter state.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimState<T> {
    Sgd,
    Adam(AdamState<T>),
}

impl<T: Real> OptimState<T> {
    pub fn new(kind: OptimizerKind, params: &Parameters<T>) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimState::Sgd,
            OptimizerKind::Adam => OptimState::Adam(AdamState::new(params)),
        }
    }

    pub fn step(&mut self, params: &mut Parameters<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        match self {
            OptimState::Sgd => sgd_step(params, grads, lr),
            OptimState::Adam(state) => adam_step(params, grads, lr, state),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamSet;
    use crate::nn::tensor::Tensor;

    fn scalar(v: f64) -> ParamSet<f64> {
        ParamSet::from_layers(vec![vec![Tensor::filled(&[1], v)]])
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut p = scalar(1.0);
        sgd_step(&mut p, &scalar(0.0), 0.001).unwrap();
        assert_eq!(p, scalar(1.0));
    }

    #[test]
    fn sgd_single_step_arithmetic() {
        let mut p = scalar(1.0);
        sgd_step(&mut p, &scalar(0.5), 0.001).unwrap();
        assert!((p.get_flat(0).unwrap() - 0.9995).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_steps_versus_summed_gradient() {
        // W - lr*g1 - lr*g2 == W - lr*(g1 + g2); the same holds for identical grads
        let (g1, g2) = (0.25, -0.75);
        let mut a = scalar(2.0);
        sgd_step(&mut a, &scalar(g1), 0.1).unwrap();
        sgd_step(&mut a, &scalar(g2), 0.1).unwrap();
        let mut b = scalar(2.0);
        sgd_step(&mut b, &scalar(g1 + g2), 0.1).unwrap();
        assert!((a.get_flat(0).unwrap() - b.get_flat(0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut p = scalar(1.0);
        let err = sgd_step(&mut p, &scalar(f64::NAN), 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p, scalar(1.0));
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar(0.0), 0.01, &mut st).unwrap();
        assert_eq!(p, scalar(1.0));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        for g in [1.0, 1e-3, 250.0] {
            let mut p = scalar(0.0);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &scalar(g), 0.01, &mut st).unwrap();
            // lr * g / (|g| + eps)
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((p.get_flat(0).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_moment_decay_matches_scalar_oracle() {
        let lr = 0.01;
        let mut p = scalar(0.5);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar(2.0), lr, &mut st).unwrap();
        for _ in 0..10 {
            adam_step(&mut p, &scalar(0.0), lr, &mut st).unwrap();
        }
        // independent scalar recursion
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=11 {
            let g = if t == 1 { 2.0 } else { 0.0 };
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((st.first_moment().get_flat(0).unwrap() - 0.2 * 0.9f64.powi(10)).abs() < 1e-15);
        assert!((st.second_moment().get_flat(0).unwrap() - 0.004 * 0.999f64.powi(10)).abs() < 1e-15);
        assert!((p.get_flat(0).unwrap() - w).abs() < 1e-14);
        assert_eq!(st.step, 11);
    }
}
