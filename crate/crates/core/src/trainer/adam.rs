use ndarray::{ArrayViewMut, Axis, Dimension, Zip};

use crate::error::{Error, Result};
use crate::ksae::KSaeParams;
use crate::loss::GradientSet;
use crate::numeric::Real;

/// Adam moment accumulators for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: KSaeParams<T>,
    pub v: KSaeParams<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(d: usize, n: usize) -> Self {
        Self {
            m: KSaeParams::zeros(d, n),
            v: KSaeParams::zeros(d, n),
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn first_non_finite<T: Real>(g: &GradientSet<T>) -> Option<(&'static str, usize, T)> {
    let tensors: [(&'static str, Box<dyn Iterator<Item = &T>>); 4] = [
        ("W_enc", Box::new(g.w_enc.iter())),
        ("b_enc", Box::new(g.b_enc.iter())),
        ("W_dec", Box::new(g.w_dec.iter())),
        ("b_pre", Box::new(g.b_pre.iter())),
    ];
    for (name, it) in tensors {
        let mut it = it;
        if let Some((i, v)) = it.by_ref().enumerate().find(|(_, v)| !v.is_finite()) {
            return Some((name, i, *v));
        }
    }
    None
}

/// One bias-corrected Adam update. Gradients are validated before any state
/// changes, so a rejected step leaves `params` and `state` untouched.
pub fn adam_step<T: Real>(
    params: &mut KSaeParams<T>,
    grads: &GradientSet<T>,
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) -> Result<()> {
    if grads.w_enc.dim() != params.w_enc.dim() || grads.w_dec.dim() != params.w_dec.dim() {
        return Err(Error::Shape("gradient shapes do not match parameters".into()));
    }
    if let Some((name, i, v)) = first_non_finite(grads) {
        return Err(Error::Numeric(format!(
            "non-finite gradient {v} in {name} at flat index {i} (step {})",
            state.t + 1
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64_lossy(hyper.beta1);
    let b2 = T::from_f64_lossy(hyper.beta2);
    let one = T::one();
    let bc1 = T::from_f64_lossy(1.0 - hyper.beta1.powi(t));
    let bc2 = T::from_f64_lossy(1.0 - hyper.beta2.powi(t));
    let lr = T::from_f64_lossy(hyper.lr);
    let eps = T::from_f64_lossy(hyper.eps);

    fn update<T: Real, D: Dimension>(
        p: ArrayViewMut<'_, T, D>,
        g: ndarray::ArrayView<'_, T, D>,
        m: ArrayViewMut<'_, T, D>,
        v: ArrayViewMut<'_, T, D>,
        k: (T, T, T, T, T, T, T),
    ) {
        let (b1, b2, one, bc1, bc2, lr, eps) = k;
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
    let k = (b1, b2, one, bc1, bc2, lr, eps);
    let (m, v) = (&mut state.m, &mut state.v);
    update(params.w_enc.view_mut(), grads.w_enc.view(), m.w_enc.view_mut(), v.w_enc.view_mut(), k);
    update(params.b_enc.view_mut(), grads.b_enc.view(), m.b_enc.view_mut(), v.b_enc.view_mut(), k);
    update(params.w_dec.view_mut(), grads.w_dec.view(), m.w_dec.view_mut(), v.w_dec.view_mut(), k);
    update(params.b_pre.view_mut(), grads.b_pre.view(), m.b_pre.view_mut(), v.b_pre.view_mut(), k);
    Ok(())
}

/// Divides every decoder column by its L2 norm (computed in 64-bit).
pub fn project_decoder_unit_norm<T: Real>(params: &mut KSaeParams<T>) -> Result<()> {
    for (j, mut col) in params.w_dec.axis_iter_mut(Axis(1)).enumerate() {
        let norm = col.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numeric(format!("decoder column {j} has norm {norm}")));
        }
        col.mapv_inplace(|v| T::from_f64_lossy(v.to_f64_lossy() / norm));
    }
    Ok(())
}

/// Removes from each decoder-column gradient its component along that column.
pub fn remove_parallel_gradient<T: Real>(params: &KSaeParams<T>, grads: &mut GradientSet<T>) {
    for (col, mut g) in params.w_dec.axis_iter(Axis(1)).zip(grads.w_dec.axis_iter_mut(Axis(1))) {
        let dot = col.dot(&g);
        let sq = col.dot(&col);
        if sq > T::zero() {
            g.scaled_add(-(dot / sq), &col);
        }
    }
}
