//! Training objective and its hand-derived gradients.
//!
//! With `D = sum ||x - mu||^2` over the batch (mu is the running data mean):
//!
//! ```text
//! L_mse = sum ||x - x_hat||^2 / D
//! L_aux = sum ||e - e_hat||^2 / D,   e = x - x_hat,   e_hat = W_dec z_aux
//! L     = L_mse + alpha * L_aux
//! ```
//!
//! `z_aux` keeps the `k_aux` largest ReLU pre-activations among dead latents.
//! Gradients treat the TopK index sets and the dead mask as fixed, pass
//! nothing through ReLU at exactly zero, and flow through `e` in `L_aux`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::ksae::{
    preactivations, relu, topk_positive, topk_rows, AuxSelection, KSaeConfig, KSaeParams,
    LatentBatch, LatentCode,
};
use crate::numeric::{pairwise_sum, sum_squares, Real};

/// Gradients share the parameter layout.
pub type GradientSet<T> = KSaeParams<T>;

#[derive(Debug, Clone)]
pub struct ForwardResult<T> {
    /// Pre-activations `W_enc (x - b_pre) + b_enc`, kept for the backward pass.
    pub pre: Array2<T>,
    pub z: LatentBatch<T>,
    pub x_hat: Array2<T>,
    /// `e = x - x_hat`
    pub residual: Array2<T>,
    pub z_aux: LatentBatch<T>,
    /// `W_dec z_aux` (no `b_pre`).
    pub e_hat: Array2<T>,
    /// Whether the auxiliary term participates in this step.
    pub aux_active: bool,
    /// Normalizer `D`.
    pub denom: T,
    pub loss_mse: T,
    pub loss_aux: T,
    pub loss_total: T,
}

/// Sum of squared row norms, reduced in a fixed order.
fn total_sq<T: Real>(a: ArrayView2<'_, T>) -> T {
    let per_row: Vec<T> = a
        .axis_iter(Axis(0))
        .map(|r| match r.as_slice() {
            Some(s) => sum_squares(s),
            None => sum_squares(&r.to_vec()),
        })
        .collect();
    pairwise_sum(&per_row)
}

pub fn forward_loss<T: Real>(
    params: &KSaeParams<T>,
    config: &KSaeConfig,
    x: ArrayView2<'_, T>,
    dead_mask: &[bool],
    mean: ArrayView1<'_, T>,
) -> Result<ForwardResult<T>> {
    let n = config.n();
    if params.n() != n || params.d() != config.d {
        return Err(Error::Shape(format!(
            "params are d={} n={}, config is d={} n={n}",
            params.d(),
            params.n(),
            config.d
        )));
    }
    if dead_mask.len() != n {
        return Err(Error::Shape(format!("dead mask has {} entries, n = {n}", dead_mask.len())));
    }
    if mean.len() != config.d {
        return Err(Error::Shape(format!("mean has {} entries, d = {}", mean.len(), config.d)));
    }
    let pre = preactivations(params, x)?;
    let z = topk_rows(pre.view(), config.k);
    let x_hat = crate::ksae::decode(params, &z)?;
    let residual = &x - &x_hat;

    let denom = total_sq((&x - &mean).view());
    if denom.is_nan() || denom <= T::zero() {
        return Err(Error::Numeric(
            "batch has zero spread about the running mean; normalized loss undefined".into(),
        ));
    }
    let loss_mse = total_sq(residual.view()) / denom;

    let aux_active = config.k_aux > 0
        && match config.aux_selection {
            AuxSelection::TopDead => dead_mask.iter().any(|&d| d),
            AuxSelection::LeastActivated => true,
        };
    let z_aux = if aux_active {
        select_aux(pre.view(), config, dead_mask)
    } else {
        LatentBatch {
            n,
            codes: vec![LatentCode::default(); x.nrows()],
        }
    };
    let e_hat = crate::ksae::decode_no_bias(params, &z_aux)?;
    let loss_aux = if aux_active {
        total_sq((&residual - &e_hat).view()) / denom
    } else {
        T::zero()
    };
    let loss_total = loss_mse + T::from_f64_lossy(config.alpha) * loss_aux;

    Ok(ForwardResult {
        pre,
        z,
        x_hat,
        residual,
        z_aux,
        e_hat,
        aux_active,
        denom,
        loss_mse,
        loss_aux,
        loss_total,
    })
}

fn select_aux<T: Real>(pre: ArrayView2<'_, T>, config: &KSaeConfig, dead_mask: &[bool]) -> LatentBatch<T> {
    let n = pre.ncols();
    let codes = match config.aux_selection {
        AuxSelection::TopDead => pre
            .axis_iter(Axis(0))
            .map(|row| topk_positive(row, config.k_aux, |j| dead_mask[j]))
            .collect(),
        AuxSelection::LeastActivated => {
            let rows = T::from_usize(pre.nrows().max(1)).expect("row count fits");
            let mut means: Vec<(usize, T)> = pre
                .axis_iter(Axis(1))
                .map(|col| col.iter().map(|&v| relu(v)).sum::<T>() / rows)
                .enumerate()
                .collect();
            means.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite").then(a.0.cmp(&b.0)));
            let mut chosen = vec![false; n];
            for &(j, _) in means.iter().take(config.k_aux) {
                chosen[j] = true;
            }
            pre.axis_iter(Axis(0))
                .map(|row| topk_positive(row, config.k_aux, |j| chosen[j]))
                .collect()
        }
    };
    LatentBatch { n, codes }
}

/// Exact gradient of `loss_total` under the fixed-selection conventions.
pub fn backward<T: Real>(
    params: &KSaeParams<T>,
    config: &KSaeConfig,
    x: ArrayView2<'_, T>,
    fwd: &ForwardResult<T>,
) -> Result<GradientSet<T>> {
    let (d, n) = (params.d(), params.n());
    if x.dim() != fwd.x_hat.dim() {
        return Err(Error::Shape("forward result does not match the batch".into()));
    }
    let mut g = GradientSet::<T>::zeros(d, n);
    let two = T::one() + T::one();
    let c = two / fwd.denom;
    let alpha = T::from_f64_lossy(config.alpha);
    let aux = fwd.aux_active && alpha != T::zero();

    let aux_res = &fwd.residual - &fwd.e_hat;
    let mut g_xhat = Array1::<T>::zeros(d);
    let mut g_ehat = Array1::<T>::zeros(d);
    let mut xc = Array1::<T>::zeros(d);
    let mut d_pre: Vec<(usize, T)> = Vec::new();

    for r in 0..x.nrows() {
        // dL/dx_hat = -(2/D) (e + alpha (e - e_hat))
        Zip::from(&mut g_xhat)
            .and(fwd.residual.row(r))
            .and(aux_res.row(r))
            .for_each(|gx, &e, &ra| {
                let mut v = e;
                if aux {
                    v += alpha * ra;
                }
                *gx = -(c * v);
            });
        g.b_pre += &g_xhat;

        d_pre.clear();
        for (j, v) in fwd.z.codes[r].iter() {
            let col = params.w_dec.column(j);
            g.w_dec.column_mut(j).scaled_add(v, &g_xhat);
            d_pre.push((j, col.dot(&g_xhat)));
        }
        if aux {
            // dL/de_hat = -(2 alpha / D) (e - e_hat)
            Zip::from(&mut g_ehat)
                .and(aux_res.row(r))
                .for_each(|ge, &ra| *ge = -(c * alpha * ra));
            for (j, v) in fwd.z_aux.codes[r].iter() {
                let col = params.w_dec.column(j);
                g.w_dec.column_mut(j).scaled_add(v, &g_ehat);
                d_pre.push((j, col.dot(&g_ehat)));
            }
        }

        if d_pre.is_empty() {
            continue;
        }
        Zip::from(&mut xc)
            .and(x.row(r))
            .and(&params.b_pre)
            .for_each(|c, &xv, &b| *c = xv - b);
        for &(j, gp) in &d_pre {
            g.w_enc.row_mut(j).scaled_add(gp, &xc);
            g.b_enc[j] += gp;
            // x_c = x - b_pre, so b_pre receives minus the encoder-input gradient.
            g.b_pre.scaled_add(-gp, &params.w_enc.row(j));
        }
    }
    Ok(g)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64) -> (KSaeParams<f64>, KSaeConfig, Array2<f64>, Vec<bool>, Array1<f64>) {
        let cfg = KSaeConfig::new(4, 2, 2, 2, 1.0 / 32.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |s: f64| rng.random_range(-s..s);
        let mut p = KSaeParams::<f64>::zeros(4, 8);
        p.w_enc.mapv_inplace(|_| u(1.0));
        p.b_enc.mapv_inplace(|_| u(0.3));
        p.w_dec.mapv_inplace(|_| u(1.0));
        p.b_pre.mapv_inplace(|_| u(0.5));
        let x = Array2::from_shape_fn((3, 4), |_| u(2.0));
        let mean = Array1::from_shape_fn(4, |_| u(0.2));
        let dead = (0..8).map(|j| j % 3 == 0).collect();
        (p, cfg, x, dead, mean)
    }

    /// Straight-line scalar re-implementation of the loss.
    fn scalar_loss(p: &KSaeParams<f64>, cfg: &KSaeConfig, x: &Array2<f64>, dead: &[bool], mean: &Array1<f64>) -> (f64, f64, f64) {
        let (d, n) = (cfg.d, cfg.n());
        let (mut se, mut sa, mut den) = (0.0, 0.0, 0.0);
        let mut any_dead = false;
        for &b in dead {
            any_dead |= b;
        }
        for r in 0..x.nrows() {
            let mut a = vec![0.0; n];
            for j in 0..n {
                let mut s = p.b_enc[j];
                for i in 0..d {
                    s += p.w_enc[[j, i]] * (x[[r, i]] - p.b_pre[i]);
                }
                a[j] = if s > 0.0 { s } else { 0.0 };
            }
            let keep = |mask: &dyn Fn(usize) -> bool, k: usize| -> Vec<usize> {
                let mut idx: Vec<usize> = (0..n).filter(|&j| a[j] > 0.0 && mask(j)).collect();
                // selection sort, larger first, lower index on ties
                for i in 0..idx.len() {
                    for t in i + 1..idx.len() {
                        if a[idx[t]] > a[idx[i]] {
                            idx.swap(i, t);
                        }
                    }
                }
                idx.truncate(k);
                idx
            };
            let main = keep(&|_| true, cfg.k);
            let auxs = keep(&|j| dead[j], cfg.k_aux);
            for i in 0..d {
                let mut xh = p.b_pre[i];
                for &j in &main {
                    xh += p.w_dec[[i, j]] * a[j];
                }
                let mut eh = 0.0;
                for &j in &auxs {
                    eh += p.w_dec[[i, j]] * a[j];
                }
                let e = x[[r, i]] - xh;
                se += e * e;
                sa += (e - eh) * (e - eh);
                den += (x[[r, i]] - mean[i]).powi(2);
            }
        }
        let aux = if any_dead { sa / den } else { 0.0 };
        (se / den, aux, se / den + cfg.alpha * aux)
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        for seed in 0..10 {
            let (p, cfg, x, dead, mean) = random_instance(seed);
            let f = forward_loss(&p, &cfg, x.view(), &dead, mean.view()).unwrap();
            let (m, a, t) = scalar_loss(&p, &cfg, &x, &dead, &mean);
            for (got, want) in [(f.loss_mse, m), (f.loss_aux, a), (f.loss_total, t)] {
                assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-12), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn perfect_reconstruction_is_zero_loss() {
        // n = d identity encoder/decoder with k = n reconstructs inputs above b_pre.
        let cfg = KSaeConfig::new(3, 1, 3, 0, 1.0 / 32.0);
        let mut p = KSaeParams::<f64>::zeros(3, 3);
        for i in 0..3 {
            p.w_enc[[i, i]] = 1.0;
            p.w_dec[[i, i]] = 1.0;
        }
        let x = ndarray::array![[1.0, 2.0, 3.0], [0.5, 0.25, 4.0]];
        let f = forward_loss(&p, &cfg, x.view(), &[false; 3], Array1::zeros(3).view()).unwrap();
        assert_eq!(f.loss_total, 0.0);
        let g = backward(&p, &cfg, x.view(), &f).unwrap();
        assert!(g.w_enc.iter().chain(&g.b_enc).chain(&g.w_dec).chain(&g.b_pre).all(|&v| v == 0.0));
    }

    #[test]
    fn alpha_zero_total_equals_mse() {
        let (p, mut cfg, x, dead, mean) = random_instance(4);
        cfg.alpha = 0.0;
        let f = forward_loss(&p, &cfg, x.view(), &dead, mean.view()).unwrap();
        assert_eq!(f.loss_total, f.loss_mse);
    }

    #[test]
    fn empty_dead_mask_means_no_aux() {
        let (p, cfg, x, _, mean) = random_instance(5);
        let f = forward_loss(&p, &cfg, x.view(), &[false; 8], mean.view()).unwrap();
        assert_eq!(f.loss_aux, 0.0);
        assert!(f.z_aux.codes.iter().all(LatentCode::is_empty));
    }

    #[test]
    fn b_pre_gradient_with_zero_encoder() {
        let (mut p, cfg, x, _, mean) = random_instance(6);
        p.w_enc.fill(0.0);
        let f = forward_loss(&p, &cfg, x.view(), &[false; 8], mean.view()).unwrap();
        let g = backward(&p, &cfg, x.view(), &f).unwrap();
        let expect = f.residual.sum_axis(Axis(0)) * (-2.0 / f.denom);
        for (a, b) in g.b_pre.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn least_activated_mode_ignores_mask() {
        let (p, mut cfg, x, _, mean) = random_instance(7);
        cfg.aux_selection = AuxSelection::LeastActivated;
        let f = forward_loss(&p, &cfg, x.view(), &[false; 8], mean.view()).unwrap();
        assert!(f.aux_active);
        assert!(f.z_aux.codes.iter().all(|c| c.len() <= cfg.k_aux));
    }

    #[test]
    fn zero_spread_is_numeric_error() {
        let (p, cfg, _, dead, _) = random_instance(8);
        let x = Array2::from_elem((2, 4), 0.5);
        let mean = Array1::from_elem(4, 0.5);
        assert!(matches!(
            forward_loss(&p, &cfg, x.view(), &dead, mean.view()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn mask_length_checked() {
        let (p, cfg, x, _, mean) = random_instance(9);
        assert!(matches!(
            forward_loss(&p, &cfg, x.view(), &[false; 3], mean.view()),
            Err(Error::Shape(_))
        ));
    }

    fn coords(p: &mut KSaeParams<f64>) -> Vec<&mut f64> {
        p.w_enc
            .iter_mut()
            .chain(p.b_enc.iter_mut())
            .chain(p.w_dec.iter_mut())
            .chain(p.b_pre.iter_mut())
            .collect()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let h = 1e-5;
        for seed in 0..20 {
            let (p, cfg, x, dead, mean) = random_instance(100 + seed);
            let f = forward_loss(&p, &cfg, x.view(), &dead, mean.view()).unwrap();
            let g = backward(&p, &cfg, x.view(), &f).unwrap();
            let mut g = g;
            let analytic: Vec<f64> = coords(&mut g).into_iter().map(|v| *v).collect();
            let count = analytic.len();
            for i in 0..count {
                let loss_at = |delta: f64| {
                    let mut q = p.clone();
                    *coords(&mut q)[i] += delta;
                    forward_loss(&q, &cfg, x.view(), &dead, mean.view()).unwrap().loss_total
                };
                let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
                let a = analytic[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-5, "seed {seed} coord {i}: analytic {a} fd {fd}");
            }
        }
    }

    #[test]
    fn small_gradient_step_decreases_loss() {
        for seed in 0..10 {
            let (mut p, cfg, x, dead, mean) = random_instance(200 + seed);
            let f = forward_loss(&p, &cfg, x.view(), &dead, mean.view()).unwrap();
            let g = backward(&p, &cfg, x.view(), &f).unwrap();
            p.w_enc.scaled_add(-1e-4, &g.w_enc);
            p.b_enc.scaled_add(-1e-4, &g.b_enc);
            p.w_dec.scaled_add(-1e-4, &g.w_dec);
            p.b_pre.scaled_add(-1e-4, &g.b_pre);
            let after = forward_loss(&p, &cfg, x.view(), &dead, mean.view()).unwrap();
            assert!(after.loss_total < f.loss_total);
        }
    }
}
