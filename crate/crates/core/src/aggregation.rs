//! Spatial pooling of `[C, H, W]` maps into vectors: generalized-mean
//! pooling with a learnable exponent, L2 normalization, and post-hoc
//! descriptor truncation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Generalized-mean pooling parameters. `p` is learnable; optimization
/// clamps it to stay >= 1.
#[derive(Clone, Copy, Debug)]
pub struct GemParams<T> {
    pub p: T,
    pub eps: T,
}

impl<T: Scalar> Default for GemParams<T> {
    fn default() -> Self {
        GemParams {
            p: T::fromf(3.0),
            eps: T::fromf(1e-6),
        }
    }
}

/// Cache for [`gem_pool_backward`].
#[derive(Clone, Debug)]
pub struct GemCache<T> {
    clamped: Tensor<T>,
    mean_pow: Vec<T>,
    out: Vec<T>,
    p: T,
    eps: T,
}

/// Per-channel generalized mean `f_c = (mean_{h,w} x_c^p)^(1/p)` over
/// eps-clamped activations. Returns the pooled `[C]` vector and a cache.
pub fn gem_pool<T: Scalar>(input: &Tensor<T>, params: GemParams<T>) -> Result<(Tensor<T>, GemCache<T>)> {
    if input.rank() != 3 {
        return Err(Error::Shape(format!(
            "gem_pool wants [C,H,W], got {:?}",
            input.shape()
        )));
    }
    let (c, hw) = (input.shape()[0], input.shape()[1] * input.shape()[2]);
    let clamped = Tensor::from_fn(input.shape(), |i| input.data()[i].max(params.eps));
    let mut out = Tensor::zeros(&[c]);
    let mut mean_pow = Vec::with_capacity(c);
    let inv_hw = T::one() / T::fromf(hw as f64);
    for ch in 0..c {
        let mut acc = T::zero();
        for &v in &clamped.data()[ch * hw..(ch + 1) * hw] {
            acc += v.powf(params.p);
        }
        let m = acc * inv_hw;
        mean_pow.push(m);
        out.data_mut()[ch] = m.powf(T::one() / params.p);
    }
    let cache = GemCache {
        clamped,
        mean_pow,
        out: out.data().to_vec(),
        p: params.p,
        eps: params.eps,
    };
    Ok((out, cache))
}

/// Backward pass of [`gem_pool`]: `(d_input, d_p)`.
///
/// `d_input` is zero where the forward input was clamped at eps; `d_p` is
/// the scalar gradient of the loss with respect to the exponent.
pub fn gem_pool_backward<T: Scalar>(
    input: &Tensor<T>,
    cache: &GemCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, T)> {
    let (c, hw) = (input.shape()[0], input.shape()[1] * input.shape()[2]);
    if grad_out.shape() != [c] {
        return Err(Error::Shape(format!(
            "grad_out {:?}, expected [{c}]",
            grad_out.shape()
        )));
    }
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_p = T::zero();
    let p = cache.p;
    let inv_hw = T::one() / T::fromf(hw as f64);
    for ch in 0..c {
        let g = grad_out.data()[ch];
        let m = cache.mean_pow[ch];
        let f = cache.out[ch];
        // d f / d x_i = f^(1-p) * x_i^(p-1) / HW  on unclamped entries
        let scale = g * f.powf(T::one() - p) * inv_hw;
        let mut mean_pow_log = T::zero();
        for i in 0..hw {
            let idx = ch * hw + i;
            let x = cache.clamped.data()[idx];
            if input.data()[idx] > cache.eps {
                d_input.data_mut()[idx] = scale * x.powf(p - T::one());
            }
            mean_pow_log += x.powf(p) * x.ln();
        }
        mean_pow_log = mean_pow_log * inv_hw;
        // d f / d p = f * ( -ln(m)/p^2 + (dm/dp) / (p m) )
        let df_dp = f * (-m.ln() / (p * p) + mean_pow_log / (p * m));
        d_p += g * df_dp;
    }
    Ok((d_input, d_p))
}

/// Plain spatial average pooling `[C,H,W] -> [C]`.
pub fn avg_pool_spatial<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(Error::Shape(format!(
            "avg_pool_spatial wants [C,H,W], got {:?}",
            input.shape()
        )));
    }
    let (c, hw) = (input.shape()[0], input.shape()[1] * input.shape()[2]);
    let inv = T::one() / T::fromf(hw as f64);
    let mut out = Tensor::zeros(&[c]);
    for ch in 0..c {
        out.data_mut()[ch] = input.data()[ch * hw..(ch + 1) * hw]
            .iter()
            .copied()
            .sum::<T>()
            * inv;
    }
    Ok(out)
}

/// Backward pass of [`avg_pool_spatial`].
pub fn avg_pool_spatial_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let hw = input_shape[1] * input_shape[2];
    let inv = T::one() / T::fromf(hw as f64);
    Tensor::from_fn(input_shape, |i| grad_out.data()[i / hw] * inv)
}

/// `v / ||v||_2`. Errors on (near-)zero vectors.
pub fn l2_normalize<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    let norm = v.l2_norm();
    if norm.tof() < 1e-30 {
        return Err(Error::Numeric("cannot normalize a zero vector".into()));
    }
    Ok(v.clone().scale(T::one() / norm))
}

/// Backward pass of [`l2_normalize`] given the *input* vector.
pub fn l2_normalize_backward<T: Scalar>(v: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let norm = v.l2_norm();
    if norm.tof() < 1e-30 {
        return Err(Error::Numeric("cannot normalize a zero vector".into()));
    }
    let inv = T::one() / norm;
    let unit: Vec<T> = v.data().iter().map(|&x| x * inv).collect();
    let dot: T = unit
        .iter()
        .zip(grad_out.data())
        .map(|(&u, &g)| u * g)
        .sum();
    Ok(Tensor::from_fn(v.shape(), |i| {
        (grad_out.data()[i] - unit[i] * dot) * inv
    }))
}

/// Keep the first `target_dim` coordinates and re-normalize. A cheap
/// post-hoc approximation of retraining at a lower output dimension.
pub fn reduce_dim<T: Scalar>(descriptor: &Tensor<T>, target_dim: usize) -> Result<Tensor<T>> {
    if descriptor.rank() != 1 {
        return Err(Error::Shape(format!(
            "reduce_dim wants a vector, got {:?}",
            descriptor.shape()
        )));
    }
    if target_dim < 1 {
        return Err(Error::Config("target_dim must be >= 1".into()));
    }
    if target_dim > descriptor.len() {
        return Err(Error::Config(format!(
            "target_dim {} exceeds descriptor length {}",
            target_dim,
            descriptor.len()
        )));
    }
    let head = Tensor::from_vec(&[target_dim], descriptor.data()[..target_dim].to_vec())?;
    l2_normalize(&head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::Rng;

    #[test]
    fn gem_at_p1_is_arithmetic_mean() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::random_uniform(&[3, 4, 4], 0.0, 2.0, &mut rng);
        let (gem, _) = gem_pool(
            &x,
            GemParams {
                p: 1.0,
                eps: 1e-6,
            },
        )
        .unwrap();
        let mean = avg_pool_spatial(&x).unwrap();
        assert!(gem.max_abs_diff(&mean) < 1e-12);
    }

    #[test]
    fn gem_constant_channel_is_that_constant() {
        let x = Tensor::<f64>::filled(&[2, 3, 3], 0.7);
        for p in [1.0, 2.5, 7.0] {
            let (gem, _) = gem_pool(&x, GemParams { p, eps: 1e-6 }).unwrap();
            for &v in gem.data() {
                assert!((v - 0.7).abs() < 1e-9, "p={p}: {v}");
            }
        }
    }

    #[test]
    fn gem_large_p_approaches_max() {
        // GeM(p) >= max * count^(-1/p); at p=64 a 3-element channel sits
        // within (1/3)^(1/64) ~ 98.3% of its max.
        let x = Tensor::<f64>::from_vec(&[1, 1, 3], vec![0.3, 0.6, 1.0]).unwrap();
        let (gem, _) = gem_pool(
            &x,
            GemParams {
                p: 64.0,
                eps: 1e-6,
            },
        )
        .unwrap();
        let rel = (gem.data()[0] - 1.0).abs();
        assert!(rel < 0.02, "p=64 within 2% of max: rel {rel}");
        assert!(gem.data()[0] <= 1.0 + 1e-12);
    }

    #[test]
    fn gem_is_permutation_invariant_over_positions() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f64>::random_uniform(&[1, 3, 3], 0.0, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..9).collect();
        rng.shuffle(&mut perm);
        let shuffled = Tensor::<f64>::from_fn(&[1, 3, 3], |i| x.data()[perm[i]]);
        let p = GemParams {
            p: 3.0,
            eps: 1e-6,
        };
        let (a, _) = gem_pool(&x, p).unwrap();
        let (b, _) = gem_pool(&shuffled, p).unwrap();
        assert!((a.data()[0] - b.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn gem_gradients_pass_finite_differences() {
        let mut rng = Rng::new(4);
        let x = Tensor::<f64>::random_uniform(&[2, 3, 3], 0.05, 1.5, &mut rng);
        for p in [1.5, 3.0, 6.0] {
            let params = GemParams { p, eps: 1e-6 };
            let (out, cache) = gem_pool(&x, params).unwrap();
            let ones = Tensor::filled(out.shape(), 1.0);
            let (dx, dp) = gem_pool_backward(&x, &cache, &ones).unwrap();
            let r = grad_check(
                |probe| gem_pool(probe, params).unwrap().0.sum(),
                &x,
                &dx,
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "p={p}: dx rel err {}", r.max_rel_error);

            // d/dp via scalar finite differences
            let h = 1e-6;
            let up = gem_pool(&x, GemParams { p: p + h, eps: 1e-6 })
                .unwrap()
                .0
                .sum();
            let down = gem_pool(&x, GemParams { p: p - h, eps: 1e-6 })
                .unwrap()
                .0
                .sum();
            let numeric = (up - down) / (2.0 * h);
            let rel = (dp - numeric).abs() / numeric.abs().max(1e-8);
            assert!(rel < 1e-4, "p={p}: dp analytic {dp} vs numeric {numeric}");
        }
    }

    #[test]
    fn l2_normalize_basics() {
        let v = Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let u = l2_normalize(&v).unwrap();
        assert!((u.data()[0] - 0.6).abs() < 1e-12);
        assert!((u.data()[1] - 0.8).abs() < 1e-12);

        let already = l2_normalize(&u).unwrap();
        assert!(already.max_abs_diff(&u) < 1e-7);

        let scaled = l2_normalize(&v.clone().scale(17.0)).unwrap();
        assert!(scaled.max_abs_diff(&u) < 1e-12);

        assert!(l2_normalize(&Tensor::<f64>::zeros(&[3])).is_err());
    }

    #[test]
    fn l2_normalize_gradient_checks_out() {
        let mut rng = Rng::new(5);
        let v = Tensor::<f64>::random_normal(&[6], 1.0, &mut rng);
        let g = Tensor::<f64>::random_normal(&[6], 1.0, &mut rng);
        let dv = l2_normalize_backward(&v, &g).unwrap();
        let r = grad_check(
            |probe| {
                let u = l2_normalize(probe).unwrap();
                u.data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum()
            },
            &v,
            &dv,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "rel err {}", r.max_rel_error);
    }

    #[test]
    fn reduce_dim_identity_and_mass_preservation() {
        let mut rng = Rng::new(6);
        let v = l2_normalize(&Tensor::<f64>::random_normal(&[8], 1.0, &mut rng)).unwrap();
        let same = reduce_dim(&v, 8).unwrap();
        assert!(same.max_abs_diff(&v) < 1e-12);

        // unit vector with all mass in the first 3 dims
        let mut w = Tensor::<f64>::zeros(&[8]);
        w.data_mut()[0] = 0.6;
        w.data_mut()[1] = 0.8;
        let cut = reduce_dim(&w, 3).unwrap();
        assert!((cut.data()[0] - 0.6).abs() < 1e-12);
        assert!((cut.data()[1] - 0.8).abs() < 1e-12);
        assert_eq!(cut.data()[2], 0.0);

        assert!(reduce_dim(&v, 0).is_err());
        assert!(reduce_dim(&v, 9).is_err());
        let reduced = reduce_dim(&v, 4).unwrap();
        assert!((reduced.l2_norm() - 1.0).abs() < 1e-9);
    }
}
