//! Batch normalization over `[B, C, N, H, W]` feature maps.
//!
//! Statistics are pooled per channel over the batch, orientation and
//! spatial axes jointly, never per orientation. This is what makes the
//! layer commute with cyclic shifts of the orientation axis and with
//! spatial rotations, so it can sit inside an equivariant stack.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Running statistics for inference mode. Updates are not synchronized
/// internally; training drives them from a single thread.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
}

impl<T: Scalar> NormState<T> {
    pub fn new(channels: usize) -> Self {
        NormState {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
            momentum: T::fromf(DEFAULT_MOMENTUM),
        }
    }
}

/// Cache for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub per_channel: usize,
}

fn check_shapes<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    if input.rank() != 5 {
        return Err(Error::Shape(format!(
            "normalize_batch wants [B,C,N,H,W], got {:?}",
            input.shape()
        )));
    }
    let (b, c) = (input.shape()[0], input.shape()[1]);
    let per_channel = b * input.shape()[2] * input.shape()[3] * input.shape()[4];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "gamma/beta must be [{c}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((b, c, per_channel))
}

/// Iterate flat ranges of one channel within `[B,C,N,H,W]` data.
#[inline]
fn channel_chunks(shape: &[usize], c: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let (b, cn, inner) = (shape[0], shape[1], shape[2] * shape[3] * shape[4]);
    (0..b).map(move |bi| {
        let start = (bi * cn + c) * inner;
        start..start + inner
    })
}

/// Flat ranges of one `(batch, orientation)` block of a channel.
#[inline]
fn orientation_chunks(
    shape: &[usize],
    c: usize,
) -> impl Iterator<Item = std::ops::Range<usize>> {
    let (b, cn, n, hw) = (shape[0], shape[1], shape[2], shape[3] * shape[4]);
    (0..b).flat_map(move |bi| {
        (0..n).map(move |ni| {
            let start = ((bi * cn + c) * n + ni) * hw;
            start..start + hw
        })
    })
}

/// Sum `f` over a channel, reducing per-(batch, orientation) partial sums
/// in value-sorted order. This makes the statistic bitwise independent of
/// how values are distributed across orientation slots, so normalization
/// commutes exactly with cyclic shifts of the orientation axis.
fn channel_stat<T: Scalar>(
    data: &[T],
    shape: &[usize],
    c: usize,
    f: impl Fn(T) -> T,
) -> T {
    let mut partials: Vec<T> = orientation_chunks(shape, c)
        .map(|range| {
            let mut acc = T::zero();
            for &v in &data[range] {
                acc += f(v);
            }
            acc
        })
        .collect();
    partials.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    partials.into_iter().sum()
}

/// Training-mode normalization: per-channel batch statistics, optional
/// running-statistics update. Returns output and backward cache.
pub fn normalize_batch_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    state: Option<&mut NormState<T>>,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (_b, c, per_channel) = check_shapes(input, gamma, beta)?;
    if per_channel < 2 {
        return Err(Error::Data(format!(
            "training-mode normalization needs >= 2 samples per channel, got {per_channel}"
        )));
    }
    let shape = input.shape().to_vec();
    let mut out = Tensor::zeros(&shape);
    let mut x_hat = Tensor::zeros(&shape);
    let mut inv_std = Vec::with_capacity(c);
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    let count = T::fromf(per_channel as f64);
    for ch in 0..c {
        let sum = channel_stat(input.data(), &shape, ch, |v| v);
        let mean = sum / count;
        let var_sum = channel_stat(input.data(), &shape, ch, |v| {
            let d = v - mean;
            d * d
        });
        let var = var_sum / count;
        let istd = T::one() / (var + eps).sqrt();
        let (g, bta) = (gamma.data()[ch], beta.data()[ch]);
        for range in channel_chunks(&shape, ch) {
            for i in range {
                let xh = (input.data()[i] - mean) * istd;
                x_hat.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + bta;
            }
        }
        inv_std.push(istd);
        means.push(mean);
        vars.push(var);
    }
    if let Some(st) = state {
        let m = st.momentum;
        for ch in 0..c {
            let rm = st.running_mean.data()[ch];
            st.running_mean.data_mut()[ch] = (T::one() - m) * rm + m * means[ch];
            let rv = st.running_var.data()[ch];
            st.running_var.data_mut()[ch] = (T::one() - m) * rv + m * vars[ch];
        }
    }
    Ok((
        out,
        NormCache {
            x_hat,
            inv_std,
            per_channel,
        },
    ))
}

/// Inference-mode normalization using running statistics.
pub fn normalize_batch_infer<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    state: &NormState<T>,
) -> Result<Tensor<T>> {
    let (_b, c, _) = check_shapes(input, gamma, beta)?;
    if state.running_mean.shape() != [c] {
        return Err(Error::Shape(format!(
            "running stats sized {:?}, want [{c}]",
            state.running_mean.shape()
        )));
    }
    let shape = input.shape().to_vec();
    let mut out = Tensor::zeros(&shape);
    for ch in 0..c {
        let mean = state.running_mean.data()[ch];
        let istd = T::one() / (state.running_var.data()[ch] + eps).sqrt();
        let (g, bta) = (gamma.data()[ch], beta.data()[ch]);
        for range in channel_chunks(&shape, ch) {
            for i in range {
                out.data_mut()[i] = g * (input.data()[i] - mean) * istd + bta;
            }
        }
    }
    Ok(out)
}

/// Backward pass for training-mode normalization.
/// Returns `(d_input, d_gamma, d_beta)`.
pub fn normalize_batch_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let shape = cache.x_hat.shape().to_vec();
    if grad_out.shape() != shape {
        return Err(Error::Shape(format!(
            "grad_out {:?} vs cached activations {:?}",
            grad_out.shape(),
            shape
        )));
    }
    let c = shape[1];
    let count = T::fromf(cache.per_channel as f64);
    let mut d_input = Tensor::zeros(&shape);
    let mut d_gamma = Tensor::zeros(&[c]);
    let mut d_beta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for range in channel_chunks(&shape, ch) {
            for i in range {
                let g = grad_out.data()[i];
                sum_g += g;
                sum_gx += g * cache.x_hat.data()[i];
            }
        }
        d_beta.data_mut()[ch] = sum_g;
        d_gamma.data_mut()[ch] = sum_gx;
        let scale = gamma.data()[ch] * cache.inv_std[ch];
        let mean_g = sum_g / count;
        let mean_gx = sum_gx / count;
        for range in channel_chunks(&shape, ch) {
            for i in range {
                let g = grad_out.data()[i];
                let xh = cache.x_hat.data()[i];
                d_input.data_mut()[i] = scale * (g - mean_g - xh * mean_gx);
            }
        }
    }
    Ok((d_input, d_gamma, d_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn cyclic_shift_n(t: &Tensor<f64>, s: usize) -> Tensor<f64> {
        // [B,C,N,H,W]: orientation n moves to (n+s) mod N
        let sh = t.shape().to_vec();
        let (b, c, n, hw) = (sh[0], sh[1], sh[2], sh[3] * sh[4]);
        let mut out = Tensor::zeros(&sh);
        for bi in 0..b {
            for ci in 0..c {
                for ni in 0..n {
                    let src = ((bi * c + ci) * n + ni) * hw;
                    let dst = ((bi * c + ci) * n + (ni + s) % n) * hw;
                    out.data_mut()[dst..dst + hw].copy_from_slice(&t.data()[src..src + hw]);
                }
            }
        }
        out
    }

    #[test]
    fn constant_input_normalizes_to_beta() {
        let input = Tensor::<f64>::filled(&[2, 3, 1, 2, 2], 4.2);
        let gamma = Tensor::filled(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let (out, _) = normalize_batch_train(&input, &gamma, &beta, 1e-5, None).unwrap();
        assert!(out.max_abs() < 1e-9, "constant input should map to zeros");

        let beta2 = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let gamma0 = Tensor::zeros(&[3]);
        let (out2, _) = normalize_batch_train(&input, &gamma0, &beta2, 1e-5, None).unwrap();
        for ch in 0..3 {
            for bi in 0..2 {
                let off = (bi * 3 + ch) * 4;
                for i in 0..4 {
                    assert_eq!(out2.data()[off + i], beta2.data()[ch]);
                }
            }
        }
    }

    #[test]
    fn commutes_exactly_with_orientation_shift() {
        let mut rng = Rng::new(17);
        let input = Tensor::<f64>::random_normal(&[2, 3, 4, 3, 3], 1.0, &mut rng);
        let gamma = Tensor::random_normal(&[3], 1.0, &mut rng);
        let beta = Tensor::random_normal(&[3], 1.0, &mut rng);
        for s in 0..4 {
            let shifted = cyclic_shift_n(&input, s);
            let (a, _) = normalize_batch_train(&shifted, &gamma, &beta, 1e-5, None).unwrap();
            let (b, _) = normalize_batch_train(&input, &gamma, &beta, 1e-5, None).unwrap();
            let b_shifted = cyclic_shift_n(&b, s);
            assert_eq!(a, b_shifted, "shift {s} must commute exactly");
        }
    }

    #[test]
    fn commutes_exactly_with_arbitrary_orientation_permutation() {
        let mut rng = Rng::new(23);
        let input = Tensor::<f64>::random_normal(&[2, 2, 6, 2, 2], 1.0, &mut rng);
        let gamma = Tensor::random_normal(&[2], 1.0, &mut rng);
        let beta = Tensor::random_normal(&[2], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..6).collect();
        rng.shuffle(&mut perm);
        let permute = |t: &Tensor<f64>| {
            let sh = t.shape().to_vec();
            let (b, c, n, hw) = (sh[0], sh[1], sh[2], sh[3] * sh[4]);
            let mut out = Tensor::zeros(&sh);
            for bi in 0..b {
                for ci in 0..c {
                    for ni in 0..n {
                        let src = ((bi * c + ci) * n + ni) * hw;
                        let dst = ((bi * c + ci) * n + perm[ni]) * hw;
                        out.data_mut()[dst..dst + hw]
                            .copy_from_slice(&t.data()[src..src + hw]);
                    }
                }
            }
            out
        };
        let (a, _) = normalize_batch_train(&permute(&input), &gamma, &beta, 1e-5, None).unwrap();
        let (b, _) = normalize_batch_train(&input, &gamma, &beta, 1e-5, None).unwrap();
        assert_eq!(a, permute(&b), "normalization must commute with any N-axis permutation");
    }

    #[test]
    fn zero_variance_handled_by_eps() {
        let input = Tensor::<f64>::filled(&[1, 1, 1, 2, 2], 3.0);
        let gamma = Tensor::filled(&[1], 2.0);
        let beta = Tensor::zeros(&[1]);
        let (out, _) = normalize_batch_train(&input, &gamma, &beta, 1e-5, None).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn running_stats_feed_inference() {
        let mut rng = Rng::new(5);
        let input = Tensor::<f64>::random_normal(&[4, 2, 1, 3, 3], 2.0, &mut rng);
        let gamma = Tensor::filled(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let mut state = NormState::new(2);
        state.momentum = 1.0; // adopt batch stats outright
        normalize_batch_train(&input, &gamma, &beta, 1e-5, Some(&mut state)).unwrap();
        let infer = normalize_batch_infer(&input, &gamma, &beta, 1e-5, &state).unwrap();
        let (train, _) = normalize_batch_train(&input, &gamma, &beta, 1e-5, None).unwrap();
        assert!(infer.max_abs_diff(&train) < 1e-12);
    }

    #[test]
    fn needs_two_samples_per_channel() {
        let input = Tensor::<f64>::zeros(&[1, 2, 1, 1, 1]);
        let gamma = Tensor::filled(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        assert!(normalize_batch_train(&input, &gamma, &beta, 1e-5, None).is_err());
    }
}
