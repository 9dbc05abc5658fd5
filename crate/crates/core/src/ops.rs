//! Convolution, ReLU and linear layers with paired backward passes.
//!
//! Convolutions are plain cross-correlations over `[C, H, W]` single-image
//! tensors; batching is handled by callers slicing a batch axis. The slice
//! variants exist so the backbone can run on sub-slices of batched buffers
//! without copying.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output side length of a convolution. Errors if the geometry is invalid.
pub fn conv_out_len(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if k % 2 == 0 {
        return Err(Error::Config(format!("kernel size {k} must be odd")));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let padded = input + 2 * padding;
    if padded < k {
        return Err(Error::Shape(format!(
            "input {input} with padding {padding} smaller than kernel {k}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let oh = conv_out_len(h, k, stride, padding)?;
        let ow = conv_out_len(w, k, stride, padding)?;
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            oh,
            ow,
        })
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.oh * self.ow
    }

    pub fn kernel_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }
}

fn pad_input<T: Scalar>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let hp = g.h + 2 * g.padding;
    let wp = g.w + 2 * g.padding;
    let mut padded = vec![T::zero(); g.c_in * hp * wp];
    for c in 0..g.c_in {
        for y in 0..g.h {
            let src = &input[(c * g.h + y) * g.w..(c * g.h + y) * g.w + g.w];
            let dst_off = (c * hp + y + g.padding) * wp + g.padding;
            padded[dst_off..dst_off + g.w].copy_from_slice(src);
        }
    }
    padded
}

/// Cross-correlation of a `[C_in, H, W]` slice with `[C_out, C_in, k, k]`
/// kernels into a `[C_out, OH, OW]` slice.
pub fn conv2d_slice<T: Scalar>(input: &[T], kernel: &[T], g: &ConvGeom, out: &mut [T]) {
    debug_assert_eq!(input.len(), g.in_len());
    debug_assert_eq!(kernel.len(), g.kernel_len());
    debug_assert_eq!(out.len(), g.out_len());
    let hp = g.h + 2 * g.padding;
    let wp = g.w + 2 * g.padding;
    let padded;
    let src: &[T] = if g.padding == 0 {
        input
    } else {
        padded = pad_input(input, g);
        &padded
    };
    out.fill(T::zero());
    let plane_out = g.oh * g.ow;
    for co in 0..g.c_out {
        let out_plane = &mut out[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let in_plane = &src[ci * hp * wp..(ci + 1) * hp * wp];
            let kbase = ((co * g.c_in) + ci) * g.k * g.k;
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wgt = kernel[kbase + ky * g.k + kx];
                    for oy in 0..g.oh {
                        let in_row = &in_plane[(oy * g.stride + ky) * wp + kx..];
                        let out_row = &mut out_plane[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            for (o, &iv) in out_row.iter_mut().zip(in_row.iter()) {
                                *o += wgt * iv;
                            }
                        } else {
                            for (ox, o) in out_row.iter_mut().enumerate() {
                                *o += wgt * in_row[ox * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the input, accumulated into `d_input`.
pub fn conv2d_input_grad_slice<T: Scalar>(
    grad_out: &[T],
    kernel: &[T],
    g: &ConvGeom,
    d_input: &mut [T],
) {
    debug_assert_eq!(grad_out.len(), g.out_len());
    debug_assert_eq!(d_input.len(), g.in_len());
    let hp = g.h + 2 * g.padding;
    let wp = g.w + 2 * g.padding;
    let mut d_padded = vec![T::zero(); g.c_in * hp * wp];
    let plane_out = g.oh * g.ow;
    for co in 0..g.c_out {
        let go_plane = &grad_out[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let dp_plane = &mut d_padded[ci * hp * wp..(ci + 1) * hp * wp];
            let kbase = ((co * g.c_in) + ci) * g.k * g.k;
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wgt = kernel[kbase + ky * g.k + kx];
                    for oy in 0..g.oh {
                        let go_row = &go_plane[oy * g.ow..(oy + 1) * g.ow];
                        let dp_row = &mut dp_plane[(oy * g.stride + ky) * wp + kx..];
                        if g.stride == 1 {
                            for (d, &go) in dp_row.iter_mut().zip(go_row.iter()) {
                                *d += wgt * go;
                            }
                        } else {
                            for (ox, &go) in go_row.iter().enumerate() {
                                dp_row[ox * g.stride] += wgt * go;
                            }
                        }
                    }
                }
            }
        }
    }
    // crop padding back off
    for c in 0..g.c_in {
        for y in 0..g.h {
            let src_off = (c * hp + y + g.padding) * wp + g.padding;
            let dst = &mut d_input[(c * g.h + y) * g.w..(c * g.h + y) * g.w + g.w];
            for (d, &s) in dst.iter_mut().zip(&d_padded[src_off..src_off + g.w]) {
                *d += s;
            }
        }
    }
}

/// Gradient with respect to the kernel, accumulated into `d_kernel`.
pub fn conv2d_kernel_grad_slice<T: Scalar>(
    input: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    d_kernel: &mut [T],
) {
    debug_assert_eq!(d_kernel.len(), g.kernel_len());
    let hp = g.h + 2 * g.padding;
    let wp = g.w + 2 * g.padding;
    let padded;
    let src: &[T] = if g.padding == 0 {
        input
    } else {
        padded = pad_input(input, g);
        &padded
    };
    let plane_out = g.oh * g.ow;
    for co in 0..g.c_out {
        let go_plane = &grad_out[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let in_plane = &src[ci * hp * wp..(ci + 1) * hp * wp];
            let kbase = ((co * g.c_in) + ci) * g.k * g.k;
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let mut acc = T::zero();
                    for oy in 0..g.oh {
                        let go_row = &go_plane[oy * g.ow..(oy + 1) * g.ow];
                        let in_row = &in_plane[(oy * g.stride + ky) * wp + kx..];
                        if g.stride == 1 {
                            for (&go, &iv) in go_row.iter().zip(in_row.iter()) {
                                acc += go * iv;
                            }
                        } else {
                            for (ox, &go) in go_row.iter().enumerate() {
                                acc += go * in_row[ox * g.stride];
                            }
                        }
                    }
                    d_kernel[kbase + ky * g.k + kx] += acc;
                }
            }
        }
    }
}

fn conv_geom_for<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    let (ish, ksh) = (input.shape(), kernels.shape());
    if ish.len() != 3 || ksh.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d wants input [C,H,W] and kernels [Co,Ci,k,k], got {ish:?} and {ksh:?}"
        )));
    }
    if ish[0] != ksh[1] {
        return Err(Error::Shape(format!(
            "input channels {} do not match kernel C_in {}",
            ish[0], ksh[1]
        )));
    }
    if ksh[2] != ksh[3] {
        return Err(Error::Shape(format!(
            "kernels must be square, got {}x{}",
            ksh[2], ksh[3]
        )));
    }
    ConvGeom::new(ish[0], ish[1], ish[2], ksh[0], ksh[2], stride, padding)
}

/// 2-D cross-correlation: `[C_in,H,W] * [C_out,C_in,k,k] -> [C_out,H',W']`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom_for(input, kernels, stride, padding)?;
    let mut out = Tensor::zeros(&[g.c_out, g.oh, g.ow]);
    conv2d_slice(input.data(), kernels.data(), &g, out.data_mut());
    Ok(out)
}

/// Backward pass of [`conv2d`]: gradients for the input and the kernels.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = conv_geom_for(input, kernels, stride, padding)?;
    if grad_out.shape() != [g.c_out, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            [g.c_out, g.oh, g.ow]
        )));
    }
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_kernel = Tensor::zeros(kernels.shape());
    conv2d_input_grad_slice(grad_out.data(), kernels.data(), &g, d_input.data_mut());
    conv2d_kernel_grad_slice(input.data(), grad_out.data(), &g, d_kernel.data_mut());
    Ok((d_input, d_kernel))
}

/// Elementwise `max(0, x)`.
pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(input.shape(), |i| input.data()[i].max(T::zero()))
}

/// ReLU gradient: passes where the forward input was strictly positive
/// (gradient 0 at exactly 0).
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(input.shape(), grad_out.shape());
    Tensor::from_fn(input.shape(), |i| {
        if input.data()[i] > T::zero() {
            grad_out.data()[i]
        } else {
            T::zero()
        }
    })
}

pub fn relu_slice<T: Scalar>(x: &mut [T]) {
    for v in x {
        *v = v.max(T::zero());
    }
}

/// Affine map `y = W x + b` for a single vector `[d_in]`.
pub fn linear<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (d_out, d_in) = linear_dims(input, weight, bias)?;
    let mut out = Tensor::zeros(&[d_out]);
    for o in 0..d_out {
        let row = &weight.data()[o * d_in..(o + 1) * d_in];
        let mut acc = bias.data()[o];
        for (wv, xv) in row.iter().zip(input.data()) {
            acc += *wv * *xv;
        }
        out.data_mut()[o] = acc;
    }
    Ok(out)
}

/// Backward pass of [`linear`].
pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (d_out, d_in) = linear_dims(input, weight, bias)?;
    if grad_out.shape() != [d_out] {
        return Err(Error::Shape(format!(
            "grad_out shape {:?}, expected [{d_out}]",
            grad_out.shape()
        )));
    }
    let mut d_input = Tensor::zeros(&[d_in]);
    let mut d_weight = Tensor::zeros(&[d_out, d_in]);
    let d_bias = grad_out.clone();
    for o in 0..d_out {
        let go = grad_out.data()[o];
        let row = &weight.data()[o * d_in..(o + 1) * d_in];
        let dw_row = &mut d_weight.data_mut()[o * d_in..(o + 1) * d_in];
        for i in 0..d_in {
            d_input.data_mut()[i] += go * row[i];
            dw_row[i] = go * input.data()[i];
        }
    }
    Ok((d_input, d_weight, d_bias))
}

fn linear_dims<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize)> {
    if input.rank() != 1 || weight.rank() != 2 || bias.rank() != 1 {
        return Err(Error::Shape(format!(
            "linear wants x[d_in], W[d_out,d_in], b[d_out]; got {:?}, {:?}, {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let (d_out, d_in) = (weight.shape()[0], weight.shape()[1]);
    if input.shape()[0] != d_in || bias.shape()[0] != d_out {
        return Err(Error::Shape(format!(
            "linear dims: x {:?} vs W {:?} vs b {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    Ok((d_out, d_in))
}
