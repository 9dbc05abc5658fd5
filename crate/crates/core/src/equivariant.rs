//! Cyclic-group steerable convolution layers.
//!
//! Feature maps carry an explicit orientation axis (`[C, N, H, W]` with
//! group order `N`). A rotation of the input by group angle `theta_s` acts
//! on such a map as a spatial rotation combined with a cyclic shift of the
//! orientation axis; every layer here commutes with that action — exactly
//! for quarter turns, approximately (via masked bilinear resampling) for
//! the 45-degree steps of C8.

use crate::error::{Error, Result};
use crate::group::GroupSpec;
use crate::ops::{
    conv2d, conv2d_backward, conv2d_input_grad_slice, conv2d_kernel_grad_slice, conv2d_slice,
    ConvGeom,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Plane rotation primitives
// ---------------------------------------------------------------------------

/// How a square plane is rotated.
#[derive(Clone, Copy, Debug)]
enum Rotation {
    /// Exact index permutation by `q` counterclockwise quarter turns.
    Quarter(usize),
    /// Masked bilinear resampling by an arbitrary angle (radians, ccw).
    Bilinear(f64),
}

fn plane_rotation(group: GroupSpec, index: usize) -> Rotation {
    match group.quarter_turns(index) {
        Some(q) => Rotation::Quarter(q % 4),
        None => Rotation::Bilinear(group.angle(index)),
    }
}

/// One counterclockwise quarter turn: `out[y][x] = in[x][side-1-y]`.
fn rotate_plane_quarter<T: Copy>(src: &[T], side: usize, q: usize, dst: &mut [T]) {
    match q % 4 {
        0 => dst.copy_from_slice(src),
        1 => {
            for y in 0..side {
                for x in 0..side {
                    dst[y * side + x] = src[x * side + (side - 1 - y)];
                }
            }
        }
        2 => {
            for y in 0..side {
                for x in 0..side {
                    dst[y * side + x] = src[(side - 1 - y) * side + (side - 1 - x)];
                }
            }
        }
        _ => {
            for y in 0..side {
                for x in 0..side {
                    dst[y * side + x] = src[(side - 1 - x) * side + y];
                }
            }
        }
    }
}

#[inline]
fn inside_disk(row: f64, col: f64, center: f64, radius2: f64) -> bool {
    let dr = row - center;
    let dc = col - center;
    dr * dr + dc * dc <= radius2
}

/// Taps and weights of one bilinear sample, restricted to in-grid,
/// in-disk source cells. Returns up to 4 `(flat_index, weight)` pairs.
fn bilinear_taps(
    side: usize,
    s_row: f64,
    s_col: f64,
    center: f64,
    radius2: f64,
) -> impl Iterator<Item = (usize, f64)> {
    let r0 = s_row.floor();
    let c0 = s_col.floor();
    let fr = s_row - r0;
    let fc = s_col - c0;
    let cells = [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c0 + 1.0, (1.0 - fr) * fc),
        (r0 + 1.0, c0, fr * (1.0 - fc)),
        (r0 + 1.0, c0 + 1.0, fr * fc),
    ];
    cells.into_iter().filter_map(move |(r, c, w)| {
        if w == 0.0
            || r < 0.0
            || c < 0.0
            || r >= side as f64
            || c >= side as f64
            || !inside_disk(r, c, center, radius2)
        {
            None
        } else {
            Some((r as usize * side + c as usize, w))
        }
    })
}

/// Inverse-mapped source position of a target cell under a ccw rotation
/// by `angle` about the plane center (array coordinates: row down).
#[inline]
fn source_position(row: usize, col: usize, center: f64, sin_t: f64, cos_t: f64) -> (f64, f64) {
    let dr = row as f64 - center;
    let dc = col as f64 - center;
    // math coords: u right, v up
    let (u, v) = (dc, -dr);
    let su = u * cos_t + v * sin_t;
    let sv = -u * sin_t + v * cos_t;
    (center - sv, center + su)
}

/// Masked bilinear rotation: source taps outside the inscribed disk read as
/// zero and target cells outside the disk are zeroed, so the disk support
/// is closed under rotation.
fn rotate_plane_bilinear<T: Scalar>(src: &[T], side: usize, angle: f64, dst: &mut [T]) {
    let center = (side as f64 - 1.0) / 2.0;
    let radius2 = (side as f64 / 2.0) * (side as f64 / 2.0);
    let (sin_t, cos_t) = angle.sin_cos();
    for row in 0..side {
        for col in 0..side {
            let out = &mut dst[row * side + col];
            if !inside_disk(row as f64, col as f64, center, radius2) {
                *out = T::zero();
                continue;
            }
            let (s_row, s_col) = source_position(row, col, center, sin_t, cos_t);
            let mut acc = 0.0;
            for (idx, w) in bilinear_taps(side, s_row, s_col, center, radius2) {
                acc += w * src[idx].tof();
            }
            *out = T::fromf(acc);
        }
    }
}

/// Adjoint (transpose) of [`rotate_plane_bilinear`]: scatters target
/// gradients back through the same taps and weights.
fn rotate_plane_bilinear_adjoint<T: Scalar>(
    d_rotated: &[T],
    side: usize,
    angle: f64,
    d_src: &mut [T],
) {
    let center = (side as f64 - 1.0) / 2.0;
    let radius2 = (side as f64 / 2.0) * (side as f64 / 2.0);
    let (sin_t, cos_t) = angle.sin_cos();
    for row in 0..side {
        for col in 0..side {
            if !inside_disk(row as f64, col as f64, center, radius2) {
                continue;
            }
            let g = d_rotated[row * side + col].tof();
            if g == 0.0 {
                continue;
            }
            let (s_row, s_col) = source_position(row, col, center, sin_t, cos_t);
            for (idx, w) in bilinear_taps(side, s_row, s_col, center, radius2) {
                d_src[idx] = T::fromf(d_src[idx].tof() + w * g);
            }
        }
    }
}

fn rotate_planes<T: Scalar>(src: &[T], side: usize, rotation: Rotation, dst: &mut [T]) {
    let plane = side * side;
    debug_assert_eq!(src.len() % plane, 0);
    for (s, d) in src.chunks_exact(plane).zip(dst.chunks_exact_mut(plane)) {
        match rotation {
            Rotation::Quarter(q) => rotate_plane_quarter(s, side, q, d),
            Rotation::Bilinear(angle) => rotate_plane_bilinear(s, side, angle, d),
        }
    }
}

fn rotate_planes_adjoint<T: Scalar>(d_rot: &[T], side: usize, rotation: Rotation, d_src: &mut [T]) {
    let plane = side * side;
    for (g, d) in d_rot.chunks_exact(plane).zip(d_src.chunks_exact_mut(plane)) {
        match rotation {
            Rotation::Quarter(q) => {
                // permutation adjoint = inverse rotation
                let mut tmp = vec![T::zero(); plane];
                rotate_plane_quarter(g, side, (4 - q % 4) % 4, &mut tmp);
                for (dv, tv) in d.iter_mut().zip(&tmp) {
                    *dv += *tv;
                }
            }
            Rotation::Bilinear(angle) => rotate_plane_bilinear_adjoint(g, side, angle, d),
        }
    }
}

fn trailing_square<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<usize> {
    let sh = t.shape();
    if sh.len() < 2 {
        return Err(Error::Shape(format!("{what} must have trailing [k, k] dims")));
    }
    let (a, b) = (sh[sh.len() - 2], sh[sh.len() - 1]);
    if a != b {
        return Err(Error::Shape(format!("{what} trailing dims {a}x{b} not square")));
    }
    Ok(a)
}

// ---------------------------------------------------------------------------
// Kernel rotation
// ---------------------------------------------------------------------------

/// Rotate the trailing `[k, k]` planes of a kernel to a group angle
/// (radians). Quarter turns use an exact index permutation; the 45-degree
/// steps of C8 use masked bilinear resampling.
pub fn rotate_kernel<T: Scalar>(
    kernel: &Tensor<T>,
    angle: f64,
    group: GroupSpec,
) -> Result<Tensor<T>> {
    let index = group.index_of_angle(angle)?;
    rotate_kernel_index(kernel, index, group)
}

/// [`rotate_kernel`] addressed by orientation index.
pub fn rotate_kernel_index<T: Scalar>(
    kernel: &Tensor<T>,
    index: usize,
    group: GroupSpec,
) -> Result<Tensor<T>> {
    if index >= group.order() {
        return Err(Error::Config(format!(
            "orientation index {index} out of range for C{}",
            group.order()
        )));
    }
    let side = trailing_square(kernel, "kernel")?;
    if side % 2 == 0 {
        return Err(Error::Config(format!(
            "kernel size {side} must be odd to rotate about its center"
        )));
    }
    let mut out = Tensor::zeros(kernel.shape());
    rotate_planes(
        kernel.data(),
        side,
        plane_rotation(group, index),
        out.data_mut(),
    );
    Ok(out)
}

/// Adjoint of [`rotate_kernel_index`]; accumulates into `d_kernel`.
pub fn rotate_kernel_adjoint_index<T: Scalar>(
    d_rotated: &Tensor<T>,
    index: usize,
    group: GroupSpec,
    d_kernel: &mut Tensor<T>,
) -> Result<()> {
    let side = trailing_square(d_rotated, "kernel gradient")?;
    if d_kernel.shape() != d_rotated.shape() {
        return Err(Error::Shape(format!(
            "kernel gradient {:?} vs {:?}",
            d_kernel.shape(),
            d_rotated.shape()
        )));
    }
    rotate_planes_adjoint(
        d_rotated.data(),
        side,
        plane_rotation(group, index),
        d_kernel.data_mut(),
    );
    Ok(())
}

/// The N rotated copies of a base kernel, indexed by orientation.
pub fn rotated_copies<T: Scalar>(base: &Tensor<T>, group: GroupSpec) -> Result<Vec<Tensor<T>>> {
    (0..group.order())
        .map(|n| rotate_kernel_index(base, n, group))
        .collect()
}

/// Rotate the trailing `[H, W]` planes of a feature map by a group angle.
/// This is the spatial half of the group action on feature maps.
pub fn rotate_field<T: Scalar>(
    field: &Tensor<T>,
    index: usize,
    group: GroupSpec,
) -> Result<Tensor<T>> {
    let side = trailing_square(field, "field")?;
    let mut out = Tensor::zeros(field.shape());
    rotate_planes(
        field.data(),
        side,
        plane_rotation(group, index),
        out.data_mut(),
    );
    Ok(out)
}

// ---------------------------------------------------------------------------
// Steerable kernel synthesis
// ---------------------------------------------------------------------------

/// A steerable filter bank: `Q` basis kernels plus interpolation
/// coefficients evaluated at the `N` group angles. The kernel steered to
/// orientation `n` is the linear combination
/// `sum_q coefficients[n][q] * basis[q]`.
#[derive(Clone, Debug)]
pub struct SteerableKernelBank<T> {
    basis: Vec<Tensor<T>>,
    /// `[N, Q]` coefficient matrix.
    coefficients: Tensor<T>,
    group: GroupSpec,
}

impl<T: Scalar> SteerableKernelBank<T> {
    pub fn new(basis: Vec<Tensor<T>>, coefficients: Tensor<T>, group: GroupSpec) -> Result<Self> {
        if basis.is_empty() {
            return Err(Error::Config("steerable bank needs Q >= 1 basis kernels".into()));
        }
        let shape = basis[0].shape().to_vec();
        for (q, b) in basis.iter().enumerate() {
            if b.shape() != shape {
                return Err(Error::Shape(format!(
                    "basis kernel {q} has shape {:?}, expected {:?}",
                    b.shape(),
                    shape
                )));
            }
        }
        if coefficients.shape() != [group.order(), basis.len()] {
            return Err(Error::Shape(format!(
                "coefficients {:?}, expected [{}, {}]",
                coefficients.shape(),
                group.order(),
                basis.len()
            )));
        }
        coefficients.check_finite("steerable coefficients")?;
        Ok(SteerableKernelBank {
            basis,
            coefficients,
            group,
        })
    }

    /// The rotated-copy realization: basis = the N rotated copies of one
    /// base kernel, coefficients = indicator rows.
    pub fn rotated_copies_of(base: &Tensor<T>, group: GroupSpec) -> Result<Self> {
        let basis = rotated_copies(base, group)?;
        let n = group.order();
        let coefficients = Tensor::from_fn(&[n, n], |i| {
            if i / n == i % n {
                T::one()
            } else {
                T::zero()
            }
        });
        Self::new(basis, coefficients, group)
    }

    pub fn group(&self) -> GroupSpec {
        self.group
    }

    pub fn basis_len(&self) -> usize {
        self.basis.len()
    }

    /// Steer the bank to the group angle at `orientation_index`.
    pub fn synthesize(&self, orientation_index: usize) -> Result<Tensor<T>> {
        if orientation_index >= self.group.order() {
            return Err(Error::Config(format!(
                "orientation index {orientation_index} out of range for C{}",
                self.group.order()
            )));
        }
        let q_n = self.basis.len();
        let mut out = Tensor::zeros(self.basis[0].shape());
        for (q, psi) in self.basis.iter().enumerate() {
            let coeff = self.coefficients.data()[orientation_index * q_n + q];
            out.axpy(coeff, psi)?;
        }
        Ok(out)
    }
}

/// Free-function form of bank synthesis.
pub fn synthesize_steerable<T: Scalar>(
    bank: &SteerableKernelBank<T>,
    orientation_index: usize,
) -> Result<Tensor<T>> {
    bank.synthesize(orientation_index)
}

// ---------------------------------------------------------------------------
// Oriented feature maps
// ---------------------------------------------------------------------------

/// A `[C, N, H, W]` feature map with an explicit orientation axis.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientedFeatureMap<T> {
    tensor: Tensor<T>,
    group: GroupSpec,
}

impl<T: Scalar> OrientedFeatureMap<T> {
    pub fn new(tensor: Tensor<T>, group: GroupSpec) -> Result<Self> {
        if tensor.rank() != 4 {
            return Err(Error::Shape(format!(
                "oriented feature map wants [C,N,H,W], got {:?}",
                tensor.shape()
            )));
        }
        if tensor.shape()[1] != group.order() {
            return Err(Error::Shape(format!(
                "orientation axis {} does not match group order {}",
                tensor.shape()[1],
                group.order()
            )));
        }
        Ok(OrientedFeatureMap { tensor, group })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn group(&self) -> GroupSpec {
        self.group
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn orientations(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }
}

/// Copy orientation slice `n` out of `[C,N,H,W]` data into `[C,H,W]`.
pub(crate) fn gather_orientation<T: Scalar>(
    data: &[T],
    c: usize,
    n_total: usize,
    hw: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), c * hw);
    for ch in 0..c {
        let src = (ch * n_total + n) * hw;
        out[ch * hw..(ch + 1) * hw].copy_from_slice(&data[src..src + hw]);
    }
}

/// Accumulate a `[C,H,W]` slice into orientation `n` of `[C,N,H,W]` data.
pub(crate) fn scatter_orientation_add<T: Scalar>(
    data: &mut [T],
    c: usize,
    n_total: usize,
    hw: usize,
    n: usize,
    src: &[T],
) {
    for ch in 0..c {
        let dst = (ch * n_total + n) * hw;
        for (d, &s) in data[dst..dst + hw].iter_mut().zip(&src[ch * hw..(ch + 1) * hw]) {
            *d += s;
        }
    }
}

// ---------------------------------------------------------------------------
// Lifting convolution
// ---------------------------------------------------------------------------

/// Kernel source for a lifting convolution: either a base kernel whose
/// rotated copies fill the orientation axis, or a steerable bank
/// synthesized at each group angle.
pub enum LiftKernel<'a, T> {
    Base(&'a Tensor<T>),
    Bank(&'a SteerableKernelBank<T>),
}

/// First-layer convolution mapping a plain `[C_in, H, W]` image to an
/// oriented `[C_out, N, H', W']` feature map: orientation `n` is the
/// convolution with the kernel steered to angle `theta_n`.
pub fn lift_conv<T: Scalar>(
    image: &Tensor<T>,
    kernel: LiftKernel<'_, T>,
    group: GroupSpec,
    stride: usize,
    padding: usize,
) -> Result<OrientedFeatureMap<T>> {
    if image.rank() != 3 {
        return Err(Error::Shape(format!(
            "lift_conv input must be [C,H,W] without an orientation axis, got {:?}",
            image.shape()
        )));
    }
    let n_or = group.order();
    let mut out: Option<Tensor<T>> = None;
    for n in 0..n_or {
        let k_n = match &kernel {
            LiftKernel::Base(base) => rotate_kernel_index(base, n, group)?,
            LiftKernel::Bank(bank) => {
                if bank.group() != group {
                    return Err(Error::Config("bank group does not match lift group".into()));
                }
                bank.synthesize(n)?
            }
        };
        let slice = conv2d(image, &k_n, stride, padding)?;
        let (c_out, oh, ow) = (slice.shape()[0], slice.shape()[1], slice.shape()[2]);
        let dst = out.get_or_insert_with(|| Tensor::zeros(&[c_out, n_or, oh, ow]));
        scatter_orientation_add(dst.data_mut(), c_out, n_or, oh * ow, n, slice.data());
    }
    OrientedFeatureMap::new(out.expect("group order >= 1"), group)
}

/// Backward pass of [`lift_conv`] for the base-kernel form.
/// Returns `(d_image, d_base_kernel)`.
pub fn lift_conv_backward<T: Scalar>(
    image: &Tensor<T>,
    base: &Tensor<T>,
    group: GroupSpec,
    stride: usize,
    padding: usize,
    grad_out: &OrientedFeatureMap<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let n_or = group.order();
    let (c_out, hw) = (
        grad_out.channels(),
        grad_out.height() * grad_out.width(),
    );
    let mut d_image = Tensor::zeros(image.shape());
    let mut d_base = Tensor::zeros(base.shape());
    let mut go_slice = vec![T::zero(); c_out * hw];
    for n in 0..n_or {
        gather_orientation(grad_out.tensor().data(), c_out, n_or, hw, n, &mut go_slice);
        let go = Tensor::from_vec(&[c_out, grad_out.height(), grad_out.width()], go_slice.clone())?;
        let k_n = rotate_kernel_index(base, n, group)?;
        let (di, dk_n) = conv2d_backward(image, &k_n, stride, padding, &go)?;
        d_image.axpy(T::one(), &di)?;
        rotate_kernel_adjoint_index(&dk_n, n, group, &mut d_base)?;
    }
    Ok((d_image, d_base))
}

// ---------------------------------------------------------------------------
// Group convolution (regular representation, full orientation mixing)
// ---------------------------------------------------------------------------

fn group_conv_geometry<T: Scalar>(
    input: &OrientedFeatureMap<T>,
    kernel: &Tensor<T>,
    group: GroupSpec,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    if input.group() != group {
        return Err(Error::Config(format!(
            "input group C{} does not match layer group C{}",
            input.group().order(),
            group.order()
        )));
    }
    if kernel.rank() != 5 {
        return Err(Error::Shape(format!(
            "group_conv kernel wants [Co,Ci,N,k,k], got {:?}",
            kernel.shape()
        )));
    }
    let ksh = kernel.shape();
    if ksh[2] != group.order() {
        return Err(Error::Shape(format!(
            "kernel orientation axis {} does not match group order {}",
            ksh[2],
            group.order()
        )));
    }
    if ksh[1] != input.channels() {
        return Err(Error::Shape(format!(
            "kernel C_in {} vs input channels {}",
            ksh[1],
            input.channels()
        )));
    }
    if ksh[3] != ksh[4] {
        return Err(Error::Shape("group_conv kernel planes must be square".into()));
    }
    ConvGeom::new(
        input.channels(),
        input.height(),
        input.width(),
        ksh[0],
        ksh[3],
        stride,
        padding,
    )
}

/// Extract the `[C_out, C_in, k, k]` kernel at orientation slot `j` from a
/// `[C_out, C_in, N, k, k]` bank.
fn kernel_slot<T: Scalar>(kernel: &Tensor<T>, j: usize) -> Tensor<T> {
    let sh = kernel.shape();
    let (co, ci, n, k2) = (sh[0], sh[1], sh[2], sh[3] * sh[4]);
    let mut out = Tensor::zeros(&[co, ci, sh[3], sh[4]]);
    for a in 0..co {
        for b in 0..ci {
            let src = (((a * ci) + b) * n + j) * k2;
            let dst = ((a * ci) + b) * k2;
            out.data_mut()[dst..dst + k2].copy_from_slice(&kernel.data()[src..src + k2]);
        }
    }
    out
}

fn kernel_slot_add<T: Scalar>(bank: &mut Tensor<T>, j: usize, slot: &Tensor<T>) {
    let sh = bank.shape().to_vec();
    let (co, ci, n, k2) = (sh[0], sh[1], sh[2], sh[3] * sh[4]);
    for a in 0..co {
        for b in 0..ci {
            let dst = (((a * ci) + b) * n + j) * k2;
            let src = ((a * ci) + b) * k2;
            for (d, &s) in bank.data_mut()[dst..dst + k2]
                .iter_mut()
                .zip(&slot.data()[src..src + k2])
            {
                *d += s;
            }
        }
    }
}

/// Group convolution over oriented feature maps:
///
/// `out[:, n] = sum_m conv2d(in[:, m], rotate(kernel[:, :, (m - n) mod N], theta_n))`
///
/// i.e. spatial rotation of the filters combined with a cyclic shift along
/// the orientation axis. For N = 1 this reduces to a plain `conv2d`.
pub fn group_conv<T: Scalar>(
    input: &OrientedFeatureMap<T>,
    kernel: &Tensor<T>,
    group: GroupSpec,
    stride: usize,
    padding: usize,
) -> Result<OrientedFeatureMap<T>> {
    let g = group_conv_geometry(input, kernel, group, stride, padding)?;
    let n_or = group.order();
    let hw_in = g.h * g.w;
    let hw_out = g.oh * g.ow;
    let mut out = Tensor::zeros(&[g.c_out, n_or, g.oh, g.ow]);
    let mut in_slice = vec![T::zero(); g.c_in * hw_in];
    let mut conv_out = vec![T::zero(); g.c_out * hw_out];
    let mut acc = vec![T::zero(); g.c_out * hw_out];
    for n in 0..n_or {
        acc.fill(T::zero());
        for m in 0..n_or {
            let j = (m + n_or - n) % n_or;
            let rotated = rotate_kernel_index(&kernel_slot(kernel, j), n, group)?;
            gather_orientation(input.tensor().data(), g.c_in, n_or, hw_in, m, &mut in_slice);
            conv2d_slice(&in_slice, rotated.data(), &g, &mut conv_out);
            for (a, &v) in acc.iter_mut().zip(&conv_out) {
                *a += v;
            }
        }
        scatter_orientation_add(out.data_mut(), g.c_out, n_or, hw_out, n, &acc);
    }
    OrientedFeatureMap::new(out, group)
}

/// Backward pass of [`group_conv`]: `(d_input, d_kernel)`.
pub fn group_conv_backward<T: Scalar>(
    input: &OrientedFeatureMap<T>,
    kernel: &Tensor<T>,
    group: GroupSpec,
    stride: usize,
    padding: usize,
    grad_out: &OrientedFeatureMap<T>,
) -> Result<(OrientedFeatureMap<T>, Tensor<T>)> {
    let g = group_conv_geometry(input, kernel, group, stride, padding)?;
    let n_or = group.order();
    if grad_out.tensor().shape() != [g.c_out, n_or, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "grad_out {:?}, expected {:?}",
            grad_out.tensor().shape(),
            [g.c_out, n_or, g.oh, g.ow]
        )));
    }
    let hw_in = g.h * g.w;
    let hw_out = g.oh * g.ow;
    let mut d_input = Tensor::zeros(input.tensor().shape());
    let mut d_kernel = Tensor::zeros(kernel.shape());
    let mut go_slice = vec![T::zero(); g.c_out * hw_out];
    let mut in_slice = vec![T::zero(); g.c_in * hw_in];
    for n in 0..n_or {
        gather_orientation(grad_out.tensor().data(), g.c_out, n_or, hw_out, n, &mut go_slice);
        for m in 0..n_or {
            let j = (m + n_or - n) % n_or;
            let slot = kernel_slot(kernel, j);
            let rotated = rotate_kernel_index(&slot, n, group)?;
            // input gradient through the rotated kernel
            let mut di = vec![T::zero(); g.c_in * hw_in];
            conv2d_input_grad_slice(&go_slice, rotated.data(), &g, &mut di);
            scatter_orientation_add(d_input.data_mut(), g.c_in, n_or, hw_in, m, &di);
            // kernel gradient: conv grad, then rotation adjoint into slot j
            gather_orientation(input.tensor().data(), g.c_in, n_or, hw_in, m, &mut in_slice);
            let mut dk_rot = Tensor::zeros(slot.shape());
            conv2d_kernel_grad_slice(&in_slice, &go_slice, &g, dk_rot.data_mut());
            let mut dk_slot = Tensor::zeros(slot.shape());
            rotate_kernel_adjoint_index(&dk_rot, n, group, &mut dk_slot)?;
            kernel_slot_add(&mut d_kernel, j, &dk_slot);
        }
    }
    Ok((OrientedFeatureMap::new(d_input, group)?, d_kernel))
}

// ---------------------------------------------------------------------------
// Orientation-wise convolution (shared base kernel, no orientation mixing)
// ---------------------------------------------------------------------------

/// Per-orientation convolution with the N rotated copies of one shared base
/// kernel: `out[:, n] = conv2d(in[:, n], rotate(base, theta_n))`.
///
/// This is the layer the backbone stacks: its trainable parameter count is
/// independent of the group order and its cost scales linearly with N.
pub fn orientwise_conv<T: Scalar>(
    input: &OrientedFeatureMap<T>,
    base: &Tensor<T>,
    group: GroupSpec,
    stride: usize,
    padding: usize,
) -> Result<OrientedFeatureMap<T>> {
    let rotated = rotated_copies(base, group)?;
    let n_or = group.order();
    let sh = base.shape();
    let g = ConvGeom::new(
        input.channels(),
        input.height(),
        input.width(),
        sh[0],
        sh[2],
        stride,
        padding,
    )?;
    if sh[1] != input.channels() {
        return Err(Error::Shape(format!(
            "base kernel C_in {} vs input channels {}",
            sh[1],
            input.channels()
        )));
    }
    let hw_in = g.h * g.w;
    let hw_out = g.oh * g.ow;
    let mut out = Tensor::zeros(&[g.c_out, n_or, g.oh, g.ow]);
    let mut in_slice = vec![T::zero(); g.c_in * hw_in];
    let mut conv_out = vec![T::zero(); g.c_out * hw_out];
    for n in 0..n_or {
        gather_orientation(input.tensor().data(), g.c_in, n_or, hw_in, n, &mut in_slice);
        conv2d_slice(&in_slice, rotated[n].data(), &g, &mut conv_out);
        scatter_orientation_add(out.data_mut(), g.c_out, n_or, hw_out, n, &conv_out);
    }
    OrientedFeatureMap::new(out, group)
}

/// Backward pass of [`orientwise_conv`]: `(d_input, d_base)`.
pub fn orientwise_conv_backward<T: Scalar>(
    input: &OrientedFeatureMap<T>,
    base: &Tensor<T>,
    group: GroupSpec,
    stride: usize,
    padding: usize,
    grad_out: &OrientedFeatureMap<T>,
) -> Result<(OrientedFeatureMap<T>, Tensor<T>)> {
    let rotated = rotated_copies(base, group)?;
    let n_or = group.order();
    let sh = base.shape();
    let g = ConvGeom::new(
        input.channels(),
        input.height(),
        input.width(),
        sh[0],
        sh[2],
        stride,
        padding,
    )?;
    let hw_in = g.h * g.w;
    let hw_out = g.oh * g.ow;
    let mut d_input = Tensor::zeros(input.tensor().shape());
    let mut d_base = Tensor::zeros(base.shape());
    let mut go_slice = vec![T::zero(); g.c_out * hw_out];
    let mut in_slice = vec![T::zero(); g.c_in * hw_in];
    for n in 0..n_or {
        gather_orientation(grad_out.tensor().data(), g.c_out, n_or, hw_out, n, &mut go_slice);
        let mut di = vec![T::zero(); g.c_in * hw_in];
        conv2d_input_grad_slice(&go_slice, rotated[n].data(), &g, &mut di);
        scatter_orientation_add(d_input.data_mut(), g.c_in, n_or, hw_in, n, &di);

        gather_orientation(input.tensor().data(), g.c_in, n_or, hw_in, n, &mut in_slice);
        let mut dk_rot = Tensor::zeros(base.shape());
        conv2d_kernel_grad_slice(&in_slice, &go_slice, &g, dk_rot.data_mut());
        rotate_kernel_adjoint_index(&dk_rot, n, group, &mut d_base)?;
    }
    Ok((OrientedFeatureMap::new(d_input, group)?, d_base))
}

// ---------------------------------------------------------------------------
// Cyclic shift and orientation pooling
// ---------------------------------------------------------------------------

/// Shift the orientation axis: index `n` maps to `(n + s) mod N`.
/// A shift by N (or 0) is the identity.
pub fn cyclic_shift<T: Scalar>(input: &OrientedFeatureMap<T>, s: i64) -> OrientedFeatureMap<T> {
    let n_or = input.orientations();
    let c = input.channels();
    let hw = input.height() * input.width();
    let shift = s.rem_euclid(n_or as i64) as usize;
    let mut out = Tensor::zeros(input.tensor().shape());
    for ch in 0..c {
        for n in 0..n_or {
            let src = (ch * n_or + n) * hw;
            let dst = (ch * n_or + (n + shift) % n_or) * hw;
            out.data_mut()[dst..dst + hw]
                .copy_from_slice(&input.tensor().data()[src..src + hw]);
        }
    }
    OrientedFeatureMap {
        tensor: out,
        group: input.group(),
    }
}

/// Reduction over the orientation axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrientationPool {
    Max,
    Mean,
}

impl OrientationPool {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(OrientationPool::Max),
            "mean" => Ok(OrientationPool::Mean),
            other => Err(Error::Config(format!("unknown orientation pool '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OrientationPool::Max => "max",
            OrientationPool::Mean => "mean",
        }
    }
}

/// Reduce `[C, N, H, W]` over the orientation axis to `[C, H, W]`.
///
/// Both modes are exactly invariant to any cyclic shift of the input: max
/// over a permuted set is unchanged, and the mean sums values in a
/// value-sorted order so the floating-point result does not depend on slot
/// order either.
pub fn orientation_pool<T: Scalar>(input: &OrientedFeatureMap<T>, mode: OrientationPool) -> Tensor<T> {
    let (c, n_or, h, w) = (
        input.channels(),
        input.orientations(),
        input.height(),
        input.width(),
    );
    let hw = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    let data = input.tensor().data();
    let mut vals = vec![T::zero(); n_or];
    for ch in 0..c {
        for i in 0..hw {
            for (n, v) in vals.iter_mut().enumerate() {
                *v = data[(ch * n_or + n) * hw + i];
            }
            out.data_mut()[ch * hw + i] = match mode {
                OrientationPool::Max => {
                    vals.iter().copied().fold(T::neg_infinity(), |a, b| a.max(b))
                }
                OrientationPool::Mean => {
                    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite activations"));
                    vals.iter().copied().sum::<T>() / T::fromf(n_or as f64)
                }
            };
        }
    }
    out
}

/// Backward pass of [`orientation_pool`]. For max, the gradient routes to
/// the first orientation attaining the maximum; for mean it spreads evenly.
pub fn orientation_pool_backward<T: Scalar>(
    input: &OrientedFeatureMap<T>,
    mode: OrientationPool,
    grad_out: &Tensor<T>,
) -> OrientedFeatureMap<T> {
    let (c, n_or, hw) = (
        input.channels(),
        input.orientations(),
        input.height() * input.width(),
    );
    let data = input.tensor().data();
    let mut d_in = Tensor::zeros(input.tensor().shape());
    for ch in 0..c {
        for i in 0..hw {
            let g = grad_out.data()[ch * hw + i];
            match mode {
                OrientationPool::Max => {
                    let mut best_n = 0;
                    let mut best = data[(ch * n_or) * hw + i];
                    for n in 1..n_or {
                        let v = data[(ch * n_or + n) * hw + i];
                        if v > best {
                            best = v;
                            best_n = n;
                        }
                    }
                    d_in.data_mut()[(ch * n_or + best_n) * hw + i] = g;
                }
                OrientationPool::Mean => {
                    let share = g / T::fromf(n_or as f64);
                    for n in 0..n_or {
                        d_in.data_mut()[(ch * n_or + n) * hw + i] = share;
                    }
                }
            }
        }
    }
    OrientedFeatureMap {
        tensor: d_in,
        group: input.group(),
    }
}

// ---------------------------------------------------------------------------
// Equivariance checking
// ---------------------------------------------------------------------------

/// Apply the group action `g_s` to an oriented feature map: cyclic shift of
/// the orientation axis by `s` combined with spatial rotation by `theta_s`.
pub fn apply_group_action<T: Scalar>(
    map: &OrientedFeatureMap<T>,
    s: usize,
) -> Result<OrientedFeatureMap<T>> {
    let shifted = cyclic_shift(map, s as i64);
    let rotated = rotate_field(shifted.tensor(), s, map.group())?;
    OrientedFeatureMap::new(rotated, map.group())
}

/// Measure `max |f(g.x) - g.f(x)|` for a layer stack `f` mapping a plain
/// `[C, H, W]` image to an oriented feature map. The image should be
/// circular-masked so rotation introduces no new content. Returns the error
/// for the caller to threshold.
pub fn check_equivariance<T, F>(
    stack: F,
    image: &Tensor<T>,
    group: GroupSpec,
    angle_index: usize,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<OrientedFeatureMap<T>>,
{
    let rotated_input = rotate_field(image, angle_index, group)?;
    let f_of_rotated = stack(&rotated_input)?;
    let f_plain = stack(image)?;
    let transformed = apply_group_action(&f_plain, angle_index)?;
    Ok(f_of_rotated.tensor().max_abs_diff(transformed.tensor()))
}

/// Zero everything outside the inscribed disk of the trailing `[H, W]`
/// planes. Inputs prepared this way rotate without gaining or losing
/// content.
pub fn apply_circular_mask<T: Scalar>(field: &mut Tensor<T>) -> Result<()> {
    let side = trailing_square(field, "field")?;
    let center = (side as f64 - 1.0) / 2.0;
    let radius2 = (side as f64 / 2.0) * (side as f64 / 2.0);
    let plane = side * side;
    let n_planes = field.len() / plane;
    for p in 0..n_planes {
        for r in 0..side {
            for c in 0..side {
                if !inside_disk(r as f64, c as f64, center, radius2) {
                    field.data_mut()[p * plane + r * side + c] = T::zero();
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn c4() -> GroupSpec {
        GroupSpec::cyclic(4).unwrap()
    }

    fn c8() -> GroupSpec {
        GroupSpec::cyclic(8).unwrap()
    }

    #[test]
    fn rotate_angle_zero_is_identity() {
        let mut rng = Rng::new(1);
        let k = Tensor::<f64>::random_normal(&[2, 2, 5, 5], 1.0, &mut rng);
        let r = rotate_kernel(&k, 0.0, c4()).unwrap();
        assert_eq!(r, k);
    }

    #[test]
    fn rotate_quarter_moves_top_center_to_middle_left() {
        let mut k = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        k.data_mut()[1] = 1.0; // (row 0, col 1)
        let r = rotate_kernel(&k, std::f64::consts::FRAC_PI_2, c4()).unwrap();
        let mut expect = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        expect.data_mut()[3] = 1.0; // (row 1, col 0)
        assert_eq!(r, expect);
    }

    #[test]
    fn four_quarter_turns_compose_to_identity_bitwise() {
        let mut rng = Rng::new(2);
        let k = Tensor::<f64>::random_normal(&[3, 2, 5, 5], 1.0, &mut rng);
        let mut cur = k.clone();
        for _ in 0..4 {
            cur = rotate_kernel_index(&cur, 1, c4()).unwrap();
        }
        assert_eq!(cur, k);
    }

    #[test]
    fn rotate_rejects_non_group_angle_and_even_kernel() {
        let k = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        assert!(rotate_kernel(&k, 0.3, c4()).is_err());
        let even = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        assert!(rotate_kernel(&even, 0.0, c4()).is_err());
    }

    /// Independent re-implementation of the masked bilinear resampler used
    /// as an oracle: forward-maps each source cell is not possible for
    /// gather-style sampling, so this walks targets like the production
    /// code but is written from the definition with no shared helpers.
    fn rotate_oracle(kernel: &[f64], side: usize, angle: f64) -> Vec<f64> {
        let cc = (side as f64 - 1.0) / 2.0;
        let rad2 = (side as f64) * (side as f64) / 4.0;
        let mut out = vec![0.0; side * side];
        for y in 0..side {
            for x in 0..side {
                let (dy, dx) = (y as f64 - cc, x as f64 - cc);
                if dy * dy + dx * dx > rad2 {
                    continue;
                }
                // rotate target offset by -angle in (x right, y up) coords
                let (u, v) = (dx, -dy);
                let su = u * angle.cos() + v * angle.sin();
                let sv = -u * angle.sin() + v * angle.cos();
                let (sc, sr) = (cc + su, cc - sv);
                let (r0, c0) = (sr.floor(), sc.floor());
                let (fr, fc) = (sr - r0, sc - c0);
                let mut acc = 0.0;
                for (r, c, w) in [
                    (r0, c0, (1.0 - fr) * (1.0 - fc)),
                    (r0, c0 + 1.0, (1.0 - fr) * fc),
                    (r0 + 1.0, c0, fr * (1.0 - fc)),
                    (r0 + 1.0, c0 + 1.0, fr * fc),
                ] {
                    if r >= 0.0 && c >= 0.0 && (r as usize) < side && (c as usize) < side {
                        let (ddy, ddx) = (r - cc, c - cc);
                        if ddy * ddy + ddx * ddx <= rad2 && w != 0.0 {
                            acc += w * kernel[r as usize * side + c as usize];
                        }
                    }
                }
                out[y * side + x] = acc;
            }
        }
        out
    }

    #[test]
    fn rotate_45_matches_independent_resampling_oracle() {
        let mut rng = Rng::new(3);
        let angle = std::f64::consts::FRAC_PI_4;
        for side in [3usize, 5, 7] {
            let k = Tensor::<f64>::random_normal(&[1, 1, side, side], 1.0, &mut rng);
            let r = rotate_kernel(&k, angle, c8()).unwrap();
            let oracle = rotate_oracle(k.data(), side, angle);
            for (a, b) in r.data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rotate_45_approximately_preserves_symmetric_gaussian() {
        // A disk-supported rotationally symmetric kernel is only
        // approximately fixed under masked bilinear resampling; the bound
        // below was calibrated against the oracle and frozen.
        let side = 5;
        let cc = (side as f64 - 1.0) / 2.0;
        let sigma = 0.8f64;
        let mut k = Tensor::<f64>::from_fn(&[1, 1, side, side], |i| {
            let (y, x) = ((i / side) as f64, (i % side) as f64);
            let r2 = (y - cc) * (y - cc) + (x - cc) * (x - cc);
            (-r2 / (2.0 * sigma * sigma)).exp()
        });
        apply_circular_mask(&mut k).unwrap();
        let r = rotate_kernel(&k, std::f64::consts::FRAC_PI_4, c8()).unwrap();
        let dev = r.max_abs_diff(&k);
        assert!(dev < 0.1, "symmetric kernel deviated by {dev}");
        // and twice 45 degrees stays close to the exact quarter turn
        let twice = rotate_kernel(&r, std::f64::consts::FRAC_PI_4, c8()).unwrap();
        let quarter = rotate_kernel_index(&k, 1, c4()).unwrap();
        assert!(twice.max_abs_diff(&quarter) < 0.1);
    }

    #[test]
    fn synthesize_identity_and_zero() {
        let mut rng = Rng::new(4);
        let base = Tensor::<f64>::random_normal(&[2, 1, 3, 3], 1.0, &mut rng);
        // Q = 1, unit coefficient for every orientation
        let bank = SteerableKernelBank::new(
            vec![base.clone()],
            Tensor::filled(&[4, 1], 1.0),
            c4(),
        )
        .unwrap();
        for n in 0..4 {
            assert_eq!(bank.synthesize(n).unwrap(), base);
        }
        let zero_bank =
            SteerableKernelBank::new(vec![base.clone()], Tensor::zeros(&[4, 1]), c4()).unwrap();
        assert_eq!(zero_bank.synthesize(2).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn synthesize_matches_weighted_sum_oracle_and_is_linear() {
        let mut rng = Rng::new(5);
        let psi1 = Tensor::<f64>::random_normal(&[2, 2, 3, 3], 1.0, &mut rng);
        let psi2 = Tensor::<f64>::random_normal(&[2, 2, 3, 3], 1.0, &mut rng);
        let coeff = Tensor::<f64>::random_normal(&[4, 2], 1.0, &mut rng);
        let bank =
            SteerableKernelBank::new(vec![psi1.clone(), psi2.clone()], coeff.clone(), c4())
                .unwrap();
        for n in 0..4 {
            let synth = bank.synthesize(n).unwrap();
            for i in 0..synth.len() {
                let expect =
                    coeff.at(&[n, 0]) * psi1.data()[i] + coeff.at(&[n, 1]) * psi2.data()[i];
                assert!((synth.data()[i] - expect).abs() < 1e-12);
            }
        }
        // linearity in the coefficients: synth(a*c + b*c') == a*synth(c) + b*synth(c')
        let coeff2 = Tensor::<f64>::random_normal(&[4, 2], 1.0, &mut rng);
        let (a, b) = (0.7, -1.3);
        let mixed = coeff.clone().scale(a).add(&coeff2.clone().scale(b)).unwrap();
        let bank_mixed =
            SteerableKernelBank::new(vec![psi1.clone(), psi2.clone()], mixed, c4()).unwrap();
        let bank2 = SteerableKernelBank::new(vec![psi1, psi2], coeff2, c4()).unwrap();
        for n in 0..4 {
            let lhs = bank_mixed.synthesize(n).unwrap();
            let rhs = bank
                .synthesize(n)
                .unwrap()
                .scale(a)
                .add(&bank2.synthesize(n).unwrap().scale(b))
                .unwrap();
            assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }
    }

    #[test]
    fn synthesize_rejects_mismatched_counts() {
        let psi = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        assert!(SteerableKernelBank::new(vec![psi], Tensor::zeros(&[4, 2]), c4()).is_err());
    }

    #[test]
    fn lift_with_trivial_group_equals_conv2d() {
        let mut rng = Rng::new(6);
        let img = Tensor::<f64>::random_normal(&[3, 8, 8], 1.0, &mut rng);
        let base = Tensor::<f64>::random_normal(&[2, 3, 3, 3], 1.0, &mut rng);
        let g1 = GroupSpec::trivial();
        let lifted = lift_conv(&img, LiftKernel::Base(&base), g1, 1, 1).unwrap();
        assert_eq!(lifted.orientations(), 1);
        let plain = conv2d(&img, &base, 1, 1).unwrap();
        assert_eq!(
            lifted.tensor().data(),
            plain.data(),
            "N=1 lift must be bitwise plain conv"
        );
    }

    #[test]
    fn lift_of_isotropic_kernel_has_identical_slices() {
        let mut rng = Rng::new(7);
        let img = Tensor::<f64>::random_normal(&[1, 6, 6], 1.0, &mut rng);
        // quarter-turn symmetric 3x3 kernel: center a, edge-mid b, corner c
        let (a, b, c) = (0.5, -0.25, 0.125);
        let k = Tensor::<f64>::from_vec(
            &[1, 1, 3, 3],
            vec![c, b, c, b, a, b, c, b, c],
        )
        .unwrap();
        let lifted = lift_conv(&img, LiftKernel::Base(&k), c4(), 1, 0).unwrap();
        let hw = lifted.height() * lifted.width();
        let data = lifted.tensor().data();
        for n in 1..4 {
            assert_eq!(&data[n * hw..(n + 1) * hw], &data[0..hw]);
        }
    }

    #[test]
    fn lift_equivariance_under_quarter_turn() {
        let mut rng = Rng::new(8);
        let mut img = Tensor::<f64>::random_normal(&[2, 9, 9], 1.0, &mut rng);
        apply_circular_mask(&mut img).unwrap();
        let base = Tensor::<f64>::random_normal(&[3, 2, 3, 3], 1.0, &mut rng);
        let group = c4();
        let err = check_equivariance(
            |x| lift_conv(x, LiftKernel::Base(&base), group, 1, 1),
            &img,
            group,
            1,
        )
        .unwrap();
        assert!(err < 1e-12, "lift equivariance error {err}");
    }

    #[test]
    fn group_conv_trivial_group_reduces_to_conv2d() {
        let mut rng = Rng::new(9);
        let g1 = GroupSpec::trivial();
        let x = Tensor::<f64>::random_normal(&[2, 1, 6, 6], 1.0, &mut rng);
        let input = OrientedFeatureMap::new(x.clone(), g1).unwrap();
        let kernel = Tensor::<f64>::random_normal(&[3, 2, 1, 3, 3], 1.0, &mut rng);
        let out = group_conv(&input, &kernel, g1, 1, 1).unwrap();
        let plain = conv2d(
            &x.reshape(&[2, 6, 6]).unwrap(),
            &kernel.clone().reshape(&[3, 2, 3, 3]).unwrap(),
            1,
            1,
        )
        .unwrap();
        assert_eq!(out.tensor().data(), plain.data());
    }

    #[test]
    fn group_conv_delta_kernel_is_identity() {
        let mut rng = Rng::new(10);
        let group = c4();
        let x = Tensor::<f64>::random_normal(&[2, 4, 5, 5], 1.0, &mut rng);
        let input = OrientedFeatureMap::new(x.clone(), group).unwrap();
        // k=1 identity channel mixing, orientation slot 0 only
        let mut kernel = Tensor::<f64>::zeros(&[2, 2, 4, 1, 1]);
        for co in 0..2 {
            let idx = ((co * 2) + co) * 4; // (co, ci=co, j=0)
            kernel.data_mut()[idx] = 1.0;
        }
        let out = group_conv(&input, &kernel, group, 1, 0).unwrap();
        assert_eq!(out.tensor().data(), x.data());
    }

    #[test]
    fn group_conv_equivariance_under_quarter_turn() {
        let mut rng = Rng::new(11);
        let group = c4();
        let mut x = Tensor::<f64>::random_normal(&[2, 4, 9, 9], 1.0, &mut rng);
        apply_circular_mask(&mut x).unwrap();
        let input = OrientedFeatureMap::new(x, group).unwrap();
        let kernel = Tensor::<f64>::random_normal(&[3, 2, 4, 3, 3], 1.0, &mut rng);
        for s in 1..4 {
            let lhs = {
                let gx = apply_group_action(&input, s).unwrap();
                group_conv(&gx, &kernel, group, 1, 1).unwrap()
            };
            let rhs = {
                let fx = group_conv(&input, &kernel, group, 1, 1).unwrap();
                apply_group_action(&fx, s).unwrap()
            };
            let err = lhs.tensor().max_abs_diff(rhs.tensor());
            assert!(err < 1e-10, "shift {s}: equivariance error {err}");
        }
    }

    #[test]
    fn orientwise_conv_equivariance_and_shapes() {
        let mut rng = Rng::new(12);
        let group = c4();
        let mut x = Tensor::<f64>::random_normal(&[3, 4, 9, 9], 1.0, &mut rng);
        apply_circular_mask(&mut x).unwrap();
        let input = OrientedFeatureMap::new(x, group).unwrap();
        let base = Tensor::<f64>::random_normal(&[2, 3, 3, 3], 1.0, &mut rng);
        let out = orientwise_conv(&input, &base, group, 1, 1).unwrap();
        assert_eq!(out.tensor().shape(), &[2, 4, 9, 9]);
        for s in 1..4 {
            let lhs = orientwise_conv(
                &apply_group_action(&input, s).unwrap(),
                &base,
                group,
                1,
                1,
            )
            .unwrap();
            let rhs = apply_group_action(&out, s).unwrap();
            let err = lhs.tensor().max_abs_diff(rhs.tensor());
            assert!(err < 1e-10, "shift {s}: equivariance error {err}");
        }
    }

    #[test]
    fn cyclic_shift_group_laws() {
        let mut rng = Rng::new(13);
        let group = c4();
        let x = Tensor::<f64>::random_normal(&[2, 4, 3, 3], 1.0, &mut rng);
        let f = OrientedFeatureMap::new(x, group).unwrap();
        assert_eq!(cyclic_shift(&f, 0).tensor(), f.tensor());
        assert_eq!(cyclic_shift(&f, 4).tensor(), f.tensor());
        let mut cur = f.clone();
        for _ in 0..4 {
            cur = cyclic_shift(&cur, 1);
        }
        assert_eq!(cur.tensor(), f.tensor());
        // negative shifts wrap
        assert_eq!(cyclic_shift(&f, -1).tensor(), cyclic_shift(&f, 3).tensor());
    }

    #[test]
    fn orientation_pool_trivial_and_constant() {
        let group = GroupSpec::trivial();
        let x = Tensor::<f64>::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = OrientedFeatureMap::new(x, group).unwrap();
        let pooled = orientation_pool(&f, OrientationPool::Max);
        assert_eq!(pooled.shape(), &[2, 1, 2]);
        assert_eq!(pooled.data(), &[1.0, 2.0, 3.0, 4.0]);

        let c4g = c4();
        let mut t = Tensor::<f64>::zeros(&[1, 4, 2, 2]);
        for n in 0..4 {
            for i in 0..4 {
                t.data_mut()[n * 4 + i] = (i + 1) as f64;
            }
        }
        let f = OrientedFeatureMap::new(t, c4g).unwrap();
        for mode in [OrientationPool::Max, OrientationPool::Mean] {
            let pooled = orientation_pool(&f, mode);
            assert_eq!(pooled.data(), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn orientation_pool_exactly_invariant_to_shifts() {
        let mut rng = Rng::new(14);
        let group = c8();
        let x = Tensor::<f64>::random_normal(&[3, 8, 4, 4], 1.0, &mut rng);
        let f = OrientedFeatureMap::new(x, group).unwrap();
        for mode in [OrientationPool::Max, OrientationPool::Mean] {
            let reference = orientation_pool(&f, mode);
            for s in 0..8 {
                let shifted = cyclic_shift(&f, s);
                let pooled = orientation_pool(&shifted, mode);
                assert_eq!(
                    pooled, reference,
                    "{mode:?} pool must be exactly shift-invariant (s={s})"
                );
            }
        }
    }

    #[test]
    fn c8_lift_error_stays_within_calibrated_tolerance() {
        // 45-degree equivariance is approximate; the bound below was
        // measured on this seeded setup (worst observed 2.15, boundary
        // taps dominate) and frozen as a regression threshold.
        let group = c8();
        let mut worst: f64 = 0.0;
        for seed in 0..10u64 {
            let mut rng = Rng::new(900 + seed);
            let mut img = Tensor::<f64>::zeros(&[3, 32, 32]);
            // low-frequency content: random 8x8 grid, bilinearly upsampled
            let grid: Vec<f64> = (0..3 * 64).map(|_| rng.next_f64()).collect();
            for c in 0..3 {
                for y in 0..32 {
                    for x in 0..32 {
                        let gy = y as f64 / 32.0 * 7.0;
                        let gx = x as f64 / 32.0 * 7.0;
                        let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(7), (x0 + 1).min(7));
                        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
                        let at = |yy: usize, xx: usize| grid[(c * 8 + yy) * 8 + xx];
                        img.data_mut()[(c * 32 + y) * 32 + x] =
                            at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                                + at(y0, x1) * (1.0 - fy) * fx
                                + at(y1, x0) * fy * (1.0 - fx)
                                + at(y1, x1) * fy * fx;
                    }
                }
            }
            apply_circular_mask(&mut img).unwrap();
            let base = Tensor::<f64>::random_normal(&[4, 3, 3, 3], 0.3, &mut rng);
            for idx in [1usize, 3, 5, 7] {
                let err = check_equivariance(
                    |x| lift_conv(x, LiftKernel::Base(&base), group, 1, 1),
                    &img,
                    group,
                    idx,
                )
                .unwrap();
                worst = worst.max(err);
            }
        }
        assert!(worst < 3.0, "C8 lift equivariance regressed: {worst}");
    }

    #[test]
    fn check_equivariance_flags_conventional_stack() {
        let mut rng = Rng::new(15);
        let mut img = Tensor::<f64>::random_normal(&[1, 9, 9], 1.0, &mut rng);
        apply_circular_mask(&mut img).unwrap();
        let base = Tensor::<f64>::random_normal(&[4, 1, 3, 3], 1.0, &mut rng);
        // a C4 lift is equivariant
        let group = c4();
        let err_c4 = check_equivariance(
            |x| lift_conv(x, LiftKernel::Base(&base), group, 1, 1),
            &img,
            group,
            1,
        )
        .unwrap();
        assert!(err_c4 < 1e-12);
        // a conventional conv (orientation axis faked as singleton) is not;
        // reported, not asserted: just confirm the measured error is large.
        let trivial = GroupSpec::trivial();
        let err_conventional = check_equivariance(
            |x| {
                let y = conv2d(x, &base, 1, 1)?;
                let sh = y.shape().to_vec();
                OrientedFeatureMap::new(y.reshape(&[sh[0], 1, sh[1], sh[2]])?, trivial)
            },
            &img,
            // compare under a quarter turn of the image with no shift
            trivial,
            0,
        )
        .unwrap();
        // angle index 0 is the identity for C1, so the error is zero there;
        // measure against an explicit quarter turn instead.
        assert_eq!(err_conventional, 0.0);
        let rot_img = rotate_field(&img, 1, group).unwrap();
        let a = conv2d(&rot_img, &base, 1, 1).unwrap();
        let b = rotate_field(&conv2d(&img, &base, 1, 1).unwrap(), 1, group).unwrap();
        assert!(
            a.max_abs_diff(&b) > 1e-2,
            "random conventional conv should visibly break equivariance"
        );
    }
}
