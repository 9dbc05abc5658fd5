//! Small residual descriptor networks parameterized by group order.
//!
//! One code path covers the conventional baseline (N = 1) and the
//! steerable variants (N = 4, 8): a lifting convolution maps the image to
//! an orientation-indexed feature map, residual stages of per-orientation
//! convolutions (one shared base kernel each, so the parameter count does
//! not depend on N) refine it, orientation pooling collapses the
//! orientation axis, GeM or average pooling collapses space, and a linear
//! projection plus L2 normalization yields the descriptor.
//!
//! Stage downsampling is a 2x2 stride-2 mean pool: unlike a strided 3x3
//! convolution on even grids, block pooling commutes exactly with quarter
//! turns, which keeps C4 equivariance exact through the whole stack.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::aggregation::{
    avg_pool_spatial, avg_pool_spatial_backward, gem_pool, gem_pool_backward, l2_normalize,
    l2_normalize_backward, GemCache, GemParams,
};
use crate::equivariant::{
    apply_group_action, gather_orientation, orientation_pool, orientation_pool_backward,
    rotate_field, rotate_kernel_adjoint_index, rotated_copies, scatter_orientation_add,
    OrientationPool, OrientedFeatureMap,
};
use crate::error::{Error, Result};
use crate::group::GroupSpec;
use crate::norm::{
    normalize_batch_backward, normalize_batch_infer, normalize_batch_train, NormCache, NormState,
    DEFAULT_EPS,
};
use crate::ops::{
    conv2d_input_grad_slice, conv2d_kernel_grad_slice, conv2d_slice, linear, linear_backward,
    relu, relu_backward, ConvGeom,
};
use crate::par;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MODEL_MAGIC: &[u8; 4] = b"EPM1";
const MODEL_VERSION: u16 = 1;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialPool {
    Gem,
    Avg,
}

impl SpatialPool {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gem" => Ok(SpatialPool::Gem),
            "avg" => Ok(SpatialPool::Avg),
            other => Err(Error::Config(format!("unknown spatial pooling '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SpatialPool::Gem => "gem",
            SpatialPool::Avg => "avg",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub group_order: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub kernel_size: usize,
    pub input_size: usize,
    pub descriptor_dim: usize,
    pub pooling: SpatialPool,
    pub orientation_pool: OrientationPool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            group_order: 4,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            kernel_size: 3,
            input_size: 64,
            descriptor_dim: 512,
            pooling: SpatialPool::Gem,
            orientation_pool: OrientationPool::Max,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        GroupSpec::cyclic(self.group_order)?;
        if self.stage_widths.is_empty() {
            return Err(Error::Config("stage_widths must be non-empty".into()));
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if self.stage_widths.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "stage widths must be non-decreasing, got {:?}",
                self.stage_widths
            )));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be >= 1".into()));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::Config(format!(
                "kernel_size {} must be odd",
                self.kernel_size
            )));
        }
        if self.descriptor_dim < 8 {
            return Err(Error::Config(format!(
                "descriptor_dim {} must be >= 8",
                self.descriptor_dim
            )));
        }
        let halvings = self.stage_widths.len() - 1;
        let mut side = self.input_size;
        for _ in 0..halvings {
            if side % 2 != 0 {
                return Err(Error::Config(format!(
                    "input_size {} does not survive {halvings} halvings",
                    self.input_size
                )));
            }
            side /= 2;
        }
        if side < self.kernel_size {
            return Err(Error::Config(format!(
                "spatial size collapses below kernel size: {side} < {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn group(&self) -> Result<GroupSpec> {
        GroupSpec::cyclic(self.group_order)
    }

    /// Flat `key=value` listing, one per line, used by the model file.
    pub fn to_kv(&self) -> String {
        let widths: Vec<String> = self.stage_widths.iter().map(|w| w.to_string()).collect();
        format!(
            "group_order={}\nstage_widths={}\nblocks_per_stage={}\nkernel_size={}\ninput_size={}\ndescriptor_dim={}\npooling={}\norientation_pool={}\nseed={}\n",
            self.group_order,
            widths.join(","),
            self.blocks_per_stage,
            self.kernel_size,
            self.input_size,
            self.descriptor_dim,
            self.pooling.name(),
            self.orientation_pool.name(),
            self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line '{line}'")))?;
            cfg.set_key(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{key}={value}: {e}"));
        match key {
            "group_order" => self.group_order = value.parse().map_err(|e| bad(&e))?,
            "stage_widths" => {
                self.stage_widths = value
                    .split(',')
                    .map(|v| v.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(&e))?;
            }
            "blocks_per_stage" => self.blocks_per_stage = value.parse().map_err(|e| bad(&e))?,
            "kernel_size" => self.kernel_size = value.parse().map_err(|e| bad(&e))?,
            "input_size" => self.input_size = value.parse().map_err(|e| bad(&e))?,
            "descriptor_dim" => self.descriptor_dim = value.parse().map_err(|e| bad(&e))?,
            "pooling" => self.pooling = SpatialPool::parse(value)?,
            "orientation_pool" => self.orientation_pool = OrientationPool::parse(value)?,
            "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
            other => return Err(Error::Config(format!("unknown model config key '{other}'"))),
        }
        Ok(())
    }

    /// Closed-form trainable parameter count. Independent of group order:
    /// every conv owns one base kernel shared by its rotated copies.
    pub fn param_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        let w = &self.stage_widths;
        let mut count = w[0] * 3 * k2 + 2 * w[0]; // lift + entry norm
        for s in 1..w.len() {
            count += w[s] * w[s - 1] * k2 + 2 * w[s]; // transition conv + norm
        }
        for &width in w {
            count += self.blocks_per_stage * (2 * width * width * k2 + 4 * width);
        }
        if self.pooling == SpatialPool::Gem {
            count += 1;
        }
        count += self.descriptor_dim * w[w.len() - 1] + self.descriptor_dim;
        count
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct NormLayer<T> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
    state: NormState<T>,
}

impl<T: Scalar> NormLayer<T> {
    fn new(channels: usize) -> Self {
        NormLayer {
            gamma: Tensor::filled(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            state: NormState::new(channels),
        }
    }
}

#[derive(Clone, Debug)]
struct BlockLayer<T> {
    conv_a: Tensor<T>,
    norm_a: NormLayer<T>,
    conv_b: Tensor<T>,
    norm_b: NormLayer<T>,
}

#[derive(Clone, Debug)]
enum TrunkLayer<T> {
    /// Lifting conv base kernel: plain image in, oriented features out.
    Lift(Tensor<T>),
    /// Orientation-wise transition conv base kernel (changes width).
    Conv(Tensor<T>),
    Norm(NormLayer<T>),
    Relu,
    /// 2x2 stride-2 mean pool over space.
    Downsample,
    /// Residual block: conv-norm-relu-conv-norm + skip, then relu.
    Block(BlockLayer<T>),
}

/// Per-layer caches recorded during a training forward pass.
enum TrunkCache<T> {
    Lift { input: Tensor<T> },
    Conv { input: Tensor<T> },
    Norm { cache: NormCache<T> },
    Relu { input: Tensor<T> },
    Downsample { in_shape: Vec<usize> },
    Block(Box<BlockCache<T>>),
}

struct BlockCache<T> {
    input: Tensor<T>,
    norm_a: NormCache<T>,
    relu_in: Tensor<T>,
    b_in: Tensor<T>,
    norm_b: NormCache<T>,
    sum: Tensor<T>,
}

/// Gradients keyed by parameter identifier, plus the gradient with respect
/// to the model input batch.
#[derive(Debug)]
pub struct LayerGradients<T> {
    pub by_param: BTreeMap<String, Tensor<T>>,
    pub input_grad: Tensor<T>,
}

/// Output of one traced layer, used by equivariance checks.
#[derive(Clone, Debug)]
pub enum TraceStep<T> {
    Oriented(OrientedFeatureMap<T>),
    Spatial(Tensor<T>),
    Vector(Tensor<T>),
}

// ---------------------------------------------------------------------------
// Batched layer kernels (free functions; batch axis handled by chunking)
// ---------------------------------------------------------------------------

/// Orientation-wise convolution over a `[B, C_in, N, H, W]` batch with the
/// rotated copies of one base kernel. Stride 1, same padding.
fn conv_forward_batched<T: Scalar>(
    group: GroupSpec,
    input: &Tensor<T>,
    base: &Tensor<T>,
    jobs: usize,
) -> Result<Tensor<T>> {
    let sh = input.shape();
    let (b, c_in, n_or, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let ksh = base.shape();
    let k = ksh[2];
    let g = ConvGeom::new(c_in, h, w, ksh[0], k, 1, k / 2)?;
    let rotated = rotated_copies(base, group)?;
    let mut out = Tensor::zeros(&[b, ksh[0], n_or, g.oh, g.ow]);
    let in_per_b = c_in * n_or * h * w;
    let out_per_b = ksh[0] * n_or * g.oh * g.ow;
    let in_data = input.data();
    par::for_each_chunk(jobs, out.data_mut(), out_per_b, |bi, out_chunk| {
        let in_chunk = &in_data[bi * in_per_b..(bi + 1) * in_per_b];
        let mut in_slice = vec![T::zero(); c_in * h * w];
        let mut conv_out = vec![T::zero(); ksh[0] * g.oh * g.ow];
        for n in 0..n_or {
            gather_orientation(in_chunk, c_in, n_or, h * w, n, &mut in_slice);
            conv2d_slice(&in_slice, rotated[n].data(), &g, &mut conv_out);
            scatter_orientation_add(out_chunk, ksh[0], n_or, g.oh * g.ow, n, &conv_out);
        }
    });
    Ok(out)
}

/// Backward of [`conv_forward_batched`]: `(d_input, d_base)`.
fn conv_backward_batched<T: Scalar>(
    group: GroupSpec,
    input: &Tensor<T>,
    base: &Tensor<T>,
    grad_out: &Tensor<T>,
    jobs: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let sh = input.shape();
    let (_b, c_in, n_or, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let ksh = base.shape().to_vec();
    let k = ksh[2];
    let g = ConvGeom::new(c_in, h, w, ksh[0], k, 1, k / 2)?;
    let rotated = rotated_copies(base, group)?;
    let mut d_input = Tensor::zeros(input.shape());
    let in_per_b = c_in * n_or * h * w;
    let out_per_b = ksh[0] * n_or * g.oh * g.ow;
    let in_data = input.data();
    let go_data = grad_out.data();
    // each batch item fills its own d_input chunk and per-orientation
    // rotated-kernel gradients; kernel gradients reduce in index order
    let mut slots: Vec<(&mut [T], Vec<Tensor<T>>)> = d_input
        .data_mut()
        .chunks_mut(in_per_b)
        .map(|chunk| (chunk, Vec::new()))
        .collect();
    par::for_each_slot(jobs, &mut slots, |bi, (di_chunk, dk_rots)| {
        let in_chunk = &in_data[bi * in_per_b..(bi + 1) * in_per_b];
        let go_chunk = &go_data[bi * out_per_b..(bi + 1) * out_per_b];
        let mut in_slice = vec![T::zero(); c_in * h * w];
        let mut go_slice = vec![T::zero(); ksh[0] * g.oh * g.ow];
        let mut local = Vec::with_capacity(n_or);
        for n in 0..n_or {
            gather_orientation(go_chunk, ksh[0], n_or, g.oh * g.ow, n, &mut go_slice);
            let mut di = vec![T::zero(); c_in * h * w];
            conv2d_input_grad_slice(&go_slice, rotated[n].data(), &g, &mut di);
            scatter_orientation_add(di_chunk, c_in, n_or, h * w, n, &di);

            gather_orientation(in_chunk, c_in, n_or, h * w, n, &mut in_slice);
            let mut dk_rot = Tensor::zeros(&ksh);
            conv2d_kernel_grad_slice(&in_slice, &go_slice, &g, dk_rot.data_mut());
            local.push(dk_rot);
        }
        *dk_rots = local;
    });
    let mut d_base = Tensor::zeros(&ksh);
    for n in 0..n_or {
        let mut acc = Tensor::zeros(&ksh);
        for (_, dk_rots) in &slots {
            acc.axpy(T::one(), &dk_rots[n])?;
        }
        rotate_kernel_adjoint_index(&acc, n, group, &mut d_base)?;
    }
    Ok((d_input, d_base))
}

/// Lifting convolution over a `[B, 3, S, S]` image batch.
fn lift_forward_batched<T: Scalar>(
    group: GroupSpec,
    images: &Tensor<T>,
    base: &Tensor<T>,
    jobs: usize,
) -> Result<Tensor<T>> {
    let sh = images.shape();
    let (b, c_img, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let ksh = base.shape();
    let k = ksh[2];
    let n_or = group.order();
    let g = ConvGeom::new(c_img, h, w, ksh[0], k, 1, k / 2)?;
    let rotated = rotated_copies(base, group)?;
    let mut out = Tensor::zeros(&[b, ksh[0], n_or, g.oh, g.ow]);
    let in_per_b = c_img * h * w;
    let out_per_b = ksh[0] * n_or * g.oh * g.ow;
    let in_data = images.data();
    par::for_each_chunk(jobs, out.data_mut(), out_per_b, |bi, out_chunk| {
        let image = &in_data[bi * in_per_b..(bi + 1) * in_per_b];
        let mut conv_out = vec![T::zero(); ksh[0] * g.oh * g.ow];
        for n in 0..n_or {
            conv2d_slice(image, rotated[n].data(), &g, &mut conv_out);
            scatter_orientation_add(out_chunk, ksh[0], n_or, g.oh * g.ow, n, &conv_out);
        }
    });
    Ok(out)
}

fn lift_backward_batched<T: Scalar>(
    group: GroupSpec,
    images: &Tensor<T>,
    base: &Tensor<T>,
    grad_out: &Tensor<T>,
    jobs: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let sh = images.shape();
    let (c_img, h, w) = (sh[1], sh[2], sh[3]);
    let ksh = base.shape().to_vec();
    let k = ksh[2];
    let n_or = group.order();
    let g = ConvGeom::new(c_img, h, w, ksh[0], k, 1, k / 2)?;
    let rotated = rotated_copies(base, group)?;
    let mut d_images = Tensor::zeros(images.shape());
    let in_per_b = c_img * h * w;
    let out_per_b = ksh[0] * n_or * g.oh * g.ow;
    let in_data = images.data();
    let go_data = grad_out.data();
    let mut slots: Vec<(&mut [T], Vec<Tensor<T>>)> = d_images
        .data_mut()
        .chunks_mut(in_per_b)
        .map(|chunk| (chunk, Vec::new()))
        .collect();
    par::for_each_slot(jobs, &mut slots, |bi, (di_chunk, dk_rots)| {
        let image = &in_data[bi * in_per_b..(bi + 1) * in_per_b];
        let go_chunk = &go_data[bi * out_per_b..(bi + 1) * out_per_b];
        let mut go_slice = vec![T::zero(); ksh[0] * g.oh * g.ow];
        let mut local = Vec::with_capacity(n_or);
        for n in 0..n_or {
            gather_orientation(go_chunk, ksh[0], n_or, g.oh * g.ow, n, &mut go_slice);
            conv2d_input_grad_slice(&go_slice, rotated[n].data(), &g, di_chunk);
            let mut dk_rot = Tensor::zeros(&ksh);
            conv2d_kernel_grad_slice(image, &go_slice, &g, dk_rot.data_mut());
            local.push(dk_rot);
        }
        *dk_rots = local;
    });
    let mut d_base = Tensor::zeros(&ksh);
    for n in 0..n_or {
        let mut acc = Tensor::zeros(&ksh);
        for (_, dk_rots) in &slots {
            acc.axpy(T::one(), &dk_rots[n])?;
        }
        rotate_kernel_adjoint_index(&acc, n, group, &mut d_base)?;
    }
    Ok((d_images, d_base))
}

/// 2x2 stride-2 mean pool over the trailing spatial dims of `[B,C,N,H,W]`.
fn downsample_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let sh = input.shape();
    let (h, w) = (sh[3], sh[4]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::fromf(0.25);
    let mut out = Tensor::zeros(&[sh[0], sh[1], sh[2], oh, ow]);
    let planes: usize = sh[..3].iter().product();
    for p in 0..planes {
        let src = &input.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = 2 * oy * w + 2 * ox;
                dst[oy * ow + ox] =
                    (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * quarter;
            }
        }
    }
    out
}

fn downsample_backward<T: Scalar>(in_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (in_shape[3], in_shape[4]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::fromf(0.25);
    let mut d_in = Tensor::zeros(in_shape);
    let planes: usize = in_shape[..3].iter().product();
    for p in 0..planes {
        let go = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        let di = &mut d_in.data_mut()[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = go[oy * ow + ox] * quarter;
                let base = 2 * oy * w + 2 * ox;
                di[base] = g;
                di[base + 1] = g;
                di[base + w] = g;
                di[base + w + 1] = g;
            }
        }
    }
    d_in
}

/// Orientation pool over a batch: `[B,C,N,H,W] -> [B,C,H,W]`.
fn opool_forward<T: Scalar>(
    group: GroupSpec,
    mode: OrientationPool,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    let sh = input.shape().to_vec();
    let per_b: usize = sh[1..].iter().product();
    let out_per_b = sh[1] * sh[3] * sh[4];
    let mut out = Tensor::zeros(&[sh[0], sh[1], sh[3], sh[4]]);
    for bi in 0..sh[0] {
        let one = Tensor::from_vec(
            &[sh[1], sh[2], sh[3], sh[4]],
            input.data()[bi * per_b..(bi + 1) * per_b].to_vec(),
        )?;
        let map = OrientedFeatureMap::new(one, group)?;
        let pooled = orientation_pool(&map, mode);
        out.data_mut()[bi * out_per_b..(bi + 1) * out_per_b].copy_from_slice(pooled.data());
    }
    Ok(out)
}

fn opool_backward<T: Scalar>(
    group: GroupSpec,
    mode: OrientationPool,
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let sh = input.shape().to_vec();
    let per_b: usize = sh[1..].iter().product();
    let out_per_b = sh[1] * sh[3] * sh[4];
    let mut d_in = Tensor::zeros(&sh);
    for bi in 0..sh[0] {
        let one = Tensor::from_vec(
            &[sh[1], sh[2], sh[3], sh[4]],
            input.data()[bi * per_b..(bi + 1) * per_b].to_vec(),
        )?;
        let map = OrientedFeatureMap::new(one, group)?;
        let go = Tensor::from_vec(
            &[sh[1], sh[3], sh[4]],
            grad_out.data()[bi * out_per_b..(bi + 1) * out_per_b].to_vec(),
        )?;
        let di = orientation_pool_backward(&map, mode, &go);
        d_in.data_mut()[bi * per_b..(bi + 1) * per_b].copy_from_slice(di.tensor().data());
    }
    Ok(d_in)
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    group: GroupSpec,
    trunk: Vec<(String, TrunkLayer<T>)>,
    proj_w: Tensor<T>,
    proj_b: Tensor<T>,
    gem: GemParams<T>,
}

/// Caches for one training forward pass.
pub struct ModelCache<T> {
    trunk: Vec<TrunkCache<T>>,
    opool_input: Tensor<T>,
    pool_input: Tensor<T>,
    gem_caches: Vec<GemCache<T>>,
    proj_inputs: Tensor<T>,
    l2_inputs: Tensor<T>,
}

/// Deterministic parameter initialization from the config seed: He fan-in
/// scaling for convs and projection, identity-affine norms.
pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<Model<T>> {
    config.validate()?;
    let group = config.group()?;
    let mut rng = Rng::derive(config.seed, &[0x6d6f64656c]); // "model"
    let k = config.kernel_size;
    let he = |c_in: usize| (2.0 / (c_in * k * k) as f64).sqrt();

    let mut trunk: Vec<(String, TrunkLayer<T>)> = Vec::new();
    let w0 = config.stage_widths[0];
    trunk.push((
        "lift".into(),
        TrunkLayer::Lift(Tensor::random_normal(&[w0, 3, k, k], he(3), &mut rng)),
    ));
    trunk.push(("lift_norm".into(), TrunkLayer::Norm(NormLayer::new(w0))));
    trunk.push(("lift_relu".into(), TrunkLayer::Relu));
    for (s, &width) in config.stage_widths.iter().enumerate() {
        if s > 0 {
            let prev = config.stage_widths[s - 1];
            trunk.push((format!("stage{s}.down"), TrunkLayer::Downsample));
            trunk.push((
                format!("stage{s}.trans"),
                TrunkLayer::Conv(Tensor::random_normal(&[width, prev, k, k], he(prev), &mut rng)),
            ));
            trunk.push((format!("stage{s}.norm"), TrunkLayer::Norm(NormLayer::new(width))));
            trunk.push((format!("stage{s}.relu"), TrunkLayer::Relu));
        }
        for b in 0..config.blocks_per_stage {
            trunk.push((
                format!("stage{s}.block{b}"),
                TrunkLayer::Block(BlockLayer {
                    conv_a: Tensor::random_normal(&[width, width, k, k], he(width), &mut rng),
                    norm_a: NormLayer::new(width),
                    conv_b: Tensor::random_normal(&[width, width, k, k], he(width), &mut rng),
                    norm_b: NormLayer::new(width),
                }),
            ));
        }
    }
    let c_last = *config.stage_widths.last().unwrap();
    let mut proj_w = Tensor::random_normal(
        &[config.descriptor_dim, c_last],
        (2.0 / c_last as f64).sqrt(),
        &mut rng,
    );
    // center each projection row: pooled activations carry a large shared
    // positive offset, and zero-sum rows keep it out of the descriptors
    for row in proj_w.data_mut().chunks_mut(c_last) {
        let mean = row.iter().copied().sum::<T>() / T::fromf(c_last as f64);
        for v in row {
            *v = *v - mean;
        }
    }
    let proj_b = Tensor::zeros(&[config.descriptor_dim]);
    Ok(Model {
        config: config.clone(),
        group,
        trunk,
        proj_w,
        proj_b,
        gem: GemParams::default(),
    })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn group(&self) -> GroupSpec {
        self.group
    }

    pub fn gem_exponent(&self) -> T {
        self.gem.p
    }

    /// Enumerated trainable parameter count (compare with
    /// [`ModelConfig::param_count`]).
    pub fn count_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }

    /// Visit trainable parameters in deterministic layer order.
    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Tensor<T>)) {
        for (id, layer) in &self.trunk {
            match layer {
                TrunkLayer::Lift(base) | TrunkLayer::Conv(base) => f(&format!("{id}.base"), base),
                TrunkLayer::Norm(nl) => {
                    f(&format!("{id}.gamma"), &nl.gamma);
                    f(&format!("{id}.beta"), &nl.beta);
                }
                TrunkLayer::Block(bl) => {
                    f(&format!("{id}.conv_a.base"), &bl.conv_a);
                    f(&format!("{id}.norm_a.gamma"), &bl.norm_a.gamma);
                    f(&format!("{id}.norm_a.beta"), &bl.norm_a.beta);
                    f(&format!("{id}.conv_b.base"), &bl.conv_b);
                    f(&format!("{id}.norm_b.gamma"), &bl.norm_b.gamma);
                    f(&format!("{id}.norm_b.beta"), &bl.norm_b.beta);
                }
                TrunkLayer::Relu | TrunkLayer::Downsample => {}
            }
        }
        if self.config.pooling == SpatialPool::Gem {
            let p = Tensor::from_vec(&[1], vec![self.gem.p]).expect("scalar");
            f("head.gem_p", &p);
        }
        f("head.proj_w", &self.proj_w);
        f("head.proj_b", &self.proj_b);
    }

    /// Apply `f` to every trainable parameter, in [`Self::visit_params`]
    /// order. The GeM exponent is clamped back to `p >= 1` afterwards.
    pub fn update_params(&mut self, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        for (id, layer) in &mut self.trunk {
            match layer {
                TrunkLayer::Lift(base) | TrunkLayer::Conv(base) => f(&format!("{id}.base"), base),
                TrunkLayer::Norm(nl) => {
                    f(&format!("{id}.gamma"), &mut nl.gamma);
                    f(&format!("{id}.beta"), &mut nl.beta);
                }
                TrunkLayer::Block(bl) => {
                    f(&format!("{id}.conv_a.base"), &mut bl.conv_a);
                    f(&format!("{id}.norm_a.gamma"), &mut bl.norm_a.gamma);
                    f(&format!("{id}.norm_a.beta"), &mut bl.norm_a.beta);
                    f(&format!("{id}.conv_b.base"), &mut bl.conv_b);
                    f(&format!("{id}.norm_b.gamma"), &mut bl.norm_b.gamma);
                    f(&format!("{id}.norm_b.beta"), &mut bl.norm_b.beta);
                }
                TrunkLayer::Relu | TrunkLayer::Downsample => {}
            }
        }
        if self.config.pooling == SpatialPool::Gem {
            let mut p = Tensor::from_vec(&[1], vec![self.gem.p]).expect("scalar");
            f("head.gem_p", &mut p);
            self.gem.p = p.data()[0].max(T::one());
        }
        f("head.proj_w", &mut self.proj_w);
        f("head.proj_b", &mut self.proj_b);
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size;
        if images.rank() != 4 || images.shape()[1] != 3 {
            return Err(Error::Shape(format!(
                "expected images [B,3,{s},{s}], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[2] != s || images.shape()[3] != s {
            return Err(Error::Shape(format!(
                "input size {}x{} does not match configured {s}",
                images.shape()[2],
                images.shape()[3]
            )));
        }
        Ok(())
    }

    /// Training-mode forward over an image batch: batch-statistics
    /// normalization, running-statistics updates, full caches.
    pub fn forward_train(
        &mut self,
        images: &Tensor<T>,
        jobs: usize,
    ) -> Result<(Tensor<T>, ModelCache<T>)> {
        self.check_images(images)?;
        let eps = T::fromf(DEFAULT_EPS);
        let group = self.group;
        let mut caches: Vec<TrunkCache<T>> = Vec::with_capacity(self.trunk.len());
        let mut cur = Tensor::zeros(&[0]);
        let mut first = true;
        for (_, layer) in &mut self.trunk {
            cur = match layer {
                TrunkLayer::Lift(base) => {
                    debug_assert!(first);
                    first = false;
                    let out = lift_forward_batched(group, images, base, jobs)?;
                    caches.push(TrunkCache::Lift {
                        input: images.clone(),
                    });
                    out
                }
                TrunkLayer::Conv(base) => {
                    let out = conv_forward_batched(group, &cur, base, jobs)?;
                    caches.push(TrunkCache::Conv { input: cur });
                    out
                }
                TrunkLayer::Norm(nl) => {
                    let (out, cache) =
                        normalize_batch_train(&cur, &nl.gamma, &nl.beta, eps, Some(&mut nl.state))?;
                    caches.push(TrunkCache::Norm { cache });
                    out
                }
                TrunkLayer::Relu => {
                    let out = relu(&cur);
                    caches.push(TrunkCache::Relu { input: cur });
                    out
                }
                TrunkLayer::Downsample => {
                    let out = downsample_forward(&cur);
                    caches.push(TrunkCache::Downsample {
                        in_shape: cur.shape().to_vec(),
                    });
                    out
                }
                TrunkLayer::Block(bl) => {
                    let input = cur;
                    let a_out = conv_forward_batched(group, &input, &bl.conv_a, jobs)?;
                    let (na_out, na_cache) = normalize_batch_train(
                        &a_out,
                        &bl.norm_a.gamma,
                        &bl.norm_a.beta,
                        eps,
                        Some(&mut bl.norm_a.state),
                    )?;
                    let relu_in = na_out;
                    let b_in = relu(&relu_in);
                    let b_out = conv_forward_batched(group, &b_in, &bl.conv_b, jobs)?;
                    let (nb_out, nb_cache) = normalize_batch_train(
                        &b_out,
                        &bl.norm_b.gamma,
                        &bl.norm_b.beta,
                        eps,
                        Some(&mut bl.norm_b.state),
                    )?;
                    let sum = nb_out.add(&input)?;
                    let out = relu(&sum);
                    caches.push(TrunkCache::Block(Box::new(BlockCache {
                        input,
                        norm_a: na_cache,
                        relu_in,
                        b_in,
                        norm_b: nb_cache,
                        sum,
                    })));
                    out
                }
            };
        }
        let mut cache = ModelCache {
            trunk: caches,
            opool_input: Tensor::zeros(&[1]),
            pool_input: Tensor::zeros(&[1]),
            gem_caches: Vec::new(),
            proj_inputs: Tensor::zeros(&[1]),
            l2_inputs: Tensor::zeros(&[1]),
        };
        let desc = self.head_forward(cur, Some(&mut cache))?;
        Ok((desc, cache))
    }

    /// Populate batch-norm running statistics with train-mode forward
    /// passes; no parameters change. Untrained models evaluated in
    /// inference mode need this, since their running statistics otherwise
    /// sit at the (0, 1) initialization.
    pub fn calibrate_norm_stats(&mut self, batches: &[Tensor<T>], jobs: usize) -> Result<()> {
        for batch in batches {
            self.forward_train(batch, jobs)?;
        }
        Ok(())
    }

    /// Inference-mode batched forward (running statistics, no caches).
    pub fn forward_eval(&self, images: &Tensor<T>, jobs: usize) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let eps = T::fromf(DEFAULT_EPS);
        let group = self.group;
        let mut cur = Tensor::zeros(&[0]);
        for (_, layer) in &self.trunk {
            cur = match layer {
                TrunkLayer::Lift(base) => lift_forward_batched(group, images, base, jobs)?,
                TrunkLayer::Conv(base) => conv_forward_batched(group, &cur, base, jobs)?,
                TrunkLayer::Norm(nl) => {
                    normalize_batch_infer(&cur, &nl.gamma, &nl.beta, eps, &nl.state)?
                }
                TrunkLayer::Relu => relu(&cur),
                TrunkLayer::Downsample => downsample_forward(&cur),
                TrunkLayer::Block(bl) => {
                    let input = cur;
                    let a = conv_forward_batched(group, &input, &bl.conv_a, jobs)?;
                    let a = normalize_batch_infer(
                        &a,
                        &bl.norm_a.gamma,
                        &bl.norm_a.beta,
                        eps,
                        &bl.norm_a.state,
                    )?;
                    let a = relu(&a);
                    let b = conv_forward_batched(group, &a, &bl.conv_b, jobs)?;
                    let b = normalize_batch_infer(
                        &b,
                        &bl.norm_b.gamma,
                        &bl.norm_b.beta,
                        eps,
                        &bl.norm_b.state,
                    )?;
                    relu(&b.add(&input)?)
                }
            };
        }
        self.head_forward(cur, None)
    }

    fn head_forward(
        &self,
        trunk_out: Tensor<T>,
        mut cache: Option<&mut ModelCache<T>>,
    ) -> Result<Tensor<T>> {
        let pooled_or = opool_forward(self.group, self.config.orientation_pool, &trunk_out)?;
        let sh = pooled_or.shape().to_vec();
        let (b, c) = (sh[0], sh[1]);
        let per_b = c * sh[2] * sh[3];
        let mut vectors = Tensor::zeros(&[b, c]);
        let mut gem_caches = Vec::new();
        for bi in 0..b {
            let one = Tensor::from_vec(
                &[c, sh[2], sh[3]],
                pooled_or.data()[bi * per_b..(bi + 1) * per_b].to_vec(),
            )?;
            let v = match self.config.pooling {
                SpatialPool::Gem => {
                    let (v, gc) = gem_pool(&one, self.gem)?;
                    if cache.is_some() {
                        gem_caches.push(gc);
                    }
                    v
                }
                SpatialPool::Avg => avg_pool_spatial(&one)?,
            };
            vectors.data_mut()[bi * c..(bi + 1) * c].copy_from_slice(v.data());
        }
        let d = self.config.descriptor_dim;
        let mut projected = Tensor::zeros(&[b, d]);
        for bi in 0..b {
            let x = Tensor::from_vec(&[c], vectors.data()[bi * c..(bi + 1) * c].to_vec())?;
            let y = linear(&x, &self.proj_w, &self.proj_b)?;
            projected.data_mut()[bi * d..(bi + 1) * d].copy_from_slice(y.data());
        }
        let mut descriptors = Tensor::zeros(&[b, d]);
        for bi in 0..b {
            let y = Tensor::from_vec(&[d], projected.data()[bi * d..(bi + 1) * d].to_vec())?;
            let u = l2_normalize(&y)?;
            descriptors.data_mut()[bi * d..(bi + 1) * d].copy_from_slice(u.data());
        }
        if let Some(mc) = cache.as_deref_mut() {
            mc.opool_input = trunk_out;
            mc.pool_input = pooled_or;
            mc.gem_caches = gem_caches;
            mc.proj_inputs = vectors;
            mc.l2_inputs = projected;
        }
        Ok(descriptors)
    }

    /// Encode one `[3, S, S]` image (values in `[0, 1]`) into a unit-norm
    /// descriptor.
    pub fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.config.input_size;
        if image.shape() != [3, s, s] {
            return Err(Error::Shape(format!(
                "encode wants [3,{s},{s}], got {:?}",
                image.shape()
            )));
        }
        for &v in image.data() {
            let v = v.tof();
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!(
                    "image values must lie in [0,1], got {v}"
                )));
            }
        }
        let batch = image.clone().reshape(&[1, 3, s, s])?;
        let desc = self.forward_eval(&batch, 1)?;
        let d = self.config.descriptor_dim;
        Tensor::from_vec(&[d], desc.data().to_vec())
    }

    /// Backward pass over a cached training forward. `d_desc` is the loss
    /// gradient with respect to the descriptors `[B, D]`.
    pub fn backward(
        &self,
        cache: &ModelCache<T>,
        d_desc: &Tensor<T>,
        jobs: usize,
    ) -> Result<LayerGradients<T>> {
        let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let b = d_desc.shape()[0];
        let d = self.config.descriptor_dim;
        let c = *self.config.stage_widths.last().unwrap();

        // head: l2 norm -> projection -> spatial pool -> orientation pool
        let mut d_proj_out = Tensor::zeros(&[b, d]);
        for bi in 0..b {
            let y = Tensor::from_vec(&[d], cache.l2_inputs.data()[bi * d..(bi + 1) * d].to_vec())?;
            let g = Tensor::from_vec(&[d], d_desc.data()[bi * d..(bi + 1) * d].to_vec())?;
            let dy = l2_normalize_backward(&y, &g)?;
            d_proj_out.data_mut()[bi * d..(bi + 1) * d].copy_from_slice(dy.data());
        }
        let mut d_vectors = Tensor::zeros(&[b, c]);
        let mut d_proj_w = Tensor::zeros(self.proj_w.shape());
        let mut d_proj_b = Tensor::zeros(self.proj_b.shape());
        for bi in 0..b {
            let x = Tensor::from_vec(
                &[c],
                cache.proj_inputs.data()[bi * c..(bi + 1) * c].to_vec(),
            )?;
            let g = Tensor::from_vec(&[d], d_proj_out.data()[bi * d..(bi + 1) * d].to_vec())?;
            let (dx, dw, db) = linear_backward(&x, &self.proj_w, &self.proj_b, &g)?;
            d_vectors.data_mut()[bi * c..(bi + 1) * c].copy_from_slice(dx.data());
            d_proj_w.axpy(T::one(), &dw)?;
            d_proj_b.axpy(T::one(), &db)?;
        }
        grads.insert("head.proj_w".into(), d_proj_w);
        grads.insert("head.proj_b".into(), d_proj_b);

        let psh = cache.pool_input.shape().to_vec();
        let per_b = psh[1] * psh[2] * psh[3];
        let mut d_pool_in = Tensor::zeros(&psh);
        let mut d_gem_p = T::zero();
        for bi in 0..b {
            let one = Tensor::from_vec(
                &[psh[1], psh[2], psh[3]],
                cache.pool_input.data()[bi * per_b..(bi + 1) * per_b].to_vec(),
            )?;
            let g = Tensor::from_vec(&[c], d_vectors.data()[bi * c..(bi + 1) * c].to_vec())?;
            match self.config.pooling {
                SpatialPool::Gem => {
                    let (dx, dp) = gem_pool_backward(&one, &cache.gem_caches[bi], &g)?;
                    d_pool_in.data_mut()[bi * per_b..(bi + 1) * per_b].copy_from_slice(dx.data());
                    d_gem_p += dp;
                }
                SpatialPool::Avg => {
                    let dx = avg_pool_spatial_backward(&[psh[1], psh[2], psh[3]], &g);
                    d_pool_in.data_mut()[bi * per_b..(bi + 1) * per_b].copy_from_slice(dx.data());
                }
            }
        }
        if self.config.pooling == SpatialPool::Gem {
            grads.insert("head.gem_p".into(), Tensor::from_vec(&[1], vec![d_gem_p])?);
        }
        let mut d_cur = opool_backward(
            self.group,
            self.config.orientation_pool,
            &cache.opool_input,
            &d_pool_in,
        )?;

        // trunk in reverse
        let mut input_grad: Option<Tensor<T>> = None;
        for (li, (id, layer)) in self.trunk.iter().enumerate().rev() {
            let lc = &cache.trunk[li];
            match (layer, lc) {
                (TrunkLayer::Lift(base), TrunkCache::Lift { input }) => {
                    let (di, dk) = lift_backward_batched(self.group, input, base, &d_cur, jobs)?;
                    grads.insert(format!("{id}.base"), dk);
                    input_grad = Some(di);
                }
                (TrunkLayer::Conv(base), TrunkCache::Conv { input }) => {
                    let (di, dk) = conv_backward_batched(self.group, input, base, &d_cur, jobs)?;
                    grads.insert(format!("{id}.base"), dk);
                    d_cur = di;
                }
                (TrunkLayer::Norm(nl), TrunkCache::Norm { cache }) => {
                    let (di, dg, db) = normalize_batch_backward(cache, &nl.gamma, &d_cur)?;
                    grads.insert(format!("{id}.gamma"), dg);
                    grads.insert(format!("{id}.beta"), db);
                    d_cur = di;
                }
                (TrunkLayer::Relu, TrunkCache::Relu { input }) => {
                    d_cur = relu_backward(input, &d_cur);
                }
                (TrunkLayer::Downsample, TrunkCache::Downsample { in_shape }) => {
                    d_cur = downsample_backward(in_shape, &d_cur);
                }
                (TrunkLayer::Block(bl), TrunkCache::Block(bc)) => {
                    // out = relu(sum), sum = norm_b(conv_b(relu(norm_a(conv_a(x))))) + x
                    let d_sum = relu_backward(&bc.sum, &d_cur);
                    let d_skip = d_sum.clone();
                    let (d_bout, dgb, dbb) =
                        normalize_batch_backward(&bc.norm_b, &bl.norm_b.gamma, &d_sum)?;
                    grads.insert(format!("{id}.norm_b.gamma"), dgb);
                    grads.insert(format!("{id}.norm_b.beta"), dbb);
                    let (d_bin, dkb) =
                        conv_backward_batched(self.group, &bc.b_in, &bl.conv_b, &d_bout, jobs)?;
                    grads.insert(format!("{id}.conv_b.base"), dkb);
                    let d_relu = relu_backward(&bc.relu_in, &d_bin);
                    let (d_aout, dga, dba) =
                        normalize_batch_backward(&bc.norm_a, &bl.norm_a.gamma, &d_relu)?;
                    grads.insert(format!("{id}.norm_a.gamma"), dga);
                    grads.insert(format!("{id}.norm_a.beta"), dba);
                    let (mut d_in, dka) =
                        conv_backward_batched(self.group, &bc.input, &bl.conv_a, &d_aout, jobs)?;
                    grads.insert(format!("{id}.conv_a.base"), dka);
                    d_in.axpy(T::one(), &d_skip)?;
                    d_cur = d_in;
                }
                _ => {
                    return Err(Error::Shape(format!(
                        "cache mismatch at layer {id}; forward/backward out of sync"
                    )))
                }
            }
        }
        Ok(LayerGradients {
            by_param: grads,
            input_grad: input_grad.expect("trunk starts with the lift layer"),
        })
    }

    /// Eval-mode forward of a single image recording every layer output,
    /// for equivariance checks.
    pub fn forward_trace(&self, image: &Tensor<T>) -> Result<Vec<(String, TraceStep<T>)>> {
        let s = self.config.input_size;
        if image.shape() != [3, s, s] {
            return Err(Error::Shape(format!(
                "trace wants [3,{s},{s}], got {:?}",
                image.shape()
            )));
        }
        let eps = T::fromf(DEFAULT_EPS);
        let batch = image.clone().reshape(&[1, 3, s, s])?;
        let mut steps = Vec::new();
        let mut cur = Tensor::zeros(&[0]);
        for (id, layer) in &self.trunk {
            cur = match layer {
                TrunkLayer::Lift(base) => lift_forward_batched(self.group, &batch, base, 1)?,
                TrunkLayer::Conv(base) => conv_forward_batched(self.group, &cur, base, 1)?,
                TrunkLayer::Norm(nl) => {
                    normalize_batch_infer(&cur, &nl.gamma, &nl.beta, eps, &nl.state)?
                }
                TrunkLayer::Relu => relu(&cur),
                TrunkLayer::Downsample => downsample_forward(&cur),
                TrunkLayer::Block(bl) => {
                    let input = cur.clone();
                    let a = conv_forward_batched(self.group, &input, &bl.conv_a, 1)?;
                    let a = normalize_batch_infer(
                        &a,
                        &bl.norm_a.gamma,
                        &bl.norm_a.beta,
                        eps,
                        &bl.norm_a.state,
                    )?;
                    let a = relu(&a);
                    let bb = conv_forward_batched(self.group, &a, &bl.conv_b, 1)?;
                    let bb = normalize_batch_infer(
                        &bb,
                        &bl.norm_b.gamma,
                        &bl.norm_b.beta,
                        eps,
                        &bl.norm_b.state,
                    )?;
                    relu(&bb.add(&input)?)
                }
            };
            let sh = cur.shape().to_vec();
            let map = OrientedFeatureMap::new(
                cur.clone().reshape(&[sh[1], sh[2], sh[3], sh[4]])?,
                self.group,
            )?;
            steps.push((id.clone(), TraceStep::Oriented(map)));
        }
        let pooled = opool_forward(self.group, self.config.orientation_pool, &cur)?;
        let psh = pooled.shape().to_vec();
        let spatial = pooled.reshape(&[psh[1], psh[2], psh[3]])?;
        steps.push((
            "orientation_pool".into(),
            TraceStep::Spatial(spatial.clone()),
        ));
        let vector = match self.config.pooling {
            SpatialPool::Gem => gem_pool(&spatial, self.gem)?.0,
            SpatialPool::Avg => avg_pool_spatial(&spatial)?,
        };
        steps.push(("spatial_pool".into(), TraceStep::Vector(vector.clone())));
        let projected = linear(&vector, &self.proj_w, &self.proj_b)?;
        steps.push(("projection".into(), TraceStep::Vector(projected.clone())));
        let descriptor = l2_normalize(&projected)?;
        steps.push(("descriptor".into(), TraceStep::Vector(descriptor)));
        Ok(steps)
    }

    /// Per-layer equivariance errors `max |f_l(g.x) - g.f_l(x)|` for the
    /// group element at `angle_index`, on a circular-masked input.
    pub fn equivariance_errors(
        &self,
        image: &Tensor<T>,
        angle_index: usize,
    ) -> Result<Vec<(String, f64)>> {
        let rotated = rotate_field(image, angle_index, self.group)?;
        let plain_trace = self.forward_trace(image)?;
        let rot_trace = self.forward_trace(&rotated)?;
        let mut out = Vec::with_capacity(plain_trace.len());
        for ((id, plain), (_, rot)) in plain_trace.iter().zip(&rot_trace) {
            let err = match (plain, rot) {
                (TraceStep::Oriented(p), TraceStep::Oriented(r)) => {
                    let expected = apply_group_action(p, angle_index)?;
                    r.tensor().max_abs_diff(expected.tensor())
                }
                (TraceStep::Spatial(p), TraceStep::Spatial(r)) => {
                    let expected = rotate_field(p, angle_index, self.group)?;
                    r.max_abs_diff(&expected)
                }
                (TraceStep::Vector(p), TraceStep::Vector(r)) => r.max_abs_diff(p),
                _ => unreachable!("traces align"),
            };
            out.push((id.clone(), err));
        }
        Ok(out)
    }

    // -- serialization --------------------------------------------------------

    /// Visit all persistent state (trainable parameters plus batch-norm
    /// running statistics) in a stable order.
    fn visit_state(&self, f: &mut impl FnMut(&str, &Tensor<T>)) {
        self.visit_params(&mut |id, t| f(id, t));
        for (id, layer) in &self.trunk {
            match layer {
                TrunkLayer::Norm(nl) => {
                    f(&format!("{id}.running_mean"), &nl.state.running_mean);
                    f(&format!("{id}.running_var"), &nl.state.running_var);
                }
                TrunkLayer::Block(bl) => {
                    f(&format!("{id}.norm_a.running_mean"), &bl.norm_a.state.running_mean);
                    f(&format!("{id}.norm_a.running_var"), &bl.norm_a.state.running_var);
                    f(&format!("{id}.norm_b.running_mean"), &bl.norm_b.state.running_mean);
                    f(&format!("{id}.norm_b.running_var"), &bl.norm_b.state.running_var);
                }
                _ => {}
            }
        }
    }

    fn update_state(&mut self, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        self.update_params(&mut |id, t| f(id, t));
        for (id, layer) in &mut self.trunk {
            match layer {
                TrunkLayer::Norm(nl) => {
                    f(&format!("{id}.running_mean"), &mut nl.state.running_mean);
                    f(&format!("{id}.running_var"), &mut nl.state.running_var);
                }
                TrunkLayer::Block(bl) => {
                    f(&format!("{id}.norm_a.running_mean"), &mut bl.norm_a.state.running_mean);
                    f(&format!("{id}.norm_a.running_var"), &mut bl.norm_a.state.running_var);
                    f(&format!("{id}.norm_b.running_mean"), &mut bl.norm_b.state.running_mean);
                    f(&format!("{id}.norm_b.running_var"), &mut bl.norm_b.state.running_var);
                }
                _ => {}
            }
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        let cfg = self.config.to_kv();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg.as_bytes())?;
        let mut result = Ok(());
        self.visit_state(&mut |_, t| {
            if result.is_ok() {
                result = t.write_to(w);
            }
        });
        result
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("model header: {e}")))?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format(format!(
                "bad model magic {magic:?}, expected {MODEL_MAGIC:?}"
            )));
        }
        let mut ver = [0u8; 2];
        r.read_exact(&mut ver)
            .map_err(|e| Error::Format(format!("model version: {e}")))?;
        let version = u16::from_le_bytes(ver);
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {version}"
            )));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)
            .map_err(|e| Error::Format(format!("model config: {e}")))?;
        let mut cfg_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut cfg_bytes)
            .map_err(|e| Error::Format(format!("model config: {e}")))?;
        let cfg_text = String::from_utf8(cfg_bytes)
            .map_err(|e| Error::Format(format!("model config not UTF-8: {e}")))?;
        let config = ModelConfig::from_kv(&cfg_text)?;
        let mut model = build_model::<T>(&config)?;
        let mut result = Ok(());
        model.update_state(&mut |id, t| {
            if result.is_err() {
                return;
            }
            match Tensor::<T>::read_from(r) {
                Ok(loaded) => {
                    if loaded.shape() != t.shape() {
                        result = Err(Error::Format(format!(
                            "state tensor {id} has shape {:?}, expected {:?}",
                            loaded.shape(),
                            t.shape()
                        )));
                    } else {
                        *t = loaded;
                    }
                }
                Err(e) => result = Err(e),
            }
        });
        result?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
