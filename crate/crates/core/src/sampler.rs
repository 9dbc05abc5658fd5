//! Place-balanced batch sampling with rotate-then-crop augmentation.
//!
//! A batch holds P places x K views. Each view is an independently rotated
//! center crop of the place's circular image, optionally from a different
//! year variant, with a small fixed appearance-jitter set on top.


use crate::dataset::{rotate_then_crop, CircularImage, GeoLocation, Manifest};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Appearance jitter toggles. The set is fixed: brightness and contrast
/// within +-20%, additive Gaussian noise with sigma <= 0.02, per-channel
/// scaling within +-10%.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Uniform random rotation in `[0, 2*pi)` per view.
    pub rotate: bool,
    /// Apply the fixed appearance-jitter set.
    pub appearance: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate: true,
            appearance: true,
        }
    }
}

/// Batch layout: P places per batch, K views per place.
#[derive(Clone, Copy, Debug)]
pub struct BatchSpec {
    pub places_per_batch: usize,
    pub views_per_place: usize,
    pub input_size: usize,
    pub augment: AugmentConfig,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            places_per_batch: 8,
            views_per_place: 4,
            input_size: 64,
            augment: AugmentConfig::default(),
        }
    }
}

impl BatchSpec {
    pub fn batch_size(&self) -> usize {
        self.places_per_batch * self.views_per_place
    }

    pub fn validate(&self) -> Result<()> {
        if self.places_per_batch < 2 {
            return Err(Error::Config(
                "need at least 2 places per batch for the metric loss".into(),
            ));
        }
        if self.views_per_place < 2 {
            return Err(Error::Config(
                "need K >= 2 views so every anchor has a positive".into(),
            ));
        }
        if self.input_size == 0 {
            return Err(Error::Config("input_size must be positive".into()));
        }
        Ok(())
    }
}

/// In-memory circular images of an entire manifest split.
pub struct DatasetCache {
    places: Vec<CachedPlace>,
}

pub struct CachedPlace {
    pub place_id: u64,
    pub location: GeoLocation,
    pub years: Vec<i32>,
    pub images: Vec<CircularImage>,
}

impl DatasetCache {
    /// Load every variant image referenced by the manifest.
    pub fn load(manifest: &Manifest) -> Result<Self> {
        Self::load_subset(manifest, &manifest.places.iter().map(|p| p.place_id).collect::<Vec<_>>())
    }

    /// Load only the listed place ids.
    pub fn load_subset(manifest: &Manifest, place_ids: &[u64]) -> Result<Self> {
        let mut places = Vec::with_capacity(place_ids.len());
        for &id in place_ids {
            let rec = manifest
                .places
                .iter()
                .find(|p| p.place_id == id)
                .ok_or_else(|| Error::Data(format!("place {id} not in manifest")))?;
            let mut images = Vec::with_capacity(rec.variants.len());
            let mut years = Vec::with_capacity(rec.variants.len());
            for v in &rec.variants {
                images.push(CircularImage::load(&manifest.image_path(v))?);
                years.push(v.year);
            }
            places.push(CachedPlace {
                place_id: rec.place_id,
                location: rec.location(),
                years,
                images,
            });
        }
        Ok(DatasetCache { places })
    }

    pub fn len(&self) -> usize {
        self.places.len()
    }

    pub fn is_empty(&self) -> bool {
        self.places.is_empty()
    }

    pub fn places(&self) -> &[CachedPlace] {
        &self.places
    }

    pub fn place(&self, idx: usize) -> &CachedPlace {
        &self.places[idx]
    }

    pub fn place_ids(&self) -> Vec<u64> {
        self.places.iter().map(|p| p.place_id).collect()
    }
}

/// Check that a manifest's images can back batches of the given spec.
pub fn check_trainable(cache: &DatasetCache, spec: &BatchSpec) -> Result<()> {
    spec.validate()?;
    if cache.len() < spec.places_per_batch {
        return Err(Error::Data(format!(
            "need at least {} places, manifest split has {}",
            spec.places_per_batch,
            cache.len()
        )));
    }
    for p in cache.places() {
        let side_limit = p.images[0].inscribed_square_side();
        if spec.input_size > side_limit {
            return Err(Error::Config(format!(
                "input_size {} exceeds inscribed square {} of place {}",
                spec.input_size, side_limit, p.place_id
            )));
        }
    }
    Ok(())
}

/// One augmented view of a place: rotate, crop, jitter.
pub fn sample_view<T: Scalar>(
    image: &CircularImage,
    spec: &BatchSpec,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let angle = if spec.augment.rotate {
        rng.uniform(0.0, std::f64::consts::TAU)
    } else {
        0.0
    };
    let mut view = rotate_then_crop::<T>(image, angle, spec.input_size)?;
    if spec.augment.appearance {
        apply_jitter(&mut view, rng);
    }
    Ok(view)
}

/// The fixed appearance-jitter set, applied in place and clamped to [0,1].
fn apply_jitter<T: Scalar>(view: &mut Tensor<T>, rng: &mut Rng) {
    let brightness = rng.uniform(0.8, 1.2);
    let contrast = rng.uniform(0.8, 1.2);
    let channel_scale = [
        rng.uniform(0.9, 1.1),
        rng.uniform(0.9, 1.1),
        rng.uniform(0.9, 1.1),
    ];
    let noise_sigma = rng.uniform(0.0, 0.02);
    let n = view.len();
    let plane = n / 3;
    let mean: f64 = view.data().iter().map(|v| v.tof()).sum::<f64>() / n as f64;
    for ch in 0..3 {
        for i in 0..plane {
            let idx = ch * plane + i;
            let mut v = view.data()[idx].tof();
            v *= brightness;
            v = mean + (v - mean) * contrast;
            v *= channel_scale[ch];
            v += rng.normal() * noise_sigma;
            view.data_mut()[idx] = T::fromf(v.clamp(0.0, 1.0));
        }
    }
}

/// Sample a `P*K` batch from the given place indices (one index per
/// batch slot group). Views of one place draw a year variant uniformly and
/// rotate independently; when a place has fewer variants than K, variants
/// repeat with fresh rotations. Labels are place ids.
pub fn sample_batch_for_places<T: Scalar>(
    cache: &DatasetCache,
    place_indices: &[usize],
    spec: &BatchSpec,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Vec<u64>)> {
    spec.validate()?;
    let s = spec.input_size;
    let k = spec.views_per_place;
    let b = place_indices.len() * k;
    let mut images = Tensor::zeros(&[b, 3, s, s]);
    let mut labels = Vec::with_capacity(b);
    let view_len = 3 * s * s;
    for (pi, &place_idx) in place_indices.iter().enumerate() {
        let place = cache.place(place_idx);
        for v in 0..k {
            let variant = rng.index(place.images.len());
            let view = sample_view::<T>(&place.images[variant], spec, rng)?;
            let off = (pi * k + v) * view_len;
            images.data_mut()[off..off + view_len].copy_from_slice(view.data());
            labels.push(place.place_id);
        }
    }
    Ok((images, labels))
}

/// Sample a batch of P random distinct places and K views each.
pub fn sample_batch<T: Scalar>(
    cache: &DatasetCache,
    spec: &BatchSpec,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Vec<u64>)> {
    check_trainable(cache, spec)?;
    let mut indices: Vec<usize> = (0..cache.len()).collect();
    rng.shuffle(&mut indices);
    indices.truncate(spec.places_per_batch);
    sample_batch_for_places(cache, &indices, spec, rng)
}

/// A fixed evaluation-time transform: per-query rotation plus scale jitter.
#[derive(Clone, Copy, Debug)]
pub struct EvalTransform {
    pub angle: f64,
    pub scale: f64,
}

/// Fixed per-place evaluation transforms, seeded once. `scale_jitter` of
/// 0.1 draws scales in [0.9, 1.1]; 0 disables scaling.
pub fn eval_transforms(seed: u64, n: usize, rotate: bool, scale_jitter: f64) -> Vec<EvalTransform> {
    let mut rng = Rng::derive(seed, &[0x6576]); // "ev"
    (0..n)
        .map(|_| EvalTransform {
            angle: if rotate {
                rng.uniform(0.0, std::f64::consts::TAU)
            } else {
                0.0
            },
            scale: 1.0 + rng.uniform(-scale_jitter, scale_jitter),
        })
        .collect()
}

/// Render an evaluation view: rotate by the fixed angle, crop a scaled
/// window, resize to `out_size`.
pub fn eval_view<T: Scalar>(
    image: &CircularImage,
    transform: &EvalTransform,
    out_size: usize,
) -> Result<Tensor<T>> {
    // scale the crop by sampling a larger/smaller source window; realized
    // by cropping at out_size scaled, then the resize inside rotate_then_crop
    // normalizes back to out_size. Scale is clamped to the legal crop range.
    let side_limit = image.inscribed_square_side();
    let scaled = ((out_size as f64 * transform.scale).round() as usize)
        .clamp(out_size.min(side_limit), side_limit);
    let big = rotate_then_crop::<T>(image, transform.angle, scaled)?;
    if scaled == out_size {
        return Ok(big);
    }
    // bilinear resize back to out_size
    let mut out = Tensor::zeros(&[3, out_size, out_size]);
    let ratio = scaled as f64 / out_size as f64;
    for ch in 0..3 {
        for i in 0..out_size {
            for j in 0..out_size {
                let sy = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (scaled - 1) as f64);
                let sx = ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, (scaled - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(scaled - 1), (x0 + 1).min(scaled - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let at = |y: usize, x: usize| big.at(&[ch, y, x]).tof();
                let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x1) * (1.0 - fy) * fx
                    + at(y1, x0) * fy * (1.0 - fx)
                    + at(y1, x1) * fy * fx;
                out.data_mut()[(ch * out_size + i) * out_size + j] = T::fromf(v);
            }
        }
    }
    Ok(out)
}
