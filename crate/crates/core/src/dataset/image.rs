//! Circular image crops, their PPM/PGM persistence, and the
//! rotate-then-crop view sampler.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A disk-shaped 8-bit RGB crop of fixed pixel diameter. Pixels outside
/// the inscribed disk are zero and the validity mask is the disk itself,
/// so the image can be rotated freely without gaining or losing content.
#[derive(Clone, Debug, PartialEq)]
pub struct CircularImage {
    diameter: usize,
    /// Interleaved RGB rows, `3 * diameter^2` bytes.
    rgb: Vec<u8>,
}

#[inline]
fn disk_contains(diameter: usize, y: f64, x: f64) -> bool {
    let c = (diameter as f64 - 1.0) / 2.0;
    let r = diameter as f64 / 2.0;
    let (dy, dx) = (y - c, x - c);
    dy * dy + dx * dx <= r * r
}

impl CircularImage {
    /// Build from interleaved RGB data, zeroing everything outside the disk.
    pub fn from_rgb(diameter: usize, mut rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != 3 * diameter * diameter {
            return Err(Error::Shape(format!(
                "expected {} rgb bytes for diameter {diameter}, got {}",
                3 * diameter * diameter,
                rgb.len()
            )));
        }
        for y in 0..diameter {
            for x in 0..diameter {
                if !disk_contains(diameter, y as f64, x as f64) {
                    let off = 3 * (y * diameter + x);
                    rgb[off] = 0;
                    rgb[off + 1] = 0;
                    rgb[off + 2] = 0;
                }
            }
        }
        Ok(CircularImage { diameter, rgb })
    }

    pub fn diameter(&self) -> usize {
        self.diameter
    }

    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    /// The validity mask: 255 inside the inscribed disk, 0 outside.
    pub fn mask(&self) -> Vec<u8> {
        let d = self.diameter;
        let mut m = vec![0u8; d * d];
        for y in 0..d {
            for x in 0..d {
                if disk_contains(d, y as f64, x as f64) {
                    m[y * d + x] = 255;
                }
            }
        }
        m
    }

    /// Number of valid (in-disk) pixels.
    pub fn mask_area(&self) -> usize {
        let d = self.diameter;
        (0..d * d)
            .filter(|i| disk_contains(d, (i / d) as f64, (i % d) as f64))
            .count()
    }

    /// The largest square crop side that stays inside the disk. Constrained
    /// to the diameter's parity so the crop grid aligns with pixel centers
    /// (quarter-turn crops then reduce to exact index permutations).
    pub fn inscribed_square_side(&self) -> usize {
        let mut s = (self.diameter as f64 / std::f64::consts::SQRT_2).floor() as usize;
        if s % 2 != self.diameter % 2 {
            s -= 1;
        }
        s
    }

    /// Rotate the whole disk counterclockwise. Quarter turns are an exact
    /// pixel permutation; other angles resample bilinearly and re-quantize.
    pub fn rotated(&self, angle: f64) -> CircularImage {
        let d = self.diameter;
        let mut out = vec![0u8; 3 * d * d];
        if let Some(q) = quarter_turns(angle) {
            for y in 0..d {
                for x in 0..d {
                    let (sy, sx) = quarter_source(d, y, x, q);
                    let src = 3 * (sy * d + sx);
                    let dst = 3 * (y * d + x);
                    out[dst..dst + 3].copy_from_slice(&self.rgb[src..src + 3]);
                }
            }
        } else {
            let (sin_t, cos_t) = angle.sin_cos();
            let c = (d as f64 - 1.0) / 2.0;
            for y in 0..d {
                for x in 0..d {
                    if !disk_contains(d, y as f64, x as f64) {
                        continue;
                    }
                    let (sy, sx) = rotate_source(c, y as f64, x as f64, sin_t, cos_t);
                    for ch in 0..3 {
                        let v = sample_channel(&self.rgb, d, sy, sx, ch);
                        out[3 * (y * d + x) + ch] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
        }
        CircularImage {
            diameter: d,
            rgb: out,
        }
    }

    pub fn save(&self, image_path: &Path) -> Result<()> {
        write_ppm(image_path, self.diameter, self.diameter, &self.rgb)?;
        write_pgm(&mask_path_for(image_path), self.diameter, self.diameter, &self.mask())
    }

    pub fn load(image_path: &Path) -> Result<Self> {
        let (w, h, rgb) = read_ppm(image_path)?;
        if w != h {
            return Err(Error::Format(format!(
                "circular image must be square, got {w}x{h}"
            )));
        }
        let img = CircularImage::from_rgb(w, rgb)?;
        let mask_path = mask_path_for(image_path);
        if mask_path.exists() {
            let (mw, mh, mask) = read_pgm(&mask_path)?;
            if mw != w || mh != h {
                return Err(Error::Format(format!(
                    "mask {mw}x{mh} does not match image {w}x{h}"
                )));
            }
            let expect = img.mask();
            if mask != expect {
                return Err(Error::Format(
                    "mask file does not match the inscribed disk".into(),
                ));
            }
        }
        Ok(img)
    }
}

/// Sidecar mask path: `foo.ppm -> foo.mask.pgm`.
pub fn mask_path_for(image_path: &Path) -> std::path::PathBuf {
    image_path.with_extension("mask.pgm")
}

fn quarter_turns(angle: f64) -> Option<usize> {
    let quarter = angle / std::f64::consts::FRAC_PI_2;
    let rounded = quarter.round();
    if (quarter - rounded).abs() < 1e-9 {
        Some(rounded.rem_euclid(4.0) as usize % 4)
    } else {
        None
    }
}

/// Source pixel of target `(y, x)` under `q` exact ccw quarter turns.
fn quarter_source(d: usize, y: usize, x: usize, q: usize) -> (usize, usize) {
    match q {
        0 => (y, x),
        1 => (x, d - 1 - y),
        2 => (d - 1 - y, d - 1 - x),
        _ => (d - 1 - x, y),
    }
}

/// Inverse-rotated continuous source position (row, col) of a target cell.
#[inline]
fn rotate_source(center: f64, y: f64, x: f64, sin_t: f64, cos_t: f64) -> (f64, f64) {
    let (u, v) = (x - center, center - y);
    let su = u * cos_t + v * sin_t;
    let sv = -u * sin_t + v * cos_t;
    (center - sv, center + su)
}

/// Mask-aware bilinear sample of one channel, in `[0, 1]`. Taps outside
/// the disk are dropped and the remaining weights renormalized.
fn sample_channel(rgb: &[u8], d: usize, sy: f64, sx: f64, ch: usize) -> f64 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = sy - y0;
    let fx = sx - x0;
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for (yy, xx, w) in [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1.0, (1.0 - fy) * fx),
        (y0 + 1.0, x0, fy * (1.0 - fx)),
        (y0 + 1.0, x0 + 1.0, fy * fx),
    ] {
        if w == 0.0 || yy < 0.0 || xx < 0.0 || yy >= d as f64 || xx >= d as f64 {
            continue;
        }
        if !disk_contains(d, yy, xx) {
            continue;
        }
        acc += w * rgb[3 * (yy as usize * d + xx as usize) + ch] as f64 / 255.0;
        wsum += w;
    }
    if wsum > 0.0 {
        acc / wsum
    } else {
        0.0
    }
}

/// Rotate the circular image by `angle` (ccw), center-crop the inscribed
/// square, and resize to `out_size`, in one resampling pass. The crop never
/// samples outside the disk, so rotation introduces no empty regions.
pub fn rotate_then_crop<T: Scalar>(
    img: &CircularImage,
    angle: f64,
    out_size: usize,
) -> Result<Tensor<T>> {
    let d = img.diameter;
    let crop_side = img.inscribed_square_side();
    if out_size == 0 || out_size > crop_side {
        return Err(Error::Config(format!(
            "out_size {out_size} exceeds inscribed square side {crop_side} (diameter {d})"
        )));
    }
    let (sin_t, cos_t) = match quarter_turns(angle) {
        // exact trig for the quarter-turn path
        Some(q) => match q {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        },
        None => angle.sin_cos(),
    };
    let center = (d as f64 - 1.0) / 2.0;
    let scale = crop_side as f64 / out_size as f64;
    let crop_off = (d - crop_side) as f64 / 2.0;
    let mut out = Tensor::zeros(&[3, out_size, out_size]);
    for i in 0..out_size {
        for j in 0..out_size {
            // position in the (unrotated) crop frame, then in disk coords
            let v = (i as f64 + 0.5) * scale - 0.5 + crop_off;
            let u = (j as f64 + 0.5) * scale - 0.5 + crop_off;
            let (sy, sx) = rotate_source(center, v, u, sin_t, cos_t);
            for ch in 0..3 {
                let val = sample_channel(&img.rgb, d, sy, sx, ch);
                out.data_mut()[(ch * out_size + i) * out_size + j] = T::fromf(val);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// PPM / PGM
// ---------------------------------------------------------------------------

fn write_header(w: &mut impl Write, magic: &str, width: usize, height: usize) -> Result<()> {
    write!(w, "{magic}\n{width} {height}\n255\n")?;
    Ok(())
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Shape(format!(
            "ppm wants {} bytes, got {}",
            3 * width * height,
            rgb.len()
        )));
    }
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut f, "P6", width, height)?;
    f.write_all(rgb)?;
    Ok(())
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::Shape(format!(
            "pgm wants {} bytes, got {}",
            width * height,
            gray.len()
        )));
    }
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut f, "P5", width, height)?;
    f.write_all(gray)?;
    Ok(())
}

fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut tokens: Vec<String> = Vec::new();
    // header: magic, width, height, maxval; '#' comments allowed
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        let n = r.read_line(&mut line)?;
        if n == 0 {
            return Err(Error::Format(format!("{}: truncated header", path.display())));
        }
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(str::to_string));
    }
    if tokens[0] != magic {
        return Err(Error::Format(format!(
            "{}: magic {} expected {magic}",
            path.display(),
            tokens[0]
        )));
    }
    let width: usize = tokens[1]
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad width", path.display())))?;
    let height: usize = tokens[2]
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad height", path.display())))?;
    if tokens[3] != "255" {
        return Err(Error::Format(format!(
            "{}: only maxval 255 supported, got {}",
            path.display(),
            tokens[3]
        )));
    }
    let mut data = vec![0u8; channels * width * height];
    r.read_exact(&mut data)
        .map_err(|e| Error::Format(format!("{}: pixel data truncated: {e}", path.display())))?;
    Ok((width, height, data))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(path, "P6", 3)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(path, "P5", 1)
}

/// Cut a disk-masked circular crop out of a square RGB raster.
/// The disk must fit entirely inside the raster (no padding).
pub fn extract_circular(
    raster_rgb: &[u8],
    raster_size: usize,
    center_x_px: usize,
    center_y_px: usize,
    diameter_px: usize,
) -> Result<CircularImage> {
    let r = diameter_px / 2 + diameter_px % 2;
    if center_x_px < r
        || center_y_px < r
        || center_x_px + r > raster_size
        || center_y_px + r > raster_size
    {
        return Err(Error::Data(format!(
            "disk of diameter {diameter_px} at ({center_x_px},{center_y_px}) exceeds raster {raster_size}"
        )));
    }
    let x0 = center_x_px - diameter_px / 2;
    let y0 = center_y_px - diameter_px / 2;
    let mut rgb = vec![0u8; 3 * diameter_px * diameter_px];
    for y in 0..diameter_px {
        let src = 3 * ((y0 + y) * raster_size + x0);
        let dst = 3 * (y * diameter_px);
        rgb[dst..dst + 3 * diameter_px].copy_from_slice(&raster_rgb[src..src + 3 * diameter_px]);
    }
    CircularImage::from_rgb(diameter_px, rgb)
}
