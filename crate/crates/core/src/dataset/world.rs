//! Seeded procedural orthophoto-style worlds.
//!
//! A world is a stack of pixel-aligned yearly RGB rasters over mixed land
//! cover (urban grids, field patchwork, forest texture, water bodies) plus
//! a binary water mask. Everything is a pure function of the seed and the
//! pixel coordinate, so identical specs reproduce identical bytes and
//! generation parallelizes freely over rows.

use crate::error::{Error, Result};
use crate::par;
use crate::rng::mix;

#[derive(Clone, Debug, PartialEq)]
pub struct TerrainParams {
    /// Octaves of the elevation fractal.
    pub octaves: usize,
    /// Base wavelength of the elevation fractal, in pixels.
    pub base_wavelength: f64,
    /// Fraction of land designated urban (by class-noise quantiles).
    pub urban_fraction: f64,
    /// Field patch cell size in pixels.
    pub field_cell_px: f64,
}

impl Default for TerrainParams {
    fn default() -> Self {
        TerrainParams {
            octaves: 4,
            base_wavelength: 192.0,
            urban_fraction: 0.2,
            field_cell_px: 44.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub seed: u64,
    pub size_px: usize,
    pub meters_per_pixel: f64,
    pub n_years: usize,
    pub water_fraction: f64,
    pub terrain: TerrainParams,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 0,
            size_px: 512,
            meters_per_pixel: 1.0,
            n_years: 10,
            water_fraction: 0.12,
            terrain: TerrainParams::default(),
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size_px < 16 {
            return Err(Error::Config(format!("world size {} too small", self.size_px)));
        }
        if self.n_years == 0 {
            return Err(Error::Config("worlds need at least one year".into()));
        }
        if !(0.0..1.0).contains(&self.water_fraction) {
            return Err(Error::Config(format!(
                "water_fraction {} must lie in [0,1)",
                self.water_fraction
            )));
        }
        if self.meters_per_pixel <= 0.0 {
            return Err(Error::Config("meters_per_pixel must be positive".into()));
        }
        Ok(())
    }

    /// Calendar year of variant index `i`.
    pub fn year_of(&self, i: usize) -> i32 {
        2011 + i as i32
    }
}

/// Generated rasters: `years[i]` is an interleaved RGB image of
/// `size_px * size_px` pixels; `water[p]` marks water pixels.
pub struct World {
    pub spec: WorldSpec,
    pub years: Vec<Vec<u8>>,
    pub water: Vec<bool>,
}

// -- coordinate-hash value noise ---------------------------------------------

#[inline]
fn lattice(seed: u64, xi: i64, yi: i64) -> f64 {
    let h = mix(seed ^ (xi as u64).wrapping_mul(0x9e3779b97f4a7c15)
        ^ (yi as u64).wrapping_mul(0xd1b54a32d192ed03));
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smooth value noise in [0, 1] at wavelength `wl` pixels.
fn value_noise(seed: u64, x: f64, y: f64, wl: f64) -> f64 {
    let (gx, gy) = (x / wl, y / wl);
    let (x0, y0) = (gx.floor(), gy.floor());
    let (fx, fy) = (smoothstep(gx - x0), smoothstep(gy - y0));
    let (xi, yi) = (x0 as i64, y0 as i64);
    let v00 = lattice(seed, xi, yi);
    let v10 = lattice(seed, xi + 1, yi);
    let v01 = lattice(seed, xi, yi + 1);
    let v11 = lattice(seed, xi + 1, yi + 1);
    let a = v00 + (v10 - v00) * fx;
    let b = v01 + (v11 - v01) * fx;
    a + (b - a) * fy
}

fn fbm(seed: u64, x: f64, y: f64, base_wl: f64, octaves: usize) -> f64 {
    let mut acc = 0.0;
    let mut amp = 1.0;
    let mut total = 0.0;
    let mut wl = base_wl;
    for o in 0..octaves {
        acc += amp * value_noise(mix(seed ^ o as u64), x, y, wl);
        total += amp;
        amp *= 0.5;
        wl *= 0.5;
    }
    acc / total
}

// -- land cover ---------------------------------------------------------------

#[derive(Clone, Copy, PartialEq)]
enum Cover {
    Water,
    Urban,
    Field,
    Forest,
}

struct Layers {
    seed: u64,
    water_threshold: f64,
    urban_threshold: f64,
    terrain: TerrainParams,
}

impl Layers {
    fn elevation(&self, x: f64, y: f64) -> f64 {
        fbm(
            mix(self.seed ^ 0xe1e7),
            x,
            y,
            self.terrain.base_wavelength,
            self.terrain.octaves,
        )
    }

    fn class_noise(&self, x: f64, y: f64) -> f64 {
        fbm(mix(self.seed ^ 0xc1a5), x, y, self.terrain.base_wavelength * 0.7, 3)
    }

    fn cover(&self, x: f64, y: f64) -> Cover {
        if self.elevation(x, y) < self.water_threshold {
            Cover::Water
        } else {
            let c = self.class_noise(x, y);
            if c > self.urban_threshold {
                Cover::Urban
            } else if c > 0.42 {
                Cover::Field
            } else {
                Cover::Forest
            }
        }
    }

    /// Base RGB in [0,1] for a pixel in a given year.
    fn shade(&self, x: f64, y: f64, year_idx: usize) -> [f64; 3] {
        let season = season_tint(self.seed, year_idx);
        let year_noise =
            value_noise(mix(self.seed ^ 0x9ea0 ^ year_idx as u64), x, y, 23.0) - 0.5;
        let detail = value_noise(mix(self.seed ^ 0xde7a), x, y, 3.0);
        let mut rgb = match self.cover(x, y) {
            Cover::Water => {
                let ripple = value_noise(mix(self.seed ^ 0x3a7e ^ year_idx as u64), x, y, 9.0);
                [0.10 + 0.05 * ripple, 0.16 + 0.06 * ripple, 0.30 + 0.08 * ripple]
            }
            Cover::Urban => {
                let t = self.terrain.field_cell_px * 0.5;
                let (cx, cy) = ((x / t).floor() as i64, (y / t).floor() as i64);
                let street_x = x - (x / t).floor() * t;
                let street_y = y - (y / t).floor() * t;
                if street_x < 2.5 || street_y < 2.5 {
                    [0.22, 0.22, 0.23] // street
                } else {
                    let h = lattice(mix(self.seed ^ 0x0b1d), cx, cy);
                    let roof = 0.35 + 0.4 * h;
                    [roof, roof * 0.92, roof * 0.85]
                }
            }
            Cover::Field => {
                let cell = self.terrain.field_cell_px;
                let (cx, cy) = ((x / cell).floor() as i64, (y / cell).floor() as i64);
                let hue = lattice(mix(self.seed ^ 0xf1e1d), cx, cy);
                // per-cell cultivation direction gives oriented row stripes
                let phi = lattice(mix(self.seed ^ 0xd17), cx, cy) * std::f64::consts::PI;
                let stripe =
                    0.5 + 0.5 * ((x * phi.cos() + y * phi.sin()) * 0.9).sin();
                let base = [
                    0.30 + 0.35 * hue,
                    0.42 + 0.20 * (1.0 - hue),
                    0.16 + 0.10 * hue,
                ];
                [
                    base[0] * (0.85 + 0.15 * stripe),
                    base[1] * (0.85 + 0.15 * stripe),
                    base[2] * (0.85 + 0.15 * stripe),
                ]
            }
            Cover::Forest => {
                let canopy = value_noise(mix(self.seed ^ 0xf0e5), x, y, 5.0);
                [0.06 + 0.08 * canopy, 0.22 + 0.16 * canopy, 0.08 + 0.07 * canopy]
            }
        };
        for (c, v) in rgb.iter_mut().enumerate() {
            *v = (*v * (0.9 + 0.2 * detail) + 0.08 * year_noise) * season[c];
        }
        rgb
    }
}

/// Seasonal color multipliers for a given year variant.
fn season_tint(seed: u64, year_idx: usize) -> [f64; 3] {
    let h = mix(seed ^ 0x5ea ^ year_idx as u64);
    let season = h % 4;
    let jitter = ((h >> 8) % 1000) as f64 / 1000.0 * 0.08 - 0.04;
    let base = match season {
        0 => [1.00, 1.04, 0.95], // spring
        1 => [1.05, 1.00, 0.90], // summer
        2 => [1.08, 0.96, 0.85], // autumn
        _ => [0.95, 0.97, 1.06], // late season, cold light
    };
    [base[0] + jitter, base[1] + jitter, base[2] + jitter]
}

/// Generate the yearly rasters and water mask for a world spec.
pub fn generate_world(spec: &WorldSpec, jobs: usize) -> Result<World> {
    spec.validate()?;
    let size = spec.size_px;
    let layers = {
        // water threshold = requested quantile of the elevation field,
        // estimated on a subsampled grid
        let probe = Layers {
            seed: spec.seed,
            water_threshold: f64::NEG_INFINITY,
            urban_threshold: 0.0,
            terrain: spec.terrain.clone(),
        };
        let step = (size / 128).max(1);
        let mut elev: Vec<f64> = Vec::new();
        let mut class: Vec<f64> = Vec::new();
        let mut y = 0;
        while y < size {
            let mut x = 0;
            while x < size {
                elev.push(probe.elevation(x as f64, y as f64));
                class.push(probe.class_noise(x as f64, y as f64));
                x += step;
            }
            y += step;
        }
        elev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        class.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let water_threshold = if spec.water_fraction == 0.0 {
            f64::NEG_INFINITY
        } else {
            elev[((elev.len() - 1) as f64 * spec.water_fraction) as usize]
        };
        let urban_threshold =
            class[((class.len() - 1) as f64 * (1.0 - spec.terrain.urban_fraction)) as usize];
        Layers {
            seed: spec.seed,
            water_threshold,
            urban_threshold,
            terrain: spec.terrain.clone(),
        }
    };

    let mut water = vec![false; size * size];
    par::for_each_chunk(jobs, &mut water, size, |y, row| {
        for (x, w) in row.iter_mut().enumerate() {
            *w = layers.cover(x as f64, y as f64) == Cover::Water;
        }
    });

    let mut years = Vec::with_capacity(spec.n_years);
    for yi in 0..spec.n_years {
        let mut raster = vec![0u8; 3 * size * size];
        par::for_each_chunk(jobs, &mut raster, 3 * size, |y, row| {
            for x in 0..size {
                let rgb = layers.shade(x as f64, y as f64, yi);
                for c in 0..3 {
                    row[3 * x + c] = (rgb[c].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        });
        years.push(raster);
    }
    Ok(World {
        spec: spec.clone(),
        years,
        water,
    })
}
