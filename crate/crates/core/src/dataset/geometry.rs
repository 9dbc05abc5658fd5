//! Boundary polygons and lattice sampling of candidate locations.

use crate::error::{Error, Result};

/// A location in the flat local frame of a synthetic world. Fields are
/// named for manifest compatibility; units are meters (`lon` = x east,
/// `lat` = y north).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoLocation {
    pub lat: f64,
    pub lon: f64,
}

impl GeoLocation {
    pub fn distance_m(&self, other: &GeoLocation) -> f64 {
        let dx = self.lon - other.lon;
        let dy = self.lat - other.lat;
        (dx * dx + dy * dy).sqrt()
    }
}

/// A simple (non-self-intersecting) boundary polygon.
#[derive(Clone, Debug)]
pub struct Polygon {
    vertices: Vec<(f64, f64)>,
}

impl Polygon {
    pub fn new(vertices: Vec<(f64, f64)>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::Data(format!(
                "polygon needs >= 3 vertices, got {}",
                vertices.len()
            )));
        }
        let poly = Polygon { vertices };
        if poly.area() < 1e-12 {
            return Err(Error::Data("degenerate polygon with zero area".into()));
        }
        Ok(poly)
    }

    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Polygon::new(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.vertices
    }

    /// Shoelace area (absolute).
    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (x1, y1) = self.vertices[i];
            let (x2, y2) = self.vertices[(i + 1) % n];
            acc += x1 * y2 - x2 * y1;
        }
        acc.abs() * 0.5
    }

    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let mut min_x = f64::INFINITY;
        let mut min_y = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for &(x, y) in &self.vertices {
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
        (min_x, min_y, max_x, max_y)
    }

    fn on_boundary(&self, x: f64, y: f64) -> bool {
        let eps = 1e-9;
        let n = self.vertices.len();
        for i in 0..n {
            let (x1, y1) = self.vertices[i];
            let (x2, y2) = self.vertices[(i + 1) % n];
            let (dx, dy) = (x2 - x1, y2 - y1);
            let len2 = dx * dx + dy * dy;
            if len2 == 0.0 {
                continue;
            }
            let t = ((x - x1) * dx + (y - y1) * dy) / len2;
            if !(0.0..=1.0).contains(&t) {
                continue;
            }
            let (px, py) = (x1 + t * dx, y1 + t * dy);
            if (px - x).abs() < eps && (py - y).abs() < eps {
                return true;
            }
        }
        false
    }

    /// Even-odd point-in-polygon test; boundary points are excluded.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        if self.on_boundary(x, y) {
            return false;
        }
        let n = self.vertices.len();
        let mut inside = false;
        for i in 0..n {
            let (x1, y1) = self.vertices[i];
            let (x2, y2) = self.vertices[(i + 1) % n];
            if (y1 > y) != (y2 > y) {
                let x_int = x1 + (y - y1) * (x2 - x1) / (y2 - y1);
                if x < x_int {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

/// Water-coverage filter for candidate footprints.
pub struct WaterFilter<'a> {
    pub mask: &'a [bool],
    pub size_px: usize,
    pub meters_per_pixel: f64,
    pub footprint_diameter_m: f64,
    pub min_water_free_fraction: f64,
}

impl WaterFilter<'_> {
    /// Fraction of the circular footprint covered by water. Pixels outside
    /// the raster count as water (unknown terrain).
    pub fn water_fraction(&self, loc: &GeoLocation) -> f64 {
        let r_px = self.footprint_diameter_m / 2.0 / self.meters_per_pixel;
        let cx = loc.lon / self.meters_per_pixel;
        let cy = loc.lat / self.meters_per_pixel;
        let mut total = 0usize;
        let mut water = 0usize;
        let y0 = (cy - r_px).floor() as i64;
        let y1 = (cy + r_px).ceil() as i64;
        let x0 = (cx - r_px).floor() as i64;
        let x1 = (cx + r_px).ceil() as i64;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy > r_px * r_px {
                    continue;
                }
                total += 1;
                if x < 0 || y < 0 || x >= self.size_px as i64 || y >= self.size_px as i64 {
                    water += 1;
                } else if self.mask[y as usize * self.size_px + x as usize] {
                    water += 1;
                }
            }
        }
        if total == 0 {
            1.0
        } else {
            water as f64 / total as f64
        }
    }

    pub fn rejects(&self, loc: &GeoLocation) -> bool {
        self.water_fraction(loc) > 1.0 - self.min_water_free_fraction
    }
}

/// Axis-aligned lattice points strictly inside the polygon, anchored at
/// the bounding-box minimum corner, minus locations whose footprint fails
/// the water filter. Output is ordered by (lat, lon).
pub fn sample_grid(
    polygon: &Polygon,
    interval: f64,
    water: Option<&WaterFilter<'_>>,
) -> Result<Vec<GeoLocation>> {
    if interval <= 0.0 {
        return Err(Error::Config(format!("interval {interval} must be > 0")));
    }
    let (min_x, min_y, max_x, max_y) = polygon.bbox();
    let mut out = Vec::new();
    let ny = ((max_y - min_y) / interval).floor() as usize + 1;
    let nx = ((max_x - min_x) / interval).floor() as usize + 1;
    for j in 0..=ny {
        let y = min_y + j as f64 * interval;
        if y > max_y {
            break;
        }
        for i in 0..=nx {
            let x = min_x + i as f64 * interval;
            if x > max_x {
                break;
            }
            if !polygon.contains(x, y) {
                continue;
            }
            let loc = GeoLocation { lat: y, lon: x };
            if let Some(w) = water {
                if w.rejects(&loc) {
                    continue;
                }
            }
            out.push(loc);
        }
    }
    Ok(out)
}
