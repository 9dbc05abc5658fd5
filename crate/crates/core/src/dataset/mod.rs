//! Synthetic aerial place datasets.
//!
//! Reproduces, on procedurally generated worlds, the construction recipe of
//! a grid-sampled aerial place dataset: polygon-bounded lattice sampling,
//! water filtering, per-year pixel-aligned circular crops, and a JSON-lines
//! manifest of mutually non-overlapping places.

pub mod geometry;
pub mod image;
pub mod world;

pub use geometry::{sample_grid, GeoLocation, Polygon, WaterFilter};
pub use image::{extract_circular, rotate_then_crop, CircularImage};
pub use world::{generate_world, TerrainParams, World, WorldSpec};

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One image variant of a place.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub year: i32,
    pub path: String,
}

/// One sampled location with its yearly circular images. Distinct places'
/// circular footprints never overlap, and all variants of a place are
/// pixel-aligned crops of the same world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaceRecord {
    pub place_id: u64,
    pub lat: f64,
    pub lon: f64,
    pub diameter_px: u32,
    pub ground_diameter_m: f64,
    pub variants: Vec<VariantRecord>,
}

impl PlaceRecord {
    pub fn location(&self) -> GeoLocation {
        GeoLocation {
            lat: self.lat,
            lon: self.lon,
        }
    }
}

/// A loaded manifest: records ordered by place id, rooted at the manifest's
/// directory for relative image paths.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub places: Vec<PlaceRecord>,
    pub root: PathBuf,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.places.len()
    }

    pub fn is_empty(&self) -> bool {
        self.places.is_empty()
    }

    pub fn image_path(&self, variant: &VariantRecord) -> PathBuf {
        self.root.join(&variant.path)
    }

    /// Validate structural invariants: unique ids, disjoint circular
    /// footprints, existing image files. Errors list every offender.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        let mut seen = BTreeSet::new();
        for p in &self.places {
            if !seen.insert(p.place_id) {
                problems.push(format!("duplicate place_id {}", p.place_id));
            }
            if p.variants.is_empty() {
                problems.push(format!("place {} has no variants", p.place_id));
            }
            for v in &p.variants {
                let path = self.image_path(v);
                if !path.exists() {
                    problems.push(format!(
                        "place {} year {}: missing image {}",
                        p.place_id,
                        v.year,
                        path.display()
                    ));
                }
            }
        }
        for i in 0..self.places.len() {
            for j in (i + 1)..self.places.len() {
                let (a, b) = (&self.places[i], &self.places[j]);
                let min_dist = (a.ground_diameter_m + b.ground_diameter_m) / 2.0;
                let dist = a.location().distance_m(&b.location());
                if dist < min_dist {
                    problems.push(format!(
                        "places {} and {} overlap: {dist:.1} m apart, need >= {min_dist:.1}",
                        a.place_id, b.place_id
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "manifest validation failed:\n  {}",
                problems.join("\n  ")
            )))
        }
    }
}

/// Write records as JSON lines, ordered by place id.
pub fn write_manifest(path: &Path, places: &[PlaceRecord]) -> Result<()> {
    let mut sorted: Vec<&PlaceRecord> = places.iter().collect();
    sorted.sort_by_key(|p| p.place_id);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in sorted {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a JSON-lines manifest and validate it.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut places = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PlaceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        places.push(rec);
    }
    places.sort_by_key(|p| p.place_id);
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = Manifest { places, root };
    manifest.validate()?;
    Ok(manifest)
}

/// Parameters of a full dataset build.
#[derive(Clone, Debug)]
pub struct DatasetParams {
    pub world: WorldSpec,
    /// Lattice interval in meters; must be at least the ground diameter so
    /// footprints stay disjoint.
    pub interval_m: f64,
    pub diameter_px: u32,
    pub min_water_free_fraction: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            world: WorldSpec::default(),
            interval_m: 110.0,
            diameter_px: 92,
            min_water_free_fraction: 0.5,
        }
    }
}

impl DatasetParams {
    pub fn ground_diameter_m(&self) -> f64 {
        self.diameter_px as f64 * self.world.meters_per_pixel
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.interval_m < self.ground_diameter_m() {
            return Err(Error::Config(format!(
                "interval {} m smaller than ground diameter {} m; footprints would overlap",
                self.interval_m,
                self.ground_diameter_m()
            )));
        }
        let world_m = self.world.size_px as f64 * self.world.meters_per_pixel;
        if self.ground_diameter_m() >= world_m {
            return Err(Error::Config(format!(
                "footprint {} m does not fit into the {} m world",
                self.ground_diameter_m(),
                world_m
            )));
        }
        Ok(())
    }
}

/// Rejection statistics of a dataset build.
#[derive(Clone, Copy, Debug, Default)]
pub struct BuildStats {
    pub candidates: usize,
    pub water_rejected: usize,
    pub fit_rejected: usize,
    pub built: usize,
}

/// Generate a world, sample places, write circular crops and the manifest
/// under `out_dir`. Returns the records and rejection statistics.
pub fn build_dataset(
    params: &DatasetParams,
    out_dir: &Path,
    jobs: usize,
) -> Result<(Vec<PlaceRecord>, BuildStats)> {
    params.validate()?;
    let world = generate_world(&params.world, jobs)?;
    let mpp = params.world.meters_per_pixel;
    let world_m = params.world.size_px as f64 * mpp;
    let margin = params.ground_diameter_m() / 2.0 + mpp;
    let polygon = Polygon::rectangle(margin, margin, world_m - margin, world_m - margin)?;
    let filter = WaterFilter {
        mask: &world.water,
        size_px: params.world.size_px,
        meters_per_pixel: mpp,
        footprint_diameter_m: params.ground_diameter_m(),
        min_water_free_fraction: params.min_water_free_fraction,
    };
    let candidates = sample_grid(&polygon, params.interval_m, None)?;
    let mut stats = BuildStats {
        candidates: candidates.len(),
        ..Default::default()
    };
    std::fs::create_dir_all(out_dir.join("images"))?;
    let mut records = Vec::new();
    let mut next_id = 0u64;
    for loc in candidates {
        if filter.rejects(&loc) {
            stats.water_rejected += 1;
            continue;
        }
        let cx = (loc.lon / mpp).round() as usize;
        let cy = (loc.lat / mpp).round() as usize;
        let d = params.diameter_px as usize;
        let half = d / 2 + d % 2;
        if cx < half
            || cy < half
            || cx + half > params.world.size_px
            || cy + half > params.world.size_px
        {
            stats.fit_rejected += 1;
            continue;
        }
        let place_id = next_id;
        next_id += 1;
        let mut variants = Vec::with_capacity(params.world.n_years);
        for (yi, raster) in world.years.iter().enumerate() {
            let img = extract_circular(raster, params.world.size_px, cx, cy, d)?;
            let rel = format!("images/place_{place_id:05}_y{}.ppm", params.world.year_of(yi));
            img.save(&out_dir.join(&rel))?;
            variants.push(VariantRecord {
                year: params.world.year_of(yi),
                path: rel,
            });
        }
        records.push(PlaceRecord {
            place_id,
            lat: loc.lat,
            lon: loc.lon,
            diameter_px: params.diameter_px,
            ground_diameter_m: params.ground_diameter_m(),
            variants,
        });
        stats.built += 1;
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    Ok((records, stats))
}
