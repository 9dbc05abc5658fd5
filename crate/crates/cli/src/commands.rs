//! Subcommand implementations.

use std::path::Path;

use equiplace_core::backbone::Model;
use equiplace_core::dataset::{self, read_manifest, rotate_then_crop, CircularImage, Manifest};
use equiplace_core::retrieval::{
    bench_encode as core_bench, estimate_storage as core_estimate, recall_at_n, sweep_dims as core_sweep,
    DescriptorStore, GeoTable, PositiveCriterion,
};
use equiplace_core::sampler::{eval_transforms, eval_view, DatasetCache};
use equiplace_core::train::{
    encode_images, log_to_csv, store_from_descriptors, train as core_train, Optimizer,
};
use equiplace_core::{Error, Result, Rng, Tensor};

use crate::config::RunConfig;
use crate::output::{write_tracked, OutputGuard};

/// build-dataset: synthesize a world, sample places, write crops + manifest.
pub fn build_dataset(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let mut guard = OutputGuard::new();
    guard.prepare_dir(out, force)?;
    let params = cfg.dataset_params();
    guard.track(&out.join("images"));
    guard.track(&out.join("manifest.jsonl"));
    let (records, stats) = dataset::build_dataset(&params, out, cfg.jobs)?;
    write_tracked(&mut guard, &out.join("config.resolved.txt"), &cfg.to_kv())?;
    println!(
        "built {} places ({} candidates, {} water-rejected, {} out-of-bounds)",
        stats.built, stats.candidates, stats.water_rejected, stats.fit_rejected
    );
    println!("manifest: {}", out.join("manifest.jsonl").display());
    if records.len() < cfg.places_per_batch {
        println!(
            "warning: only {} places but batches need {}; this dataset is untrainable at the current interval",
            records.len(),
            cfg.places_per_batch
        );
    }
    guard.commit();
    Ok(())
}

/// Deterministic train/validation place split.
pub fn split_places(manifest: &Manifest, val_fraction: f64, seed: u64) -> (Vec<u64>, Vec<u64>) {
    let mut ids: Vec<u64> = manifest.places.iter().map(|p| p.place_id).collect();
    Rng::derive(seed, &[0x59711]).shuffle(&mut ids);
    let n_val = ((ids.len() as f64 * val_fraction).round() as usize)
        .max(1)
        .min(ids.len().saturating_sub(1));
    let val = ids.split_off(ids.len() - n_val);
    (ids, val)
}

/// train: fit a model on a manifest and write model + log + checkpoints.
pub fn train(
    cfg: &RunConfig,
    manifest_path: &Path,
    out: &Path,
    resume: Option<&Path>,
    force: bool,
) -> Result<()> {
    let mut guard = OutputGuard::new();
    guard.prepare_dir(out, force)?;
    let manifest = read_manifest(manifest_path)?;
    let (train_ids, val_ids) = split_places(&manifest, cfg.val_fraction, cfg.seed);
    let train_set = DatasetCache::load_subset(&manifest, &train_ids)?;
    let val_set = DatasetCache::load_subset(&manifest, &val_ids)?;
    let model_cfg = cfg.model_config()?;
    let (mut model, mut optimizer, start_epoch) = match resume {
        Some(ckpt) => {
            let model = Model::<f32>::load(ckpt)?;
            let (opt, epoch_next) =
                Optimizer::load(cfg.optimizer_kind()?, &model, &ckpt.with_extension("eps"))?;
            println!("resuming from {} at epoch {epoch_next}", ckpt.display());
            (model, opt, epoch_next)
        }
        None => (
            equiplace_core::backbone::build_model::<f32>(&model_cfg)?,
            Optimizer::new(cfg.optimizer_kind()?),
            0,
        ),
    };
    let report = core_train(
        &mut model,
        &mut optimizer,
        &train_set,
        &val_set,
        &cfg.train_config()?,
        &cfg.batch_spec(),
        &cfg.loss_config(),
        start_epoch,
        Some(out),
    )?;
    for ckpt in &report.checkpoints {
        guard.track(ckpt);
        guard.track(&ckpt.with_extension("eps"));
    }
    let model_path = out.join("model.epm");
    guard.track(&model_path);
    model.save(&model_path)?;
    write_tracked(&mut guard, &out.join("log.csv"), &log_to_csv(&report.log))?;
    write_tracked(&mut guard, &out.join("config.resolved.txt"), &cfg.to_kv())?;
    println!(
        "trained {} epochs on {} places ({} validation): val R@1 {:.2}% -> {:.2}%",
        cfg.epochs,
        train_set.len(),
        val_set.len(),
        report.initial_val_recall1,
        report.final_val_recall1
    );
    println!("model: {}", model_path.display());
    guard.commit();
    Ok(())
}

fn resolve_year(manifest: &Manifest, year_arg: &str) -> Result<Option<i32>> {
    match year_arg {
        "first" => Ok(None),
        "last" => Ok(Some(i32::MAX)),
        y => {
            let year: i32 = y
                .parse()
                .map_err(|_| Error::Config(format!("bad --year '{y}'")))?;
            let known = manifest
                .places
                .iter()
                .any(|p| p.variants.iter().any(|v| v.year == year));
            if !known {
                return Err(Error::Data(format!("no variants for year {year}")));
            }
            Ok(Some(year))
        }
    }
}

/// encode: descriptor store from a manifest (one row per place) or from a
/// directory of circular .ppm images.
#[allow(clippy::too_many_arguments)]
pub fn encode(
    cfg: &RunConfig,
    model_path: &Path,
    manifest_path: Option<&Path>,
    images_dir: Option<&Path>,
    out: &Path,
    dim: Option<usize>,
    year_arg: &str,
    transform_seed: Option<u64>,
    force: bool,
) -> Result<()> {
    if out.exists() && !force {
        return Err(Error::Data(format!(
            "output {} exists (use --force to overwrite)",
            out.display()
        )));
    }
    let mut guard = OutputGuard::new();
    let model = Model::<f32>::load(model_path)?;
    let s = model.config().input_size;
    let (ids, views, source) = if let Some(mpath) = manifest_path {
        let manifest = read_manifest(mpath)?;
        let year = resolve_year(&manifest, year_arg)?;
        let transforms = transform_seed.map(|ts| {
            eval_transforms(ts, manifest.places.len(), cfg.query_rotate, cfg.query_scale_jitter)
        });
        let mut ids = Vec::with_capacity(manifest.places.len());
        let mut views = Vec::with_capacity(manifest.places.len());
        for (pi, place) in manifest.places.iter().enumerate() {
            let variant = match year {
                None => &place.variants[0],
                Some(i32::MAX) => place.variants.last().unwrap(),
                Some(y) => place
                    .variants
                    .iter()
                    .find(|v| v.year == y)
                    .ok_or_else(|| {
                        Error::Data(format!("place {} has no year {y}", place.place_id))
                    })?,
            };
            let img = CircularImage::load(&manifest.image_path(variant))?;
            let view: Tensor<f32> = match &transforms {
                Some(ts) => eval_view(&img, &ts[pi], s)?,
                None => rotate_then_crop(&img, 0.0, s)?,
            };
            ids.push(place.place_id);
            views.push(view);
        }
        (ids, views, format!("manifest={}", mpath.display()))
    } else if let Some(dir) = images_dir {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .filter(|p| !p.to_string_lossy().ends_with(".mask.pgm"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Data(format!("no .ppm images in {}", dir.display())));
        }
        let mut ids = Vec::new();
        let mut views = Vec::new();
        for (i, p) in paths.iter().enumerate() {
            let img = CircularImage::load(p)?;
            views.push(rotate_then_crop::<f32>(&img, 0.0, s)?);
            ids.push(i as u64);
        }
        (ids, views, format!("images={}", dir.display()))
    } else {
        return Err(Error::Config(
            "encode needs --manifest or --images".into(),
        ));
    };
    let descriptors = encode_images(&model, &views, cfg.jobs)?;
    let metadata = format!(
        "model={};{}{}",
        model_path.display(),
        source,
        transform_seed
            .map(|t| format!(";transform_seed={t}"))
            .unwrap_or_default()
    );
    let mut store = store_from_descriptors(&descriptors, &ids, metadata)?;
    if let Some(d) = dim {
        if d != store.dim() {
            store = store.reduced(d)?;
        }
    }
    guard.track(out);
    store.save(out)?;
    println!(
        "encoded {} descriptors (dim {}) -> {}",
        store.len(),
        store.dim(),
        out.display()
    );
    guard.commit();
    Ok(())
}

fn geo_table_from(manifest_path: Option<&Path>) -> Result<Option<GeoTable>> {
    match manifest_path {
        None => Ok(None),
        Some(p) => {
            let manifest = read_manifest(p)?;
            let mut table = GeoTable::new();
            for place in &manifest.places {
                table.insert(place.place_id, (place.lon, place.lat));
            }
            Ok(Some(table))
        }
    }
}

/// eval: Recall@N report in CSV and JSON.
pub fn eval(
    cfg: &RunConfig,
    queries_path: &Path,
    db_path: &Path,
    manifest_path: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<()> {
    let mut guard = OutputGuard::new();
    guard.prepare_dir(out, force)?;
    let queries = DescriptorStore::load(queries_path)?;
    let db = DescriptorStore::load(db_path)?;
    let criterion = PositiveCriterion::parse(&cfg.criterion)?;
    let geo = geo_table_from(manifest_path)?;
    let report = recall_at_n(&queries, &db, &criterion, &cfg.eval_ns, geo.as_ref())?;
    write_tracked(&mut guard, &out.join("recall.csv"), &report.to_csv())?;
    write_tracked(&mut guard, &out.join("recall.json"), &report.to_json()?)?;
    write_tracked(&mut guard, &out.join("config.resolved.txt"), &cfg.to_kv())?;
    for (n, r) in report.ns.iter().zip(&report.recall_pct) {
        println!("R@{n} = {r:.2}%");
    }
    println!(
        "{} queries vs {} database rows ({} excluded; criterion {})",
        report.query_count, report.db_count, report.excluded_queries, report.criterion
    );
    guard.commit();
    Ok(())
}

/// sweep-dims: per-dim recall plus recall@1 deltas.
pub fn sweep_dims(
    cfg: &RunConfig,
    queries_path: &Path,
    db_path: &Path,
    dims_arg: &str,
    manifest_path: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<()> {
    let mut guard = OutputGuard::new();
    guard.prepare_dir(out, force)?;
    let dims: Vec<usize> = dims_arg
        .split(',')
        .map(|d| {
            d.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad dim '{d}'")))
        })
        .collect::<Result<_>>()?;
    let queries = DescriptorStore::load(queries_path)?;
    let db = DescriptorStore::load(db_path)?;
    let criterion = PositiveCriterion::parse(&cfg.criterion)?;
    let geo = geo_table_from(manifest_path)?;
    let report = core_sweep(&queries, &db, &dims, &criterion, geo.as_ref())?;
    write_tracked(&mut guard, &out.join("sweep.csv"), &report.to_csv())?;
    write_tracked(&mut guard, &out.join("sweep.json"), &report.to_json()?)?;
    write_tracked(&mut guard, &out.join("config.resolved.txt"), &cfg.to_kv())?;
    for row in &report.rows {
        println!(
            "dim {:>4}: R@1 {:.2}%  R@5 {:.2}%  R@10 {:.2}%  (d R@1 {:+.2})",
            row.dim, row.recall1, row.recall5, row.recall10, row.delta_recall1
        );
    }
    guard.commit();
    Ok(())
}

/// bench-encode: single-image encode latency statistics.
pub fn bench_encode(
    _cfg: &RunConfig,
    model_path: &Path,
    manifest_path: &Path,
    reps: usize,
    warmup: usize,
    out: Option<&Path>,
    force: bool,
) -> Result<()> {
    let model = Model::<f32>::load(model_path)?;
    let manifest = read_manifest(manifest_path)?;
    let s = model.config().input_size;
    let n_images = manifest.places.len().min(16);
    let mut images = Vec::with_capacity(n_images);
    for place in manifest.places.iter().take(n_images) {
        let img = CircularImage::load(&manifest.image_path(&place.variants[0]))?;
        images.push(rotate_then_crop::<f32>(&img, 0.0, s)?);
    }
    let report = core_bench(&model, &images, warmup, reps)?;
    println!(
        "encode: mean {:.3} ms, std {:.3} ms over {} reps (batch size 1) on {}",
        report.mean_ms, report.std_ms, report.reps, report.machine
    );
    if let Some(dir) = out {
        let mut guard = OutputGuard::new();
        guard.prepare_dir(dir, force)?;
        write_tracked(
            &mut guard,
            &dir.join("bench.json"),
            &serde_json::to_string_pretty(&report).map_err(Error::Json)?,
        )?;
        write_tracked(
            &mut guard,
            &dir.join("bench.csv"),
            &format!(
                "mean_ms,std_ms,reps,warmup,machine\n{:.6},{:.6},{},{},\"{}\"\n",
                report.mean_ms, report.std_ms, report.reps, report.warmup, report.machine
            ),
        )?;
        guard.commit();
    }
    Ok(())
}

/// estimate-storage: image count and descriptor bytes to cover an area.
pub fn estimate_storage(
    area_km2: f64,
    km2_per_image: f64,
    dim: usize,
    bytes_per_value: usize,
    out: Option<&Path>,
    force: bool,
) -> Result<()> {
    let (images, bytes) = core_estimate(area_km2, km2_per_image, dim, bytes_per_value)?;
    let gb = bytes as f64 / 1e9;
    println!("{images} images");
    println!("{bytes} bytes (~{gb:.2} GB)");
    if let Some(dir) = out {
        let mut guard = OutputGuard::new();
        guard.prepare_dir(dir, force)?;
        write_tracked(
            &mut guard,
            &dir.join("estimate.json"),
            &format!(
                "{{\n  \"area_km2\": {area_km2},\n  \"km2_per_image\": {km2_per_image},\n  \"dim\": {dim},\n  \"bytes_per_value\": {bytes_per_value},\n  \"num_images\": {images},\n  \"total_bytes\": {bytes},\n  \"total_gb\": {gb:.2}\n}}\n"
            ),
        )?;
        guard.commit();
    }
    Ok(())
}
