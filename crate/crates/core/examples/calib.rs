//! Scratch calibration runs (not part of the test suite).

use equiplace_core::backbone::{build_model, Model, ModelConfig, SpatialPool};
use equiplace_core::dataset::{build_dataset, read_manifest, DatasetParams, TerrainParams, WorldSpec};
use equiplace_core::equivariant::{apply_circular_mask, rotate_field, OrientationPool};
use equiplace_core::loss::MsLossConfig;
use equiplace_core::retrieval::{recall_at_n, PositiveCriterion};
use equiplace_core::sampler::{eval_transforms, eval_view, AugmentConfig, BatchSpec, DatasetCache};
use equiplace_core::train::{
    encode_images, store_from_descriptors, train, Optimizer, OptimizerKind, TrainConfig,
};
use equiplace_core::{GroupSpec, Rng, Tensor};

fn smooth_image_g(side: usize, seed: u64, g: usize) -> Tensor<f64> {
    // low-frequency random image: g x g grid bilinearly upsampled
    let mut rng = Rng::new(seed);
    let grid: Vec<f64> = (0..3 * g * g).map(|_| rng.next_f64()).collect();
    let mut img = Tensor::<f64>::zeros(&[3, side, side]);
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                let gy = y as f64 / side as f64 * (g - 1) as f64;
                let gx = x as f64 / side as f64 * (g - 1) as f64;
                let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(g - 1), (x0 + 1).min(g - 1));
                let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
                let at = |yy: usize, xx: usize| grid[(c * g + yy) * g + xx];
                let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x1) * (1.0 - fy) * fx
                    + at(y1, x0) * fy * (1.0 - fx)
                    + at(y1, x1) * fy * fx;
                img.data_mut()[(c * side + y) * side + x] = v;
            }
        }
    }
    apply_circular_mask(&mut img).unwrap();
    img
}

fn smooth_image(side: usize, seed: u64) -> Tensor<f64> {
    smooth_image_g(side, seed, 8)
}

fn cosine(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn cfg(group: usize, widths: Vec<usize>, blocks: usize, s: usize, d: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        group_order: group,
        stage_widths: widths,
        blocks_per_stage: blocks,
        kernel_size: 3,
        input_size: s,
        descriptor_dim: d,
        pooling: SpatialPool::Gem,
        orientation_pool: OrientationPool::Max,
        seed,
    }
}

fn warmup_norm_stats(model: &mut Model<f64>, s: usize, seed: u64) {
    // populate batch-norm running statistics with train-mode forwards
    let mut batch = Tensor::<f64>::zeros(&[8, 3, s, s]);
    let view = 3 * s * s;
    for rep in 0..10 {
        for b in 0..8 {
            let img = smooth_image_g(s, seed ^ (rep * 100 + b as u64), 10);
            batch.data_mut()[b * view..(b + 1) * view].copy_from_slice(img.data());
        }
        model.forward_train(&batch, 2).unwrap();
    }
}

fn part_a_c8_vs_baseline() {
    println!("== part A: untrained C8 vs baseline cosine under 45 deg ==");
    for (widths, blocks, s, g, warm) in [
        (vec![6usize, 10], 1usize, 32usize, 8usize, false),
        (vec![6, 10], 1, 32, 8, true),
        (vec![4, 8, 16, 16], 1, 32, 8, true),
        (vec![4, 8, 16, 16], 1, 32, 12, true),
        (vec![8, 16], 1, 32, 8, true),
    ] {
        let mut mean_c8 = 0.0;
        let mut mean_c1 = 0.0;
        let n = 50;
        let c8g = GroupSpec::cyclic(8).unwrap();
        for seed in 0..n {
            let img = smooth_image_g(s, 1000 + seed, g);
            let rot = rotate_field(&img, 1, c8g).unwrap();
            let mut m8: Model<f64> =
                build_model(&cfg(8, widths.clone(), blocks, s, 32, seed)).unwrap();
            let mut m1: Model<f64> =
                build_model(&cfg(1, widths.clone(), blocks, s, 32, seed)).unwrap();
            if warm {
                warmup_norm_stats(&mut m8, s, 555 + seed);
                warmup_norm_stats(&mut m1, s, 555 + seed);
            }
            mean_c8 += cosine(&m8.encode(&img).unwrap(), &m8.encode(&rot).unwrap());
            mean_c1 += cosine(&m1.encode(&img).unwrap(), &m1.encode(&rot).unwrap());
        }
        mean_c8 /= n as f64;
        mean_c1 /= n as f64;
        println!(
            "widths {widths:?} blocks {blocks} grid {g} warm {warm}: C8 {mean_c8:.4}  C1 {mean_c1:.4}  gap {:.4}",
            mean_c8 - mean_c1
        );
    }
}

fn part_c_c8_stack_tolerance() {
    println!("== part C: C8 45-deg relative equivariance error (untrained) ==");
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let model: Model<f64> = build_model(&cfg(8, vec![4, 6], 1, 32, 16, 100 + seed)).unwrap();
        let img = smooth_image(32, seed);
        let trace = model.forward_trace(&img).unwrap();
        for idx in [1usize, 3, 5, 7] {
            for ((id, err), (_, step)) in model
                .equivariance_errors(&img, idx)
                .unwrap()
                .into_iter()
                .zip(&trace)
            {
                let scale = match step {
                    equiplace_core::backbone::TraceStep::Oriented(m) => m.tensor().max_abs(),
                    equiplace_core::backbone::TraceStep::Spatial(t) => t.max_abs(),
                    equiplace_core::backbone::TraceStep::Vector(t) => t.max_abs(),
                };
                let rel = err / scale.max(1e-12);
                if rel > worst {
                    worst = rel;
                    println!("  seed {seed} idx {idx} layer {id}: rel {rel:.5} (abs {err:.4} / scale {scale:.3})");
                }
            }
        }
    }
    println!("worst observed relative: {worst:.5}");

    // interior error: exclude a boundary ring where mask/padding effects
    // dominate, keep positions with radius <= disk radius - margin
    use equiplace_core::backbone::TraceStep;
    use equiplace_core::equivariant::apply_group_action;
    let margin = 3.0;
    let mut worst_interior: f64 = 0.0;
    for seed in 0..20 {
        let model: Model<f64> = build_model(&cfg(8, vec![4, 6], 1, 32, 16, 100 + seed)).unwrap();
        let img = smooth_image(32, seed);
        let c8g = GroupSpec::cyclic(8).unwrap();
        for idx in [1usize, 3, 5, 7] {
            let rot_img = rotate_field(&img, idx, c8g).unwrap();
            let plain = model.forward_trace(&img).unwrap();
            let rot = model.forward_trace(&rot_img).unwrap();
            for ((id, p), (_, r)) in plain.iter().zip(&rot) {
                if let (TraceStep::Oriented(pm), TraceStep::Oriented(rm)) = (p, r) {
                    let expected = apply_group_action(pm, idx).unwrap();
                    let (h, w) = (pm.height(), pm.width());
                    let cc = (h as f64 - 1.0) / 2.0;
                    let rad = h as f64 / 2.0 - margin;
                    let scale = pm.tensor().max_abs().max(1e-12);
                    let hw = h * w;
                    let mut err: f64 = 0.0;
                    for (i, (a, b)) in rm
                        .tensor()
                        .data()
                        .iter()
                        .zip(expected.tensor().data())
                        .enumerate()
                    {
                        let pos = i % hw;
                        let (y, x) = ((pos / w) as f64, (pos % w) as f64);
                        if (y - cc) * (y - cc) + (x - cc) * (x - cc) <= rad * rad {
                            err = err.max((a - b).abs());
                        }
                    }
                    let rel = err / scale;
                    if rel > worst_interior {
                        worst_interior = rel;
                        println!("  interior: seed {seed} idx {idx} layer {id}: rel {rel:.5}");
                    }
                }
            }
        }
    }
    println!("worst interior relative: {worst_interior:.5}");
}

fn part_b_training_gap() {
    println!("== part B: desk-scale C4 vs baseline trained gap, 1 seed ==");
    let t_start = std::time::Instant::now();
    let seed = 0u64;
    let dir = std::env::temp_dir().join(format!("epcalib-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let params = DatasetParams {
        world: WorldSpec {
            seed,
            size_px: 1320,
            meters_per_pixel: 1.0,
            n_years: 2,
            water_fraction: 0.10,
            terrain: TerrainParams::default(),
        },
        interval_m: 100.0,
        diameter_px: 92,
        min_water_free_fraction: 0.5,
    };
    let (records, stats) = build_dataset(&params, &dir, 2).unwrap();
    println!(
        "dataset: {} places in {:.1}s",
        records.len(),
        t_start.elapsed().as_secs_f64()
    );
    assert!(stats.built >= 96, "need 96 places, got {}", stats.built);
    let manifest = read_manifest(&dir.join("manifest.jsonl")).unwrap();
    let ids: Vec<u64> = manifest.places.iter().map(|p| p.place_id).collect();
    let train_ids = &ids[..64];
    let test_ids = &ids[64..96];
    let train_set = DatasetCache::load_subset(&manifest, train_ids).unwrap();
    let test_set = DatasetCache::load_subset(&manifest, test_ids).unwrap();

    let batch = BatchSpec {
        places_per_batch: 8,
        views_per_place: 2,
        input_size: 64,
        augment: AugmentConfig {
            rotate: true,
            appearance: true,
        },
    };
    let tcfg = TrainConfig {
        epochs: 30,
        optimizer: OptimizerKind::Adam {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        seed,
        checkpoint_every: 0,
        jobs: 2,
    };
    let mut results = Vec::new();
    for group in [4usize, 1] {
        let t0 = std::time::Instant::now();
        let mcfg = cfg(group, vec![4, 8], 1, 64, 64, seed);
        let mut model: Model<f32> = build_model(&mcfg).unwrap();
        let mut opt = Optimizer::new(tcfg.optimizer);
        let report = train(
            &mut model,
            &mut opt,
            &train_set,
            &test_set,
            &tcfg,
            &batch,
            &MsLossConfig::default(),
            0,
            None,
        )
        .unwrap();
        // held-out eval: db = year0 angle 0; queries = year-last rotated
        let s = 64usize;
        let transforms = eval_transforms(seed ^ 0xe7a1, test_set.len(), true, 0.0);
        let mut db_images = Vec::new();
        let mut q_images = Vec::new();
        for (pi, place) in test_set.places().iter().enumerate() {
            db_images.push(
                equiplace_core::dataset::rotate_then_crop::<f32>(&place.images[0], 0.0, s)
                    .unwrap(),
            );
            let last = place.images.len() - 1;
            q_images.push(eval_view::<f32>(&place.images[last], &transforms[pi], s).unwrap());
        }
        let db = store_from_descriptors(
            &encode_images(&model, &db_images, 2).unwrap(),
            &test_set.place_ids(),
            "db".into(),
        )
        .unwrap();
        let queries = store_from_descriptors(
            &encode_images(&model, &q_images, 2).unwrap(),
            &test_set.place_ids(),
            "q".into(),
        )
        .unwrap();
        let r = recall_at_n(&queries, &db, &PositiveCriterion::SamePlaceId, &[1], None).unwrap();
        let losses: Vec<f64> = report.log.iter().map(|l| l.loss).collect();
        println!(
            "group {group}: R@1 {:.1}%  val {:.1}->{:.1}  loss {:.3}->{:.3}  in {:.1}s",
            r.recall_pct[0],
            report.initial_val_recall1,
            report.final_val_recall1,
            losses[..4.min(losses.len())].iter().sum::<f64>() / 4.0,
            losses[losses.len().saturating_sub(4)..].iter().sum::<f64>() / 4.0,
            t0.elapsed().as_secs_f64()
        );
        results.push(r.recall_pct[0]);
    }
    println!(
        "gap C4 - baseline = {:.1} pp  (total {:.1}s)",
        results[0] - results[1],
        t_start.elapsed().as_secs_f64()
    );
    std::fs::remove_dir_all(&dir).ok();
}

fn part_d_dim_sweep() {
    use equiplace_core::retrieval::sweep_dims;
    use equiplace_core::train::store_from_descriptors;
    println!("== part D: dim sweep monotonicity ==");
    for world_seed in [777u64, 778, 779] {
        let dir = std::env::temp_dir().join(format!("epcalib-d-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let params = DatasetParams {
            world: WorldSpec {
                seed: world_seed,
                size_px: 1320,
                meters_per_pixel: 1.0,
                n_years: 2,
                water_fraction: 0.10,
                terrain: TerrainParams::default(),
            },
            interval_m: 100.0,
            diameter_px: 92,
            min_water_free_fraction: 0.5,
        };
        build_dataset(&params, &dir, 2).unwrap();
        let manifest = read_manifest(&dir.join("manifest.jsonl")).unwrap();
        let ids: Vec<u64> = manifest.places.iter().map(|p| p.place_id).collect();
        let train_set = DatasetCache::load_subset(&manifest, &ids[..64]).unwrap();
        let held_out = DatasetCache::load_subset(&manifest, &ids[64..96]).unwrap();
        let t0 = std::time::Instant::now();
        let mcfg = cfg(4, vec![8, 48], 1, 32, 512, world_seed);
        let mut model: Model<f32> = build_model(&mcfg).unwrap();
        let tcfg = TrainConfig {
            epochs: 30,
            optimizer: OptimizerKind::Adam {
                lr: 2e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            seed: world_seed,
            checkpoint_every: 0,
            jobs: 2,
        };
        let batch = BatchSpec {
            places_per_batch: 8,
            views_per_place: 2,
            input_size: 32,
            augment: AugmentConfig {
                rotate: true,
                appearance: true,
            },
        };
        let mut opt = Optimizer::new(tcfg.optimizer);
        train(
            &mut model, &mut opt, &train_set, &held_out, &tcfg, &batch,
            &MsLossConfig::default(), 0, None,
        )
        .unwrap();
        let s = 32usize;
        let hids = held_out.place_ids();
        let db_images: Vec<Tensor<f32>> = held_out
            .places()
            .iter()
            .map(|p| equiplace_core::dataset::rotate_then_crop::<f32>(&p.images[0], 0.0, s).unwrap())
            .collect();
        let db = store_from_descriptors(
            &encode_images(&model, &db_images, 2).unwrap(),
            &hids,
            "db".into(),
        )
        .unwrap();
        let dims = [512usize, 256, 128, 64, 32];
        let mut avg = vec![0.0f64; dims.len()];
        for eval_seed in 0..5u64 {
            let transforms = eval_transforms(0xd1a + eval_seed, held_out.len(), true, 0.0);
            let q_images: Vec<Tensor<f32>> = held_out
                .places()
                .iter()
                .enumerate()
                .map(|(pi, p)| eval_view::<f32>(&p.images[0], &transforms[pi], s).unwrap())
                .collect();
            let queries = store_from_descriptors(
                &encode_images(&model, &q_images, 2).unwrap(),
                &hids,
                "q".into(),
            )
            .unwrap();
            let report = sweep_dims(&queries, &db, &dims, &PositiveCriterion::SamePlaceId, None)
                .unwrap();
            for (slot, row) in report.rows.iter().enumerate() {
                avg[slot] += row.recall1 / 5.0;
            }
        }
        println!(
            "world {world_seed}: avg {avg:?}  monotone: {}  ({:.0}s)",
            avg.windows(2).all(|w| w[1] <= w[0] + 1e-9),
            t0.elapsed().as_secs_f64()
        );
        std::fs::remove_dir_all(&dir).ok();
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("all");
    if which == "a" || which == "all" {
        part_a_c8_vs_baseline();
    }
    if which == "c" || which == "all" {
        part_c_c8_stack_tolerance();
    }
    if which == "b" || which == "all" {
        part_b_training_gap();
    }
    if which == "d" {
        part_d_dim_sweep();
    }
}
