//! Flat key=value run configuration: defaults <- config file <- flags.
//!
//! Every tunable of every subcommand lives here so a single resolved
//! listing can be echoed into each output directory for reproducibility.
//! Unknown keys are rejected outright.

use equiplace_core::backbone::{ModelConfig, SpatialPool};
use equiplace_core::dataset::{DatasetParams, TerrainParams, WorldSpec};
use equiplace_core::equivariant::OrientationPool;
use equiplace_core::loss::MsLossConfig;
use equiplace_core::sampler::{AugmentConfig, BatchSpec};
use equiplace_core::train::{OptimizerKind, TrainConfig};
use equiplace_core::{Error, Result};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    // model
    pub group_order: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub kernel_size: usize,
    pub input_size: usize,
    pub descriptor_dim: usize,
    pub pooling: String,
    pub orientation_pool: String,
    // world / dataset
    pub world_size: usize,
    pub meters_per_pixel: f64,
    pub years: usize,
    pub water_fraction: f64,
    pub interval_m: f64,
    pub diameter_px: u32,
    pub min_water_free: f64,
    // training
    pub epochs: usize,
    pub optimizer: String,
    pub lr: f64,
    pub momentum: f64,
    pub places_per_batch: usize,
    pub views_per_place: usize,
    pub augment_rotate: bool,
    pub augment_appearance: bool,
    pub val_fraction: f64,
    pub checkpoint_every: usize,
    // loss
    pub loss_alpha: f64,
    pub loss_beta: f64,
    pub loss_lambda: f64,
    pub loss_epsilon: f64,
    // evaluation
    pub criterion: String,
    pub eval_ns: Vec<usize>,
    pub query_rotate: bool,
    pub query_scale_jitter: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 1,
            group_order: 4,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            kernel_size: 3,
            input_size: 64,
            descriptor_dim: 512,
            pooling: "gem".into(),
            orientation_pool: "max".into(),
            world_size: 1024,
            meters_per_pixel: 1.0,
            years: 10,
            water_fraction: 0.12,
            interval_m: 110.0,
            diameter_px: 92,
            min_water_free: 0.5,
            epochs: 30,
            optimizer: "adam".into(),
            lr: 1e-3,
            momentum: 0.9,
            places_per_batch: 8,
            views_per_place: 4,
            augment_rotate: true,
            augment_appearance: true,
            val_fraction: 0.25,
            checkpoint_every: 0,
            loss_alpha: 2.0,
            loss_beta: 50.0,
            loss_lambda: 0.5,
            loss_epsilon: 0.1,
            criterion: "same-place".into(),
            eval_ns: vec![1, 5, 10],
            query_rotate: true,
            query_scale_jitter: 0.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}={value}: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("{key}={other}: expected true/false"))),
    }
}

impl RunConfig {
    /// Set one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            "group_order" => self.group_order = parse(key, value)?,
            "stage_widths" => self.stage_widths = parse_list(key, value)?,
            "blocks_per_stage" => self.blocks_per_stage = parse(key, value)?,
            "kernel_size" => self.kernel_size = parse(key, value)?,
            "input_size" => self.input_size = parse(key, value)?,
            "descriptor_dim" => self.descriptor_dim = parse(key, value)?,
            "pooling" => self.pooling = value.into(),
            "orientation_pool" => self.orientation_pool = value.into(),
            "world_size" => self.world_size = parse(key, value)?,
            "meters_per_pixel" => self.meters_per_pixel = parse(key, value)?,
            "years" => self.years = parse(key, value)?,
            "water_fraction" => self.water_fraction = parse(key, value)?,
            "interval_m" => self.interval_m = parse(key, value)?,
            "diameter_px" => self.diameter_px = parse(key, value)?,
            "min_water_free" => self.min_water_free = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "optimizer" => self.optimizer = value.into(),
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "places_per_batch" => self.places_per_batch = parse(key, value)?,
            "views_per_place" => self.views_per_place = parse(key, value)?,
            "augment_rotate" => self.augment_rotate = parse_bool(key, value)?,
            "augment_appearance" => self.augment_appearance = parse_bool(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "loss_alpha" => self.loss_alpha = parse(key, value)?,
            "loss_beta" => self.loss_beta = parse(key, value)?,
            "loss_lambda" => self.loss_lambda = parse(key, value)?,
            "loss_epsilon" => self.loss_epsilon = parse(key, value)?,
            "criterion" => self.criterion = value.into(),
            "eval_ns" => self.eval_ns = parse_list(key, value)?,
            "query_rotate" => self.query_rotate = parse_bool(key, value)?,
            "query_scale_jitter" => self.query_scale_jitter = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Merge a `key=value` file over the current values.
    pub fn merge_file(&mut self, path: &std::path::Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got '{raw}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Fully resolved listing, echoed into output directories.
    pub fn to_kv(&self) -> String {
        let widths: Vec<String> = self.stage_widths.iter().map(|w| w.to_string()).collect();
        let ns: Vec<String> = self.eval_ns.iter().map(|n| n.to_string()).collect();
        format!(
            "seed={}\njobs={}\n\
             group_order={}\nstage_widths={}\nblocks_per_stage={}\nkernel_size={}\n\
             input_size={}\ndescriptor_dim={}\npooling={}\norientation_pool={}\n\
             world_size={}\nmeters_per_pixel={}\nyears={}\nwater_fraction={}\n\
             interval_m={}\ndiameter_px={}\nmin_water_free={}\n\
             epochs={}\noptimizer={}\nlr={}\nmomentum={}\n\
             places_per_batch={}\nviews_per_place={}\naugment_rotate={}\naugment_appearance={}\n\
             val_fraction={}\ncheckpoint_every={}\n\
             loss_alpha={}\nloss_beta={}\nloss_lambda={}\nloss_epsilon={}\n\
             criterion={}\neval_ns={}\nquery_rotate={}\nquery_scale_jitter={}\n",
            self.seed,
            self.jobs,
            self.group_order,
            widths.join(","),
            self.blocks_per_stage,
            self.kernel_size,
            self.input_size,
            self.descriptor_dim,
            self.pooling,
            self.orientation_pool,
            self.world_size,
            self.meters_per_pixel,
            self.years,
            self.water_fraction,
            self.interval_m,
            self.diameter_px,
            self.min_water_free,
            self.epochs,
            self.optimizer,
            self.lr,
            self.momentum,
            self.places_per_batch,
            self.views_per_place,
            self.augment_rotate,
            self.augment_appearance,
            self.val_fraction,
            self.checkpoint_every,
            self.loss_alpha,
            self.loss_beta,
            self.loss_lambda,
            self.loss_epsilon,
            self.criterion,
            ns.join(","),
            self.query_rotate,
            self.query_scale_jitter,
        )
    }

    // -- conversions into core configs -----------------------------------------

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            group_order: self.group_order,
            stage_widths: self.stage_widths.clone(),
            blocks_per_stage: self.blocks_per_stage,
            kernel_size: self.kernel_size,
            input_size: self.input_size,
            descriptor_dim: self.descriptor_dim,
            pooling: SpatialPool::parse(&self.pooling)?,
            orientation_pool: OrientationPool::parse(&self.orientation_pool)?,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset_params(&self) -> DatasetParams {
        DatasetParams {
            world: WorldSpec {
                seed: self.seed,
                size_px: self.world_size,
                meters_per_pixel: self.meters_per_pixel,
                n_years: self.years,
                water_fraction: self.water_fraction,
                terrain: TerrainParams::default(),
            },
            interval_m: self.interval_m,
            diameter_px: self.diameter_px,
            min_water_free_fraction: self.min_water_free,
        }
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            places_per_batch: self.places_per_batch,
            views_per_place: self.views_per_place,
            input_size: self.input_size,
            augment: AugmentConfig {
                rotate: self.augment_rotate,
                appearance: self.augment_appearance,
            },
        }
    }

    pub fn loss_config(&self) -> MsLossConfig {
        MsLossConfig {
            alpha: self.loss_alpha,
            beta: self.loss_beta,
            lambda: self.loss_lambda,
            epsilon: self.loss_epsilon,
        }
    }

    pub fn optimizer_kind(&self) -> Result<OptimizerKind> {
        match self.optimizer.as_str() {
            "adam" => Ok(OptimizerKind::Adam {
                lr: self.lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            }),
            "sgd" => Ok(OptimizerKind::Sgd {
                lr: self.lr,
                momentum: self.momentum,
            }),
            other => Err(Error::Config(format!(
                "unknown optimizer '{other}' (adam | sgd)"
            ))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.epochs,
            optimizer: self.optimizer_kind()?,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            jobs: self.jobs,
        })
    }
}
