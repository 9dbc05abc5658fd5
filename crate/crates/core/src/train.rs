//! Metric-learning training loop: place-balanced batches, multi-similarity
//! loss, Adam (or SGD) updates, per-epoch validation recall, checkpoints.
//!
//! Everything is driven by one seed. Batch composition, augmentation draws
//! and validation transforms derive from `(seed, epoch, step)` paths, so a
//! rerun with the same seed reproduces logs and checkpoints byte for byte
//! at any `jobs` setting.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::backbone::{LayerGradients, Model};
use crate::error::{Error, Result};
use crate::loss::{mine_pairs, ms_loss, pairwise_cosine, pairwise_cosine_backward, MsLossConfig};
use crate::par;
use crate::retrieval::{recall_at_n, DescriptorStore, PositiveCriterion};
use crate::rng::Rng;
use crate::sampler::{check_trainable, eval_transforms, eval_view, sample_batch_for_places, BatchSpec, DatasetCache};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const STATE_MAGIC: &[u8; 4] = b"EPS1";
const STATE_VERSION: u16 = 1;

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd {
        lr: f64,
        momentum: f64,
    },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<()> {
        let lr = match self {
            OptimizerKind::Adam { lr, .. } | OptimizerKind::Sgd { lr, .. } => *lr,
        };
        if lr < 0.0 {
            return Err(Error::Config(format!("learning rate {lr} must be >= 0")));
        }
        Ok(())
    }
}

/// Per-parameter optimizer state (Adam first/second moments, SGD velocity).
pub struct Optimizer<T> {
    kind: OptimizerKind,
    step_count: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update. Every trainable parameter must have a gradient.
    pub fn step(&mut self, model: &mut Model<T>, grads: &LayerGradients<T>) -> Result<()> {
        self.kind.validate()?;
        self.step_count += 1;
        let t = self.step_count;
        let kind = self.kind;
        let moments = &mut self.moments;
        let mut missing: Option<String> = None;
        model.update_params(&mut |id, param| {
            let Some(grad) = grads.by_param.get(id) else {
                missing.get_or_insert_with(|| id.to_string());
                return;
            };
            let (m, v) = moments
                .entry(id.to_string())
                .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
            match kind {
                OptimizerKind::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let (b1, b2) = (T::fromf(beta1), T::fromf(beta2));
                    let bc1 = T::fromf(1.0 - beta1.powi(t as i32));
                    let bc2 = T::fromf(1.0 - beta2.powi(t as i32));
                    let (lr_t, eps_t) = (T::fromf(lr), T::fromf(eps));
                    for i in 0..param.len() {
                        let g = grad.data()[i];
                        let mi = b1 * m.data()[i] + (T::one() - b1) * g;
                        let vi = b2 * v.data()[i] + (T::one() - b2) * g * g;
                        m.data_mut()[i] = mi;
                        v.data_mut()[i] = vi;
                        let m_hat = mi / bc1;
                        let v_hat = vi / bc2;
                        param.data_mut()[i] =
                            param.data()[i] - lr_t * m_hat / (v_hat.sqrt() + eps_t);
                    }
                }
                OptimizerKind::Sgd { lr, momentum } => {
                    let (lr_t, mu) = (T::fromf(lr), T::fromf(momentum));
                    for i in 0..param.len() {
                        let g = grad.data()[i];
                        let vel = mu * m.data()[i] + g;
                        m.data_mut()[i] = vel;
                        param.data_mut()[i] = param.data()[i] - lr_t * vel;
                    }
                }
            }
        });
        if let Some(id) = missing {
            return Err(Error::Data(format!("no gradient for parameter {id}")));
        }
        Ok(())
    }

    /// Persist the optimizer state next to a checkpoint, in the model's
    /// parameter order.
    pub fn save(&self, model: &Model<T>, epoch_next: usize, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(STATE_MAGIC)?;
        w.write_all(&STATE_VERSION.to_le_bytes())?;
        w.write_all(&(epoch_next as u32).to_le_bytes())?;
        w.write_all(&self.step_count.to_le_bytes())?;
        let mut result = Ok(());
        model.visit_params(&mut |id, param| {
            if result.is_err() {
                return;
            }
            let (m, v) = self
                .moments
                .get(id)
                .cloned()
                .unwrap_or_else(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
            result = m.write_to(&mut w).and_then(|_| v.write_to(&mut w));
        });
        result
    }

    /// Restore optimizer state; returns the next epoch to run.
    pub fn load(kind: OptimizerKind, model: &Model<T>, path: &Path) -> Result<(Self, usize)> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("state header: {e}")))?;
        if &magic != STATE_MAGIC {
            return Err(Error::Format(format!(
                "bad training-state magic {magic:?}"
            )));
        }
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf)?;
        if u16::from_le_bytes(u16buf) != STATE_VERSION {
            return Err(Error::Format("unsupported training-state version".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let epoch_next = u32::from_le_bytes(u32buf) as usize;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let step_count = u64::from_le_bytes(u64buf);
        let mut moments = BTreeMap::new();
        let mut result = Ok(());
        model.visit_params(&mut |id, param| {
            if result.is_err() {
                return;
            }
            match (Tensor::<T>::read_from(&mut r), Tensor::<T>::read_from(&mut r)) {
                (Ok(m), Ok(v)) => {
                    if m.shape() != param.shape() || v.shape() != param.shape() {
                        result = Err(Error::Format(format!(
                            "optimizer state shape mismatch for {id}"
                        )));
                    } else {
                        moments.insert(id.to_string(), (m, v));
                    }
                }
                (Err(e), _) | (_, Err(e)) => result = Err(e),
            }
        });
        result?;
        Ok((
            Optimizer {
                kind,
                step_count,
                moments,
            },
            epoch_next,
        ))
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            optimizer: OptimizerKind::default(),
            seed: 0,
            checkpoint_every: 0,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        self.optimizer.validate()
    }
}

/// One logged training step.
#[derive(Clone, Debug)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub kept_pos: usize,
    pub kept_neg: usize,
    /// Filled on the last step of each epoch.
    pub val_recall1: Option<f64>,
}

/// CSV with header `epoch,step,loss,kept_pos,kept_neg,val_recall1`.
pub fn log_to_csv(log: &[StepLog]) -> String {
    let mut out = String::from("epoch,step,loss,kept_pos,kept_neg,val_recall1\n");
    for row in log {
        let val = row
            .val_recall1
            .map(|v| format!("{v:.4}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.6},{},{},{val}\n",
            row.epoch, row.step, row.loss, row.kept_pos, row.kept_neg
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
    pub initial_val_recall1: f64,
    pub final_val_recall1: f64,
    pub checkpoints: Vec<PathBuf>,
}

/// Encode a list of images in parallel (eval mode, order-preserving).
pub fn encode_images<T: Scalar>(
    model: &Model<T>,
    images: &[Tensor<T>],
    jobs: usize,
) -> Result<Vec<Tensor<T>>> {
    let results = par::map_indexed(jobs, images.len(), |i| model.encode(&images[i]));
    results.into_iter().collect()
}

/// Build a descriptor store from encoded images (cast to f32 rows).
pub fn store_from_descriptors<T: Scalar>(
    descriptors: &[Tensor<T>],
    ids: &[u64],
    metadata: String,
) -> Result<DescriptorStore> {
    if descriptors.is_empty() {
        return DescriptorStore::build(1, vec![], vec![], metadata);
    }
    let dim = descriptors[0].len();
    let mut data = Vec::with_capacity(descriptors.len() * dim);
    for d in descriptors {
        let row32 = d.cast::<f32>();
        // renormalize after the cast so rows stay unit within 1e-5
        let norm: f32 = row32.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        data.extend(row32.data().iter().map(|v| v / norm));
    }
    DescriptorStore::build(dim, ids.to_vec(), data, metadata)
}

/// Validation protocol: database = first-year view at angle 0, queries =
/// last-year view under a fixed per-place random rotation. Recall@1 under
/// the same-place criterion.
pub fn validation_recall1<T: Scalar>(
    model: &Model<T>,
    val: &DatasetCache,
    seed: u64,
    jobs: usize,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let s = model.config().input_size;
    let transforms = eval_transforms(seed, val.len(), true, 0.0);
    let mut db_images = Vec::with_capacity(val.len());
    let mut q_images = Vec::with_capacity(val.len());
    for (pi, place) in val.places().iter().enumerate() {
        db_images.push(crate::dataset::rotate_then_crop::<T>(
            &place.images[0],
            0.0,
            s,
        )?);
        let last = place.images.len() - 1;
        q_images.push(eval_view::<T>(&place.images[last], &transforms[pi], s)?);
    }
    let ids = val.place_ids();
    let db_desc = encode_images(model, &db_images, jobs)?;
    let q_desc = encode_images(model, &q_images, jobs)?;
    let db = store_from_descriptors(&db_desc, &ids, "val-db".into())?;
    let queries = store_from_descriptors(&q_desc, &ids, "val-q".into())?;
    let report = recall_at_n(&queries, &db, &PositiveCriterion::SamePlaceId, &[1], None)?;
    Ok(report.recall_pct[0])
}

/// Train `model` on the train split, tracking validation recall per epoch.
/// Deterministic for a fixed seed at any `jobs` value. Checkpoints (model +
/// optimizer sidecar) are written to `checkpoint_dir` when given.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    optimizer: &mut Optimizer<T>,
    train_set: &DatasetCache,
    val_set: &DatasetCache,
    cfg: &TrainConfig,
    batch: &BatchSpec,
    loss_cfg: &MsLossConfig,
    start_epoch: usize,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    batch.validate()?;
    loss_cfg.validate()?;
    check_trainable(train_set, batch)?;
    {
        // train/validation places must be disjoint
        let train_ids: std::collections::BTreeSet<u64> =
            train_set.place_ids().into_iter().collect();
        for id in val_set.place_ids() {
            if train_ids.contains(&id) {
                return Err(Error::Data(format!(
                    "place {id} appears in both train and validation splits"
                )));
            }
        }
    }
    let initial_val = validation_recall1(model, val_set, cfg.seed, cfg.jobs)?;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut final_val = initial_val;
    let steps_per_epoch = train_set.len() / batch.places_per_batch;
    if steps_per_epoch == 0 {
        return Err(Error::Data(format!(
            "{} train places cannot fill a {}-place batch",
            train_set.len(),
            batch.places_per_batch
        )));
    }
    for epoch in start_epoch..start_epoch + cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::derive(cfg.seed, &[1, epoch as u64]).shuffle(&mut order);
        for step in 0..steps_per_epoch {
            let places =
                &order[step * batch.places_per_batch..(step + 1) * batch.places_per_batch];
            let mut batch_rng = Rng::derive(cfg.seed, &[2, epoch as u64, step as u64]);
            let (images, labels) = sample_batch_for_places::<T>(train_set, places, batch, &mut batch_rng)?;
            let (descriptors, cache) = model.forward_train(&images, cfg.jobs)?;
            let sim = pairwise_cosine(&descriptors)?;
            let mined = mine_pairs(&sim, &labels, loss_cfg.epsilon)?;
            let (loss, d_sim, stats) = ms_loss(&sim, &mined, loss_cfg)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at batch id epoch {epoch} step {step}"
                )));
            }
            let d_desc = pairwise_cosine_backward(&descriptors, &d_sim)?;
            let grads = model.backward(&cache, &d_desc, cfg.jobs)?;
            optimizer.step(model, &grads)?;
            let is_last = step + 1 == steps_per_epoch;
            let val = if is_last {
                let v = validation_recall1(model, val_set, cfg.seed, cfg.jobs)?;
                final_val = v;
                Some(v)
            } else {
                None
            };
            log.push(StepLog {
                epoch,
                step,
                loss,
                kept_pos: stats.kept_pos,
                kept_neg: stats.kept_neg,
                val_recall1: val,
            });
        }
        if let Some(dir) = checkpoint_dir {
            let cadence = cfg.checkpoint_every;
            let is_final = epoch + 1 == start_epoch + cfg.epochs;
            if is_final || (cadence > 0 && (epoch + 1 - start_epoch) % cadence == 0) {
                std::fs::create_dir_all(dir)?;
                let model_path = dir.join(format!("checkpoint_epoch{:03}.epm", epoch + 1));
                model.save(&model_path)?;
                optimizer.save(model, epoch + 1, &model_path.with_extension("eps"))?;
                checkpoints.push(model_path);
            }
        }
    }
    Ok(TrainReport {
        log,
        initial_val_recall1: initial_val,
        final_val_recall1: final_val,
        checkpoints,
    })
}
