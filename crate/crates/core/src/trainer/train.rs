use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::augment::{augment_sample, AugmentConfig};
use super::loss::{loss_and_grad, surrogate_targets, Batch, Objective};
use super::model::{HeadMode, ModelConfig, ToyModel};
use super::params::{Param, ParamGroup};
use super::{Tensor4, TensorGrid};
use crate::coverage::CoverageGrid;
use crate::dataset::CorpusSample;
use crate::error::{Error, Result};
use crate::geometry::NUM_CLASSES;
use crate::metrics::{Pooling, RmseAccumulator};

/// Images per forward pass when only evaluating.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Soiling-head epochs.
    pub epochs: usize,
    /// Encoder plus surrogate-head epochs.
    pub surrogate_epochs: usize,
    /// Soiling-head learning rate.
    pub learning_rate: f64,
    /// Learning rate of the encoder plus surrogate-head phase.
    pub surrogate_learning_rate: f64,
    pub seed: u64,
    pub mode: HeadMode,
    pub augmentation: bool,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 50,
            surrogate_epochs: 15,
            learning_rate: 0.001,
            surrogate_learning_rate: 0.005,
            seed: 0,
            mode: HeadMode::Coverage,
            augmentation: false,
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Argument(
                "batch size and epochs must be positive".into(),
            ));
        }
        for lr in [self.learning_rate, self.surrogate_learning_rate] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Argument(format!(
                    "learning rate must be positive, got {lr}"
                )));
            }
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            ..self.model.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPhase {
    Surrogate,
    Soiling,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: TrainPhase,
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    pub val_loss: Option<f64>,
    /// Mean per-image coverage RMSE on the validation set.
    pub val_rmse: Option<f64>,
    pub val_rmse_per_class: Option<[f64; NUM_CLASSES]>,
    pub encoder_checksum: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ToyModel<f32>,
    pub log: Vec<EpochLog>,
    /// Encoder checksum at the end of the surrogate phase.
    pub phase1_checksum: String,
    /// Encoder parameters and statistics at the end of the surrogate phase.
    pub phase1_encoder: Vec<Param<f32>>,
    /// Soiling epoch whose head was kept.
    pub best_epoch: usize,
}

/// Coverage RMSE of clamped predictions against ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageEval {
    pub images: usize,
    pub rmse: f64,
    pub per_class: [f64; NUM_CLASSES],
    pub clamped: usize,
}

struct Prepared<'a> {
    samples: Vec<&'a CorpusSample>,
    inputs: Tensor4<f32>,
}

impl<'a> Prepared<'a> {
    fn new(samples: &[&'a CorpusSample], cfg: &ModelConfig) -> Result<Self> {
        for s in samples {
            if (s.image.height, s.image.width) != (cfg.height, cfg.width)
                || (s.coverage.vtiles, s.coverage.htiles) != (cfg.vtiles, cfg.htiles)
            {
                return Err(Error::Dimension(format!(
                    "{}: image {}x{} with {}x{} tiles, model expects {}x{} with {}x{}",
                    s.image_id,
                    s.image.height,
                    s.image.width,
                    s.coverage.vtiles,
                    s.coverage.htiles,
                    cfg.height,
                    cfg.width,
                    cfg.vtiles,
                    cfg.htiles
                )));
            }
        }
        let inputs = if samples.is_empty() {
            Tensor4::zeros(0, cfg.in_channels, cfg.height, cfg.width)
        } else {
            let grids: Vec<_> = samples
                .iter()
                .map(|s| TensorGrid::from_rgb(&s.image))
                .collect();
            Tensor4::stack(&grids)?
        };
        Ok(Self {
            samples: samples.to_vec(),
            inputs,
        })
    }

    fn len(&self) -> usize {
        self.samples.len()
    }

    fn coverage(&self, idx: &[usize]) -> Vec<CoverageGrid> {
        idx.iter()
            .map(|&i| self.samples[i].coverage.clone())
            .collect()
    }

    /// Inputs and targets of `idx`, augmented when `aug` is given.
    fn batch(
        &self,
        idx: &[usize],
        aug: Option<(&AugmentConfig, &mut ChaCha8Rng)>,
    ) -> Result<(Tensor4<f32>, Vec<CoverageGrid>)> {
        match aug {
            None => Ok((self.inputs.gather(idx), self.coverage(idx))),
            Some((cfg, rng)) => {
                let mut images = Vec::with_capacity(idx.len());
                let mut coverage = Vec::with_capacity(idx.len());
                for &i in idx {
                    let s = self.samples[i];
                    let (img, cov) = augment_sample(&s.image, &s.coverage, cfg, rng);
                    images.push(TensorGrid::from_rgb(&img));
                    coverage.push(cov);
                }
                Ok((Tensor4::stack(&images)?, coverage))
            }
        }
    }
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    // A single-sample batch has no batch statistics.
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        batches.pop();
    }
    batches
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n)
        .step_by(EVAL_CHUNK)
        .map(move |s| (s..(s + EVAL_CHUNK).min(n)).collect())
}

fn encoder_features(model: &ToyModel<f32>, inputs: &Tensor4<f32>) -> Result<Tensor4<f32>> {
    let (fh, fw) = model.config.feature_size();
    let fc = model.config.feature_channels();
    let mut out = Tensor4::zeros(inputs.n, fc, fh, fw);
    let len = fc * fh * fw;
    for idx in chunks(inputs.n) {
        let f = model.features(&inputs.gather(&idx))?;
        out.data[idx[0] * len..idx[0] * len + f.data.len()].copy_from_slice(&f.data);
    }
    Ok(out)
}

fn surrogate_val_loss(model: &ToyModel<f32>, data: &Prepared) -> Result<Option<f64>> {
    if data.len() == 0 {
        return Ok(None);
    }
    let (vt, ht) = (model.config.vtiles, model.config.htiles);
    let mut sum = 0.0;
    for idx in chunks(data.len()) {
        let x = data.inputs.gather(&idx);
        let batch = Batch {
            surrogate: Some(surrogate_targets(&x, vt, ht)),
            inputs: x,
            coverage: Vec::new(),
        };
        let pass = model.forward(&batch.inputs, true, false, false)?;
        sum += loss_and_grad(Objective::Surrogate, &pass, &batch)?.loss * idx.len() as f64;
    }
    Ok(Some(sum / data.len() as f64))
}

fn mean_coverage(samples: &[&CorpusSample]) -> [f64; NUM_CLASSES] {
    let mut sum = [0.0; NUM_CLASSES];
    let mut tiles = 0usize;
    for s in samples {
        for tile in &s.coverage.values {
            for (acc, v) in sum.iter_mut().zip(tile) {
                *acc += v;
            }
        }
        tiles += s.coverage.values.len();
    }
    sum.map(|v| v / tiles.max(1) as f64)
}

fn soiling_objective(mode: HeadMode) -> Objective {
    match mode {
        HeadMode::Coverage => Objective::Coverage,
        HeadMode::Classification => Objective::Classification,
    }
}

/// Validation loss and coverage RMSE from cached encoder features.
fn soiling_val(
    model: &ToyModel<f32>,
    features: &Tensor4<f32>,
    data: &Prepared,
) -> Result<Option<(f64, CoverageEval)>> {
    if data.len() == 0 {
        return Ok(None);
    }
    let objective = soiling_objective(model.mode());
    let mut acc = RmseAccumulator::new();
    let mut clamped = 0;
    let mut loss = 0.0;
    for idx in chunks(data.len()) {
        let batch = Batch {
            inputs: features.gather(&idx),
            coverage: data.coverage(&idx),
            surrogate: None,
        };
        let pass = model.forward_from_features(batch.inputs.clone(), false, false)?;
        loss += loss_and_grad(objective, &pass, &batch)?.loss * idx.len() as f64;
        for (out, truth) in model
            .head_outputs(&pass.output)
            .into_iter()
            .zip(&batch.coverage)
        {
            let mut grid = out.into_grid();
            clamped += grid.clamp_unit();
            acc.add(truth, &grid)?;
        }
    }
    Ok(Some((
        loss / data.len() as f64,
        CoverageEval {
            images: acc.images(),
            rmse: acc.overall(Pooling::PerImageMean),
            per_class: acc.per_class(),
            clamped,
        },
    )))
}

/// Coverage RMSE of a model on a sample set, predictions clamped to
/// `[0, 1]` as on export.
pub fn evaluate_coverage(model: &ToyModel<f32>, samples: &[&CorpusSample]) -> Result<CoverageEval> {
    if samples.is_empty() {
        return Err(Error::Argument("no samples to evaluate".into()));
    }
    let data = Prepared::new(samples, &model.config)?;
    let features = encoder_features(model, &data.inputs)?;
    Ok(soiling_val(model, &features, &data)?.expect("nonempty").1)
}

/// Two-phase training; see [`train_two_phase_logged`].
pub fn train_two_phase(
    train: &[&CorpusSample],
    val: &[&CorpusSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_two_phase_logged(train, val, cfg, &mut |_| {})
}

/// Phase 1 trains encoder and surrogate head; phase 2 freezes the encoder
/// and trains the soiling head. `sink` sees every epoch log as it is
/// produced, so a divergence error still leaves the earlier lines behind.
/// The soiling head of the epoch with the lowest validation RMSE is kept.
pub fn train_two_phase_logged(
    train: &[&CorpusSample],
    val: &[&CorpusSample],
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let mcfg = cfg.model_config();
    let train_data = Prepared::new(train, &mcfg)?;
    let val_data = Prepared::new(val, &mcfg)?;
    let (vt, ht) = (mcfg.vtiles, mcfg.htiles);
    let mut model = ToyModel::<f32>::new(mcfg, cfg.seed)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);
    let adam = AdamConfig {
        learning_rate: cfg.surrogate_learning_rate,
        ..AdamConfig::default()
    };
    let mut log = Vec::new();
    let mut emit = |entry: EpochLog, log: &mut Vec<EpochLog>| {
        sink(&entry);
        log.push(entry);
    };

    let phase1 = [ParamGroup::Encoder, ParamGroup::Surrogate];
    model.set_trainable(ParamGroup::Encoder, true);
    model.set_trainable(ParamGroup::Surrogate, true);
    model.set_trainable(ParamGroup::Soiling, false);
    let mut state = AdamState::new(&model.store);
    for epoch in 1..=cfg.surrogate_epochs {
        let mut sum = 0.0;
        let mut seen = 0;
        for idx in shuffled_batches(train_data.len(), cfg.batch_size, &mut order_rng) {
            let aug = cfg.augmentation.then_some((&cfg.augment, &mut aug_rng));
            let (x, _) = train_data.batch(&idx, aug)?;
            let batch = Batch {
                surrogate: Some(surrogate_targets(&x, vt, ht)),
                inputs: x,
                coverage: Vec::new(),
            };
            let pass = model.forward(&batch.inputs, true, true, true)?;
            let out = loss_and_grad(Objective::Surrogate, &pass, &batch)?;
            let grads = model.backward(&pass, &out.d_logits);
            adam_step(&mut model.store, &grads, &mut state, &adam, &phase1);
            model.update_running_stats(&pass);
            sum += out.loss * idx.len() as f64;
            seen += idx.len();
        }
        let entry = EpochLog {
            phase: TrainPhase::Surrogate,
            epoch,
            loss: sum / seen as f64,
            val_loss: surrogate_val_loss(&model, &val_data)?,
            val_rmse: None,
            val_rmse_per_class: None,
            encoder_checksum: model.encoder_checksum(),
        };
        emit(entry, &mut log);
    }

    model.set_trainable(ParamGroup::Encoder, false);
    model.set_trainable(ParamGroup::Surrogate, false);
    model.set_trainable(ParamGroup::Soiling, true);
    let phase1_checksum = model.encoder_checksum();
    let phase1_encoder: Vec<Param<f32>> = model
        .store
        .params
        .iter()
        .filter(|p| p.group == ParamGroup::Encoder)
        .cloned()
        .collect();
    model.set_output_prior(mean_coverage(&train_data.samples));
    let objective = soiling_objective(model.mode());
    let train_features = if cfg.augmentation {
        None
    } else {
        Some(encoder_features(&model, &train_data.inputs)?)
    };
    let val_features = encoder_features(&model, &val_data.inputs)?;
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&model.store);
    let mut best: Option<(f64, usize, Vec<Param<f32>>)> = None;
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        let mut seen = 0;
        for idx in shuffled_batches(train_data.len(), cfg.batch_size, &mut order_rng) {
            let (features, coverage) = match &train_features {
                Some(f) => (f.gather(&idx), train_data.coverage(&idx)),
                None => {
                    let (x, cov) = train_data.batch(&idx, Some((&cfg.augment, &mut aug_rng)))?;
                    (model.features(&x)?, cov)
                }
            };
            let batch = Batch {
                inputs: features,
                coverage,
                surrogate: None,
            };
            let pass = model.forward_from_features(batch.inputs.clone(), false, true)?;
            let out = loss_and_grad(objective, &pass, &batch)?;
            let grads = model.backward(&pass, &out.d_logits);
            adam_step(
                &mut model.store,
                &grads,
                &mut state,
                &adam,
                &[ParamGroup::Soiling],
            );
            model.update_running_stats(&pass);
            sum += out.loss * idx.len() as f64;
            seen += idx.len();
        }
        let loss = sum / seen as f64;
        let val = soiling_val(&model, &val_features, &val_data)?;
        let score = val.as_ref().map_or(loss, |(_, e)| e.rmse);
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            let snapshot = model
                .store
                .params
                .iter()
                .filter(|p| p.group == ParamGroup::Soiling)
                .cloned()
                .collect();
            best = Some((score, epoch, snapshot));
        }
        let entry = EpochLog {
            phase: TrainPhase::Soiling,
            epoch,
            loss,
            val_loss: val.as_ref().map(|(l, _)| *l),
            val_rmse: val.as_ref().map(|(_, e)| e.rmse),
            val_rmse_per_class: val.as_ref().map(|(_, e)| e.per_class),
            encoder_checksum: model.encoder_checksum(),
        };
        emit(entry, &mut log);
    }

    let (_, best_epoch, snapshot) = best.expect("at least one soiling epoch");
    for saved in snapshot {
        let id = model.store.find(&saved.name).expect("same structure");
        model.store.params[id] = saved;
    }
    Ok(TrainOutcome {
        model,
        log,
        phase1_checksum,
        phase1_encoder,
        best_epoch,
    })
}

/// Writes one JSON object per line.
pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = Vec::new();
    for entry in log {
        serde_json::to_writer(&mut out, entry).expect("log entries serialize");
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}
