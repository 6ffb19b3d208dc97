//! Two-stage fine-tuning with class-balanced batches and dihedral augmentation.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::config::RunConfig;
use crate::data::{seeded_rng, BalancedSampler, SamplerError};
use crate::dihedral::Dihedral;
use crate::graph::Graph;
use crate::image::ImageError;
use crate::model::{FreezeStage, ModelError, ModelInput, ModelParams};
use crate::optim::{adam_step, AdamState};
use crate::param::Gradients;
use crate::pipeline::PreparedSet;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid stage config: {0}")]
    Config(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("non-finite loss {loss} at update {update}")]
    NonFiniteLoss { update: usize, loss: f64 },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub stage: FreezeStage,
    pub learning_rate: f64,
    pub updates: usize,
    pub batch_size: usize,
    pub augment: bool,
}

impl StageConfig {
    /// Head-only warm-up: 150 updates at 1e-2.
    pub fn stage1() -> Self {
        Self {
            stage: FreezeStage::Stage1,
            learning_rate: 1e-2,
            updates: 150,
            batch_size: 32,
            augment: true,
        }
    }

    /// Fine-tuning of the last two blocks plus head: 600 updates at 1e-3.
    pub fn stage2() -> Self {
        Self {
            stage: FreezeStage::STAGE2_DEFAULT,
            learning_rate: 1e-3,
            updates: 600,
            batch_size: 32,
            augment: true,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub update: usize,
    pub stage: &'static str,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn extend(&mut self, other: TrainLog) {
        let offset = self.records.len();
        self.records.extend(other.records.into_iter().map(|mut r| {
            r.update += offset;
            r
        }));
    }

    /// CSV with header `update,stage,loss`.
    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "update,stage,loss")?;
        for r in &self.records {
            writeln!(w, "{},{},{:e}", r.update, r.stage, r.loss)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let io_err = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        self.write_csv(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)
    }
}

/// Runs `cfg.updates` Adam steps with a fresh optimizer state. Each batch is
/// drawn by the balanced sampler; with augmentation on, every image in it
/// gets an independent uniformly drawn dihedral transform.
pub fn train_stage<R: Rng + ?Sized>(
    model: &mut ModelParams,
    data: &PreparedSet,
    cfg: &StageConfig,
    rng: &mut R,
) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if cfg.updates == 0 {
        return Ok(log);
    }
    model.set_freeze(cfg.stage);
    let sampler = BalancedSampler::from_labels(data.labels.iter().copied())?;
    let mut state = AdamState::new(model.params());

    for update in 0..cfg.updates {
        let plan = sampler.sample(rng, cfg.batch_size)?;
        let mut grads = Gradients::empty(model.params().len());
        let mut total_loss = 0.0;
        for &idx in &plan.indices {
            let augmented;
            let input: &ModelInput = if cfg.augment {
                let g = Dihedral::random(rng);
                augmented = data.inputs[idx].try_map(|t| g.apply_planar(t))?;
                &augmented
            } else {
                &data.inputs[idx]
            };
            let mut graph = Graph::new();
            let probs = model.forward_graph(&mut graph, input)?;
            let loss = graph.cross_entropy(probs, data.labels[idx].index())?;
            total_loss += graph.value(loss).item();
            grads.merge(&graph.backward(loss)?);
        }
        let batch = plan.indices.len() as f64;
        grads.scale(1.0 / batch);
        let mean_loss = total_loss / batch;
        if !mean_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                update,
                loss: mean_loss,
            });
        }
        adam_step(model.params_mut(), &grads, &mut state, cfg.learning_rate)?;
        log.records.push(TrainRecord {
            update,
            stage: cfg.stage.tag(),
            loss: mean_loss,
        });
    }
    Ok(log)
}

/// Stage 1 (frozen backbone) followed by stage 2 (partially unfrozen).
pub fn two_stage_train<R: Rng + ?Sized>(
    model: &mut ModelParams,
    data: &PreparedSet,
    schedule: &[StageConfig; 2],
    rng: &mut R,
) -> Result<TrainLog, TrainError> {
    if schedule[0].stage != FreezeStage::Stage1 || !matches!(schedule[1].stage, FreezeStage::Stage2 { .. }) {
        return Err(TrainError::Config("schedule must be [stage1, stage2]".into()));
    }
    let mut log = TrainLog::default();
    for cfg in schedule {
        model.set_freeze(cfg.stage);
        log.extend(train_stage(model, data, cfg, rng)?);
    }
    Ok(log)
}

/// Builds a model from `cfg` and trains it with the two-stage schedule. One
/// generator seeded with `cfg.seed` drives initialization, then training.
pub fn train_from_config(cfg: &RunConfig, data: &PreparedSet) -> Result<(ModelParams, TrainLog), TrainError> {
    let mut rng = seeded_rng(cfg.seed);
    let mut model = ModelParams::build(cfg.model_config(), &mut rng)?;
    let log = two_stage_train(&mut model, data, &cfg.schedule(), &mut rng)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{seeded_rng, ClassLabel};
    use crate::model::{BackboneConfig, Mode, ModelConfig};
    use crate::tensor::Tensor;

    fn toy_set(n: usize, side: usize, seed: u64) -> PreparedSet {
        let mut rng = seeded_rng(seed);
        let mut set = PreparedSet {
            ids: Vec::new(),
            inputs: Vec::new(),
            labels: Vec::new(),
        };
        for i in 0..n {
            let mut view = || {
                let d = (0..3 * side * side).map(|_| rng.random::<f64>()).collect();
                Tensor::new(vec![3, side, side], d).unwrap()
            };
            set.inputs.push(ModelInput::Multi {
                coarse: view(),
                fine: view(),
            });
            set.labels.push(ClassLabel::ALL[i % 3]);
            set.ids.push(format!("toy{i}"));
        }
        set
    }

    fn tiny_model(seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                widths: vec![4, 6, 8],
                side: 16,
            },
            hidden: 8,
            mode: Mode::MultiScale,
        };
        ModelParams::build(cfg, &mut seeded_rng(seed)).unwrap()
    }

    #[test]
    fn zero_updates_is_noop() {
        let mut m = tiny_model(0);
        let before = m.clone();
        let mut cfg = StageConfig::stage1();
        cfg.updates = 0;
        let log = train_stage(&mut m, &toy_set(6, 16, 1), &cfg, &mut seeded_rng(2)).unwrap();
        assert!(log.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn stage_log_and_freeze() {
        let mut m = tiny_model(3);
        let before = m.clone();
        let mut cfg = StageConfig::stage1();
        cfg.updates = 5;
        cfg.batch_size = 6;
        let log = train_stage(&mut m, &toy_set(9, 16, 4), &cfg, &mut seeded_rng(5)).unwrap();
        assert_eq!(log.len(), 5);
        assert!(log.losses().all(f64::is_finite));
        for (a, b) in before.params().iter().zip(m.params().iter()) {
            let changed = !a.value.bit_eq(&b.value);
            assert_eq!(changed, !a.name.starts_with("block"), "{}", a.name);
        }
    }

    #[test]
    fn log_csv_format() {
        let mut log = TrainLog::default();
        log.records.push(TrainRecord {
            update: 0,
            stage: "stage1",
            loss: 1.5,
        });
        let mut out = Vec::new();
        log.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "update,stage,loss\n0,stage1,1.5e0\n");
    }

    #[test]
    fn schedule_must_be_ordered() {
        let mut m = tiny_model(0);
        let sched = [StageConfig::stage2(), StageConfig::stage1()];
        assert!(matches!(
            two_stage_train(&mut m, &toy_set(3, 16, 0), &sched, &mut seeded_rng(0)),
            Err(TrainError::Config(_))
        ));
    }
}
