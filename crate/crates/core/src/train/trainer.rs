use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Dims, ParameterStore};
use crate::dataset::FewShotDataset;
use crate::error::{Error, Result};
use crate::train::config::TrainConfig;
use crate::train::data::TrainingSet;
use crate::train::optim::OptimizerState;
use crate::train::step::{train_step, StepReport};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Steps completed.
    pub step: u64,
    pub store: ParameterStore,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json("checkpoint", e))?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json("checkpoint", e))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_FORMAT_VERSION as u64 => {}
            Some(v) => return Err(Error::Data(format!("checkpoint format {v} is not supported"))),
            None => return Err(Error::Data("checkpoint has no format_version".into())),
        }
        let ckpt: Self = serde_json::from_value(value).map_err(|e| Error::json("checkpoint", e))?;
        ckpt.store.check_shapes()?;
        ckpt.optimizer.check_shapes(&ckpt.store)?;
        Ok(ckpt)
    }
}

/// Owns the parameters and optimizer for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub store: ParameterStore,
    pub optimizer: OptimizerState,
    pub step: u64,
    data: TrainingSet,
}

impl Trainer {
    pub fn new(
        dataset: &FewShotDataset,
        num_entities: usize,
        num_relations: usize,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let data = TrainingSet::new(dataset, config.routing_scheme(), config.depth_cap)?;
        let store = ParameterStore::init(Dims::new(num_entities, num_relations, config.dim), config.seed);
        Ok(Self {
            optimizer: OptimizerState::new(&store),
            store,
            step: 0,
            config,
            data,
        })
    }

    pub fn resume(dataset: &FewShotDataset, checkpoint: Checkpoint) -> Result<Self> {
        checkpoint.config.validate()?;
        let data = TrainingSet::new(dataset, checkpoint.config.routing_scheme(), checkpoint.config.depth_cap)?;
        Ok(Self {
            config: checkpoint.config,
            store: checkpoint.store,
            optimizer: checkpoint.optimizer,
            step: checkpoint.step,
            data,
        })
    }

    pub fn data(&self) -> &TrainingSet {
        &self.data
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps as u64
    }

    pub fn step_once(&mut self) -> Result<StepReport> {
        let report = train_step(
            &self.data,
            &mut self.store,
            &mut self.optimizer,
            &self.config,
            self.step,
        )?;
        self.step += 1;
        Ok(report)
    }

    /// Steps until `config.steps`, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepReport) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let report = self.step_once()?;
            on_step(self, &report)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            step: self.step,
            store: self.store.clone(),
            optimizer: self.optimizer.clone(),
        }
    }
}
