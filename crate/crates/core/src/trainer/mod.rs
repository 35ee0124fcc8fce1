//! Joint multi-task training, evaluation and checkpoints.

mod batch;
mod checkpoint;
mod config;
mod eval;
mod optim;
mod step;

use std::io::Write;

pub use batch::{make_batch, same_image_entry, step_rng, Batch, Sample};
pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, config_hash, load_checkpoint, save_checkpoint,
    Checkpoint,
};
pub use config::{default_task_mix, task_weights, TrainConfig};
pub use eval::{
    central_cell, eval_scenes, eval_targets, evaluate, predict, score_outputs, EvalOutputs,
    EvalTargets, GroundingMetrics, MetricsReport, RetrievalMetrics,
};
pub use optim::{Adam, AdamState};
pub use step::{train_step, StepReport};

use crate::bench::Corpus;
use crate::error::{Error, Result};
use crate::tasks::Model;

/// Splits records into the first `n_train` and the rest. Both halves keep
/// every scene so visual references stay resolvable.
pub fn split_corpus(corpus: &Corpus, n_train: usize) -> (Corpus, Corpus) {
    let n = n_train.min(corpus.records.len());
    let part = |records: &[_]| Corpus {
        scenes: corpus.scenes.clone(),
        captions: corpus.captions.clone(),
        records: records.to_vec(),
    };
    (part(&corpus.records[..n]), part(&corpus.records[n..]))
}

/// Model, optimizer and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let optimizer = Adam::new(config.learning_rate);
        Ok(Self {
            config,
            model,
            optimizer,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        let model = Model::with_params(ck.config.model.clone(), ck.params)?;
        let mut optimizer = Adam::new(ck.config.learning_rate);
        if let Some(st) = ck.optimizer {
            optimizer.state = st;
        }
        Ok(Self {
            config: ck.config,
            model,
            optimizer,
            step: ck.step as usize,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step as u64,
            params: self.model.params.clone(),
            optimizer: Some(self.optimizer.state.clone()),
        }
    }

    /// One batch and one update.
    pub fn train_one(&mut self, corpus: &Corpus) -> Result<StepReport> {
        let batch = make_batch(corpus, &self.config, self.step)?;
        let report = train_step(
            &mut self.model,
            &mut self.optimizer,
            corpus,
            &batch,
            &self.config,
            self.step,
        )?;
        self.step += 1;
        Ok(report)
    }

    /// Trains until `config.steps`, writing one JSON line per step to `log`.
    pub fn run(&mut self, corpus: &Corpus, log: &mut dyn Write) -> Result<Vec<StepReport>> {
        let mut reports = Vec::with_capacity(self.config.steps.saturating_sub(self.step));
        while self.step < self.config.steps {
            let r = self.train_one(corpus)?;
            writeln!(log, "{}", serde_json::to_string(&r)?)?;
            if r.step % 100 == 0 {
                log::info!("step {} {} loss {:.4}", r.step, r.task, r.loss);
            }
            reports.push(r);
        }
        log.flush().map_err(Error::from)?;
        Ok(reports)
    }
}
