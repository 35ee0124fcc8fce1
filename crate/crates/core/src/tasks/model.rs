use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{builtin_tasks, TaskSpec};
use crate::encoders::{EncoderConfig, Encoders};
use crate::error::{Error, Result};
use crate::interface::{init_interface, InterfaceConfig};
use crate::tensor::ParamStore;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub interface: InterfaceConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let i = &self.interface;
        if self.encoder.d != i.d {
            return Err(Error::invalid(format!(
                "encoder width {} differs from interface width {}",
                self.encoder.d, i.d
            )));
        }
        if i.d == 0 || i.heads == 0 || !i.d.is_multiple_of(i.heads) {
            return Err(Error::invalid(format!(
                "width {} is not divisible into {} heads",
                i.d, i.heads
            )));
        }
        if i.n_obj == 0 {
            return Err(Error::invalid("n_obj must be positive"));
        }
        if !(i.init_tau > 0.0 && i.init_tau.is_finite()) {
            return Err(Error::invalid("init_tau must be positive"));
        }
        Ok(())
    }
}

/// Encoders, interface parameters and the task registry.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoders: Encoders,
    pub params: ParamStore,
    tasks: BTreeMap<String, TaskSpec>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoders = Encoders::new(config.encoder.clone());
        let mut params = ParamStore::new();
        encoders.init_params(&mut params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_interface(&config.interface, &mut params, &mut rng);
        Ok(Self {
            config,
            encoders,
            params,
            tasks: builtin_tasks()
                .into_iter()
                .map(|t| (t.name.clone(), t))
                .collect(),
        })
    }

    /// A model whose parameters are replaced by `params`. Every expected
    /// tensor must be present with its expected shape.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        for (name, t) in m.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                let what = match name.strip_prefix("queries.") {
                    Some(kind) => format!("query stream `{kind}` (parameter `{name}`)"),
                    None => format!("parameter `{name}`"),
                };
                return Err(Error::ParamShape {
                    what,
                    found: got.shape().to_vec(),
                    expected: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = params.names().find(|n| m.params.get(n).is_err()) {
            return Err(Error::invalid(format!("unexpected parameter `{extra}`")));
        }
        m.params = params;
        Ok(m)
    }

    pub fn task(&self, name: &str) -> Result<&TaskSpec> {
        self.tasks
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no task `{name}`")))
    }

    /// Replaces or adds a task definition.
    pub fn set_task(&mut self, task: TaskSpec) -> Result<()> {
        task.validate()?;
        self.tasks.insert(task.name.clone(), task);
        Ok(())
    }

    pub fn with_encoders(mut self, encoders: Encoders) -> Self {
        self.encoders = encoders;
        self
    }
}
