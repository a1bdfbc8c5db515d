//! TOML run configuration. Every section is optional and falls back to the
//! library defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use pddf::compose::ComposeParams;
use pddf::extract::{PointCloudConfig, VStarConfig};
use pddf::renderer::Camera;
use pddf::sampler::{DatasetSpec, TypeCounts};
use pddf::trainer::TrainConfig;
use pddf::validators::ValidatorConfig;
use pddf::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetSpec,
    /// Per-type counts of the held-out set drawn for evaluation.
    pub held_out: Option<TypeCounts>,
    pub train: TrainConfig,
    pub camera: Camera,
    pub compose: ComposeParams,
    pub vstar: VStarConfig,
    pub pointcloud: PointCloudConfig,
    pub validate: ValidatorConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.train.model.seed = seed;
        self.vstar.seed = seed;
        self.pointcloud.seed = seed;
        self.validate.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.compose.validate()?;
        self.vstar.validate()?;
        self.pointcloud.validate()?;
        Ok(())
    }

    /// A tenth of the training counts unless given, with a seed disjoint
    /// from the training set.
    pub fn held_out_spec(&self) -> DatasetSpec {
        let counts = self.held_out.unwrap_or_else(|| {
            let c = &self.dataset.counts;
            let tenth = |n: usize| n.div_ceil(10);
            TypeCounts::new(tenth(c.u), tenth(c.a), tenth(c.b), tenth(c.s), tenth(c.t), tenth(c.o))
        });
        DatasetSpec {
            counts,
            seed: self.dataset.seed ^ 0x5eed_0f_4e1d,
            ..self.dataset.clone()
        }
    }
}
