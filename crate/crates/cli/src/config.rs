use std::path::Path;

use anyhow::{bail, Context, Result};
use meae_core::losses::LossConfig;
use meae_core::model::MeaeConfig;
use meae_core::synth::SceneConfig;
use meae_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a command may need, merged from defaults, a TOML file and flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: MeaeConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
}

impl RunConfig {
    /// Reads `path` when given. A bare scene file (no sections) is accepted as the `[scene]` table.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
        match toml::from_str::<RunConfig>(&text) {
            Ok(cfg) => Ok(cfg),
            Err(run_err) => match toml::from_str::<SceneConfig>(&text) {
                Ok(scene) => Ok(Self { scene, ..Self::default() }),
                Err(_) => Err(anyhow::anyhow!("invalid config file {}: {run_err}", path.display())),
            },
        }
    }

    /// One seed drives initialisation, shuffling and scene generation.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.scene.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("invalid [model] config")?;
        self.loss.validate().context("invalid [loss] config")?;
        self.train.validate().context("invalid [train] config")?;
        self.scene.validate().context("invalid [scene] config")?;
        Ok(())
    }

    /// The effective configuration as written next to every output.
    pub fn to_toml(&self) -> String {
        let mut echo = self.clone();
        echo.train.checkpoint_dir = None;
        toml::to_string(&echo).expect("run config serializes")
    }
}

pub fn check_jobs(jobs: usize) -> Result<()> {
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    Ok(())
}
