//! The JSON run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{Mode, ModelConfig};
use crate::seed::derive;
use crate::train::TrainConfig;

/// One run: data, output location, the single seed and per-stage settings.
/// Unknown keys are rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// vocabulary file; `train` creates `<output>/vocab.json` when absent
    pub tokenizer: Option<PathBuf>,
    /// overrides `model.mode` when set
    pub mode: Option<Mode>,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            output: None,
            tokenizer: None,
            mode: None,
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Resolves derived fields: the mode override and the per-stage seeds,
    /// which are labeled derivations of the single run seed.
    pub fn finalize(&mut self) {
        if let Some(m) = self.mode {
            self.model.mode = m;
        }
        self.mode = Some(self.model.mode);
        self.train.seed = derive(self.seed, "train", &[]);
        self.eval.seed = derive(self.seed, "eval", &[]);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.spec.validate()?;
        if self.eval.beam_width == 0 {
            return Err(Error::Config("eval.beam_width must be at least 1".into()));
        }
        if self
            .train
            .grid
            .rgat_heads
            .iter()
            .any(|&h| h == 0 || self.model.d_model % h != 0)
        {
            return Err(Error::Config(format!(
                "grid heads {:?} must divide d_model {}",
                self.train.grid.rgat_heads, self.model.d_model
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("run config", e))
    }

    /// Writes `config.json` into `dir`, creating it.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"seed": 1, "colour": "red"}"#, "t").is_err());
        assert!(RunConfig::from_json(r#"{"model": {"d_model": 64, "depth": 3}}"#, "t").is_err());
        let c = RunConfig::from_json(r#"{"seed": 4, "model": {"d_model": 64}}"#, "t").unwrap();
        assert_eq!(c.model.d_model, 64);
        assert_eq!(c.model.encoder_layers, 6);
    }

    #[test]
    fn finalize_applies_mode_and_seeds() {
        let mut c = RunConfig {
            mode: Some(Mode::Plain),
            seed: 9,
            ..RunConfig::default()
        };
        c.finalize();
        assert_eq!(c.model.mode, Mode::Plain);
        assert_eq!(c.train.seed, derive(9, "train", &[]));
        let text = c.to_json().unwrap();
        assert_eq!(RunConfig::from_json(&text, "t").unwrap(), c);
    }
}
