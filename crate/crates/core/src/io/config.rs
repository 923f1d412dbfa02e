//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detail::DecoderArch;
use crate::error::{Error, Result};
use crate::model::ToyModelSpec;
use crate::pipeline::synth::DetailFixtureSpec;
use crate::pipeline::FitConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub image_size: usize,
    pub uv_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub fit: FitConfig,
    pub decoder: DecoderArch,
    pub toy_model: ToyModelSpec,
    pub fixture: DetailFixtureSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            uv_size: 256,
            seed: 0,
            out_dir: PathBuf::from("out"),
            fit: FitConfig::default(),
            decoder: DecoderArch::Linear,
            toy_model: ToyModelSpec::default(),
            fixture: DetailFixtureSpec::default(),
        }
    }
}

impl RunConfig {
    /// Parses JSON when the extension is `.json`, TOML otherwise.
    pub fn from_str_with_format(text: &str, json: bool) -> Result<Self> {
        let cfg: RunConfig = if json {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::from_str_with_format(&text, json)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.uv_size == 0 {
            return Err(Error::Config("image and UV sizes must be positive".into()));
        }
        self.fit.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.image_size, c.uv_size), (224, 256));
        c.validate().unwrap();
    }

    #[test]
    fn partial_files_merge_over_defaults() {
        let c =
            RunConfig::from_str_with_format("image_size = 64\n[fit.weights]\npho = 3.0\n", false)
                .unwrap();
        assert_eq!(c.image_size, 64);
        assert_eq!(c.uv_size, 256);
        assert_eq!(c.fit.weights.pho, 3.0);
        assert_eq!(c.fit.weights.lmk, RunConfig::default().fit.weights.lmk);
        let j = RunConfig::from_str_with_format(
            r#"{"seed": 5, "decoder": {"type": "conv", "base": 4, "channels": [8]}}"#,
            true,
        )
        .unwrap();
        assert_eq!(j.seed, 5);
        assert!(matches!(j.decoder, DecoderArch::Conv { base: 4, .. }));
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.fit.weights.sym = 0.125;
        c.seed = 3;
        let back = RunConfig::from_str_with_format(&c.to_toml().unwrap(), false).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_str_with_format("uv_size = 0\n", false).is_err());
        assert!(RunConfig::from_str_with_format("[fit.weights]\npho = -1.0\n", false).is_err());
        assert!(RunConfig::from_str_with_format("bogus = [\n", false).is_err());
    }
}
