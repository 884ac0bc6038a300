//! Run configuration: one TOML file with a section per module.
//!
//! Relative paths are resolved against the directory holding the file.
//! Encoder weights may instead come from the directory named by
//! `FEATDENOISE_WEIGHTS_DIR`, where `<VARIANT>.safetensors` is looked up.

use std::path::{Path, PathBuf};

use featdenoise::backbone::Variant;
use featdenoise::model::DenoiserConfig;
use featdenoise::noise::NoiseSpec;
use featdenoise::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const WEIGHTS_DIR_ENV: &str = "FEATDENOISE_WEIGHTS_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub variant: Option<Variant>,
    pub weight_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Training images: a directory or a manifest file.
    pub train: Option<PathBuf>,
    /// Skip unreadable images instead of failing.
    #[serde(default)]
    pub lenient: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseSection {
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    featdenoise::analyze::DEFAULT_SWEEP_SEEDS.to_vec()
}

fn default_embed_dims() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparationSection {
    pub noise: NoiseSpec,
    pub draws: usize,
    #[serde(default = "default_embed_dims")]
    pub embed_dims: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    #[serde(default)]
    pub images: Vec<PathBuf>,
    #[serde(default)]
    pub noise: Vec<NoiseSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Encoders to compare; the `[encoder]` section when empty.
    #[serde(default)]
    pub encoders: Vec<EncoderSection>,
    pub separation: Option<SeparationSection>,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    pub checkpoint: Option<PathBuf>,
    /// Score the noisy inputs themselves instead of a checkpoint.
    #[serde(default)]
    pub passthrough: bool,
    #[serde(default)]
    pub datasets: Vec<PathBuf>,
    #[serde(default)]
    pub noise: Vec<NoiseSpec>,
    #[serde(default = "default_true")]
    pub lenient: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
    pub encoder: Option<EncoderSection>,
    pub model: Option<DenoiserConfig>,
    pub train: Option<TrainConfig>,
    pub data: Option<DataSection>,
    pub denoise: Option<DenoiseSection>,
    pub analyze: Option<AnalyzeSection>,
    pub benchmark: Option<BenchmarkSection>,
}

/// A parsed configuration together with the directory its paths are
/// relative to.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base: PathBuf,
}

fn invalid(field: &str, message: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("`{field}`: {message}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Validation(e.to_string()))?;
        // The top-level seed drives everything; a training seed may only
        // repeat it (as snapshots do).
        let top = table.get("seed").and_then(|v| v.as_integer()).unwrap_or(0);
        if let Some(train) = table.get("train").and_then(|t| t.as_table()) {
            if train.get("seed").is_some_and(|v| v.as_integer() != Some(top)) {
                return Err(invalid("train.seed", "must equal the top-level `seed`; set that one instead"));
            }
        }
        // With F5 enabled, the default widths gain the extra level.
        if let Some(model) = table.get_mut("model").and_then(|t| t.as_table_mut()) {
            let f5 = model.get("use_f5").and_then(|v| v.as_bool()).unwrap_or(false);
            if f5 && !model.contains_key("decoder_widths") {
                let widths = DenoiserConfig::default_widths(true)
                    .into_iter()
                    .map(|w| toml::Value::Integer(w as i64))
                    .collect();
                model.insert("decoder_widths".into(), toml::Value::Array(widths));
            }
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Validation(e.to_string()))?;
        if let Some(train) = &mut cfg.train {
            train.seed = cfg.seed;
        }
        Ok(cfg)
    }

    /// Config snapshot written next to results: everything that determines
    /// them, without the output location.
    pub fn snapshot(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        toml::to_string(&c).expect("configuration serializes")
    }
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let config = RunConfig::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedConfig { config, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Resolves an input path and checks that it exists.
    pub fn existing(&self, field: &str, p: &Path) -> Result<PathBuf, CliError> {
        let r = self.resolve(p);
        if !r.exists() {
            return Err(invalid(field, format!("{} does not exist", r.display())));
        }
        Ok(r)
    }

    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        let out = self
            .config
            .out
            .as_ref()
            .ok_or_else(|| invalid("out", "required (set it in the config or pass --out)"))?;
        Ok(self.resolve(out))
    }

    /// Weight file of an encoder section; `variant` fills in when the section
    /// leaves it open.
    pub fn weights(&self, field: &str, section: &EncoderSection, variant: Variant) -> Result<PathBuf, CliError> {
        let env_dir = std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from);
        let path = match (&section.weight_path, &env_dir) {
            (Some(p), _) if p.is_absolute() => p.clone(),
            (Some(p), dir) => {
                let local = self.base.join(p);
                match dir {
                    Some(d) if !local.exists() => d.join(p),
                    _ => local,
                }
            }
            (None, Some(d)) => d.join(format!("{}.safetensors", variant.as_str())),
            (None, None) => {
                return Err(invalid(
                    &format!("{field}.weight_path"),
                    format!("required (or set {WEIGHTS_DIR_ENV} to a directory holding {}.safetensors)", variant.as_str()),
                ))
            }
        };
        if !path.is_file() {
            return Err(invalid(&format!("{field}.weight_path"), format!("{} does not exist", path.display())));
        }
        Ok(path)
    }

    pub fn encoder_section(&self) -> Result<&EncoderSection, CliError> {
        self.config
            .encoder
            .as_ref()
            .ok_or_else(|| invalid("encoder", "section is required for this command"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_and_kinds_are_rejected() {
        let err = RunConfig::parse("sed = 3\n").unwrap_err().to_string();
        assert!(err.contains("sed"), "{err}");
        let err = RunConfig::parse("[train]\nlr = 1.0\n").unwrap_err().to_string();
        assert!(err.contains("lr"), "{err}");
        let err = RunConfig::parse("[analyze]\nnoise = [{ kind = \"pink\", sigma = 1.0 }]\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("expected one of"), "{err}");
        let err = RunConfig::parse("[train]\nseed = 4\n").unwrap_err().to_string();
        assert!(err.contains("train.seed"), "{err}");
    }

    #[test]
    fn seed_propagates_and_f5_widths_default() {
        let cfg = RunConfig::parse("seed = 9\n[train]\niterations = 5\n[model]\nuse_f5 = true\nbackbone_variant = \"rn50x4\"\n")
            .unwrap();
        assert_eq!(cfg.train.as_ref().unwrap().seed, 9);
        let model = cfg.model.as_ref().unwrap();
        assert_eq!(model.decoder_widths.len(), 6);
        assert_eq!(model.backbone_variant, Variant::Rn50x4);
        let again = RunConfig::parse(&cfg.snapshot()).unwrap();
        assert_eq!(again, cfg);
    }
}
