use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spikedrive::model::{default_stages, ModelConfig};
use spikedrive::profiler::{EnergyConstants, VsaAccounting};
use spikedrive::train::{DatasetKind, Geometry, LrSchedule, Loss, TrainConfig};
use spikedrive::{LifParams, SdsaForm};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelSection,
    pub train: TrainSection,
    pub profile: ProfileSection,
    pub io: IoSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub timesteps: usize,
    pub blocks: usize,
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Empty means `[D/8, D/4, D/2, D]`.
    pub sps_stage_channels: Vec<usize>,
    /// `v1`, `v2` or `per_channel`.
    pub attention: String,
    pub u_th: f64,
    pub beta: f64,
    pub v_reset: f64,
    pub surrogate_width: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::small(1, 64, 4);
        Self {
            timesteps: c.timesteps,
            blocks: c.blocks,
            channels: c.channels,
            heads: c.heads,
            mlp_ratio: c.mlp_ratio,
            in_channels: c.in_channels,
            height: c.height,
            width: c.width,
            num_classes: c.num_classes,
            sps_stage_channels: Vec::new(),
            attention: c.attention.name().into(),
            u_th: c.lif.u_th,
            beta: c.lif.beta,
            v_reset: c.lif.v_reset,
            surrogate_width: c.lif.surrogate_width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `constant` or `cosine`.
    pub lr_schedule: String,
    pub seed: u64,
    /// Only `cross_entropy`.
    pub loss: String,
    /// `stripes`, `blobs` or `xor-patch`.
    pub dataset: String,
    pub n_per_class: usize,
    pub data_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_schedule: t.lr_schedule.name().into(),
            seed: t.seed,
            loss: "cross_entropy".into(),
            dataset: "stripes".into(),
            n_per_class: 200,
            data_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub e_mac: f64,
    pub e_ac: f64,
    /// Samples drawn from the training dataset for firing-rate tracing.
    pub samples: usize,
    /// `reported` or `literal`.
    pub vsa_accounting: String,
}

impl Default for ProfileSection {
    fn default() -> Self {
        let c = EnergyConstants::default();
        Self { e_mac: c.e_mac, e_ac: c.e_ac, samples: 16, vsa_accounting: VsaAccounting::default().name().into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub out: PathBuf,
    pub checkpoint_name: String,
    pub log_name: String,
}

impl Default for IoSection {
    fn default() -> Self {
        Self { out: PathBuf::from("out"), checkpoint_name: "model.sdtf".into(), log_name: "train_log.csv".into() }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| {
            let line = e.span().map(|s| format!(" line {}", line_of(text, s.start))).unwrap_or_default();
            CliError::Config(format!("{origin}:{line}: {}", e.message()))
        })?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let line = e.inner().span().map(|s| format!(" line {}", line_of(text, s.start))).unwrap_or_default();
            CliError::Config(format!("{origin}:{line}: key `{}`: {}", e.path(), e.inner().message()))
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let m = &self.model;
        let attention = SdsaForm::parse(&m.attention)
            .ok_or_else(|| bad("model.attention", &m.attention, "v1, v2, per_channel"))?;
        let sps_stage_channels = match m.sps_stage_channels.len() {
            0 => default_stages(m.channels),
            4 => [m.sps_stage_channels[0], m.sps_stage_channels[1], m.sps_stage_channels[2], m.sps_stage_channels[3]],
            n => return Err(CliError::Config(format!("key `model.sps_stage_channels`: expected 4 entries, got {n}"))),
        };
        let config = ModelConfig {
            timesteps: m.timesteps,
            blocks: m.blocks,
            channels: m.channels,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
            in_channels: m.in_channels,
            height: m.height,
            width: m.width,
            num_classes: m.num_classes,
            sps_stage_channels,
            attention,
            lif: LifParams { u_th: m.u_th, beta: m.beta, v_reset: m.v_reset, surrogate_width: m.surrogate_width },
        };
        config.validate().map_err(|e| CliError::Config(format!("[model]: {e}")))?;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let lr_schedule =
            LrSchedule::parse(&t.lr_schedule).ok_or_else(|| bad("train.lr_schedule", &t.lr_schedule, "constant, cosine"))?;
        if t.loss != "cross_entropy" {
            return Err(bad("train.loss", &t.loss, "cross_entropy"));
        }
        let config = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_schedule,
            seed: t.seed,
            loss: Loss::CrossEntropy,
        };
        config.validate().map_err(|e| CliError::Config(format!("[train]: {e}")))?;
        Ok(config)
    }

    pub fn dataset_kind(&self) -> Result<DatasetKind, CliError> {
        DatasetKind::parse(&self.train.dataset)
            .ok_or_else(|| bad("train.dataset", &self.train.dataset, "stripes, blobs, xor-patch"))
    }

    pub fn geometry(&self) -> Geometry {
        Geometry { channels: self.model.in_channels, height: self.model.height, width: self.model.width }
    }

    pub fn constants(&self) -> Result<EnergyConstants, CliError> {
        EnergyConstants::new(self.profile.e_mac, self.profile.e_ac).map_err(|e| CliError::Config(format!("[profile]: {e}")))
    }

    pub fn accounting(&self) -> Result<VsaAccounting, CliError> {
        VsaAccounting::parse(&self.profile.vsa_accounting)
            .ok_or_else(|| bad("profile.vsa_accounting", &self.profile.vsa_accounting, "reported, literal"))
    }
}

fn bad(key: &str, value: &str, allowed: &str) -> CliError {
    CliError::Config(format!("key `{key}`: unknown value `{value}` (expected one of: {allowed})"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let d = ConfigFile::default();
        assert_eq!(ConfigFile::parse(&d.to_toml(), "defaults").unwrap(), d);
    }

    #[test]
    fn unknown_key_names_path_and_line() {
        let err = ConfigFile::parse("[model]\nblocks = 2\nchanels = 8\n", "c.toml").unwrap_err().to_string();
        assert!(err.contains("chanels"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn wrong_type_names_key() {
        let err = ConfigFile::parse("[train]\nepochs = \"many\"\n", "c.toml").unwrap_err().to_string();
        assert!(err.contains("train.epochs"), "{err}");
    }

    #[test]
    fn default_model_is_valid() {
        let c = ConfigFile::default().model_config().unwrap();
        assert_eq!((c.blocks, c.channels, c.num_classes), (1, 64, 4));
    }
}
