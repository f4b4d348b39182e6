use crate::error::{Error, Result};
use crate::neuron::LifParams;
use crate::sdsa::SdsaForm;

/// Architecture of a spike-driven transformer `L-D`: `blocks` encoder blocks of width `channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub timesteps: usize,
    pub blocks: usize,
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Output channels of the four patch-splitting convolutions; the last equals `channels`.
    pub sps_stage_channels: [usize; 4],
    pub attention: SdsaForm,
    pub lif: LifParams,
}

/// Number of scalar fields in the serialized form.
pub const CONFIG_FIELDS: usize = 18;

impl ModelConfig {
    /// 224×224 RGB, 1000 classes, T = 4, 8 heads.
    pub fn imagenet(blocks: usize, channels: usize) -> Self {
        Self {
            timesteps: 4,
            blocks,
            channels,
            heads: 8,
            mlp_ratio: 4.0,
            in_channels: 3,
            height: 224,
            width: 224,
            num_classes: 1000,
            sps_stage_channels: default_stages(channels),
            attention: SdsaForm::V1,
            lif: LifParams::default(),
        }
    }

    /// Desk-scale model on 32×32 inputs.
    pub fn small(blocks: usize, channels: usize, num_classes: usize) -> Self {
        Self {
            height: 32,
            width: 32,
            num_classes,
            heads: heads_for(channels),
            ..Self::imagenet(blocks, channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("timesteps", self.timesteps),
            ("blocks", self.blocks),
            ("channels", self.channels),
            ("heads", self.heads),
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidParam(format!("{name} must be positive")));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::InvalidParam(format!(
                "{} heads do not divide {} channels",
                self.heads, self.channels
            )));
        }
        if self.attention == SdsaForm::PerChannel && self.heads != self.channels {
            return Err(Error::InvalidParam(
                "per-channel attention requires heads == channels".into(),
            ));
        }
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::Geometry(format!(
                "input {}x{} must be a positive multiple of 16 on both sides",
                self.height, self.width
            )));
        }
        if !(self.mlp_ratio > 0.0) || !self.mlp_ratio.is_finite() || self.hidden() == 0 {
            return Err(Error::InvalidParam(format!("mlp_ratio {} is not usable", self.mlp_ratio)));
        }
        if self.sps_stage_channels.contains(&0) {
            return Err(Error::InvalidParam("SPS stage channels must be positive".into()));
        }
        if self.sps_stage_channels[3] != self.channels {
            return Err(Error::InvalidParam(format!(
                "last SPS stage has {} channels, model has {}",
                self.sps_stage_channels[3], self.channels
            )));
        }
        self.lif.validate()
    }

    /// Token count after four 2×2 reductions.
    pub fn tokens(&self) -> usize {
        self.grid().0 * self.grid().1
    }

    /// Token grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / 16, self.width / 16)
    }

    pub fn hidden(&self) -> usize {
        (self.mlp_ratio * self.channels as f64).round() as usize
    }

    /// Scalar fields in declared order, as stored in checkpoints.
    pub fn to_fields(&self) -> [f64; CONFIG_FIELDS] {
        let s = self.sps_stage_channels;
        [
            self.timesteps as f64,
            self.blocks as f64,
            self.channels as f64,
            self.heads as f64,
            self.mlp_ratio,
            self.in_channels as f64,
            self.height as f64,
            self.width as f64,
            self.num_classes as f64,
            s[0] as f64,
            s[1] as f64,
            s[2] as f64,
            s[3] as f64,
            attention_code(self.attention),
            self.lif.u_th,
            self.lif.beta,
            self.lif.v_reset,
            self.lif.surrogate_width,
        ]
    }

    pub fn from_fields(f: &[f64]) -> Result<Self> {
        if f.len() != CONFIG_FIELDS {
            return Err(Error::Checkpoint(format!(
                "config record has {} fields, expected {CONFIG_FIELDS}",
                f.len()
            )));
        }
        let count = |i: usize| -> Result<usize> {
            let v = f[i];
            if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
                return Err(Error::Checkpoint(format!("config field {i} is not a count: {v}")));
            }
            Ok(v as usize)
        };
        let attention = match f[13] as i64 {
            0 => SdsaForm::V1,
            1 => SdsaForm::V2,
            2 => SdsaForm::PerChannel,
            other => return Err(Error::Checkpoint(format!("unknown attention code {other}"))),
        };
        let config = Self {
            timesteps: count(0)?,
            blocks: count(1)?,
            channels: count(2)?,
            heads: count(3)?,
            mlp_ratio: f[4],
            in_channels: count(5)?,
            height: count(6)?,
            width: count(7)?,
            num_classes: count(8)?,
            sps_stage_channels: [count(9)?, count(10)?, count(11)?, count(12)?],
            attention,
            lif: LifParams { u_th: f[14], beta: f[15], v_reset: f[16], surrogate_width: f[17] },
        };
        config.validate()?;
        Ok(config)
    }

    /// True when both configs build models with identical parameter tensors.
    pub fn same_architecture(&self, other: &Self) -> bool {
        let strip = |c: &Self| Self { timesteps: 1, lif: LifParams::default(), ..c.clone() };
        strip(self) == strip(other)
    }
}

/// `[D/8, D/4, D/2, D]`, each at least 1.
pub fn default_stages(channels: usize) -> [usize; 4] {
    [(channels / 8).max(1), (channels / 4).max(1), (channels / 2).max(1), channels]
}

fn heads_for(channels: usize) -> usize {
    if channels % 8 == 0 {
        8
    } else {
        1
    }
}

fn attention_code(form: SdsaForm) -> f64 {
    match form {
        SdsaForm::V1 => 0.0,
        SdsaForm::V2 => 1.0,
        SdsaForm::PerChannel => 2.0,
    }
}
