//! Xavier-normal initialization with depth-dependent gains.
//!
//! Every sub-layer matrix is drawn from `N(0, gain²·2/(fan_in+fan_out))`.
//! The FFN matrices and the self-attention value/output projections get the
//! stream's gain γ; query/key projections, every cross-attention matrix and
//! the vocabulary head keep gain 1. `W_vocab` is drawn `N(0, 1/d)` and the
//! embedding tables `N(0, 1)`.
//!
//! | family          | encoder γ                | decoder γ    |
//! |-----------------|--------------------------|--------------|
//! | encoder-only    | √ln 2N                   | n/a          |
//! | decoder-only    | n/a                      | √ln 2M       |
//! | encoder-decoder | √(⅓·ln 3M·ln 2N)         | √ln 3M       |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamRole;
use crate::model::{Family, ModelConfig, ParamSlot, Stream, TransformerModel};
use crate::rng::Rng;

/// Gains for the two streams; `None` where the family has no such stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaPair {
    pub encoder: Option<f64>,
    pub decoder: Option<f64>,
}

pub fn gamma_for(family: Family, n: usize, m: usize) -> Result<GammaPair> {
    let ln = |k: usize| (k as f64).ln();
    match family {
        Family::EncoderOnly if n >= 1 && m == 0 => Ok(GammaPair {
            encoder: Some(ln(2 * n).sqrt()),
            decoder: None,
        }),
        Family::DecoderOnly if m >= 1 && n == 0 => Ok(GammaPair {
            encoder: None,
            decoder: Some(ln(2 * m).sqrt()),
        }),
        Family::EncoderDecoder if n >= 1 && m >= 1 => Ok(GammaPair {
            encoder: Some((ln(3 * m) * ln(2 * n) / 3.0).sqrt()),
            decoder: Some(ln(3 * m).sqrt()),
        }),
        _ => Err(Error::Config(format!("invalid layer counts N = {n}, M = {m} for {family}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Plain Xavier-normal (all gains 1).
    Unit,
    /// Gains from [`gamma_for`].
    Magneto,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::Unit => "unit",
            InitMode::Magneto => "magneto",
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unit" | "xavier" | "standard" => Ok(InitMode::Unit),
            "magneto" | "gamma" | "derived" => Ok(InitMode::Magneto),
            _ => Err(Error::Config(format!("unknown init mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitPlan {
    pub gamma_encoder: f64,
    pub gamma_decoder: f64,
}

impl InitPlan {
    /// Roles that receive the stream gain.
    pub const SCALED: [ParamRole; 4] = [ParamRole::FfnIn, ParamRole::FfnOut, ParamRole::Value, ParamRole::Output];
    /// Sub-layer and head roles that always keep gain 1.
    pub const UNSCALED: [ParamRole; 7] = [
        ParamRole::Query,
        ParamRole::Key,
        ParamRole::CrossQuery,
        ParamRole::CrossKey,
        ParamRole::CrossValue,
        ParamRole::CrossOutput,
        ParamRole::Vocab,
    ];

    pub fn unit() -> Self {
        Self::uniform(1.0)
    }

    pub fn uniform(gamma: f64) -> Self {
        Self {
            gamma_encoder: gamma,
            gamma_decoder: gamma,
        }
    }

    pub fn magneto(config: &ModelConfig) -> Result<Self> {
        let g = gamma_for(config.family, config.n_encoder_layers, config.n_decoder_layers)?;
        Ok(Self {
            gamma_encoder: g.encoder.unwrap_or(1.0),
            gamma_decoder: g.decoder.unwrap_or(1.0),
        })
    }

    pub fn for_mode(mode: InitMode, config: &ModelConfig) -> Result<Self> {
        match mode {
            InitMode::Unit => Ok(Self::unit()),
            InitMode::Magneto => Self::magneto(config),
        }
    }

    /// Gain applied to the matrix in `slot`.
    pub fn gain(&self, slot: ParamSlot) -> f64 {
        if !Self::SCALED.contains(&slot.role) {
            return 1.0;
        }
        match slot.stream {
            Some(Stream::Encoder) => self.gamma_encoder,
            Some(Stream::Decoder) => self.gamma_decoder,
            None => 1.0,
        }
    }
}

pub fn xavier_std(fan_in: usize, fan_out: usize, gain: f64) -> f64 {
    gain * (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Xavier-normal draw for a `[fan_out × fan_in]` matrix.
pub fn xavier_normal(fan_out: usize, fan_in: usize, gain: f64, rng: &mut Rng) -> Vec<f64> {
    let std = xavier_std(fan_in, fan_out, gain);
    (0..fan_in * fan_out).map(|_| rng.normal() * std).collect()
}

/// Redraws every parameter of `model` in build order.
pub fn apply(model: &mut TransformerModel, plan: &InitPlan, rng: &mut Rng) {
    let d = model.config().d;
    for (slot, t) in model.params_mut() {
        let values = match slot.role {
            ParamRole::TokenEmbedding | ParamRole::PositionEmbedding => rng.normal_vec(t.len(), 1.0),
            ParamRole::Vocab => rng.normal_vec(t.len(), 1.0 / (d as f64).sqrt()),
            _ => {
                let (fan_out, fan_in) = (t.shape()[0], t.shape()[1]);
                xavier_normal(fan_out, fan_in, plan.gain(slot), rng)
            }
        };
        t.data_mut().copy_from_slice(&values);
        t.zero_grad();
    }
}

/// Builds and initializes a model, seeding from `config.seed`.
pub fn initialized(config: &ModelConfig, mode: InitMode) -> Result<TransformerModel> {
    let mut model = TransformerModel::build(config)?;
    let plan = InitPlan::for_mode(mode, config)?;
    apply(&mut model, &plan, &mut Rng::new(config.seed));
    Ok(model)
}
