//! One-SGD-step update probe `ΔF = |F_after[y] − F_before[y]|`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{self, InitMode, InitPlan};
use crate::layers::NormVariant;
use crate::model::{Family, ModelConfig, ModelInput, Sequence, TransformerModel};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Stream for probe inputs and labels. Independent of the model stream, so
/// the same seed presents the same `(x, y)` at every depth.
const PROBE_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `−log softmax(F)[y]`
    #[default]
    CrossEntropy,
    /// `−F[y]`
    Linear,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross-entropy",
            LossKind::Linear => "linear",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "linear" => Ok(LossKind::Linear),
            _ => Err(Error::Config(format!("unknown loss kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateProbeConfig {
    /// Architecture; `model.seed` is the base seed, trial `i` uses `seed + i`.
    pub model: ModelConfig,
    pub init: InitMode,
    pub eta: f64,
    pub n_seeds: usize,
    pub loss: LossKind,
}

impl UpdateProbeConfig {
    pub fn new(model: ModelConfig, init: InitMode, eta: f64) -> Self {
        Self {
            model,
            init,
            eta,
            n_seeds: 5,
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn with_seeds(mut self, n_seeds: usize) -> Self {
        self.n_seeds = n_seeds;
        self
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::Config(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.n_seeds < 3 {
            return Err(Error::Config(format!("n_seeds must be >= 3, got {}", self.n_seeds)));
        }
        Ok(())
    }

    /// Total sub-layer count of the probed model.
    pub fn sublayers(&self) -> usize {
        self.model.encoder_sublayers() + self.model.decoder_sublayers()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpdateMeasurement {
    pub seed: u64,
    #[serde(rename = "L")]
    pub sublayers: usize,
    pub eta: f64,
    pub variant: NormVariant,
    pub init: InitMode,
    /// Gain of the probed stack (decoder gain for decoder-only models).
    pub gamma: f64,
    pub loss: LossKind,
    /// `None` exactly when `diverged`.
    pub delta_f: Option<f64>,
    pub diverged: bool,
}

fn probe_loss(tape: &mut Tape, logits: Var, label: usize, kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::CrossEntropy => tape.cross_entropy(logits, &[label]),
        LossKind::Linear => {
            let picked = tape.pick(logits, label)?;
            tape.scale(picked, -1.0)
        }
    }
}

fn one_step(model: &mut TransformerModel, input: &ModelInput, label: usize, eta: f64, kind: LossKind) -> Result<f64> {
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, input)?;
    let before = tape.value(logits).data()[label];
    let loss = probe_loss(&mut tape, logits, label, kind)?;
    tape.backward(loss)?;
    model.zero_grads();
    model.accumulate_grads(&tape)?;
    model.sgd_step(eta)?;
    let after = model.logits(input)?.data()[label];
    let delta = (after - before).abs();
    if !delta.is_finite() {
        return Err(Error::NonFinite { op: "measure_update" });
    }
    Ok(delta)
}

fn probe_vector(rng: &mut Rng, d: usize) -> Sequence {
    Sequence::Vectors(Tensor::new(&[1, d], rng.normal_vec(d, 1.0)).expect("1 x d probe"))
}

/// One trial: initializes the model from `seed`, draws `x ~ N(0, I)` at a
/// single position and a uniform label, takes one SGD step and reports the
/// change of the labeled logit.
pub fn measure_update(config: &UpdateProbeConfig, seed: u64) -> Result<UpdateMeasurement> {
    config.validate()?;
    let model_config = config.model.clone().with_seed(seed);
    let plan = InitPlan::for_mode(config.init, &model_config)?;
    let mut model = TransformerModel::build(&model_config)?;
    init::apply(&mut model, &plan, &mut Rng::new(seed));

    let mut probe = Rng::with_stream(seed, PROBE_STREAM);
    let d = model_config.d;
    let input = match model_config.family {
        Family::EncoderDecoder => {
            let source = probe_vector(&mut probe, d);
            let target = probe_vector(&mut probe, d);
            ModelInput::Pair { source, target }
        }
        _ => ModelInput::Single(probe_vector(&mut probe, d)),
    };
    let label = probe.index(model_config.vocab_size);

    let delta_f = match one_step(&mut model, &input, label, config.eta, config.loss) {
        Ok(v) => Some(v),
        Err(e) if e.is_divergence() => None,
        Err(e) => return Err(e),
    };
    let gamma = match model_config.family {
        Family::DecoderOnly => plan.gamma_decoder,
        _ => plan.gamma_encoder,
    };
    Ok(UpdateMeasurement {
        seed,
        sublayers: config.sublayers(),
        eta: config.eta,
        variant: model_config.variant,
        init: config.init,
        gamma,
        loss: config.loss,
        delta_f,
        diverged: delta_f.is_none(),
    })
}

/// Trials `seed, seed + 1, …` for `n_seeds` seeds starting at `model.seed`.
pub fn measure_trials(config: &UpdateProbeConfig) -> Result<Vec<UpdateMeasurement>> {
    let base = config.model.seed;
    (0..config.n_seeds as u64).map(|i| measure_update(config, base + i)).collect()
}
