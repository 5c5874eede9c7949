//! Tape gradients against central finite differences.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::init::{self, InitMode, InitPlan};
use crate::model::{Family, ModelConfig, ModelInput, ParamSlot, Sequence, TransformerModel};
use crate::rng::Rng;
use crate::tensor::Tape;

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;
const MAX_PARAMS: usize = 5000;
const STEP: f64 = 1e-5;
/// Denominator floor: gradients much smaller than this are compared in
/// absolute terms, where central differences carry ~1e-10 of rounding noise.
const REL_FLOOR: f64 = 1e-3;
const INPUT_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter and flat index where `max_rel_err` occurs.
    #[serde(skip)]
    pub worst: Option<(ParamSlot, usize)>,
    pub n_params: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn loss(model: &TransformerModel, input: &ModelInput, labels: &[usize], tape: &mut Tape) -> Result<crate::tensor::Var> {
    let logits = model.forward(tape, input)?;
    tape.cross_entropy(logits, labels)
}

fn loss_value(model: &TransformerModel, input: &ModelInput, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = loss(model, input, labels, &mut tape)?;
    Ok(tape.value(l).data()[0])
}

/// Cross-entropy over every output position of `input`, checked for every
/// parameter of `model`. Parameters are restored bit-exactly afterwards.
pub fn grad_check(model: &mut TransformerModel, input: &ModelInput, labels: &[usize], tolerance: f64) -> Result<GradCheckReport> {
    let n_params = model.param_count();
    if n_params > MAX_PARAMS {
        return Err(Error::Config(format!(
            "grad_check needs at most {MAX_PARAMS} parameters, model has {n_params}"
        )));
    }
    let mut tape = Tape::new();
    let l = loss(model, input, labels, &mut tape)?;
    tape.backward(l)?;
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|(_, p)| tape.grad_of(p).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let mut max_rel_err = 0.0;
    let mut worst = None;
    for (k, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = model.params()[k].1.data()[i];
            model.params_mut()[k].1.data_mut()[i] = orig + STEP;
            let up = loss_value(model, input, labels)?;
            model.params_mut()[k].1.data_mut()[i] = orig - STEP;
            let down = loss_value(model, input, labels)?;
            model.params_mut()[k].1.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if err > max_rel_err || worst.is_none() {
                max_rel_err = err;
                worst = Some((model.params()[k].0, i));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        n_params,
        tolerance,
        passed: max_rel_err < tolerance,
    })
}

/// Builds and initializes `config` with `seed`, then checks it on random
/// tokens filling every position.
pub fn grad_check_random(config: &ModelConfig, init_mode: InitMode, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let config = config.clone().with_seed(seed);
    let mut model = TransformerModel::build(&config)?;
    init::apply(&mut model, &InitPlan::for_mode(init_mode, &config)?, &mut Rng::new(seed));
    let mut rng = Rng::with_stream(seed, INPUT_STREAM);
    let t = config.max_positions;
    let tokens = |rng: &mut Rng| -> Vec<usize> { (0..t).map(|_| rng.index(config.vocab_size)).collect() };
    let input = match config.family {
        Family::EncoderDecoder => ModelInput::Pair {
            source: Sequence::Tokens(tokens(&mut rng)),
            target: Sequence::Tokens(tokens(&mut rng)),
        },
        _ => ModelInput::Single(Sequence::Tokens(tokens(&mut rng))),
    };
    let labels = tokens(&mut rng);
    grad_check(&mut model, &input, &labels, tolerance)
}
