//! Toy sequence tasks, a plain SGD loop and the learning-rate sweep.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{par_map, Arm};
use crate::error::{Error, Result};
use crate::init::{self, InitPlan};
use crate::layers::NormVariant;
use crate::model::{ModelConfig, ModelInput, Sequence, TransformerModel};
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

const DATA_STREAM: u64 = 2;

/// Built-in corpus for the character-level task.
pub const CHAR_CORPUS: &str = "it was the best of times, it was the worst of times, \
it was the age of wisdom, it was the age of foolishness, it was the epoch of belief, \
it was the epoch of incredulity, it was the season of light, it was the season of darkness, \
it was the spring of hope, it was the winter of despair, we had everything before us, \
we had nothing before us, we were all going direct to heaven, we were all going direct \
the other way.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Decoder-only `[BOS, a…, SEP, a…]`; loss on the second copy.
    Copy,
    /// Encoder-decoder: source `a…`, target `[BOS, a…]`.
    CopySeq2seq,
    /// Decoder-only next-character prediction on [`CHAR_CORPUS`].
    CharLm,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::CopySeq2seq => "copy-seq2seq",
            Task::CharLm => "char-lm",
        }
    }

    /// Symbols the copy tasks draw from.
    pub const COPY_SYMBOLS: usize = 10;

    pub fn vocab_size(self) -> usize {
        match self {
            Task::Copy | Task::CopySeq2seq => Self::COPY_SYMBOLS + 2,
            Task::CharLm => char_vocab().len(),
        }
    }

    /// Model for this task with `layers` layers per stack (decoder-only tasks
    /// get `2·layers` sub-layers).
    pub fn model_config(self, variant: NormVariant, layers: usize, d: usize, seq_len: usize) -> ModelConfig {
        let base = match self {
            Task::Copy | Task::CharLm => ModelConfig::decoder_only(variant, layers, d),
            Task::CopySeq2seq => ModelConfig::encoder_decoder(variant, layers, layers, d),
        };
        let positions = match self {
            Task::Copy => 2 * seq_len + 1,
            Task::CopySeq2seq | Task::CharLm => seq_len,
        };
        base.with_vocab(self.vocab_size()).with_max_positions(positions.max(1))
    }

    fn example(self, seq_len: usize, rng: &mut Rng) -> Example {
        let k = Self::COPY_SYMBOLS;
        let (bos, sep) = (k, k + 1);
        match self {
            Task::Copy => {
                let a: Vec<usize> = (0..seq_len).map(|_| rng.index(k)).collect();
                let mut seq = vec![bos];
                seq.extend(&a);
                seq.push(sep);
                seq.extend(&a);
                let input = seq[..seq.len() - 1].to_vec();
                let rows = (seq_len..2 * seq_len).collect();
                Example {
                    input: ModelInput::Single(Sequence::Tokens(input)),
                    rows,
                    labels: a,
                }
            }
            Task::CopySeq2seq => {
                let a: Vec<usize> = (0..seq_len).map(|_| rng.index(k)).collect();
                let mut target = vec![bos];
                target.extend(&a[..seq_len - 1]);
                Example {
                    input: ModelInput::Pair {
                        source: Sequence::Tokens(a.clone()),
                        target: Sequence::Tokens(target),
                    },
                    rows: (0..seq_len).collect(),
                    labels: a,
                }
            }
            Task::CharLm => {
                let vocab = char_vocab();
                let text: Vec<usize> = CHAR_CORPUS
                    .chars()
                    .map(|c| vocab.iter().position(|&v| v == c).expect("corpus char in vocab"))
                    .collect();
                let start = rng.index(text.len() - seq_len);
                let window = &text[start..=start + seq_len];
                Example {
                    input: ModelInput::Single(Sequence::Tokens(window[..seq_len].to_vec())),
                    rows: (0..seq_len).collect(),
                    labels: window[1..].to_vec(),
                }
            }
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "copy-seq2seq" | "seq2seq" => Ok(Task::CopySeq2seq),
            "char-lm" | "char" => Ok(Task::CharLm),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

fn char_vocab() -> Vec<char> {
    let mut v: Vec<char> = CHAR_CORPUS.chars().collect();
    v.sort_unstable();
    v.dedup();
    v
}

struct Example {
    input: ModelInput,
    /// Logit rows that carry loss, paired with `labels`.
    rows: Vec<usize>,
    labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Sum over target tokens and batch.
    #[default]
    Sum,
    /// Mean over target tokens and batch.
    Mean,
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            _ => Err(Error::Config(format!("unknown reduction `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub eta: f64,
    pub steps: usize,
    pub batch: usize,
    /// Copy length, or character window length.
    pub seq_len: usize,
    pub reduction: Reduction,
    /// Data seed; the model carries its own.
    pub seed: u64,
}

impl TrainConfig {
    pub const MAX_STEPS: usize = 2000;

    pub fn new(task: Task, eta: f64, steps: usize) -> Self {
        Self {
            task,
            eta,
            steps,
            batch: 8,
            seq_len: 8,
            reduction: Reduction::Sum,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::Config(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.steps == 0 || self.steps > Self::MAX_STEPS {
            return Err(Error::Config(format!("steps must be in 1..={}", Self::MAX_STEPS)));
        }
        if self.batch == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch and seq_len must be positive".into()));
        }
        if self.task == Task::CharLm && self.seq_len >= CHAR_CORPUS.chars().count() {
            return Err(Error::Config("seq_len exceeds the character corpus".into()));
        }
        Ok(())
    }
}

/// Flags a run once the loss is non-finite, or above `factor ×` the initial
/// loss for `window` consecutive steps.
#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceMonitor {
    pub factor: f64,
    pub window: usize,
    initial: Option<f64>,
    streak: usize,
}

impl Default for DivergenceMonitor {
    fn default() -> Self {
        Self {
            factor: 10.0,
            window: 50,
            initial: None,
            streak: 0,
        }
    }
}

impl DivergenceMonitor {
    /// Records one step's loss; returns true once the run has diverged.
    pub fn observe(&mut self, loss: f64) -> bool {
        if !loss.is_finite() {
            return true;
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > self.factor * initial {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        self.streak >= self.window
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    /// Loss before each update; a NaN entry marks a non-finite step.
    pub losses: Vec<f64>,
    /// Step at which divergence was declared; training stops there.
    pub diverged_at: Option<usize>,
}

impl TrainRun {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

fn batch_loss(model: &TransformerModel, tape: &mut Tape, batch: &[Example], reduction: Reduction) -> Result<Var> {
    let mut total: Option<Var> = None;
    for ex in batch {
        let logits = model.forward(tape, &ex.input)?;
        let picked = tape.gather_rows(logits, &ex.rows)?;
        let mut loss = tape.cross_entropy(picked, &ex.labels)?;
        loss = match reduction {
            Reduction::Mean => tape.scale(loss, 1.0 / batch.len() as f64)?,
            Reduction::Sum => tape.scale(loss, ex.labels.len() as f64)?,
        };
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
    }
    Ok(total.expect("non-empty batch"))
}

fn step(model: &mut TransformerModel, batch: &[Example], config: &TrainConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = batch_loss(model, &mut tape, batch, config.reduction)?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    model.zero_grads();
    model.accumulate_grads(&tape)?;
    model.sgd_step(config.eta)?;
    Ok(value)
}

/// Plain SGD on `config.task`, stopping early on divergence.
pub fn train(model: &mut TransformerModel, config: &TrainConfig) -> Result<TrainRun> {
    config.validate()?;
    let mut data = Rng::with_stream(config.seed, DATA_STREAM);
    let mut monitor = DivergenceMonitor::default();
    let mut losses = Vec::with_capacity(config.steps);
    for s in 0..config.steps {
        let batch: Vec<Example> = (0..config.batch).map(|_| config.task.example(config.seq_len, &mut data)).collect();
        let loss = match step(model, &batch, config) {
            Ok(v) => v,
            Err(e) if e.is_divergence() => f64::NAN,
            Err(e) => return Err(e),
        };
        losses.push(loss);
        if monitor.observe(loss) {
            return Ok(TrainRun {
                losses,
                diverged_at: Some(s),
            });
        }
    }
    Ok(TrainRun {
        losses,
        diverged_at: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSweepConfig {
    pub task: Task,
    pub arms: Vec<Arm>,
    pub eta_grid: Vec<f64>,
    pub steps: usize,
    /// Layers per stack; decoder-only tasks have `2·layers` sub-layers.
    pub layers: usize,
    pub d: usize,
    pub d_ff: Option<usize>,
    pub batch: usize,
    pub seq_len: usize,
    pub reduction: Reduction,
    pub seed: u64,
    pub jobs: usize,
}

impl LrSweepConfig {
    pub fn new(task: Task, arms: Vec<Arm>, eta_grid: Vec<f64>, steps: usize) -> Self {
        Self {
            task,
            arms,
            eta_grid,
            steps,
            layers: 8,
            d: 32,
            d_ff: None,
            batch: 8,
            seq_len: 8,
            reduction: Reduction::Sum,
            seed: 0,
            jobs: 1,
        }
    }

    pub fn model_config(&self, variant: NormVariant) -> ModelConfig {
        self.task
            .model_config(variant, self.layers, self.d, self.seq_len)
            .with_d_ff(self.d_ff.unwrap_or(4 * self.d))
            .with_seed(self.seed)
    }

    pub fn train_config(&self, eta: f64) -> TrainConfig {
        TrainConfig {
            task: self.task,
            eta,
            steps: self.steps,
            batch: self.batch,
            seq_len: self.seq_len,
            reduction: self.reduction,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LrCell {
    pub arm: Arm,
    pub eta: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub diverged: bool,
    #[serde(skip)]
    pub run: TrainRun,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LrSweepResult {
    pub config: LrSweepConfig,
    pub cells: Vec<LrCell>,
}

impl LrSweepResult {
    pub const CSV_HEADER: &'static str = "variant,init,task,eta,step,loss,diverged";

    /// One row per recorded step; `diverged` is true only on the step where
    /// divergence was declared.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            for (s, loss) in c.run.losses.iter().enumerate() {
                let flag = c.run.diverged_at == Some(s);
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    c.arm.variant, c.arm.init, self.config.task, c.eta, s, loss, flag
                ));
            }
        }
        out
    }

    /// Largest grid η that did not diverge for `arm`.
    pub fn max_stable_eta(&self, arm: Arm) -> Option<f64> {
        self.cells
            .iter()
            .filter(|c| c.arm == arm && !c.diverged)
            .map(|c| c.eta)
            .fold(None, |acc, e| Some(acc.map_or(e, |a: f64| a.max(e))))
    }
}

/// Trains every (arm, η) pair from the same initial weights per arm and the
/// same data stream.
pub fn lr_divergence_sweep(config: &LrSweepConfig) -> Result<LrSweepResult> {
    if config.arms.is_empty() || config.eta_grid.is_empty() {
        return Err(Error::Config("lr sweep needs at least one arm and one eta".into()));
    }
    let mut grid = Vec::new();
    for &arm in &config.arms {
        let model_config = config.model_config(arm.variant);
        model_config.validate()?;
        InitPlan::for_mode(arm.init, &model_config)?;
        for &eta in &config.eta_grid {
            config.train_config(eta).validate()?;
            grid.push((arm, eta));
        }
    }
    let runs = par_map(&grid, config.jobs, |&(arm, eta)| -> Result<LrCell> {
        let mut model = init::initialized(&config.model_config(arm.variant), arm.init)?;
        let run = train(&mut model, &config.train_config(eta))?;
        Ok(LrCell {
            arm,
            eta,
            initial_loss: run.losses[0],
            final_loss: *run.losses.last().expect("at least one step"),
            diverged: run.diverged(),
            run,
        })
    });
    Ok(LrSweepResult {
        config: config.clone(),
        cells: runs.into_iter().collect::<Result<_>>()?,
    })
}
