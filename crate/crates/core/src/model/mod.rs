//! Encoder-only, decoder-only and encoder-decoder stacks with a vocabulary head.
//!
//! Logits are `W_vocab · x_e`, where `x_e` is the last sub-layer output,
//! passed through a final LayerNorm for Pre-LN and Sub-LN stacks. Post-LN
//! stacks already end on a LayerNorm and add none.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{AttentionSubLayer, CrossAttentionSubLayer, FfnSubLayer, NormVariant, ParamRole, SubLayer, LN_EPS};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    EncoderOnly,
    DecoderOnly,
    #[serde(alias = "enc-dec")]
    EncoderDecoder,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::EncoderOnly => "encoder-only",
            Family::DecoderOnly => "decoder-only",
            Family::EncoderDecoder => "encoder-decoder",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "encoder-only" | "encoder" | "enc" => Ok(Family::EncoderOnly),
            "decoder-only" | "decoder" | "dec" => Ok(Family::DecoderOnly),
            "encoder-decoder" | "enc-dec" | "seq2seq" => Ok(Family::EncoderDecoder),
            _ => Err(Error::Config(format!("unknown architecture family `{s}`"))),
        }
    }
}

/// Which stack a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub variant: NormVariant,
    /// N
    pub n_encoder_layers: usize,
    /// M
    pub n_decoder_layers: usize,
    pub d: usize,
    pub d_ff: usize,
    pub head_count: usize,
    pub vocab_size: usize,
    /// Rows of the learned position table (token mode only).
    pub max_positions: usize,
    pub seed: u64,
}

impl ModelConfig {
    fn base(family: Family, variant: NormVariant, n: usize, m: usize, d: usize) -> Self {
        Self {
            family,
            variant,
            n_encoder_layers: n,
            n_decoder_layers: m,
            d,
            d_ff: 4 * d,
            head_count: 1,
            vocab_size: 32,
            max_positions: 64,
            seed: 0,
        }
    }

    pub fn encoder_only(variant: NormVariant, n: usize, d: usize) -> Self {
        Self::base(Family::EncoderOnly, variant, n, 0, d)
    }

    pub fn decoder_only(variant: NormVariant, m: usize, d: usize) -> Self {
        Self::base(Family::DecoderOnly, variant, 0, m, d)
    }

    pub fn encoder_decoder(variant: NormVariant, n: usize, m: usize, d: usize) -> Self {
        Self::base(Family::EncoderDecoder, variant, n, m, d)
    }

    pub fn with_d_ff(mut self, d_ff: usize) -> Self {
        self.d_ff = d_ff;
        self
    }

    pub fn with_heads(mut self, head_count: usize) -> Self {
        self.head_count = head_count;
        self
    }

    pub fn with_vocab(mut self, vocab_size: usize) -> Self {
        self.vocab_size = vocab_size;
        self
    }

    pub fn with_max_positions(mut self, max_positions: usize) -> Self {
        self.max_positions = max_positions;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Sub-layers in the encoder stream: 2N.
    pub fn encoder_sublayers(&self) -> usize {
        2 * self.n_encoder_layers
    }

    /// Sub-layers in the decoder stream: 3M with cross-attention, else 2M.
    pub fn decoder_sublayers(&self) -> usize {
        match self.family {
            Family::EncoderDecoder => 3 * self.n_decoder_layers,
            _ => 2 * self.n_decoder_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n_encoder_layers, self.n_decoder_layers);
        match self.family {
            Family::EncoderOnly if m != 0 || n == 0 => {
                return Err(Error::Config(format!("encoder-only needs N >= 1 and M = 0, got N = {n}, M = {m}")))
            }
            Family::DecoderOnly if n != 0 || m == 0 => {
                return Err(Error::Config(format!("decoder-only needs N = 0 and M >= 1, got N = {n}, M = {m}")))
            }
            Family::EncoderDecoder if n == 0 || m == 0 => {
                return Err(Error::Config(format!("encoder-decoder needs N, M >= 1, got N = {n}, M = {m}")))
            }
            _ => {}
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(format!("vocab_size must be >= 2, got {}", self.vocab_size)));
        }
        if self.d < 2 {
            return Err(Error::Config(format!("d must be >= 2, got {}", self.d)));
        }
        if self.d_ff < self.d {
            return Err(Error::Config(format!("d_ff = {} must be >= d = {}", self.d_ff, self.d)));
        }
        if self.head_count == 0 || self.d % self.head_count != 0 {
            return Err(Error::Config(format!(
                "head_count {} does not divide d = {}",
                self.head_count, self.d
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("max_positions must be >= 1".into()));
        }
        Ok(())
    }
}

/// A sequence fed to one stream: token ids (embedded and position-encoded)
/// or raw `[T × d]` vectors used as-is.
#[derive(Clone, Debug)]
pub enum Sequence {
    Tokens(Vec<usize>),
    Vectors(Tensor),
}

#[derive(Clone, Debug)]
pub enum ModelInput {
    /// Encoder-only or decoder-only input.
    Single(Sequence),
    /// Encoder-decoder input.
    Pair { source: Sequence, target: Sequence },
}

/// Where a parameter sits: stream and sub-layer index (absent for
/// embeddings and the vocabulary head) plus its role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamSlot {
    pub stream: Option<Stream>,
    pub sublayer: Option<usize>,
    pub role: ParamRole,
}

#[derive(Clone, Debug)]
pub struct TransformerModel {
    config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub encoder: Vec<SubLayer>,
    pub decoder: Vec<SubLayer>,
    pub encoder_final_ln: bool,
    pub decoder_final_ln: bool,
    /// `[V × d]`
    pub w_vocab: Tensor,
}

fn zero_param(shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, vec![0.0; n]).expect("non-empty parameter shape")
}

impl TransformerModel {
    /// Allocates every parameter at zero; values come from [`crate::init::apply`].
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            family,
            variant,
            d,
            d_ff,
            head_count: h,
            ..
        } = *config;
        let mut encoder = Vec::new();
        for _ in 0..config.n_encoder_layers {
            encoder.push(SubLayer::SelfAttention(AttentionSubLayer::new(d, h, variant, false)?));
            encoder.push(SubLayer::Ffn(FfnSubLayer::new(d, d_ff, variant)?));
        }
        let mut decoder = Vec::new();
        for _ in 0..config.n_decoder_layers {
            decoder.push(SubLayer::SelfAttention(AttentionSubLayer::new(d, h, variant, true)?));
            if family == Family::EncoderDecoder {
                decoder.push(SubLayer::CrossAttention(CrossAttentionSubLayer::new(d, h, variant)?));
            }
            decoder.push(SubLayer::Ffn(FfnSubLayer::new(d, d_ff, variant)?));
        }
        assert_eq!(encoder.len(), config.encoder_sublayers());
        assert_eq!(decoder.len(), config.decoder_sublayers());
        let final_ln = variant != NormVariant::PostLN;
        Ok(Self {
            config: config.clone(),
            token_embedding: zero_param(&[config.vocab_size, d]),
            position_embedding: zero_param(&[config.max_positions, d]),
            encoder,
            decoder,
            encoder_final_ln: final_ln && family != Family::DecoderOnly,
            decoder_final_ln: final_ln && family != Family::EncoderOnly,
            w_vocab: zero_param(&[config.vocab_size, d]),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every parameter in build order: token table, position table,
    /// encoder sub-layers, decoder sub-layers, vocabulary head.
    pub fn params(&self) -> Vec<(ParamSlot, &Tensor)> {
        let mut out = vec![
            (slot(None, None, ParamRole::TokenEmbedding), &self.token_embedding),
            (slot(None, None, ParamRole::PositionEmbedding), &self.position_embedding),
        ];
        for (stream, layers) in [(Stream::Encoder, &self.encoder), (Stream::Decoder, &self.decoder)] {
            for (i, l) in layers.iter().enumerate() {
                out.extend(l.params().into_iter().map(|(r, t)| (slot(Some(stream), Some(i), r), t)));
            }
        }
        out.push((slot(None, None, ParamRole::Vocab), &self.w_vocab));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamSlot, &mut Tensor)> {
        let mut out = vec![
            (slot(None, None, ParamRole::TokenEmbedding), &mut self.token_embedding),
            (slot(None, None, ParamRole::PositionEmbedding), &mut self.position_embedding),
        ];
        for (stream, layers) in [(Stream::Encoder, &mut self.encoder), (Stream::Decoder, &mut self.decoder)] {
            for (i, l) in layers.iter_mut().enumerate() {
                out.extend(l.params_mut().into_iter().map(|(r, t)| (slot(Some(stream), Some(i), r), t)));
            }
        }
        out.push((slot(None, None, ParamRole::Vocab), &mut self.w_vocab));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn embed(&self, tape: &mut Tape, seq: &Sequence) -> Result<Var> {
        let d = self.config.d;
        match seq {
            Sequence::Vectors(x) => {
                if x.shape().len() != 2 || x.cols() != d {
                    return Err(Error::Shape {
                        op: "forward",
                        lhs: x.shape().to_vec(),
                        rhs: vec![d],
                    });
                }
                tape.constant(x)
            }
            Sequence::Tokens(ids) => {
                if ids.len() > self.config.max_positions {
                    return Err(Error::Index {
                        op: "position embedding",
                        index: ids.len() - 1,
                        extent: self.config.max_positions,
                    });
                }
                let table = tape.param(&self.token_embedding)?;
                let pos_table = tape.param(&self.position_embedding)?;
                let tok = tape.embed(table, ids)?;
                let positions: Vec<usize> = (0..ids.len()).collect();
                let pos = tape.embed(pos_table, &positions)?;
                tape.add(tok, pos)
            }
        }
    }

    fn run_stack(tape: &mut Tape, layers: &[SubLayer], mut h: Var, enc_out: Option<Var>, final_ln: bool) -> Result<Var> {
        for l in layers {
            h = l.forward(tape, h, enc_out)?;
        }
        if final_ln {
            h = tape.layer_norm(h, LN_EPS)?;
        }
        Ok(h)
    }

    /// Records the forward pass on `tape` and returns the `[T × V]` logits.
    pub fn forward(&self, tape: &mut Tape, input: &ModelInput) -> Result<Var> {
        let h = match (self.config.family, input) {
            (Family::EncoderOnly, ModelInput::Single(seq)) => {
                let x = self.embed(tape, seq)?;
                Self::run_stack(tape, &self.encoder, x, None, self.encoder_final_ln)?
            }
            (Family::DecoderOnly, ModelInput::Single(seq)) => {
                let x = self.embed(tape, seq)?;
                Self::run_stack(tape, &self.decoder, x, None, self.decoder_final_ln)?
            }
            (Family::EncoderDecoder, ModelInput::Pair { source, target }) => {
                let x = self.embed(tape, source)?;
                let enc = Self::run_stack(tape, &self.encoder, x, None, self.encoder_final_ln)?;
                let y = self.embed(tape, target)?;
                Self::run_stack(tape, &self.decoder, y, Some(enc), self.decoder_final_ln)?
            }
            (family, _) => {
                return Err(Error::Contract(format!("input kind does not match a {family} model")));
            }
        };
        let w = tape.param(&self.w_vocab)?;
        tape.linear(h, w)
    }

    /// Forward pass on a throwaway tape.
    pub fn logits(&self, input: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, input)?;
        Ok(tape.value(y).clone())
    }

    /// Pulls gradients for every parameter from `tape`. Parameters that never
    /// reached the tape receive an all-zero gradient.
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        for (_, p) in self.params_mut() {
            match tape.grad_of(p) {
                Some(g) => {
                    let g = g.to_vec();
                    p.accumulate_grad(&g)?;
                }
                None => {
                    let zeros = vec![0.0; p.len()];
                    p.accumulate_grad(&zeros)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// `θ ← θ − η·∇θ` for every parameter, then clears the gradients.
    pub fn sgd_step(&mut self, eta: f64) -> Result<()> {
        if !eta.is_finite() || eta < 0.0 {
            return Err(Error::Contract(format!("learning rate must be finite and >= 0, got {eta}")));
        }
        if let Some((s, _)) = self.params().into_iter().find(|(_, p)| p.grad().is_none()) {
            return Err(Error::Contract(format!("missing gradient for {s:?}; run backward first")));
        }
        for (_, p) in self.params_mut() {
            let g = p.grad().expect("checked above").to_vec();
            for (w, gi) in p.data_mut().iter_mut().zip(&g) {
                *w -= eta * gi;
            }
            p.zero_grad();
            if !p.is_finite() {
                return Err(Error::NonFinite { op: "sgd_step" });
            }
        }
        Ok(())
    }
}

fn slot(stream: Option<Stream>, sublayer: Option<usize>, role: ParamRole) -> ParamSlot {
    ParamSlot { stream, sublayer, role }
}
