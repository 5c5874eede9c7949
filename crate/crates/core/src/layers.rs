//! Attention, cross-attention and feed-forward sub-layers in the three
//! LayerNorm placements.
//!
//! With `LN` the affine-free normalization of [`Tape::layer_norm`] and `φ`
//! the activation:
//!
//! | variant | self-attention                       | feed-forward                   |
//! |---------|--------------------------------------|--------------------------------|
//! | Post-LN | `LN(x + Wo·Attn(x))`                 | `LN(x + W2·φ(W1·x))`           |
//! | Pre-LN  | `x + Wo·Attn(LN(x))`                 | `x + W2·φ(W1·LN(x))`           |
//! | Sub-LN  | `x + Wo·LN(Attn(LN(x)))`             | `x + W2·LN(φ(W1·LN(x)))`       |
//!
//! Weight matrices are stored `[out × in]` and applied to row vectors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Epsilon added to the variance inside every LayerNorm.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormVariant {
    #[serde(rename = "postln")]
    PostLN,
    #[serde(rename = "preln")]
    PreLN,
    #[serde(rename = "subln")]
    SubLN,
}

impl NormVariant {
    pub const ALL: [NormVariant; 3] = [NormVariant::PostLN, NormVariant::PreLN, NormVariant::SubLN];

    pub fn as_str(self) -> &'static str {
        match self {
            NormVariant::PostLN => "postln",
            NormVariant::PreLN => "preln",
            NormVariant::SubLN => "subln",
        }
    }
}

impl fmt::Display for NormVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "postln" | "post" => Ok(NormVariant::PostLN),
            "preln" | "pre" => Ok(NormVariant::PreLN),
            "subln" | "sub" => Ok(NormVariant::SubLN),
            _ => Err(Error::Config(format!("unknown norm variant `{s}`"))),
        }
    }
}

/// What a weight matrix does inside its sub-layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    TokenEmbedding,
    PositionEmbedding,
    Query,
    Key,
    Value,
    Output,
    FfnIn,
    FfnOut,
    CrossQuery,
    CrossKey,
    CrossValue,
    CrossOutput,
    Vocab,
}

/// How attention probabilities are formed. `Identity` replaces the softmax
/// mixing matrix with the identity, leaving only the value/output path; it
/// exists for probing the magnitude model `MSA(x) ≐ Wo·Wv·LN(x)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionMixing {
    #[default]
    Softmax,
    Identity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

fn zero_param(shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, vec![0.0; n]).expect("non-empty parameter shape")
}

fn check_width(op: &'static str, tape: &Tape, x: Var, d: usize) -> Result<()> {
    let shape = tape.value(x).shape();
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![d],
        });
    }
    Ok(())
}

fn check_heads(d: usize, head_count: usize) -> Result<()> {
    if head_count == 0 || d % head_count != 0 {
        return Err(Error::Config(format!("head_count {head_count} does not divide d = {d}")));
    }
    Ok(())
}

/// Multi-head scaled dot-product attention over already-projected `q`, `k`, `v`.
fn multi_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    head_count: usize,
    causal: bool,
    mixing: AttentionMixing,
) -> Result<Var> {
    let d = tape.value(q).cols();
    let hd = d / head_count;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(head_count);
    for h in 0..head_count {
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let out = match mixing {
            AttentionMixing::Identity => {
                if tape.value(q).rows() != tape.value(v).rows() {
                    return Err(Error::Shape {
                        op: "identity mixing",
                        lhs: tape.value(q).shape().to_vec(),
                        rhs: tape.value(v).shape().to_vec(),
                    });
                }
                vh
            }
            AttentionMixing::Softmax => {
                let qh = tape.slice_cols(q, h * hd, hd)?;
                let kh = tape.slice_cols(k, h * hd, hd)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale)?;
                let probs = if causal {
                    tape.causal_softmax_rows(scores)?
                } else {
                    tape.softmax_rows(scores)?
                };
                tape.matmul(probs, vh)?
            }
        };
        heads.push(out);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        tape.concat_cols(&heads)
    }
}

/// Multi-head self-attention sub-layer.
#[derive(Clone, Debug)]
pub struct AttentionSubLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub head_count: usize,
    pub variant: NormVariant,
    pub is_causal: bool,
    pub mixing: AttentionMixing,
}

impl AttentionSubLayer {
    /// Zero-weight sub-layer of width `d`.
    pub fn new(d: usize, head_count: usize, variant: NormVariant, is_causal: bool) -> Result<Self> {
        check_heads(d, head_count)?;
        Ok(Self {
            wq: zero_param(&[d, d]),
            wk: zero_param(&[d, d]),
            wv: zero_param(&[d, d]),
            wo: zero_param(&[d, d]),
            head_count,
            variant,
            is_causal,
            mixing: AttentionMixing::Softmax,
        })
    }

    pub fn width(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.head_count
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_heads(self.width(), self.head_count)?;
        check_width("msa_forward", tape, x, self.width())?;
        let wq = tape.param(&self.wq)?;
        let wk = tape.param(&self.wk)?;
        let wv = tape.param(&self.wv)?;
        let wo = tape.param(&self.wo)?;
        let h = match self.variant {
            NormVariant::PostLN => x,
            NormVariant::PreLN | NormVariant::SubLN => tape.layer_norm(x, LN_EPS)?,
        };
        let q = tape.linear(h, wq)?;
        let k = tape.linear(h, wk)?;
        let v = tape.linear(h, wv)?;
        let a = multi_head(tape, q, k, v, self.head_count, self.is_causal, self.mixing)?;
        let a = match self.variant {
            NormVariant::SubLN => tape.layer_norm(a, LN_EPS)?,
            _ => a,
        };
        let o = tape.linear(a, wo)?;
        let r = tape.add(x, o)?;
        match self.variant {
            NormVariant::PostLN => tape.layer_norm(r, LN_EPS),
            _ => Ok(r),
        }
    }

    pub fn params(&self) -> [(ParamRole, &Tensor); 4] {
        [
            (ParamRole::Query, &self.wq),
            (ParamRole::Key, &self.wk),
            (ParamRole::Value, &self.wv),
            (ParamRole::Output, &self.wo),
        ]
    }

    pub fn params_mut(&mut self) -> [(ParamRole, &mut Tensor); 4] {
        [
            (ParamRole::Query, &mut self.wq),
            (ParamRole::Key, &mut self.wk),
            (ParamRole::Value, &mut self.wv),
            (ParamRole::Output, &mut self.wo),
        ]
    }
}

/// Position-wise feed-forward sub-layer.
#[derive(Clone, Debug)]
pub struct FfnSubLayer {
    /// `[d_ff × d]`
    pub w1: Tensor,
    /// `[d × d_ff]`
    pub w2: Tensor,
    pub variant: NormVariant,
    pub activation: Activation,
}

impl FfnSubLayer {
    pub fn new(d: usize, d_ff: usize, variant: NormVariant) -> Result<Self> {
        if d_ff < d {
            return Err(Error::Config(format!("d_ff = {d_ff} must be at least d = {d}")));
        }
        Ok(Self {
            w1: zero_param(&[d_ff, d]),
            w2: zero_param(&[d, d_ff]),
            variant,
            activation: Activation::Gelu,
        })
    }

    pub fn width(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_width("ffn_forward", tape, x, self.width())?;
        let w1 = tape.param(&self.w1)?;
        let w2 = tape.param(&self.w2)?;
        let h = match self.variant {
            NormVariant::PostLN => x,
            NormVariant::PreLN | NormVariant::SubLN => tape.layer_norm(x, LN_EPS)?,
        };
        let z = tape.linear(h, w1)?;
        let u = match self.activation {
            Activation::Gelu => tape.gelu(z)?,
            Activation::Identity => z,
        };
        let u = match self.variant {
            NormVariant::SubLN => tape.layer_norm(u, LN_EPS)?,
            _ => u,
        };
        let o = tape.linear(u, w2)?;
        let r = tape.add(x, o)?;
        match self.variant {
            NormVariant::PostLN => tape.layer_norm(r, LN_EPS),
            _ => Ok(r),
        }
    }

    pub fn params(&self) -> [(ParamRole, &Tensor); 2] {
        [(ParamRole::FfnIn, &self.w1), (ParamRole::FfnOut, &self.w2)]
    }

    pub fn params_mut(&mut self) -> [(ParamRole, &mut Tensor); 2] {
        [(ParamRole::FfnIn, &mut self.w1), (ParamRole::FfnOut, &mut self.w2)]
    }
}

/// Decoder cross-attention over the encoder output.
///
/// The Sub-LN form keeps a single LayerNorm, on the attention output before
/// `Wo`; queries come from the raw decoder stream and keys/values from the
/// (already normalized) encoder output. Pre-LN normalizes the decoder stream
/// before `Wq`; Post-LN normalizes after the residual add.
#[derive(Clone, Debug)]
pub struct CrossAttentionSubLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub head_count: usize,
    pub variant: NormVariant,
}

impl CrossAttentionSubLayer {
    pub fn new(d: usize, head_count: usize, variant: NormVariant) -> Result<Self> {
        check_heads(d, head_count)?;
        Ok(Self {
            wq: zero_param(&[d, d]),
            wk: zero_param(&[d, d]),
            wv: zero_param(&[d, d]),
            wo: zero_param(&[d, d]),
            head_count,
            variant,
        })
    }

    pub fn width(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, y: Var, enc_out: Var) -> Result<Var> {
        let d = self.width();
        check_heads(d, self.head_count)?;
        check_width("cross_attn_forward", tape, y, d)?;
        if tape.value(enc_out).shape().len() != 2 || tape.value(enc_out).cols() != d {
            return Err(Error::Config(format!(
                "encoder output width {:?} does not match decoder width {d}",
                tape.value(enc_out).shape()
            )));
        }
        let wq = tape.param(&self.wq)?;
        let wk = tape.param(&self.wk)?;
        let wv = tape.param(&self.wv)?;
        let wo = tape.param(&self.wo)?;
        let h = match self.variant {
            NormVariant::PreLN => tape.layer_norm(y, LN_EPS)?,
            NormVariant::PostLN | NormVariant::SubLN => y,
        };
        let q = tape.linear(h, wq)?;
        let k = tape.linear(enc_out, wk)?;
        let v = tape.linear(enc_out, wv)?;
        let a = multi_head(tape, q, k, v, self.head_count, false, AttentionMixing::Softmax)?;
        let a = match self.variant {
            NormVariant::SubLN => tape.layer_norm(a, LN_EPS)?,
            _ => a,
        };
        let o = tape.linear(a, wo)?;
        let r = tape.add(y, o)?;
        match self.variant {
            NormVariant::PostLN => tape.layer_norm(r, LN_EPS),
            _ => Ok(r),
        }
    }

    pub fn params(&self) -> [(ParamRole, &Tensor); 4] {
        [
            (ParamRole::CrossQuery, &self.wq),
            (ParamRole::CrossKey, &self.wk),
            (ParamRole::CrossValue, &self.wv),
            (ParamRole::CrossOutput, &self.wo),
        ]
    }

    pub fn params_mut(&mut self) -> [(ParamRole, &mut Tensor); 4] {
        [
            (ParamRole::CrossQuery, &mut self.wq),
            (ParamRole::CrossKey, &mut self.wk),
            (ParamRole::CrossValue, &mut self.wv),
            (ParamRole::CrossOutput, &mut self.wo),
        ]
    }
}

/// One sub-layer of a stack.
#[derive(Clone, Debug)]
pub enum SubLayer {
    SelfAttention(AttentionSubLayer),
    CrossAttention(CrossAttentionSubLayer),
    Ffn(FfnSubLayer),
}

impl SubLayer {
    pub fn kind(&self) -> &'static str {
        match self {
            SubLayer::SelfAttention(_) => "self-attention",
            SubLayer::CrossAttention(_) => "cross-attention",
            SubLayer::Ffn(_) => "ffn",
        }
    }

    /// `enc_out` is required by cross-attention and ignored otherwise.
    pub fn forward(&self, tape: &mut Tape, x: Var, enc_out: Option<Var>) -> Result<Var> {
        match self {
            SubLayer::SelfAttention(l) => l.forward(tape, x),
            SubLayer::Ffn(l) => l.forward(tape, x),
            SubLayer::CrossAttention(l) => {
                let enc = enc_out.ok_or_else(|| Error::Contract("cross-attention needs an encoder output".into()))?;
                l.forward(tape, x, enc)
            }
        }
    }

    pub fn params(&self) -> Vec<(ParamRole, &Tensor)> {
        match self {
            SubLayer::SelfAttention(l) => l.params().to_vec(),
            SubLayer::CrossAttention(l) => l.params().to_vec(),
            SubLayer::Ffn(l) => l.params().to_vec(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(ParamRole, &mut Tensor)> {
        match self {
            SubLayer::SelfAttention(l) => l.params_mut().into_iter().collect(),
            SubLayer::CrossAttention(l) => l.params_mut().into_iter().collect(),
            SubLayer::Ffn(l) => l.params_mut().into_iter().collect(),
        }
    }
}

/// Runs a self-attention sub-layer on a fresh tape.
pub fn msa_forward(layer: &AttentionSubLayer, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x)?;
    let y = layer.forward(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

/// Runs a feed-forward sub-layer on a fresh tape.
pub fn ffn_forward(layer: &FfnSubLayer, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x)?;
    let y = layer.forward(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

/// Runs a cross-attention sub-layer on a fresh tape.
pub fn cross_attn_forward(layer: &CrossAttentionSubLayer, y: &Tensor, enc_out: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let yv = tape.constant(y)?;
    let ev = tape.constant(enc_out)?;
    let out = layer.forward(&mut tape, yv, ev)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn randn(shape: &[usize], rng: &mut Rng, std: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, rng.normal_vec(n, std)).unwrap()
    }

    fn fill(t: &mut Tensor, rng: &mut Rng, std: f64) {
        for v in t.data_mut() {
            *v = rng.normal() * std;
        }
    }

    fn ln_rows(x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.constant(x).unwrap();
        let y = tape.layer_norm(v, LN_EPS).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn zero_weights_residual_passthrough() {
        let mut rng = Rng::new(1);
        let x = randn(&[3, 8], &mut rng, 1.0);
        for variant in NormVariant::ALL {
            let attn = AttentionSubLayer::new(8, 2, variant, true).unwrap();
            let ffn = FfnSubLayer::new(8, 32, variant).unwrap();
            let ya = msa_forward(&attn, &x).unwrap();
            let yf = ffn_forward(&ffn, &x).unwrap();
            let expect = match variant {
                NormVariant::PostLN => ln_rows(&x),
                _ => x.clone(),
            };
            assert_eq!(ya.data(), expect.data(), "{variant} attention");
            assert_eq!(yf.data(), expect.data(), "{variant} ffn");
        }
        let cross = CrossAttentionSubLayer::new(8, 2, NormVariant::SubLN).unwrap();
        let enc = randn(&[5, 8], &mut rng, 1.0);
        assert_eq!(cross_attn_forward(&cross, &x, &enc).unwrap().data(), x.data());
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(matches!(
            AttentionSubLayer::new(6, 4, NormVariant::SubLN, false),
            Err(Error::Config(_))
        ));
        assert!(CrossAttentionSubLayer::new(6, 4, NormVariant::SubLN).is_err());
    }

    #[test]
    fn cross_attention_width_mismatch() {
        let cross = CrossAttentionSubLayer::new(4, 1, NormVariant::SubLN).unwrap();
        let y = Tensor::zeros(&[2, 4]);
        let enc = Tensor::zeros(&[3, 8]);
        assert!(matches!(cross_attn_forward(&cross, &y, &enc), Err(Error::Config(_))));
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("Sub-LN".parse::<NormVariant>().unwrap(), NormVariant::SubLN);
        assert_eq!("preln".parse::<NormVariant>().unwrap(), NormVariant::PreLN);
        assert!("midln".parse::<NormVariant>().is_err());
    }

    #[test]
    fn identity_mixing_matches_linear_ffn() {
        let mut rng = Rng::new(9);
        let d = 8;
        let mut attn = AttentionSubLayer::new(d, 2, NormVariant::SubLN, false).unwrap();
        for (_, w) in attn.params_mut() {
            fill(w, &mut rng, 0.4);
        }
        attn.mixing = AttentionMixing::Identity;
        let mut ffn = FfnSubLayer::new(d, d, NormVariant::SubLN).unwrap();
        ffn.activation = Activation::Identity;
        ffn.w1 = Tensor::param(&[d, d], attn.wv.data().to_vec()).unwrap();
        ffn.w2 = Tensor::param(&[d, d], attn.wo.data().to_vec()).unwrap();
        let x = randn(&[4, d], &mut rng, 1.0);
        let a = msa_forward(&attn, &x).unwrap();
        let f = ffn_forward(&ffn, &x).unwrap();
        for (p, q) in a.data().iter().zip(f.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_finite_on_bounded_inputs() {
        let mut rng = Rng::new(4);
        let d = 64;
        let x = Tensor::new(&[5, d], (0..5 * d).map(|_| rng.uniform(-10.0, 10.0)).collect()).unwrap();
        for variant in NormVariant::ALL {
            let mut attn = AttentionSubLayer::new(d, 4, variant, true).unwrap();
            for (_, w) in attn.params_mut() {
                fill(w, &mut rng, 1.0 / (d as f64).sqrt());
            }
            let mut ffn = FfnSubLayer::new(d, 4 * d, variant).unwrap();
            for (_, w) in ffn.params_mut() {
                fill(w, &mut rng, 1.0 / (d as f64).sqrt());
            }
            assert!(msa_forward(&attn, &x).unwrap().is_finite());
            assert!(ffn_forward(&ffn, &x).unwrap().is_finite());
        }
    }
}
