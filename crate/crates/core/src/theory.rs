//! Closed-form model-update bounds under one SGD step.
//!
//! Sub-layer `l` (1-indexed) has an output-side scale `v_l` and an input-side
//! scale `w_l`. Each variant defines a per-layer branch weight `a_l` and an
//! update coefficient `c_l`:
//!
//! | variant | `a_l`       | `c_l`          | `p̄_l`  |
//! |---------|-------------|----------------|--------|
//! | Pre-LN  | `v_l²·w_l²` | `v_l² + w_l²`  | `w_l²` |
//! | Sub-LN  | `v_l²`      | `1 + v_l²/w_l²`| `1`    |
//!
//! With `A = Σ a_n`, `S_k = Σ_{n≤k} a_n` and `R = Σ_{k=2}^{L} a_k / S_{k−1}`
//! the encoder bound is `η·d·(Σ c_l / A)·(1 + R)`, reported as
//! `term1 = η·d·Σc/A` plus `term2 = η·d·Σc/A·R`.
//!
//! All values are upper-bound estimates carrying unstated Θ-constants; only
//! their scaling with depth is meaningful.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::NormVariant;

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleProfile {
    v: Vec<f64>,
    w: Vec<f64>,
}

impl ScaleProfile {
    pub fn new(v: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        if v.is_empty() || v.len() != w.len() {
            return Err(Error::Config(format!(
                "scale profile needs equal, non-zero lengths (v: {}, w: {})",
                v.len(),
                w.len()
            )));
        }
        if v.iter().chain(&w).any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("scale factors must be finite and > 0".into()));
        }
        Ok(Self { v, w })
    }

    /// `v_l = w_l = scale` for all `l`.
    pub fn uniform(len: usize, scale: f64) -> Result<Self> {
        Self::new(vec![scale; len], vec![scale; len])
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    fn branch_weight(&self, i: usize, variant: Analyzed) -> f64 {
        let (v2, w2) = (self.v[i] * self.v[i], self.w[i] * self.w[i]);
        match variant {
            Analyzed::Pre => v2 * w2,
            Analyzed::Sub => v2,
        }
    }

    fn coefficient(&self, i: usize, variant: Analyzed) -> f64 {
        let (v2, w2) = (self.v[i] * self.v[i], self.w[i] * self.w[i]);
        match variant {
            Analyzed::Pre => v2 + w2,
            Analyzed::Sub => 1.0 + v2 / w2,
        }
    }
}

/// Variants with a closed-form bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Analyzed {
    Pre,
    Sub,
}

impl TryFrom<NormVariant> for Analyzed {
    type Error = Error;

    fn try_from(v: NormVariant) -> Result<Self> {
        match v {
            NormVariant::PreLN => Ok(Analyzed::Pre),
            NormVariant::SubLN => Ok(Analyzed::Sub),
            NormVariant::PostLN => Err(Error::Config(
                "post-ln has only the order-of-magnitude surrogate bound_postln".into(),
            )),
        }
    }
}

/// Sums shared by every quantity: `A`, `Σc`, `R`, and the prefix sums `S_k`.
struct Sums {
    total: f64,
    coeff: f64,
    ratio: f64,
    prefix: Vec<f64>,
}

fn sums(p: &ScaleProfile, variant: Analyzed) -> Sums {
    let mut prefix = Vec::with_capacity(p.len());
    let mut acc = 0.0;
    let mut ratio = 0.0;
    for i in 0..p.len() {
        let a = p.branch_weight(i, variant);
        if i > 0 {
            ratio += a / acc;
        }
        acc += a;
        prefix.push(acc);
    }
    let coeff = (0..p.len()).map(|i| p.coefficient(i, variant)).sum();
    Sums {
        total: acc,
        coeff,
        ratio,
        prefix,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum Depth {
    Single(usize),
    EncoderDecoder { encoder: usize, decoder: usize },
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Depth::Single(l) => write!(f, "{l}"),
            Depth::EncoderDecoder { encoder, decoder } => write!(f, "{encoder}/{decoder}"),
        }
    }
}

/// An evaluated bound with its breakdown; `term1 + term2 + coupling == total`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub variant: NormVariant,
    pub depth: Depth,
    pub eta: f64,
    pub d: f64,
    pub term1: f64,
    pub term2: f64,
    /// Encoder-to-decoder coupling; zero for single-stack bounds.
    pub coupling: f64,
    pub total: f64,
    /// The encoder's own update `ΔF_e` for encoder-decoder bounds.
    pub encoder_update: Option<f64>,
}

impl BoundReport {
    pub const CSV_HEADER: &'static str = "variant,L,eta,d,term1,term2,coupling,total";

    /// One CSV row; `L` is `L_e/L_d` for encoder-decoder bounds.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.variant, self.depth, self.eta, self.d, self.term1, self.term2, self.coupling, self.total
        )
    }
}

impl fmt::Display for BoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} L={} upper-bound estimate {:.6} (eta={}, d={})",
            self.variant, self.depth, self.total, self.eta, self.d
        )
    }
}

fn check_step(eta: f64, d: f64) -> Result<()> {
    if !(eta.is_finite() && eta > 0.0 && d.is_finite() && d > 0.0) {
        return Err(Error::Config(format!("eta and d must be finite and > 0, got eta={eta}, d={d}")));
    }
    Ok(())
}

fn single(p: &ScaleProfile, eta: f64, d: f64, variant: NormVariant) -> Result<BoundReport> {
    check_step(eta, d)?;
    let s = sums(p, variant.try_into()?);
    let term1 = eta * d * s.coeff / s.total;
    let term2 = term1 * s.ratio;
    Ok(BoundReport {
        variant,
        depth: Depth::Single(p.len()),
        eta,
        d,
        term1,
        term2,
        coupling: 0.0,
        total: term1 + term2,
        encoder_update: None,
    })
}

/// Pre-LN encoder bound `ΔF^pre`.
pub fn bound_preln(p: &ScaleProfile, eta: f64, d: f64) -> Result<BoundReport> {
    single(p, eta, d, NormVariant::PreLN)
}

/// Sub-LN encoder bound `ΔF^sub`.
pub fn bound_subln(p: &ScaleProfile, eta: f64, d: f64) -> Result<BoundReport> {
    single(p, eta, d, NormVariant::SubLN)
}

/// Order-of-magnitude Post-LN surrogate `η·d·Σ(v_l² + w_l²)`.
pub fn bound_postln(p: &ScaleProfile, eta: f64, d: f64) -> Result<f64> {
    check_step(eta, d)?;
    Ok(eta * d * (0..p.len()).map(|i| p.coefficient(i, Analyzed::Pre)).sum::<f64>())
}

/// Bound for any variant as a report (Post-LN puts the surrogate in `term1`).
pub fn bound_for(variant: NormVariant, p: &ScaleProfile, eta: f64, d: f64) -> Result<BoundReport> {
    match variant {
        NormVariant::PostLN => {
            let total = bound_postln(p, eta, d)?;
            Ok(BoundReport {
                variant,
                depth: Depth::Single(p.len()),
                eta,
                d,
                term1: total,
                term2: 0.0,
                coupling: 0.0,
                total,
                encoder_update: None,
            })
        }
        _ => single(p, eta, d, variant),
    }
}

/// Encoder-decoder bound `ΔF_ed ≤ ΔF_d + coupling·ΔF_e`. Decoder sub-layer
/// `l` (1-indexed) is cross-attention when `l % 3 == 1`... counting from the
/// self-attention that opens each decoder layer, i.e. positions 1, 4, 7, ….
pub fn bound_encdec(enc: &ScaleProfile, dec: &ScaleProfile, eta: f64, d: f64, variant: NormVariant) -> Result<BoundReport> {
    check_step(eta, d)?;
    if dec.len() % 3 != 0 {
        return Err(Error::Config(format!(
            "decoder profile length {} is not 3M",
            dec.len()
        )));
    }
    let kind: Analyzed = variant.try_into()?;
    let e = sums(enc, kind);
    let dsum = sums(dec, kind);
    let enc_update = eta * d * e.coeff / e.total * (1.0 + e.ratio);
    let term1 = eta * d * dsum.coeff / dsum.total;
    let term2 = term1 * dsum.ratio;
    let cross: f64 = (0..dec.len())
        .filter(|i| (i + 1) % 3 == 1)
        .map(|i| dec.branch_weight(i, kind))
        .sum();
    let coupling = cross / dsum.total * (1.0 + dsum.ratio) * enc_update;
    Ok(BoundReport {
        variant,
        depth: Depth::EncoderDecoder {
            encoder: enc.len(),
            decoder: dec.len(),
        },
        eta,
        d,
        term1,
        term2,
        coupling,
        total: term1 + term2 + coupling,
        encoder_update: Some(enc_update),
    })
}

fn check_layer(p: &ScaleProfile, l: usize) -> Result<()> {
    if l == 0 || l > p.len() {
        return Err(Error::Index {
            op: "sub-layer",
            index: l,
            extent: p.len(),
        });
    }
    Ok(())
}

/// Backward sensitivity `δ^l` of the backbone output to sub-layer `l`.
pub fn delta_l(p: &ScaleProfile, l: usize, variant: NormVariant) -> Result<f64> {
    check_layer(p, l)?;
    let kind = variant.try_into()?;
    let s = sums(p, kind);
    let downstream: f64 = (l..p.len())
        .map(|k| p.branch_weight(k, kind).sqrt() / s.prefix[k - 1].sqrt())
        .sum();
    Ok((1.0 + downstream) / s.total.sqrt())
}

/// Backward second moment `q̄^l`.
pub fn qbar_l(p: &ScaleProfile, l: usize, d: f64, variant: NormVariant) -> Result<f64> {
    check_layer(p, l)?;
    let kind = variant.try_into()?;
    let s = sums(p, kind);
    let downstream: f64 = (l..p.len()).map(|k| p.branch_weight(k, kind) / s.prefix[k - 1]).sum();
    Ok(d / s.total * (1.0 + downstream))
}

/// Forward second moment `p̄^l` of the sub-layer's inner activation.
pub fn pbar_l(p: &ScaleProfile, l: usize, variant: NormVariant) -> Result<f64> {
    check_layer(p, l)?;
    match Analyzed::try_from(variant)? {
        Analyzed::Pre => Ok(p.w[l - 1] * p.w[l - 1]),
        Analyzed::Sub => Ok(1.0),
    }
}

/// Sub-layer `j`'s share `c_j / A` of the first bound term; the quantity
/// compared between Pre-LN and Sub-LN when one layer's input scale explodes.
pub fn layer_term(p: &ScaleProfile, j: usize, variant: NormVariant) -> Result<f64> {
    check_layer(p, j)?;
    let kind = variant.try_into()?;
    Ok(p.coefficient(j - 1, kind) / sums(p, kind).total)
}

/// `η·Σ_l c_l·q̄^l` with the layer-local `q̄^l`. Never exceeds the theorem
/// bound, which replaces every `q̄^l` by the largest one, `q̄^1`.
pub fn assembled_update(p: &ScaleProfile, eta: f64, d: f64, variant: NormVariant) -> Result<f64> {
    let kind: Analyzed = variant.try_into()?;
    let mut acc = 0.0;
    for l in 1..=p.len() {
        acc += p.coefficient(l - 1, kind) * qbar_l(p, l, d, variant)?;
    }
    Ok(eta * acc)
}

/// `H_n = Σ_{k=1}^{n} 1/k`, with `H_0 = 0`.
pub fn harmonic(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum()
}
