//! Naive row-major reference forward pass over nested `Vec`s, independent of
//! the tape.

#![allow(dead_code)]

use subln_core::layers::{AttentionSubLayer, CrossAttentionSubLayer, FfnSubLayer, SubLayer};
use subln_core::model::{ModelInput, Sequence};
use subln_core::{Family, NormVariant, Tensor, TransformerModel};

pub type Mat = Vec<Vec<f64>>;

pub const EPS: f64 = 1e-5;

pub fn mat(t: &Tensor) -> Mat {
    let c = t.cols();
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

/// `x · wᵀ` with `w` stored `[out × in]`.
pub fn linear(x: &Mat, w: &Tensor) -> Mat {
    let w = mat(w);
    x.iter()
        .map(|row| w.iter().map(|wr| wr.iter().zip(row).map(|(a, b)| a * b).sum()).collect())
        .collect()
}

pub fn ln_row(r: &[f64]) -> Vec<f64> {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    r.iter().map(|x| (x - mean) / (var + EPS).sqrt()).collect()
}

pub fn ln(x: &Mat) -> Mat {
    x.iter().map(|r| ln_row(r)).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn softmax(r: &[f64]) -> Vec<f64> {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Per-head scaled dot-product attention.
pub fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize, causal: bool) -> Mat {
    let d = q[0].len();
    let hd = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for (i, qi) in q.iter().enumerate() {
            let mut scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            if causal {
                scores.truncate(i + 1);
            }
            let p = softmax(&scores);
            for (j, pj) in p.iter().enumerate() {
                for c in cols.clone() {
                    out[i][c] += pj * v[j][c];
                }
            }
        }
    }
    out
}

pub fn msa(l: &AttentionSubLayer, x: &Mat) -> Mat {
    let h = if l.variant == NormVariant::PostLN { x.clone() } else { ln(x) };
    let a = attend(&linear(&h, &l.wq), &linear(&h, &l.wk), &linear(&h, &l.wv), l.head_count, l.is_causal);
    let a = if l.variant == NormVariant::SubLN { ln(&a) } else { a };
    let r = add(x, &linear(&a, &l.wo));
    if l.variant == NormVariant::PostLN {
        ln(&r)
    } else {
        r
    }
}

pub fn ffn(l: &FfnSubLayer, x: &Mat) -> Mat {
    let h = if l.variant == NormVariant::PostLN { x.clone() } else { ln(x) };
    let u: Mat = linear(&h, &l.w1).iter().map(|r| r.iter().map(|&z| gelu(z)).collect()).collect();
    let u = if l.variant == NormVariant::SubLN { ln(&u) } else { u };
    let r = add(x, &linear(&u, &l.w2));
    if l.variant == NormVariant::PostLN {
        ln(&r)
    } else {
        r
    }
}

pub fn cross(l: &CrossAttentionSubLayer, y: &Mat, enc: &Mat) -> Mat {
    let h = if l.variant == NormVariant::PreLN { ln(y) } else { y.clone() };
    let a = attend(&linear(&h, &l.wq), &linear(enc, &l.wk), &linear(enc, &l.wv), l.head_count, false);
    let a = if l.variant == NormVariant::SubLN { ln(&a) } else { a };
    let r = add(y, &linear(&a, &l.wo));
    if l.variant == NormVariant::PostLN {
        ln(&r)
    } else {
        r
    }
}

fn embed(m: &TransformerModel, s: &Sequence) -> Mat {
    match s {
        Sequence::Vectors(x) => mat(x),
        Sequence::Tokens(ids) => {
            let tok = mat(&m.token_embedding);
            let pos = mat(&m.position_embedding);
            ids.iter()
                .enumerate()
                .map(|(t, &i)| tok[i].iter().zip(&pos[t]).map(|(a, b)| a + b).collect())
                .collect()
        }
    }
}

fn stack(layers: &[SubLayer], mut h: Mat, enc: Option<&Mat>, final_ln: bool) -> Mat {
    for l in layers {
        h = match l {
            SubLayer::SelfAttention(a) => msa(a, &h),
            SubLayer::Ffn(f) => ffn(f, &h),
            SubLayer::CrossAttention(c) => cross(c, &h, enc.expect("encoder output")),
        };
    }
    if final_ln {
        ln(&h)
    } else {
        h
    }
}

/// `[T × V]` logits.
pub fn forward(m: &TransformerModel, input: &ModelInput) -> Mat {
    let h = match (m.config().family, input) {
        (Family::EncoderOnly, ModelInput::Single(s)) => stack(&m.encoder, embed(m, s), None, m.encoder_final_ln),
        (Family::DecoderOnly, ModelInput::Single(s)) => stack(&m.decoder, embed(m, s), None, m.decoder_final_ln),
        (Family::EncoderDecoder, ModelInput::Pair { source, target }) => {
            let enc = stack(&m.encoder, embed(m, source), None, m.encoder_final_ln);
            stack(&m.decoder, embed(m, target), Some(&enc), m.decoder_final_ln)
        }
        _ => panic!("input does not match family"),
    };
    linear(&h, &m.w_vocab)
}

pub fn cross_entropy(logits: &Mat, labels: &[usize]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(r, &y)| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            lse - r[y]
        })
        .sum::<f64>()
        / labels.len() as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}
