use proptest::prelude::*;
use subln_core::theory::*;
use subln_core::NormVariant;

/// Direct double sum over (l, k), as written, with no factorization.
fn brute(v: &[f64], w: &[f64], eta: f64, d: f64, variant: NormVariant) -> f64 {
    let l_count = v.len();
    let a = |i: usize| match variant {
        NormVariant::PreLN => v[i] * v[i] * w[i] * w[i],
        _ => v[i] * v[i],
    };
    let c = |i: usize| match variant {
        NormVariant::PreLN => v[i] * v[i] + w[i] * w[i],
        _ => 1.0 + v[i] * v[i] / (w[i] * w[i]),
    };
    let total: f64 = (0..l_count).map(a).sum();
    let mut first = 0.0;
    let mut double = 0.0;
    for l in 0..l_count {
        first += c(l) / total;
        for k in 1..l_count {
            let prefix: f64 = (0..k).map(a).sum();
            double += c(l) / total * a(k) / prefix;
        }
    }
    eta * d * (first + double)
}

fn harmonic_exact(n: usize) -> f64 {
    // Summed from the small end for accuracy.
    (1..=n).rev().map(|k| 1.0 / k as f64).sum()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn small_profile_values() {
    let unit = |l| ScaleProfile::uniform(l, 1.0).unwrap();
    assert_eq!(bound_preln(&unit(1), 1.0, 1.0).unwrap().total, 2.0);
    assert_eq!(bound_preln(&unit(2), 1.0, 1.0).unwrap().total, 4.0);
    assert_eq!(bound_subln(&unit(1), 1.0, 1.0).unwrap().total, 2.0);
    assert_eq!(bound_postln(&unit(4), 1.0, 1.0).unwrap(), 8.0);
    for l in 3..200 {
        assert!(bound_postln(&unit(l), 1.0, 1.0).unwrap() > bound_preln(&unit(l), 1.0, 1.0).unwrap().total);
    }
}

#[test]
fn subln_at_derived_gain_reference_values() {
    // Values from a 30-digit evaluation of 2(1 + H_{L-1}) / ln L.
    for (l, want) in [(4, 4.087635949185396), (64, 2.754713604056550), (4096, 2.379210850127567)] {
        let g = (l as f64).ln().sqrt();
        let got = bound_subln(&ScaleProfile::uniform(l, g).unwrap(), 1.0, 1.0).unwrap().total;
        assert!(rel(got, want) < 1e-12, "L={l}: {got} vs {want}");
    }
}

#[test]
fn harmonic_closed_forms() {
    for l in 1..=1024 {
        let h = harmonic_exact(l - 1);
        let pre = bound_preln(&ScaleProfile::uniform(l, 1.0).unwrap(), 1.0, 1.0).unwrap().total;
        assert!(rel(pre, 2.0 + 2.0 * h) < 1e-12, "L={l}");
        if l >= 2 {
            let g2 = (l as f64).ln();
            let sub = bound_subln(&ScaleProfile::uniform(l, g2.sqrt()).unwrap(), 1.0, 1.0).unwrap().total;
            assert!(rel(sub, 2.0 * (1.0 + h) / g2) < 1e-12, "L={l}");
        }
    }
    assert!((harmonic(4) - 25.0 / 12.0).abs() < 1e-15);
    assert_eq!(harmonic(0), 0.0);
}

#[test]
fn exploding_layer_example_l8() {
    let mut w = vec![1.0; 8];
    w[5] = 10.0;
    let p = ScaleProfile::new(vec![1.0; 8], w).unwrap();
    let sub = layer_term(&p, 6, NormVariant::SubLN).unwrap();
    let pre = layer_term(&p, 6, NormVariant::PreLN).unwrap();
    assert!(sub < pre, "{sub} vs {pre}");
}

#[test]
fn delta_at_last_layer_unit_preln() {
    for l in [1, 2, 7, 32] {
        let p = ScaleProfile::uniform(l, 1.0).unwrap();
        let got = delta_l(&p, l, NormVariant::PreLN).unwrap();
        assert!((got - 1.0 / (l as f64).sqrt()).abs() < 1e-15);
    }
}

#[test]
fn encdec_hand_expansion_unit_m1_n1() {
    let enc = ScaleProfile::uniform(2, 1.0).unwrap();
    let dec = ScaleProfile::uniform(3, 1.0).unwrap();
    // ΔF_e: 2·2/2 + 2·2/2·(1/1) = 4; ΔF_d: 2·3/3 + 2·3/3·(1/1 + 1/2) = 5;
    // coupling: (1/3)·(1 + 1 + 1/2)·ΔF_e = 10/3.
    for variant in [NormVariant::SubLN, NormVariant::PreLN] {
        let r = bound_encdec(&enc, &dec, 1.0, 1.0, variant).unwrap();
        assert!((r.term1 + r.term2 - 5.0).abs() < 1e-14);
        assert!((r.coupling - 10.0 / 3.0).abs() < 1e-14);
        assert!((r.total - 25.0 / 3.0).abs() < 1e-14);
    }
}

#[test]
fn decoder_bound_at_derived_gain() {
    for m in 1..=64usize {
        let gd = ((3 * m) as f64).ln().sqrt();
        let dec = ScaleProfile::uniform(3 * m, gd).unwrap();
        let enc = ScaleProfile::uniform(2, 1.0).unwrap();
        let r = bound_encdec(&enc, &dec, 1.0, 1.0, NormVariant::SubLN).unwrap();
        let dec_only = r.term1 + r.term2;
        if m == 1 {
            // 2(1 + H_2)/ln 3 = 5/ln 3
            assert!((dec_only - 5.0 / 3f64.ln()).abs() < 1e-12);
        } else {
            assert!((2.0..=4.2).contains(&dec_only), "M={m}: {dec_only}");
        }
    }
}

#[test]
fn coupling_is_depth_stable_at_derived_gains() {
    let mut values = Vec::new();
    for k in [2usize, 4, 8, 16, 32] {
        let g = subln_core::init::gamma_for(subln_core::Family::EncoderDecoder, k, k).unwrap();
        let enc = ScaleProfile::uniform(2 * k, g.encoder.unwrap()).unwrap();
        let dec = ScaleProfile::uniform(3 * k, g.decoder.unwrap()).unwrap();
        values.push(bound_encdec(&enc, &dec, 1.0, 1.0, NormVariant::SubLN).unwrap().coupling);
    }
    let max = values.iter().cloned().fold(f64::MIN, f64::max);
    let min = values.iter().cloned().fold(f64::MAX, f64::min);
    assert!(max / min < 2.5, "{values:?}");
}

#[test]
fn subln_pbar_is_one() {
    let p = ScaleProfile::new(vec![0.1, 3.0, 7.0], vec![9.0, 0.2, 1.0]).unwrap();
    for l in 1..=3 {
        assert_eq!(pbar_l(&p, l, NormVariant::SubLN).unwrap(), 1.0);
        assert_eq!(pbar_l(&p, l, NormVariant::PreLN).unwrap(), p.w()[l - 1].powi(2));
    }
}

fn profile() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|l| (prop::collection::vec(0.1f64..5.0, l), prop::collection::vec(0.1f64..5.0, l)))
}

proptest! {
    #[test]
    fn fast_bounds_match_brute_double_sum((v, w) in profile(), eta in 1e-4f64..1.0, d in 1.0f64..512.0) {
        let p = ScaleProfile::new(v.clone(), w.clone()).unwrap();
        for (variant, got) in [
            (NormVariant::PreLN, bound_preln(&p, eta, d).unwrap()),
            (NormVariant::SubLN, bound_subln(&p, eta, d).unwrap()),
        ] {
            let want = brute(&v, &w, eta, d, variant);
            prop_assert!(rel(got.total, want) < 1e-12);
            prop_assert!(got.total > 0.0);
            prop_assert!((got.term1 + got.term2 + got.coupling - got.total).abs() <= 1e-12 * got.total);
        }
    }

    #[test]
    fn assembly_with_qbar(v_w in profile(), d in 1.0f64..64.0) {
        let (v, w) = v_w;
        let p = ScaleProfile::new(v.clone(), w.clone()).unwrap();
        for variant in [NormVariant::PreLN, NormVariant::SubLN] {
            let bound = bound_for(variant, &p, 0.01, d).unwrap().total;
            // Every layer weighted by the first layer's backward moment.
            let q1 = qbar_l(&p, 1, d, variant).unwrap();
            let coeff: f64 = (0..v.len()).map(|i| match variant {
                NormVariant::PreLN => v[i] * v[i] + w[i] * w[i],
                _ => 1.0 + v[i] * v[i] / (w[i] * w[i]),
            }).sum();
            prop_assert!(rel(0.01 * coeff * q1, bound) < 1e-12);
            let local = assembled_update(&p, 0.01, d, variant).unwrap();
            prop_assert!(local <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn qbar_is_nonincreasing_along_the_stack(v_w in profile()) {
        let (v, w) = v_w;
        let p = ScaleProfile::new(v.clone(), w).unwrap();
        for variant in [NormVariant::PreLN, NormVariant::SubLN] {
            for l in 1..v.len() {
                prop_assert!(qbar_l(&p, l, 1.0, variant).unwrap() >= qbar_l(&p, l + 1, 1.0, variant).unwrap());
            }
        }
    }

    #[test]
    fn exploding_layer_term(l in 2usize..32, j_frac in 0.0f64..1.0, factor in 4.0f64..100.0, seed_scales in prop::collection::vec(0.2f64..2.0, 64)) {
        let j = ((l as f64 - 1.0) * j_frac).round() as usize;
        let v: Vec<f64> = seed_scales[..l].to_vec();
        let mut w: Vec<f64> = seed_scales[32..32 + l].to_vec();
        let others = w.iter().enumerate().filter(|&(i, _)| i != j).map(|(_, &x)| x).fold(0.0, f64::max);
        w[j] = factor * others;
        let p = ScaleProfile::new(v, w).unwrap();
        let sub = layer_term(&p, j + 1, NormVariant::SubLN).unwrap();
        let pre = layer_term(&p, j + 1, NormVariant::PreLN).unwrap();
        prop_assert!(sub <= pre);
    }
}
