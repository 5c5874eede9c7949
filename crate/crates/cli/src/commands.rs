use anyhow::{anyhow, bail, Context, Result};
use subln_core::init::{self, gamma_for, InitMode, InitPlan};
use subln_core::lab::{
    self, depth_svg, grad_check_random, Arm, DepthSweepConfig, LossKind, LrSweepConfig, LrSweepResult, Reduction,
    Task, TrainConfig,
};
use subln_core::layers::ParamRole;
use subln_core::theory::{bound_encdec, bound_for, BoundReport, ScaleProfile};
use subln_core::{Family, ModelConfig, NormVariant};

use crate::config::RunConfig;
use crate::output::{csv_with_header, write_atomic};
use crate::Outcome;

fn role_list(roles: &[ParamRole]) -> String {
    roles
        .iter()
        .map(|r| serde_json::to_value(r).expect("role serializes").as_str().unwrap_or_default().to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Six decimals, truncated toward zero.
fn six_decimals(x: f64) -> String {
    format!("{:.6}", (x * 1e6).trunc() / 1e6)
}

pub fn gamma(c: &RunConfig) -> Result<Outcome> {
    let family = c.family.ok_or_else(|| anyhow!("gamma needs --family"))?;
    let g = gamma_for(family, c.n.unwrap_or(0), c.m.unwrap_or(0))?;
    if let Some(e) = g.encoder {
        println!("gamma_encoder={}", six_decimals(e));
    }
    if let Some(d) = g.decoder {
        println!("gamma_decoder={}", six_decimals(d));
    }
    println!("scaled={}", role_list(&InitPlan::SCALED));
    println!("unscaled={}", role_list(&InitPlan::UNSCALED));
    Ok(Outcome::Ok)
}

enum Gain {
    Auto,
    Fixed(f64),
}

fn parse_gain(s: Option<&str>) -> Result<Gain> {
    match s.unwrap_or("auto") {
        "auto" => Ok(Gain::Auto),
        "unit" => Ok(Gain::Fixed(1.0)),
        other => {
            let g: f64 = other.parse().with_context(|| format!("config key `gamma`: `{other}` is not auto, unit or a number"))?;
            if !(g.is_finite() && g > 0.0) {
                bail!("config key `gamma` must be > 0");
            }
            Ok(Gain::Fixed(g))
        }
    }
}

pub fn bounds(c: &RunConfig) -> Result<Outcome> {
    let variant = c.variant.unwrap_or(NormVariant::SubLN);
    let eta = c.eta.unwrap_or(1.0);
    let d = c.d.unwrap_or(1) as f64;
    let gain = parse_gain(c.gamma.as_deref())?;
    let mut reports: Vec<BoundReport> = Vec::new();
    if c.family == Some(Family::EncoderDecoder) {
        let (n, m) = (c.n.unwrap_or(0), c.m.unwrap_or(0));
        let (ge, gd) = match gain {
            Gain::Auto => {
                let g = gamma_for(Family::EncoderDecoder, n, m)?;
                (g.encoder.unwrap_or(1.0), g.decoder.unwrap_or(1.0))
            }
            Gain::Fixed(g) => (g, g),
        };
        let enc = ScaleProfile::uniform(2 * n, ge)?;
        let dec = ScaleProfile::uniform(3 * m, gd)?;
        reports.push(bound_encdec(&enc, &dec, eta, d, variant)?);
    } else {
        let ls = c.l.clone().ok_or_else(|| anyhow!("bounds needs --L (or --family encoder-decoder with --n/--m)"))?;
        for l in ls {
            let g = match gain {
                Gain::Auto if l >= 2 => (l as f64).ln().sqrt(),
                Gain::Auto => bail!("gamma auto needs L >= 2, got {l}"),
                Gain::Fixed(g) => g,
            };
            reports.push(bound_for(variant, &ScaleProfile::uniform(l, g)?, eta, d)?);
        }
    }
    let mut body = String::from(BoundReport::CSV_HEADER);
    body.push('\n');
    for r in &reports {
        body.push_str(&r.csv_row());
        body.push('\n');
    }
    let text = csv_with_header(&c.header_line(), &body);
    print!("{text}");
    if c.out.is_some() {
        write_atomic(&c.out_dir().join("bounds.csv"), text.as_bytes())?;
    }
    Ok(Outcome::Ok)
}

pub fn sweep_depth(c: &RunConfig) -> Result<Outcome> {
    let arms = c.parsed_arms()?.unwrap_or_else(|| {
        vec![
            Arm::new(NormVariant::SubLN, InitMode::Magneto),
            Arm::new(NormVariant::PreLN, InitMode::Unit),
        ]
    });
    let mut sweep = DepthSweepConfig::new(
        c.l.clone().unwrap_or_else(|| vec![4, 8, 16, 32, 64]),
        arms,
        c.eta.unwrap_or(1e-3),
        c.d.unwrap_or(64),
    );
    sweep.d_ff = c.d_ff;
    if let Some(v) = c.vocab {
        sweep.vocab_size = v;
    }
    if let Some(n) = c.n_seeds {
        sweep.n_seeds = n;
    }
    sweep.base_seed = c.seed.unwrap_or(0);
    sweep.loss = c.loss.unwrap_or(LossKind::CrossEntropy);
    sweep.jobs = c.jobs.unwrap_or(1);

    let result = lab::depth_sweep(&sweep)?;
    let dir = c.out_dir();
    write_atomic(&dir.join("depth_sweep.csv"), csv_with_header(&c.header_line(), &result.to_csv()).as_bytes())?;
    if c.svg.unwrap_or(true) {
        write_atomic(&dir.join("depth_sweep.svg"), depth_svg(&result).as_bytes())?;
    }
    for &arm in &sweep.arms {
        let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.4}"));
        let fit = result.ln_fit(arm);
        println!(
            "{arm} spread={} ln_slope={} r2={} spearman_vs_bound={}",
            fmt(result.spread(arm)),
            fmt(fit.map(|f| f.slope)),
            fmt(fit.map(|f| f.r_squared)),
            fmt(result.bound_spearman(arm)),
        );
    }
    if result.measurements.iter().any(|(m, _)| m.diverged) {
        return Ok(Outcome::Diverged);
    }
    Ok(Outcome::Ok)
}

pub fn sweep_lr(c: &RunConfig) -> Result<Outcome> {
    let arms = c.parsed_arms()?.unwrap_or_else(|| {
        vec![
            Arm::new(NormVariant::SubLN, InitMode::Magneto),
            Arm::new(NormVariant::PreLN, InitMode::Unit),
            Arm::new(NormVariant::PostLN, InitMode::Unit),
        ]
    });
    let grid = c.eta_grid.clone().unwrap_or_else(|| vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2]);
    let mut sweep = LrSweepConfig::new(c.task.unwrap_or(Task::Copy), arms, grid, c.steps.unwrap_or(500));
    sweep.layers = c.layers.unwrap_or(sweep.layers);
    sweep.d = c.d.unwrap_or(sweep.d);
    sweep.d_ff = c.d_ff;
    sweep.batch = c.batch.unwrap_or(sweep.batch);
    sweep.seq_len = c.seq_len.unwrap_or(sweep.seq_len);
    sweep.reduction = c.reduction.unwrap_or(Reduction::Sum);
    sweep.seed = c.seed.unwrap_or(0);
    sweep.jobs = c.jobs.unwrap_or(1);

    let result = lab::lr_divergence_sweep(&sweep)?;
    write_atomic(
        &c.out_dir().join("lr_sweep.csv"),
        csv_with_header(&c.header_line(), &result.to_csv()).as_bytes(),
    )?;
    print_lr_summary(&result);
    Ok(Outcome::Ok)
}

fn print_lr_summary(result: &LrSweepResult) {
    for cell in &result.cells {
        println!(
            "{} eta={} initial_loss={:.4} final_loss={:.4} diverged={}",
            cell.arm, cell.eta, cell.initial_loss, cell.final_loss, cell.diverged
        );
    }
    for &arm in &result.config.arms {
        match result.max_stable_eta(arm) {
            Some(e) => println!("{arm} max_stable_eta={e}"),
            None => println!("{arm} max_stable_eta=none"),
        }
    }
}

pub fn gradcheck(c: &RunConfig) -> Result<Outcome> {
    let family = c.family.unwrap_or(Family::EncoderOnly);
    let variant = c.variant.unwrap_or(NormVariant::SubLN);
    let d = c.d.unwrap_or(8);
    let (n, m) = match family {
        Family::EncoderOnly => (c.n.unwrap_or(1), 0),
        Family::DecoderOnly => (0, c.m.unwrap_or(1)),
        Family::EncoderDecoder => (c.n.unwrap_or(1), c.m.unwrap_or(1)),
    };
    let base = match family {
        Family::EncoderOnly => ModelConfig::encoder_only(variant, n, d),
        Family::DecoderOnly => ModelConfig::decoder_only(variant, m, d),
        Family::EncoderDecoder => ModelConfig::encoder_decoder(variant, n, m, d),
    };
    let model = base
        .with_d_ff(c.d_ff.unwrap_or(4 * d))
        .with_heads(c.heads.unwrap_or(1))
        .with_vocab(c.vocab.unwrap_or(8))
        .with_max_positions(c.positions.unwrap_or(4));
    let tolerance = c.tolerance.unwrap_or(lab::GRAD_CHECK_TOLERANCE);
    let report = grad_check_random(&model, c.init.unwrap_or(InitMode::Magneto), c.seed.unwrap_or(0), tolerance)?;
    let verdict = if report.passed { "PASS" } else { "FAIL" };
    println!(
        "{verdict} max_rel_err={:.3e} params={} tolerance={:e}",
        report.max_rel_err, report.n_params, tolerance
    );
    if !report.passed {
        if let Some((slot, i)) = report.worst {
            println!("worst={slot:?}[{i}]");
        }
        return Ok(Outcome::Diverged);
    }
    Ok(Outcome::Ok)
}

pub fn train_toy(c: &RunConfig) -> Result<Outcome> {
    let task = c.task.unwrap_or(Task::Copy);
    let variant = c.variant.unwrap_or(NormVariant::SubLN);
    let init_mode = c.init.unwrap_or(InitMode::Magneto);
    let d = c.d.unwrap_or(32);
    let mut train = TrainConfig::new(task, c.eta.unwrap_or(1e-3), c.steps.unwrap_or(200));
    train.batch = c.batch.unwrap_or(train.batch);
    train.seq_len = c.seq_len.unwrap_or(train.seq_len);
    train.reduction = c.reduction.unwrap_or(Reduction::Sum);
    train.seed = c.seed.unwrap_or(0);
    let model_config = task
        .model_config(variant, c.layers.unwrap_or(2), d, train.seq_len)
        .with_d_ff(c.d_ff.unwrap_or(4 * d))
        .with_seed(train.seed);
    let mut model = init::initialized(&model_config, init_mode)?;
    let run = lab::train(&mut model, &train)?;

    let result = LrSweepResult {
        config: LrSweepConfig::new(task, vec![Arm::new(variant, init_mode)], vec![train.eta], train.steps),
        cells: vec![lab::LrCell {
            arm: Arm::new(variant, init_mode),
            eta: train.eta,
            initial_loss: run.losses[0],
            final_loss: *run.losses.last().expect("at least one step"),
            diverged: run.diverged(),
            run: run.clone(),
        }],
    };
    let dir = c.out_dir();
    write_atomic(&dir.join("train_loss.csv"), csv_with_header(&c.header_line(), &result.to_csv()).as_bytes())?;
    write_atomic(&dir.join("model.ckpt"), &model.to_checkpoint_bytes())?;
    print_lr_summary(&result);
    if run.diverged() {
        return Ok(Outcome::Diverged);
    }
    Ok(Outcome::Ok)
}
