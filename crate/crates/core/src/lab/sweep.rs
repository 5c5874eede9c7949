use serde::{Deserialize, Serialize};

use super::probe::{measure_update, LossKind, UpdateMeasurement, UpdateProbeConfig};
use super::stats::{linear_fit, mean_std, spearman, LinearFit};
use super::{par_map, Arm};
use crate::error::{Error, Result};
use crate::init::InitPlan;
use crate::model::ModelConfig;
use crate::theory::{bound_for, ScaleProfile};

/// Encoder-only depth sweep; each `L` is realized as `N = L / 2` layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthSweepConfig {
    pub l_values: Vec<usize>,
    pub arms: Vec<Arm>,
    pub eta: f64,
    pub d: usize,
    /// Defaults to `4d`.
    pub d_ff: Option<usize>,
    pub vocab_size: usize,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub loss: LossKind,
    pub jobs: usize,
}

impl DepthSweepConfig {
    pub fn new(l_values: Vec<usize>, arms: Vec<Arm>, eta: f64, d: usize) -> Self {
        Self {
            l_values,
            arms,
            eta,
            d,
            d_ff: None,
            vocab_size: 32,
            n_seeds: 5,
            base_seed: 0,
            loss: LossKind::CrossEntropy,
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_values.is_empty() || self.arms.is_empty() {
            return Err(Error::Config("depth sweep needs at least one L value and one arm".into()));
        }
        if self.l_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("l_values must be strictly ascending".into()));
        }
        if let Some(&l) = self.l_values.iter().find(|&&l| l < 2 || l % 2 != 0) {
            return Err(Error::Config(format!("L = {l} is not realizable as 2N")));
        }
        Ok(())
    }

    fn probe(&self, arm: Arm, l: usize) -> UpdateProbeConfig {
        let model = ModelConfig::encoder_only(arm.variant, l / 2, self.d)
            .with_d_ff(self.d_ff.unwrap_or(4 * self.d))
            .with_vocab(self.vocab_size)
            .with_seed(self.base_seed);
        UpdateProbeConfig::new(model, arm.init, self.eta)
            .with_seeds(self.n_seeds)
            .with_loss(self.loss)
    }
}

/// Per-(arm, L) aggregate over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthCell {
    pub arm: Arm,
    #[serde(rename = "L")]
    pub l: usize,
    /// Mean and sample std of `ΔF` over non-diverged seeds.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n_diverged: usize,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub config: DepthSweepConfig,
    pub cells: Vec<DepthCell>,
    pub measurements: Vec<(UpdateMeasurement, f64)>,
}

impl SweepResult {
    pub const CSV_HEADER: &'static str = "variant,init,L,eta,d,seed,delta_f,diverged,bound";

    /// One row per trial; `delta_f` is empty for diverged trials.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (m, bound) in &self.measurements {
            let df = m.delta_f.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                m.variant, m.init, m.sublayers, m.eta, self.config.d, m.seed, df, m.diverged, bound
            ));
        }
        out
    }

    pub fn cells_for(&self, arm: Arm) -> Vec<&DepthCell> {
        self.cells.iter().filter(|c| c.arm == arm).collect()
    }

    /// `max / min` of the per-L means for `arm`; `None` if any cell has no mean.
    pub fn spread(&self, arm: Arm) -> Option<f64> {
        let means: Option<Vec<f64>> = self.cells_for(arm).iter().map(|c| c.mean).collect();
        let means = means?;
        let max = means.iter().cloned().fold(f64::MIN, f64::max);
        let min = means.iter().cloned().fold(f64::MAX, f64::min);
        Some(max / min)
    }

    /// Least-squares fit of mean `ΔF` against `ln L`.
    pub fn ln_fit(&self, arm: Arm) -> Option<LinearFit> {
        let cells = self.cells_for(arm);
        let xs: Vec<f64> = cells.iter().map(|c| (c.l as f64).ln()).collect();
        let ys: Option<Vec<f64>> = cells.iter().map(|c| c.mean).collect();
        linear_fit(&xs, &ys?)
    }

    /// Rank correlation between mean `ΔF` and the bound across the grid.
    pub fn bound_spearman(&self, arm: Arm) -> Option<f64> {
        let cells = self.cells_for(arm);
        let ys: Option<Vec<f64>> = cells.iter().map(|c| c.mean).collect();
        let bounds: Vec<f64> = cells.iter().map(|c| c.bound).collect();
        spearman(&ys?, &bounds)
    }
}

fn cell_bound(arm: Arm, config: &DepthSweepConfig, l: usize) -> Result<f64> {
    let probe = config.probe(arm, l);
    let gain = InitPlan::for_mode(arm.init, &probe.model)?.gamma_encoder;
    let profile = ScaleProfile::uniform(l, gain)?;
    Ok(bound_for(arm.variant, &profile, config.eta, config.d as f64)?.total)
}

/// Runs every (arm, L, seed) trial. Trials are independent and may run on
/// `config.jobs` threads; results are merged in grid order.
pub fn depth_sweep(config: &DepthSweepConfig) -> Result<SweepResult> {
    config.validate()?;
    let mut grid = Vec::new();
    for &arm in &config.arms {
        for &l in &config.l_values {
            let probe = config.probe(arm, l);
            probe.validate()?;
            for i in 0..config.n_seeds as u64 {
                grid.push((arm, l, config.base_seed + i));
            }
        }
    }
    let trials = par_map(&grid, config.jobs, |&(arm, l, seed)| measure_update(&config.probe(arm, l), seed));

    let mut measurements = Vec::with_capacity(trials.len());
    let mut cells = Vec::new();
    let mut it = trials.into_iter();
    for &arm in &config.arms {
        for &l in &config.l_values {
            let bound = cell_bound(arm, config, l)?;
            let mut values = Vec::new();
            let mut n_diverged = 0;
            for _ in 0..config.n_seeds {
                let m = it.next().expect("one trial per grid point")?;
                match m.delta_f {
                    Some(v) => values.push(v),
                    None => n_diverged += 1,
                }
                measurements.push((m, bound));
            }
            let stats = mean_std(&values);
            cells.push(DepthCell {
                arm,
                l,
                mean: stats.map(|s| s.0),
                std: stats.map(|s| s.1),
                n_diverged,
                bound,
            });
        }
    }
    Ok(SweepResult {
        config: config.clone(),
        cells,
        measurements,
    })
}
