//! Empirical checks: one-step update probes, depth and learning-rate sweeps,
//! and finite-difference gradient checks.

mod gradcheck;
mod probe;
pub mod stats;
mod svg;
mod sweep;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::InitMode;
use crate::layers::NormVariant;

pub use gradcheck::{grad_check, grad_check_random, GradCheckReport, GRAD_CHECK_TOLERANCE};
pub use probe::{measure_trials, measure_update, LossKind, UpdateMeasurement, UpdateProbeConfig};
pub use svg::depth_svg;
pub use sweep::{depth_sweep, DepthCell, DepthSweepConfig, SweepResult};
pub use train::{
    lr_divergence_sweep, train, DivergenceMonitor, LrCell, LrSweepConfig, LrSweepResult, Reduction, Task,
    TrainConfig, TrainRun, CHAR_CORPUS,
};

/// A (norm placement, initialization) pairing compared in a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Arm {
    pub variant: NormVariant,
    pub init: InitMode,
}

impl Arm {
    pub const fn new(variant: NormVariant, init: InitMode) -> Self {
        Self { variant, init }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.variant, self.init)
    }
}

/// Parses `variant:init`, e.g. `subln:magneto`.
impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (v, i) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("arm `{s}` is not of the form variant:init")))?;
        Ok(Self::new(v.parse()?, i.parse()?))
    }
}

/// Maps `f` over `items` on up to `jobs` threads; output order matches input.
pub(crate) fn par_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_round_trip() {
        let a: Arm = "subln:magneto".parse().unwrap();
        assert_eq!(a, Arm::new(NormVariant::SubLN, InitMode::Magneto));
        assert_eq!(a.to_string().parse::<Arm>().unwrap(), a);
        assert!("subln".parse::<Arm>().is_err());
    }

    #[test]
    fn par_map_keeps_order() {
        let xs: Vec<u64> = (0..23).collect();
        let serial = par_map(&xs, 1, |x| x * x);
        assert_eq!(par_map(&xs, 4, |x| x * x), serial);
        assert_eq!(par_map(&xs, 64, |x| x * x), serial);
    }
}
