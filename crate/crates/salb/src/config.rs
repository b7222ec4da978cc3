//! Run configuration: one JSON document covering data generation, training,
//! sweeps, gradient checks and paths. Every section is optional.

use std::path::{Path, PathBuf};

use salb_core::gradcheck::{LossSelector, DEFAULT_TOLERANCE};
use salb_core::synthgen::SynthSpec;
use salb_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::read_file;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Training seeds for the ablation suite.
    pub seeds: Vec<u64>,
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            betas: (0..=10).map(|i| i as f64 / 10.0).collect(),
            gammas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub loss: LossSelector,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { loss: LossSelector::Total, n: 4, d: 8, seed: 0, tolerance: DEFAULT_TOLERANCE }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthSpec,
    /// Training settings, including the `loss` section.
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub grad_check: GradCheckConfig,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets the seed of every section.
    pub fn override_seed(&mut self, seed: u64) {
        self.synth.seed = salb_core::Seed(seed);
        self.train.seed = salb_core::Seed(seed);
        self.grad_check.seed = seed;
        self.sweep.seeds = vec![seed];
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        for (name, values) in [("betas", &self.sweep.betas), ("gammas", &self.sweep.gammas)] {
            if let Some(x) = values.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::Config(format!("sweep {name} must lie in [0, 1], got {x}")));
            }
        }
        let g = &self.grad_check;
        if g.n < 2 || g.d < 1 {
            return Err(Error::Config(format!("grad_check needs n >= 2 and d >= 1, got n={} d={}", g.n, g.d)));
        }
        if g.tolerance.is_nan() || g.tolerance <= 0.0 {
            return Err(Error::Config(format!("grad_check tolerance must be positive, got {}", g.tolerance)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn nested_overrides() {
        let c = RunConfig::from_json(r#"{"train": {"steps": 5, "loss": {"beta": 0.5}}, "synth": {"n_samples": 300}}"#).unwrap();
        assert_eq!((c.train.steps, c.train.loss.beta, c.synth.n_samples), (5, 0.5, 300));
        assert_eq!(c.train.loss.tau_init, 0.07);
    }

    #[test]
    fn unknown_keys_rejected() {
        for doc in [r#"{"trian": {}}"#, r#"{"train": {"step": 1}}"#, r#"{"train": {"loss": {"betta": 0.1}}}"#] {
            assert!(matches!(RunConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let mut c = RunConfig::default();
        c.override_seed(9);
        assert_eq!((c.synth.seed.0, c.train.seed.0, c.grad_check.seed, c.sweep.seeds.clone()), (9, 9, 9, vec![9]));
    }
}
