//! Prior-mode ablation: one training run per mode, identical seed and config.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::deform::PriorMode;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::train::{Model, TrainConfig, TrainState};

pub const ALL_MODES: [PriorMode; 3] = [PriorMode::Learnable, PriorMode::Fixed, PriorMode::None];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub prior_mode: PriorMode,
    /// Set when training or evaluation failed for this mode.
    pub error: Option<String>,
    pub setting1: Option<EvalReport>,
    pub setting2: Option<EvalReport>,
}

impl AblationEntry {
    /// Held-out Setting-1 masked PSNR.
    pub fn masked_psnr(&self) -> Option<f64> {
        self.setting1.as_ref().map(|r| r.psnr_masked)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub iterations: u64,
    pub entries: Vec<AblationEntry>,
}

impl AblationReport {
    pub fn entry(&self, mode: PriorMode) -> Option<&AblationEntry> {
        self.entries.iter().find(|e| e.prior_mode == mode)
    }

    pub fn table(&self) -> String {
        let mut s = String::from("prior      S1 PSNR(m)  S1 SSIM(m)  S2 PSNR  S2 SSIM\n");
        for e in &self.entries {
            let _ = write!(s, "{:<10}", e.prior_mode.as_str());
            match (&e.setting1, &e.setting2, &e.error) {
                (Some(a), Some(b), _) => {
                    let _ = writeln!(
                        s,
                        " {:>10.3}  {:>10.4}  {:>7.3}  {:>7.4}",
                        a.psnr_masked, a.ssim_masked, b.psnr, b.ssim
                    );
                }
                (_, _, Some(err)) => {
                    let _ = writeln!(s, " failed: {err}");
                }
                _ => {
                    let _ = writeln!(s, " -");
                }
            }
        }
        s
    }
}

fn held_out(model: &Model, dataset: &Dataset, split: Split, iteration: u64) -> Result<Option<EvalReport>> {
    if dataset.split(split).is_empty() {
        return Ok(None);
    }
    evaluate(model, dataset, split, iteration).map(Some)
}

/// Trains and evaluates one mode. `None` as the error means success.
pub fn run_mode(dataset: &Dataset, mode: PriorMode, config: &TrainConfig) -> AblationEntry {
    let cfg = TrainConfig { prior_mode: mode, ..config.clone() };
    let outcome = (|| {
        let mut st = TrainState::new(dataset, cfg)?;
        st.run(dataset, None)?;
        let s1 = held_out(&st.model, dataset, Split::Setting1, st.iteration)?;
        let s2 = held_out(&st.model, dataset, Split::Setting2, st.iteration)?;
        Ok::<_, Error>((s1, s2))
    })();
    match outcome {
        Ok((setting1, setting2)) => AblationEntry { prior_mode: mode, error: None, setting1, setting2 },
        Err(e) => {
            log::error!("{mode} run failed: {e}");
            AblationEntry { prior_mode: mode, error: Some(e.to_string()), setting1: None, setting2: None }
        }
    }
}

/// Runs every mode in `modes`. A failed mode is recorded in its entry and the
/// remaining modes still run.
pub fn ablation_run(dataset: &Dataset, modes: &[PriorMode], config: &TrainConfig) -> Result<AblationReport> {
    if dataset.split(Split::Setting1).is_empty() {
        return Err(Error::Argument("ablation needs Setting-1 held-out frames".into()));
    }
    config.validate()?;
    let entries = modes.iter().map(|&m| run_mode(dataset, m, config)).collect();
    Ok(AblationReport { seed: config.seed, iterations: config.iterations, entries })
}
