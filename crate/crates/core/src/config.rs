//! Analysis parameters shared by the distributed pipeline and the oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qc::QcThresholds;
use crate::ridge_l0::{auto_admm_rho, build_schedule, RidgeSchedule, DEFAULT_ADMM_ITERS};
use crate::seedcraft::PadPolicy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub blocks: usize,
    pub ridges: usize,
    pub folds: usize,
    /// ADMM penalty; derived from the training size when absent.
    pub admm_rho: Option<f64>,
    pub admm_iters: usize,
    pub cgd_iters: Option<usize>,
    pub max_missing_rate: f64,
    pub min_maf: f64,
    pub max_hwe_chi2: f64,
    pub pad_min: usize,
    pub pad_fraction: f64,
    pub pad_jitter: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let qc = QcThresholds::default();
        let pads = PadPolicy::default();
        AnalysisConfig {
            blocks: 8,
            ridges: 5,
            folds: 5,
            admm_rho: None,
            admm_iters: DEFAULT_ADMM_ITERS,
            cgd_iters: None,
            max_missing_rate: qc.max_missing_rate,
            min_maf: qc.min_maf,
            max_hwe_chi2: qc.max_hwe_chi2,
            pad_min: pads.min,
            pad_fraction: pads.fraction,
            pad_jitter: pads.jitter,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("need at least one block".into()));
        }
        if self.ridges < 2 {
            return Err(Error::Config("need at least two ridge parameters".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("need at least two folds".into()));
        }
        if self.admm_iters == 0 {
            return Err(Error::Config("ADMM needs at least one iteration".into()));
        }
        if let Some(rho) = self.admm_rho {
            if !(rho > 0.0) {
                return Err(Error::Config(format!("ADMM penalty {rho} must be positive")));
            }
        }
        Ok(())
    }

    pub fn thresholds(&self) -> QcThresholds {
        QcThresholds {
            max_missing_rate: self.max_missing_rate,
            min_maf: self.min_maf,
            max_hwe_chi2: self.max_hwe_chi2,
        }
    }

    pub fn pad_policy(&self) -> PadPolicy {
        PadPolicy {
            min: self.pad_min,
            fraction: self.pad_fraction,
            jitter: self.pad_jitter,
        }
    }

    pub fn rho(&self, total_samples: usize, parties: usize) -> f64 {
        self.admm_rho
            .unwrap_or_else(|| auto_admm_rho(total_samples, self.folds, parties))
    }

    /// Schedule over the retained SNP count `snps`.
    pub fn schedule(&self, snps: usize, rho: f64) -> Result<RidgeSchedule> {
        if self.blocks > snps {
            return Err(Error::Config(format!(
                "{snps} SNPs passed QC, fewer than {} blocks",
                self.blocks
            )));
        }
        build_schedule(snps, self.blocks, self.ridges, rho, self.admm_iters, self.cgd_iters)
    }
}
