//! Quality control from securely aggregated genotype tallies.

use std::fmt::Write as _;
use std::path::Path;

use crate::blockstore::{Dataset, GenotypeBlock, MISSING};
use crate::error::{Error, Result};
use crate::linalg::IntMatrix;
use crate::seedcraft::{MaskSuite, Phase, ZeroSumShare};

/// Genotype tallies of one SNP. Dosage 0 is homozygous reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SnpCounts {
    pub hom_ref: u64,
    pub het: u64,
    pub hom_alt: u64,
    pub missing: u64,
}

impl SnpCounts {
    pub fn called(&self) -> u64 {
        self.hom_ref + self.het + self.hom_alt
    }

    pub fn total(&self) -> u64 {
        self.called() + self.missing
    }

    /// Sum of called dosages.
    pub fn dosage_sum(&self) -> u64 {
        self.het + 2 * self.hom_alt
    }

    /// Sum of squared called dosages.
    pub fn dosage_square_sum(&self) -> u64 {
        self.het + 4 * self.hom_alt
    }

    /// Mean over called genotypes, used to impute missing entries.
    pub fn called_mean(&self) -> Option<f64> {
        let n = self.called();
        (n > 0).then(|| self.dosage_sum() as f64 / n as f64)
    }

    fn add(&mut self, v: i8) {
        match v {
            0 => self.hom_ref += 1,
            1 => self.het += 1,
            2 => self.hom_alt += 1,
            MISSING => self.missing += 1,
            _ => unreachable!("dosage validated on construction"),
        }
    }
}

pub const COUNT_COLUMNS: usize = 4;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AlleleCounts(pub Vec<SnpCounts>);

impl AlleleCounts {
    pub fn snps(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, snp: usize) -> &SnpCounts {
        &self.0[snp]
    }

    /// `M × 4` integer matrix with columns hom_ref, het, hom_alt, missing.
    pub fn to_int_matrix(&self) -> IntMatrix {
        let data = self
            .0
            .iter()
            .flat_map(|c| [c.hom_ref, c.het, c.hom_alt, c.missing].map(|v| v as i64))
            .collect();
        IntMatrix::from_vec(self.0.len(), COUNT_COLUMNS, data).expect("shape matches")
    }

    pub fn from_int_matrix(m: &IntMatrix) -> Result<Self> {
        if m.cols() != COUNT_COLUMNS {
            return Err(Error::Shape(format!(
                "count matrix has {} columns, expected {COUNT_COLUMNS}",
                m.cols()
            )));
        }
        if m.as_slice().iter().any(|&v| v < 0) {
            return Err(Error::Protocol(
                "aggregated counts are negative; shares or blinds disagree".into(),
            ));
        }
        Ok(AlleleCounts(
            m.as_slice()
                .chunks_exact(COUNT_COLUMNS)
                .map(|c| SnpCounts {
                    hom_ref: c[0] as u64,
                    het: c[1] as u64,
                    hom_alt: c[2] as u64,
                    missing: c[3] as u64,
                })
                .collect(),
        ))
    }

    pub fn merged(parts: &[AlleleCounts]) -> Result<Self> {
        let m = parts.first().map(|p| p.snps()).unwrap_or(0);
        if parts.iter().any(|p| p.snps() != m) {
            return Err(Error::Shape("count tables differ in SNP count".into()));
        }
        let mut out = vec![SnpCounts::default(); m];
        for p in parts {
            for (o, c) in out.iter_mut().zip(&p.0) {
                o.hom_ref += c.hom_ref;
                o.het += c.het;
                o.hom_alt += c.hom_alt;
                o.missing += c.missing;
            }
        }
        Ok(AlleleCounts(out))
    }
}

pub fn local_counts(block: &GenotypeBlock) -> AlleleCounts {
    let mut out = vec![SnpCounts::default(); block.cols()];
    for row in block.as_slice().chunks_exact(block.cols().max(1)) {
        for (c, &v) in out.iter_mut().zip(row) {
            c.add(v);
        }
    }
    AlleleCounts(out)
}

/// Tallies over all storage blocks of a dataset, in SNP order.
pub fn dataset_counts(dataset: &Dataset) -> AlleleCounts {
    AlleleCounts(
        dataset
            .blocks
            .iter()
            .flat_map(|b| local_counts(b).0)
            .collect(),
    )
}

pub fn mask_counts(counts: &AlleleCounts, share: &ZeroSumShare) -> Result<IntMatrix> {
    counts.to_int_matrix().wrapping_add(&share.payload)
}

/// Party `party` (1-based) upload: counts plus its zero-sum share, and for
/// party 1 also the participant-only blind, so the server's sum reveals nothing.
pub fn party_count_upload(
    counts: &AlleleCounts,
    suite: &MaskSuite,
    party: usize,
    parties: usize,
) -> Result<IntMatrix> {
    let m = counts.snps();
    let share = suite.share(Phase::Qc, party, parties, m, COUNT_COLUMNS)?;
    let masked = mask_counts(counts, &share)?;
    if party == 1 {
        masked.wrapping_add(&suite.blind(Phase::QcBlind, m, COUNT_COLUMNS))
    } else {
        Ok(masked)
    }
}

/// Server-side wrapping sum of all uploads.
pub fn aggregate_uploads(uploads: &[IntMatrix]) -> Result<IntMatrix> {
    let (rows, cols) = uploads
        .first()
        .map(IntMatrix::shape)
        .ok_or_else(|| Error::Protocol("no count uploads".into()))?;
    IntMatrix::wrapping_sum(rows, cols, uploads)
}

/// Removes the blind from the server's broadcast sum.
pub fn unblind_counts(blinded: &IntMatrix, suite: &MaskSuite) -> Result<AlleleCounts> {
    let blind = suite.blind(Phase::QcBlind, blinded.rows(), blinded.cols());
    AlleleCounts::from_int_matrix(&blinded.wrapping_sub(&blind)?)
}

/// Three-cell Hardy–Weinberg goodness-of-fit statistic; `None` without called genotypes.
pub fn hwe_chi2(c: &SnpCounts) -> Option<f64> {
    let n = c.called();
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    let p = (2 * c.hom_ref + c.het) as f64 / (2.0 * nf);
    let q = 1.0 - p;
    let cells = [
        (c.hom_ref as f64, nf * p * p),
        (c.het as f64, nf * 2.0 * p * q),
        (c.hom_alt as f64, nf * q * q),
    ];
    let mut chi2 = 0.0;
    for (obs, exp) in cells {
        if exp == 0.0 {
            if obs != 0.0 {
                return Some(f64::INFINITY);
            }
        } else {
            chi2 += (obs - exp).powi(2) / exp;
        }
    }
    Some(chi2)
}

/// Minor allele frequency over called genotypes.
pub fn maf(c: &SnpCounts) -> Option<f64> {
    let n = c.called();
    if n == 0 {
        return None;
    }
    let ref_alleles = 2 * c.hom_ref + c.het;
    let alt_alleles = 2 * c.hom_alt + c.het;
    Some(ref_alleles.min(alt_alleles) as f64 / (2 * n) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QcThresholds {
    pub max_missing_rate: f64,
    pub min_maf: f64,
    pub max_hwe_chi2: f64,
}

impl Default for QcThresholds {
    fn default() -> Self {
        QcThresholds {
            max_missing_rate: 0.1,
            min_maf: 0.05,
            max_hwe_chi2: 23.928,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropReason {
    NoCalls,
    Missingness,
    MinorAlleleFrequency,
    HardyWeinberg,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnpQc {
    pub keep: bool,
    pub missing_rate: f64,
    pub maf: f64,
    pub hwe_chi2: f64,
    pub reason: Option<DropReason>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QcReport {
    pub snps: Vec<SnpQc>,
    /// Pre-QC indices of retained SNPs, ascending.
    pub kept: Vec<usize>,
}

pub fn apply_filters(counts: &AlleleCounts, thresholds: &QcThresholds, n: usize) -> QcReport {
    let snps: Vec<SnpQc> = counts
        .0
        .iter()
        .map(|c| {
            let missing_rate = c.missing as f64 / n as f64;
            let (Some(maf), Some(hwe)) = (maf(c), hwe_chi2(c)) else {
                return SnpQc {
                    keep: false,
                    missing_rate,
                    maf: f64::NAN,
                    hwe_chi2: f64::NAN,
                    reason: Some(DropReason::NoCalls),
                };
            };
            let reason = if missing_rate > thresholds.max_missing_rate {
                Some(DropReason::Missingness)
            } else if maf <= thresholds.min_maf {
                Some(DropReason::MinorAlleleFrequency)
            } else if hwe > thresholds.max_hwe_chi2 {
                Some(DropReason::HardyWeinberg)
            } else {
                None
            };
            SnpQc {
                keep: reason.is_none(),
                missing_rate,
                maf,
                hwe_chi2: hwe,
                reason,
            }
        })
        .collect();
    let kept = snps
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.keep.then_some(i))
        .collect();
    QcReport { snps, kept }
}

impl QcReport {
    pub fn kept_count(&self) -> usize {
        self.kept.len()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("snp_index\tkeep\tmissing_rate\tmaf\thwe_chi2\n");
        for (i, s) in self.snps.iter().enumerate() {
            let num = |v: f64| {
                if v.is_nan() {
                    "NA".to_string()
                } else {
                    format!("{v}")
                }
            };
            writeln!(
                out,
                "{i}\t{}\t{}\t{}\t{}",
                u8::from(s.keep),
                num(s.missing_rate),
                num(s.maf),
                num(s.hwe_chi2)
            )
            .unwrap();
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}
