//! Single-SNP chi-square association on masked fold columns.
//!
//! The server returns a mask-free ratio `s = (Σ_k mᵀe_k)² / (RSS · Σ_k ‖m_k‖²)`;
//! participants, who know `N`, turn it into `χ² = (N − C)·s`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use libm::erfc;

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::ridge_l1::Level1Result;
use crate::seedcraft::{MaskSuite, PartitionPlan};

pub const SIGNIFICANCE: f64 = 5e-8;
pub const P_FLOOR: f64 = 1e-300;
const DEGENERATE_NORM: f64 = 1e-10;

/// Per fold, the party's masked columns `k_x O_ỹ^(k) x̃_(p,k)` for SNPs of one block.
///
/// `snp_ids` are the pre-QC indices that key each column's scalar.
pub fn party_mask_snps(
    suite: &MaskSuite,
    plan: &PartitionPlan,
    party: usize,
    x_block: &Mat,
    snp_ids: &[usize],
    rstar: usize,
    ridges: usize,
) -> Result<Vec<Mat>> {
    if rstar >= ridges {
        return Err(Error::Protocol(format!(
            "selected ridge index {rstar} outside 0..{ridges}"
        )));
    }
    if x_block.ncols() != snp_ids.len() || x_block.nrows() != plan.party_sizes()[party] {
        return Err(Error::Shape("association block shape disagrees with plan".into()));
    }
    let scalars: Vec<f64> = snp_ids.iter().map(|&j| suite.snp_scalar(j).value()).collect();
    (0..plan.folds())
        .map(|k| {
            let mask = suite.fold_mask(k, plan.fold_size(k))?;
            let members = plan.fold_members(party, k);
            let start = plan.fold_offset(party, k);
            let slice = mask.column_slice(start..start + members.len());
            let xk = Mat::from_fn(members.len(), x_block.ncols(), |i, c| {
                x_block[(members[i], c)] * scalars[c]
            });
            Ok(slice * xk)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaledStat {
    pub scaled: f64,
    pub degenerate: bool,
}

/// Server statistic for every column of one block; `uploads[p][k]` is party `p`'s fold-`k` matrix.
pub fn server_scaled_stats(uploads: &[Vec<Mat>], level1: &Level1Result) -> Result<Vec<ScaledStat>> {
    let folds = level1.residuals.len();
    let first = uploads
        .first()
        .ok_or_else(|| Error::Protocol("no association uploads".into()))?;
    if uploads.iter().any(|u| u.len() != folds) {
        return Err(Error::Protocol("association uploads miss folds".into()));
    }
    let cols = first[0].ncols();
    let mut pooled: Vec<Mat> = Vec::with_capacity(folds);
    for k in 0..folds {
        let shape = (level1.residuals[k].len(), cols);
        let mut acc = Mat::zeros(shape.0, shape.1);
        for u in uploads {
            if u[k].shape() != shape {
                return Err(Error::Shape(format!(
                    "fold {k} upload {:?}, expected {shape:?}",
                    u[k].shape()
                )));
            }
            acc += &u[k];
        }
        pooled.push(acc);
    }
    let rss = level1.rss_total();
    Ok((0..cols)
        .map(|c| {
            let mut dot = 0.0;
            let mut norm = 0.0;
            for (m, e) in pooled.iter().zip(&level1.residuals) {
                let col = m.column(c);
                dot += col.dot(e);
                norm += col.norm_squared();
            }
            if norm < DEGENERATE_NORM || rss <= 0.0 {
                ScaledStat {
                    scaled: 0.0,
                    degenerate: true,
                }
            } else {
                ScaledStat {
                    scaled: dot * dot / (rss * norm),
                    degenerate: false,
                }
            }
        })
        .collect())
}

/// Upper tail of the one-degree-of-freedom chi-square law.
pub fn chi2_to_p(chi2: f64) -> Result<f64> {
    if chi2.is_nan() || chi2 < 0.0 {
        return Err(Error::Numerical(format!("chi-square statistic {chi2} is negative")));
    }
    Ok(erfc((chi2 / 2.0).sqrt()))
}

pub fn neg_log10_p(p: f64) -> f64 {
    -p.max(P_FLOOR).log10()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssocStat {
    pub snp_index: usize,
    pub chi2: f64,
    pub p: f64,
    pub significant: bool,
    pub degenerate: bool,
}

impl AssocStat {
    pub fn from_chi2(snp_index: usize, chi2: f64) -> Result<Self> {
        let p = chi2_to_p(chi2)?;
        Ok(AssocStat {
            snp_index,
            chi2,
            p,
            significant: p < SIGNIFICANCE,
            degenerate: false,
        })
    }

    pub fn degenerate(snp_index: usize) -> Self {
        AssocStat {
            snp_index,
            chi2: 0.0,
            p: 1.0,
            significant: false,
            degenerate: true,
        }
    }
}

/// Participant side: `χ² = (N − C)·s`, with `C` the covariates without intercept.
pub fn finalize_stats(
    snp_ids: &[usize],
    scaled: &[ScaledStat],
    samples: usize,
    covariates: usize,
) -> Result<Vec<AssocStat>> {
    if snp_ids.len() != scaled.len() {
        return Err(Error::Shape("statistic count differs from SNP count".into()));
    }
    let dof = samples as f64 - covariates as f64;
    if dof <= 0.0 {
        return Err(Error::Config(format!(
            "{samples} samples cannot support {covariates} covariates"
        )));
    }
    snp_ids
        .iter()
        .zip(scaled)
        .map(|(&j, s)| {
            if s.degenerate {
                Ok(AssocStat::degenerate(j))
            } else {
                AssocStat::from_chi2(j, dof * s.scaled)
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMeta {
    pub source: String,
    /// 1-based selected ridge index.
    pub rstar: usize,
    pub samples: usize,
    pub snps: usize,
    pub covariates: usize,
    pub seed_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssocResultSet {
    pub meta: RunMeta,
    pub stats: Vec<AssocStat>,
}

impl AssocResultSet {
    pub fn new(meta: RunMeta, mut stats: Vec<AssocStat>) -> Self {
        stats.sort_by_key(|s| s.snp_index);
        AssocResultSet { meta, stats }
    }

    pub fn to_tsv(&self) -> String {
        let m = &self.meta;
        let mut out = String::new();
        writeln!(out, "#source\t{}", m.source).unwrap();
        writeln!(out, "#rstar\t{}", m.rstar).unwrap();
        writeln!(out, "#samples\t{}", m.samples).unwrap();
        writeln!(out, "#snps\t{}", m.snps).unwrap();
        writeln!(out, "#covariates\t{}", m.covariates).unwrap();
        writeln!(out, "#seed_fingerprint\t{}", m.seed_fingerprint).unwrap();
        let degenerate: Vec<String> = self
            .stats
            .iter()
            .filter(|s| s.degenerate)
            .map(|s| s.snp_index.to_string())
            .collect();
        writeln!(out, "#degenerate\t{}", degenerate.join(",")).unwrap();
        out.push_str("snp_index\tchi2\tp\tneglog10p\tsignificant\n");
        for s in &self.stats {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                s.snp_index,
                s.chi2,
                s.p,
                neg_log10_p(s.p),
                u8::from(s.significant)
            )
            .unwrap();
        }
        out
    }

    pub fn parse_tsv(path: &str, text: &str) -> Result<Self> {
        let bad = |line: usize, why: &str| Error::format(path, format!("line {}: {why}", line + 1));
        let mut meta = RunMeta::default();
        let mut degenerate = Vec::new();
        let mut stats = Vec::new();
        let mut header_seen = false;
        for (ln, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix('#') {
                let (key, value) = rest.split_once('\t').unwrap_or((rest, ""));
                let num = |v: &str| v.parse::<usize>().map_err(|_| bad(ln, "bad number"));
                match key {
                    "source" => meta.source = value.to_string(),
                    "rstar" => meta.rstar = num(value)?,
                    "samples" => meta.samples = num(value)?,
                    "snps" => meta.snps = num(value)?,
                    "covariates" => meta.covariates = num(value)?,
                    "seed_fingerprint" => meta.seed_fingerprint = value.to_string(),
                    "degenerate" => {
                        for v in value.split(',').filter(|v| !v.is_empty()) {
                            degenerate.push(num(v)?);
                        }
                    }
                    _ => {}
                }
                continue;
            }
            if !header_seen {
                if line != "snp_index\tchi2\tp\tneglog10p\tsignificant" {
                    return Err(bad(ln, "missing results header"));
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(ln, "expected five columns"));
            }
            let real = |v: &str| v.parse::<f64>().map_err(|_| bad(ln, "bad number"));
            stats.push(AssocStat {
                snp_index: f[0].parse().map_err(|_| bad(ln, "bad index"))?,
                chi2: real(f[1])?,
                p: real(f[2])?,
                significant: match f[4] {
                    "1" => true,
                    "0" => false,
                    _ => return Err(bad(ln, "bad significance flag")),
                },
                degenerate: false,
            });
        }
        if !header_seen {
            return Err(Error::format(path, "missing results header"));
        }
        for s in &mut stats {
            s.degenerate = degenerate.contains(&s.snp_index);
        }
        Ok(AssocResultSet::new(meta, stats))
    }
}

pub fn write_results(results: &AssocResultSet, path: &Path) -> Result<()> {
    std::fs::write(path, results.to_tsv()).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<AssocResultSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AssocResultSet::parse_tsv(&path.display().to_string(), &text)
}

/// Squared Pearson correlation of `−log10 p` over SNPs present in both sets.
pub fn compare_results(a: &AssocResultSet, b: &AssocResultSet) -> Result<f64> {
    let lookup: HashMap<usize, f64> = b
        .stats
        .iter()
        .map(|s| (s.snp_index, neg_log10_p(s.p)))
        .collect();
    let pairs: Vec<(f64, f64)> = a
        .stats
        .iter()
        .filter_map(|s| lookup.get(&s.snp_index).map(|v| (neg_log10_p(s.p), *v)))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::Config("fewer than two SNPs in common".into()));
    }
    let n = pairs.len() as f64;
    let (ma, mb) = pairs
        .iter()
        .fold((0.0, 0.0), |(x, y), (a, b)| (x + a / n, y + b / n));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(if saa == sbb { 1.0 } else { 0.0 });
    }
    Ok(sab * sab / (saa * sbb))
}

/// Mask holders' decode of the pooled fold columns, for checks: `O_ỹ^(k)ᵀ Σ_p m / k_x`.
pub fn decode_snp_column(
    suite: &MaskSuite,
    plan: &PartitionPlan,
    fold: usize,
    pooled: &Vector,
    snp_id: usize,
) -> Result<Vector> {
    let o = suite.fold_mask(fold, plan.fold_size(fold))?;
    Ok(o.matrix().tr_mul(pooled) / suite.snp_scalar(snp_id).value())
}
