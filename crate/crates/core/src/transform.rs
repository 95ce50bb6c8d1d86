//! Standardization moments and masked covariate projection.
//!
//! Each party embeds its rows at its party-major offset in the global sample
//! space and multiplies by its column slice of `O_Z`. The server only sees
//! `(N + pad) × ·` matrices and the `(C+1) × (C+1)` covariate Gram.

use crate::blockstore::{CovariateMatrix, GenotypeBlock, MISSING};
use crate::error::{Error, Result};
use crate::linalg::{hstack, IntMatrix, Mat, Vector};
use crate::qc::AlleleCounts;
use crate::seedcraft::{MaskSuite, PartitionPlan, Phase};

/// Fixed-point scale for phenotype sums.
pub const FIXED_POINT_SCALE: f64 = 4_294_967_296.0;
const FIXED_POINT_LIMIT: f64 = 4_611_686_018_427_387_904.0;

#[derive(Clone, Debug, PartialEq)]
pub struct StdStats {
    /// Per retained SNP, in retained order.
    pub snp_means: Vec<f64>,
    pub snp_sds: Vec<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
}

/// Means and population standard deviations of the mean-imputed retained SNPs.
pub fn genotype_moments(
    counts: &AlleleCounts,
    kept: &[usize],
    n: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut means = Vec::with_capacity(kept.len());
    let mut sds = Vec::with_capacity(kept.len());
    for &j in kept {
        let c = counts.get(j);
        let mu = c.called_mean().ok_or(Error::ZeroVariance { snp: j })?;
        let ss = c.dosage_square_sum() as f64 + c.missing as f64 * mu * mu;
        let var = ss / n as f64 - mu * mu;
        if !(var > 1e-12) {
            return Err(Error::ZeroVariance { snp: j });
        }
        means.push(mu);
        sds.push(var.sqrt());
    }
    Ok((means, sds))
}

/// Local `[Σy, Σy²]` as fixed-point integers.
pub fn phenotype_fixed_sums(y: &[f64]) -> Result<IntMatrix> {
    let s: f64 = y.iter().sum();
    let q: f64 = y.iter().map(|v| v * v).sum();
    let enc = |v: f64| {
        let scaled = (v * FIXED_POINT_SCALE).round();
        if scaled.abs() >= FIXED_POINT_LIMIT / 16.0 {
            Err(Error::Numerical(format!(
                "phenotype sum {v} too large for fixed-point aggregation"
            )))
        } else {
            Ok(scaled as i64)
        }
    };
    IntMatrix::from_vec(1, 2, vec![enc(s)?, enc(q)?])
}

/// Fixed-point sums plus zero-sum share, blinded by party 1.
pub fn party_moment_upload(
    y: &[f64],
    suite: &MaskSuite,
    party: usize,
    parties: usize,
) -> Result<IntMatrix> {
    let share = suite.share(Phase::Moments, party, parties, 1, 2)?;
    let masked = phenotype_fixed_sums(y)?.wrapping_add(&share.payload)?;
    if party == 1 {
        masked.wrapping_add(&suite.blind(Phase::MomentsBlind, 1, 2))
    } else {
        Ok(masked)
    }
}

/// Global `(Σy, Σy²)` from the server's blinded sum.
pub fn unblind_moments(blinded: &IntMatrix, suite: &MaskSuite) -> Result<(f64, f64)> {
    let plain = blinded.wrapping_sub(&suite.blind(Phase::MomentsBlind, 1, 2))?;
    Ok((
        plain.get(0, 0) as f64 / FIXED_POINT_SCALE,
        plain.get(0, 1) as f64 / FIXED_POINT_SCALE,
    ))
}

impl StdStats {
    pub fn from_aggregates(
        counts: &AlleleCounts,
        kept: &[usize],
        n: usize,
        y_sum: f64,
        y_square_sum: f64,
    ) -> Result<Self> {
        let (snp_means, snp_sds) = genotype_moments(counts, kept, n)?;
        let y_mean = y_sum / n as f64;
        let y_var = y_square_sum / n as f64 - y_mean * y_mean;
        if !(y_var > 0.0) {
            return Err(Error::Numerical("phenotype has zero variance".into()));
        }
        Ok(StdStats {
            snp_means,
            snp_sds,
            y_mean,
            y_sd: y_var.sqrt(),
        })
    }
}

/// Retained SNP columns as reals with missing calls set to the global mean.
pub fn imputed_dosages(genotypes: &GenotypeBlock, kept: &[usize], means: &[f64]) -> Mat {
    let n = genotypes.rows();
    let mut x = Mat::zeros(n, kept.len());
    for (c, (&j, &mu)) in kept.iter().zip(means).enumerate() {
        for (i, v) in genotypes.column(j).enumerate() {
            x[(i, c)] = if v == MISSING { mu } else { f64::from(v) };
        }
    }
    x
}

/// `[1, Z]`.
pub fn with_intercept(z: &CovariateMatrix) -> Mat {
    let mut out = Mat::from_element(z.rows(), z.cols() + 1, 1.0);
    for i in 0..z.rows() {
        for c in 0..z.cols() {
            out[(i, c + 1)] = z.get(i, c);
        }
    }
    out
}

/// Masked uploads of one party.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBundle {
    /// `O_Z · Z₁_p`.
    pub covariates: Mat,
    /// `k₁ · O_Z · y_p`.
    pub phenotype: Mat,
    /// `O_Z · X_p^b · O_Xᵀ` per analysis block.
    pub blocks: Vec<Mat>,
}

/// `O_Z[:, span_p]` for party `party` (0-based).
pub fn party_row_mask(suite: &MaskSuite, plan: &PartitionPlan, party: usize) -> Result<Mat> {
    let o = suite.covariate_mask(plan.total_samples())?;
    let start = plan.party_offset(party);
    Ok(o.column_slice(start..start + plan.party_sizes()[party]))
}

pub fn encode_inputs(
    suite: &MaskSuite,
    plan: &PartitionPlan,
    party: usize,
    x: &Mat,
    z1: &Mat,
    y: &[f64],
) -> Result<EncodedBundle> {
    let np = plan.party_sizes()[party];
    if x.nrows() != np || z1.nrows() != np || y.len() != np {
        return Err(Error::Shape(format!(
            "party {} inputs have {}/{}/{} rows, plan says {np}",
            party + 1,
            x.nrows(),
            z1.nrows(),
            y.len()
        )));
    }
    if x.ncols() != plan.snps() {
        return Err(Error::Shape(format!(
            "{} genotype columns, plan covers {}",
            x.ncols(),
            plan.snps()
        )));
    }
    let oz = party_row_mask(suite, plan, party)?;
    let k1 = suite.projection_scalar().value();
    let blocks = plan
        .blocks()
        .iter()
        .enumerate()
        .map(|(b, range)| {
            let ox = suite.genotype_mask(b, range.len())?;
            let xb = x.columns(range.start, range.len());
            Ok(&oz * xb * ox.matrix().transpose())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedBundle {
        covariates: &oz * z1,
        phenotype: (&oz * Mat::from_column_slice(np, 1, y)) * k1,
        blocks,
    })
}

/// Server half of the projection: removes the span of the pooled masked covariates.
#[derive(Clone, Debug)]
pub struct ProjectionServer {
    parts: Vec<Mat>,
    pooled: Mat,
    gram_inverse: Mat,
}

impl ProjectionServer {
    pub fn new(covariate_uploads: Vec<Mat>) -> Result<Self> {
        let first = covariate_uploads
            .first()
            .ok_or_else(|| Error::Protocol("no covariate uploads".into()))?;
        let shape = first.shape();
        if covariate_uploads.iter().any(|m| m.shape() != shape) {
            return Err(Error::Shape("covariate uploads differ in shape".into()));
        }
        let mut pooled = Mat::zeros(shape.0, shape.1);
        for m in &covariate_uploads {
            pooled += m;
        }
        let gram = pooled.transpose() * &pooled;
        let chol = gram
            .clone()
            .cholesky()
            .ok_or(Error::CollinearCovariates)?;
        let diag: Vec<f64> = (0..shape.1).map(|i| chol.l()[(i, i)].powi(2)).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if min <= max * 1e-12 {
            return Err(Error::CollinearCovariates);
        }
        let gram_inverse = chol.inverse();
        Ok(ProjectionServer {
            parts: covariate_uploads,
            pooled,
            gram_inverse,
        })
    }

    pub fn parties(&self) -> usize {
        self.parts.len()
    }

    /// `(C+1) × (C+1)` Gram of the pooled masked covariates.
    pub fn gram(&self) -> Mat {
        self.pooled.transpose() * &self.pooled
    }

    /// `A_p − G_p (GᵀG)⁻¹ Gᵀ Σ_q A_q` for every party.
    pub fn project(&self, uploads: &[Mat]) -> Result<Vec<Mat>> {
        if uploads.len() != self.parts.len() {
            return Err(Error::Protocol(format!(
                "{} uploads for {} parties",
                uploads.len(),
                self.parts.len()
            )));
        }
        let shape = uploads[0].shape();
        if shape.0 != self.pooled.nrows() || uploads.iter().any(|m| m.shape() != shape) {
            return Err(Error::Shape("projection uploads disagree in shape".into()));
        }
        let mut sum = Mat::zeros(shape.0, shape.1);
        for m in uploads {
            sum += m;
        }
        let h = &self.gram_inverse * (self.pooled.transpose() * sum);
        Ok(uploads
            .iter()
            .zip(&self.parts)
            .map(|(a, g)| a - g * &h)
            .collect())
    }
}

/// Masked projection results returned to one party.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedBundle {
    pub phenotype: Mat,
    pub blocks: Vec<Mat>,
}

pub fn server_project(bundles: Vec<EncodedBundle>) -> Result<Vec<ProjectedBundle>> {
    let parties = bundles.len();
    let mut covs = Vec::with_capacity(parties);
    let mut phenos = Vec::with_capacity(parties);
    let mut blocks = Vec::with_capacity(parties);
    for b in bundles {
        covs.push(b.covariates);
        phenos.push(b.phenotype);
        blocks.push(b.blocks);
    }
    let server = ProjectionServer::new(covs)?;
    let block_count = blocks[0].len();
    if blocks.iter().any(|b| b.len() != block_count) {
        return Err(Error::Protocol("parties disagree on block count".into()));
    }
    let mut out: Vec<ProjectedBundle> = server
        .project(&phenos)?
        .into_iter()
        .map(|phenotype| ProjectedBundle {
            phenotype,
            blocks: Vec::with_capacity(block_count),
        })
        .collect();
    for b in 0..block_count {
        let uploads: Vec<Mat> = blocks.iter_mut().map(|bl| std::mem::take(&mut bl[b])).collect();
        for (o, r) in out.iter_mut().zip(server.project(&uploads)?) {
            o.blocks.push(r);
        }
    }
    Ok(out)
}

/// Recovers the party's projected, standardized genotypes and phenotype.
pub fn decode_projection(
    suite: &MaskSuite,
    plan: &PartitionPlan,
    party: usize,
    result: &ProjectedBundle,
    stats: &StdStats,
) -> Result<(Mat, Vector)> {
    if result.blocks.len() != plan.block_count() {
        return Err(Error::Shape(format!(
            "{} projected blocks, plan has {}",
            result.blocks.len(),
            plan.block_count()
        )));
    }
    let ozt = party_row_mask(suite, plan, party)?.transpose();
    let parts = plan
        .blocks()
        .iter()
        .zip(&result.blocks)
        .enumerate()
        .map(|(b, (range, m))| {
            let ox = suite.genotype_mask(b, range.len())?;
            if m.ncols() != ox.rows() || m.nrows() != ozt.ncols() {
                return Err(Error::Shape(format!("projected block {b} has wrong shape")));
            }
            let mut xb = &ozt * m * ox.matrix();
            for (c, j) in range.clone().enumerate() {
                xb.column_mut(c).unscale_mut(stats.snp_sds[j]);
            }
            Ok(xb)
        })
        .collect::<Result<Vec<_>>>()?;
    let x = hstack(&parts);
    let k1 = suite.projection_scalar().value();
    let y = (&ozt * &result.phenotype).column(0) / (k1 * stats.y_sd);
    Ok((x, y))
}
