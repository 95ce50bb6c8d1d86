//! Centralized plaintext reference pipeline.
//!
//! Every stage works on pooled, unmasked data in party-major row order and uses
//! Cholesky solves only, so it shares no numerical path with ADMM or CG.

use crate::assoc::{AssocResultSet, AssocStat, RunMeta};
use crate::blockstore::{Dataset, GenotypeBlock, MISSING};
use crate::config::AnalysisConfig;
use crate::error::{Error, Result};
use crate::linalg::{spd_solve, spd_solve_vec, vstack, Mat, Vector};
use crate::qc::QcThresholds;
use crate::ridge_l0::RidgeSchedule;
use crate::ridge_l1::select_rstar;
use crate::seedcraft::{MaskSuite, PartitionPlan};

/// Keep flags decided straight from the genotype columns.
pub fn oracle_qc(genotypes: &GenotypeBlock, t: &QcThresholds) -> Vec<bool> {
    let n = genotypes.rows() as f64;
    (0..genotypes.cols())
        .map(|j| {
            let mut tally = [0u64; 3];
            let mut missing = 0u64;
            for v in genotypes.column(j) {
                if v == MISSING {
                    missing += 1;
                } else {
                    tally[v as usize] += 1;
                }
            }
            let called = (tally[0] + tally[1] + tally[2]) as f64;
            if called == 0.0 {
                return false;
            }
            let alt = (tally[1] + 2 * tally[2]) as f64 / (2.0 * called);
            let maf = alt.min(1.0 - alt);
            let maf_exact = {
                let a = tally[1] + 2 * tally[2];
                let r = tally[1] + 2 * tally[0];
                a.min(r) as f64 / (2.0 * called)
            };
            debug_assert!((maf - maf_exact).abs() < 1e-12);
            let f = 1.0 - alt;
            let expected = [called * f * f, called * 2.0 * f * alt, called * alt * alt];
            let mut hwe = 0.0;
            for (o, e) in tally.iter().zip(expected) {
                let o = *o as f64;
                if e > 0.0 {
                    hwe += (o - e) * (o - e) / e;
                } else if o > 0.0 {
                    hwe = f64::INFINITY;
                }
            }
            missing as f64 / n <= t.max_missing_rate && maf_exact > t.min_maf && hwe <= t.max_hwe_chi2
        })
        .collect()
}

fn projector_apply(z1: &Mat, a: &Mat) -> Result<Mat> {
    let gram = z1.transpose() * z1;
    let coef = spd_solve(&gram, &(z1.transpose() * a), "covariate Gram")
        .map_err(|_| Error::CollinearCovariates)?;
    Ok(a - z1 * coef)
}

/// `X̃ = P·X·S⁻¹` and `ỹ = P·y / s_y` with mean-imputed dosages.
pub fn oracle_transform(
    genotypes: &GenotypeBlock,
    kept: &[usize],
    z1: &Mat,
    y: &[f64],
) -> Result<(Mat, Vector)> {
    let n = genotypes.rows();
    let mut x = Mat::zeros(n, kept.len());
    for (c, &j) in kept.iter().enumerate() {
        let called: Vec<f64> = genotypes
            .column(j)
            .filter(|&v| v != MISSING)
            .map(f64::from)
            .collect();
        let mean = called.iter().sum::<f64>() / called.len() as f64;
        for (i, v) in genotypes.column(j).enumerate() {
            x[(i, c)] = if v == MISSING { mean } else { f64::from(v) };
        }
        let col_mean = x.column(c).mean();
        let sd = (x.column(c).iter().map(|v| (v - col_mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        if sd == 0.0 {
            return Err(Error::ZeroVariance { snp: j });
        }
        x.column_mut(c).unscale_mut(sd);
    }
    let yv = Mat::from_column_slice(n, 1, y);
    let ym = yv.mean();
    let ysd = (y.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / n as f64).sqrt();
    let xt = projector_apply(z1, &x)?;
    let yt = projector_apply(z1, &yv)?.column(0) / ysd;
    Ok((xt, yt))
}

fn rows_of(a: &Mat, rows: &[usize]) -> Mat {
    Mat::from_fn(rows.len(), a.ncols(), |i, j| a[(rows[i], j)])
}

fn entries_of(v: &Vector, rows: &[usize]) -> Vector {
    Vector::from_iterator(rows.len(), rows.iter().map(|&i| v[i]))
}

fn training_rows(plan: &PartitionPlan, fold: usize) -> Vec<usize> {
    plan.training_folds(fold)
        .into_iter()
        .flat_map(|j| plan.global_fold_rows(j))
        .collect()
}

fn ridge(x: &Mat, y: &Vector, lambda: f64) -> Result<Vector> {
    let a = x.transpose() * x + Mat::identity(x.ncols(), x.ncols()) * lambda;
    spd_solve_vec(&a, &(x.transpose() * y), "ridge normal equations")
}

/// Out-of-fold Level-0 predictions, `N × B·R` with column `b·R + r`.
pub fn oracle_level0(
    x: &Mat,
    y: &Vector,
    plan: &PartitionPlan,
    schedule: &RidgeSchedule,
) -> Result<Mat> {
    let ridges = schedule.ridges();
    let mut w = Mat::zeros(x.nrows(), plan.block_count() * ridges);
    for k in 0..plan.folds() {
        let train = training_rows(plan, k);
        let held = plan.global_fold_rows(k);
        let yt = entries_of(y, &train);
        for (b, range) in plan.blocks().iter().enumerate() {
            let xb = x.columns(range.start, range.len()).into_owned();
            let xt = rows_of(&xb, &train);
            let xk = rows_of(&xb, &held);
            for (r, &lambda) in schedule.lambdas.iter().enumerate() {
                let pred = &xk * ridge(&xt, &yt, lambda)?;
                for (i, &row) in held.iter().enumerate() {
                    w[(row, b * ridges + r)] = pred[i];
                }
            }
        }
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleLevel1 {
    pub etas: Vec<Vec<Vector>>,
    pub rss: Vec<Vec<f64>>,
    /// 0-based.
    pub rstar: usize,
    pub y_hat: Vector,
}

pub fn oracle_level1(
    w: &Mat,
    y: &Vector,
    plan: &PartitionPlan,
    schedule: &RidgeSchedule,
) -> Result<OracleLevel1> {
    let folds = plan.folds();
    let ridges = schedule.ridges();
    let mut etas = vec![Vec::with_capacity(ridges); folds];
    let mut rss = vec![vec![0.0; ridges]; folds];
    let mut fits = vec![Vec::with_capacity(ridges); folds];
    for k in 0..folds {
        let train = training_rows(plan, k);
        let held = plan.global_fold_rows(k);
        let wt = rows_of(w, &train);
        let yt = entries_of(y, &train);
        let wk = rows_of(w, &held);
        let yk = entries_of(y, &held);
        for r in 0..ridges {
            let eta = ridge(&wt, &yt, schedule.omegas[r])?;
            let fit = &wk * &eta;
            rss[k][r] = (&yk - &fit).norm_squared();
            etas[k].push(eta);
            fits[k].push(fit);
        }
    }
    let totals: Vec<f64> = (0..ridges)
        .map(|r| rss.iter().map(|row| row[r]).sum())
        .collect();
    let rstar = select_rstar(&totals);
    let mut y_hat = Vector::zeros(y.len());
    for (k, fold_fits) in fits.iter().enumerate() {
        for (i, row) in plan.global_fold_rows(k).into_iter().enumerate() {
            y_hat[row] = fold_fits[rstar][i];
        }
    }
    Ok(OracleLevel1 {
        etas,
        rss,
        rstar,
        y_hat,
    })
}

/// `χ² = (x̃ᵀ(ỹ − ŷ))² / (σ̂² x̃ᵀx̃)` with `σ̂² = ‖ỹ − ŷ‖²/(N − C)`.
pub fn oracle_test(
    x: &Mat,
    y: &Vector,
    y_hat: &Vector,
    covariates: usize,
    snp_ids: &[usize],
) -> Result<Vec<AssocStat>> {
    let n = y.len();
    let resid = y - y_hat;
    let sigma2 = resid.norm_squared() / (n as f64 - covariates as f64);
    snp_ids
        .iter()
        .enumerate()
        .map(|(c, &j)| {
            let col = x.column(c);
            let xx = col.norm_squared();
            if xx < 1e-10 || sigma2 <= 0.0 {
                return Ok(AssocStat::degenerate(j));
            }
            let xe = col.dot(&resid);
            AssocStat::from_chi2(j, xe * xe / (sigma2 * xx))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub keep: Vec<bool>,
    pub kept: Vec<usize>,
    pub x_tilde: Mat,
    pub y_tilde: Vector,
    pub plan: PartitionPlan,
    pub schedule: RidgeSchedule,
    pub w: Mat,
    pub level1: OracleLevel1,
    pub results: AssocResultSet,
}

/// Pools the parties' data in party order and runs every stage.
pub fn run_oracle(parts: &[Dataset], cfg: &AnalysisConfig, suite: &MaskSuite) -> Result<OracleResult> {
    cfg.validate()?;
    let first = parts
        .first()
        .ok_or_else(|| Error::Config("oracle needs at least one dataset".into()))?;
    let genotypes = GenotypeBlock::vconcat(&parts.iter().map(Dataset::genotypes).collect::<Vec<_>>())?;
    let keep = oracle_qc(&genotypes, &cfg.thresholds());
    let kept: Vec<usize> = keep
        .iter()
        .enumerate()
        .filter_map(|(i, &k)| k.then_some(i))
        .collect();
    let z1 = vstack(
        &parts
            .iter()
            .map(|d| crate::transform::with_intercept(&d.covariates))
            .collect::<Vec<_>>(),
    );
    let y: Vec<f64> = parts
        .iter()
        .flat_map(|d| d.phenotype.values().iter().copied())
        .collect();
    let (x_tilde, y_tilde) = oracle_transform(&genotypes, &kept, &z1, &y)?;
    let sizes: Vec<usize> = parts.iter().map(Dataset::samples).collect();
    let n = y.len();
    let plan = suite.plan(kept.len(), cfg.blocks, &sizes, cfg.folds)?;
    let schedule = cfg.schedule(kept.len(), cfg.rho(n, parts.len()))?;
    let w = oracle_level0(&x_tilde, &y_tilde, &plan, &schedule)?;
    let level1 = oracle_level1(&w, &y_tilde, &plan, &schedule)?;
    let c = first.covariates.cols();
    let stats = oracle_test(&x_tilde, &y_tilde, &level1.y_hat, c, &kept)?;
    let results = AssocResultSet::new(
        RunMeta {
            source: "oracle".into(),
            rstar: level1.rstar + 1,
            samples: n,
            snps: kept.len(),
            covariates: c,
            seed_fingerprint: suite.root().fingerprint_hex(),
        },
        stats,
    );
    Ok(OracleResult {
        keep,
        kept,
        x_tilde,
        y_tilde,
        plan,
        schedule,
        w,
        level1,
        results,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::ridge_l0::build_schedule;
    use crate::seedcraft::{PadPolicy, SeedKey};
    use crate::synthgen::{generate, SynthConfig};

    fn suite(tag: &str) -> MaskSuite {
        MaskSuite::new(SeedKey::from_passphrase(tag), PadPolicy::default())
    }

    #[test]
    fn orthonormal_design_with_tiny_penalty_projects() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = Mat::from_fn(6, 3, |_, _| rng.sample(StandardNormal));
        let q = a.qr().q();
        let y = Vector::from_fn(6, |_, _| rng.sample(StandardNormal));
        let beta = ridge(&q, &y, 1e-12).unwrap();
        assert!((beta - q.transpose() * &y).amax() < 1e-9);
    }

    #[test]
    fn ridge_matches_independent_solver() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x = Mat::from_fn(6, 4, |_, _| rng.sample(StandardNormal));
        let y = Vector::from_fn(6, |_, _| rng.sample(StandardNormal));
        // augmented least squares: [X; √λ I] β ≈ [y; 0], solved by QR
        let lambda: f64 = 0.7;
        let mut aug = Mat::zeros(10, 4);
        aug.rows_mut(0, 6).copy_from(&x);
        aug.rows_mut(6, 4).copy_from(&(Mat::identity(4, 4) * lambda.sqrt()));
        let mut rhs = Vector::zeros(10);
        rhs.rows_mut(0, 6).copy_from(&y);
        let qr = aug.qr();
        let expect = qr.r().solve_upper_triangular(&(qr.q().transpose() * rhs)).unwrap();
        assert!((ridge(&x, &y, lambda).unwrap() - expect).amax() < 1e-10);
    }

    #[test]
    fn huge_penalty_shrinks_predictions() {
        let s = suite("shrink");
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = Mat::from_fn(20, 4, |_, _| rng.sample(StandardNormal));
        let y = Vector::from_fn(20, |_, _| rng.sample(StandardNormal));
        let plan = s.plan(4, 2, &[10, 10], 2).unwrap();
        let sched = RidgeSchedule::custom(vec![1e12], vec![1.0], 1.0, 1, 1);
        assert!(oracle_level0(&x, &y, &plan, &sched).unwrap().amax() < 1e-9);
    }

    #[test]
    fn dominant_column_takes_the_weight() {
        let s = suite("dominant");
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let plan = s.plan(3, 1, &[20, 20], 2).unwrap();
        let y = Vector::from_fn(40, |_, _| rng.sample(StandardNormal));
        let mut w = Mat::from_fn(40, 3, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal));
        w.column_mut(1).copy_from(&y);
        let sched = RidgeSchedule::custom(vec![1.0; 2], vec![0.1, 1.0], 1.0, 1, 3);
        let l1 = oracle_level1(&w, &y, &plan, &sched).unwrap();
        for k in 0..2 {
            let eta = &l1.etas[k][0];
            assert_eq!(eta.iamax(), 1);
        }
        let totals: Vec<f64> = (0..2).map(|r| l1.rss[0][r] + l1.rss[1][r]).collect();
        assert!(totals.iter().all(|t| *t >= totals[l1.rstar]));
    }

    #[test]
    fn swapping_symmetric_folds_permutes_predictions() {
        let s = suite("swap");
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let plan = s.plan(2, 1, &[8], 2).unwrap();
        let w = Mat::from_fn(8, 2, |_, _| rng.sample(StandardNormal));
        let y = Vector::from_fn(8, |_, _| rng.sample(StandardNormal));
        let sched = RidgeSchedule::custom(vec![1.0, 1.0], vec![0.5, 2.0], 1.0, 1, 2);
        let base = oracle_level1(&w, &y, &plan, &sched).unwrap();
        // relabel folds by reversing the member lists' roles
        let f0 = plan.global_fold_rows(0);
        let f1 = plan.global_fold_rows(1);
        let mut perm: Vec<usize> = (0..8).collect();
        for (a, b) in f0.iter().zip(&f1) {
            perm.swap(*a, *b);
        }
        let wp = Mat::from_fn(8, 2, |i, j| w[(perm[i], j)]);
        let yp = Vector::from_fn(8, |i, _| y[perm[i]]);
        let swapped = oracle_level1(&wp, &yp, &plan, &sched).unwrap();
        for i in 0..8 {
            assert!((swapped.y_hat[i] - base.y_hat[perm[i]]).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_fit_is_degenerate() {
        let x = Mat::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]);
        let y = Vector::from_vec(vec![0.5, 0.1, -0.2, 0.3]);
        let stats = oracle_test(&x, &y, &y, 0, &[0]).unwrap();
        assert!(stats[0].degenerate);
        assert_eq!(stats[0].p, 1.0);
    }

    #[test]
    fn qc_examples() {
        // column 0 misses 15 of 100 calls, column 1 passes
        let mut data = vec![0i8; 200];
        for i in 0..100 {
            data[i * 2] = if i < 15 { -1 } else { (i % 3) as i8 };
            data[i * 2 + 1] = [0, 1, 1, 2][i % 4];
        }
        let g = GenotypeBlock::new(100, 2, data).unwrap();
        assert_eq!(oracle_qc(&g, &QcThresholds::default()), vec![false, true]);
    }

    #[test]
    fn strong_causal_snp_is_detected() {
        let cfg = SynthConfig::new(600, 400, 0);
        let mut ds = generate(8, &cfg).unwrap();
        // add a unit effect of one standardized SNP on top of noise
        let g = ds.genotypes();
        let col: Vec<f64> = g.column(10).map(f64::from).collect();
        assert!(col.iter().any(|&v| v != col[0]));
        let mean = col.iter().sum::<f64>() / 600.0;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 600.0).sqrt();
        for (y, x) in ds.phenotype.0.iter_mut().zip(&col) {
            *y += (x - mean) / sd;
        }
        let acfg = AnalysisConfig {
            blocks: 4,
            ridges: 3,
            folds: 3,
            ..AnalysisConfig::default()
        };
        let out = run_oracle(&[ds], &acfg, &suite("power")).unwrap();
        let s = out.results.stats.iter().find(|s| s.snp_index == 10).unwrap();
        assert!(s.p < 1e-6, "p = {}", s.p);
    }

    #[test]
    fn oracle_is_deterministic() {
        let mut cfg = SynthConfig::new(120, 40, 2);
        cfg.storage_blocks = 2;
        let ds = generate(3, &cfg).unwrap();
        let acfg = AnalysisConfig {
            blocks: 2,
            ridges: 2,
            folds: 3,
            ..AnalysisConfig::default()
        };
        let a = run_oracle(&[ds.clone()], &acfg, &suite("det")).unwrap();
        let b = run_oracle(&[ds], &acfg, &suite("det")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn schedule_is_shared_with_distributed_path() {
        let acfg = AnalysisConfig::default();
        let s = acfg.schedule(1000, 64.0).unwrap();
        assert_eq!(s, build_schedule(1000, 8, 5, 64.0, 100, None).unwrap());
    }
}
