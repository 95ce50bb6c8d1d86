//! Level-1 stacked ridge by conjugate gradients on masked Level-0 predictions.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::ridge_l0::{Level0Predictions, RidgeSchedule};
use crate::seedcraft::training_folds;

pub const CGD_TOL: f64 = 1e-14;

/// `(N_k + pad) × B·R` matrix of fold-`k` predictions, column `b·R + r`.
pub fn fold_prediction_matrix(preds: &Level0Predictions, fold: usize) -> Result<Mat> {
    let cols = preds.blocks() * preds.ridges();
    let rows = preds.get(fold, 0, 0)?.len();
    let mut out = Mat::zeros(rows, cols);
    for b in 0..preds.blocks() {
        for r in 0..preds.ridges() {
            let v = preds.get(fold, b, r)?;
            if v.len() != rows {
                return Err(Error::Shape(format!(
                    "fold {fold} predictions disagree in length"
                )));
            }
            out.column_mut(b * preds.ridges() + r).copy_from(v);
        }
    }
    Ok(out)
}

/// Training-fold Gram `𝒲` and right-hand side for held-out fold `k`.
pub fn assemble_gram(
    fold_matrices: &[Mat],
    pooled_phenotype: &[Vector],
    fold: usize,
) -> Result<(Mat, Vector)> {
    let dim = fold_matrices[0].ncols();
    let mut w = Mat::zeros(dim, dim);
    let mut rhs = Vector::zeros(dim);
    for j in training_folds(fold, fold_matrices.len()) {
        let p = &fold_matrices[j];
        if p.nrows() != pooled_phenotype[j].len() {
            return Err(Error::Shape(format!(
                "fold {j} predictions and phenotype differ in length"
            )));
        }
        w += p.tr_mul(p);
        rhs += p.tr_mul(&pooled_phenotype[j]);
    }
    Ok((w, rhs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgOutcome {
    pub solution: Vector,
    pub iterations: usize,
    pub residual_norm: f64,
}

/// Conjugate gradients for `(w + ω I) η = rhs` from `η = 0`.
pub fn cgd_solve(w: &Mat, rhs: &Vector, omega: f64, max_iters: usize) -> Result<CgOutcome> {
    let n = rhs.len();
    if w.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "CG system {:?} with right-hand side of length {n}",
            w.shape()
        )));
    }
    let target = CGD_TOL * rhs.norm();
    let mut x = Vector::zeros(n);
    let mut resid = rhs.clone();
    let mut dir = rhs.clone();
    let mut rr = resid.norm_squared();
    let mut iterations = 0;
    while iterations < max_iters && rr.sqrt() > target {
        let ad = w * &dir + &dir * omega;
        let curvature = dir.dot(&ad);
        if !(curvature > 0.0) {
            return Err(Error::Numerical(format!(
                "CG lost positive curvature ({curvature:e}); system is ill-conditioned"
            )));
        }
        let step = rr / curvature;
        x.axpy(step, &dir, 1.0);
        resid.axpy(-step, &ad, 1.0);
        let rr_next = resid.norm_squared();
        dir = &resid + &dir * (rr_next / rr);
        rr = rr_next;
        iterations += 1;
        if !rr.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "CG produced non-finite iterate; check conditioning".into(),
            ));
        }
    }
    Ok(CgOutcome {
        solution: x,
        iterations,
        residual_norm: rr.sqrt(),
    })
}

/// Index of the smallest total, earliest on ties.
pub fn select_rstar(totals: &[f64]) -> usize {
    let mut best = 0;
    for (r, &v) in totals.iter().enumerate().skip(1) {
        if v < totals[best] {
            best = r;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level1Result {
    /// Selected ridge index, 0-based.
    pub rstar: usize,
    /// Masked residual sums of squares `[k][r]`.
    pub rss: Vec<Vec<f64>>,
    /// Masked coefficients `[k][r]`, equal to `k_ỹ² η̂`.
    pub etas: Vec<Vec<Vector>>,
    /// `𝒦_k` at `r*`.
    pub fold_predictions: Vec<Vector>,
    /// `Σ_p 𝒴^(p,k) − 𝒦_k` at `r*`.
    pub residuals: Vec<Vector>,
}

impl Level1Result {
    pub fn totals(&self) -> Vec<f64> {
        let ridges = self.rss[0].len();
        (0..ridges)
            .map(|r| self.rss.iter().map(|row| row[r]).sum())
            .collect()
    }

    /// Masked total residual sum of squares at `r*`.
    pub fn rss_total(&self) -> f64 {
        self.residuals.iter().map(|e| e.norm_squared()).sum()
    }
}

/// Server: fits every `(k, r)` cell, selects `r*` and keeps the fold residuals.
pub fn server_level1(
    preds: &Level0Predictions,
    pooled_phenotype: &[Vector],
    schedule: &RidgeSchedule,
) -> Result<Level1Result> {
    let folds = preds.folds();
    let ridges = preds.ridges();
    if pooled_phenotype.len() != folds || schedule.ridges() != ridges {
        return Err(Error::Protocol("Level-1 inputs disagree on folds or ridges".into()));
    }
    let mats = (0..folds)
        .map(|k| fold_prediction_matrix(preds, k))
        .collect::<Result<Vec<_>>>()?;
    let systems = (0..folds)
        .map(|k| assemble_gram(&mats, pooled_phenotype, k))
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..folds)
        .flat_map(|k| (0..ridges).map(move |r| (k, r)))
        .collect();
    let solved = cells
        .par_iter()
        .map(|&(k, r)| {
            let (w, rhs) = &systems[k];
            let eta = cgd_solve(w, rhs, schedule.omegas[r], schedule.cgd_iters)?.solution;
            let fitted = &mats[k] * &eta;
            let rss = (&pooled_phenotype[k] - &fitted).norm_squared();
            Ok((eta, fitted, rss))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rss = vec![vec![0.0; ridges]; folds];
    let mut etas: Vec<Vec<Vector>> = vec![Vec::with_capacity(ridges); folds];
    let mut fitted: Vec<Vec<Vector>> = vec![Vec::with_capacity(ridges); folds];
    for ((k, r), (eta, fit, s)) in cells.into_iter().zip(solved) {
        rss[k][r] = s;
        etas[k].push(eta);
        fitted[k].push(fit);
    }
    let totals: Vec<f64> = (0..ridges)
        .map(|r| rss.iter().map(|row| row[r]).sum())
        .collect();
    let rstar = select_rstar(&totals);
    let fold_predictions: Vec<Vector> = fitted.into_iter().map(|mut f| f.swap_remove(rstar)).collect();
    let residuals = fold_predictions
        .iter()
        .zip(pooled_phenotype)
        .map(|(f, y)| y - f)
        .collect();
    Ok(Level1Result {
        rstar,
        rss,
        etas,
        fold_predictions,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::linalg::max_abs_diff;

    fn random_spd(rng: &mut ChaCha20Rng, n: usize) -> Mat {
        let a = Mat::from_fn(n + 3, n, |_, _| rng.sample(StandardNormal));
        a.transpose() * a + Mat::identity(n, n) * 0.1
    }

    #[test]
    fn diagonal_examples() {
        let out = cgd_solve(&Mat::identity(2, 2), &Vector::from_vec(vec![2.0, 0.0]), 1.0, 10).unwrap();
        assert!((out.solution - Vector::from_vec(vec![1.0, 0.0])).amax() < 1e-14);
        let w = Mat::from_diagonal(&Vector::from_vec(vec![1.0, 2.0]));
        let out = cgd_solve(&w, &Vector::from_vec(vec![1.0, 2.0]), 0.0, 10).unwrap();
        assert!((out.solution - Vector::from_vec(vec![1.0, 1.0])).amax() < 1e-14);
    }

    #[test]
    fn random_system_converges_within_dimension() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let w = random_spd(&mut rng, 12);
        let rhs = Vector::from_fn(12, |_, _| rng.sample(StandardNormal));
        let out = cgd_solve(&w, &rhs, 0.5, 12).unwrap();
        let direct = (w + Mat::identity(12, 12) * 0.5).lu().solve(&rhs).unwrap();
        assert!((&out.solution - &direct).norm() / direct.norm() < 1e-8);
        assert!(out.iterations <= 12);
    }

    #[test]
    fn non_finite_input_is_reported() {
        let w = Mat::from_element(2, 2, f64::NAN);
        assert!(cgd_solve(&w, &Vector::from_vec(vec![1.0, 1.0]), 1.0, 5).is_err());
    }

    #[test]
    fn argmin_and_ties() {
        assert_eq!(select_rstar(&[10.0, 3.0]), 1);
        assert_eq!(select_rstar(&[3.0, 3.0]), 0);
        assert_eq!(select_rstar(&[5.0, 2.0, 2.0, 4.0]), 1);
    }

    #[test]
    fn gram_matches_plaintext_and_is_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut preds = Level0Predictions::new(3, 2, 2);
        let lens = [7, 6, 8];
        for (k, &n) in lens.iter().enumerate() {
            for b in 0..2 {
                for r in 0..2 {
                    preds.set(k, b, r, Vector::from_fn(n, |_, _| rng.sample(StandardNormal)));
                }
            }
        }
        let ys: Vec<Vector> = lens
            .iter()
            .map(|&n| Vector::from_fn(n, |_, _| rng.sample(StandardNormal)))
            .collect();
        let mats: Vec<Mat> = (0..3).map(|k| fold_prediction_matrix(&preds, k).unwrap()).collect();
        let (w, rhs) = assemble_gram(&mats, &ys, 0).unwrap();
        assert!(max_abs_diff(&w, &w.transpose()) < 1e-12);
        let v = preds.get(1, 1, 0).unwrap().norm_squared() + preds.get(2, 1, 0).unwrap().norm_squared();
        assert!((w[(2, 2)] - v).abs() < 1e-9);
        let expect = mats[1].tr_mul(&ys[1]) + mats[2].tr_mul(&ys[2]);
        assert!((rhs - expect).amax() < 1e-12);
    }

    #[test]
    fn single_column_gram_is_squared_norm() {
        let mut preds = Level0Predictions::new(2, 1, 1);
        preds.set(0, 0, 0, Vector::from_vec(vec![1.0, 2.0]));
        preds.set(1, 0, 0, Vector::from_vec(vec![3.0]));
        let mats: Vec<Mat> = (0..2).map(|k| fold_prediction_matrix(&preds, k).unwrap()).collect();
        let ys = vec![Vector::zeros(2), Vector::zeros(1)];
        let (w, _) = assemble_gram(&mats, &ys, 1).unwrap();
        assert_eq!(w.shape(), (1, 1));
        assert_eq!(w[(0, 0)], 5.0);
    }

    #[test]
    fn missing_cell_is_protocol_error() {
        let preds = Level0Predictions::new(2, 1, 2);
        assert!(matches!(fold_prediction_matrix(&preds, 0), Err(Error::Protocol(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cg_reaches_tolerance_within_twice_dimension(n in 1usize..20, seed in any::<u64>()) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let w = random_spd(&mut rng, n);
            let rhs = Vector::from_fn(n, |_, _| rng.sample(StandardNormal));
            let out = cgd_solve(&w, &rhs, 0.0, 2 * n).unwrap();
            prop_assert!(out.residual_norm <= CGD_TOL * rhs.norm() * 10.0);
        }

        #[test]
        fn rstar_ignores_positive_scaling(totals in proptest::collection::vec(0.0f64..100.0, 2..8), scale in 1e-3f64..1e3) {
            let scaled: Vec<f64> = totals.iter().map(|t| t * scale).collect();
            prop_assert_eq!(select_rstar(&totals), select_rstar(&scaled));
        }
    }
}
