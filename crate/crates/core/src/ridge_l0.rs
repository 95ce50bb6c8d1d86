//! Blockwise Level-0 ridge under K-fold cross-validation, solved by consensus
//! ADMM on masked party payloads.
//!
//! For block `b`, ridge index `r` and held-out fold `k`, party `p` uploads
//!
//! * `ℛ = O_X (A_p + l I)⁻¹ O_Xᵀ`, with `A_p` its training-fold Gram,
//! * `𝒳^(j) = k⁻¹ O_ỹ^(j) X̃^b_(p,j) O_Xᵀ` for every fold `j`,
//! * `𝒴^(j) = k² O_ỹ^(j) ỹ_(p,j)` once per fold,
//!
//! where rows are embedded at the party's offset inside fold `j`. The server
//! iterates in the masked coefficient space, in which the consensus variable
//! equals `k·O_X β`, and returns `Σ_p 𝒳^(k) z = O_ỹ^(k) ŷ_k`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, Mat, Vector};
use crate::seedcraft::{training_folds, MaskSuite, PartitionPlan};

pub const DEFAULT_ADMM_ITERS: usize = 100;
pub const DEFAULT_ADMM_TOL: f64 = 1e-8;
pub const MAX_CGD_ITERS: usize = 200;
const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeSchedule {
    pub heritabilities: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub omegas: Vec<f64>,
    pub admm_rho: f64,
    pub admm_iters: usize,
    pub cgd_iters: usize,
}

impl RidgeSchedule {
    pub fn ridges(&self) -> usize {
        self.lambdas.len()
    }

    /// Explicit penalties, bypassing the heritability grid.
    pub fn custom(
        lambdas: Vec<f64>,
        omegas: Vec<f64>,
        admm_rho: f64,
        admm_iters: usize,
        cgd_iters: usize,
    ) -> Self {
        RidgeSchedule {
            heritabilities: vec![f64::NAN; lambdas.len()],
            lambdas,
            omegas,
            admm_rho,
            admm_iters,
            cgd_iters,
        }
    }
}

/// Grid `h_r` from 0.01 to 0.99, `λ_r = M(1 − h²)/h²` and `ω_r = (B·R/M)·λ_r`.
pub fn build_schedule(
    snps: usize,
    blocks: usize,
    ridges: usize,
    admm_rho: f64,
    admm_iters: usize,
    cgd_iters: Option<usize>,
) -> Result<RidgeSchedule> {
    if ridges < 2 {
        return Err(Error::Config(format!(
            "need at least two ridge parameters, got {ridges}"
        )));
    }
    if snps == 0 || blocks == 0 {
        return Err(Error::Config("schedule needs SNPs and blocks".into()));
    }
    if !(admm_rho > 0.0) {
        return Err(Error::Config(format!("ADMM penalty {admm_rho} must be positive")));
    }
    let m = snps as f64;
    let span = (ridges - 1) as f64;
    let heritabilities: Vec<f64> = (1..=ridges)
        .map(|r| (0.01 * span + 0.98 * (r - 1) as f64) / span)
        .collect();
    let lambdas: Vec<f64> = heritabilities
        .iter()
        .map(|h| m * (1.0 - h * h) / (h * h))
        .collect();
    let ratio = (blocks * ridges) as f64 / m;
    let omegas = lambdas.iter().map(|l| ratio * l).collect();
    Ok(RidgeSchedule {
        heritabilities,
        lambdas,
        omegas,
        admm_rho,
        admm_iters,
        cgd_iters: cgd_iters.unwrap_or((blocks * ridges).min(MAX_CGD_ITERS)),
    })
}

/// Power of two nearest the per-party training sample count.
///
/// Standardized columns give local Grams whose diagonal is about that count,
/// which keeps the x-update well balanced against the consensus term.
pub fn auto_admm_rho(total_samples: usize, folds: usize, parties: usize) -> f64 {
    let training = if folds > 1 {
        total_samples as f64 * (folds - 1) as f64 / folds as f64
    } else {
        total_samples as f64
    };
    let per_party = (training / parties as f64).max(1.0);
    2f64.powi(per_party.log2().round() as i32)
}

fn fold_slice(
    suite: &MaskSuite,
    plan: &PartitionPlan,
    party: usize,
    fold: usize,
) -> Result<Mat> {
    let mask = suite.fold_mask(fold, plan.fold_size(fold))?;
    let start = plan.fold_offset(party, fold);
    Ok(mask.column_slice(start..start + plan.fold_members(party, fold).len()))
}

fn select_rows(a: &Mat, rows: &[usize]) -> Mat {
    Mat::from_fn(rows.len(), a.ncols(), |i, j| a[(rows[i], j)])
}

/// `𝒴^(p,j)` for every fold `j`.
pub fn party_phenotype_folds(
    suite: &MaskSuite,
    plan: &PartitionPlan,
    party: usize,
    y: &Vector,
) -> Result<Vec<Vector>> {
    if y.len() != plan.party_sizes()[party] {
        return Err(Error::Shape(format!(
            "phenotype has {} rows, party holds {}",
            y.len(),
            plan.party_sizes()[party]
        )));
    }
    let k = suite.phenotype_scalar().value();
    (0..plan.folds())
        .map(|j| {
            let rows = plan.fold_members(party, j);
            let yj = Vector::from_iterator(rows.len(), rows.iter().map(|&i| y[i]));
            Ok(fold_slice(suite, plan, party, j)? * yj * (k * k))
        })
        .collect()
}

/// One party's uploads for block `b` and one ridge index.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeCellPayload {
    /// `ℛ` per held-out fold.
    pub inverse_grams: Vec<Mat>,
    /// `𝒳^(j)` per fold.
    pub designs: Vec<Mat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPayload {
    pub block: usize,
    /// Indexed by ridge.
    pub ridges: Vec<RidgeCellPayload>,
}

/// Builds every masked matrix party `party` contributes for block `block`.
///
/// `x_block` holds the party's standardized projected columns of that block.
pub fn party_block_payload(
    suite: &MaskSuite,
    plan: &PartitionPlan,
    party: usize,
    block: usize,
    x_block: &Mat,
    schedule: &RidgeSchedule,
) -> Result<BlockPayload> {
    let width = plan.blocks()[block].len();
    if x_block.shape() != (plan.party_sizes()[party], width) {
        return Err(Error::Shape(format!(
            "block {block} is {:?}, expected ({}, {width})",
            x_block.shape(),
            plan.party_sizes()[party]
        )));
    }
    let folds = plan.folds();
    let k = suite.phenotype_scalar().value();
    let fold_x: Vec<Mat> = (0..folds)
        .map(|j| select_rows(x_block, plan.fold_members(party, j)))
        .collect();
    let fold_grams: Vec<Mat> = fold_x.iter().map(|x| x.transpose() * x).collect();
    let local_inverses = (0..folds)
        .map(|held_out| {
            let mut a = Mat::identity(width, width) * schedule.admm_rho;
            for j in training_folds(held_out, folds) {
                a += &fold_grams[j];
            }
            spd_inverse(&a, "local Gram plus penalty")
        })
        .collect::<Result<Vec<_>>>()?;
    let row_embedded = (0..folds)
        .map(|j| Ok(fold_slice(suite, plan, party, j)? * &fold_x[j] / k))
        .collect::<Result<Vec<_>>>()?;
    let ridges = (0..schedule.ridges())
        .map(|r| {
            let o = suite.coefficient_mask(block, r, width)?;
            let om = o.matrix();
            Ok(RidgeCellPayload {
                inverse_grams: local_inverses
                    .iter()
                    .map(|inv| om * inv * om.transpose())
                    .collect(),
                designs: row_embedded.iter().map(|x| x * om.transpose()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockPayload { block, ridges })
}

/// Consensus ADMM for `Σ_p ½‖X_p β − y_p‖² + ½λ‖β‖²` in masked coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmmSolver {
    pub rho: f64,
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop once primal plus dual residual falls below `tol·‖z‖`.
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmmState {
    pub x: Vec<Vector>,
    pub u: Vec<Vector>,
    pub z: Vector,
}

impl AdmmState {
    pub fn zeros(parties: usize, dim: usize) -> Self {
        AdmmState {
            x: vec![Vector::zeros(dim); parties],
            u: vec![Vector::zeros(dim); parties],
            z: Vector::zeros(dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdmmOutcome {
    pub z: Vector,
    pub iterations: usize,
    pub converged: bool,
    /// `sqrt(Σ_p ‖x_p − z‖²)` after each iteration.
    pub primal_residuals: Vec<f64>,
}

impl AdmmSolver {
    /// One sweep of x-, z- and dual updates; returns `(primal, dual)` residuals.
    pub fn step(&self, state: &mut AdmmState, inverse_grams: &[&Mat], gram_vectors: &[Vector]) -> (f64, f64) {
        let p = inverse_grams.len() as f64;
        for ((x, u), (inv, g)) in state
            .x
            .iter_mut()
            .zip(&state.u)
            .zip(inverse_grams.iter().zip(gram_vectors))
        {
            *x = *inv * (g + &state.z * self.rho - u);
        }
        let mut centre = Vector::zeros(state.z.len());
        for (x, u) in state.x.iter().zip(&state.u) {
            centre += x + u / self.rho;
        }
        centre /= p;
        let shrink = self.rho / (self.lambda / p + self.rho);
        let z_new = centre * shrink;
        let dual = self.rho * p.sqrt() * (&z_new - &state.z).norm();
        state.z = z_new;
        let mut primal_sq = 0.0;
        for (x, u) in state.x.iter().zip(state.u.iter_mut()) {
            let diff = x - &state.z;
            primal_sq += diff.norm_squared();
            *u += diff * self.rho;
        }
        (primal_sq.sqrt(), dual)
    }

    pub fn solve(&self, inverse_grams: &[&Mat], gram_vectors: &[Vector]) -> Result<AdmmOutcome> {
        if inverse_grams.is_empty() || inverse_grams.len() != gram_vectors.len() {
            return Err(Error::Protocol("ADMM needs one payload per party".into()));
        }
        let dim = gram_vectors[0].len();
        let mut state = AdmmState::zeros(inverse_grams.len(), dim);
        let mut residuals = Vec::with_capacity(self.max_iters);
        let mut first_norm = None;
        for it in 1..=self.max_iters {
            let (primal, dual) = self.step(&mut state, inverse_grams, gram_vectors);
            residuals.push(primal);
            let norm = state.z.norm();
            if !norm.is_finite() {
                return Err(Error::Numerical(format!("ADMM produced non-finite iterate at step {it}")));
            }
            let base = *first_norm.get_or_insert(norm);
            if base > 0.0 && norm > DIVERGENCE_FACTOR * base {
                return Err(Error::Numerical(format!(
                    "ADMM diverging: |z| grew from {base:e} to {norm:e} by step {it}"
                )));
            }
            // scale-free so the phenotype scalar never shifts the stopping step
            if primal + dual <= self.tol * norm || primal + dual == 0.0 {
                return Ok(AdmmOutcome {
                    z: state.z,
                    iterations: it,
                    converged: true,
                    primal_residuals: residuals,
                });
            }
        }
        Ok(AdmmOutcome {
            z: state.z,
            iterations: self.max_iters,
            converged: false,
            primal_residuals: residuals,
        })
    }
}

/// Masked out-of-fold predictions `O_ỹ^(k) ŷ_k^(b,r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Level0Predictions {
    folds: usize,
    blocks: usize,
    ridges: usize,
    cells: Vec<Option<Vector>>,
}

impl Level0Predictions {
    pub fn new(folds: usize, blocks: usize, ridges: usize) -> Self {
        Level0Predictions {
            folds,
            blocks,
            ridges,
            cells: vec![None; folds * blocks * ridges],
        }
    }

    fn index(&self, fold: usize, block: usize, ridge: usize) -> usize {
        (fold * self.blocks + block) * self.ridges + ridge
    }

    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn ridges(&self) -> usize {
        self.ridges
    }

    pub fn set(&mut self, fold: usize, block: usize, ridge: usize, v: Vector) {
        let i = self.index(fold, block, ridge);
        self.cells[i] = Some(v);
    }

    pub fn get(&self, fold: usize, block: usize, ridge: usize) -> Result<&Vector> {
        self.cells[self.index(fold, block, ridge)]
            .as_ref()
            .ok_or_else(|| {
                Error::Protocol(format!(
                    "missing Level-0 cell (fold {fold}, block {block}, ridge {ridge})"
                ))
            })
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(Option::is_some)
    }

    /// Stores the `[k][r]` output of one block.
    pub fn insert_block(&mut self, block: usize, by_fold_ridge: Vec<Vec<Vector>>) {
        for (k, row) in by_fold_ridge.into_iter().enumerate() {
            for (r, v) in row.into_iter().enumerate() {
                self.set(k, block, r, v);
            }
        }
    }
}

/// Solved cell with its diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSolution {
    pub prediction: Vector,
    pub z: Vector,
    pub iterations: usize,
    pub converged: bool,
}

/// Server: solves every `(k, r)` cell of one block and returns `[k][r]` solutions.
///
/// `payloads[p]` and `phenotype_folds[p]` are party `p`'s uploads.
pub fn server_level0_block(
    payloads: &[BlockPayload],
    phenotype_folds: &[Vec<Vector>],
    schedule: &RidgeSchedule,
) -> Result<Vec<Vec<CellSolution>>> {
    let parties = payloads.len();
    if parties == 0 || phenotype_folds.len() != parties {
        return Err(Error::Protocol("Level-0 block needs every party".into()));
    }
    let ridges = schedule.ridges();
    let folds = phenotype_folds[0].len();
    for (p, pay) in payloads.iter().enumerate() {
        if pay.ridges.len() != ridges
            || phenotype_folds[p].len() != folds
            || pay
                .ridges
                .iter()
                .any(|c| c.designs.len() != folds || c.inverse_grams.len() != folds)
        {
            return Err(Error::Protocol(format!(
                "party {} Level-0 payload has the wrong cell layout",
                p + 1
            )));
        }
    }
    // per (r, p, j): 𝒳^(p,j)ᵀ 𝒴^(p,j)
    let fold_products: Vec<Vec<Vec<Vector>>> = (0..ridges)
        .map(|r| {
            payloads
                .iter()
                .zip(phenotype_folds)
                .map(|(pay, ys)| {
                    pay.ridges[r]
                        .designs
                        .iter()
                        .zip(ys)
                        .map(|(x, y)| x.tr_mul(y))
                        .collect()
                })
                .collect()
        })
        .collect();
    let cells: Vec<(usize, usize)> = (0..folds)
        .flat_map(|k| (0..ridges).map(move |r| (k, r)))
        .collect();
    let solved = cells
        .par_iter()
        .map(|&(k, r)| {
            let train = training_folds(k, folds);
            let grams: Vec<&Mat> = payloads
                .iter()
                .map(|pay| &pay.ridges[r].inverse_grams[k])
                .collect();
            let vectors: Vec<Vector> = fold_products[r]
                .iter()
                .map(|per_fold| {
                    let mut g = Vector::zeros(per_fold[0].len());
                    for &j in &train {
                        g += &per_fold[j];
                    }
                    g
                })
                .collect();
            let solver = AdmmSolver {
                rho: schedule.admm_rho,
                lambda: schedule.lambdas[r],
                max_iters: schedule.admm_iters,
                tol: DEFAULT_ADMM_TOL,
            };
            let out = solver.solve(&grams, &vectors)?;
            let mut prediction = Vector::zeros(payloads[0].ridges[r].designs[k].nrows());
            for pay in payloads {
                prediction += &pay.ridges[r].designs[k] * &out.z;
            }
            Ok(CellSolution {
                prediction,
                z: out.z,
                iterations: out.iterations,
                converged: out.converged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out: Vec<Vec<CellSolution>> = (0..folds).map(|_| Vec::with_capacity(ridges)).collect();
    for ((k, _), s) in cells.into_iter().zip(solved) {
        out[k].push(s);
    }
    Ok(out)
}

/// Mask holder's view of a consensus variable: `β = O_Xᵀ z / k`.
pub fn decode_coefficients(
    suite: &MaskSuite,
    block: usize,
    ridge: usize,
    width: usize,
    z: &Vector,
) -> Result<Vector> {
    let o = suite.coefficient_mask(block, ridge, width)?;
    Ok(o.matrix().tr_mul(z) / suite.phenotype_scalar().value())
}

/// Mask holder's view of a fold-`k` vector: `O_ỹ^(k)ᵀ v`.
pub fn decode_fold_vector(
    suite: &MaskSuite,
    plan: &PartitionPlan,
    fold: usize,
    v: &Vector,
) -> Result<Vector> {
    let o = suite.fold_mask(fold, plan.fold_size(fold))?;
    Ok(o.matrix().tr_mul(v))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::linalg::max_abs_diff;
    use crate::seedcraft::{PadPolicy, SeedKey};

    fn suite(tag: &str) -> MaskSuite {
        MaskSuite::new(SeedKey::from_passphrase(tag), PadPolicy::default())
    }

    fn rel(a: &Vector, b: &Vector) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    /// Closed-form ridge by LU on the normal equations.
    fn ridge(x: &Mat, y: &Vector, lambda: f64) -> Vector {
        let a = x.transpose() * x + Mat::identity(x.ncols(), x.ncols()) * lambda;
        a.lu().solve(&(x.transpose() * y)).unwrap()
    }

    struct Case {
        suite: MaskSuite,
        plan: PartitionPlan,
        x: Vec<Mat>,
        y: Vec<Vector>,
    }

    impl Case {
        fn random(tag: &str, sizes: &[usize], width: usize, folds: usize) -> Case {
            let suite = suite(tag);
            let mut rng = ChaCha20Rng::seed_from_u64(tag.len() as u64 * 7919);
            let plan = suite.plan(width, 1, sizes, folds).unwrap();
            let x = sizes
                .iter()
                .map(|&n| Mat::from_fn(n, width, |_, _| rng.sample(StandardNormal)))
                .collect();
            let y = sizes
                .iter()
                .map(|&n| Vector::from_fn(n, |_, _| rng.sample(StandardNormal)))
                .collect();
            Case { suite, plan, x, y }
        }

        fn global_fold(&self, fold: usize) -> (Mat, Vector) {
            let mut rows_x = Vec::new();
            let mut rows_y = Vec::new();
            for p in 0..self.plan.parties() {
                for &i in self.plan.fold_members(p, fold) {
                    rows_x.push(self.x[p].row(i).clone_owned());
                    rows_y.push(self.y[p][i]);
                }
            }
            (Mat::from_rows(&rows_x), Vector::from_vec(rows_y))
        }

        fn training(&self, fold: usize) -> (Mat, Vector) {
            let parts: Vec<(Mat, Vector)> = self
                .plan
                .training_folds(fold)
                .into_iter()
                .map(|j| self.global_fold(j))
                .collect();
            let rows: usize = parts.iter().map(|(x, _)| x.nrows()).sum();
            let mut x = Mat::zeros(rows, self.x[0].ncols());
            let mut y = Vector::zeros(rows);
            let mut at = 0;
            for (px, py) in parts {
                x.rows_mut(at, px.nrows()).copy_from(&px);
                y.rows_mut(at, py.len()).copy_from(&py);
                at += px.nrows();
            }
            (x, y)
        }

        fn run(&self, schedule: &RidgeSchedule) -> Vec<Vec<CellSolution>> {
            let payloads: Vec<BlockPayload> = (0..self.plan.parties())
                .map(|p| party_block_payload(&self.suite, &self.plan, p, 0, &self.x[p], schedule).unwrap())
                .collect();
            let ys: Vec<Vec<Vector>> = (0..self.plan.parties())
                .map(|p| party_phenotype_folds(&self.suite, &self.plan, p, &self.y[p]).unwrap())
                .collect();
            server_level0_block(&payloads, &ys, schedule).unwrap()
        }
    }

    #[test]
    fn schedule_examples() {
        let s = build_schedule(100, 4, 2, 1.0, 100, None).unwrap();
        assert!((s.heritabilities[0] - 0.01).abs() < 1e-15);
        assert!((s.heritabilities[1] - 0.99).abs() < 1e-15);
        assert!((s.lambdas[0] - 999_900.0).abs() < 1e-6);
        assert!((s.lambdas[1] - 100.0 * 0.0199 / 0.9801).abs() < 1e-9);
        assert!((s.lambdas[1] - 2.0304).abs() < 1e-4);
        for (o, l) in s.omegas.iter().zip(&s.lambdas) {
            assert!((o / l - 8.0 / 100.0).abs() < 1e-15);
        }
        assert_eq!(s.cgd_iters, 8);
        assert!(build_schedule(100, 4, 1, 1.0, 100, None).is_err());
        let s = build_schedule(50, 3, 7, 1.0, 100, None).unwrap();
        assert!(s.lambdas.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn auto_rho_tracks_training_size() {
        assert_eq!(auto_admm_rho(600, 5, 3), 128.0);
        assert_eq!(auto_admm_rho(2, 1, 1), 2.0);
    }

    #[test]
    fn foldless_identity_design() {
        let s = suite("identity");
        let plan = s.plan(2, 1, &[2], 1).unwrap();
        let x = Mat::identity(2, 2);
        let y = Vector::from_vec(vec![1.0, 0.0]);
        let sched = RidgeSchedule::custom(vec![1.0], vec![1.0], 1.0, 50, 10);
        let pay = party_block_payload(&s, &plan, 0, 0, &x, &sched).unwrap();
        let ys = party_phenotype_folds(&s, &plan, 0, &y).unwrap();
        let out = server_level0_block(&[pay], &[ys], &sched).unwrap();
        let beta = decode_coefficients(&s, 0, 0, 2, &out[0][0].z).unwrap();
        assert!((beta[0] - 0.5).abs() < 1e-6 && beta[1].abs() < 1e-6, "{beta}");
    }

    #[test]
    fn vanishing_penalty_reaches_least_squares() {
        let s = suite("ols");
        let plan = s.plan(3, 1, &[3], 1).unwrap();
        let x = Mat::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.3, 1.5, 0.2, -0.4, 0.1, 1.0]);
        let y = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let sched = RidgeSchedule::custom(vec![1e-10], vec![1e-10], 1.0, 2000, 10);
        let pay = party_block_payload(&s, &plan, 0, 0, &x, &sched).unwrap();
        let ys = party_phenotype_folds(&s, &plan, 0, &y).unwrap();
        let out = server_level0_block(&[pay], &[ys], &sched).unwrap();
        let beta = decode_coefficients(&s, 0, 0, 3, &out[0][0].z).unwrap();
        let ols = x.clone().lu().solve(&y).unwrap();
        assert!((beta - ols).amax() < 1e-5);
    }

    #[test]
    fn mask_cancellation_identities() {
        let c = Case::random("cancel", &[20], 4, 2);
        let sched = RidgeSchedule::custom(vec![3.0], vec![1.0], 4.0, 10, 4);
        let pay = party_block_payload(&c.suite, &c.plan, 0, 0, &c.x[0], &sched).unwrap();
        let k = c.suite.phenotype_scalar().value();
        let o = c.suite.coefficient_mask(0, 0, 4).unwrap();
        let om = o.matrix();
        for j in 0..2 {
            let d = &pay.ridges[0].designs[j];
            let xj = select_rows(&c.x[0], c.plan.fold_members(0, j));
            let expect = om * (xj.transpose() * &xj) * om.transpose() / (k * k);
            assert!(max_abs_diff(&(d.transpose() * d), &expect) < 1e-9);
        }
        // ℛ for held-out fold 0 decodes to the fold-1 inverse Gram
        let x1 = select_rows(&c.x[0], c.plan.fold_members(0, 1));
        let direct = (x1.transpose() * &x1 + Mat::identity(4, 4) * 4.0)
            .try_inverse()
            .unwrap();
        let decoded = om.transpose() * &pay.ridges[0].inverse_grams[0] * om;
        assert!(max_abs_diff(&decoded, &direct) < 1e-9);
    }

    #[test]
    fn pooled_phenotype_folds_decode() {
        let c = Case::random("pheno", &[9, 8, 10], 3, 3);
        let k = c.suite.phenotype_scalar().value();
        let ys: Vec<Vec<Vector>> = (0..3)
            .map(|p| party_phenotype_folds(&c.suite, &c.plan, p, &c.y[p]).unwrap())
            .collect();
        for j in 0..3 {
            let mut pooled = Vector::zeros(ys[0][j].len());
            for y in &ys {
                pooled += &y[j];
            }
            let dec = decode_fold_vector(&c.suite, &c.plan, j, &pooled).unwrap() / (k * k);
            let (_, expect) = c.global_fold(j);
            assert!((dec - expect).amax() < 1e-10);
        }
    }

    #[test]
    fn distributed_coefficients_match_closed_form() {
        let c = Case::random("closed-form", &[20, 20, 20], 8, 5);
        let sched = build_schedule(8, 1, 5, auto_admm_rho(60, 5, 3), 100, None).unwrap();
        let out = c.run(&sched);
        for k in 0..5 {
            let (xt, yt) = c.training(k);
            for r in 0..5 {
                let beta = decode_coefficients(&c.suite, 0, r, 8, &out[k][r].z).unwrap();
                let expect = ridge(&xt, &yt, sched.lambdas[r]);
                assert!(rel(&beta, &expect) < 1e-4, "k={k} r={r}: {}", rel(&beta, &expect));
            }
        }
    }

    #[test]
    fn predictions_match_out_of_fold_ridge() {
        let c = Case::random("predictions", &[15, 17], 6, 4);
        let sched = build_schedule(6, 1, 3, auto_admm_rho(32, 4, 2), 100, None).unwrap();
        let out = c.run(&sched);
        for k in 0..4 {
            let (xt, yt) = c.training(k);
            let (xk, _) = c.global_fold(k);
            for r in 0..3 {
                let expect = &xk * ridge(&xt, &yt, sched.lambdas[r]);
                let got = decode_fold_vector(&c.suite, &c.plan, k, &out[k][r].prediction).unwrap();
                assert!(rel(&got, &expect) < 1e-4);
            }
        }
    }

    #[test]
    fn predictions_survive_reseeding() {
        let mut a = Case::random("reseed", &[12, 12], 5, 3);
        let sched = build_schedule(5, 1, 2, 8.0, 100, None).unwrap();
        let first = a.run(&sched);
        let plain_a: Vec<Vector> = (0..3)
            .map(|k| decode_fold_vector(&a.suite, &a.plan, k, &first[k][1].prediction).unwrap())
            .collect();
        // same data and folds, different masks
        let other = suite("reseed-other");
        a.suite = other;
        let second = a.run(&sched);
        for k in 0..3 {
            let b = decode_fold_vector(&a.suite, &a.plan, k, &second[k][1].prediction).unwrap();
            assert!(rel(&b, &plain_a[k]) < 1e-6);
        }
    }

    #[test]
    fn zero_phenotype_gives_zero_predictions() {
        let mut c = Case::random("zero", &[10, 10], 4, 2);
        for y in &mut c.y {
            y.fill(0.0);
        }
        let sched = build_schedule(4, 1, 2, 8.0, 20, None).unwrap();
        for row in c.run(&sched) {
            for cell in row {
                assert_eq!(cell.prediction.amax(), 0.0);
            }
        }
    }

    #[test]
    fn closed_form_is_a_fixed_point() {
        let c = Case::random("fixed-point", &[14, 16], 5, 2);
        let sched = RidgeSchedule::custom(vec![2.5], vec![1.0], 16.0, 1, 1);
        let payloads: Vec<BlockPayload> = (0..2)
            .map(|p| party_block_payload(&c.suite, &c.plan, p, 0, &c.x[p], &sched).unwrap())
            .collect();
        let ys: Vec<Vec<Vector>> = (0..2)
            .map(|p| party_phenotype_folds(&c.suite, &c.plan, p, &c.y[p]).unwrap())
            .collect();
        // held-out fold 0 trains on fold 1 only
        let g: Vec<Vector> = (0..2)
            .map(|p| payloads[p].ridges[0].designs[1].tr_mul(&ys[p][1]))
            .collect();
        let inv: Vec<&Mat> = payloads.iter().map(|p| &p.ridges[0].inverse_grams[0]).collect();
        let (xt, yt) = c.training(0);
        let k = c.suite.phenotype_scalar().value();
        let o = c.suite.coefficient_mask(0, 0, 5).unwrap();
        let z = o.apply(&Mat::from_column_slice(5, 1, ridge(&xt, &yt, 2.5).as_slice())) * k;
        let z = z.column(0).clone_owned();
        // stationary duals satisfy u_p = g_p − A_p z, with A_p = ℛ⁺ − ρI on the mask range
        let u: Vec<Vector> = (0..2)
            .map(|p| {
                let a_plus_rho = o.matrix()
                    * o.matrix().transpose()
                    * inv[p].clone().pseudo_inverse(1e-12).unwrap()
                    * o.matrix()
                    * o.matrix().transpose();
                let az = &a_plus_rho * &z - &z * 16.0;
                &g[p] - az
            })
            .collect();
        let mut state = AdmmState {
            x: vec![z.clone(), z.clone()],
            u: u.clone(),
            z: z.clone(),
        };
        let solver = AdmmSolver {
            rho: 16.0,
            lambda: 2.5,
            max_iters: 1,
            tol: 0.0,
        };
        solver.step(&mut state, &inv, &g);
        assert!((&state.z - &z).norm() < 1e-8 * z.norm());
        for p in 0..2 {
            assert!((&state.x[p] - &z).norm() < 1e-8 * z.norm());
        }
    }

    #[test]
    fn primal_residual_decreases_late() {
        let c = Case::random("monotone", &[30, 30], 6, 1);
        let sched = RidgeSchedule::custom(vec![5.0], vec![1.0], 32.0, 60, 1);
        let payloads: Vec<BlockPayload> = (0..2)
            .map(|p| party_block_payload(&c.suite, &c.plan, p, 0, &c.x[p], &sched).unwrap())
            .collect();
        let ys: Vec<Vec<Vector>> = (0..2)
            .map(|p| party_phenotype_folds(&c.suite, &c.plan, p, &c.y[p]).unwrap())
            .collect();
        let g: Vec<Vector> = (0..2)
            .map(|p| payloads[p].ridges[0].designs[0].tr_mul(&ys[p][0]))
            .collect();
        let inv: Vec<&Mat> = payloads.iter().map(|p| &p.ridges[0].inverse_grams[0]).collect();
        let solver = AdmmSolver {
            rho: 32.0,
            lambda: 5.0,
            max_iters: 60,
            tol: 0.0,
        };
        let out = solver.solve(&inv, &g).unwrap();
        let h = &out.primal_residuals;
        let start = h.len() / 5;
        for w in h[start..].windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9) || w[0] < 1e-13, "{:?}", &h[start..]);
        }
    }

    #[test]
    fn divergence_is_reported() {
        // a negative penalty makes the z-update expansive
        let inv = Mat::identity(2, 2);
        let g = vec![Vector::from_vec(vec![1.0, 1.0])];
        let solver = AdmmSolver {
            rho: 1.0,
            lambda: -1.9,
            max_iters: 500,
            tol: 0.0,
        };
        assert!(matches!(solver.solve(&[&inv], &g), Err(Error::Numerical(_))));
    }
}
