//! Seeded synthetic cohorts with Balding–Nichols structure and sibling-style relatedness.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::blockstore::{CovariateMatrix, Dataset, GenotypeBlock, PhenotypeVector, MISSING};
use crate::error::{Error, Result};

const STREAM_LAYOUT: u64 = 0;
const STREAM_COVARIATES: u64 = 1;
const STREAM_TRAIT: u64 = 2;
const STREAM_MISSING: u64 = 3;
const STREAM_SNP_BASE: u64 = 1 << 32;

fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationModel {
    pub fst: f64,
    pub subpopulations: usize,
    /// Fraction of samples that belong to a related pair.
    pub relatedness: f64,
    pub maf_range: (f64, f64),
}

impl Default for PopulationModel {
    fn default() -> Self {
        PopulationModel {
            fst: 0.1,
            subpopulations: 3,
            relatedness: 0.25,
            maf_range: (0.1, 0.5),
        }
    }
}

impl PopulationModel {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.maf_range;
        if !(self.fst > 0.0 && self.fst < 1.0) {
            return Err(Error::Config(format!("fst {} outside (0, 1)", self.fst)));
        }
        if self.subpopulations == 0 {
            return Err(Error::Config("need at least one subpopulation".into()));
        }
        if !(0.0..1.0).contains(&self.relatedness) {
            return Err(Error::Config(format!(
                "relatedness {} outside [0, 1)",
                self.relatedness
            )));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(Error::Config(format!("allele frequency range ({lo}, {hi}) invalid")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraitModel {
    pub causal_fraction: f64,
    pub heritability: f64,
    /// One effect per covariate column.
    pub covariate_effects: Vec<f64>,
}

impl TraitModel {
    pub fn new(causal_fraction: f64, heritability: f64, covariate_effects: Vec<f64>) -> Self {
        TraitModel {
            causal_fraction,
            heritability,
            covariate_effects,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.causal_fraction > 0.0 && self.causal_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "causal fraction {} outside (0, 1]",
                self.causal_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.heritability) {
            return Err(Error::Config(format!(
                "heritability {} outside [0, 1)",
                self.heritability
            )));
        }
        Ok(())
    }
}

/// Subpopulation label of every sample and the disjoint related pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleLayout {
    pub subpopulation: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
}

pub fn sample_layout(seed: u64, n: usize, model: &PopulationModel) -> SampleLayout {
    let mut rng = stream(seed, STREAM_LAYOUT);
    let subpopulation: Vec<usize> = (0..n)
        .map(|_| rng.random_range(0..model.subpopulations))
        .collect();
    let wanted = (model.relatedness * n as f64 / 2.0).floor() as usize;
    let mut pairs = Vec::with_capacity(wanted);
    for s in 0..model.subpopulations {
        let mut members: Vec<usize> = (0..n).filter(|&i| subpopulation[i] == s).collect();
        members.shuffle(&mut rng);
        for pair in members.chunks_exact(2) {
            if pairs.len() == wanted {
                break;
            }
            pairs.push((pair[0], pair[1]));
        }
    }
    SampleLayout {
        subpopulation,
        pairs,
    }
}

/// Ancestral frequency and per-subpopulation frequencies of SNP `snp`.
pub fn snp_frequencies(seed: u64, snp: usize, model: &PopulationModel) -> (f64, Vec<f64>) {
    snp_frequencies_with(&mut stream(seed, STREAM_SNP_BASE + snp as u64), model)
}

fn snp_frequencies_with(rng: &mut ChaCha20Rng, model: &PopulationModel) -> (f64, Vec<f64>) {
    let (lo, hi) = model.maf_range;
    let p = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let scale = (1.0 - model.fst) / model.fst;
    let beta = Beta::new(p * scale, (1.0 - p) * scale).expect("positive beta parameters");
    let freqs = (0..model.subpopulations)
        .map(|_| beta.sample(rng))
        .collect();
    (p, freqs)
}

/// `n × m` dosage matrix drawn from the Balding–Nichols model.
pub fn gen_genotypes(seed: u64, n: usize, m: usize, model: &PopulationModel) -> Result<GenotypeBlock> {
    model.validate()?;
    if n == 0 || m == 0 {
        return Err(Error::Config("need at least one sample and one SNP".into()));
    }
    let layout = sample_layout(seed, n, model);
    let columns: Vec<Vec<i8>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream(seed, STREAM_SNP_BASE + j as u64);
            let (_, freqs) = snp_frequencies_with(&mut rng, model);
            let mut h1: Vec<u8> = layout
                .subpopulation
                .iter()
                .map(|&s| rng.random_bool(freqs[s]) as u8)
                .collect();
            for &(a, b) in &layout.pairs {
                h1[b] = h1[a];
            }
            layout
                .subpopulation
                .iter()
                .zip(h1)
                .map(|(&s, h)| (h + rng.random_bool(freqs[s]) as u8) as i8)
                .collect()
        })
        .collect();
    let mut data = vec![0i8; n * m];
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            data[i * m + j] = v;
        }
    }
    GenotypeBlock::new(n, m, data)
}

pub fn gen_covariates(seed: u64, n: usize, c: usize) -> CovariateMatrix {
    let mut rng = stream(seed, STREAM_COVARIATES);
    let data = (0..n * c).map(|_| rng.sample(StandardNormal)).collect();
    CovariateMatrix::new(n, c, data).expect("shape is consistent")
}

/// Column-standardized dosages with missing entries at the column mean (zero).
fn standardized_column(g: &GenotypeBlock, j: usize) -> Vec<f64> {
    let called: Vec<f64> = g.column(j).filter(|&v| v != MISSING).map(f64::from).collect();
    if called.is_empty() {
        return vec![0.0; g.rows()];
    }
    let mean = called.iter().sum::<f64>() / called.len() as f64;
    let var = called.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / called.len() as f64;
    let sd = var.sqrt();
    g.column(j)
        .map(|v| {
            if v == MISSING || sd == 0.0 {
                0.0
            } else {
                (f64::from(v) - mean) / sd
            }
        })
        .collect()
}

fn sample_variance(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
}

/// Causal SNP indices and their effects on standardized dosages.
pub fn causal_effects(seed: u64, m: usize, model: &TraitModel) -> Vec<(usize, f64)> {
    let mut rng = stream(seed, STREAM_TRAIT);
    let count = ((model.causal_fraction * m as f64).round() as usize).clamp(1, m);
    let sd = (model.heritability / count as f64).sqrt();
    let mut idx = sample(&mut rng, m, count).into_vec();
    idx.sort_unstable();
    idx.into_iter()
        .map(|j| (j, sd * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// `y = g + Zα + e` with `Var(g) = h²` and `e ~ N(0, 1 − h²)`.
pub fn gen_phenotype(
    seed: u64,
    genotypes: &GenotypeBlock,
    covariates: &CovariateMatrix,
    model: &TraitModel,
) -> Result<PhenotypeVector> {
    model.validate()?;
    let n = genotypes.rows();
    if covariates.rows() != n {
        return Err(Error::Shape(format!(
            "{} covariate rows for {n} samples",
            covariates.rows()
        )));
    }
    if model.covariate_effects.len() != covariates.cols() {
        return Err(Error::Shape(format!(
            "{} covariate effects for {} covariates",
            model.covariate_effects.len(),
            covariates.cols()
        )));
    }
    let h2 = model.heritability;
    let mut g = vec![0.0; n];
    if h2 > 0.0 {
        for (j, beta) in causal_effects(seed, genotypes.cols(), model) {
            for (gi, x) in g.iter_mut().zip(standardized_column(genotypes, j)) {
                *gi += beta * x;
            }
        }
        let var = sample_variance(&g);
        if var > 0.0 {
            let s = (h2 / var).sqrt();
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    let mut rng = stream(seed, STREAM_TRAIT + 16);
    let noise_sd = (1.0 - h2).sqrt();
    let y = (0..n)
        .map(|i| {
            let za: f64 = model
                .covariate_effects
                .iter()
                .enumerate()
                .map(|(c, a)| a * covariates.get(i, c))
                .sum();
            g[i] + za + noise_sd * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    Ok(PhenotypeVector(y))
}

/// Replaces each entry with the missing sentinel independently with probability `rate`.
pub fn inject_missing(seed: u64, block: &mut GenotypeBlock, rate: f64) {
    let mut rng = stream(seed, STREAM_MISSING);
    for i in 0..block.rows() {
        for j in 0..block.cols() {
            if rng.random_bool(rate) {
                block.set(i, j, MISSING);
            }
        }
    }
}

/// Everything needed to generate one unsplit dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub samples: usize,
    pub snps: usize,
    pub covariates: usize,
    pub storage_blocks: usize,
    pub population: PopulationModel,
    pub causal_fraction: f64,
    pub heritability: f64,
    pub covariate_effect: f64,
    pub missing_rate: f64,
}

impl SynthConfig {
    pub fn new(samples: usize, snps: usize, covariates: usize) -> Self {
        SynthConfig {
            samples,
            snps,
            covariates,
            storage_blocks: 1,
            population: PopulationModel::default(),
            causal_fraction: 0.01,
            heritability: 0.5,
            covariate_effect: 0.2,
            missing_rate: 0.0,
        }
    }

    pub fn trait_model(&self) -> TraitModel {
        TraitModel::new(
            self.causal_fraction,
            self.heritability,
            vec![self.covariate_effect; self.covariates],
        )
    }
}

pub fn generate(seed: u64, cfg: &SynthConfig) -> Result<Dataset> {
    let mut g = gen_genotypes(seed, cfg.samples, cfg.snps, &cfg.population)?;
    let z = gen_covariates(seed, cfg.samples, cfg.covariates);
    let y = gen_phenotype(seed, &g, &z, &cfg.trait_model())?;
    if cfg.missing_rate > 0.0 {
        inject_missing(seed, &mut g, cfg.missing_rate);
    }
    Dataset::from_parts(0, &g, cfg.storage_blocks.min(cfg.snps), y, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{Mat, Vector};

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn dosages_stay_in_domain() {
        let g = gen_genotypes(1, 200, 50, &PopulationModel::default()).unwrap();
        assert!(g.as_slice().iter().all(|v| (0..=2).contains(v)));
    }

    #[test]
    fn tiny_fst_collapses_subpopulation_spread() {
        let model = PopulationModel {
            fst: 1e-6,
            ..PopulationModel::default()
        };
        for j in 0..500 {
            let (_, f) = snp_frequencies(9, j, &model);
            let spread = f.iter().cloned().fold(f64::MIN, f64::max)
                - f.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread < 0.01, "snp {j} spread {spread}");
        }
    }

    #[test]
    fn mean_dosage_tracks_frequency() {
        let model = PopulationModel::default();
        let n = 20_000;
        let g = gen_genotypes(4, n, 20, &model).unwrap();
        let layout = sample_layout(4, n, &model);
        let mut weights = vec![0.0; model.subpopulations];
        for &s in &layout.subpopulation {
            weights[s] += 1.0 / n as f64;
        }
        for j in 0..20 {
            let (_, f) = snp_frequencies(4, j, &model);
            let expected: f64 = 2.0 * f.iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>();
            let mean = g.column(j).map(f64::from).sum::<f64>() / n as f64;
            assert!((mean - expected).abs() < 0.02, "snp {j}: {mean} vs {expected}");
        }
    }

    #[test]
    fn related_pairs_share_a_haplotype() {
        let model = PopulationModel::default();
        let layout = sample_layout(2, 400, &model);
        assert_eq!(layout.pairs.len(), 50);
        let g = gen_genotypes(2, 400, 300, &model).unwrap();
        // a shared haplotype raises dosage correlation to about one half
        let (a, b) = layout.pairs[0];
        let ra: Vec<f64> = (0..300).map(|j| f64::from(g.get(a, j))).collect();
        let rb: Vec<f64> = (0..300).map(|j| f64::from(g.get(b, j))).collect();
        assert!(pearson(&ra, &rb) > 0.25);
    }

    #[test]
    fn zero_heritability_trait_is_unlinked() {
        let n = 4000;
        let g = gen_genotypes(5, n, 40, &PopulationModel::default()).unwrap();
        let z = gen_covariates(5, n, 0);
        let model = TraitModel::new(0.25, 0.0, vec![]);
        let y = gen_phenotype(5, &g, &z, &model).unwrap();
        let bound = 4.0 / (n as f64).sqrt();
        for (j, _) in causal_effects(5, 40, &TraitModel::new(0.25, 0.5, vec![])) {
            let x: Vec<f64> = g.column(j).map(f64::from).collect();
            assert!(pearson(&x, y.values()).abs() < bound);
        }
    }

    #[test]
    fn high_heritability_variance_is_genetic() {
        let n = 3000;
        let g = gen_genotypes(6, n, 60, &PopulationModel::default()).unwrap();
        let z = gen_covariates(6, n, 0);
        let y = gen_phenotype(6, &g, &z, &TraitModel::new(0.2, 0.99, vec![])).unwrap();
        let var = sample_variance(y.values());
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn empirical_heritability_matches_request() {
        let n = 10_000;
        let m = 100;
        let g = gen_genotypes(7, n, m, &PopulationModel::default()).unwrap();
        let z = gen_covariates(7, n, 2);
        let model = TraitModel::new(0.1, 0.4, vec![0.5, -0.3]);
        let y = gen_phenotype(7, &g, &z, &model).unwrap();
        // regress y on [1, Z, causal standardized SNPs]; h² estimate is the genetic share of
        // the variance left after the covariates
        let causal = causal_effects(7, m, &model);
        let p = 1 + 2 + causal.len();
        let mut d = Mat::zeros(n, p);
        for i in 0..n {
            d[(i, 0)] = 1.0;
            d[(i, 1)] = z.get(i, 0);
            d[(i, 2)] = z.get(i, 1);
        }
        for (c, (j, _)) in causal.iter().enumerate() {
            for (i, v) in standardized_column(&g, *j).into_iter().enumerate() {
                d[(i, 3 + c)] = v;
            }
        }
        let yv = Vector::from_column_slice(y.values());
        let coef = (d.transpose() * &d)
            .cholesky()
            .unwrap()
            .solve(&(d.transpose() * &yv));
        let genetic = d.columns(3, causal.len()) * coef.rows(3, causal.len());
        let resid = &yv - &d * &coef;
        let vg = sample_variance(genetic.as_slice());
        let ve = sample_variance(resid.as_slice());
        let h2 = vg / (vg + ve);
        assert!((h2 - 0.4).abs() < 0.05, "estimated h2 {h2}");
    }

    #[test]
    fn unit_heritability_rejected() {
        let g = gen_genotypes(1, 10, 5, &PopulationModel::default()).unwrap();
        let z = gen_covariates(1, 10, 0);
        assert!(gen_phenotype(1, &g, &z, &TraitModel::new(0.5, 1.0, vec![])).is_err());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let mut cfg = SynthConfig::new(50, 30, 2);
        cfg.missing_rate = 0.05;
        cfg.storage_blocks = 3;
        let a = generate(11, &cfg).unwrap();
        let b = generate(11, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate(12, &cfg).unwrap();
        assert_ne!(a.blocks, c.blocks);
        assert!(a.genotypes().as_slice().contains(&MISSING));
    }
}
