//! Shared-seed randomness.
//!
//! Every obfuscation object used by the protocol is a pure function of the
//! participants' shared root key and a derivation path. Two processes holding
//! the same root therefore produce bit-identical masks without talking to each
//! other, and the server never sees any of the key material.
//!
//! Child keys are HMAC-SHA256 of the parent key over a canonical encoding of
//! `(phase, indices)`. Key bytes seed a ChaCha20 stream from which matrices and
//! scalars are drawn.

use std::ops::Range;

use hmac::{Hmac, KeyInit, Mac};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{IntMatrix, Mat};

type HmacSha256 = Hmac<Sha256>;

/// Protocol phase tags usable in a derivation path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Phase {
    Qc = 1,
    QcBlind = 2,
    Moments = 3,
    MomentsBlind = 4,
    Projection = 5,
    Level0 = 6,
    Level1 = 7,
    Assoc = 8,
    Partition = 9,
    Digest = 10,
    Pad = 11,
    Share = 12,
    Retry = 13,
}

/// A node in the key-derivation tree.
#[derive(Clone, PartialEq, Eq)]
pub struct SeedKey {
    bytes: [u8; 32],
    path: Vec<(Phase, Vec<u64>)>,
}

impl std::fmt::Debug for SeedKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // never print key material
        f.debug_struct("SeedKey").field("path", &self.path).finish()
    }
}

impl SeedKey {
    pub fn from_root(root: [u8; 32]) -> Self {
        SeedKey {
            bytes: root,
            path: Vec::new(),
        }
    }

    /// Root key from a shared passphrase (SHA-256 of the UTF-8 text).
    pub fn from_passphrase(passphrase: &str) -> Self {
        let digest = Sha256::digest(passphrase.as_bytes());
        let mut root = [0u8; 32];
        root.copy_from_slice(&digest);
        SeedKey::from_root(root)
    }

    pub fn derive(&self, phase: Phase, indices: &[u64]) -> SeedKey {
        let mut mac = <HmacSha256 as KeyInit>::new_from_slice(&self.bytes)
            .expect("HMAC accepts 32-byte keys");
        mac.update(&[phase as u8]);
        mac.update(&(indices.len() as u32).to_le_bytes());
        for i in indices {
            mac.update(&i.to_le_bytes());
        }
        let out = mac.finalize().into_bytes();
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&out);
        let mut path = self.path.clone();
        path.push((phase, indices.to_vec()));
        SeedKey { bytes, path }
    }

    pub fn bytes(&self) -> &[u8; 32] {
        &self.bytes
    }

    pub fn path(&self) -> &[(Phase, Vec<u64>)] {
        &self.path
    }

    pub fn rng(&self) -> ChaCha20Rng {
        ChaCha20Rng::from_seed(self.bytes)
    }

    /// One-way digest of this key, safe to disclose.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"ppgwas-fingerprint");
        h.update(self.bytes);
        let mut out = [0u8; 32];
        out.copy_from_slice(&h.finalize());
        out
    }

    pub fn fingerprint_hex(&self) -> String {
        self.fingerprint()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub fn derive_key(seed: &SeedKey, phase: Phase, indices: &[u64]) -> SeedKey {
    seed.derive(phase, indices)
}

/// Rectangular matrix with exactly orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthMask {
    matrix: Mat,
}

impl OrthMask {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn pad(&self) -> usize {
        self.rows() - self.cols()
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    /// Columns `range` of the mask, i.e. the part acting on those input rows.
    pub fn column_slice(&self, range: Range<usize>) -> Mat {
        self.matrix.columns(range.start, range.len()).into_owned()
    }

    /// `O · a`.
    pub fn apply(&self, a: &Mat) -> Mat {
        &self.matrix * a
    }

    /// `Oᵀ · a`.
    pub fn apply_transpose(&self, a: &Mat) -> Mat {
        self.matrix.tr_mul(a)
    }
}

/// Orthonormalizes the columns of a tall matrix with Householder QR.
///
/// Column signs follow `sign(R_ii)` so a Gaussian input yields a Haar-distributed
/// frame. Returns `None` when the input is numerically rank deficient.
pub fn orthonormalize(a: Mat) -> Option<Mat> {
    let (m, n) = a.shape();
    if n == 0 || m < n {
        return None;
    }
    let qr = a.qr();
    let r = qr.r();
    let scale = (0..n).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if !(scale > 0.0) || (0..n).any(|i| r[(i, i)].abs() <= 1e-10 * scale) {
        return None;
    }
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Some(q)
}

const MAX_MASK_RETRIES: u64 = 64;

/// Draws an `(n + pad) × n` mask from a key-seeded Gaussian matrix.
pub fn gen_orth_mask(key: &SeedKey, n: usize, pad: usize) -> Result<OrthMask> {
    if n == 0 || pad == 0 {
        return Err(Error::Config(format!(
            "mask needs n >= 1 and pad >= 1 (got n={n}, pad={pad})"
        )));
    }
    for nonce in 0..MAX_MASK_RETRIES {
        let mut rng = key.derive(Phase::Retry, &[nonce]).rng();
        let draw = DMatrix::from_fn(n + pad, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        if let Some(matrix) = orthonormalize(draw) {
            return Ok(OrthMask { matrix });
        }
    }
    Err(Error::Numerical(format!(
        "no full-rank draw after {MAX_MASK_RETRIES} attempts"
    )))
}

/// Nonzero scalar with magnitude in `[1, 2]` and random sign.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarMask(f64);

impl ScalarMask {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn gen_scalar_mask(key: &SeedKey) -> ScalarMask {
    let mut rng = key.rng();
    let magnitude: f64 = rng.random_range(1.0..=2.0);
    if rng.random::<bool>() {
        ScalarMask(magnitude)
    } else {
        ScalarMask(-magnitude)
    }
}

/// One party's additive pad; all parties' pads for a path sum to zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZeroSumShare {
    pub party: usize,
    pub payload: IntMatrix,
}

fn uniform_int_matrix(key: &SeedKey, rows: usize, cols: usize) -> IntMatrix {
    let mut rng = key.rng();
    let data = (0..rows * cols).map(|_| rng.random::<u64>() as i64).collect();
    IntMatrix::from_vec(rows, cols, data).expect("length matches shape")
}

/// Share for `party` (1-based) out of `parties`.
///
/// Parties `1..P-1` receive key-seeded uniform matrices and party `P` the wrapping
/// negation of their sum, so any participant can compute any share.
pub fn gen_zero_sum_share(
    key: &SeedKey,
    party: usize,
    parties: usize,
    rows: usize,
    cols: usize,
) -> Result<ZeroSumShare> {
    if party == 0 || party > parties {
        return Err(Error::Config(format!(
            "party {party} outside 1..={parties}"
        )));
    }
    let payload = if party < parties {
        uniform_int_matrix(&key.derive(Phase::Share, &[party as u64]), rows, cols)
    } else {
        let mut acc = IntMatrix::zeros(rows, cols);
        for q in 1..parties {
            let s = uniform_int_matrix(&key.derive(Phase::Share, &[q as u64]), rows, cols);
            acc = acc.wrapping_add(&s)?;
        }
        acc.wrapping_neg()
    };
    Ok(ZeroSumShare { party, payload })
}

/// Uniform 64-bit blinding matrix known to the participants only.
pub fn gen_blind(key: &SeedKey, rows: usize, cols: usize) -> IntMatrix {
    uniform_int_matrix(key, rows, cols)
}

/// Splits `total` items into `parts` contiguous sizes, remainder to the earliest.
pub fn even_sizes(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

/// Folds used to fit the model that predicts fold `fold` out of `folds`.
///
/// With a single fold there is no held-out data and the fold trains on itself.
pub fn training_folds(fold: usize, folds: usize) -> Vec<usize> {
    if folds == 1 {
        vec![0]
    } else {
        (0..folds).filter(|&j| j != fold).collect()
    }
}

/// Column blocks and per-party fold assignment agreed from the shared seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    blocks: Vec<Range<usize>>,
    folds: usize,
    party_sizes: Vec<usize>,
    /// `fold_of[p][i]`: fold of party `p`'s local sample `i`.
    fold_of: Vec<Vec<usize>>,
    /// `members[p][k]`: party `p`'s local samples in fold `k`, ascending.
    members: Vec<Vec<Vec<usize>>>,
}

pub fn plan_partition(
    key: &SeedKey,
    snps: usize,
    blocks: usize,
    party_sizes: &[usize],
    folds: usize,
) -> Result<PartitionPlan> {
    if blocks == 0 || blocks > snps {
        return Err(Error::Config(format!(
            "cannot split {snps} SNPs into {blocks} nonempty blocks"
        )));
    }
    if folds == 0 {
        return Err(Error::Config("fold count must be at least 1".into()));
    }
    if party_sizes.is_empty() {
        return Err(Error::Config("no parties".into()));
    }
    let mut ranges = Vec::with_capacity(blocks);
    let mut start = 0;
    for w in even_sizes(snps, blocks) {
        ranges.push(start..start + w);
        start += w;
    }

    let mut fold_of = Vec::with_capacity(party_sizes.len());
    let mut members = Vec::with_capacity(party_sizes.len());
    for (p, &n_p) in party_sizes.iter().enumerate() {
        if folds > n_p {
            return Err(Error::Config(format!(
                "party {} has {n_p} samples, fewer than {folds} folds",
                p + 1
            )));
        }
        let mut order: Vec<usize> = (0..n_p).collect();
        let mut rng = key.derive(Phase::Partition, &[p as u64 + 1]).rng();
        order.shuffle(&mut rng);
        let mut labels = vec![0usize; n_p];
        let mut groups = vec![Vec::new(); folds];
        let mut at = 0;
        for (k, size) in even_sizes(n_p, folds).into_iter().enumerate() {
            for &i in &order[at..at + size] {
                labels[i] = k;
                groups[k].push(i);
            }
            at += size;
        }
        for g in &mut groups {
            g.sort_unstable();
        }
        fold_of.push(labels);
        members.push(groups);
    }
    Ok(PartitionPlan {
        blocks: ranges,
        folds,
        party_sizes: party_sizes.to_vec(),
        fold_of,
        members,
    })
}

impl PartitionPlan {
    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn snps(&self) -> usize {
        self.blocks.last().map(|r| r.end).unwrap_or(0)
    }

    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn parties(&self) -> usize {
        self.party_sizes.len()
    }

    pub fn party_sizes(&self) -> &[usize] {
        &self.party_sizes
    }

    pub fn total_samples(&self) -> usize {
        self.party_sizes.iter().sum()
    }

    /// Global row offset of party `p` (0-based) in the party-major sample order.
    pub fn party_offset(&self, party: usize) -> usize {
        self.party_sizes[..party].iter().sum()
    }

    pub fn fold_of(&self, party: usize) -> &[usize] {
        &self.fold_of[party]
    }

    pub fn fold_members(&self, party: usize, fold: usize) -> &[usize] {
        &self.members[party][fold]
    }

    /// Samples of fold `k` over all parties.
    pub fn fold_size(&self, fold: usize) -> usize {
        self.members.iter().map(|m| m[fold].len()).sum()
    }

    /// Position of party `p`'s first fold-`k` sample within the fold-`k` vector.
    pub fn fold_offset(&self, party: usize, fold: usize) -> usize {
        self.members[..party].iter().map(|m| m[fold].len()).sum()
    }

    pub fn training_folds(&self, fold: usize) -> Vec<usize> {
        training_folds(fold, self.folds)
    }

    /// Global (party-major) row indices of fold `k`, in fold-vector order.
    pub fn global_fold_rows(&self, fold: usize) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.fold_size(fold));
        for p in 0..self.parties() {
            let off = self.party_offset(p);
            rows.extend(self.members[p][fold].iter().map(|i| off + i));
        }
        rows
    }
}

/// Pad sizing for masks: `max(min, ⌈fraction·n⌉)`, optionally plus a seeded
/// jitter in `[0, that]` so masked row counts do not reveal `n`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PadPolicy {
    pub min: usize,
    pub fraction: f64,
    pub jitter: bool,
}

impl Default for PadPolicy {
    fn default() -> Self {
        PadPolicy {
            min: 8,
            fraction: 0.1,
            jitter: true,
        }
    }
}

impl PadPolicy {
    pub fn base(&self, n: usize) -> usize {
        self.min.max((self.fraction * n as f64).ceil() as usize).max(1)
    }

    pub fn pad_for(&self, key: &SeedKey, n: usize) -> usize {
        let base = self.base(n);
        if !self.jitter {
            return base;
        }
        let mut rng = key.derive(Phase::Pad, &[n as u64]).rng();
        base + rng.random_range(0..=base)
    }
}

/// Index tags under each phase, so different mask families never share a path.
mod tag {
    pub const COVARIATE_ROWS: u64 = 0;
    pub const GENOTYPE_COLS: u64 = 1;
    pub const PROJECTION_SCALAR: u64 = 2;
    pub const FOLD_ROWS: u64 = 0;
    pub const COEFFICIENTS: u64 = 1;
    pub const PHENO_SCALAR: u64 = 2;
}

/// All seed-derived obfuscation objects of one run.
///
/// Masks are regenerated on demand; every call with the same arguments returns
/// the same object.
#[derive(Clone, Debug)]
pub struct MaskSuite {
    root: SeedKey,
    /// Key of the fold assignment when pinned apart from the mask root.
    partition: Option<SeedKey>,
    pads: PadPolicy,
}

impl MaskSuite {
    pub fn new(root: SeedKey, pads: PadPolicy) -> Self {
        MaskSuite {
            root,
            partition: None,
            pads,
        }
    }

    /// Draws the fold assignment from `key` instead of the root, so two suites
    /// can share a design while differing in every mask.
    pub fn with_partition_key(mut self, key: SeedKey) -> Self {
        self.partition = Some(key);
        self
    }

    fn partition_key(&self) -> &SeedKey {
        self.partition.as_ref().unwrap_or(&self.root)
    }

    pub fn root(&self) -> &SeedKey {
        &self.root
    }

    pub fn pad_policy(&self) -> PadPolicy {
        self.pads
    }

    fn orth(&self, key: SeedKey, n: usize) -> Result<OrthMask> {
        let pad = self.pads.pad_for(&key, n);
        gen_orth_mask(&key, n, pad)
    }

    /// `O_Z`, acting on the global sample space of size `n_total`.
    pub fn covariate_mask(&self, n_total: usize) -> Result<OrthMask> {
        self.orth(
            self.root.derive(Phase::Projection, &[tag::COVARIATE_ROWS]),
            n_total,
        )
    }

    /// `O_X` for analysis block `b` of width `width`.
    pub fn genotype_mask(&self, block: usize, width: usize) -> Result<OrthMask> {
        self.orth(
            self.root
                .derive(Phase::Projection, &[tag::GENOTYPE_COLS, block as u64]),
            width,
        )
    }

    /// `k₁`, the phenotype scalar of the projection step.
    pub fn projection_scalar(&self) -> ScalarMask {
        gen_scalar_mask(&self.root.derive(Phase::Projection, &[tag::PROJECTION_SCALAR]))
    }

    /// `O_ỹ^(k)`, the row mask of fold `k` with `n_fold` samples.
    pub fn fold_mask(&self, fold: usize, n_fold: usize) -> Result<OrthMask> {
        self.orth(
            self.root.derive(Phase::Level0, &[tag::FOLD_ROWS, fold as u64]),
            n_fold,
        )
    }

    /// `O_X̃^(b,r)`, the coefficient-space mask of block `b` and ridge index `r`.
    pub fn coefficient_mask(&self, block: usize, ridge: usize, width: usize) -> Result<OrthMask> {
        self.orth(
            self.root.derive(
                Phase::Level0,
                &[tag::COEFFICIENTS, block as u64, ridge as u64],
            ),
            width,
        )
    }

    /// `k_ỹ`.
    pub fn phenotype_scalar(&self) -> ScalarMask {
        gen_scalar_mask(&self.root.derive(Phase::Level0, &[tag::PHENO_SCALAR]))
    }

    /// `k_x` for the SNP with global (pre-QC) index `snp`.
    pub fn snp_scalar(&self, snp: usize) -> ScalarMask {
        gen_scalar_mask(&self.root.derive(Phase::Assoc, &[snp as u64]))
    }

    pub fn share(
        &self,
        phase: Phase,
        party: usize,
        parties: usize,
        rows: usize,
        cols: usize,
    ) -> Result<ZeroSumShare> {
        gen_zero_sum_share(&self.root.derive(phase, &[]), party, parties, rows, cols)
    }

    pub fn blind(&self, phase: Phase, rows: usize, cols: usize) -> IntMatrix {
        gen_blind(&self.root.derive(phase, &[]), rows, cols)
    }

    /// Digest the parties compare (through the server) to detect seed mismatch.
    pub fn consistency_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.root.derive(Phase::Digest, &[]).fingerprint());
        h.update(self.partition_key().fingerprint());
        h.finalize().into()
    }

    pub fn plan(
        &self,
        snps: usize,
        blocks: usize,
        party_sizes: &[usize],
        folds: usize,
    ) -> Result<PartitionPlan> {
        plan_partition(self.partition_key(), snps, blocks, party_sizes, folds)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::linalg::max_abs_diff;

    fn root() -> SeedKey {
        SeedKey::from_passphrase("unit-test-root")
    }

    #[test]
    fn derivation_is_deterministic() {
        let a = root().derive(Phase::Qc, &[]);
        let b = root().derive(Phase::Qc, &[]);
        assert_eq!(a.bytes(), b.bytes());
    }

    #[test]
    fn permuted_indices_give_different_keys() {
        let a = root().derive(Phase::Level0, &[1, 2, 3]);
        let b = root().derive(Phase::Level0, &[1, 3, 2]);
        assert_ne!(a.bytes(), b.bytes());
        // trailing-zero and empty paths must not alias either
        assert_ne!(
            root().derive(Phase::Qc, &[]).bytes(),
            root().derive(Phase::Qc, &[0]).bytes()
        );
    }

    #[test]
    fn million_paths_do_not_collide() {
        let r = root();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let phases = [Phase::Qc, Phase::Level0, Phase::Assoc, Phase::Projection];
        let mut paths = HashSet::new();
        let mut keys = HashSet::new();
        while paths.len() < 1_000_000 {
            let phase = phases[rng.random_range(0..phases.len())];
            let len = rng.random_range(0..4);
            let idx: Vec<u64> = (0..len).map(|_| rng.random_range(0..64)).collect();
            if paths.insert((phase, idx.clone())) {
                keys.insert(*r.derive(phase, &idx).bytes());
            }
        }
        assert_eq!(keys.len(), paths.len());
    }

    #[test]
    fn single_column_mask_is_unit_vector() {
        let m = gen_orth_mask(&root(), 1, 1).unwrap();
        assert_eq!(m.matrix().shape(), (2, 1));
        assert!((m.matrix().norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mask_columns_are_orthonormal() {
        let m = gen_orth_mask(&root(), 3, 2).unwrap();
        let gram = m.matrix().tr_mul(m.matrix());
        assert!(max_abs_diff(&gram, &Mat::identity(3, 3)) <= 1e-12);
        assert_eq!(m.pad(), 2);
    }

    #[test]
    fn projector_mean_is_scaled_identity() {
        let r = root();
        let mut acc = Mat::zeros(5, 5);
        let draws = 2000;
        for i in 0..draws {
            let m = gen_orth_mask(&r.derive(Phase::Projection, &[i]), 3, 2).unwrap();
            acc += m.matrix() * m.matrix().transpose();
        }
        acc /= draws as f64;
        let expected = Mat::identity(5, 5) * 0.6;
        assert!(max_abs_diff(&acc, &expected) < 0.05);
    }

    #[test]
    fn rank_deficient_draw_is_detected() {
        let mut a = Mat::from_fn(5, 3, |i, j| (i * 3 + j) as f64 + 1.0);
        a.set_column(2, &(a.column(0) * 2.0));
        assert!(orthonormalize(a).is_none());
        assert!(orthonormalize(Mat::zeros(4, 2)).is_none());
    }

    #[test]
    fn zero_pad_is_rejected() {
        assert!(gen_orth_mask(&root(), 3, 0).is_err());
    }

    #[test]
    fn scalar_masks_are_deterministic_and_bounded() {
        let r = root();
        assert_eq!(
            gen_scalar_mask(&r.derive(Phase::Assoc, &[4])),
            gen_scalar_mask(&r.derive(Phase::Assoc, &[4]))
        );
        let mut negative = 0;
        for i in 0..10_000u64 {
            let v = gen_scalar_mask(&r.derive(Phase::Assoc, &[i])).value();
            assert!((1.0..=2.0).contains(&v.abs()), "{v}");
            if v < 0.0 {
                negative += 1;
            }
        }
        let frac = negative as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.03, "{frac}");
    }

    #[test]
    fn two_party_shares_are_negations() {
        let k = root().derive(Phase::Qc, &[]);
        let s1 = gen_zero_sum_share(&k, 1, 2, 3, 4).unwrap();
        let s2 = gen_zero_sum_share(&k, 2, 2, 3, 4).unwrap();
        assert_eq!(s2.payload, s1.payload.wrapping_neg());
    }

    #[test]
    fn masked_counts_sum_to_true_total() {
        let k = root().derive(Phase::Qc, &[]);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let parties = 5;
        let mut truth = IntMatrix::zeros(3, 4);
        let mut masked = IntMatrix::zeros(3, 4);
        for p in 1..=parties {
            let c: Vec<i64> = (0..12).map(|_| rng.random_range(0..1000)).collect();
            let c = IntMatrix::from_vec(3, 4, c).unwrap();
            truth = truth.wrapping_add(&c).unwrap();
            let share = gen_zero_sum_share(&k, p, parties, 3, 4).unwrap();
            masked = masked.wrapping_add(&c.wrapping_add(&share.payload).unwrap()).unwrap();
        }
        assert_eq!(masked, truth);
    }

    #[test]
    fn share_rejects_bad_party() {
        let k = root();
        assert!(gen_zero_sum_share(&k, 0, 3, 1, 1).is_err());
        assert!(gen_zero_sum_share(&k, 4, 3, 1, 1).is_err());
    }

    #[test]
    fn block_plan_even_and_remainder() {
        let p = plan_partition(&root(), 10, 2, &[4], 2).unwrap();
        assert_eq!(p.blocks(), &[0..5, 5..10]);
        let p = plan_partition(&root(), 10, 3, &[4], 2).unwrap();
        let sizes: Vec<usize> = p.blocks().iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
    }

    #[test]
    fn fold_sizes_for_seven_samples() {
        for s in 0..200u64 {
            let key = root().derive(Phase::Partition, &[s]);
            let p = plan_partition(&key, 4, 1, &[7], 3).unwrap();
            let sizes: Vec<usize> = (0..3).map(|k| p.fold_members(0, k).len()).collect();
            assert_eq!(sizes, vec![3, 2, 2]);
        }
    }

    #[test]
    fn too_many_folds_is_config_error() {
        assert!(matches!(
            plan_partition(&root(), 4, 1, &[5, 2], 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fold_offsets_tile_each_fold() {
        let p = plan_partition(&root(), 20, 4, &[9, 11, 7], 3).unwrap();
        for k in 0..3 {
            let rows = p.global_fold_rows(k);
            assert_eq!(rows.len(), p.fold_size(k));
            for party in 0..3 {
                let off = p.fold_offset(party, k);
                let base = p.party_offset(party);
                for (i, local) in p.fold_members(party, k).iter().enumerate() {
                    assert_eq!(rows[off + i], base + local);
                }
            }
        }
        assert_eq!(p.training_folds(1), vec![0, 2]);
    }

    #[test]
    fn jittered_pad_stays_in_range() {
        let pol = PadPolicy::default();
        for n in [1usize, 10, 100, 1000] {
            let base = pol.base(n);
            let pad = pol.pad_for(&root(), n);
            assert!(pad >= base && pad <= 2 * base);
        }
        assert_eq!(pol.base(600), 60);
        assert_eq!(pol.base(5), 8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn masks_preserve_gram(n in 1usize..12, pad in 1usize..6, cols in 1usize..5, seed in any::<u64>()) {
            let key = root().derive(Phase::Projection, &[seed]);
            let m = gen_orth_mask(&key, n, pad).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let a = Mat::from_fn(n, cols, |_, _| rng.random_range(-3.0..3.0));
            let masked = m.apply(&a);
            let lhs = masked.tr_mul(&masked);
            let rhs = a.tr_mul(&a);
            let scale = rhs.amax().max(1e-300);
            prop_assert!(max_abs_diff(&lhs, &rhs) / scale <= 1e-10);
            let gram = m.matrix().tr_mul(m.matrix());
            prop_assert!(max_abs_diff(&gram, &Mat::identity(n, n)) <= 1e-12);
        }

        #[test]
        fn shares_cancel_for_any_party_count(parties in 2usize..=16, rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let key = root().derive(Phase::Qc, &[seed]);
            let mut acc = IntMatrix::zeros(rows, cols);
            for p in 1..=parties {
                acc = acc.wrapping_add(&gen_zero_sum_share(&key, p, parties, rows, cols).unwrap().payload).unwrap();
            }
            prop_assert!(acc.is_zero());
        }
    }

    #[test]
    fn pinned_partition_decouples_folds_from_masks() {
        let design = SeedKey::from_passphrase("design");
        let a = MaskSuite::new(SeedKey::from_passphrase("a"), PadPolicy::default())
            .with_partition_key(design.clone());
        let b = MaskSuite::new(SeedKey::from_passphrase("b"), PadPolicy::default())
            .with_partition_key(design);
        let plan_a = a.plan(40, 4, &[30, 31], 3).unwrap();
        assert_eq!(plan_a, b.plan(40, 4, &[30, 31], 3).unwrap());
        assert_ne!(
            a.fold_mask(0, 20).unwrap().matrix(),
            b.fold_mask(0, 20).unwrap().matrix()
        );
        let unpinned = MaskSuite::new(SeedKey::from_passphrase("a"), PadPolicy::default());
        assert_ne!(a.consistency_digest(), unpinned.consistency_digest());
    }
}
