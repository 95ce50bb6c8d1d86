//! Blockwise on-disk dataset format.
//!
//! A dataset directory holds `manifest.json`, one `block_<i>.ppgb` file per
//! SNP block, `pheno.ppgv` and `covar.ppgv`. Binary files share a 13-byte
//! header: 4-byte magic (`PPGB` or `PPGV`), `u8` version, `u32` rows, `u32`
//! cols (little endian). Genotype payloads are `i8` row-major with `-1` for a
//! missing call; real payloads are `f64` little-endian row-major.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seedcraft::even_sizes;

pub const FORMAT_VERSION: u8 = 1;
pub const GENOTYPE_MAGIC: &[u8; 4] = b"PPGB";
pub const REAL_MAGIC: &[u8; 4] = b"PPGV";
pub const MISSING: i8 = -1;
const HEADER_LEN: usize = 13;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PHENO_FILE: &str = "pheno.ppgv";
pub const COVAR_FILE: &str = "covar.ppgv";
pub const COHORT_FILE: &str = "cohort.json";

pub fn block_file(i: usize) -> String {
    format!("block_{i}.ppgb")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub party_id: u32,
    pub samples: usize,
    pub snps: usize,
    pub covariates: usize,
    pub blocks: usize,
    pub block_ranges: Vec<[usize; 2]>,
    /// File name to 16-hex-digit checksum (first 8 bytes of SHA-256, little endian).
    pub checksums: BTreeMap<String, String>,
}

impl Manifest {
    pub fn ranges(&self) -> Vec<Range<usize>> {
        self.block_ranges.iter().map(|[a, b]| *a..*b).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != u32::from(FORMAT_VERSION) {
            return Err(Error::format(
                MANIFEST_FILE,
                format!("unsupported format version {}", self.format_version),
            ));
        }
        if self.samples == 0 {
            return Err(Error::format(MANIFEST_FILE, "dataset has no samples"));
        }
        if self.block_ranges.len() != self.blocks {
            return Err(Error::format(
                MANIFEST_FILE,
                format!(
                    "{} block ranges listed for {} blocks",
                    self.block_ranges.len(),
                    self.blocks
                ),
            ));
        }
        let mut expect = 0;
        for [a, b] in &self.block_ranges {
            if *a != expect || b <= a {
                return Err(Error::format(
                    MANIFEST_FILE,
                    format!("block ranges do not tile [0, {})", self.snps),
                ));
            }
            expect = *b;
        }
        if expect != self.snps {
            return Err(Error::format(
                MANIFEST_FILE,
                format!("block ranges end at {expect}, expected {}", self.snps),
            ));
        }
        Ok(())
    }
}

/// Dosage matrix, row-major, entries in `{-1, 0, 1, 2}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenotypeBlock {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
}

impl GenotypeBlock {
    pub fn new(rows: usize, cols: usize, data: Vec<i8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "genotype block {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        for (idx, &v) in data.iter().enumerate() {
            if !(-1..=2).contains(&v) {
                return Err(Error::InvalidDosage {
                    value: v,
                    row: idx / cols.max(1),
                    col: idx % cols.max(1),
                });
            }
        }
        Ok(GenotypeBlock { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: i8) {
        assert!((-1..=2).contains(&value), "dosage {value} out of range");
        self.data[row * self.cols + col] = value;
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = i8> + '_ {
        (0..self.rows).map(move |r| self.data[r * self.cols + col])
    }

    pub fn select_columns(&self, cols: &[usize]) -> GenotypeBlock {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            data.extend(cols.iter().map(|&c| row[c]));
        }
        GenotypeBlock {
            rows: self.rows,
            cols: cols.len(),
            data,
        }
    }

    pub fn column_range(&self, range: Range<usize>) -> GenotypeBlock {
        let cols: Vec<usize> = range.collect();
        self.select_columns(&cols)
    }

    pub fn select_rows(&self, rows: &[usize]) -> GenotypeBlock {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(&self.data[r * self.cols..(r + 1) * self.cols]);
        }
        GenotypeBlock {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Side-by-side concatenation of blocks with equal row counts.
    pub fn hconcat(blocks: &[GenotypeBlock]) -> Result<GenotypeBlock> {
        let rows = blocks.first().map(|b| b.rows).unwrap_or(0);
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(Error::Shape("blocks differ in row count".into()));
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in blocks {
                data.extend_from_slice(&b.data[r * b.cols..(r + 1) * b.cols]);
            }
        }
        Ok(GenotypeBlock { rows, cols, data })
    }

    /// Vertical concatenation of blocks with equal column counts.
    pub fn vconcat(blocks: &[GenotypeBlock]) -> Result<GenotypeBlock> {
        let cols = blocks.first().map(|b| b.cols).unwrap_or(0);
        if blocks.iter().any(|b| b.cols != cols) {
            return Err(Error::Shape("blocks differ in column count".into()));
        }
        let rows = blocks.iter().map(|b| b.rows).sum();
        let data = blocks.iter().flat_map(|b| b.data.iter().copied()).collect();
        Ok(GenotypeBlock { rows, cols, data })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhenotypeVector(pub Vec<f64>);

impl PhenotypeVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major `samples × C` covariates (without the intercept column).
#[derive(Clone, Debug, PartialEq)]
pub struct CovariateMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CovariateMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "covariate matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(CovariateMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn select_rows(&self, rows: &[usize]) -> CovariateMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(&self.data[r * self.cols..(r + 1) * self.cols]);
        }
        CovariateMatrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

/// One party's (or an unsplit) dataset held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub blocks: Vec<GenotypeBlock>,
    pub phenotype: PhenotypeVector,
    pub covariates: CovariateMatrix,
}

impl Dataset {
    /// Splits `genotypes` into storage blocks and builds a manifest without checksums.
    pub fn from_parts(
        party_id: u32,
        genotypes: &GenotypeBlock,
        storage_blocks: usize,
        phenotype: PhenotypeVector,
        covariates: CovariateMatrix,
    ) -> Result<Self> {
        let snps = genotypes.cols();
        if storage_blocks == 0 || storage_blocks > snps {
            return Err(Error::Config(format!(
                "cannot store {snps} SNPs in {storage_blocks} blocks"
            )));
        }
        let mut ranges = Vec::new();
        let mut start = 0;
        for w in even_sizes(snps, storage_blocks) {
            ranges.push([start, start + w]);
            start += w;
        }
        let blocks = ranges
            .iter()
            .map(|[a, b]| genotypes.column_range(*a..*b))
            .collect();
        let manifest = Manifest {
            format_version: u32::from(FORMAT_VERSION),
            party_id,
            samples: genotypes.rows(),
            snps,
            covariates: covariates.cols(),
            blocks: storage_blocks,
            block_ranges: ranges,
            checksums: BTreeMap::new(),
        };
        let ds = Dataset {
            manifest,
            blocks,
            phenotype,
            covariates,
        };
        ds.check_shapes()?;
        Ok(ds)
    }

    pub fn samples(&self) -> usize {
        self.manifest.samples
    }

    pub fn snps(&self) -> usize {
        self.manifest.snps
    }

    /// All SNP columns in one matrix.
    pub fn genotypes(&self) -> GenotypeBlock {
        GenotypeBlock::hconcat(&self.blocks).expect("blocks share row count")
    }

    pub fn check_shapes(&self) -> Result<()> {
        let m = &self.manifest;
        m.validate()?;
        if self.blocks.len() != m.blocks {
            return Err(Error::Shape(format!(
                "{} blocks present, manifest lists {}",
                self.blocks.len(),
                m.blocks
            )));
        }
        for (i, (b, r)) in self.blocks.iter().zip(m.ranges()).enumerate() {
            if b.rows() != m.samples || b.cols() != r.len() {
                return Err(Error::Shape(format!(
                    "block {i} is {}x{}, manifest expects {}x{}",
                    b.rows(),
                    b.cols(),
                    m.samples,
                    r.len()
                )));
            }
        }
        if self.phenotype.len() != m.samples {
            return Err(Error::Shape(format!(
                "phenotype has {} values for {} samples",
                self.phenotype.len(),
                m.samples
            )));
        }
        if self.covariates.rows() != m.samples || self.covariates.cols() != m.covariates {
            return Err(Error::Shape(format!(
                "covariates are {}x{}, manifest expects {}x{}",
                self.covariates.rows(),
                self.covariates.cols(),
                m.samples,
                m.covariates
            )));
        }
        if self.phenotype.values().iter().any(|v| !v.is_finite())
            || self.covariates.as_slice().iter().any(|v| !v.is_finite())
        {
            return Err(Error::Shape("non-finite phenotype or covariate".into()));
        }
        Ok(())
    }
}

fn checksum(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    let mut first = [0u8; 8];
    first.copy_from_slice(&d[..8]);
    format!("{:016x}", u64::from_le_bytes(first))
}

fn header(magic: &[u8; 4], rows: usize, cols: usize) -> Result<Vec<u8>> {
    let rows = u32::try_from(rows).map_err(|_| Error::Shape("row count exceeds u32".into()))?;
    let cols = u32::try_from(cols).map_err(|_| Error::Shape("column count exceeds u32".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(magic);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    Ok(out)
}

pub fn encode_genotype_block(block: &GenotypeBlock) -> Result<Vec<u8>> {
    let mut out = header(GENOTYPE_MAGIC, block.rows, block.cols)?;
    out.extend(block.data.iter().map(|&v| v as u8));
    Ok(out)
}

pub fn encode_reals(rows: usize, cols: usize, values: &[f64]) -> Result<Vec<u8>> {
    let mut out = header(REAL_MAGIC, rows, cols)?;
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn parse_header(path: &str, bytes: &[u8], magic: &[u8; 4]) -> Result<(usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..4] != magic {
        return Err(Error::format(path, "bad magic"));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", bytes[4])));
    }
    let rows = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    Ok((rows, cols))
}

pub fn decode_genotype_block(path: &str, bytes: &[u8]) -> Result<GenotypeBlock> {
    let (rows, cols) = parse_header(path, bytes, GENOTYPE_MAGIC)?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != rows * cols {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {}", body.len(), rows * cols),
        ));
    }
    GenotypeBlock::new(rows, cols, body.iter().map(|&b| b as i8).collect())
}

pub fn decode_reals(path: &str, bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let (rows, cols) = parse_header(path, bytes, REAL_MAGIC)?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != rows * cols * 8 {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {}", body.len(), rows * cols * 8),
        ));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite value"));
    }
    Ok((rows, cols, values))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<String> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(checksum(bytes))
}

/// Writes `dataset` into `dir` (created if needed) and returns the manifest with checksums.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<Manifest> {
    dataset.check_shapes()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = dataset.manifest.clone();
    manifest.checksums.clear();
    for (i, block) in dataset.blocks.iter().enumerate() {
        let name = block_file(i);
        let sum = write_file(dir, &name, &encode_genotype_block(block)?)?;
        manifest.checksums.insert(name, sum);
    }
    let pheno = encode_reals(dataset.phenotype.len(), 1, dataset.phenotype.values())?;
    manifest
        .checksums
        .insert(PHENO_FILE.into(), write_file(dir, PHENO_FILE, &pheno)?);
    let covar = encode_reals(
        dataset.covariates.rows(),
        dataset.covariates.cols(),
        dataset.covariates.as_slice(),
    )?;
    manifest
        .checksums
        .insert(COVAR_FILE.into(), write_file(dir, COVAR_FILE, &covar)?);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(MANIFEST_FILE, e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_checked(dir: &Path, name: &str, manifest: &Manifest) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = manifest
        .checksums
        .get(name)
        .ok_or_else(|| Error::format(MANIFEST_FILE, format!("no checksum for {name}")))?;
    let actual = checksum(&bytes);
    if &actual != expected {
        return Err(Error::Checksum {
            file: name.to_string(),
            expected: expected.clone(),
            actual,
        });
    }
    Ok(bytes)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut blocks = Vec::with_capacity(manifest.blocks);
    for i in 0..manifest.blocks {
        let name = block_file(i);
        let bytes = read_checked(dir, &name, &manifest)?;
        blocks.push(decode_genotype_block(&name, &bytes)?);
    }
    let bytes = read_checked(dir, PHENO_FILE, &manifest)?;
    let (rows, cols, pheno) = decode_reals(PHENO_FILE, &bytes)?;
    if cols != 1 || rows != manifest.samples {
        return Err(Error::format(PHENO_FILE, format!("shape {rows}x{cols}")));
    }
    let bytes = read_checked(dir, COVAR_FILE, &manifest)?;
    let (rows, cols, covar) = decode_reals(COVAR_FILE, &bytes)?;
    let dataset = Dataset {
        manifest,
        blocks,
        phenotype: PhenotypeVector(pheno),
        covariates: CovariateMatrix::new(rows, cols, covar)?,
    };
    dataset.check_shapes()?;
    Ok(dataset)
}

/// Seeded disjoint row partition into `parties` datasets with sizes differing by at most one.
///
/// Each party keeps its rows in their original relative order.
pub fn horizontal_split(dataset: &Dataset, parties: usize, seed: u64) -> Result<Vec<Dataset>> {
    let n = dataset.samples();
    if parties < 2 {
        return Err(Error::Config("a split needs at least two parties".into()));
    }
    if parties > n {
        return Err(Error::Config(format!(
            "cannot split {n} samples across {parties} parties"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(parties);
    let mut at = 0;
    for (p, size) in even_sizes(n, parties).into_iter().enumerate() {
        let mut rows = order[at..at + size].to_vec();
        rows.sort_unstable();
        at += size;
        let mut manifest = dataset.manifest.clone();
        manifest.party_id = p as u32 + 1;
        manifest.samples = size;
        manifest.checksums.clear();
        out.push(Dataset {
            manifest,
            blocks: dataset.blocks.iter().map(|b| b.select_rows(&rows)).collect(),
            phenotype: PhenotypeVector(rows.iter().map(|&r| dataset.phenotype.0[r]).collect()),
            covariates: dataset.covariates.select_rows(&rows),
        });
    }
    Ok(out)
}

/// Sample counts every participant learns during onboarding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cohort {
    pub party_sizes: Vec<usize>,
}

impl Cohort {
    pub fn parties(&self) -> usize {
        self.party_sizes.len()
    }

    pub fn total(&self) -> usize {
        self.party_sizes.iter().sum()
    }
}

pub fn write_cohort(path: &Path, cohort: &Cohort) -> Result<()> {
    let json =
        serde_json::to_string_pretty(cohort).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_cohort(path: &Path) -> Result<Cohort> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Directory name of party `p` (1-based) under a split root.
pub fn party_dir_name(party: usize) -> String {
    format!("party_{party}")
}

/// Writes split datasets as `root/party_<p>/` plus `root/cohort.json`.
pub fn write_split(root: &Path, parts: &[Dataset]) -> Result<Cohort> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (i, d) in parts.iter().enumerate() {
        write_dataset(&root.join(party_dir_name(i + 1)), d)?;
    }
    let cohort = Cohort {
        party_sizes: parts.iter().map(|d| d.samples()).collect(),
    };
    write_cohort(&root.join(COHORT_FILE), &cohort)?;
    Ok(cohort)
}

/// Reads every party dataset listed by `root/cohort.json`.
pub fn read_split(root: &Path) -> Result<Vec<Dataset>> {
    let cohort = read_cohort(&root.join(COHORT_FILE))?;
    let mut parts = Vec::with_capacity(cohort.parties());
    for p in 1..=cohort.parties() {
        let d = read_dataset(&root.join(party_dir_name(p)))?;
        if d.samples() != cohort.party_sizes[p - 1] {
            return Err(Error::format(
                root.join(COHORT_FILE),
                format!("party {p} size disagrees with its manifest"),
            ));
        }
        parts.push(d);
    }
    Ok(parts)
}
