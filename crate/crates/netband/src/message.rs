//! Typed protocol messages and their payload layouts.

use ppgwas_core::linalg::{IntMatrix, Mat, Vector};
use ppgwas_core::ridge_l0::RidgeCellPayload;

use crate::error::{NetError, NetResult};
use crate::frame::{Frame, PayloadReader, PayloadWriter};

/// Message types in protocol order; the discriminant is the wire type byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum PhaseTag {
    Hello = 1,
    QcCounts = 2,
    QcReport = 3,
    Moments = 4,
    ProjUpload = 5,
    ProjResult = 6,
    L0Payload = 7,
    L0Done = 8,
    L1DoneRstar = 9,
    AssocUpload = 10,
    AssocResult = 11,
    Abort = 12,
}

impl PhaseTag {
    pub const ALL: [PhaseTag; 12] = [
        PhaseTag::Hello,
        PhaseTag::QcCounts,
        PhaseTag::QcReport,
        PhaseTag::Moments,
        PhaseTag::ProjUpload,
        PhaseTag::ProjResult,
        PhaseTag::L0Payload,
        PhaseTag::L0Done,
        PhaseTag::L1DoneRstar,
        PhaseTag::AssocUpload,
        PhaseTag::AssocResult,
        PhaseTag::Abort,
    ];

    pub fn from_u8(v: u8) -> NetResult<Self> {
        PhaseTag::ALL
            .get((v as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| NetError::Frame(format!("unknown message type {v}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            PhaseTag::Hello => "HELLO",
            PhaseTag::QcCounts => "QC_COUNTS",
            PhaseTag::QcReport => "QC_REPORT",
            PhaseTag::Moments => "MOMENTS",
            PhaseTag::ProjUpload => "PROJ_UPLOAD",
            PhaseTag::ProjResult => "PROJ_RESULT",
            PhaseTag::L0Payload => "L0_PAYLOAD",
            PhaseTag::L0Done => "L0_DONE",
            PhaseTag::L1DoneRstar => "L1_DONE_RSTAR",
            PhaseTag::AssocUpload => "ASSOC_UPLOAD",
            PhaseTag::AssocResult => "ASSOC_RESULT",
            PhaseTag::Abort => "ABORT",
        }
    }
}

impl std::fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a party reports alongside its phenotype moment shares.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentsUpload {
    pub digest: [u8; 32],
    pub kept_snps: u64,
    pub admm_rho: f64,
    pub sums: IntMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct L0Upload {
    pub block: u32,
    /// `𝒴^(j)` per fold; sent with block 0 only.
    pub phenotype_folds: Vec<Vector>,
    /// Indexed by ridge.
    pub cells: Vec<RidgeCellPayload>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssocUpload {
    pub block: u32,
    /// Masked SNP columns per fold.
    pub folds: Vec<Mat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct L0Summary {
    pub cells: u32,
    pub unconverged: u32,
    pub max_iterations: u32,
}

/// Party-to-server messages.
#[derive(Clone, Debug, PartialEq)]
pub enum Upload {
    Hello { party_id: u32, parties: u32 },
    QcCounts(IntMatrix),
    Moments(MomentsUpload),
    Projection {
        covariates: Mat,
        phenotype: Mat,
        blocks: Vec<Mat>,
    },
    Level0(L0Upload),
    Assoc(AssocUpload),
    Abort(String),
}

/// Server-to-party messages.
#[derive(Clone, Debug, PartialEq)]
pub enum Reply {
    Hello { party_id: u32, parties: u32 },
    QcReport(IntMatrix),
    Moments(IntMatrix),
    Projection { phenotype: Mat, blocks: Vec<Mat> },
    L0Done(L0Summary),
    Rstar(u32),
    /// Scaled statistic per retained SNP; degenerate ones flagged.
    AssocResult { scaled: Vector, degenerate: Vec<bool> },
    Abort(String),
}

impl Upload {
    pub fn tag(&self) -> PhaseTag {
        match self {
            Upload::Hello { .. } => PhaseTag::Hello,
            Upload::QcCounts(_) => PhaseTag::QcCounts,
            Upload::Moments(_) => PhaseTag::Moments,
            Upload::Projection { .. } => PhaseTag::ProjUpload,
            Upload::Level0(_) => PhaseTag::L0Payload,
            Upload::Assoc(_) => PhaseTag::AssocUpload,
            Upload::Abort(_) => PhaseTag::Abort,
        }
    }

    pub fn to_frame(&self) -> Frame {
        let mut w = PayloadWriter::new();
        match self {
            Upload::Hello { party_id, parties } => {
                w.u32(*party_id).u32(*parties);
            }
            Upload::QcCounts(m) => {
                w.int_mat(m);
            }
            Upload::Moments(m) => {
                w.u8(m.digest.len() as u8);
                for b in m.digest {
                    w.u8(b);
                }
                w.u64(m.kept_snps).f64(m.admm_rho).int_mat(&m.sums);
            }
            Upload::Projection {
                covariates,
                phenotype,
                blocks,
            } => {
                w.mat(covariates).mat(phenotype).mats(blocks);
            }
            Upload::Level0(u) => {
                w.u32(u.block).vectors(&u.phenotype_folds).u32(u.cells.len() as u32);
                for c in &u.cells {
                    w.mats(&c.inverse_grams).mats(&c.designs);
                }
            }
            Upload::Assoc(u) => {
                w.u32(u.block).mats(&u.folds);
            }
            Upload::Abort(reason) => {
                w.str(reason);
            }
        }
        Frame::new(self.tag() as u8, w.finish())
    }

    pub fn from_frame(frame: &Frame) -> NetResult<Self> {
        let tag = PhaseTag::from_u8(frame.msg_type)?;
        let mut r = PayloadReader::new(tag.name(), &frame.payload);
        let msg = match tag {
            PhaseTag::Hello => Upload::Hello {
                party_id: r.u32()?,
                parties: r.u32()?,
            },
            PhaseTag::QcCounts => Upload::QcCounts(r.int_mat()?),
            PhaseTag::Moments => {
                let n = r.u8()?;
                if n != 32 {
                    return Err(NetError::Payload {
                        what: "MOMENTS",
                        reason: format!("digest of {n} bytes"),
                    });
                }
                let mut digest = [0u8; 32];
                for b in digest.iter_mut() {
                    *b = r.u8()?;
                }
                Upload::Moments(MomentsUpload {
                    digest,
                    kept_snps: r.u64()?,
                    admm_rho: r.f64()?,
                    sums: r.int_mat()?,
                })
            }
            PhaseTag::ProjUpload => Upload::Projection {
                covariates: r.mat()?,
                phenotype: r.mat()?,
                blocks: r.mats()?,
            },
            PhaseTag::L0Payload => {
                let block = r.u32()?;
                let phenotype_folds = r.vectors()?;
                let n = r.u32()?;
                let mut cells = Vec::new();
                for _ in 0..n {
                    cells.push(RidgeCellPayload {
                        inverse_grams: r.mats()?,
                        designs: r.mats()?,
                    });
                }
                Upload::Level0(L0Upload {
                    block,
                    phenotype_folds,
                    cells,
                })
            }
            PhaseTag::AssocUpload => Upload::Assoc(AssocUpload {
                block: r.u32()?,
                folds: r.mats()?,
            }),
            PhaseTag::Abort => Upload::Abort(r.str()?),
            other => {
                return Err(NetError::Protocol(format!(
                    "{other} is not a party message"
                )))
            }
        };
        r.finish()?;
        Ok(msg)
    }
}

impl Reply {
    pub fn tag(&self) -> PhaseTag {
        match self {
            Reply::Hello { .. } => PhaseTag::Hello,
            Reply::QcReport(_) => PhaseTag::QcReport,
            Reply::Moments(_) => PhaseTag::Moments,
            Reply::Projection { .. } => PhaseTag::ProjResult,
            Reply::L0Done(_) => PhaseTag::L0Done,
            Reply::Rstar(_) => PhaseTag::L1DoneRstar,
            Reply::AssocResult { .. } => PhaseTag::AssocResult,
            Reply::Abort(_) => PhaseTag::Abort,
        }
    }

    pub fn to_frame(&self) -> Frame {
        let mut w = PayloadWriter::new();
        match self {
            Reply::Hello { party_id, parties } => {
                w.u32(*party_id).u32(*parties);
            }
            Reply::QcReport(m) | Reply::Moments(m) => {
                w.int_mat(m);
            }
            Reply::Projection { phenotype, blocks } => {
                w.mat(phenotype).mats(blocks);
            }
            Reply::L0Done(s) => {
                w.u32(s.cells).u32(s.unconverged).u32(s.max_iterations);
            }
            Reply::Rstar(r) => {
                w.u32(*r);
            }
            Reply::AssocResult { scaled, degenerate } => {
                let flags = IntMatrix::from_vec(
                    degenerate.len(),
                    1,
                    degenerate.iter().map(|&d| i64::from(d)).collect(),
                )
                .expect("flag column shape");
                w.vector(scaled).int_mat(&flags);
            }
            Reply::Abort(reason) => {
                w.str(reason);
            }
        }
        Frame::new(self.tag() as u8, w.finish())
    }

    pub fn from_frame(frame: &Frame) -> NetResult<Self> {
        let tag = PhaseTag::from_u8(frame.msg_type)?;
        let mut r = PayloadReader::new(tag.name(), &frame.payload);
        let msg = match tag {
            PhaseTag::Hello => Reply::Hello {
                party_id: r.u32()?,
                parties: r.u32()?,
            },
            PhaseTag::QcReport => Reply::QcReport(r.int_mat()?),
            PhaseTag::Moments => Reply::Moments(r.int_mat()?),
            PhaseTag::ProjResult => Reply::Projection {
                phenotype: r.mat()?,
                blocks: r.mats()?,
            },
            PhaseTag::L0Done => Reply::L0Done(L0Summary {
                cells: r.u32()?,
                unconverged: r.u32()?,
                max_iterations: r.u32()?,
            }),
            PhaseTag::L1DoneRstar => Reply::Rstar(r.u32()?),
            PhaseTag::AssocResult => {
                let scaled = r.vector()?;
                let flags = r.int_mat()?;
                if flags.rows() != scaled.len() || flags.cols() != 1 {
                    return Err(NetError::Payload {
                        what: "ASSOC_RESULT",
                        reason: "flag column disagrees with statistics".into(),
                    });
                }
                Reply::AssocResult {
                    scaled,
                    degenerate: flags.as_slice().iter().map(|&f| f != 0).collect(),
                }
            }
            PhaseTag::Abort => Reply::Abort(r.str()?),
            other => {
                return Err(NetError::Protocol(format!(
                    "{other} is not a server message"
                )))
            }
        };
        r.finish()?;
        Ok(msg)
    }
}
