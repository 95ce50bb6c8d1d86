//! Participant runtime: every party-side step of the protocol, driven over one connection.

use std::net::{TcpStream, ToSocketAddrs};
use std::thread;
use std::time::Duration;

use log::{info, warn};
use ppgwas_core::assoc::{finalize_stats, party_mask_snps, AssocResultSet, RunMeta, ScaledStat};
use ppgwas_core::blockstore::Dataset;
use ppgwas_core::config::AnalysisConfig;
use ppgwas_core::linalg::{Mat, Vector};
use ppgwas_core::qc::{apply_filters, dataset_counts, party_count_upload, unblind_counts, QcReport};
use ppgwas_core::ridge_l0::{party_block_payload, party_phenotype_folds};
use ppgwas_core::seedcraft::MaskSuite;
use ppgwas_core::transform::{
    decode_projection, encode_inputs, imputed_dosages, party_moment_upload, unblind_moments, with_intercept,
    ProjectedBundle, StdStats,
};

use crate::error::{NetError, NetResult};
use crate::frame::DEFAULT_MAX_PAYLOAD;
use crate::message::{AssocUpload, L0Upload, MomentsUpload, PhaseTag, Reply, Upload};
use crate::report::ByteReport;
use crate::server::DEFAULT_TIMEOUT;
use crate::transport::{tcp_conn, Conn};

pub const CONNECT_RETRIES: usize = 3;
pub const RETRY_BACKOFF: Duration = Duration::from_millis(250);

#[derive(Clone, Debug)]
pub struct PartyConfig {
    /// 1-based.
    pub party_id: usize,
    /// Every party's sample count, agreed among the parties before the run.
    pub party_sizes: Vec<usize>,
    pub analysis: AnalysisConfig,
    pub timeout: Duration,
}

impl PartyConfig {
    pub fn new(party_id: usize, party_sizes: Vec<usize>, analysis: AnalysisConfig) -> Self {
        PartyConfig {
            party_id,
            party_sizes,
            analysis,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn parties(&self) -> usize {
        self.party_sizes.len()
    }

    pub fn total_samples(&self) -> usize {
        self.party_sizes.iter().sum()
    }

    fn index(&self) -> usize {
        self.party_id - 1
    }

    pub fn validate(&self, dataset: &Dataset) -> NetResult<()> {
        self.analysis.validate()?;
        let p = self.parties();
        if p < 2 || self.party_id == 0 || self.party_id > p {
            return Err(NetError::Core(ppgwas_core::Error::Config(format!(
                "party id {} outside a {p}-party cohort",
                self.party_id
            ))));
        }
        if self.party_sizes[self.index()] != dataset.samples() {
            return Err(NetError::Core(ppgwas_core::Error::Config(format!(
                "cohort lists {} samples for party {}, dataset holds {}",
                self.party_sizes[self.index()],
                self.party_id,
                dataset.samples()
            ))));
        }
        dataset.check_shapes()?;
        Ok(())
    }
}

/// What a party learns and keeps from a run.
#[derive(Clone, Debug)]
pub struct PartyOutcome {
    pub results: AssocResultSet,
    pub qc: QcReport,
    pub stats: StdStats,
    /// 0-based.
    pub rstar: usize,
    /// This party's rows of the projected, standardized genotypes.
    pub x_tilde: Mat,
    pub y_tilde: Vector,
    pub bytes: ByteReport,
    /// Tags of every server message in arrival order.
    pub received: Vec<PhaseTag>,
}

struct Channel {
    conn: Conn,
    party: u32,
    timeout: Duration,
    bytes: ByteReport,
    received: Vec<PhaseTag>,
}

impl Channel {
    fn send(&mut self, msg: &Upload) -> NetResult<()> {
        let n = self.conn.tx.send(&msg.to_frame())?;
        self.bytes.record_sent(msg.tag(), self.party, n);
        Ok(())
    }

    fn recv(&mut self) -> NetResult<Reply> {
        let frame = self.conn.rx.recv(Some(self.timeout))?.ok_or(NetError::Closed)?;
        let reply = Reply::from_frame(&frame)?;
        self.bytes.record_received(reply.tag(), self.party, frame.wire_len());
        self.received.push(reply.tag());
        match reply {
            Reply::Abort(reason) => Err(NetError::Aborted(reason)),
            r => Ok(r),
        }
    }

    fn unexpected<T>(&self, want: PhaseTag, got: &Reply) -> NetResult<T> {
        Err(NetError::Protocol(format!("expected {want}, server sent {}", got.tag())))
    }

    /// Tells the server why this party is giving up, then returns `err`.
    fn bail<T>(&mut self, err: NetError) -> NetResult<T> {
        if !matches!(err, NetError::Aborted(_) | NetError::Closed) {
            let _ = self.send(&Upload::Abort(err.to_string()));
        }
        Err(err)
    }
}

/// Sends HELLO and waits for the barrier acknowledgement, reconnecting through
/// `connect` on failure.
fn handshake<F>(connect: &mut F, cfg: &PartyConfig) -> NetResult<Channel>
where
    F: FnMut() -> NetResult<Conn>,
{
    let hello = Upload::Hello {
        party_id: cfg.party_id as u32,
        parties: cfg.parties() as u32,
    };
    let mut attempt = 0;
    loop {
        let result = connect().and_then(|conn| {
            let mut ch = Channel {
                conn,
                party: cfg.party_id as u32,
                timeout: cfg.timeout,
                bytes: ByteReport::default(),
                received: Vec::new(),
            };
            ch.send(&hello)?;
            match ch.recv()? {
                Reply::Hello { party_id, parties }
                    if party_id as usize == cfg.party_id && parties as usize == cfg.parties() =>
                {
                    Ok(ch)
                }
                other => ch.unexpected(PhaseTag::Hello, &other),
            }
        });
        match result {
            Ok(ch) => return Ok(ch),
            Err(e @ (NetError::Io(_) | NetError::Closed | NetError::Frame(_))) if attempt < CONNECT_RETRIES => {
                let wait = RETRY_BACKOFF * 2u32.pow(attempt as u32);
                warn!(
                    "party {}: handshake failed ({e}); retry {} in {wait:?}",
                    cfg.party_id,
                    attempt + 1
                );
                thread::sleep(wait);
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Runs the whole protocol for one party; `connect` opens a fresh connection.
pub fn run_party<F>(mut connect: F, dataset: &Dataset, cfg: &PartyConfig, suite: &MaskSuite) -> NetResult<PartyOutcome>
where
    F: FnMut() -> NetResult<Conn>,
{
    cfg.validate(dataset)?;
    let mut ch = handshake(&mut connect, cfg)?;
    info!("party {} joined", cfg.party_id);
    match drive(&mut ch, dataset, cfg, suite) {
        Ok(mut out) => {
            out.bytes = std::mem::take(&mut ch.bytes);
            out.received = std::mem::take(&mut ch.received);
            ch.conn.tx.close();
            Ok(out)
        }
        Err(e) => ch.bail(e),
    }
}

/// Connects to a TCP server, retrying with exponential backoff.
pub fn run_party_tcp(
    server: &str,
    dataset: &Dataset,
    cfg: &PartyConfig,
    suite: &MaskSuite,
) -> NetResult<PartyOutcome> {
    let addr = server
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| NetError::Protocol(format!("cannot resolve {server}")))?;
    run_party(
        || {
            let stream = TcpStream::connect_timeout(&addr, cfg.timeout)?;
            tcp_conn(stream, DEFAULT_MAX_PAYLOAD)
        },
        dataset,
        cfg,
        suite,
    )
}

fn drive(ch: &mut Channel, dataset: &Dataset, cfg: &PartyConfig, suite: &MaskSuite) -> NetResult<PartyOutcome> {
    let idx = cfg.index();
    let parties = cfg.parties();
    let n = cfg.total_samples();
    let analysis = &cfg.analysis;

    // QC on pooled allele counts
    let counts = dataset_counts(dataset);
    ch.send(&Upload::QcCounts(party_count_upload(&counts, suite, cfg.party_id, parties)?))?;
    let blinded = match ch.recv()? {
        Reply::QcReport(m) => m,
        other => return ch.unexpected(PhaseTag::QcReport, &other),
    };
    let pooled = unblind_counts(&blinded, suite)?;
    let qc = apply_filters(&pooled, &analysis.thresholds(), n);
    let kept = qc.kept.clone();
    info!("party {}: {} of {} SNPs pass QC", cfg.party_id, kept.len(), qc.snps.len());

    // phenotype moments, seed digest and shared settings
    let rho = analysis.rho(n, parties);
    ch.send(&Upload::Moments(MomentsUpload {
        digest: suite.consistency_digest(),
        kept_snps: kept.len() as u64,
        admm_rho: rho,
        sums: party_moment_upload(dataset.phenotype.values(), suite, cfg.party_id, parties)?,
    }))?;
    let blinded = match ch.recv()? {
        Reply::Moments(m) => m,
        other => return ch.unexpected(PhaseTag::Moments, &other),
    };
    let (y_sum, y_sq) = unblind_moments(&blinded, suite)?;
    let stats = StdStats::from_aggregates(&pooled, &kept, n, y_sum, y_sq)?;
    let schedule = analysis.schedule(kept.len(), rho)?;
    let plan = suite.plan(kept.len(), analysis.blocks, &cfg.party_sizes, analysis.folds)?;

    // covariate projection
    let x = imputed_dosages(&dataset.genotypes(), &kept, &stats.snp_means);
    let z1 = with_intercept(&dataset.covariates);
    let enc = encode_inputs(suite, &plan, idx, &x, &z1, dataset.phenotype.values())?;
    drop(x);
    ch.send(&Upload::Projection {
        covariates: enc.covariates,
        phenotype: enc.phenotype,
        blocks: enc.blocks,
    })?;
    let projected = match ch.recv()? {
        Reply::Projection { phenotype, blocks } => ProjectedBundle { phenotype, blocks },
        other => return ch.unexpected(PhaseTag::ProjResult, &other),
    };
    let (x_tilde, y_tilde) = decode_projection(suite, &plan, idx, &projected, &stats)?;
    drop(projected);

    // Level 0, one upload per block
    let mut phenotype_folds = party_phenotype_folds(suite, &plan, idx, &y_tilde)?;
    for (b, range) in plan.blocks().iter().enumerate() {
        let xb = x_tilde.columns(range.start, range.len()).into_owned();
        let payload = party_block_payload(suite, &plan, idx, b, &xb, &schedule)?;
        ch.send(&Upload::Level0(L0Upload {
            block: b as u32,
            phenotype_folds: if b == 0 { std::mem::take(&mut phenotype_folds) } else { Vec::new() },
            cells: payload.ridges,
        }))?;
    }
    match ch.recv()? {
        Reply::L0Done(s) => info!(
            "party {}: Level-0 finished, {} of {} cells unconverged",
            cfg.party_id, s.unconverged, s.cells
        ),
        other => return ch.unexpected(PhaseTag::L0Done, &other),
    }
    let rstar = match ch.recv()? {
        Reply::Rstar(r) => r as usize,
        other => return ch.unexpected(PhaseTag::L1DoneRstar, &other),
    };

    // association
    for (b, range) in plan.blocks().iter().enumerate() {
        let xb = x_tilde.columns(range.start, range.len()).into_owned();
        let folds = party_mask_snps(suite, &plan, idx, &xb, &kept[range.clone()], rstar, schedule.ridges())?;
        ch.send(&Upload::Assoc(AssocUpload {
            block: b as u32,
            folds,
        }))?;
    }
    let scaled: Vec<ScaledStat> = match ch.recv()? {
        Reply::AssocResult { scaled, degenerate } => scaled
            .iter()
            .zip(degenerate)
            .map(|(&s, d)| ScaledStat {
                scaled: s,
                degenerate: d,
            })
            .collect(),
        other => return ch.unexpected(PhaseTag::AssocResult, &other),
    };
    let c = dataset.covariates.cols();
    let stats_out = finalize_stats(&kept, &scaled, n, c)?;
    let results = AssocResultSet::new(
        RunMeta {
            source: "distributed".into(),
            rstar: rstar + 1,
            samples: n,
            snps: kept.len(),
            covariates: c,
            seed_fingerprint: suite.root().fingerprint_hex(),
        },
        stats_out,
    );
    Ok(PartyOutcome {
        results,
        qc,
        stats,
        rstar,
        x_tilde,
        y_tilde,
        bytes: ByteReport::default(),
        received: Vec::new(),
    })
}
