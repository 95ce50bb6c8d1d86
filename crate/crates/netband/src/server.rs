//! Server orchestrator: one reader thread per connection feeding a single
//! phase sequencer over a channel.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{info, warn};
use ppgwas_core::assoc::{server_scaled_stats, ScaledStat};
use ppgwas_core::config::AnalysisConfig;
use ppgwas_core::linalg::{IntMatrix, Mat, Vector};
use ppgwas_core::ridge_l0::{server_level0_block, BlockPayload, Level0Predictions, RidgeSchedule};
use ppgwas_core::ridge_l1::{server_level1, Level1Result};
use ppgwas_core::transform::{server_project, EncodedBundle};

use crate::error::{NetError, NetResult};
use crate::frame::{Frame, DEFAULT_MAX_PAYLOAD};
use crate::message::{AssocUpload, L0Summary, L0Upload, MomentsUpload, PhaseTag, Reply, Upload};
use crate::phase::{Accept, PhaseMachine};
use crate::report::ByteReport;
use crate::transport::{mem_pair, tcp_conn, Conn, FrameRx, FrameTx};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub parties: usize,
    /// Blocks, ridges, folds and solver settings; the QC and pad fields are
    /// participant-only and ignored here.
    pub analysis: AnalysisConfig,
    /// Per-phase limit.
    pub timeout: Duration,
}

impl ServerConfig {
    pub fn new(parties: usize, analysis: AnalysisConfig) -> Self {
        ServerConfig {
            parties,
            analysis,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn validate(&self) -> NetResult<()> {
        if self.parties < 2 {
            return Err(NetError::Core(ppgwas_core::Error::Config(format!(
                "need at least two parties, got {}",
                self.parties
            ))));
        }
        self.analysis.validate()?;
        Ok(())
    }
}

pub enum Event {
    Connected(Conn),
    Frame { conn: usize, frame: Frame },
    Closed { conn: usize, reason: Option<String> },
}

/// Shape of one matrix the server received.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeRecord {
    pub tag: PhaseTag,
    pub party: u32,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug)]
pub struct ServerOutcome {
    /// 0-based.
    pub rstar: usize,
    pub scaled: Vec<ScaledStat>,
    pub level0: L0Summary,
    pub level1: Level1Result,
    pub schedule: RidgeSchedule,
    pub bytes: ByteReport,
    pub audit: Vec<ShapeRecord>,
}

pub struct ServerHandle {
    events: Sender<Event>,
}

impl ServerHandle {
    /// Hands the server end of a connection to the sequencer.
    pub fn attach(&self, conn: Conn) -> NetResult<()> {
        self.events
            .send(Event::Connected(conn))
            .map_err(|_| NetError::Closed)
    }

    /// Opens an in-memory connection and returns the party end.
    pub fn connect_mem(&self) -> NetResult<Conn> {
        let (server_end, party_end) = mem_pair();
        self.attach(server_end)?;
        Ok(party_end)
    }
}

pub fn spawn_server(cfg: ServerConfig) -> NetResult<(ServerHandle, JoinHandle<NetResult<ServerOutcome>>)> {
    cfg.validate()?;
    let (tx, rx) = mpsc::channel();
    let handle = ServerHandle { events: tx.clone() };
    let join = thread::Builder::new()
        .name("sequencer".into())
        .spawn(move || Session::new(cfg, tx).run(rx))?;
    Ok((handle, join))
}

/// Accepts TCP parties on `listener` until the session ends.
pub fn serve_tcp(listener: TcpListener, cfg: ServerConfig) -> NetResult<ServerOutcome> {
    let (handle, join) = spawn_server(cfg)?;
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    let acceptor = {
        let stop = Arc::clone(&stop);
        thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        info!("connection from {peer}");
                        let attached = stream
                            .set_nonblocking(false)
                            .map_err(NetError::from)
                            .and_then(|_| tcp_conn(stream, DEFAULT_MAX_PAYLOAD))
                            .and_then(|c| handle.attach(c));
                        if let Err(e) = attached {
                            warn!("dropping connection from {peer}: {e}");
                        }
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(10));
                    }
                    Err(e) => {
                        warn!("accept failed: {e}");
                        thread::sleep(Duration::from_millis(10));
                    }
                }
            }
        })
    };
    let out = join
        .join()
        .unwrap_or_else(|_| Err(NetError::Protocol("sequencer panicked".into())));
    stop.store(true, Ordering::Relaxed);
    let _ = acceptor.join();
    out
}

struct Link {
    tx: Box<dyn FrameTx>,
    party: Option<usize>,
    alive: bool,
}

struct Session {
    cfg: ServerConfig,
    events: Sender<Event>,
    links: Vec<Link>,
    bound: Vec<Option<usize>>,
    machine: PhaseMachine,
    hello_done: bool,
    bytes: ByteReport,
    audit: Vec<ShapeRecord>,
    qc: Vec<Option<IntMatrix>>,
    moments: Vec<Option<MomentsUpload>>,
    projection: Vec<Option<EncodedBundle>>,
    schedule: Option<RidgeSchedule>,
    phenotype: Vec<Option<Vec<Vector>>>,
    l0_pending: BTreeMap<usize, Vec<Option<BlockPayload>>>,
    l0_done: Vec<bool>,
    predictions: Option<Level0Predictions>,
    l0_summary: L0Summary,
    level1: Option<Level1Result>,
    assoc_pending: BTreeMap<usize, Vec<Option<Vec<Mat>>>>,
    assoc_done: Vec<Option<Vec<ScaledStat>>>,
}

fn reader_loop(conn: usize, mut rx: Box<dyn FrameRx>, events: Sender<Event>) {
    loop {
        let ev = match rx.recv(None) {
            Ok(Some(frame)) => Event::Frame { conn, frame },
            Ok(None) => Event::Closed { conn, reason: None },
            Err(e) => Event::Closed {
                conn,
                reason: Some(e.to_string()),
            },
        };
        let last = matches!(ev, Event::Closed { .. });
        if events.send(ev).is_err() || last {
            return;
        }
    }
}

impl Session {
    fn new(cfg: ServerConfig, events: Sender<Event>) -> Self {
        let p = cfg.parties;
        let b = cfg.analysis.blocks;
        Session {
            machine: PhaseMachine::new(p, b),
            events,
            links: Vec::new(),
            bound: vec![None; p],
            hello_done: false,
            bytes: ByteReport::default(),
            audit: Vec::new(),
            qc: vec![None; p],
            moments: vec![None; p],
            projection: vec![None; p],
            schedule: None,
            phenotype: vec![None; p],
            l0_pending: BTreeMap::new(),
            l0_done: vec![false; b],
            predictions: None,
            l0_summary: L0Summary {
                cells: 0,
                unconverged: 0,
                max_iterations: 0,
            },
            level1: None,
            assoc_pending: BTreeMap::new(),
            assoc_done: vec![None; b],
            cfg,
        }
    }

    fn run(mut self, events: Receiver<Event>) -> NetResult<ServerOutcome> {
        let mut deadline = Instant::now() + self.cfg.timeout;
        loop {
            let wait = deadline.saturating_duration_since(Instant::now());
            let ev = match events.recv_timeout(wait) {
                Ok(ev) => ev,
                Err(RecvTimeoutError::Timeout) => {
                    let phase = self.machine.current().map_or("DONE", PhaseTag::name);
                    let err = NetError::Timeout {
                        phase: phase.into(),
                        secs: self.cfg.timeout.as_secs(),
                    };
                    self.abort(&err.to_string());
                    return Err(err);
                }
                Err(RecvTimeoutError::Disconnected) => return Err(NetError::Closed),
            };
            let stage = self.machine.current();
            match self.handle(ev) {
                Ok(Some(out)) => {
                    self.close_all();
                    return Ok(out);
                }
                Ok(None) => {
                    if self.machine.current() != stage {
                        deadline = Instant::now() + self.cfg.timeout;
                    }
                }
                Err(e) => {
                    warn!("aborting session: {e}");
                    self.abort(&e.to_string());
                    return Err(e);
                }
            }
        }
    }

    fn send(&mut self, link: usize, reply: &Reply) -> NetResult<()> {
        let frame = reply.to_frame();
        let party = self.links[link].party.map_or(0, |p| p as u32 + 1);
        match self.links[link].tx.send(&frame) {
            Ok(n) => {
                self.bytes.record_sent(reply.tag(), party, n);
                Ok(())
            }
            Err(e) => {
                self.links[link].alive = false;
                Err(e)
            }
        }
    }

    fn send_party(&mut self, party: usize, reply: &Reply) -> NetResult<()> {
        let link = self.bound[party]
            .ok_or_else(|| NetError::Protocol(format!("party {} is not connected", party + 1)))?;
        self.send(link, reply).map_err(|e| {
            NetError::Protocol(format!("lost party {} while sending {}: {e}", party + 1, reply.tag()))
        })
    }

    fn broadcast(&mut self, reply: &Reply) -> NetResult<()> {
        for p in 0..self.cfg.parties {
            self.send_party(p, reply)?;
        }
        Ok(())
    }

    fn reject_link(&mut self, link: usize, reason: &str) {
        warn!("rejecting connection {link}: {reason}");
        let _ = self.send(link, &Reply::Abort(reason.into()));
        self.links[link].tx.close();
        self.links[link].alive = false;
    }

    fn abort(&mut self, reason: &str) {
        let msg = Reply::Abort(reason.into());
        for i in 0..self.links.len() {
            if self.links[i].alive {
                let _ = self.send(i, &msg);
            }
        }
        self.close_all();
    }

    fn close_all(&mut self) {
        for l in &mut self.links {
            l.tx.close();
            l.alive = false;
        }
    }

    /// Party may still (re)connect: it has sent nothing since its handshake.
    fn in_handshake(&self, party: usize) -> bool {
        !self.hello_done
            || (self.machine.current() == Some(PhaseTag::QcCounts) && self.machine.received(party) == 0)
    }

    fn handle(&mut self, ev: Event) -> NetResult<Option<ServerOutcome>> {
        match ev {
            Event::Connected(conn) => {
                let id = self.links.len();
                let events = self.events.clone();
                let Conn { tx, rx } = conn;
                self.links.push(Link {
                    tx,
                    party: None,
                    alive: true,
                });
                thread::Builder::new()
                    .name(format!("reader-{id}"))
                    .spawn(move || reader_loop(id, rx, events))?;
                Ok(None)
            }
            Event::Closed { conn, reason } => {
                self.links[conn].alive = false;
                if let Some(p) = self.links[conn].party {
                    if self.bound[p] == Some(conn) {
                        if self.in_handshake(p) {
                            info!("party {} left during handshake; awaiting reconnect", p + 1);
                        } else {
                            return Err(NetError::Protocol(format!(
                                "party {} disconnected{}",
                                p + 1,
                                reason.map(|r| format!(": {r}")).unwrap_or_default()
                            )));
                        }
                    }
                }
                Ok(None)
            }
            Event::Frame { conn, frame } => {
                if !self.links[conn].alive {
                    return Ok(None);
                }
                match self.links[conn].party {
                    None => {
                        self.handle_hello(conn, &frame)?;
                        Ok(None)
                    }
                    Some(p) => {
                        let tag = PhaseTag::from_u8(frame.msg_type)?;
                        self.bytes.record_received(tag, p as u32 + 1, frame.wire_len());
                        let msg = Upload::from_frame(&frame)?;
                        self.handle_upload(p, msg)
                    }
                }
            }
        }
    }

    fn handle_hello(&mut self, link: usize, frame: &Frame) -> NetResult<()> {
        let parsed = PhaseTag::from_u8(frame.msg_type).and_then(|_| Upload::from_frame(frame));
        let (id, parties) = match parsed {
            Ok(Upload::Hello { party_id, parties }) => (party_id as usize, parties as usize),
            Ok(other) => {
                self.bytes.record_received(other.tag(), 0, frame.wire_len());
                self.reject_link(link, &format!("expected HELLO, got {}", other.tag()));
                return Ok(());
            }
            Err(e) => {
                self.bytes.record_received(PhaseTag::Hello, 0, frame.wire_len());
                self.reject_link(link, &e.to_string());
                return Ok(());
            }
        };
        if parties != self.cfg.parties || id == 0 || id > self.cfg.parties {
            self.bytes.record_received(PhaseTag::Hello, 0, frame.wire_len());
            self.reject_link(
                link,
                &format!("party {id} of {parties} does not fit a {}-party session", self.cfg.parties),
            );
            return Ok(());
        }
        let p = id - 1;
        if let Some(old) = self.bound[p] {
            if self.links[old].alive || !self.in_handshake(p) {
                self.bytes.record_received(PhaseTag::Hello, 0, frame.wire_len());
                self.reject_link(link, &format!("duplicate party id {id}"));
                return Ok(());
            }
            info!("party {id} reconnected");
            self.bytes.record_received(PhaseTag::Hello, id as u32, frame.wire_len());
            self.links[link].party = Some(p);
            self.bound[p] = Some(link);
            if self.hello_done {
                self.send_party(p, &Reply::Hello {
                    party_id: id as u32,
                    parties: parties as u32,
                })?;
            }
            return Ok(());
        }
        self.bytes.record_received(PhaseTag::Hello, id as u32, frame.wire_len());
        self.links[link].party = Some(p);
        self.bound[p] = Some(link);
        if let Accept::Completed(_) = self.machine.accept(p, PhaseTag::Hello)? {
            self.hello_done = true;
            info!("all {} parties joined", self.cfg.parties);
            for q in 0..self.cfg.parties {
                let link = self.bound[q].expect("bound after handshake");
                if self.links[link].alive {
                    self.send_party(q, &Reply::Hello {
                        party_id: q as u32 + 1,
                        parties: self.cfg.parties as u32,
                    })?;
                }
            }
        }
        Ok(())
    }

    fn record_shape(&mut self, tag: PhaseTag, party: usize, rows: usize, cols: usize) {
        self.audit.push(ShapeRecord {
            tag,
            party: party as u32 + 1,
            rows,
            cols,
        });
    }

    fn record_mats<'a>(&mut self, tag: PhaseTag, party: usize, mats: impl IntoIterator<Item = &'a Mat>) {
        for m in mats {
            self.record_shape(tag, party, m.nrows(), m.ncols());
        }
    }

    fn handle_upload(&mut self, p: usize, msg: Upload) -> NetResult<Option<ServerOutcome>> {
        let tag = msg.tag();
        let accepted = self.machine.accept(p, tag)?;
        match msg {
            Upload::Abort(reason) => {
                return Err(NetError::Aborted(format!("party {} aborted: {reason}", p + 1)));
            }
            Upload::Hello { .. } => {}
            Upload::QcCounts(m) => {
                self.record_shape(tag, p, m.rows(), m.cols());
                self.qc[p] = Some(m);
            }
            Upload::Moments(m) => {
                self.record_shape(tag, p, m.sums.rows(), m.sums.cols());
                self.moments[p] = Some(m);
            }
            Upload::Projection {
                covariates,
                phenotype,
                blocks,
            } => {
                self.record_mats(tag, p, [&covariates, &phenotype]);
                self.record_mats(tag, p, &blocks);
                self.projection[p] = Some(EncodedBundle {
                    covariates,
                    phenotype,
                    blocks,
                });
            }
            Upload::Level0(u) => self.store_level0(p, u)?,
            Upload::Assoc(u) => self.store_assoc(p, u)?,
        }
        match accepted {
            Accept::Completed(done) => self.complete(done),
            _ => Ok(None),
        }
    }

    fn complete(&mut self, tag: PhaseTag) -> NetResult<Option<ServerOutcome>> {
        info!(
            "phase {tag} complete: {} bytes received",
            self.bytes.phase_total(tag).received
        );
        match tag {
            PhaseTag::QcCounts => {
                let parts: Vec<IntMatrix> = self.qc.iter_mut().map(|m| m.take().expect("barrier")).collect();
                let (r, c) = parts[0].shape();
                if parts.iter().any(|m| m.shape() != (r, c)) {
                    return Err(NetError::Protocol("parties disagree on the SNP count".into()));
                }
                let sum = IntMatrix::wrapping_sum(r, c, &parts)?;
                self.broadcast(&Reply::QcReport(sum))?;
            }
            PhaseTag::Moments => {
                let parts: Vec<MomentsUpload> =
                    self.moments.iter_mut().map(|m| m.take().expect("barrier")).collect();
                let first = &parts[0];
                if parts.iter().any(|m| m.digest != first.digest) {
                    return Err(NetError::Protocol(
                        "mask-consistency checksum mismatch: parties hold different seeds".into(),
                    ));
                }
                if parts
                    .iter()
                    .any(|m| m.kept_snps != first.kept_snps || m.admm_rho.to_bits() != first.admm_rho.to_bits())
                {
                    return Err(NetError::Protocol(
                        "parties disagree on retained SNPs or ADMM penalty".into(),
                    ));
                }
                if let Some(rho) = self.cfg.analysis.admm_rho {
                    if rho != first.admm_rho {
                        return Err(NetError::Protocol(format!(
                            "parties use ADMM penalty {}, server configured {rho}",
                            first.admm_rho
                        )));
                    }
                }
                let schedule = self
                    .cfg
                    .analysis
                    .schedule(first.kept_snps as usize, first.admm_rho)?;
                info!("schedule: lambdas {:?}, rho {}", schedule.lambdas, schedule.admm_rho);
                self.schedule = Some(schedule);
                let sum = IntMatrix::wrapping_sum(1, 2, parts.iter().map(|m| &m.sums))?;
                self.broadcast(&Reply::Moments(sum))?;
            }
            PhaseTag::ProjUpload => {
                let bundles: Vec<EncodedBundle> =
                    self.projection.iter_mut().map(|b| b.take().expect("barrier")).collect();
                if bundles.iter().any(|b| b.blocks.len() != self.cfg.analysis.blocks) {
                    return Err(NetError::Protocol(format!(
                        "projection uploads must carry {} blocks",
                        self.cfg.analysis.blocks
                    )));
                }
                let results = server_project(bundles)?;
                for (p, r) in results.into_iter().enumerate() {
                    self.send_party(p, &Reply::Projection {
                        phenotype: r.phenotype,
                        blocks: r.blocks,
                    })?;
                }
            }
            PhaseTag::L0Payload => {
                self.process_level0_blocks()?;
                let preds = self.predictions.take().filter(Level0Predictions::is_complete).ok_or_else(|| {
                    NetError::Protocol("Level-0 phase ended with unsolved blocks".into())
                })?;
                let summary = self.l0_summary.clone();
                info!(
                    "Level-0: {} cells, {} unconverged, at most {} iterations",
                    summary.cells, summary.unconverged, summary.max_iterations
                );
                self.broadcast(&Reply::L0Done(summary))?;
                let folds = self.cfg.analysis.folds;
                let phenos: Vec<Vec<Vector>> =
                    self.phenotype.iter_mut().map(|v| v.take().expect("block 0 seen")).collect();
                let pooled: Vec<Vector> = (0..folds)
                    .map(|k| {
                        let mut acc = phenos[0][k].clone();
                        for v in &phenos[1..] {
                            acc += &v[k];
                        }
                        acc
                    })
                    .collect();
                let schedule = self.schedule.as_ref().expect("schedule after moments");
                let level1 = server_level1(&preds, &pooled, schedule)?;
                info!("Level-1 selected ridge index {}", level1.rstar + 1);
                self.broadcast(&Reply::Rstar(level1.rstar as u32))?;
                self.level1 = Some(level1);
            }
            PhaseTag::AssocUpload => {
                let blocks = std::mem::take(&mut self.assoc_done);
                let mut scaled = Vec::new();
                for (b, s) in blocks.into_iter().enumerate() {
                    scaled.extend(s.ok_or_else(|| {
                        NetError::Protocol(format!("association block {b} incomplete"))
                    })?);
                }
                self.broadcast(&Reply::AssocResult {
                    scaled: Vector::from_iterator(scaled.len(), scaled.iter().map(|s| s.scaled)),
                    degenerate: scaled.iter().map(|s| s.degenerate).collect(),
                })?;
                for (tag, party, t) in self.bytes.rows() {
                    info!("bytes {tag} party {party}: sent {} received {}", t.sent, t.received);
                }
                let level1 = self.level1.take().expect("level-1 before association");
                return Ok(Some(ServerOutcome {
                    rstar: level1.rstar,
                    scaled,
                    level0: self.l0_summary.clone(),
                    level1,
                    schedule: self.schedule.take().expect("schedule"),
                    bytes: std::mem::take(&mut self.bytes),
                    audit: std::mem::take(&mut self.audit),
                }));
            }
            PhaseTag::Hello => {}
            other => return Err(NetError::Protocol(format!("no barrier for {other}"))),
        }
        Ok(None)
    }

    fn check_block(&self, p: usize, block: u32, tag: PhaseTag) -> NetResult<usize> {
        let b = block as usize;
        if b >= self.cfg.analysis.blocks {
            return Err(NetError::Protocol(format!(
                "party {} sent {tag} for block {b} of {}",
                p + 1,
                self.cfg.analysis.blocks
            )));
        }
        Ok(b)
    }

    fn store_level0(&mut self, p: usize, u: L0Upload) -> NetResult<()> {
        let tag = PhaseTag::L0Payload;
        let b = self.check_block(p, u.block, tag)?;
        let folds = self.cfg.analysis.folds;
        let ridges = self.cfg.analysis.ridges;
        if u.cells.len() != ridges
            || u.cells
                .iter()
                .any(|c| c.inverse_grams.len() != folds || c.designs.len() != folds)
        {
            return Err(NetError::Protocol(format!(
                "party {} block {b} payload is not {ridges} ridges by {folds} folds",
                p + 1
            )));
        }
        let expect_pheno = if b == 0 { folds } else { 0 };
        if u.phenotype_folds.len() != expect_pheno {
            return Err(NetError::Protocol(format!(
                "party {} block {b} carries {} phenotype folds, expected {expect_pheno}",
                p + 1,
                u.phenotype_folds.len()
            )));
        }
        let slot = self
            .l0_pending
            .entry(b)
            .or_insert_with(|| vec![None; self.cfg.parties]);
        if slot[p].is_some() || self.l0_done[b] {
            return Err(NetError::Protocol(format!("party {} repeated Level-0 block {b}", p + 1)));
        }
        for v in &u.phenotype_folds {
            self.record_shape(tag, p, v.len(), 1);
        }
        for c in &u.cells {
            self.record_mats(tag, p, &c.inverse_grams);
            self.record_mats(tag, p, &c.designs);
        }
        if b == 0 {
            self.phenotype[p] = Some(u.phenotype_folds);
        }
        self.l0_pending.get_mut(&b).expect("inserted")[p] = Some(BlockPayload {
            block: b,
            ridges: u.cells,
        });
        self.process_level0_blocks()
    }

    /// Solves every block all parties have uploaded once the phenotype folds are in.
    fn process_level0_blocks(&mut self) -> NetResult<()> {
        if self.phenotype.iter().any(Option::is_none) {
            return Ok(());
        }
        let ready: Vec<usize> = self
            .l0_pending
            .iter()
            .filter(|(_, v)| v.iter().all(Option::is_some))
            .map(|(&b, _)| b)
            .collect();
        let schedule = self.schedule.clone().expect("schedule after moments");
        let phenos: Vec<Vec<Vector>> = self.phenotype.iter().map(|v| v.clone().expect("checked")).collect();
        let (folds, blocks) = (self.cfg.analysis.folds, self.cfg.analysis.blocks);
        for b in ready {
            let payloads: Vec<BlockPayload> = self
                .l0_pending
                .remove(&b)
                .expect("ready")
                .into_iter()
                .map(|x| x.expect("ready"))
                .collect();
            let solved = server_level0_block(&payloads, &phenos, &schedule)?;
            let preds = self
                .predictions
                .get_or_insert_with(|| Level0Predictions::new(folds, blocks, schedule.ridges()));
            let mut by_fold = Vec::with_capacity(solved.len());
            for row in solved {
                let mut cells = Vec::with_capacity(row.len());
                for cell in row {
                    self.l0_summary.cells += 1;
                    self.l0_summary.unconverged += u32::from(!cell.converged);
                    self.l0_summary.max_iterations = self.l0_summary.max_iterations.max(cell.iterations as u32);
                    cells.push(cell.prediction);
                }
                by_fold.push(cells);
            }
            preds.insert_block(b, by_fold);
            self.l0_done[b] = true;
        }
        Ok(())
    }

    fn store_assoc(&mut self, p: usize, u: AssocUpload) -> NetResult<()> {
        let tag = PhaseTag::AssocUpload;
        let b = self.check_block(p, u.block, tag)?;
        if u.folds.len() != self.cfg.analysis.folds {
            return Err(NetError::Protocol(format!(
                "party {} association block {b} has {} folds",
                p + 1,
                u.folds.len()
            )));
        }
        self.record_mats(tag, p, &u.folds);
        let parties = self.cfg.parties;
        let slot = self.assoc_pending.entry(b).or_insert_with(|| vec![None; parties]);
        if slot[p].is_some() || self.assoc_done[b].is_some() {
            return Err(NetError::Protocol(format!("party {} repeated association block {b}", p + 1)));
        }
        slot[p] = Some(u.folds);
        if slot.iter().all(Option::is_some) {
            let uploads: Vec<Vec<Mat>> = self
                .assoc_pending
                .remove(&b)
                .expect("present")
                .into_iter()
                .map(|x| x.expect("complete"))
                .collect();
            let level1 = self.level1.as_ref().expect("level-1 before association");
            self.assoc_done[b] = Some(server_scaled_stats(&uploads, level1)?);
        }
        Ok(())
    }
}
