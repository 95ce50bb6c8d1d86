//! In-process harness: the server and every party run the networked code
//! paths on threads joined by in-memory channels.

use std::thread;
use std::time::Duration;

use ppgwas_core::assoc::AssocResultSet;
use ppgwas_core::blockstore::Dataset;
use ppgwas_core::config::AnalysisConfig;
use ppgwas_core::seedcraft::MaskSuite;

use crate::error::{NetError, NetResult};
use crate::party::{run_party, PartyConfig, PartyOutcome};
use crate::report::ByteReport;
use crate::server::{spawn_server, ServerConfig, ServerOutcome, DEFAULT_TIMEOUT};

#[derive(Clone, Debug)]
pub struct SimulationOutcome {
    /// Results as written by party 1; every party holds the same set.
    pub results: AssocResultSet,
    pub parties: Vec<PartyOutcome>,
    pub server: ServerOutcome,
}

impl SimulationOutcome {
    /// Server-side counters, the same numbers a wire run reports.
    pub fn bytes(&self) -> &ByteReport {
        &self.server.bytes
    }
}

pub fn run_simulation(parts: &[Dataset], analysis: &AnalysisConfig, suite: &MaskSuite) -> NetResult<SimulationOutcome> {
    run_simulation_with_timeout(parts, analysis, suite, DEFAULT_TIMEOUT)
}

pub fn run_simulation_with_timeout(
    parts: &[Dataset],
    analysis: &AnalysisConfig,
    suite: &MaskSuite,
    timeout: Duration,
) -> NetResult<SimulationOutcome> {
    let sizes: Vec<usize> = parts.iter().map(Dataset::samples).collect();
    let mut server_cfg = ServerConfig::new(parts.len(), analysis.clone());
    server_cfg.timeout = timeout;
    let (handle, server) = spawn_server(server_cfg)?;
    let outcomes = thread::scope(|s| {
        let workers: Vec<_> = parts
            .iter()
            .enumerate()
            .map(|(i, data)| {
                let mut cfg = PartyConfig::new(i + 1, sizes.clone(), analysis.clone());
                cfg.timeout = timeout;
                let conn = handle.connect_mem();
                s.spawn(move || {
                    let mut conn = Some(conn?);
                    run_party(
                        || conn.take().ok_or(NetError::Closed),
                        data,
                        &cfg,
                        suite,
                    )
                })
            })
            .collect();
        workers
            .into_iter()
            .map(|w| {
                w.join()
                    .unwrap_or_else(|_| Err(NetError::Protocol("party thread panicked".into())))
            })
            .collect::<Vec<_>>()
    });
    let server = server
        .join()
        .unwrap_or_else(|_| Err(NetError::Protocol("sequencer panicked".into())));
    // the server's error names the cause; party errors usually echo its ABORT
    let server = server?;
    let parties = outcomes.into_iter().collect::<NetResult<Vec<_>>>()?;
    Ok(SimulationOutcome {
        results: parties[0].results.clone(),
        parties,
        server,
    })
}
