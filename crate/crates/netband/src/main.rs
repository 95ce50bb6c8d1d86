use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use netband::party::{run_party_tcp, PartyConfig};
use netband::server::{serve_tcp, ServerConfig};
use netband::simulator::run_simulation_with_timeout;
use ppgwas_core::assoc::{compare_results, read_results, write_results};
use ppgwas_core::blockstore::{
    horizontal_split, read_cohort, read_dataset, read_split, write_dataset, write_split, Dataset, COHORT_FILE,
};
use ppgwas_core::config::AnalysisConfig;
use ppgwas_core::oracle::run_oracle;
use ppgwas_core::ridge_l0::DEFAULT_ADMM_ITERS;
use ppgwas_core::seedcraft::{MaskSuite, SeedKey};
use ppgwas_core::synthgen::{generate, SynthConfig};

const RESULTS_FILE: &str = "results.tsv";
const BYTES_FILE: &str = "bytes.tsv";
const QC_FILE: &str = "qc.tsv";

#[derive(Parser)]
#[command(name = "ppgwas", version, about = "Masked multi-party GWAS with stacked ridge regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic single-site dataset.
    GenData(GenDataArgs),
    /// Split a dataset row-wise into party directories.
    Split(SplitArgs),
    /// Run the server and all parties in one process.
    Simulate(SimulateArgs),
    /// Run the centralized plaintext reference.
    Oracle(OracleArgs),
    /// Coordinate a networked run.
    Server(ServerArgs),
    /// Take part in a networked run.
    Party(PartyArgs),
    /// Print Pearson r² between the -log10 p columns of two results files.
    Compare { a: PathBuf, b: PathBuf },
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    samples: usize,
    #[arg(long)]
    snps: usize,
    #[arg(long, default_value_t = 3)]
    covariates: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    storage_blocks: usize,
    #[arg(long, default_value_t = 0.5)]
    heritability: f64,
    #[arg(long, default_value_t = 0.01)]
    causal_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    missing_rate: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    parties: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct AnalysisArgs {
    #[arg(long, default_value_t = 8)]
    blocks: usize,
    /// Number of ridge parameters per level.
    #[arg(long, default_value_t = 5)]
    ridge_params: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = DEFAULT_ADMM_ITERS)]
    admm_iters: usize,
    /// ADMM penalty; derived from the training size when omitted.
    #[arg(long)]
    admm_rho: Option<f64>,
    #[arg(long)]
    cgd_iters: Option<usize>,
}

impl AnalysisArgs {
    fn config(&self) -> AnalysisConfig {
        AnalysisConfig {
            blocks: self.blocks,
            ridges: self.ridge_params,
            folds: self.folds,
            admm_rho: self.admm_rho,
            admm_iters: self.admm_iters,
            cgd_iters: self.cgd_iters,
            ..AnalysisConfig::default()
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Split root written by `split`; omit to generate data.
    #[arg(long, conflicts_with_all = ["samples", "snps"])]
    data: Option<PathBuf>,
    #[arg(long)]
    parties: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    snps: Option<usize>,
    #[arg(long, default_value_t = 3)]
    covariates: usize,
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    #[command(flatten)]
    analysis: AnalysisArgs,
    /// Passphrase shared by the parties.
    #[arg(long, default_value = "1")]
    seed: String,
    #[arg(long, default_value_t = 300)]
    timeout_secs: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    analysis: AnalysisArgs,
    #[arg(long, default_value = "1")]
    seed: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServerArgs {
    #[arg(long, default_value_t = 7878)]
    port: u16,
    #[arg(long)]
    parties: usize,
    #[command(flatten)]
    analysis: AnalysisArgs,
    #[arg(long, default_value_t = 300)]
    timeout_secs: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PartyArgs {
    /// Server address, host:port.
    #[arg(long)]
    server: String,
    /// 1-based.
    #[arg(long)]
    party_id: usize,
    #[arg(long)]
    data: PathBuf,
    /// Cohort sizes agreed among the parties; defaults to the split root's file.
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[command(flatten)]
    analysis: AnalysisArgs,
    #[arg(long)]
    seed: String,
    #[arg(long, default_value_t = 300)]
    timeout_secs: u64,
    #[arg(long)]
    out: PathBuf,
}

type Outcome = Result<(), Box<dyn std::error::Error>>;

fn suite(seed: &str) -> MaskSuite {
    MaskSuite::new(
        SeedKey::from_passphrase(seed),
        AnalysisConfig::default().pad_policy(),
    )
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Outcome {
    let mut cfg = SynthConfig::new(a.samples, a.snps, a.covariates);
    cfg.storage_blocks = a.storage_blocks;
    cfg.heritability = a.heritability;
    cfg.causal_fraction = a.causal_fraction;
    cfg.missing_rate = a.missing_rate;
    let data = generate(a.seed, &cfg)?;
    write_dataset(&a.out, &data)?;
    println!("wrote {} samples x {} SNPs to {}", a.samples, a.snps, a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> Outcome {
    let data = read_dataset(&a.data)?;
    let parts = horizontal_split(&data, a.parties, a.seed)?;
    let cohort = write_split(&a.out, &parts)?;
    println!("wrote {} parties {:?} to {}", cohort.parties(), cohort.party_sizes, a.out.display());
    Ok(())
}

fn simulate(a: SimulateArgs) -> Outcome {
    let parts: Vec<Dataset> = match (&a.data, a.samples, a.snps) {
        (Some(root), _, _) => {
            let parts = read_split(root)?;
            if a.parties.is_some_and(|p| p != parts.len()) {
                return Err(format!("--parties disagrees with the {} parties in {}", parts.len(), root.display()).into());
            }
            parts
        }
        (None, Some(n), Some(m)) => {
            let data = generate(a.data_seed, &SynthConfig::new(n, m, a.covariates))?;
            horizontal_split(&data, a.parties.unwrap_or(2), a.data_seed)?
        }
        _ => return Err("give either --data or both --samples and --snps".into()),
    };
    let analysis = a.analysis.config();
    let start = Instant::now();
    let out = run_simulation_with_timeout(&parts, &analysis, &suite(&a.seed), Duration::from_secs(a.timeout_secs))?;
    create_dir(&a.out)?;
    write_results(&out.results, &a.out.join(RESULTS_FILE))?;
    out.bytes().write_tsv(&a.out.join(BYTES_FILE))?;
    out.parties[0].qc.write_tsv(&a.out.join(QC_FILE))?;
    let total = out.bytes().total();
    println!(
        "{} parties, {} SNPs tested, r* = {}, {} bytes exchanged, {:.2} s",
        parts.len(),
        out.results.stats.len(),
        out.results.meta.rstar,
        total.sent + total.received,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn oracle(a: OracleArgs) -> Outcome {
    let parts = read_split(&a.data)?;
    let out = run_oracle(&parts, &a.analysis.config(), &suite(&a.seed))?;
    create_dir(&a.out)?;
    write_results(&out.results, &a.out.join(RESULTS_FILE))?;
    println!(
        "{} SNPs tested, r* = {}",
        out.results.stats.len(),
        out.results.meta.rstar
    );
    Ok(())
}

fn server(a: ServerArgs) -> Outcome {
    let listener = TcpListener::bind(("0.0.0.0", a.port))?;
    println!("listening on {}", listener.local_addr()?);
    let mut cfg = ServerConfig::new(a.parties, a.analysis.config());
    cfg.timeout = Duration::from_secs(a.timeout_secs);
    let out = serve_tcp(listener, cfg)?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        out.bytes.write_tsv(&dir.join(BYTES_FILE))?;
    }
    let total = out.bytes.total();
    println!(
        "session complete: r* = {}, {} statistics, {} bytes exchanged",
        out.rstar + 1,
        out.scaled.len(),
        total.sent + total.received
    );
    Ok(())
}

fn party(a: PartyArgs) -> Outcome {
    let data = read_dataset(&a.data)?;
    let cohort_path = a.cohort.clone().unwrap_or_else(|| {
        a.data
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(COHORT_FILE)
    });
    let cohort = read_cohort(&cohort_path)?;
    let mut cfg = PartyConfig::new(a.party_id, cohort.party_sizes, a.analysis.config());
    cfg.timeout = Duration::from_secs(a.timeout_secs);
    let out = run_party_tcp(&a.server, &data, &cfg, &suite(&a.seed))?;
    create_dir(&a.out)?;
    write_results(&out.results, &a.out.join(RESULTS_FILE))?;
    out.qc.write_tsv(&a.out.join(QC_FILE))?;
    out.bytes.write_tsv(&a.out.join(BYTES_FILE))?;
    println!(
        "party {}: {} SNPs tested, r* = {}",
        a.party_id,
        out.results.stats.len(),
        out.results.meta.rstar
    );
    Ok(())
}

fn compare(a: &Path, b: &Path) -> Outcome {
    let r2 = compare_results(&read_results(a)?, &read_results(b)?)?;
    println!("r2\t{r2:.6}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Split(a) => split(a),
        Command::Simulate(a) => simulate(a),
        Command::Oracle(a) => oracle(a),
        Command::Server(a) => server(a),
        Command::Party(a) => party(a),
        Command::Compare { a, b } => compare(&a, &b),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
