//! Command-line driver for the rHF force-constant pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rhf_ifc::artifacts::ArtifactStore;
use rhf_ifc::config::RunConfig;
use rhf_ifc::pipeline;
use rhf_ifc::{Error, Result};

/// Reduced Hartree–Fock crystals: ground state, response, Born charges and
/// interatomic force constants.
#[derive(Parser, Debug)]
#[command(name = "rhf-ifc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory; overrides the configuration's `output_dir`.
    #[arg(long, global = true, env = "RHF_IFC_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,

    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Self-consistent (or prescribed) ground state → ground_state.json.
    Scf { config: PathBuf },
    /// Band energies on the k-grid → bands.csv.
    Bands { config: PathBuf },
    /// Susceptibility blocks on the q-grid → chi0/.
    Chi0 { config: PathBuf },
    /// Dielectric tensor and Born charges (T = 0) → screening.json.
    Screen { config: PathBuf },
    /// Force constants → ifc.json, ifc.csv.
    Ifc { config: PathBuf },
    /// Decay analysis of the force constants → decay_report.json.
    FitDecay { config: PathBuf },
    /// Parameter scans → convergence.csv.
    Sweep { config: PathBuf },
    /// Every stage from scf to fit-decay.
    All { config: PathBuf },
}

impl Command {
    fn config(&self) -> &PathBuf {
        match self {
            Command::Scf { config }
            | Command::Bands { config }
            | Command::Chi0 { config }
            | Command::Screen { config }
            | Command::Ifc { config }
            | Command::FitDecay { config }
            | Command::Sweep { config }
            | Command::All { config } => config,
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidInput(format!("cannot configure thread pool: {e}")))?;
    }
    let cfg = RunConfig::load(cli.command.config())?;
    let root = cli.output_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let store = ArtifactStore::new(root);
    match &cli.command {
        Command::Scf { .. } => {
            let gs = pipeline::run_scf(&cfg, &store)?;
            println!(
                "scf: {} plane waves, gap {}, DOS {:.6e}, {} iterations",
                gs.n_plane_waves,
                gs.gap.map_or("none".to_string(), |g| format!("{g:.6}")),
                gs.dos,
                gs.scf_iterations
            );
        }
        Command::Bands { .. } => {
            let rows = pipeline::run_bands(&store)?;
            println!("bands: {} rows", rows.len());
        }
        Command::Chi0 { .. } => {
            let index = pipeline::run_chi0(&cfg, &store)?;
            println!("chi0: {} blocks on a {}^3 q-grid", index.blocks.len(), index.n_q);
        }
        Command::Screen { .. } => {
            let r = pipeline::run_screen(&cfg, &store)?;
            let e = r.summary.eps_m;
            println!(
                "screen: eps_M diag [{:.6}, {:.6}, {:.6}], sum-rule defect {:.3e}",
                e[(0, 0)],
                e[(1, 1)],
                e[(2, 2)],
                r.sum_rule_defect
            );
        }
        Command::Ifc { .. } => {
            let t = pipeline::run_ifc(&store)?;
            println!("ifc: {} lattice vectors, max imaginary part {:.2e}", t.entries.len(), t.max_imag);
        }
        Command::FitDecay { .. } => print_decay(&pipeline::run_fit_decay(&store)?),
        Command::Sweep { .. } => {
            let rows = pipeline::run_sweep(&cfg, &store)?;
            println!("sweep: {} points", rows.len());
        }
        Command::All { .. } => print_decay(&pipeline::run_pipeline(&cfg, &store)?),
    }
    Ok(())
}

fn print_decay(report: &pipeline::DecayReport) {
    match report {
        pipeline::DecayReport::Exponential { eta, r_squared, shells, .. } => {
            println!("fit-decay: eta {eta:.6}, R^2 {r_squared:.4} over {} shells", shells.len())
        }
        pipeline::DecayReport::Algebraic { outermost, .. } => match outermost {
            Some(s) => println!(
                "fit-decay: outermost shell |R| = {:.4}, ratio {}",
                s.radius,
                s.ratio.map_or("n/a".to_string(), |r| format!("{r:.4}"))
            ),
            None => println!("fit-decay: no reliable shells"),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
