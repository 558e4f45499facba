//! Command-line driver: experiment dispatch, cost tables and checkpoint
//! inspection.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fjord_core::checkpoint;
use fjord_core::config::ExperimentConfig;
use fjord_core::experiments::{
    bundled_descriptors, run_centralized, run_cost_table, run_federated, run_svd_recovery,
    write_svd_report, SvdExperimentConfig,
};
use fjord_core::od::DropoutDistribution;
use fjord_core::submodel::{extract_submodel, materialize_submodel};
use fjord_core::Error;

const OUTPUT_ROOT_ENV: &str = "FJORD_OUT";

#[derive(Parser)]
#[command(
    name = "fjord",
    version,
    about = "Ordered-width training simulator: experiments, cost tables, checkpoints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to $FJORD_OUT/<command> or out/<command>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Low-rank recovery experiment on the two-layer linear net.
    Svd,
    /// Centralized width-family comparison (sampled widths vs independent
    /// models vs random masks).
    Central,
    /// Federated protocol and baselines on one client population.
    Federated,
    /// Emit the MAC/parameter cost table for the bundled descriptors.
    Cost,
    /// Print a checkpoint's header, per-width parameter counts and
    /// normalization keys.
    Inspect {
        checkpoint: PathBuf,
        /// Write a standalone submodel checkpoint at this width.
        #[arg(long)]
        extract: Option<f64>,
        /// Output path for the extracted checkpoint.
        #[arg(long)]
        extract_out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: failed to build thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Config and usage problems exit 2; runtime failures exit 1.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Json(je) => {
            // Parse errors carry a position; report it like a compiler would.
            eprintln!("  at line {}, column {}", je.line(), je.column());
            2
        }
        Error::InvalidConfig(_)
        | Error::InvalidDistribution(_)
        | Error::InvalidWidth(_)
        | Error::WidthNotInDistribution(_)
        | Error::OutputLocked(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> fjord_core::Result<()> {
    match &cli.command {
        Command::Svd => cmd_svd(&cli),
        Command::Central => cmd_central(&cli),
        Command::Federated => cmd_federated(&cli),
        Command::Cost => cmd_cost(&cli),
        Command::Inspect {
            checkpoint,
            extract,
            extract_out,
        } => cmd_inspect(checkpoint, *extract, extract_out.as_deref()),
    }
}

fn output_dir(cli: &Cli, kind: &str, from_config: Option<&str>) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    if let Some(dir) = from_config {
        return PathBuf::from(dir);
    }
    let root = std::env::var(OUTPUT_ROOT_ENV).unwrap_or_else(|_| "out".into());
    Path::new(&root).join(kind)
}

/// Exclusive ownership of an output directory for the process lifetime.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> fjord_core::Result<DirLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::OutputLocked(dir.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn load_experiment_config(cli: &Cli) -> fjord_core::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_json(&fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn cmd_svd(cli: &Cli) -> fjord_core::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => SvdExperimentConfig::from_json(&fs::read_to_string(path)?)?,
        None => SvdExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = output_dir(cli, "svd", None);
    let _lock = DirLock::acquire(&out)?;
    let outcome = run_svd_recovery(&cfg)?;
    write_svd_report(&cfg, &outcome, &out)?;
    if !cli.quiet {
        println!("rank distances (tail-averaged factors):");
        for (i, d) in outcome.final_distances.iter().enumerate() {
            println!("  b={}: {d:.6}", i + 1);
        }
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn cmd_central(cli: &Cli) -> fjord_core::Result<()> {
    let cfg = load_experiment_config(cli)?;
    let out = output_dir(cli, "central", cfg.output_dir.as_deref());
    let _lock = DirLock::acquire(&out)?;
    let report = run_centralized(&cfg, &out)?;
    if !cli.quiet {
        for arm in &report.summary.arms {
            let row: Vec<String> = arm
                .per_p
                .iter()
                .map(|w| format!("p={}: {:.3}", w.p, w.mean))
                .collect();
            println!("{:>8}: {}", arm.arm, row.join("  "));
        }
        println!("report written to {}", report.dir.display());
    }
    Ok(())
}

fn cmd_federated(cli: &Cli) -> fjord_core::Result<()> {
    let cfg = load_experiment_config(cli)?;
    let out = output_dir(cli, "federated", cfg.output_dir.as_deref());
    let _lock = DirLock::acquire(&out)?;
    let report = run_federated(&cfg, &out)?;
    if !cli.quiet {
        for arm in &report.summary.arms {
            let row: Vec<String> = arm
                .per_p
                .iter()
                .map(|w| format!("p={}: {:.3}", w.p, w.mean))
                .collect();
            println!("{:>12}: {}", arm.arm, row.join("  "));
        }
        println!("report written to {}", report.dir.display());
    }
    Ok(())
}

fn cmd_cost(cli: &Cli) -> fjord_core::Result<()> {
    let dist = DropoutDistribution::uniform_k(5)?;
    let descriptors = bundled_descriptors();
    let csv = run_cost_table(&descriptors, &dist)?;
    if let Some(out) = &cli.out {
        fs::create_dir_all(out)?;
        let path = out.join("cost_table.csv");
        fs::write(&path, &csv)?;
        // One five-column table per architecture as well.
        for desc in &descriptors {
            let per_desc = fjord_core::cost::cost_table_csv(desc, &dist)?;
            fs::write(out.join(format!("cost_{}.csv", desc.name)), per_desc)?;
        }
        if !cli.quiet {
            println!("cost tables written to {}", out.display());
        }
    } else {
        print!("{csv}");
    }
    Ok(())
}

fn cmd_inspect(
    path: &Path,
    extract: Option<f64>,
    extract_out: Option<&Path>,
) -> fjord_core::Result<()> {
    let model = checkpoint::load_model(path)?;
    let dist = model.dist().clone();
    println!("checkpoint: {}", path.display());
    println!("format version: {}", checkpoint::FORMAT_VERSION);
    println!("input shape: {:?}", model.arch().input_shape);
    println!("layers:");
    for (idx, spec) in model.arch().layers.iter().enumerate() {
        println!(
            "  {idx}: {:?}{}",
            spec.kind,
            if spec.od_eligible {
                "  [width-eligible]"
            } else {
                ""
            }
        );
    }
    println!("candidate widths: {:?}", dist.values());
    println!("per-width parameter counts:");
    for &p in dist.values() {
        let sel = model.prefix_selection(p)?;
        println!(
            "  p={p}: {} parameters",
            model.selection_parameter_count(&sel)
        );
    }
    let bn_keys: Vec<f64> = model
        .layers()
        .iter()
        .find_map(|lp| match lp {
            fjord_core::LayerParams::Batchnorm { stats, .. } => {
                Some(stats.keys().map(|k| k.0).collect())
            }
            _ => None,
        })
        .unwrap_or_default();
    if bn_keys.is_empty() {
        println!("normalization statistics: none (no batchnorm layers)");
    } else {
        println!("normalization statistic keys: {bn_keys:?}");
    }

    if let Some(p) = extract {
        if !dist.contains(p) {
            return Err(Error::WidthNotInDistribution(p));
        }
        let view = extract_submodel(&model, p)?;
        let sliced = materialize_submodel(&view)?;
        let out_path = extract_out
            .map(Path::to_path_buf)
            .unwrap_or_else(|| path.with_extension(format!("p{:02}.ckpt", (p * 100.0) as u32)));
        checkpoint::save_model(&sliced, &out_path)?;
        println!(
            "extracted width-{p} submodel ({} parameters) to {}",
            sliced.full_parameter_count(),
            out_path.display()
        );
    }
    Ok(())
}
