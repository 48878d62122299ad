use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mpn_core::gradcheck::{run_suite, GradTarget, Tolerance};
use mpn_core::harness::{self, Dataset, EvalProtocol, Model, SyntheticSpec};
use mpn_core::sampling::{count_prototype_tuples, count_tuples};

#[derive(Parser)]
#[command(name = "mpn", version, about = "Metric-learning losses, gradient checks and synthetic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file and write metrics into a directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved model on a dataset file.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate among training identities instead of held-out ones.
        #[arg(long)]
        seen_ids: bool,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// Target name, or `all`.
        #[arg(long, default_value = "all")]
        loss: String,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Closed-form tuple counts for a P×K batch.
    CountTuples {
        #[arg(long)]
        p: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n: usize,
        /// Count prototype tuples instead of instance tuples.
        #[arg(long)]
        prototype: bool,
    },
    /// Generate a synthetic dataset from a spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Reads `key = value` synthetic-data settings over the defaults.
fn parse_spec(text: &str) -> mpn_core::Result<SyntheticSpec> {
    let mut cfg = harness::TrainConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |key: &str, msg: String| mpn_core::Error::Config { line: i + 1, key: key.to_string(), msg };
        let (key, value) = line.split_once('=').ok_or_else(|| err(line, "expected `key = value`".into()))?;
        let (key, value) = (key.trim(), value.trim());
        let key = if key == "seed" { "data_seed" } else { key };
        const SPEC_KEYS: [&str; 8] =
            ["num_ids", "test_ids", "samples_per_id", "raw_dim", "cluster_scale", "noise_scale", "nuisance", "data_seed"];
        if !SPEC_KEYS.contains(&key) {
            return Err(err(key, "unknown key".into()));
        }
        cfg.set(key, value).map_err(|m| err(key, m))?;
    }
    Ok(cfg.data)
}

fn run(cli: Cli) -> mpn_core::Result<bool> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train { config, out: dir } => {
            let outcome = harness::run_experiment(&config, &dir)?;
            let r = &outcome.final_eval;
            writeln!(out, "epochs {}", outcome.history.len())?;
            writeln!(out, "rank1 {}", r.rank1)?;
            writeln!(out, "mAP {}", r.map)?;
            writeln!(out, "outputs {}", dir.display())?;
        }
        Command::Eval { params, data, seen_ids } => {
            let model = Model::read_text(BufReader::new(fs::File::open(params)?))?;
            let dataset = Dataset::read_text(BufReader::new(fs::File::open(data)?))?;
            let protocol = if seen_ids || dataset.test_ids == 0 { EvalProtocol::SeenIds } else { EvalProtocol::UnseenIds };
            writeln!(out, "protocol {}", protocol.name())?;
            harness::evaluate(&model, &dataset, protocol)?.write_text(&mut out)?;
        }
        Command::Gradcheck { loss, trials, seed } => {
            let targets: Vec<GradTarget> =
                if loss == "all" { GradTarget::ALL.to_vec() } else { vec![loss.parse()?] };
            let mut all_ok = true;
            for t in targets {
                let report = run_suite(t, trials, seed, Tolerance::default())?;
                write!(out, "{report}")?;
                all_ok &= report.passed();
            }
            return Ok(all_ok);
        }
        Command::CountTuples { p, k, n, prototype } => {
            let count = if prototype { count_prototype_tuples(p, k, n)? } else { count_tuples(p, k, n)? };
            writeln!(out, "{count}")?;
        }
        Command::GenData { spec, out: path } => {
            let spec = parse_spec(&fs::read_to_string(spec)?)?;
            let dataset = harness::generate_synthetic(&spec)?;
            let mut file = BufWriter::new(fs::File::create(&path)?);
            dataset.write_text(&mut file)?;
            file.flush()?;
            writeln!(out, "samples {} ids {} test_ids {}", dataset.len(), dataset.num_ids, dataset.test_ids)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
