//! Config file in, metric files out.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

use super::config::TrainConfig;
use super::data::{generate_synthetic, Dataset};
use super::train::{train, EpochRecord, TrainOutcome};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_EVAL_FILE: &str = "final_eval.txt";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";
pub const MODEL_FILE: &str = "model.txt";
pub const HISTOGRAM_MEANS_FILE: &str = "histogram_means.csv";

/// The dataset a config describes: its data file, or freshly generated samples.
pub fn load_dataset(config: &TrainConfig) -> Result<Dataset> {
    match &config.data_file {
        Some(path) => Dataset::read_text(std::io::BufReader::new(fs::File::open(path)?)),
        None => generate_synthetic(&config.data),
    }
}

/// Reads, trains and writes every output of one run into `out_dir`.
pub fn run_experiment(config_path: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    let text = fs::read_to_string(config_path)?;
    let config = TrainConfig::parse_text(&text)?;
    run_config(&config, out_dir)
}

pub fn run_config(config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(RESOLVED_CONFIG_FILE), config.to_text())?;
    let dataset = load_dataset(config)?;
    let outcome = train(config, &dataset)?;
    write_outputs(&outcome, out_dir)?;
    Ok(outcome)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

pub fn write_outputs(outcome: &TrainOutcome, out_dir: &Path) -> Result<()> {
    let mut metrics = create(&out_dir.join(METRICS_FILE))?;
    writeln!(metrics, "{}", EpochRecord::CSV_HEADER)?;
    for rec in &outcome.history {
        writeln!(metrics, "{}", rec.csv_row())?;
    }
    metrics.flush()?;

    let mut eval = create(&out_dir.join(FINAL_EVAL_FILE))?;
    outcome.final_eval.write_text(&mut eval)?;
    eval.flush()?;

    let mut means = create(&out_dir.join(HISTOGRAM_MEANS_FILE))?;
    writeln!(means, "checkpoint,pairs,mean_original,mean_meta")?;
    for (tag, hist) in &outcome.histograms {
        let mut out = create(&out_dir.join(format!("histogram_{tag}.csv")))?;
        hist.write_csv(&mut out)?;
        out.flush()?;
        writeln!(means, "{tag},{},{},{}", hist.pairs, hist.mean_original, hist.mean_meta)?;
    }
    means.flush()?;

    let mut model = create(&out_dir.join(MODEL_FILE))?;
    outcome.model.write_text(&mut model)?;
    model.flush()?;
    Ok(())
}
