//! Batch runs over a range of seeds, with metric files per seed.

use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use aird::experiment::{aggregate, aggregate_csv, Experiment, ExperimentConfig, ExperimentSummary, MetricsRecord};

pub fn metrics_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}.csv"))
}

pub fn timing_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}.timing.csv"))
}

pub fn summary_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}.json"))
}

fn write(path: &Path, contents: &str) -> Result<(), String> {
    std::fs::write(path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn write_seed(out: &Path, config: &ExperimentConfig, metrics: &MetricsRecord) -> Result<(), String> {
    write(&metrics_path(out, config.seed), &metrics.to_csv())?;
    write(&timing_path(out, config.seed), &metrics.timing_csv())?;
    let summary = serde_json::to_string_pretty(&ExperimentSummary::new(config, metrics)).map_err(|e| e.to_string())?;
    write(&summary_path(out, config.seed), &summary)
}

/// Runs one seed with the simulated designer. On failure the metrics
/// recorded so far are still written.
pub fn run_seed(config: &ExperimentConfig, out: &Path) -> Result<MetricsRecord, String> {
    let mut exp = Experiment::new(config.clone()).map_err(|e| format!("seed {}: {e}", config.seed))?;
    let mut designer = exp.designer();
    let outcome = (|| {
        while !exp.is_finished() {
            let q = exp.next_query()?;
            let a = designer.answer(q.expectations.view())?;
            exp.answer(&q, a)?;
        }
        Ok::<_, aird::Error>(())
    })();
    write_seed(out, config, exp.metrics())?;
    match outcome {
        Ok(()) => Ok(exp.into_metrics()),
        Err(e) => Err(format!("seed {} failed after {} queries (partial metrics written): {e}", config.seed, exp.answered())),
    }
}

/// Runs every seed in `seeds` and writes `aggregate.csv` (mean and standard
/// error per step across seeds).
pub fn run_seeds(
    base: &ExperimentConfig,
    seeds: RangeInclusive<u64>,
    out: &Path,
    mut progress: impl FnMut(u64, &MetricsRecord),
) -> Result<Vec<MetricsRecord>, String> {
    base.validate().map_err(|e| format!("invalid configuration: {e}"))?;
    std::fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    let mut records = Vec::new();
    for seed in seeds {
        let config = ExperimentConfig { seed, ..base.clone() };
        let metrics = run_seed(&config, out)?;
        progress(seed, &metrics);
        records.push(metrics);
    }
    write(&out.join("aggregate.csv"), &aggregate_csv(&aggregate(&records)))?;
    Ok(records)
}
