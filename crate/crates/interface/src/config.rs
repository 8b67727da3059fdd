//! Experiment configuration files and seed ranges.

use std::ops::RangeInclusive;
use std::path::Path;

use aird::experiment::ExperimentConfig;

/// Reads a TOML file whose keys mirror [`ExperimentConfig`]. Missing keys
/// keep their defaults; unknown keys are rejected.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, String> {
    toml::from_str(text).map_err(|e| e.message().to_string())
}

/// Parses `a..b` (both ends included), `a..=b` or a single seed.
pub fn parse_seed_range(s: &str) -> Result<RangeInclusive<u64>, String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|_| format!("invalid seed `{t}`"));
    let (lo, hi) = match s.split_once("..") {
        Some((lo, hi)) => (num(lo)?, num(hi.strip_prefix('=').unwrap_or(hi))?),
        None => {
            let v = num(s)?;
            (v, v)
        }
    };
    if lo > hi {
        return Err(format!("empty seed range `{s}`"));
    }
    Ok(lo..=hi)
}
