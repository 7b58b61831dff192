//! Ablation harness: parse a grid of run configurations, validate every
//! block before any training starts, and render the comparison summary.
//!
//! The harness is deliberately free of training logic — the caller maps each
//! parsed run to a [`RunOutcome`] however it likes — so grid handling and
//! summary rendering stay testable in microseconds.

use crate::io::TrainSpec;
use crate::metrics::mean_sd;
use crate::{Error, Result};
use std::fmt::Write as _;

/// One configuration to train and evaluate, tagged with a unique id that
/// also names its output files.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub config_id: String,
    pub spec: TrainSpec,
}

fn check_config_id(id: &str) -> Result<()> {
    if id.is_empty() {
        return Err(Error::Config("config_id must not be empty".into()));
    }
    if !id
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        return Err(Error::Config(format!(
            "config_id '{id}' may only use letters, digits, '_' and '-' \
             (it names output files)"
        )));
    }
    Ok(())
}

/// Parse a grid file: blocks of `key=value` lines separated by blank lines,
/// each block a full run spec plus a `config_id`. Every block is validated
/// before the first is returned, and duplicate ids are rejected, so nothing
/// starts training unless the whole grid is sound.
pub fn parse_grid(text: &str) -> Result<Vec<AblationRun>> {
    let mut runs: Vec<AblationRun> = Vec::new();
    let mut block: Vec<&str> = Vec::new();
    let mut block_start = 0usize;

    let flush = |block: &mut Vec<&str>, start: usize, runs: &mut Vec<AblationRun>| -> Result<()> {
        if block.is_empty() {
            return Ok(());
        }
        let mut config_id: Option<String> = None;
        let mut spec_lines: Vec<&str> = Vec::new();
        for line in block.iter() {
            match line.trim().strip_prefix("config_id") {
                Some(rest) if rest.trim_start().starts_with('=') => {
                    let value = rest.trim_start()[1..].trim().to_string();
                    if config_id.is_some() {
                        return Err(Error::Config(format!(
                            "block at line {start}: duplicate key 'config_id'"
                        )));
                    }
                    config_id = Some(value);
                }
                _ => spec_lines.push(line),
            }
        }
        let Some(id) = config_id else {
            return Err(Error::Config(format!(
                "block at line {start} has no config_id"
            )));
        };
        check_config_id(&id).map_err(|e| Error::Config(format!("block at line {start}: {e}")))?;
        let spec = TrainSpec::parse(&spec_lines.join("\n"))
            .map_err(|e| Error::Config(format!("config '{id}': {e}")))?;
        if runs.iter().any(|r| r.config_id == id) {
            return Err(Error::Config(format!("duplicate config_id '{id}'")));
        }
        runs.push(AblationRun {
            config_id: id,
            spec,
        });
        block.clear();
        Ok(())
    };

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            flush(&mut block, block_start, &mut runs)?;
        } else {
            if block.is_empty() {
                block_start = lineno + 1;
            }
            block.push(raw);
        }
    }
    flush(&mut block, block_start, &mut runs)?;
    if runs.is_empty() {
        return Err(Error::Config("grid file defines no configurations".into()));
    }
    Ok(runs)
}

/// Canonical rendering of a grid (inverse of [`parse_grid`]).
pub fn render_grid(runs: &[AblationRun]) -> String {
    let mut out = String::new();
    for (i, run) in runs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "config_id={}", run.config_id);
        out.push_str(&run.spec.render());
    }
    out
}

/// Evaluation result of one trained configuration: per-image metrics for the
/// final clone, plus the per-image PSNR of every clone's output.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config_id: String,
    pub rmse: Vec<f64>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    /// `psnr_per_clone[t]` holds clone `t+1`'s per-image PSNR.
    pub psnr_per_clone: Vec<Vec<f64>>,
}

/// Render the comparison table: one row per configuration with mean and
/// population-SD columns for PSNR, SSIM and RMSE, then the seed-set mean
/// PSNR of each clone's output. Configurations with fewer clones than the
/// widest one leave the extra cells blank.
pub fn summary_csv(outcomes: &[RunOutcome]) -> String {
    let max_clones = outcomes
        .iter()
        .map(|o| o.psnr_per_clone.len())
        .max()
        .unwrap_or(0);
    let mut out = String::from("config_id,psnr_mean,psnr_sd,ssim_mean,ssim_sd,rmse_mean,rmse_sd");
    for t in 1..=max_clones {
        let _ = write!(out, ",psnr_clone_{t}");
    }
    out.push('\n');
    for o in outcomes {
        let (pm, ps) = mean_sd(&o.psnr);
        let (sm, ss) = mean_sd(&o.ssim);
        let (rm, rs) = mean_sd(&o.rmse);
        let _ = write!(out, "{},{pm},{ps},{sm},{ss},{rm},{rs}", o.config_id);
        for t in 0..max_clones {
            match o.psnr_per_clone.get(t) {
                Some(vals) => {
                    let (m, _) = mean_sd(vals);
                    let _ = write!(out, ",{m}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}
