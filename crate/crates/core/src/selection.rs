//! Entropy-driven choice of the alignment weight λ.
//!
//! Every λ on a grid gets one training run from the same initial model and
//! seed; the selected λ is the one whose run ends with the lowest target
//! entropy. Target labels only feed the accuracy columns of the report.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{format_f64, Dataset};
use crate::error::{MecaError, Result};
use crate::network::MlpModel;
use crate::trainer::{train_run, write_metrics_csv, EpochMetrics, TrainConfig};

/// The λ grid used by default.
pub const DEFAULT_LAMBDA_GRID: [f64; 8] = [0.1, 0.5, 1.0, 2.0, 5.0, 7.0, 10.0, 20.0];

/// Number of trailing epochs averaged into the "final" read-outs.
pub const FINAL_WINDOW: usize = 5;

/// Entropies closer than this count as tied.
pub const ENTROPY_TIE_TOL: f64 = 1e-12;

pub const SELECTION_RULE: &str = "argmin final target entropy";

pub const SUMMARY_HEADER: &str = "lambda,final_e_target,final_target_acc,selected";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRecord {
    pub lambda: f64,
    /// Mean target entropy over the last [`FINAL_WINDOW`] epochs.
    pub final_e_target: f64,
    /// Mean target accuracy over the same window, when labels exist.
    pub final_target_acc: Option<f64>,
    pub metrics_path: Option<PathBuf>,
    pub metrics: Vec<EpochMetrics>,
}

/// A run that diverged or errored; excluded from selection.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepFailure {
    pub lambda: f64,
    pub reason: String,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    /// Successful runs in grid order.
    pub records: Vec<SweepRecord>,
    pub failures: Vec<SweepFailure>,
    pub selected_lambda: f64,
    pub selection_rule: &'static str,
}

/// Where and how a sweep runs.
#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// Worker threads; `0` or `1` runs serially.
    pub jobs: usize,
    /// When set, each run's metrics CSV is written here.
    pub out_dir: Option<PathBuf>,
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(MecaError::ConfigInvalid("lambda grid is empty".into()));
    }
    if grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(MecaError::ConfigInvalid(format!(
            "lambda grid {grid:?} must hold positive finite values"
        )));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MecaError::ConfigInvalid(format!(
            "lambda grid {grid:?} must be strictly increasing"
        )));
    }
    Ok(())
}

fn trailing_mean(values: impl DoubleEndedIterator<Item = f64>) -> f64 {
    let tail: Vec<f64> = values.rev().take(FINAL_WINDOW).collect();
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// `(final entropy, final accuracy)` of a metric trace.
pub fn final_readout(metrics: &[EpochMetrics]) -> Option<(f64, Option<f64>)> {
    if metrics.is_empty() {
        return None;
    }
    let e = trailing_mean(metrics.iter().map(|m| m.e_target));
    let acc = if metrics.iter().all(|m| m.target_accuracy.is_some()) {
        Some(trailing_mean(
            metrics.iter().map(|m| m.target_accuracy.unwrap()),
        ))
    } else {
        None
    };
    Some((e, acc))
}

/// λ with the smallest final entropy; near-ties go to the smaller λ. The
/// result does not depend on record order.
pub fn select_lambda(records: &[SweepRecord]) -> Option<f64> {
    let mut sorted: Vec<&SweepRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    let mut best = *sorted.first()?;
    for r in &sorted[1..] {
        if r.final_e_target < best.final_e_target - ENTROPY_TIE_TOL {
            best = r;
        }
    }
    Some(best.lambda)
}

fn metrics_file_name(lambda: f64) -> String {
    format!("metrics_lambda_{lambda}.csv")
}

/// Runs one training per λ. Each run starts from a clone of `initial` and
/// uses `base_config` with only λ replaced.
pub fn sweep(
    base_config: &TrainConfig,
    lambda_grid: &[f64],
    initial: &MlpModel,
    source: &Dataset,
    target: &Dataset,
    options: &SweepOptions,
) -> Result<SweepResult> {
    validate_grid(lambda_grid)?;
    base_config.validate()?;
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir)?;
    }

    let run_one = |&lambda: &f64| -> Result<std::result::Result<SweepRecord, SweepFailure>> {
        let config = TrainConfig {
            lambda_or_gamma: lambda,
            ..base_config.clone()
        };
        let outcome = match train_run(initial.clone(), source, target, &config) {
            Ok(run) => run,
            Err(e) if e.is_numerical() => {
                return Ok(Err(SweepFailure {
                    lambda,
                    reason: e.to_string(),
                    metrics: Vec::new(),
                }))
            }
            Err(e) => return Err(e),
        };
        let metrics_path = match &options.out_dir {
            Some(dir) => {
                let p = dir.join(metrics_file_name(lambda));
                write_metrics_csv(&outcome.metrics, &p)?;
                Some(p)
            }
            None => None,
        };
        if let Some(err) = outcome.divergence_error() {
            return Ok(Err(SweepFailure {
                lambda,
                reason: err.to_string(),
                metrics: outcome.metrics,
            }));
        }
        let (final_e_target, final_target_acc) =
            final_readout(&outcome.metrics).expect("at least one epoch completed");
        Ok(Ok(SweepRecord {
            lambda,
            final_e_target,
            final_target_acc,
            metrics_path,
            metrics: outcome.metrics,
        }))
    };

    let outcomes: Vec<_> = if options.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.jobs)
            .build()
            .map_err(|e| MecaError::ConfigInvalid(format!("thread pool: {e}")))?;
        pool.install(|| lambda_grid.par_iter().map(run_one).collect())
    } else {
        lambda_grid.iter().map(run_one).collect()
    };

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o? {
            Ok(r) => records.push(r),
            Err(f) => failures.push(f),
        }
    }
    let selected_lambda =
        select_lambda(&records).ok_or(MecaError::InsufficientRecords { needed: 1, got: 0 })?;
    Ok(SweepResult {
        records,
        failures,
        selected_lambda,
        selection_rule: SELECTION_RULE,
    })
}

/// Best accuracy over the grid minus the accuracy at the selected λ.
pub fn selection_gap(result: &SweepResult) -> Result<f64> {
    let with_acc: Vec<(f64, f64)> = result
        .records
        .iter()
        .filter_map(|r| r.final_target_acc.map(|a| (r.lambda, a)))
        .collect();
    if with_acc.len() < 2 {
        return Err(MecaError::InsufficientRecords {
            needed: 2,
            got: with_acc.len(),
        });
    }
    let best = with_acc
        .iter()
        .fold(f64::NEG_INFINITY, |m, &(_, a)| m.max(a));
    let at_selected = with_acc
        .iter()
        .find(|&&(l, _)| l == result.selected_lambda)
        .map(|&(_, a)| a)
        .ok_or(MecaError::InsufficientRecords {
            needed: 2,
            got: with_acc.len(),
        })?;
    Ok((best - at_selected).max(0.0))
}

/// Writes the sweep summary, failed runs included with their partial
/// read-outs (`NaN` when nothing completed) and `selected = 0`.
pub fn write_summary_csv(result: &SweepResult, path: &Path) -> Result<()> {
    let mut rows: Vec<(f64, f64, Option<f64>, bool)> = result
        .records
        .iter()
        .map(|r| {
            (
                r.lambda,
                r.final_e_target,
                r.final_target_acc,
                r.lambda == result.selected_lambda,
            )
        })
        .collect();
    for f in &result.failures {
        let (e, acc) = final_readout(&f.metrics).unwrap_or((f64::NAN, None));
        rows.push((f.lambda, e, acc, false));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{SUMMARY_HEADER}")?;
    for (lambda, e, acc, selected) in rows {
        writeln!(
            w,
            "{},{},{},{}",
            format_f64(lambda),
            format_f64(e),
            acc.map_or_else(|| "NaN".to_string(), format_f64),
            u8::from(selected)
        )?;
    }
    w.flush()?;
    Ok(())
}
