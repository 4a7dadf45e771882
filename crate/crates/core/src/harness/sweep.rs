use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::pipeline::{run_experiment, RunOptions, RunOutcome};
use crate::ensemble::{mean_std, FederationReport, ReportSummary, METHODS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepStat {
    pub mean: f64,
    pub std: f64,
}

impl SweepStat {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMethod {
    /// Over per-seed client means.
    pub accuracy: SweepStat,
    pub win_rate: SweepStat,
}

/// Aggregate over several seeds of one config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub seeds: Vec<u64>,
    pub metric: String,
    pub methods: BTreeMap<String, SweepMethod>,
    pub mean_size: SweepStat,
    pub mean_ess: SweepStat,
    pub rho: SweepStat,
}

impl SweepSummary {
    pub fn from_reports(seeds: &[u64], reports: &[FederationReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Validation("sweep produced no reports".into()))?;
        let pick = |f: &dyn Fn(&FederationReport) -> f64| SweepStat::of(&reports.iter().map(f).collect::<Vec<_>>());
        let methods = METHODS
            .iter()
            .map(|&name| {
                (
                    name.to_string(),
                    SweepMethod {
                        accuracy: pick(&|r| r.method(name).mean),
                        win_rate: pick(&|r| r.method(name).win_rate),
                    },
                )
            })
            .collect();
        Ok(Self {
            seeds: seeds.to_vec(),
            metric: first.metric.name().to_string(),
            methods,
            mean_size: pick(&|r| r.ess.mean_size),
            mean_ess: pick(&|r| r.ess.mean_ess),
            rho: pick(&|r| r.correlation.rho),
        })
    }

    /// `method,mean,std,win_rate_mean,win_rate_std`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,mean,std,win_rate_mean,win_rate_std\n");
        for name in METHODS {
            let m = &self.methods[name];
            let _ = writeln!(
                out,
                "{name},{:.6},{:.6},{:.6},{:.6}",
                m.accuracy.mean, m.accuracy.std, m.win_rate.mean, m.win_rate.std
            );
        }
        out
    }
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

/// One run per seed under `<output>/seed_<s>/`, then `sweep.json` and
/// `sweep.csv` at the top level.
pub fn run_sweep(
    config: &ExperimentConfig,
    seeds: &[u64],
    options: &RunOptions,
) -> Result<(SweepSummary, Vec<RunOutcome>)> {
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let root = options.output_dir.clone().unwrap_or_else(|| config.output_dir.clone());
    super::pipeline::ensure_writable(&root)?;
    let mut outcomes = Vec::with_capacity(seeds.len());
    for &s in seeds {
        log::info!("sweep: seed {s}");
        let run_options = RunOptions {
            output_dir: Some(seed_dir(&root, s)),
            ..options.clone()
        };
        outcomes.push(run_experiment(&config.with_seed(s), &run_options)?);
    }
    let reports: Vec<FederationReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    let summary = SweepSummary::from_reports(seeds, &reports)?;
    let json = root.join("sweep.json");
    std::fs::write(&json, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&json, e))?;
    let csv = root.join("sweep.csv");
    std::fs::write(&csv, summary.to_csv()).map_err(|e| Error::io(&csv, e))?;
    Ok((summary, outcomes))
}

fn render_report(title: &str, report: &ReportSummary, out: &mut String) {
    let _ = writeln!(out, "{title} ({}, {} clients)", report.metric, report.clients);
    for name in METHODS {
        let Some(m) = report.methods.get(name) else {
            continue;
        };
        let _ = writeln!(
            out,
            "  {name:<7} {:6.2} ± {:5.2}   win rate {:5.1}%",
            100.0 * m.mean,
            100.0 * m.std,
            m.win_rate
        );
    }
    let _ = writeln!(
        out,
        "  ensemble size {:.2}, ESS {:.2} (ratio {:.3}), fallbacks {}",
        report.ess.mean_size, report.ess.mean_ess, report.ess.ratio, report.fallback_count
    );
    let _ = writeln!(
        out,
        "  selection vs home frequency: rho {:.3}{}",
        report.spearman_rho,
        if report.spearman_degenerate { " (degenerate)" } else { "" }
    );
}

/// Text rendering of a run directory, a sweep directory, or a `summary.json`.
pub fn render_summaries(path: &Path) -> Result<String> {
    let read = |p: &Path| -> Result<ReportSummary> {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Ok(serde_json::from_str(&text)?)
    };
    let mut out = String::new();
    if path.is_file() {
        render_report(&path.display().to_string(), &read(path)?, &mut out);
        return Ok(out);
    }
    let single = path.join("summary.json");
    if single.is_file() {
        render_report(&path.display().to_string(), &read(&single)?, &mut out);
        return Ok(out);
    }
    let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut runs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("summary.json").is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(Error::Data(format!("{}: no summary.json found", path.display())));
    }
    for run in &runs {
        render_report(&run.display().to_string(), &read(&run.join("summary.json"))?, &mut out);
    }
    let sweep = path.join("sweep.json");
    if sweep.is_file() {
        let text = std::fs::read_to_string(&sweep).map_err(|e| Error::io(&sweep, e))?;
        let s: SweepSummary = serde_json::from_str(&text)?;
        let _ = writeln!(out, "sweep over seeds {:?}", s.seeds);
        for name in METHODS {
            let m = &s.methods[name];
            let _ = writeln!(
                out,
                "  {name:<7} {:6.2} ± {:5.2}",
                100.0 * m.accuracy.mean,
                100.0 * m.accuracy.std
            );
        }
    }
    Ok(out)
}
