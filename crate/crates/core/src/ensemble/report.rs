use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::decision::{uniform_vote, EnsembleDecision};
use super::metrics::{mean_std, spearman, win_rate, Metric};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const METHODS: [&str; 3] = ["local", "global", "feddes"];
pub const ESS_FORMULA: &str = "inverse_simpson";

/// Local and Global-Ensemble predictions for one client's queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub local: Vec<usize>,
    pub global: Vec<usize>,
}

/// `predictions[q][m]` is model `m`'s label for query `q`. Local votes
/// uniformly over `local_models`, Global over the whole pool.
pub fn run_baselines(predictions: &[Vec<usize>], local_models: &[usize], n_classes: usize) -> Result<Baselines> {
    if local_models.is_empty() {
        return Err(Error::Validation("client owns no classifiers".into()));
    }
    let local = predictions
        .iter()
        .map(|p| {
            let own: Vec<usize> = local_models.iter().map(|&m| p[m]).collect();
            uniform_vote(&own, n_classes)
        })
        .collect();
    let global = predictions.iter().map(|p| uniform_vote(p, n_classes)).collect();
    Ok(Baselines { local, global })
}

/// Everything needed to score one client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientEvaluation {
    pub client: usize,
    pub labels: Vec<usize>,
    pub baselines: Baselines,
    pub decisions: Vec<EnsembleDecision>,
}

impl ClientEvaluation {
    pub fn feddes(&self) -> Vec<usize> {
        self.decisions.iter().map(|d| d.label).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRow {
    pub client: usize,
    pub n_test: usize,
    pub local: f64,
    pub global: f64,
    pub feddes: f64,
    pub mean_size: f64,
    pub mean_ess: f64,
    pub fallback_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub mean: f64,
    pub std: f64,
    /// Percent of clients where the method strictly beats Local.
    pub win_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssSummary {
    pub mean_size: f64,
    pub mean_ess: f64,
    /// `mean_ess / mean_size`.
    pub ratio: f64,
    pub formula: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPair {
    pub classifier: usize,
    pub home_client: usize,
    pub class: usize,
    pub home_frequency: f64,
    /// Mean score over every client's test samples of `class`.
    pub mean_score: Option<f64>,
    /// Same, leaving out the home client's own test samples.
    pub external_mean_score: Option<f64>,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pairs: Vec<CorrelationPair>,
    /// Spearman ρ over pairs with a score; 0 when undefined.
    pub rho: f64,
    pub degenerate: bool,
    pub external_rho: f64,
    pub external_degenerate: bool,
}

/// Spearman correlation between each `(classifier, class)` pair's mean
/// competence score on test samples of that class and the class frequency
/// in the classifier's home training split.
///
/// `home_frequency` is `M x C`; `home_client[m]` owns classifier `m`.
pub fn selection_frequency_correlation(
    clients: &[ClientEvaluation],
    home_client: &[usize],
    home_frequency: &Matrix,
) -> CorrelationReport {
    let (m_total, c_total) = home_frequency.shape();
    let mut sum = Matrix::zeros(m_total, c_total);
    let mut count = vec![vec![0usize; c_total]; m_total];
    let mut ext_sum = Matrix::zeros(m_total, c_total);
    let mut ext_count = vec![vec![0usize; c_total]; m_total];
    for eval in clients {
        for (d, &y) in eval.decisions.iter().zip(&eval.labels) {
            for (m, &q) in d.selection.scores.iter().enumerate() {
                sum.set(m, y, sum.get(m, y) + q);
                count[m][y] += 1;
                if home_client[m] != eval.client {
                    ext_sum.set(m, y, ext_sum.get(m, y) + q);
                    ext_count[m][y] += 1;
                }
            }
        }
    }
    let mut pairs = Vec::with_capacity(m_total * c_total);
    for m in 0..m_total {
        for c in 0..c_total {
            let mean = |s: &Matrix, n: usize| (n > 0).then(|| s.get(m, c) / n as f64);
            pairs.push(CorrelationPair {
                classifier: m,
                home_client: home_client[m],
                class: c,
                home_frequency: home_frequency.get(m, c),
                mean_score: mean(&sum, count[m][c]),
                external_mean_score: mean(&ext_sum, ext_count[m][c]),
                samples: count[m][c],
            });
        }
    }
    let rho_of = |pick: &dyn Fn(&CorrelationPair) -> Option<f64>| {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs
            .iter()
            .filter_map(|p| pick(p).map(|s| (s, p.home_frequency)))
            .unzip();
        match spearman(&x, &y) {
            Some(r) => (r, false),
            None => (0.0, true),
        }
    };
    let (rho, degenerate) = rho_of(&|p| p.mean_score);
    let (external_rho, external_degenerate) = rho_of(&|p| p.external_mean_score);
    CorrelationReport {
        pairs,
        rho,
        degenerate,
        external_rho,
        external_degenerate,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationReport {
    pub metric: Metric,
    pub clients: Vec<ClientRow>,
    pub methods: BTreeMap<String, MethodSummary>,
    pub ess: EssSummary,
    pub correlation: CorrelationReport,
    /// Queries where no classifier cleared the threshold.
    pub fallback_count: usize,
    /// Fallback queries whose label differs from the Global vote; 0 by construction.
    pub fallback_mismatches: usize,
}

impl FederationReport {
    pub fn assemble(metric: Metric, clients: &[ClientEvaluation], correlation: CorrelationReport) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::Validation("report over zero clients".into()));
        }
        let mut rows = Vec::with_capacity(clients.len());
        let (mut size_total, mut ess_total, mut n_decisions) = (0.0, 0.0, 0usize);
        let (mut fallback_count, mut fallback_mismatches) = (0, 0);
        for eval in clients {
            if eval.decisions.len() != eval.labels.len()
                || eval.baselines.local.len() != eval.labels.len()
                || eval.baselines.global.len() != eval.labels.len()
            {
                return Err(Error::Validation(format!(
                    "client {} has mismatched prediction counts",
                    eval.client
                )));
            }
            let n = eval.decisions.len().max(1) as f64;
            let sizes: f64 = eval.decisions.iter().map(|d| d.selection.size() as f64).sum();
            let esses: f64 = eval.decisions.iter().map(|d| d.selection.ess()).sum();
            let fallbacks: Vec<&EnsembleDecision> = eval.decisions.iter().filter(|d| d.selection.fallback).collect();
            fallback_count += fallbacks.len();
            fallback_mismatches += fallbacks
                .iter()
                .filter(|d| d.label != eval.baselines.global[d.query])
                .count();
            size_total += sizes;
            ess_total += esses;
            n_decisions += eval.decisions.len();
            rows.push(ClientRow {
                client: eval.client,
                n_test: eval.labels.len(),
                local: metric.score(&eval.baselines.local, &eval.labels),
                global: metric.score(&eval.baselines.global, &eval.labels),
                feddes: metric.score(&eval.feddes(), &eval.labels),
                mean_size: sizes / n,
                mean_ess: esses / n,
                fallback_rate: fallbacks.len() as f64 / n,
            });
        }
        let column = |f: fn(&ClientRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
        let local = column(|r| r.local);
        let mut methods = BTreeMap::new();
        for (name, values) in [
            ("local", local.clone()),
            ("global", column(|r| r.global)),
            ("feddes", column(|r| r.feddes)),
        ] {
            let (mean, std) = mean_std(&values);
            methods.insert(
                name.to_string(),
                MethodSummary {
                    mean,
                    std,
                    win_rate: win_rate(&values, &local)?,
                },
            );
        }
        let nd = n_decisions.max(1) as f64;
        let mean_size = size_total / nd;
        let mean_ess = ess_total / nd;
        Ok(Self {
            metric,
            clients: rows,
            methods,
            ess: EssSummary {
                mean_size,
                mean_ess,
                ratio: if mean_size > 0.0 { mean_ess / mean_size } else { 0.0 },
                formula: ESS_FORMULA.to_string(),
            },
            correlation,
            fallback_count,
            fallback_mismatches,
        })
    }

    pub fn method(&self, name: &str) -> &MethodSummary {
        &self.methods[name]
    }

    pub fn client_csv(&self) -> String {
        let mut out = String::from("client,n_test,local,global,feddes,mean_size,mean_ess,fallback_rate\n");
        for r in &self.clients {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.client, r.n_test, r.local, r.global, r.feddes, r.mean_size, r.mean_ess, r.fallback_rate
            );
        }
        out
    }

    pub fn correlation_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut out =
            String::from("classifier,home_client,class,home_frequency,mean_score,external_mean_score,samples\n");
        for p in &self.correlation.pairs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.classifier,
                p.home_client,
                p.class,
                p.home_frequency,
                opt(p.mean_score),
                opt(p.external_mean_score),
                p.samples
            );
        }
        out
    }

    pub fn ess_csv(&self) -> String {
        format!(
            "mean_ensemble_size,mean_ess,ess_over_ensemble_size\n{},{},{}\n",
            self.ess.mean_size, self.ess.mean_ess, self.ess.ratio
        )
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            metric: self.metric.name().to_string(),
            clients: self.clients.len(),
            methods: self.methods.clone(),
            ess: self.ess.clone(),
            spearman_rho: self.correlation.rho,
            spearman_degenerate: self.correlation.degenerate,
            external_spearman_rho: self.correlation.external_rho,
            fallback_count: self.fallback_count,
            fallback_mismatches: self.fallback_mismatches,
        }
    }

    /// Pretty JSON of [`ReportSummary`].
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary())?)
    }
}

/// The contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub metric: String,
    pub clients: usize,
    pub methods: BTreeMap<String, MethodSummary>,
    pub ess: EssSummary,
    pub spearman_rho: f64,
    pub spearman_degenerate: bool,
    pub external_spearman_rho: f64,
    pub fallback_count: usize,
    pub fallback_mismatches: usize,
}
