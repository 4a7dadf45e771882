use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{ArchitectureAssignment, DatasetSpec, ExperimentConfig, FeatureRows, SplitChoice};
use super::data::load_external_csv;
use super::manifest::{RunManifest, StageStatus};
use crate::basepool::{
    assign_architectures, exchange_models, oof_predictions, train_classifier, Calibration, ClassifierModel,
    ClassifierPool, ExchangeLog,
};
use crate::datagen::{exdir_partition, generate_gaussian_mixture, Dataset, ExDirConfig, GaussianMixture, Partition};
use crate::ensemble::{
    decide_and_vote, run_baselines, selection_frequency_correlation, ClientEvaluation, FederationReport,
};
use crate::error::{Error, Result};
use crate::graphbuild::{build_graph, classifier_features, embed, DecisionSpace, HeteroGraph, NodeRole};
use crate::metalearner::{train_metalearner, MetaLearner, TrainingHistory};
use crate::numkernel::{argmax, seed, Matrix};

pub const STAGE_DATA: &str = "data";
pub const STAGE_LOCAL: &str = "local_training";
pub const STAGE_EXCHANGE: &str = "exchange";
pub const STAGE_GRAPH: &str = "graph";
pub const STAGE_META: &str = "meta_learning";
pub const STAGE_EVALUATION: &str = "evaluation";
pub const STAGE_REPORTS: &str = "reports";

/// Cache files under `<output>/cache/`, in pipeline order.
pub const CACHE_FILES: [&str; 3] = ["local_training.json", "graph.json", "meta_learning.json"];

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Worker threads; 0 means one per core.
    pub workers: usize,
    /// Overrides the config's output directory.
    pub output_dir: Option<PathBuf>,
    /// Writes `decisions.csv` with every query's scores and weights.
    pub dump_decisions: bool,
    /// Ignores existing stage caches.
    pub fresh: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            output_dir: None,
            dump_decisions: false,
            fresh: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalTraining {
    pub client: usize,
    pub models: Vec<ClassifierModel>,
    /// Out-of-fold logits on this client's training split, one per model.
    pub oof_logits: Vec<Matrix>,
    pub best_epochs: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClientGraph {
    pub client: usize,
    pub calibrations: Vec<Calibration>,
    /// Training rows then validation rows.
    pub space: DecisionSpace,
    pub graph: HeteroGraph,
    pub test_phi: Matrix,
    pub test_features: Matrix,
    pub test_labels: Vec<usize>,
    /// `test_predictions[q][m]`.
    pub test_predictions: Vec<Vec<usize>>,
    /// Validation and test rows whose predicted label moved under calibration.
    pub calibration_label_changes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClientMeta {
    pub client: usize,
    pub model: MetaLearner,
    pub history: TrainingHistory,
}

#[derive(Serialize, Deserialize)]
struct CacheFile<T> {
    config_hash: String,
    payload: Vec<T>,
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub report: FederationReport,
    pub manifest: RunManifest,
    pub evaluations: Vec<ClientEvaluation>,
    pub exchange: ExchangeLog,
    pub partition: Partition,
    pub calibration_label_changes: Vec<usize>,
    pub histories: Vec<TrainingHistory>,
}

fn stage_err(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage,
            source: Box::new(other),
        },
    }
}

fn write_file(root: &Path, relative: &str, contents: &[u8]) -> Result<()> {
    let path = root.join(relative);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

/// Creates `dir` and checks a file can be written there.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

fn read_cache<T: DeserializeOwned>(root: &Path, name: &str, hash: &str) -> Option<Vec<T>> {
    let path = root.join("cache").join(name);
    let text = std::fs::read_to_string(&path).ok()?;
    match serde_json::from_str::<CacheFile<T>>(&text) {
        Ok(c) if c.config_hash == hash => Some(c.payload),
        Ok(_) => {
            log::info!("{}: stale cache (config changed)", path.display());
            None
        }
        Err(e) => {
            log::warn!("{}: unreadable cache: {e}", path.display());
            None
        }
    }
}

fn write_cache<T: Serialize>(root: &Path, name: &str, hash: &str, payload: &[T]) -> Result<()> {
    #[derive(Serialize)]
    struct Borrowed<'a, T> {
        config_hash: &'a str,
        payload: &'a [T],
    }
    let bytes = serde_json::to_vec(&Borrowed {
        config_hash: hash,
        payload,
    })?;
    write_file(root, &format!("cache/{name}"), &bytes)
}

fn remove_caches_from(root: &Path, first: usize) {
    for name in &CACHE_FILES[first..] {
        let _ = std::fs::remove_file(root.join("cache").join(name));
    }
}

/// The dataset named by `config`.
pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    match &config.dataset {
        DatasetSpec::GaussianMixture {
            classes,
            features,
            per_class,
            separation,
        } => generate_gaussian_mixture(
            &GaussianMixture {
                classes: *classes,
                features: *features,
                per_class: *per_class,
                separation: *separation,
            },
            seed::derive(config.seed, &[seed::tag("data")]),
        ),
        DatasetSpec::Csv { path, label_column } => load_external_csv(path, label_column),
    }
}

pub fn partition_dataset(config: &ExperimentConfig, data: &Dataset) -> Result<Partition> {
    exdir_partition(
        data,
        &ExDirConfig {
            classes_per_client: config.partition.classes_per_client,
            alpha: config.partition.alpha,
            seed: seed::derive(config.seed, &[seed::tag("partition")]),
        },
        config.partition.clients,
    )
}

fn train_client(config: &ExperimentConfig, data: &Dataset, partition: &Partition, client: usize) -> Result<LocalTraining> {
    let architectures = assign_architectures(
        &config.base.architectures,
        partition.n_clients,
        config.base.assignment == ArchitectureAssignment::All,
    )?;
    let split = &partition.splits[client];
    let train = data.subset(&split.train);
    let val = data.subset(&split.val);
    let options = config.base.train_options();
    let mut out = LocalTraining {
        client,
        models: Vec::new(),
        oof_logits: Vec::new(),
        best_epochs: Vec::new(),
    };
    for (j, arch) in architectures[client].iter().enumerate() {
        let s = seed::derive(config.seed, &[seed::tag("base"), client as u64, j as u64]);
        let trained = train_classifier(&train, &val, data.n_classes(), arch, &options, s)
            .map_err(|e| Error::Training(format!("client {client}, model {j}: {e}")))?;
        let oof = oof_predictions(&train, &val, data.n_classes(), arch, &options, config.base.folds, s)
            .map_err(|e| Error::Training(format!("client {client}, model {j}: {e}")))?;
        log::info!(
            "client {client} model {j}: best epoch {} of {}",
            trained.best_epoch,
            trained.epochs_run
        );
        out.models.push(trained.model);
        out.oof_logits.push(oof.logits);
        out.best_epochs.push(trained.best_epoch);
    }
    Ok(out)
}

fn stack_rows(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let rows: Vec<&[f64]> = a.iter_rows().chain(b.iter_rows()).collect();
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, a.cols()));
    }
    Matrix::from_rows(&rows)
}

fn block_argmax(phi: &Matrix, pool_size: usize, n_classes: usize) -> Vec<Vec<usize>> {
    phi.iter_rows()
        .map(|row| (0..pool_size).map(|m| argmax(&row[m * n_classes..(m + 1) * n_classes])).collect())
        .collect()
}

fn build_client_graph(
    config: &ExperimentConfig,
    data: &Dataset,
    partition: &Partition,
    base_pool: &ClassifierPool,
    local: &LocalTraining,
    first_global: usize,
) -> Result<ClientGraph> {
    let client = local.client;
    let split = &partition.splits[client];
    let train = data.subset(&split.train);
    let val = data.subset(&split.val);
    let test = data.subset(&split.test);
    let c = data.n_classes();

    let mut pool = base_pool.clone();
    match config.base.calibration_split {
        SplitChoice::Validation => pool.calibrate(&val.features, &val.labels)?,
        SplitChoice::Train => pool.calibrate(&train.features, &train.labels)?,
    }

    let overrides: Vec<(usize, &Matrix)> = local
        .oof_logits
        .iter()
        .enumerate()
        .map(|(j, logits)| (first_global + j, logits))
        .collect();
    let train_phi = embed(&pool, &train.features, &overrides)?;
    let val_phi = embed(&pool, &val.features, &[])?;
    let mut labels = train.labels.clone();
    labels.extend_from_slice(&val.labels);
    let space = DecisionSpace::new(stack_rows(&train_phi, &val_phi)?, labels, c)?;
    let sample_features = stack_rows(&train.features, &val.features)?;
    let mut roles = vec![NodeRole::Train; train.len()];
    roles.extend(std::iter::repeat_n(NodeRole::Validation, val.len()));
    let feature_rows: Vec<usize> = match config.graph.classifier_feature_rows {
        FeatureRows::Train => (0..train.len()).collect(),
        FeatureRows::TrainVal => (0..space.len()).collect(),
    };
    let cls_features = classifier_features(&space, &feature_rows);
    let graph = build_graph(&space, &sample_features, roles, cls_features, &config.graph.graph_config())?;

    let test_phi = embed(&pool, &test.features, &[])?;
    let test_predictions = block_argmax(&test_phi, pool.len(), c);

    let mut changes = 0;
    for entry in &pool.entries {
        let m = entry.global_index;
        for (features, phi) in [(&val.features, &val_phi), (&test.features, &test_phi)] {
            let raw = entry.model.logits(features)?.argmax_rows();
            changes += raw
                .iter()
                .zip(phi.iter_rows())
                .filter(|(&r, row)| argmax(&row[m * c..(m + 1) * c]) != r)
                .count();
        }
    }
    if changes > 0 {
        log::warn!("client {client}: calibration moved {changes} predicted labels");
    }

    Ok(ClientGraph {
        client,
        calibrations: pool.entries.iter().map(|e| e.calibration).collect(),
        space,
        graph,
        test_phi,
        test_features: test.features,
        test_labels: test.labels,
        test_predictions,
        calibration_label_changes: changes,
    })
}

fn train_client_meta(config: &ExperimentConfig, g: &ClientGraph) -> Result<ClientMeta> {
    let train_nodes = g.graph.nodes_with_role(NodeRole::Train);
    let val_nodes = g.graph.nodes_with_role(NodeRole::Validation);
    let s = seed::derive(config.seed, &[seed::tag("meta"), g.client as u64]);
    let (model, history) = train_metalearner(
        &g.graph,
        &g.space.meta_labels,
        &train_nodes,
        &val_nodes,
        &config.meta.model_config(),
        &config.meta.train_config(s),
    )
    .map_err(|e| Error::Training(format!("client {}: {e}", g.client)))?;
    log::info!(
        "client {}: meta-learner best epoch {} (val loss {:.4})",
        g.client,
        history.best_epoch,
        history.best_val_loss
    );
    Ok(ClientMeta {
        client: g.client,
        model,
        history,
    })
}

fn evaluate_client(
    config: &ExperimentConfig,
    g: &ClientGraph,
    meta: &ClientMeta,
    local_models: &[usize],
) -> Result<ClientEvaluation> {
    let c = g.space.n_classes;
    let with_queries = g
        .graph
        .insert_queries(&g.space, &g.test_phi, &g.test_features, &config.graph.graph_config())?;
    let logits = meta.model.forward(&with_queries)?;
    let base = g.graph.n_samples();
    let decisions = (0..g.test_labels.len())
        .map(|q| decide_and_vote(q, logits.row(base + q), &g.test_predictions[q], c))
        .collect();
    Ok(ClientEvaluation {
        client: g.client,
        labels: g.test_labels.clone(),
        baselines: run_baselines(&g.test_predictions, local_models, c)?,
        decisions,
    })
}

/// `M x C` class frequencies of each classifier's home training split.
fn home_frequencies(data: &Dataset, partition: &Partition, home: &[usize]) -> Matrix {
    let c = data.n_classes();
    let mut out = Matrix::zeros(home.len(), c);
    for (m, &k) in home.iter().enumerate() {
        let counts = data.subset(&partition.splits[k].train).class_counts(c);
        let total: usize = counts.iter().sum();
        for (class, &n) in counts.iter().enumerate() {
            out.set(m, class, n as f64 / total.max(1) as f64);
        }
    }
    out
}

/// Header of `decisions.csv`; score and weight lists are `;`-separated.
pub const DECISIONS_HEADER: &str = "client,query,label,prediction,fallback,size,ess,scores,weights";

fn decisions_csv(evaluations: &[ClientEvaluation]) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(";");
    let mut out = String::from(DECISIONS_HEADER);
    out.push('\n');
    for e in evaluations {
        for (d, y) in e.decisions.iter().zip(&e.labels) {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.6},{},{}\n",
                e.client,
                d.query,
                y,
                d.label,
                d.selection.fallback,
                d.selection.size(),
                d.selection.ess(),
                join(&d.selection.scores),
                join(&d.selection.weights),
            ));
        }
    }
    out
}

struct Stages<'a> {
    root: &'a Path,
    hash: String,
    manifest: RunManifest,
    fresh: bool,
    invalidated: bool,
}

impl Stages<'_> {
    /// Runs `compute` unless a valid cache exists.
    fn cached<T, F>(&mut self, name: &'static str, index: usize, compute: F) -> Result<Vec<T>>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<Vec<T>>,
    {
        let start = Instant::now();
        if !self.fresh && !self.invalidated {
            if let Some(hit) = read_cache(self.root, CACHE_FILES[index], &self.hash) {
                log::info!("stage {name}: cached");
                self.manifest.record(name, StageStatus::Cached, start.elapsed().as_secs_f64(), None);
                return Ok(hit);
            }
        }
        remove_caches_from(self.root, index);
        self.invalidated = true;
        let out = self.timed(name, compute)?;
        write_cache(self.root, CACHE_FILES[index], &self.hash, &out).map_err(stage_err(name))?;
        Ok(out)
    }

    fn timed<T>(&mut self, name: &'static str, compute: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        log::info!("stage {name}: running");
        match compute() {
            Ok(v) => {
                self.manifest.record(name, StageStatus::Computed, start.elapsed().as_secs_f64(), None);
                Ok(v)
            }
            Err(e) => {
                let err = stage_err(name)(e);
                self.manifest.record(
                    name,
                    StageStatus::Failed,
                    start.elapsed().as_secs_f64(),
                    Some(err.to_string()),
                );
                Err(err)
            }
        }
    }
}

/// Runs the whole pipeline and writes every report under the output directory.
///
/// Stage results are cached in `<output>/cache/` under the config hash, so a
/// rerun resumes after the last completed stage. A failed stage leaves a
/// manifest with `completed = false`.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    let root = options.output_dir.clone().unwrap_or_else(|| config.output_dir.clone());
    ensure_writable(&root)?;
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut stages = Stages {
        root: &root,
        hash: config.hash(),
        manifest: RunManifest::new(config.hash(), config.seed),
        fresh: options.fresh,
        invalidated: false,
    };
    let result = threads.install(|| run_stages(config, options, &mut stages));
    match result {
        Ok(mut outcome) => {
            outcome.manifest = stages.manifest;
            outcome.manifest.completed = true;
            write_file(&root, "manifest.json", outcome.manifest.to_json()?.as_bytes())?;
            Ok(outcome)
        }
        Err(e) => {
            let json = stages.manifest.to_json()?;
            write_file(&root, "manifest.json", json.as_bytes())?;
            Err(e)
        }
    }
}

fn run_stages(config: &ExperimentConfig, options: &RunOptions, stages: &mut Stages) -> Result<RunOutcome> {
    let root = stages.root.to_path_buf();
    let (data, partition) = stages.timed(STAGE_DATA, || {
        let data = load_dataset(config)?;
        let partition = partition_dataset(config, &data)?;
        Ok((data, partition))
    })?;
    let k = partition.n_clients;
    log::info!("{} samples, {} classes, {k} clients", data.len(), data.n_classes());

    let locals: Vec<LocalTraining> = stages.cached(STAGE_LOCAL, 0, || {
        (0..k)
            .into_par_iter()
            .map(|client| train_client(config, &data, &partition, client))
            .collect()
    })?;

    let exchange = stages.timed(STAGE_EXCHANGE, || {
        exchange_models(locals.iter().map(|l| l.models.clone()).collect())
    })?;
    let home: Vec<usize> = exchange.pools[0].entries.iter().map(|e| e.model.home_client).collect();
    let firsts: Vec<usize> = (0..k).map(|client| home.iter().take_while(|&&h| h < client).count()).collect();

    let graphs: Vec<ClientGraph> = stages.cached(STAGE_GRAPH, 1, || {
        (0..k)
            .into_par_iter()
            .map(|client| {
                build_client_graph(
                    config,
                    &data,
                    &partition,
                    &exchange.pools[client],
                    &locals[client],
                    firsts[client],
                )
                .map_err(|e| match e {
                    Error::Stage { .. } => e,
                    other => Error::Validation(format!("client {client}: {other}")),
                })
            })
            .collect()
    })?;

    let metas: Vec<ClientMeta> = stages.cached(STAGE_META, 2, || {
        graphs.par_iter().map(|g| train_client_meta(config, g)).collect()
    })?;

    let (evaluations, report) = stages.timed(STAGE_EVALUATION, || {
        let evaluations: Vec<ClientEvaluation> = graphs
            .par_iter()
            .zip(&metas)
            .map(|(g, meta)| evaluate_client(config, g, meta, &exchange.pools[g.client].local_indices()))
            .collect::<Result<_>>()?;
        let correlation =
            selection_frequency_correlation(&evaluations, &home, &home_frequencies(&data, &partition, &home));
        let metric = config.evaluation.metric.resolve(data.imbalance_ratio());
        let report = FederationReport::assemble(metric, &evaluations, correlation)?;
        Ok((evaluations, report))
    })?;

    let histories: Vec<TrainingHistory> = metas.iter().map(|m| m.history.clone()).collect();
    let start = Instant::now();
    let written = emit_reports(
        &root,
        config,
        &report,
        &exchange.log,
        &partition,
        &histories,
        options.dump_decisions.then_some(evaluations.as_slice()),
        &mut stages.manifest,
    )
    .map_err(stage_err(STAGE_REPORTS));
    let seconds = start.elapsed().as_secs_f64();
    match written {
        Ok(()) => stages.manifest.record(STAGE_REPORTS, StageStatus::Computed, seconds, None),
        Err(e) => {
            stages
                .manifest
                .record(STAGE_REPORTS, StageStatus::Failed, seconds, Some(e.to_string()));
            return Err(e);
        }
    }

    Ok(RunOutcome {
        output_dir: root,
        report,
        manifest: RunManifest::new(String::new(), config.seed),
        evaluations,
        exchange: exchange.log,
        partition,
        calibration_label_changes: graphs.iter().map(|g| g.calibration_label_changes).collect(),
        histories,
    })
}

/// Writes the report files and lists each in `manifest`:
///
/// - `clients.csv`: `client,n_test,local,global,feddes,mean_size,mean_ess,fallback_rate`
/// - `summary.json`: per-method mean, std and win rate plus ESS and correlation summaries
/// - `correlation.csv`: one row per (classifier, class) pair
/// - `ess.csv`: `mean_ensemble_size,mean_ess,ess_over_ensemble_size`
/// - `exchange.json`, `partition.json`, `config.toml`, `history/client_<k>.csv`
/// - `decisions.csv` when `decisions` is given
#[allow(clippy::too_many_arguments)]
pub fn emit_reports(
    root: &Path,
    config: &ExperimentConfig,
    report: &FederationReport,
    exchange: &ExchangeLog,
    partition: &Partition,
    histories: &[TrainingHistory],
    decisions: Option<&[ClientEvaluation]>,
    manifest: &mut RunManifest,
) -> Result<()> {
    let mut files: Vec<(String, Vec<u8>)> = vec![
        ("clients.csv".into(), report.client_csv().into_bytes()),
        ("summary.json".into(), report.summary_json()?.into_bytes()),
        ("correlation.csv".into(), report.correlation_csv().into_bytes()),
        ("ess.csv".into(), report.ess_csv().into_bytes()),
        ("exchange.json".into(), serde_json::to_vec_pretty(exchange)?),
        ("partition.json".into(), partition.to_json()?.into_bytes()),
        ("config.toml".into(), config.to_toml()?.into_bytes()),
    ];
    for (client, h) in histories.iter().enumerate() {
        files.push((format!("history/client_{client}.csv"), h.to_csv().into_bytes()));
    }
    if let Some(evals) = decisions {
        files.push(("decisions.csv".into(), decisions_csv(evals).into_bytes()));
    }
    for (name, bytes) in files {
        write_file(root, &name, &bytes)?;
        manifest.add_file(root, &name)?;
    }
    Ok(())
}
