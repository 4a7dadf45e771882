use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{Dropout, EdgeIndex, MetaConfig, MetaLearner, ParamVars};
use crate::error::{Error, Result};
use crate::graphbuild::HeteroGraph;
use crate::numkernel::ops::bce_with_logits;
use crate::numkernel::{seed, Adam, Matrix, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 300,
            patience: 20,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainingHistory {
    /// `epoch,train_loss,val_loss` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_loss);
        }
        out
    }
}

/// Mean BCE-with-logits loss and per-parameter gradients on `rows`.
/// Dropout is drawn from `dropout_seed` when given.
pub fn loss_and_gradients(
    model: &MetaLearner,
    graph: &HeteroGraph,
    targets: &Matrix,
    rows: &[usize],
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Matrix>)> {
    let edges = EdgeIndex::new(graph, model.config.heads, model.config.self_loops)?;
    let params = model.parameters();
    loss_and_gradients_with(model, &params, graph, &edges, targets, rows, dropout_seed)
}

fn loss_and_gradients_with(
    model: &MetaLearner,
    params: &[Matrix],
    graph: &HeteroGraph,
    edges: &EdgeIndex,
    targets: &Matrix,
    rows: &[usize],
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let pv = ParamVars::from_slice(&vars, model.layers.len());
    let mut rng = seed::rng(dropout_seed.unwrap_or(0));
    let dropout = dropout_seed
        .filter(|_| model.config.dropout > 0.0)
        .map(|_| Dropout {
            rate: model.config.dropout,
            rng: &mut rng,
        });
    let out = model.forward_on_tape(&mut tape, &pv, graph, edges, Some(rows), dropout)?;
    let loss = tape.bce_with_logits(out.logits, targets.select_rows(rows))?;
    let value = tape.value(loss).get(0, 0);
    let grads = tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
        .collect();
    Ok((value, grads))
}

fn validate_rows(rows: &[usize], n: usize, what: &str) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Validation(format!("no {what} nodes")));
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::Validation(format!("{what} node {bad} outside {n} sample nodes")));
    }
    Ok(())
}

/// Fits a meta-learner on `train_nodes` against rows of `targets` (`N x M`
/// meta-labels), early-stopping on the loss over `val_nodes`. Every epoch
/// visits the training nodes in shuffled batches; each batch propagates
/// over the whole graph. Returns the best-validation snapshot.
pub fn train_metalearner(
    graph: &HeteroGraph,
    targets: &Matrix,
    train_nodes: &[usize],
    val_nodes: &[usize],
    config: &MetaConfig,
    train_config: &MetaTrainConfig,
) -> Result<(MetaLearner, TrainingHistory)> {
    let n = graph.n_samples();
    validate_rows(train_nodes, n, "training")?;
    validate_rows(val_nodes, n, "validation")?;
    if train_nodes.iter().any(|t| val_nodes.contains(t)) {
        return Err(Error::Validation("training and validation nodes overlap".into()));
    }
    if targets.shape() != (n, graph.n_classifiers()) {
        return Err(Error::Dimension {
            op: "meta-learner targets",
            left: targets.shape(),
            right: (n, graph.n_classifiers()),
        });
    }

    let mut rng = seed::derived_rng(train_config.seed, &[seed::tag("metalearner")]);
    let mut model = MetaLearner::init(
        config,
        graph.sample_features.cols(),
        graph.classifier_features.cols(),
        graph.n_classifiers(),
        &mut rng,
    )?;
    let edges = EdgeIndex::new(graph, config.heads, config.self_loops)?;
    let mut params = model.parameters();
    let mut adam = Adam::for_params(train_config.learning_rate, &params);
    let val_targets = targets.select_rows(val_nodes);

    let mut history = TrainingHistory {
        best_val_loss: f64::INFINITY,
        ..TrainingHistory::default()
    };
    let mut best_params = params.clone();
    let mut since_best = 0;
    let mut order = train_nodes.to_vec();
    let batch = train_config.batch_size.max(1);
    let mut step = 0u64;

    for epoch in 0..train_config.max_epochs {
        order.shuffle(&mut rng);
        let mut weighted_loss = 0.0;
        for chunk in order.chunks(batch) {
            let dropout_seed = seed::derive(train_config.seed, &[seed::tag("dropout"), step]);
            step += 1;
            let (loss, grads) =
                loss_and_gradients_with(&model, &params, graph, &edges, targets, chunk, Some(dropout_seed))?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "meta-learner loss became {loss} at epoch {epoch} (learning rate {})",
                    train_config.learning_rate
                )));
            }
            weighted_loss += loss * chunk.len() as f64;
            adam.step(&mut params, &grads).map_err(|e| {
                Error::Training(format!(
                    "{e} at epoch {epoch} (learning rate {})",
                    train_config.learning_rate
                ))
            })?;
        }
        model.set_parameters(&params);
        let logits = model.forward(graph)?;
        let val_loss = bce_with_logits(&logits.select_rows(val_nodes), &val_targets)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!(
                "meta-learner validation loss became {val_loss} at epoch {epoch} (learning rate {})",
                train_config.learning_rate
            )));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: weighted_loss / order.len() as f64,
            val_loss,
        });
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best_params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train_config.patience {
                break;
            }
        }
    }
    model.set_parameters(&best_params);
    Ok((model, history))
}
