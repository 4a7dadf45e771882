use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::calibration::{calibrate_temperature, Calibration};
use super::model::{Architecture, ClassifierModel};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// One classifier as seen by one receiving client.
#[derive(Clone, Debug)]
pub struct PoolEntry {
    pub global_index: usize,
    pub model: Arc<ClassifierModel>,
    pub calibration: Calibration,
}

/// A client's view of all `M` classifiers in canonical order.
#[derive(Clone, Debug)]
pub struct ClassifierPool {
    pub client: usize,
    pub entries: Vec<PoolEntry>,
}

impl ClassifierPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Global indices of the models this client trained itself.
    pub fn local_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.model.home_client == self.client)
            .map(|e| e.global_index)
            .collect()
    }

    pub fn temperatures(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.calibration.temperature).collect()
    }

    /// Fits every entry's temperature on this client's validation data.
    pub fn calibrate(&mut self, features: &Matrix, labels: &[usize]) -> Result<()> {
        for entry in &mut self.entries {
            entry.calibration = calibrate_temperature(&entry.model, features, labels)?;
            if entry.calibration.degenerate {
                log::warn!(
                    "client {}: model {} left uncalibrated",
                    self.client,
                    entry.global_index
                );
            }
        }
        Ok(())
    }

    /// Calibrated probabilities of model `m` on `features`.
    pub fn predict_proba(&self, m: usize, features: &Matrix) -> Result<Matrix> {
        let entry = &self.entries[m];
        entry.model.predict_proba(features, entry.calibration.temperature)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientTraffic {
    pub models_sent: usize,
    pub models_received: usize,
    pub bytes_sent: usize,
    pub bytes_received: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExchangeLog {
    pub clients: Vec<ClientTraffic>,
    /// Directed (sender, receiver) transfers.
    pub transfers: usize,
    pub total_bytes: usize,
}

/// Result of one full-mesh exchange.
#[derive(Clone, Debug)]
pub struct Exchange {
    pub pools: Vec<ClassifierPool>,
    pub log: ExchangeLog,
}

/// Shares every client's models with every other client.
///
/// `local_models[k]` holds client `k`'s classifiers. Models travel as their
/// serialized bytes and are decoded once per receiver; the decoded copies are
/// checked to equal the originals. Pools start uncalibrated (`T = 1`).
pub fn exchange_models(local_models: Vec<Vec<ClassifierModel>>) -> Result<Exchange> {
    let k = local_models.len();
    let mut canonical: Vec<ClassifierModel> = Vec::new();
    for (client, models) in local_models.into_iter().enumerate() {
        for (local, model) in models.into_iter().enumerate() {
            canonical.push(model.with_origin(client, local));
        }
    }
    canonical.sort_by_key(|m| (m.home_client, m.local_index));

    let mut log = ExchangeLog {
        clients: vec![ClientTraffic::default(); k],
        transfers: 0,
        total_bytes: 0,
    };
    let mut shared: Vec<Arc<ClassifierModel>> = Vec::with_capacity(canonical.len());
    for model in canonical {
        let bytes = model.to_bytes()?;
        let decoded = ClassifierModel::from_bytes(&bytes)?;
        if decoded != model {
            return Err(Error::Validation(format!(
                "model ({}, {}) changed in transit",
                model.home_client, model.local_index
            )));
        }
        let home = model.home_client;
        let peers = k - 1;
        log.clients[home].models_sent += peers;
        log.clients[home].bytes_sent += bytes.len() * peers;
        for (receiver, traffic) in log.clients.iter_mut().enumerate() {
            if receiver != home {
                traffic.models_received += 1;
                traffic.bytes_received += bytes.len();
            }
        }
        log.total_bytes += bytes.len() * peers;
        shared.push(Arc::new(decoded));
    }
    log.transfers = k * k.saturating_sub(1);

    let pools = (0..k)
        .map(|client| ClassifierPool {
            client,
            entries: shared
                .iter()
                .enumerate()
                .map(|(m, model)| PoolEntry {
                    global_index: m,
                    model: Arc::clone(model),
                    calibration: Calibration {
                        temperature: 1.0,
                        degenerate: false,
                    },
                })
                .collect(),
        })
        .collect();
    Ok(Exchange { pools, log })
}

/// Architectures each client trains: `options[k mod len]`, or every option
/// when `all_per_client` is set.
pub fn assign_architectures(
    options: &[Architecture],
    n_clients: usize,
    all_per_client: bool,
) -> Result<Vec<Vec<Architecture>>> {
    if options.is_empty() {
        return Err(Error::Config("at least one base architecture is required".into()));
    }
    Ok((0..n_clients)
        .map(|k| {
            if all_per_client {
                options.to_vec()
            } else {
                vec![options[k % options.len()].clone()]
            }
        })
        .collect())
}
