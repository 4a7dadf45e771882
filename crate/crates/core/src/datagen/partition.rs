use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::numkernel::seed;

/// Fewer samples than this cannot support 5-fold out-of-fold prediction.
pub const MIN_CLIENT_SAMPLES: usize = 10;
pub const TEST_FRACTION: f64 = 0.2;
pub const VAL_FRACTION: f64 = 0.25;

const MAX_DIRICHLET_DRAWS: usize = 1000;
const MAX_ASSIGNMENT_DRAWS: usize = 100;

/// Extended-Dirichlet label skew: each client holds `classes_per_client`
/// labels and each label is split across its holders by `Dirichlet(alpha)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExDirConfig {
    pub classes_per_client: usize,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .copied()
            .collect();
        all.sort_unstable();
        all
    }
}

/// Holders of one class and the Dirichlet proportions drawn for them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAllocation {
    pub class: usize,
    pub clients: Vec<usize>,
    pub proportions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub n_clients: usize,
    /// Owning client per dataset row.
    pub assignment: Vec<usize>,
    /// Sorted class labels held by each client.
    pub client_classes: Vec<Vec<usize>>,
    pub allocations: Vec<ClassAllocation>,
    pub splits: Vec<ClientSplit>,
}

impl Partition {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn client_indices(&self, client: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|&(_, &k)| k == client)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Partitions `data` across `n_clients` under ExDir(C, α) and splits each
/// client's share into train/val/test.
///
/// Per-class Dirichlet draws are redrawn (up to a fixed budget) whenever a
/// holder would receive fewer than `max(5, ⌈10 / C⌉)` samples of that
/// class, so every client clears [`MIN_CLIENT_SAMPLES`].
pub fn exdir_partition(data: &Dataset, cfg: &ExDirConfig, n_clients: usize) -> Result<Partition> {
    let n_classes = data.n_classes();
    let cpc = cfg.classes_per_client;
    if n_clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if cpc == 0 || cpc > n_classes {
        return Err(Error::Config(format!(
            "classes per client must be in 1..={n_classes}, got {cpc}"
        )));
    }
    if n_clients * cpc < n_classes {
        return Err(Error::Config(format!(
            "{n_clients} clients x {cpc} classes cannot cover {n_classes} classes"
        )));
    }
    if !(cfg.alpha > 0.0) || !cfg.alpha.is_finite() {
        return Err(Error::Config(format!(
            "Dirichlet concentration must be positive, got {}",
            cfg.alpha
        )));
    }

    let mut rng = seed::derived_rng(cfg.seed, &[seed::tag("exdir-assign")]);
    let client_classes = assign_classes(n_classes, n_clients, cpc, &mut rng)?;

    let min_per_class = 5.max(MIN_CLIENT_SAMPLES.div_ceil(cpc));
    let gamma = Gamma::new(cfg.alpha, 1.0)
        .map_err(|e| Error::Config(format!("invalid Dirichlet concentration: {e}")))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in data.labels().iter().enumerate() {
        by_class[y].push(i);
    }

    let mut assignment = vec![usize::MAX; data.len()];
    let mut allocations = Vec::with_capacity(n_classes);
    for (class, members) in by_class.iter_mut().enumerate() {
        let holders: Vec<usize> = (0..n_clients)
            .filter(|&k| client_classes[k].contains(&class))
            .collect();
        let mut crng = seed::derived_rng(cfg.seed, &[seed::tag("exdir-class"), class as u64]);
        members.shuffle(&mut crng);
        let mut accepted = None;
        for _ in 0..MAX_DIRICHLET_DRAWS {
            let proportions = dirichlet(&gamma, holders.len(), &mut crng);
            let counts = apportion(members.len(), &proportions);
            if counts.iter().all(|&c| c >= min_per_class) {
                accepted = Some((proportions, counts));
                break;
            }
        }
        let Some((proportions, counts)) = accepted else {
            return Err(Error::Partition(format!(
                "class {class} ({} samples) cannot give each of its {} holders {min_per_class} samples",
                members.len(),
                holders.len()
            )));
        };
        let mut offset = 0;
        for (&client, &count) in holders.iter().zip(&counts) {
            for &i in &members[offset..offset + count] {
                assignment[i] = client;
            }
            offset += count;
        }
        allocations.push(ClassAllocation {
            class,
            clients: holders,
            proportions,
        });
    }

    let mut splits = Vec::with_capacity(n_clients);
    for client in 0..n_clients {
        let indices: Vec<usize> = (0..data.len()).filter(|&i| assignment[i] == client).collect();
        let split_seed = seed::derive(cfg.seed, &[seed::tag("split"), client as u64]);
        let split = split_client(&indices, data.labels(), split_seed)
            .map_err(|e| Error::Partition(format!("client {client}: {e}")))?;
        splits.push(split);
    }

    Ok(Partition {
        n_clients,
        assignment,
        client_classes,
        allocations,
        splits,
    })
}

/// Deals classes from a stream of shuffled class lists, skipping labels the
/// client already holds. Redraws if any class ends up without a holder.
fn assign_classes(
    n_classes: usize,
    n_clients: usize,
    cpc: usize,
    rng: &mut seed::Rng,
) -> Result<Vec<Vec<usize>>> {
    for _ in 0..MAX_ASSIGNMENT_DRAWS {
        let mut stream: Vec<usize> = Vec::new();
        let mut sets: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for _ in 0..cpc {
            for set in sets.iter_mut() {
                loop {
                    if stream.is_empty() {
                        let mut perm: Vec<usize> = (0..n_classes).collect();
                        perm.shuffle(rng);
                        stream.extend(perm);
                    }
                    if let Some(pos) = stream.iter().position(|c| !set.contains(c)) {
                        set.push(stream.remove(pos));
                        break;
                    }
                    // every queued class is already held: queue a fresh round
                    let mut perm: Vec<usize> = (0..n_classes).collect();
                    perm.shuffle(rng);
                    stream.extend(perm);
                }
            }
        }
        let covered = (0..n_classes).all(|c| sets.iter().any(|s| s.contains(&c)));
        if covered {
            for s in &mut sets {
                s.sort_unstable();
            }
            return Ok(sets);
        }
    }
    Err(Error::Partition(
        "could not assign every class to at least one client".into(),
    ))
}

fn dirichlet(gamma: &Gamma<f64>, n: usize, rng: &mut seed::Rng) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Largest-remainder apportionment of `total` items by `weights`
/// (which sum to 1). Ties in the remainder go to the lower index.
pub(crate) fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Stratified 80/20 train/test split followed by a 75/25 train/val split
/// of the remainder. Index lists come back sorted.
pub fn split_client(indices: &[usize], labels: &[usize], seed_value: u64) -> Result<ClientSplit> {
    let n = indices.len();
    if n < MIN_CLIENT_SAMPLES {
        return Err(Error::Partition(format!(
            "client has {n} samples, at least {MIN_CLIENT_SAMPLES} are required"
        )));
    }
    let n_test = (n as f64 * TEST_FRACTION).round() as usize;
    let n_val = ((n - n_test) as f64 * VAL_FRACTION).round() as usize;

    let mut classes: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut groups: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| indices.iter().copied().filter(|&i| labels[i] == c).collect())
        .collect();

    let mut rng = seed::derived_rng(seed_value, &[seed::tag("split-client")]);
    for g in &mut groups {
        g.sort_unstable();
        g.shuffle(&mut rng);
    }

    let sizes: Vec<f64> = groups.iter().map(|g| g.len() as f64 / n as f64).collect();
    let test_quota = apportion(n_test, &sizes);
    let remaining: Vec<usize> = groups.iter().zip(&test_quota).map(|(g, t)| g.len() - t).collect();
    let rest = n - n_test;
    let rest_weights: Vec<f64> = remaining.iter().map(|&r| r as f64 / rest as f64).collect();
    let val_quota = apportion(n_val, &rest_weights);

    let mut split = ClientSplit::default();
    for ((g, &t), &v) in groups.iter().zip(&test_quota).zip(&val_quota) {
        split.test.extend_from_slice(&g[..t]);
        split.val.extend_from_slice(&g[t..t + v]);
        split.train.extend_from_slice(&g[t + v..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}
