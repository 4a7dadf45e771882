use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::neighbors::{gain_scores, top_classifiers, weighted_neighborhood, STABILITY_EPSILON};
use super::space::DecisionSpace;
use crate::error::{Error, Result};
use crate::numkernel::{argmax, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Train,
    Validation,
    Query,
}

/// Directed weighted edges stored column-wise; messages flow source → target.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeList {
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

impl EdgeList {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn push(&mut self, source: usize, target: usize, weight: f64) {
        self.sources.push(source);
        self.targets.push(target);
        self.weights.push(weight);
    }

    /// `(source, weight)` of every edge into `target`.
    pub fn incoming(&self, target: usize) -> Vec<(usize, f64)> {
        (0..self.len())
            .filter(|&e| self.targets[e] == target)
            .map(|e| (self.sources[e], self.weights[e]))
            .collect()
    }

    fn retain_targets_below(&mut self, n: usize) {
        let keep: Vec<usize> = (0..self.len()).filter(|&e| self.targets[e] < n).collect();
        self.sources = keep.iter().map(|&e| self.sources[e]).collect();
        self.targets = keep.iter().map(|&e| self.targets[e]).collect();
        self.weights = keep.iter().map(|&e| self.weights[e]).collect();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Neighbors per class on sample–sample edges.
    pub k_ss: usize,
    /// Classifiers linked to each sample.
    pub k_cs: usize,
    /// Added to class stabilities before inverting them.
    pub epsilon: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k_ss: 5,
            k_cs: 3,
            epsilon: STABILITY_EPSILON,
        }
    }
}

/// Sample and classifier nodes with typed weighted edges.
///
/// Sample node `i` is row `i` of the decision space it was built from;
/// query nodes, when present, follow all other sample nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeteroGraph {
    pub sample_features: Matrix,
    pub classifier_features: Matrix,
    pub roles: Vec<NodeRole>,
    pub sample_sample: EdgeList,
    pub classifier_sample: EdgeList,
}

struct TargetEdges {
    samples: Vec<(usize, f64)>,
    classifiers: Vec<(usize, f64)>,
}

fn connect(
    space: &DecisionSpace,
    candidates: &[usize],
    target: &[f64],
    exclude: Option<usize>,
    config: &GraphConfig,
) -> TargetEdges {
    let hood = weighted_neighborhood(space, candidates, target, exclude, config.k_ss, config.epsilon);
    let samples = hood.flat();
    let (gain, loss) = gain_scores(space, &samples);
    TargetEdges {
        samples,
        classifiers: top_classifiers(&gain, &loss, config.k_cs),
    }
}

/// Classifier node features on the rows `rows` of `space`:
/// per-class recall, its standard error `sqrt(r(1-r)/n_c)`, per-class mean
/// confidence (mean probability of class `c` on true-`c` rows), accuracy and
/// balanced accuracy. Classes without rows contribute zeros and are left out
/// of the balanced accuracy.
pub fn classifier_features(space: &DecisionSpace, rows: &[usize]) -> Matrix {
    let c = space.n_classes;
    let m_total = space.pool_size;
    let mut out = Matrix::zeros(m_total, 3 * c + 2);
    let mut counts = vec![0usize; c];
    for &i in rows {
        counts[space.labels[i]] += 1;
    }
    for m in 0..m_total {
        let mut hits = vec![0usize; c];
        let mut conf = vec![0.0; c];
        for &i in rows {
            let y = space.labels[i];
            let block = space.block(i, m);
            hits[y] += usize::from(argmax(block) == y);
            conf[y] += block[y];
        }
        let mut recall_sum = 0.0;
        let mut present = 0usize;
        for k in 0..c {
            if counts[k] == 0 {
                continue;
            }
            let n = counts[k] as f64;
            let r = hits[k] as f64 / n;
            out.set(m, k, r);
            out.set(m, c + k, (r * (1.0 - r) / n).sqrt());
            out.set(m, 2 * c + k, conf[k] / n);
            recall_sum += r;
            present += 1;
        }
        let total_hits: usize = hits.iter().sum();
        if !rows.is_empty() {
            out.set(m, 3 * c, total_hits as f64 / rows.len() as f64);
            out.set(m, 3 * c + 1, recall_sum / present as f64);
        }
    }
    out
}

/// Connects every node of `space` to its class-balanced neighbors among
/// the `Train` nodes (never itself) and to its top classifiers.
pub fn build_graph(
    space: &DecisionSpace,
    sample_features: &Matrix,
    roles: Vec<NodeRole>,
    classifier_features: Matrix,
    config: &GraphConfig,
) -> Result<HeteroGraph> {
    let n = space.len();
    if sample_features.rows() != n || roles.len() != n {
        return Err(Error::Dimension {
            op: "build graph",
            left: (n, space.probs.cols()),
            right: (sample_features.rows(), roles.len()),
        });
    }
    if classifier_features.rows() != space.pool_size {
        return Err(Error::Validation(format!(
            "{} classifier feature rows for a pool of {}",
            classifier_features.rows(),
            space.pool_size
        )));
    }
    if roles.contains(&NodeRole::Query) {
        return Err(Error::Validation("queries are added with insert_queries".into()));
    }
    let candidates: Vec<usize> = (0..n).filter(|&i| roles[i] == NodeRole::Train).collect();
    if candidates.is_empty() {
        return Err(Error::Validation("graph needs at least one training node".into()));
    }
    let per_target: Vec<TargetEdges> = (0..n)
        .into_par_iter()
        .map(|j| connect(space, &candidates, space.probs.row(j), Some(j), config))
        .collect();
    let mut graph = HeteroGraph {
        sample_features: sample_features.clone(),
        classifier_features,
        roles,
        sample_sample: EdgeList::default(),
        classifier_sample: EdgeList::default(),
    };
    for (j, edges) in per_target.into_iter().enumerate() {
        graph.push_edges(j, edges);
    }
    Ok(graph)
}

impl HeteroGraph {
    pub fn n_samples(&self) -> usize {
        self.roles.len()
    }

    pub fn n_classifiers(&self) -> usize {
        self.classifier_features.rows()
    }

    pub fn node_count(&self) -> usize {
        self.n_samples() + self.n_classifiers()
    }

    pub fn nodes_with_role(&self, role: NodeRole) -> Vec<usize> {
        (0..self.n_samples()).filter(|&i| self.roles[i] == role).collect()
    }

    fn push_edges(&mut self, target: usize, edges: TargetEdges) {
        for (i, w) in edges.samples {
            self.sample_sample.push(i, target, w);
        }
        for (m, w) in edges.classifiers {
            self.classifier_sample.push(m, target, w);
        }
    }

    /// A copy of this graph with one query node per row of `query_phi`.
    ///
    /// Queries link only to training nodes and classifiers, and nothing links
    /// back to them, so every query sees exactly the graph it would see if
    /// inserted alone. `space` must be the decision space the graph was built from.
    pub fn insert_queries(
        &self,
        space: &DecisionSpace,
        query_phi: &Matrix,
        query_features: &Matrix,
        config: &GraphConfig,
    ) -> Result<HeteroGraph> {
        if query_phi.rows() != query_features.rows()
            || query_phi.cols() != space.probs.cols()
            || query_features.cols() != self.sample_features.cols()
        {
            return Err(Error::Dimension {
                op: "insert queries",
                left: query_phi.shape(),
                right: query_features.shape(),
            });
        }
        let candidates = self.nodes_with_role(NodeRole::Train);
        let per_query: Vec<TargetEdges> = (0..query_phi.rows())
            .into_par_iter()
            .map(|q| connect(space, &candidates, query_phi.row(q), None, config))
            .collect();
        let base = self.n_samples();
        let mut rows: Vec<&[f64]> = self.sample_features.iter_rows().collect();
        rows.extend(query_features.iter_rows());
        let mut out = self.clone();
        out.sample_features = Matrix::from_rows(&rows)?;
        out.roles.extend(std::iter::repeat_n(NodeRole::Query, query_phi.rows()));
        for (q, edges) in per_query.into_iter().enumerate() {
            out.push_edges(base + q, edges);
        }
        Ok(out)
    }

    /// This graph with every query node and its edges dropped.
    pub fn without_queries(&self) -> HeteroGraph {
        let keep = self.roles.iter().take_while(|&&r| r != NodeRole::Query).count();
        let mut out = self.clone();
        out.roles.truncate(keep);
        let rows: Vec<&[f64]> = self.sample_features.iter_rows().take(keep).collect();
        out.sample_features = if rows.is_empty() {
            Matrix::zeros(0, self.sample_features.cols())
        } else {
            Matrix::from_rows(&rows).expect("rows share a width")
        };
        out.sample_sample.retain_targets_below(keep);
        out.classifier_sample.retain_targets_below(keep);
        out
    }

    /// JSON with keys `sample_features`, `classifier_features`, `roles`,
    /// `sample_sample` and `classifier_sample`; each edge list holds parallel
    /// `sources`, `targets` and `weights` arrays.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::seed;
    use rand::Rng;

    fn random_space(n: usize, m: usize, c: usize, seed_value: u64) -> (DecisionSpace, Matrix) {
        let mut rng = seed::rng(seed_value);
        let mut probs = Matrix::zeros(n, m * c);
        for i in 0..n {
            for k in 0..m {
                let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                for j in 0..c {
                    probs.set(i, k * c + j, raw[j] / s);
                }
            }
        }
        let labels = (0..n).map(|i| i % c).collect();
        let feats = Matrix::from_vec(n, 2, (0..2 * n).map(|_| rng.random()).collect()).unwrap();
        (DecisionSpace::new(probs, labels, c).unwrap(), feats)
    }

    fn graph(n: usize, m: usize, c: usize, seed_value: u64) -> (DecisionSpace, HeteroGraph) {
        let (space, feats) = random_space(n, m, c, seed_value);
        let mut roles = vec![NodeRole::Train; n];
        roles[n - 1] = NodeRole::Validation;
        let cf = classifier_features(&space, &(0..n - 1).collect::<Vec<_>>());
        let g = build_graph(&space, &feats, roles, cf, &GraphConfig::default()).unwrap();
        (space, g)
    }

    #[test]
    fn shapes_and_edge_invariants() {
        let (_, g) = graph(30, 4, 3, 1);
        assert_eq!(g.node_count(), 34);
        assert_eq!(g.classifier_features.cols(), 3 * 3 + 2);
        for j in 0..30 {
            let ss = g.sample_sample.incoming(j);
            assert!(ss.iter().all(|&(i, w)| i != j && w >= 0.0 && i != 29));
            assert!((ss.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-9);
            let cs = g.classifier_sample.incoming(j);
            assert_eq!(cs.len(), 3);
            assert!((cs.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let (_, a) = graph(20, 3, 2, 2);
        let (_, b) = graph(20, 3, 2, 2);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn single_classifier_gets_full_weight() {
        let (space, feats) = random_space(12, 1, 3, 3);
        let cf = classifier_features(&space, &(0..12).collect::<Vec<_>>());
        let g = build_graph(&space, &feats, vec![NodeRole::Train; 12], cf, &GraphConfig::default()).unwrap();
        assert!(g.classifier_sample.sources.iter().all(|&m| m == 0));
        assert!(g.classifier_sample.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn query_insertion_is_non_destructive() {
        let (space, g) = graph(25, 3, 3, 4);
        let before = g.to_json().unwrap();
        let phi = space.probs.select_rows(&[3, 7]);
        let feats = Matrix::zeros(2, 2);
        let aug = g.insert_queries(&space, &phi, &feats, &GraphConfig::default()).unwrap();
        assert_eq!(g.to_json().unwrap(), before);
        assert_eq!(aug.n_samples(), 27);
        assert!(aug.sample_sample.sources.iter().all(|&s| s < 25));
        assert_eq!(aug.without_queries().to_json().unwrap(), before);
    }

    #[test]
    fn query_copy_of_training_node_keeps_its_neighbors() {
        let (space, g) = graph(25, 3, 3, 5);
        let j = 6;
        let phi = space.probs.select_rows(&[j]);
        let aug = g
            .insert_queries(&space, &phi, &Matrix::zeros(1, 2), &GraphConfig::default())
            .unwrap();
        let mut from_query: Vec<usize> = aug.sample_sample.incoming(25).iter().map(|p| p.0).collect();
        assert!(from_query.contains(&j));
        from_query.retain(|&i| i != j);
        let original: Vec<usize> = g.sample_sample.incoming(j).iter().map(|p| p.0).collect();
        for i in from_query {
            assert!(original.contains(&i));
        }
    }

    #[test]
    fn classifier_features_by_hand() {
        // model 0 on three rows: classes 0, 0, 1; predicts 0, 1, 1
        let probs = Matrix::from_rows(&[[0.7, 0.3], [0.4, 0.6], [0.2, 0.8]]).unwrap();
        let space = DecisionSpace::new(probs, vec![0, 0, 1], 2).unwrap();
        let f = classifier_features(&space, &[0, 1, 2]);
        let expect = [
            0.5,
            1.0,
            (0.25f64 / 2.0).sqrt(),
            0.0,
            (0.7 + 0.4) / 2.0,
            0.8,
            2.0 / 3.0,
            0.75,
        ];
        for (a, b) in f.row(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn json_round_trip() {
        let (_, g) = graph(10, 2, 2, 6);
        assert_eq!(HeteroGraph::from_json(&g.to_json().unwrap()).unwrap(), g);
    }
}
