//! Per-client heterogeneous graphs over the decision space of the pool.

mod graph;
mod neighbors;
mod space;

pub use graph::{build_graph, classifier_features, EdgeList, GraphConfig, HeteroGraph, NodeRole};
pub use neighbors::{
    class_balanced_neighbors, cmdw_stability, gain_scores, hierarchical_weights, l1_distance, top_classifiers,
    weighted_neighborhood, ClassNeighbors, Neighborhood, GAIN_SHIFT_FLOOR, LOG_LOSS_FLOOR, STABILITY_EPSILON,
};
pub use space::{embed, project_decision_space, DecisionSpace};
