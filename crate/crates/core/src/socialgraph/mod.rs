//! Social heterogeneous graph embedding: attention over friends for users and
//! over k-order meta-path neighbours for items.

pub mod layer;
pub mod metapath;

pub use layer::{
    attend_neighbours, graph_embed, item_aggregate, item_aggregate_planned, user_aggregate, user_aggregate_planned,
    Aggregation, EmbeddingTable, GraphLayerParams, GraphPlans, GraphVars, NeighbourPlan, INIT_STD,
};
pub use metapath::{build_metapath_neighbors, load_index, save_index, MetaPathIndex};
