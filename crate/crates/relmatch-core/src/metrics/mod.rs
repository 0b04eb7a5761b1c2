//! Retrieval evaluation (bi-directional recall@K) and consensus caption
//! scoring.

mod cider;
mod retrieval;

pub use cider::{cider_d, CiderModel};
pub use retrieval::{
    eval_retrieval, format_table, gold_ranks, recall_at_k, similarity_grid, Direction,
    DirectionMetrics, EvalConfig, RetrievalReport, RetrievalResult,
};
