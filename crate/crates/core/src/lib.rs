//! Low-dimensional, cluster-structured projections of precomputed sentence
//! embeddings, learned by minimizing a coding-rate-reduction objective, plus
//! the k-means baseline and retrieval/similarity evaluation around it.

pub mod cluster;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod projector;
pub mod rate;
pub mod rng;
pub mod store;
pub mod trainer;

pub use cluster::{
    assign_query, evaluate_head, evaluate_kmeans, head_model, kmeans, retrieval_accuracy,
    timed_pipeline, ClusterKind, ClusterModel, RetrievalSplit, SrRow, TimingReport,
};
pub use error::{Error, Result};
pub use eval::{cluster_agreement, spearman, sts_score, Agreement, EvalResult};
pub use projector::{
    backward, forward, gumbel_softmax, infer_memberships, ProjectorConfig, ProjectorParams,
};
pub use rate::{
    coding_rate, coding_rate_grad, cluster_rate, cluster_rate_grad, cosine_pair, mcr2_loss,
    mcr2_loss_grad, pair_similarity, LossTerms, MembershipMatrix, RateConfig,
};
pub use store::{EmbeddingMatrix, GoldScores, Pair, PairSet, SyntheticCorpus, SyntheticSpec};
pub use trainer::{default_lambda, train, TrainConfig, TrainHistory};
