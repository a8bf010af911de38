//! Knowledge-graph side: the triple store, projection heads, contrastive
//! losses, KG candidate retrieval and head training.

pub mod head;
pub mod loss;
pub mod retrieval;
pub mod store;
pub mod train;

pub use head::{project, HeadGrad, Heads, HeadsGrad, ProjectionHead};
pub use loss::{
    answer_loss, entity_loss, fuse_features, infonce, infonce_with_grad, relation_loss, FusedFeature, InfoNceGrad,
    DEFAULT_TAU,
};
pub use retrieval::{answer_affinity, initial_answer_scores, kg_candidates, kg_similarity, KgCandidate};
pub use store::{load_triples, Triple, TripleStore};
pub use train::{
    sample_negatives, train_projections, ContrastiveBatch, ContrastiveTarget, FrozenLosses, TrainConfig,
    TrainOutcome, TrainingSample,
};
