//! Joint training of embeddings and scorer: triple sampling, objectives, the
//! epoch loop with early stopping, and checkpoints.

mod loss;
mod model;
mod sampling;
mod trainer;

pub use loss::{bce_loss, bce_loss_grad, bpr_loss, bpr_loss_grad, sigmoid, softplus};
pub use model::{Context, Inference, ModelKind, ModelSpec, PairForward, RelevanceModel, Representation, Scorer};
pub use sampling::{sample_triples, sample_with_index, BprTriple, PositiveIndex, Sampled};
pub use trainer::{
    batch_loss, load_checkpoint, positives_only, save_checkpoint, train, train_lr_grid, train_with,
    validation_metric, Batch, BatchLoss, CheckpointMeta, EpochRecord, EvalMetric, Objective, TrainConfig,
    TrainData, TrainHistory,
};
