//! Linear heads trained on frozen features.

mod focal;
mod head;
mod train;

pub use focal::{focal_loss_and_grad, focal_term, FocalLossParams};
pub use head::{concat_heads, sigmoid, sigmoid_scores, ClassifierHead, DistillationProjector};
pub use train::{
    train_classifier_head, train_classifier_head_with_history, train_distillation_head,
    train_distillation_head_with_history, SgdSchedule, Target, TrainSample, TrainedHead,
    TrainedProjector,
};
