//! Objectives for discovering novel classes on unlabeled data while keeping
//! the base classes: representation terms (contrastive, feature distillation)
//! and classifier terms (self-training on pseudo labels, triplet comparison,
//! probability regularization, prototype replay).
//!
//! Every loss has a tape form (`*_on`) used for training and a plain form that
//! evaluates it on tensors.

mod head;
mod losses;
mod mining;
mod prototypes;

pub use head::{HeadVars, JointHead};
pub use losses::{
    contrastive_loss, contrastive_loss_on, feature_replay_loss, feature_replay_loss_on, kd_loss, kd_loss_on,
    prob_regularization, prob_regularization_on, pseudo_label, rampup, self_train_loss, self_train_loss_on,
    total_loss, total_loss_on, triplet_loss, triplet_loss_on, LossParts, LossWeights,
};
pub use mining::{mine_triplet_indices, mine_triplets, TripletBatch};
pub use prototypes::{compute_prototypes, ClassPrototype, PrototypeStore};
