//! Loss terms, optimizer, training loop, and checkpoints.

mod checkpoint;
mod losses;
mod optim;
mod trainer;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use losses::{
    batch_all_triplet, combo_loss, cross_entropy, gait_ce, valid_triplets, LossTerms, TERM_NAMES,
};
pub use optim::Sgd;
pub use trainer::{batch_loss, write_loss_trace, LossRecord, Trainer, TRACE_HEADER};
