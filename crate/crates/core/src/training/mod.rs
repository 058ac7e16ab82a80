//! AdamW, the learning-rate schedule, cross-entropy, dataset readers,
//! augmentation, checkpoints and the epoch loop.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod loss;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use augment::{augment, AugmentConfig};
pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint, CheckpointMeta, Record};
pub use data::{load, load_cifar, load_mnist, Dataset, DatasetKind, Split};
pub use loss::{cross_entropy, cross_entropy_bwd, cross_entropy_fwd};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::{lr_at, ScheduleConfig};
pub use trainer::{evaluate, mean_loss, read_log, train_step, EpochRecord, TrainConfig, Trainer, CHECKPOINT_FILE, LOG_FILE};
