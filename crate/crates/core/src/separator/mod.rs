//! Separation network, mask reconstruction, training and evaluation.

mod data;
mod eval;
mod model;
mod reconstruct;
mod train;
mod transfer;
mod unet;
mod visual;

pub use data::{build_batch, prepare_scenes, Batch, PreparedScene, Target, Track};
pub use eval::{channel_label, estimate_scene, evaluate, separate, separate_mono, EvalOptions, Estimator, ObjectQuery};
pub use model::{Lavss, LavssModel, ModelInput};
pub use reconstruct::{apply_mask_and_reconstruct, ground_truth_mask, masked_istft};
pub use train::{train, train_step, write_train_log, EpochLog, TrainConfig, BN_MOMENTUM};
pub use transfer::transfer_from_mono;
pub use unet::{UNet, LEAKY_SLOPE};
pub use visual::VisualEncoder;
