//! Hole filling: a deterministic multi-view composite and a coarse
//! multi-view-conditioned inpainting GAN.

pub mod composite;
pub mod loss;
pub mod nets;
pub mod sample;
pub mod train;

pub use composite::{composite_fill, CompositeFill};
pub use loss::{adversarial_gen_loss, discount_mask, discounted_l1, wgan_gp_loss};
pub use nets::{Critic, Generator};
pub use sample::{make_dataset, make_training_sample, SilhouettePool, TrainingSample};
pub use train::{load_model, Model, StepStats, TrainConfig, Trainer};
