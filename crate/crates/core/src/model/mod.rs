//! Small feed-forward classifier with exact reverse-mode gradients, Adam with
//! cosine decay, and the pretraining / fine-tuning drivers.

mod mlp;
mod optim;
mod train;

pub use mlp::{Activation, Gradients, Layer, LayerGrad, Mlp, Tape};
pub use optim::{adam_step, cosine_lr, AdamParams, OptimizerState};
pub use train::{
    finetune_balanced, pretrain_standard, EpochRecord, FinetuneConfig, FreezeSpec, PretrainConfig, TrainTrace,
};
