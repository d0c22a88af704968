//! Promptable 3D U-Net with hand-written backpropagation.
//!
//! Input channels are the image, a point heatmap and a box mask; an optional
//! category embedding is broadcast-added inside the bottleneck. Parameters
//! are grouped into blocks ordered from input to output
//! (`encoder_1 .. encoder_d, bottleneck, decoder_d .. decoder_1, head`), and
//! "the last k blocks" are the k blocks closest to the output.

mod checkpoint;
mod infer;
pub mod layers;
mod loss;
mod net;
mod optim;
mod prompt;

pub use checkpoint::{weights_hash, Checkpoint, CheckpointKind, Provenance, RngState, FORMAT};
pub use infer::{gaussian_weights, predict_mask, predict_probabilities, window_starts};
pub use loss::{bce_loss, dice_ce, dice_loss, sigmoid, DICE_SMOOTH};
pub use net::{
    ema_update, Block, Cache, Grads, MixPlan, Model, ModelConfig, Param, Sample, IN_CHANNELS, MIXSTYLE_LEVELS,
};
pub use optim::{Adam, AdamConfig};
pub use prompt::{
    dilated_box, encode_prompts, interior_point, oracle_prompts, sampled_prompts, Box3, PromptChannels, PromptPolicy,
    PromptSet, BOX_DILATION, POINT_SIGMA_MM,
};

use ndarray::Array3;

impl Sample {
    /// Builds a sample from an image and its encoded prompts.
    pub fn new(image: Array3<f64>, prompts: PromptChannels, category: Option<usize>) -> Self {
        Sample {
            image,
            point: prompts.point,
            boxes: prompts.boxes,
            category,
        }
    }
}

#[cfg(test)]
mod tests;
