//! Pieces shared by the pretraining and fine-tuning loops.

use ndarray::Array3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{encode_prompts, sampled_prompts, PromptPolicy, Sample};
use crate::volume::{SegMask, Volume};

/// Aborts on non-finite losses and on sustained divergence (loss above
/// `factor` × the first loss for `window` consecutive steps).
#[derive(Clone, Debug)]
pub struct LossGuard {
    seed: u64,
    factor: f64,
    window: usize,
    initial: Option<f64>,
    over: usize,
}

impl LossGuard {
    pub const FACTOR: f64 = 10.0;
    pub const WINDOW: usize = 50;

    pub fn new(seed: u64) -> Self {
        Self::with_limits(seed, Self::FACTOR, Self::WINDOW)
    }

    pub fn with_limits(seed: u64, factor: f64, window: usize) -> Self {
        LossGuard {
            seed,
            factor,
            window,
            initial: None,
            over: 0,
        }
    }

    pub fn check(&mut self, step: usize, loss: f64, cases: &[&str]) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                seed: self.seed,
                cases: cases.iter().map(|s| s.to_string()).collect(),
            });
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > self.factor * initial {
            self.over += 1;
            if self.over >= self.window {
                return Err(Error::Diverged {
                    step,
                    loss,
                    initial,
                    window: self.window,
                });
            }
        } else {
            self.over = 0;
        }
        Ok(())
    }
}

/// Builds a training sample from an image patch and its mask. Prompts follow
/// `policy`, each prompt kind being dropped independently with probability
/// `dropout`; the target is the mask as floats.
pub fn prompted_sample<R: Rng>(
    image: &Volume,
    mask: &SegMask,
    policy: PromptPolicy,
    dropout: f64,
    category: Option<usize>,
    rng: &mut R,
) -> Result<(Sample, Array3<f64>)> {
    let mut prompts = sampled_prompts(mask, policy, category, rng);
    if dropout > 0.0 {
        if !prompts.points.is_empty() && rng.random_bool(dropout) {
            prompts.points.clear();
        }
        if !prompts.boxes.is_empty() && rng.random_bool(dropout) {
            prompts.boxes.clear();
        }
    }
    let ch = encode_prompts(&prompts, image.shape(), image.spacing())?;
    let target = mask.data().mapv(f64::from);
    Ok((Sample::new(image.data().clone(), ch, category), target))
}
