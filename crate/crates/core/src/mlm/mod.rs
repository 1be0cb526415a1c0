//! A small transformer-encoder masked language model, the padded cloze
//! prompt it is trained on, and the losses built on its masked-position
//! distributions.

mod checkpoint;
mod config;
mod model;
mod params;
mod prompt;
mod train;

pub use config::{ModelConfig, TrainingConfig};
pub use model::{MaskedLm, TrainingExample};
pub use params::{LayerParams, Params};
pub use prompt::{build_prompt, CompiledTemplate, PromptTemplate};
pub use train::{finetune, prepare_examples, Adam, FinetuneReport};

use crate::error::{Error, Result};
use crate::tokenizer::{PaddedSpan, TokenId, MASK_ID};

/// Floating-point type the model computes in: `f32` by default, `f64` for
/// gradient checks.
pub trait Scalar: nalgebra::RealField + Copy + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Positions of `[MASK]` in `prompt`.
pub fn mask_positions(prompt: &[TokenId]) -> Vec<usize> {
    prompt
        .iter()
        .enumerate()
        .filter(|&(_, &id)| id == MASK_ID)
        .map(|(i, _)| i)
        .collect()
}

/// Log-probability of each target id at the prompt's masked positions.
pub fn target_log_probs<F: Scalar>(model: &MaskedLm<F>, prompt: &[TokenId], target: &PaddedSpan) -> Result<Vec<f64>> {
    let positions = mask_positions(prompt);
    if positions.len() != target.len() {
        return Err(Error::Shape(format!(
            "prompt has {} masked positions but the target span has {}",
            positions.len(),
            target.len()
        )));
    }
    let log_probs = model.masked_log_probs(prompt, &positions)?;
    Ok(target
        .ids()
        .iter()
        .enumerate()
        .map(|(row, &id)| log_probs[(row, id)].as_f64())
        .collect())
}

/// Mean cross-entropy over every masked position, `[PAD]` targets included.
pub fn mlm_loss<F: Scalar>(model: &MaskedLm<F>, prompt: &[TokenId], target: &PaddedSpan) -> Result<f64> {
    let lp = target_log_probs(model, prompt, target)?;
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Product of the target probabilities over the masked span, computed in log
/// space.
pub fn pseudo_likelihood<F: Scalar>(model: &MaskedLm<F>, prompt: &[TokenId], target: &PaddedSpan) -> Result<f64> {
    Ok(target_log_probs(model, prompt, target)?.iter().sum::<f64>().exp())
}
