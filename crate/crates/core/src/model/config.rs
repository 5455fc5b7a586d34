use serde::{Deserialize, Serialize};

use crate::data::{NUM_CLASSES, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::tensor::TensorError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub mlp_hidden: usize,
    /// Number of soft prompt vectors (and of bottleneck words).
    pub n_prompt: usize,
    pub vocab_size: usize,
    pub classes: usize,
    /// Rows of the decoder position table.
    pub max_positions: usize,
    /// Put `<bos>` in front of the soft prompt.
    pub bos_prefix: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch: 4,
            d_model: 64,
            heads: 4,
            enc_blocks: 2,
            dec_blocks: 2,
            mlp_hidden: 128,
            n_prompt: 8,
            vocab_size: 59,
            classes: NUM_CLASSES,
            max_positions: 18,
            bos_prefix: false,
        }
    }
}

impl ModelConfig {
    /// V=16, d=8, n=4, one block each, 16×16 images.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            patch: 4,
            d_model: 8,
            heads: 2,
            enc_blocks: 1,
            dec_blocks: 1,
            mlp_hidden: 16,
            n_prompt: 4,
            vocab_size: 16,
            classes: NUM_CLASSES,
            max_positions: 10,
            bos_prefix: false,
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Decoder length of the soft-prompt sequence (prompt plus optional `<bos>`).
    pub fn prompt_len(&self) -> usize {
        self.n_prompt + usize::from(self.bos_prefix)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(TensorError::dim(
                "encode_image",
                format!("image size {} not divisible by patch {}", self.image_size, self.patch),
            )
            .into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Argument(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.n_prompt == 0 {
            return Err(Error::Argument("n_prompt must be at least 1".into()));
        }
        if self.vocab_size < self.n_prompt + NUM_SPECIAL {
            return Err(Error::Argument(format!(
                "vocabulary of {} cannot hold {} distinct non-special tokens",
                self.vocab_size, self.n_prompt
            )));
        }
        if self.max_positions < 2 * self.n_prompt + usize::from(self.bos_prefix) {
            return Err(Error::Argument(format!(
                "max_positions {} too small for no-repetition decoding of {} tokens",
                self.max_positions, self.n_prompt
            )));
        }
        if self.classes == 0 || self.mlp_hidden == 0 || self.enc_blocks == 0 && self.dec_blocks == 0 {
            return Err(Error::Argument("degenerate model dimensions".into()));
        }
        Ok(())
    }
}
