use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// BERT-like: one stack, prompts spliced into it.
    Encoder,
    /// T5-like: text encoder plus a decoder that carries the prompt and a
    /// learned input vector.
    EncoderDecoder,
}

impl ModelKind {
    pub fn code(self) -> u8 {
        match self {
            ModelKind::Encoder => 0,
            ModelKind::EncoderDecoder => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ModelKind::Encoder),
            1 => Some(ModelKind::EncoderDecoder),
            _ => None,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Layers per stack.
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
    /// Text length, classification token included.
    pub text_len: usize,
    pub num_classes: usize,
    /// Width of the incoming visual features.
    pub visual_width: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(invalid("model needs at least one layer"));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(invalid(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.text_len == 0 || self.vocab < 2 || self.num_classes == 0 || self.ffn_mult == 0 {
            return Err(invalid("text_len, vocab, num_classes and ffn_mult must be positive (vocab >= 2)"));
        }
        if self.visual_width == 0 {
            return Err(invalid("visual_width must be positive"));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn ffn_width(&self) -> usize {
        self.width * self.ffn_mult
    }

    /// BERT-base shaped encoder with CLIP-sized visual features and the
    /// VQA answer vocabulary.
    pub fn paper_scale_encoder() -> Self {
        ModelSpec {
            kind: ModelKind::Encoder,
            layers: 12,
            width: 768,
            heads: 12,
            ffn_mult: 4,
            vocab: 30522,
            text_len: 16,
            num_classes: 3129,
            visual_width: 768,
        }
    }

    pub fn paper_scale_encoder_decoder() -> Self {
        ModelSpec {
            kind: ModelKind::EncoderDecoder,
            vocab: 32128,
            ..Self::paper_scale_encoder()
        }
    }
}
