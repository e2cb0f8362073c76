use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TransformerError;

/// Named architecture presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    T1,
    T2,
    T3,
}

impl Architecture {
    /// (layers, heads, d_model, d_ff)
    pub fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            Self::T1 => (4, 4, 128, 512),
            Self::T2 => (6, 8, 256, 1024),
            Self::T3 => (6, 8, 512, 2048),
        }
    }
}

impl FromStr for Architecture {
    type Err = TransformerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace([' ', '_', '-'], "").as_str() {
            "t1" | "transformer1" => Ok(Self::T1),
            "t2" | "transformer2" => Ok(Self::T2),
            "t3" | "transformer3" => Ok(Self::T3),
            _ => Err(TransformerError::Config(format!("unknown model architecture `{s}` (expected T1, T2 or T3)"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_len: usize,
    pub tie_softmax: bool,
    pub label_smoothing: f64,
}

impl TransformerConfig {
    pub fn preset(arch: Architecture, vocab_size: usize) -> Self {
        let (num_layers, num_heads, d_model, d_ff) = arch.dims();
        Self {
            num_layers,
            num_heads,
            d_model,
            d_ff,
            dropout: 0.2,
            vocab_size,
            max_len: DEFAULT_MAX_LEN,
            tie_softmax: true,
            label_smoothing: 0.0,
        }
    }

    pub fn t1(vocab_size: usize) -> Self {
        Self::preset(Architecture::T1, vocab_size)
    }

    pub fn t2(vocab_size: usize) -> Self {
        Self::preset(Architecture::T2, vocab_size)
    }

    pub fn t3(vocab_size: usize) -> Self {
        Self::preset(Architecture::T3, vocab_size)
    }

    /// T1 with a quarter of its width (d_model 32, d_ff 128).
    pub fn t1_quarter(vocab_size: usize) -> Self {
        Self {
            d_model: 32,
            d_ff: 128,
            ..Self::t1(vocab_size)
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<(), TransformerError> {
        let err = |m: String| Err(TransformerError::Config(m));
        if self.num_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return err("num_heads, d_model and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return err(format!("d_model {} is not divisible by num_heads {}", self.d_model, self.num_heads));
        }
        if self.vocab_size < 5 {
            return err(format!("vocab_size {} leaves no room beyond the special tokens", self.vocab_size));
        }
        if self.max_len < 2 {
            return err(format!("max_len {} is too small", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return err(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        assert_eq!(TransformerConfig::t1(100).d_head(), 32);
        assert_eq!(TransformerConfig::t2(100).d_model, 256);
        assert_eq!(TransformerConfig::t3(100).d_ff, 2048);
        assert_eq!("Transformer 2".parse::<Architecture>().unwrap(), Architecture::T2);
        assert!("T4".parse::<Architecture>().is_err());
    }

    #[test]
    fn heads_must_divide() {
        let c = TransformerConfig {
            num_heads: 3,
            ..TransformerConfig::t1(100)
        };
        assert!(c.validate().is_err());
        assert!(TransformerConfig::t1_quarter(100).validate().is_ok());
    }
}
