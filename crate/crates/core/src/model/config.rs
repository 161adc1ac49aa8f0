use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::verbalize::MAX_LEN;

/// What the decoder attends over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// distilled query + distilled neighborhood triples + graph-attention node features
    #[serde(rename = "ga-s2s")]
    GaS2s,
    /// the query's encoder states only
    #[serde(rename = "plain")]
    Plain,
    /// encoder states of the query with linearized 1-hop facts appended
    #[serde(rename = "flat-context")]
    FlatContext,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::GaS2s, Mode::Plain, Mode::FlatContext];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::GaS2s => "ga-s2s",
            Mode::Plain => "plain",
            Mode::FlatContext => "flat-context",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ga-s2s" => Ok(Mode::GaS2s),
            "plain" => Ok(Mode::Plain),
            "flat-context" => Ok(Mode::FlatContext),
            other => Err(Error::arg(format!(
                "unknown mode {other:?} (expected ga-s2s, plain or flat-context)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attn_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// relation vocabulary of the graph; graph attention uses `2R + 1` transforms
    pub num_relations: usize,
    /// distilled vectors per sequence
    pub m: usize,
    pub rgat_layers: usize,
    pub rgat_heads: usize,
    pub rgat_dropout: f64,
    pub mode: Mode,
    pub max_len: usize,
    pub relative_buckets: usize,
    pub relative_max_distance: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 512,
            encoder_layers: 6,
            decoder_layers: 6,
            attn_heads: 8,
            d_ff: 2048,
            vocab_size: crate::verbalize::DEFAULT_VOCAB_SIZE,
            num_relations: 1,
            m: 3,
            rgat_layers: 2,
            rgat_heads: 1,
            rgat_dropout: 0.0,
            mode: Mode::GaS2s,
            max_len: MAX_LEN,
            relative_buckets: 32,
            relative_max_distance: 128,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and desk-scale runs.
    pub fn tiny(vocab_size: usize, num_relations: usize) -> Self {
        ModelConfig {
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            attn_heads: 4,
            d_ff: 128,
            vocab_size,
            num_relations,
            m: 3,
            rgat_layers: 1,
            rgat_heads: 2,
            rgat_dropout: 0.0,
            mode: Mode::GaS2s,
            max_len: MAX_LEN,
            relative_buckets: 16,
            relative_max_distance: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.attn_heads == 0 || self.rgat_heads == 0 {
            return bad("d_model, attn_heads and rgat_heads must be positive".into());
        }
        if self.d_model % self.attn_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by attn_heads {}",
                self.d_model, self.attn_heads
            ));
        }
        if self.d_model % self.rgat_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by rgat_heads {}",
                self.d_model, self.rgat_heads
            ));
        }
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.rgat_dropout) {
            return bad(format!("rgat_dropout {} outside [0, 1)", self.rgat_dropout));
        }
        if self.vocab_size <= crate::verbalize::tokenizer::RESERVED.len() {
            return bad(format!("vocab_size {} is too small", self.vocab_size));
        }
        if self.max_len == 0 || self.max_len > MAX_LEN {
            return bad(format!("max_len must lie in 1..={MAX_LEN}"));
        }
        if self.num_relations == 0 {
            return bad("num_relations must be positive".into());
        }
        if self.relative_buckets < 4 || self.relative_max_distance < self.relative_buckets / 2 {
            return bad("relative position buckets are misconfigured".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.attn_heads
    }

    /// Relation transforms in the graph-attention layers: forward,
    /// inverse and one self-loop relation.
    pub fn rgat_relations(&self) -> usize {
        2 * self.num_relations + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny(300, 4).validate().unwrap();
    }

    #[test]
    fn divisibility_is_checked() {
        let mut c = ModelConfig::tiny(300, 4);
        c.rgat_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(300, 4);
        c.m = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
    }
}
