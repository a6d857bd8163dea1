use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::genome::VOCAB_SIZE;

/// Which encoder layer, if any, swaps its recurrence for causal attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MidAttention {
    #[default]
    Off,
    Layer(usize),
}

impl MidAttention {
    pub fn layer(self) -> Option<usize> {
        match self {
            MidAttention::Off => None,
            MidAttention::Layer(i) => Some(i),
        }
    }
}

impl fmt::Display for MidAttention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MidAttention::Off => f.write_str("off"),
            MidAttention::Layer(i) => write!(f, "{i}"),
        }
    }
}

impl Serialize for MidAttention {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MidAttention::Off => s.serialize_str("off"),
            MidAttention::Layer(i) => s.serialize_u64(*i as u64),
        }
    }
}

impl<'de> Deserialize<'de> for MidAttention {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = MidAttention;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("\"off\" or a layer index")
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Self::Value, E> {
                usize::try_from(v).map(MidAttention::Layer).map_err(|_| E::custom("layer index must be non-negative"))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Self::Value, E> {
                Ok(MidAttention::Layer(v as usize))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Self::Value, E> {
                match v {
                    "off" => Ok(MidAttention::Off),
                    other => other
                        .parse()
                        .map(MidAttention::Layer)
                        .map_err(|_| E::custom(format!("expected \"off\" or a layer index, got {other:?}"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// Positional signal inside the fusion attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionBias {
    /// Content-only scores.
    #[default]
    None,
    /// Fixed per-head linear penalty on the distance between the position a
    /// query row predicts and the key's sequence position.
    Distance,
    /// Learned per-head offset for each such distance, clipped at
    /// [`MAX_RELATIVE_DISTANCE`].
    Relative,
}

/// Distances at or beyond this share one learned offset.
pub const MAX_RELATIVE_DISTANCE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub ffn_mult: usize,
    pub n_experts: usize,
    pub moe_ratio: f64,
    pub n_heads: usize,
    pub mid_attention: MidAttention,
    pub alpha_aux: f64,
    pub fusion_bias: FusionBias,
    /// Width of a SiLU hidden layer in the output head; 0 means a linear head.
    pub head_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 8,
            vocab_size: VOCAB_SIZE,
            ffn_mult: 4,
            n_experts: 16,
            moe_ratio: 0.5,
            n_heads: 4,
            mid_attention: MidAttention::Off,
            alpha_aux: 0.2,
            fusion_bias: FusionBias::None,
            head_hidden: 0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "model.d_model ({}) must be a positive multiple of model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return fail("model.n_layers must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return fail("model.vocab_size must be at least 2".into());
        }
        if self.ffn_mult == 0 {
            return fail("model.ffn_mult must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.moe_ratio) {
            return fail(format!("model.moe_ratio ({}) must lie in [0, 1]", self.moe_ratio));
        }
        if self.n_experts == 0 {
            return fail("model.n_experts must be at least 1".into());
        }
        if !(self.alpha_aux >= 0.0 && self.alpha_aux.is_finite()) {
            return fail(format!("model.alpha_aux ({}) must be finite and >= 0", self.alpha_aux));
        }
        if let MidAttention::Layer(i) = self.mid_attention {
            if i >= self.n_layers {
                return fail(format!("model.mid_attention ({i}) must be below model.n_layers ({})", self.n_layers));
            }
        }
        Ok(())
    }

    /// Layer `i` carries an MoE block when the running MoE count
    /// `floor((i + 1) * ratio)` steps up at `i`. For ratio 0.5 these are the
    /// odd layers.
    pub fn is_moe_layer(&self, i: usize) -> bool {
        let before = (i as f64 * self.moe_ratio).floor();
        let after = ((i + 1) as f64 * self.moe_ratio).floor();
        after > before
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Channels of the gated recurrence.
    pub fn expanded(&self) -> usize {
        2 * self.d_model
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.d_model
    }
}
