//! Codec selection and hyperparameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adc::AdcConfig;
use crate::cost::BITS_PER_FEATURE;
use crate::error::{Error, Result};
use crate::vit::VitConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    #[default]
    Base,
    Adc,
    TopK,
    RandTopK,
    BottleNet,
    C3sl,
}

impl CodecKind {
    pub const ALL: [CodecKind; 6] = [
        CodecKind::Base,
        CodecKind::Adc,
        CodecKind::TopK,
        CodecKind::RandTopK,
        CodecKind::BottleNet,
        CodecKind::C3sl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CodecKind::Base => "base",
            CodecKind::Adc => "adc",
            CodecKind::TopK => "topk",
            CodecKind::RandTopK => "randtopk",
            CodecKind::BottleNet => "bottlenet",
            CodecKind::C3sl => "c3sl",
        }
    }

    /// Tag byte used in frame headers.
    pub fn tag(self) -> u8 {
        match self {
            CodecKind::Base => 0,
            CodecKind::Adc => 1,
            CodecKind::TopK => 2,
            CodecKind::RandTopK => 3,
            CodecKind::BottleNet => 4,
            CodecKind::C3sl => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }
}

impl fmt::Display for CodecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CodecKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let key = lower.replace(['-', '_', '+'], "");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .or(match key.as_str() {
                "bottlenetpp" => Some(CodecKind::BottleNet),
                "c3" => Some(CodecKind::C3sl),
                _ => None,
            })
            .ok_or_else(|| Error::contract(format!("unknown codec `{s}`")))
    }
}

/// Default relative spread of the selection noise for randomised Top-K.
pub const DEFAULT_NOISE_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CodecConfig {
    Base,
    Adc(AdcConfig),
    /// `k` kept values per sample out of `D = n * d`.
    TopK { k: usize },
    RandTopK { k: usize, noise_scale: f64 },
    /// Bottleneck width `d'`.
    BottleNet { width: usize },
    /// Samples superposed per slot `R`.
    C3sl { ratio: usize },
}

impl CodecConfig {
    pub fn kind(&self) -> CodecKind {
        match self {
            CodecConfig::Base => CodecKind::Base,
            CodecConfig::Adc(_) => CodecKind::Adc,
            CodecConfig::TopK { .. } => CodecKind::TopK,
            CodecConfig::RandTopK { .. } => CodecKind::RandTopK,
            CodecConfig::BottleNet { .. } => CodecKind::BottleNet,
            CodecConfig::C3sl { .. } => CodecKind::C3sl,
        }
    }

    /// Hyperparameters that hit an overall ratio `xi` as closely as integer
    /// rounding allows.
    pub fn for_ratio(kind: CodecKind, xi: f64, model: &VitConfig, batch: usize) -> Result<Self> {
        if !(xi > 0.0 && xi <= 1.0) {
            return Err(Error::Config(format!("compression ratio {xi} outside (0, 1]")));
        }
        let features = model.features();
        Ok(match kind {
            CodecKind::Base => CodecConfig::Base,
            CodecKind::Adc => CodecConfig::Adc(AdcConfig::balanced(xi, batch, model.tokens())?),
            CodecKind::TopK | CodecKind::RandTopK => {
                let k = topk_for_ratio(xi, features);
                if kind == CodecKind::TopK {
                    CodecConfig::TopK { k }
                } else {
                    CodecConfig::RandTopK {
                        k,
                        noise_scale: DEFAULT_NOISE_SCALE,
                    }
                }
            }
            CodecKind::BottleNet => CodecConfig::BottleNet {
                width: ((xi * model.dim as f64).round() as usize).clamp(1, model.dim.saturating_sub(1).max(1)),
            },
            CodecKind::C3sl => {
                // Pick the slot count nearest to xi * B, then the smallest R
                // that fits the batch into that many slots.
                let slots = ((xi * batch as f64).round() as usize).clamp(1, batch);
                CodecConfig::C3sl {
                    ratio: batch.div_ceil(slots),
                }
            }
        })
    }

    pub fn validate(&self, model: &VitConfig, batch: usize) -> Result<()> {
        let features = model.features();
        match *self {
            CodecConfig::Base => Ok(()),
            CodecConfig::Adc(ref c) => c.validate(batch, model.tokens()),
            CodecConfig::TopK { k } | CodecConfig::RandTopK { k, .. } if k == 0 || k > features => Err(
                Error::Config(format!("top-k keeps {k} values but samples have {features}")),
            ),
            CodecConfig::RandTopK { noise_scale, .. } if !(noise_scale >= 0.0 && noise_scale.is_finite()) => {
                Err(Error::Config(format!("noise scale {noise_scale} must be non-negative")))
            }
            CodecConfig::TopK { .. } | CodecConfig::RandTopK { .. } => Ok(()),
            CodecConfig::BottleNet { width } if width == 0 || width > model.dim => Err(Error::Config(
                format!("bottleneck width {width} must lie in [1, {}]", model.dim),
            )),
            CodecConfig::BottleNet { .. } => Ok(()),
            CodecConfig::C3sl { ratio } if ratio == 0 || ratio > batch => Err(Error::Config(format!(
                "superposition factor {ratio} must lie in [1, {batch}]"
            ))),
            CodecConfig::C3sl { .. } => Ok(()),
        }
    }
}

/// Nearest `k` for Top-K, whose overall ratio is
/// `k/D * (1 + log2(D) / (2 phi))`.
pub fn topk_for_ratio(xi: f64, features: usize) -> usize {
    let d = features as f64;
    let per_value = 1.0 + d.log2() / (2.0 * BITS_PER_FEATURE);
    ((xi * d / per_value).round() as usize).clamp(1, features)
}
