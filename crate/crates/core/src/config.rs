//! Flat run configuration shared by the config file, the command line and
//! the handshake message.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adc::{AdcConfig, MergeVector};
use crate::codec::{topk_for_ratio, CodecConfig, CodecKind, DEFAULT_NOISE_SCALE};
use crate::cost::{compute_ratio, CostModel, Ratios};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::kmeans::KMeansParams;
use crate::optim::AdamConfig;
use crate::transport::TransportKind;
use crate::vit::VitConfig;
use crate::wire::Dtype;

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "SPLITVIT_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub codec: CodecKind,
    /// Target overall compression ratio; codec parameters not given
    /// explicitly are derived from it.
    pub xi: Option<f64>,
    pub clusters: Option<usize>,
    pub tokens: Option<usize>,
    pub merge_vector: MergeVector,
    pub kmeans_iters: usize,
    pub kmeans_restarts: usize,
    /// Values kept per sample by Top-K and RandTopK.
    pub topk: Option<usize>,
    pub noise_scale: f64,
    pub bottleneck_width: Option<usize>,
    pub superposition: Option<usize>,

    pub batch_size: usize,
    pub split_point: usize,
    pub budget_epochs: f64,
    pub seed: u64,
    pub lr: f64,
    /// Iterations between evaluations; 0 means once per base epoch of
    /// iterations.
    pub eval_every: u64,
    pub max_iterations: Option<u64>,

    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub classes: usize,

    /// Dataset file; a synthetic set is generated when absent.
    pub data: Option<PathBuf>,
    pub samples_per_class: usize,
    pub data_seed: u64,
    pub signal_patches: usize,
    pub clutter: f64,
    pub noise: f64,

    pub wire: Dtype,
    pub transport: TransportKind,
    pub addr: String,
    pub out: PathBuf,
    pub name: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = VitConfig::default();
        let data = SyntheticSpec::default();
        Self {
            codec: CodecKind::Base,
            xi: None,
            clusters: None,
            tokens: None,
            merge_vector: MergeVector::ClsScore,
            kmeans_iters: KMeansParams::default().max_iters,
            kmeans_restarts: KMeansParams::default().restarts,
            topk: None,
            noise_scale: DEFAULT_NOISE_SCALE,
            bottleneck_width: None,
            superposition: None,
            batch_size: 32,
            split_point: model.split_point,
            budget_epochs: 2.0,
            seed: 0,
            lr: AdamConfig::default().lr,
            eval_every: 0,
            max_iterations: None,
            image_size: model.height,
            channels: model.channels,
            patch: model.patch,
            dim: model.dim,
            heads: model.heads,
            blocks: model.blocks,
            mlp_ratio: model.mlp_ratio,
            classes: model.classes,
            data: None,
            samples_per_class: data.samples_per_class,
            data_seed: data.seed,
            signal_patches: data.signal_patches,
            clutter: data.clutter,
            noise: data.noise,
            wire: Dtype::F32,
            transport: TransportKind::InProcess,
            addr: "127.0.0.1:7878".into(),
            out: PathBuf::from("runs"),
            name: None,
        }
    }
}

/// Everything derived from a [`RunConfig`] that both roles must agree on.
#[derive(Clone, Debug, PartialEq)]
pub struct Setup {
    pub model: VitConfig,
    pub codec: CodecConfig,
    pub batch: usize,
    pub ratios: Ratios,
    pub cost: CostModel,
    pub adam: AdamConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn model(&self) -> Result<VitConfig> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        let head_dim = self.dim / self.heads;
        let model = VitConfig {
            channels: self.channels,
            height: self.image_size,
            width: self.image_size,
            patch: self.patch,
            dim: self.dim,
            heads: self.heads,
            key_dim: head_dim,
            value_dim: head_dim,
            blocks: self.blocks,
            classes: self.classes,
            split_point: self.split_point,
            mlp_ratio: self.mlp_ratio,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            samples_per_class: self.samples_per_class,
            channels: self.channels,
            height: self.image_size,
            width: self.image_size,
            patch: self.patch,
            signal_patches: self.signal_patches,
            clutter: self.clutter,
            noise: self.noise,
            seed: self.data_seed,
            ..SyntheticSpec::default()
        }
    }

    fn misplaced(&self, allowed: &[&str]) -> Result<()> {
        let given = [
            ("clusters", self.clusters.is_some()),
            ("tokens", self.tokens.is_some()),
            ("topk", self.topk.is_some()),
            ("bottleneck_width", self.bottleneck_width.is_some()),
            ("superposition", self.superposition.is_some()),
        ];
        match given.iter().find(|(name, set)| *set && !allowed.contains(name)) {
            Some((name, _)) => Err(Error::Config(format!("`{name}` does not apply to codec {}", self.codec))),
            None => Ok(()),
        }
    }

    pub fn codec_config(&self, model: &VitConfig) -> Result<CodecConfig> {
        let batch = self.batch_size;
        let xi = self.xi;
        if let Some(x) = xi {
            if !(x > 0.0 && x <= 1.0) {
                return Err(Error::Config(format!("compression ratio {x} outside (0, 1]")));
            }
        }
        let need_xi = |what: &str| Error::Config(format!("codec {} needs --xi or {what}", self.codec));
        let codec = match self.codec {
            CodecKind::Base => {
                self.misplaced(&[])?;
                if xi.is_some_and(|x| x != 1.0) {
                    return Err(Error::Config("the base codec does not compress; drop --xi".into()));
                }
                CodecConfig::Base
            }
            CodecKind::Adc => {
                self.misplaced(&["clusters", "tokens"])?;
                let n = model.tokens();
                let (clusters, tokens) = match (self.clusters, self.tokens, xi) {
                    (Some(t), Some(k), _) => (t, k),
                    (Some(t), None, Some(x)) => (t, fit(x * (batch * n) as f64 / t as f64, n)),
                    (None, Some(k), Some(x)) => (fit(x * (batch * n) as f64 / k as f64, batch), k),
                    (None, None, Some(x)) => {
                        let c = AdcConfig::balanced(x, batch, n)?;
                        (c.clusters, c.tokens)
                    }
                    _ => return Err(need_xi("--clusters and --tokens")),
                };
                CodecConfig::Adc(AdcConfig {
                    clusters,
                    tokens,
                    merge_vector: self.merge_vector,
                    kmeans: KMeansParams {
                        max_iters: self.kmeans_iters,
                        restarts: self.kmeans_restarts,
                        seed: 0,
                    },
                })
            }
            CodecKind::TopK | CodecKind::RandTopK => {
                self.misplaced(&["topk"])?;
                let k = match (self.topk, xi) {
                    (Some(k), _) => k,
                    (None, Some(x)) => topk_for_ratio(x, model.features()),
                    _ => return Err(need_xi("--topk")),
                };
                if self.codec == CodecKind::TopK {
                    CodecConfig::TopK { k }
                } else {
                    CodecConfig::RandTopK {
                        k,
                        noise_scale: self.noise_scale,
                    }
                }
            }
            CodecKind::BottleNet => {
                self.misplaced(&["bottleneck_width"])?;
                match (self.bottleneck_width, xi) {
                    (Some(width), _) => CodecConfig::BottleNet { width },
                    (None, Some(x)) => CodecConfig::for_ratio(CodecKind::BottleNet, x, model, batch)?,
                    _ => return Err(need_xi("--bottleneck-width")),
                }
            }
            CodecKind::C3sl => {
                self.misplaced(&["superposition"])?;
                match (self.superposition, xi) {
                    (Some(ratio), _) => CodecConfig::C3sl { ratio },
                    (None, Some(x)) => CodecConfig::for_ratio(CodecKind::C3sl, x, model, batch)?,
                    _ => return Err(need_xi("--superposition")),
                }
            }
        };
        codec.validate(model, batch)?;
        Ok(codec)
    }

    pub fn setup(&self) -> Result<Setup> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.budget_epochs >= 0.0 && self.budget_epochs.is_finite()) {
            return Err(Error::Config(format!("budget of {} epochs", self.budget_epochs)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        let model = self.model()?;
        let codec = self.codec_config(&model)?;
        let ratios = compute_ratio(&codec, &model, self.batch_size)?;
        Ok(Setup {
            cost: CostModel::new(&model, self.batch_size),
            model,
            codec,
            batch: self.batch_size,
            ratios,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
        })
    }

    /// Directory name for this run's outputs.
    pub fn run_name(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        let mut name = self.codec.to_string();
        if let Some(x) = self.xi {
            name.push_str(&format!("-xi{x}"));
        }
        for (tag, v) in [
            ("t", self.clusters),
            ("k", self.tokens.or(self.topk)),
            ("w", self.bottleneck_width),
            ("r", self.superposition),
        ] {
            if let Some(v) = v {
                name.push_str(&format!("-{tag}{v}"));
            }
        }
        name.push_str(&format!("-l{}-b{}-s{}", self.split_point, self.batch_size, self.seed));
        name
    }

    /// Applies the output-directory environment override, if set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
            self.out = PathBuf::from(dir);
        }
    }
}

/// Nearest integer in `[1, max]`.
fn fit(x: f64, max: usize) -> usize {
    (x.round() as usize).clamp(1, max)
}

/// Mixes a run seed with a stream name and index into an independent seed.
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let mut h = mix(seed);
    for b in stream.bytes() {
        h = mix(h ^ b as u64);
    }
    mix(h ^ index)
}
