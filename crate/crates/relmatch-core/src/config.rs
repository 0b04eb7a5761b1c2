//! Run configuration: a flat `key = value` file format with defaults,
//! unknown-key rejection, and a canonical echo embedded into every output
//! artifact.

use crate::captioner::CaptionerConfig;
use crate::error::{Error, Result};
use crate::matcher::{MatcherHyper, MatcherTrainConfig};
use serde::Serialize;
use std::path::Path;

/// Every tunable of the pipeline. Defaults follow the published training
/// recipe (joint dim 1024, 36 regions and relations, margin 0.2, the
/// two-phase Adam schedule); tests and desk runs shrink them via config
/// files or flags.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    /// Joint embedding dimension shared by text and visual projections.
    pub h: usize,
    /// Word embedding dimension of the matcher text encoder.
    pub embed_dim: usize,
    /// Raw region feature dimension.
    pub d_v: usize,
    /// Raw relation feature dimension.
    pub d_r: usize,
    /// Regions kept per image.
    pub k: usize,
    /// Relations kept per image (top confidence).
    pub m: usize,
    pub lr1: f64,
    pub epochs1: usize,
    pub lr2: f64,
    pub epochs2: usize,
    pub margin: f64,
    pub lambda_rgn: f64,
    pub lambda_rel: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Captioner hidden size (both LSTM layers).
    pub cap_hidden: usize,
    pub cap_embed: usize,
    /// Captioner-owned projection dimension for visual rows.
    pub cap_feat: usize,
    pub cap_att: usize,
    pub cap_lr: f64,
    pub cap_epochs: usize,
    pub scst_lr: f64,
    pub scst_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            h: 1024,
            embed_dim: 300,
            d_v: 2048,
            d_r: 4096,
            k: 36,
            m: 36,
            lr1: 0.0005,
            epochs1: 10,
            lr2: 0.00005,
            epochs2: 10,
            margin: 0.2,
            lambda_rgn: 9.0,
            lambda_rel: 9.0,
            batch_size: 128,
            max_len: 64,
            seed: 0,
            cap_hidden: 1000,
            cap_embed: 300,
            cap_feat: 1024,
            cap_att: 512,
            cap_lr: 0.0005,
            cap_epochs: 30,
            scst_lr: 0.00001,
            scst_steps: 100,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident : $kind:literal),+ $(,)?) => {
        const KEY_NAMES: &[&str] = &[$(stringify!($key)),+];

        impl RunConfig {
            fn set(&mut self, key: &str, raw: &str, line: usize) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = raw.trim().parse().map_err(|_| Error::Config {
                            line,
                            reason: format!(
                                concat!("key '", stringify!($key), "': invalid ", $kind, " {:?}"),
                                raw.trim()
                            ),
                        })?;
                        Ok(())
                    })+
                    _ => Err(Error::Config {
                        line,
                        reason: format!("unknown key {key:?}"),
                    }),
                }
            }

            /// Canonical text form; parsing the echo reproduces the config.
            pub fn echo(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!(concat!(stringify!($key), " = {}\n"), self.$key));)+
                out
            }
        }
    };
}

config_keys! {
    h: "integer",
    embed_dim: "integer",
    d_v: "integer",
    d_r: "integer",
    k: "integer",
    m: "integer",
    lr1: "float",
    epochs1: "integer",
    lr2: "float",
    epochs2: "integer",
    margin: "float",
    lambda_rgn: "float",
    lambda_rel: "float",
    batch_size: "integer",
    max_len: "integer",
    seed: "integer",
    cap_hidden: "integer",
    cap_embed: "integer",
    cap_feat: "integer",
    cap_att: "integer",
    cap_lr: "float",
    cap_epochs: "integer",
    scst_lr: "float",
    scst_steps: "integer",
}

impl RunConfig {
    /// Parse a `key = value` file with `#` comments over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: line_no,
                    reason: format!("expected 'key = value', got {line:?}"),
                });
            };
            config.set(key.trim(), value, line_no)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io_at(path))?;
        Self::parse(&text)
    }

    pub fn known_keys() -> &'static [&'static str] {
        KEY_NAMES
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("h", self.h),
            ("embed_dim", self.embed_dim),
            ("d_v", self.d_v),
            ("d_r", self.d_r),
            ("k", self.k),
            ("max_len", self.max_len),
            ("cap_hidden", self.cap_hidden),
            ("cap_embed", self.cap_embed),
            ("cap_feat", self.cap_feat),
            ("cap_att", self.cap_att),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config {
                    line: 0,
                    reason: format!("key '{name}' must be positive"),
                });
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config {
                line: 0,
                reason: "key 'batch_size' must be at least 2".into(),
            });
        }
        if self.lambda_rgn <= 0.0 || self.lambda_rel <= 0.0 {
            return Err(Error::Config {
                line: 0,
                reason: "temperatures must be positive".into(),
            });
        }
        if self.margin < 0.0 {
            return Err(Error::Config {
                line: 0,
                reason: "key 'margin' must be non-negative".into(),
            });
        }
        Ok(())
    }

    pub fn matcher_hyper(&self) -> MatcherHyper {
        MatcherHyper {
            lambda_regions: self.lambda_rgn,
            lambda_relations: self.lambda_rel,
            margin: self.margin,
            epsilon: 1e-8,
        }
    }

    pub fn matcher_train(&self) -> MatcherTrainConfig {
        MatcherTrainConfig {
            learning_rate_1: self.lr1,
            epochs_1: self.epochs1,
            learning_rate_2: self.lr2,
            epochs_2: self.epochs2,
            batch_size: self.batch_size,
            max_len: self.max_len,
            seed: self.seed,
        }
    }

    pub fn captioner_config(&self, vocab_size: usize) -> CaptionerConfig {
        CaptionerConfig {
            vocab_size,
            embed_dim: self.cap_embed,
            feature_dim: self.cap_feat,
            hidden: self.cap_hidden,
            attention_dim: self.cap_att,
            region_dim: self.d_v,
            relation_dim: self.d_r,
        }
    }
}
