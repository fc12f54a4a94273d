use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{SplitSizes, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::losses::BetaSchedule;
use crate::model::ModelConfig;
use crate::nn::LayerConfig;
use crate::numcore::AdamConfig;

macro_rules! pipeline_config {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every knob of a pipeline run. Each field is addressable by its
        /// name in a `key=value` config file or a `--set` override.
        #[derive(Clone, Debug, PartialEq)]
        pub struct PipelineConfig {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for PipelineConfig {
            fn default() -> Self {
                PipelineConfig { $( $field: $default, )* }
            }
        }

        impl PipelineConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = value.trim().parse::<$ty>().map_err(|e| {
                            Error::Config(format!("{key}={value:?}: {e}"))
                        })?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            /// Canonical `key=value` lines in declaration order.
            pub fn to_kv(&self) -> String {
                let mut out = String::new();
                $( let _ = writeln!(out, "{}={}", stringify!($field), self.$field); )*
                out
            }
        }
    };
}

pipeline_config! {
    seed: u64 = 1,
    data_seed: u64 = 1,

    vocab_size: usize = 24,
    feature_dim: usize = 16,
    min_len: usize = 3,
    max_len: usize = 7,
    kmin: usize = 8,
    kmax: usize = 12,
    noise_sigma: f64 = 0.3,
    punctuation_prob: f64 = 0.25,
    mapping_seed: u64 = 17,
    mt_train: usize = 400,
    asr_train: usize = 200,
    st_train: usize = 60,
    dev: usize = 40,
    test: usize = 40,

    model_dim: usize = 64,
    heads: usize = 4,
    ffn_dim: usize = 256,
    conv_layers: usize = 3,
    speech_layers: usize = 2,
    text_layers: usize = 2,
    decoder_layers: usize = 2,
    dropout: f64 = 0.1,

    tau: f64 = 0.1,
    alpha: f64 = 0.3,
    r: f64 = 0.3,
    beta_interval: u64 = 50,
    warmup_freeze_steps: u64 = 50,
    /// Standard InfoNCE denominator (positive pair included).
    include_positive: bool = false,
    label_smoothing: f64 = 0.1,

    lr: f64 = 1e-3,
    adam_beta1: f64 = 0.9,
    adam_beta2: f64 = 0.98,
    adam_eps: f64 = 1e-8,
    batch_size: usize = 8,

    mt_max_epochs: usize = 20,
    asr_max_epochs: usize = 20,
    st_max_epochs: usize = 20,
    early_stop_patience: usize = 5,
    min_delta: f64 = 1e-4,
    checkpoint_average_k: usize = 5,

    beam: usize = 4,
    length_penalty: f64 = 1.0,
    max_decode_len: usize = 24,
    split_threshold: f64 = 0.3,

    use_sidae: bool = true,
    use_cl: bool = true,
    use_kd: bool = true,
}

impl PipelineConfig {
    /// Full-scale step counts for the beta interval and the speech-encoder
    /// warmup freeze. The defaults above are shrunk for desk-sized corpora.
    pub const FULL_SCALE_BETA_INTERVAL: u64 = 5000;
    pub const FULL_SCALE_WARMUP_FREEZE: u64 = 5000;

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, p) in [("dropout", self.dropout), ("label_smoothing", self.label_smoothing)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.alpha < 0.0 || self.r < 0.0 {
            return bad("alpha and r must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must be in [0, 1)".into());
        }
        if !(self.lr > 0.0) || !(self.adam_eps > 0.0) {
            return bad("lr and adam_eps must be positive".into());
        }
        if self.early_stop_patience < 1 {
            return bad("early_stop_patience must be at least 1".into());
        }
        if self.checkpoint_average_k < 1 || self.beam < 1 || self.beta_interval < 1 {
            return bad("checkpoint_average_k, beam and beta_interval must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for the contrastive terms".into());
        }
        if !(0.0..=1.0).contains(&self.split_threshold) {
            return bad("split_threshold must be in [0, 1]".into());
        }
        self.model_config().validate()?;
        self.task_spec().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            feature_dim: self.feature_dim,
            layer: LayerConfig {
                model_dim: self.model_dim,
                heads: self.heads,
                ffn_dim: self.ffn_dim,
                dropout: self.dropout,
            },
            conv_layers: self.conv_layers,
            speech_layers: self.speech_layers,
            text_layers: self.text_layers,
            decoder_layers: self.decoder_layers,
        }
    }

    pub fn task_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            vocab_size: self.vocab_size,
            min_len: self.min_len,
            max_len: self.max_len,
            kmin: self.kmin,
            kmax: self.kmax,
            feature_dim: self.feature_dim,
            noise_sigma: self.noise_sigma,
            punctuation_prob: self.punctuation_prob,
            mapping_seed: self.mapping_seed,
            sizes: SplitSizes {
                mt_train: self.mt_train,
                asr_train: self.asr_train,
                st_train: self.st_train,
                dev: self.dev,
                test: self.test,
            },
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn beta_schedule(&self) -> BetaSchedule {
        BetaSchedule::with_interval(self.beta_interval)
    }

    /// First 8 bytes of SHA-256 over the canonical key=value text.
    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
