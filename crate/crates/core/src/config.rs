//! Run configuration and its plain-text `key = value` file format.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Unknown keys are rejected. [`RunConfig::to_text`] writes every
//! key in a fixed order, and reading that text back gives an equal config.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{geometric_counts, AugmentConfig, SyntheticSpec};
use crate::eaf::{BankConfig, ExpertKind};
use crate::error::{LeafError, Result};
use crate::partition::ConsistencyParams;

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($name::$variant => $text),+
                })
            }
        }

        impl FromStr for $name {
            type Err = LeafError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(LeafError::config(format!(
                        concat!("unknown ", stringify!($name), " '{}'"),
                        other
                    ))),
                }
            }
        }
    };
}

string_enum!(
    /// Training objective for the unlabeled data.
    Method {
        Leaf => "leaf",
        SupervisedOnly => "supervised_only",
        FixedThreshold => "fixed_threshold",
    }
);

string_enum!(
    /// Which view of an unlabeled sample defines the positive/negative split.
    PartitionSource {
        Strong => "strong",
        Weak => "weak",
    }
);

string_enum!(
    /// Values the consistency loss is computed on.
    LossScores {
        Probs => "probs",
        Logits => "logits",
    }
);

string_enum!(
    /// Unlabeled loss used by `method = leaf`.
    UnsupLoss {
        Ambiguous => "ambiguous",
        CrossEntropy => "cross_entropy",
        None => "none",
    }
);

/// Independent random streams derived from the single run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngStream {
    Data = 1,
    Split = 2,
    Init = 3,
    LabeledBatches = 4,
    LabeledAugment = 5,
    UnlabeledBatches = 6,
    UnlabeledAugment = 7,
}

pub fn stream_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Seed for a derived stream that needs a bare `u64`.
pub fn stream_seed(seed: u64, stream: RngStream) -> u64 {
    use rand::RngCore;
    stream_rng(seed, stream).next_u64()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lambda: f64,
    pub lr: f64,

    pub hidden_widths: Vec<usize>,
    pub feature_dim: usize,
    pub semantic_eaf: bool,
    pub instance_eaf: bool,
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_kind: ExpertKind,
    pub bottleneck_ratio: usize,

    pub unsup_loss: UnsupLoss,
    pub threshold_t: f64,
    pub margin_eps: f64,
    pub partition_source: PartitionSource,
    pub loss_scores: LossScores,
    pub fixed_tau: f64,
    pub augment_labeled: bool,

    pub num_classes: usize,
    pub input_dim: usize,
    pub largest_class: usize,
    pub imbalance_decay: f64,
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    pub n_labeled: usize,
    pub test_fraction: f64,
    pub weak_scale: f64,
    pub strong_scale: f64,
    pub mask_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Leaf,
            seed: 0,
            epochs: 20,
            batch_labeled: 32,
            batch_unlabeled: 32,
            lambda: 1.0,
            lr: 5e-4,

            hidden_widths: vec![64, 64],
            feature_dim: 32,
            semantic_eaf: true,
            instance_eaf: true,
            num_experts: 2,
            top_k: 1,
            expert_kind: ExpertKind::Residual,
            bottleneck_ratio: 4,

            unsup_loss: UnsupLoss::Ambiguous,
            threshold_t: 0.9,
            margin_eps: 0.0,
            partition_source: PartitionSource::Strong,
            loss_scores: LossScores::Probs,
            fixed_tau: 0.95,
            augment_labeled: true,

            num_classes: 7,
            input_dim: 32,
            largest_class: 2861,
            imbalance_decay: 0.7,
            cluster_separation: 3.0,
            noise_sigma: 1.0,
            n_labeled: 70,
            test_fraction: 0.2,
            weak_scale: 0.05,
            strong_scale: 0.5,
            mask_fraction: 0.2,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| LeafError::config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

fn join_list(values: &[usize]) -> String {
    values
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Keys in the order `to_text` writes them.
    pub const KEYS: &'static [&'static str] = &[
        "method",
        "seed",
        "epochs",
        "batch_labeled",
        "batch_unlabeled",
        "lambda",
        "lr",
        "hidden_widths",
        "feature_dim",
        "semantic_eaf",
        "instance_eaf",
        "num_experts",
        "top_k",
        "expert_kind",
        "bottleneck_ratio",
        "unsup_loss",
        "threshold_T",
        "margin_eps",
        "partition_source",
        "loss_scores",
        "fixed_tau",
        "augment_labeled",
        "num_classes",
        "input_dim",
        "largest_class",
        "imbalance_decay",
        "cluster_separation",
        "noise_sigma",
        "n_labeled",
        "test_fraction",
        "weak_scale",
        "strong_scale",
        "mask_fraction",
    ];

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "method" => self.method.to_string(),
            "seed" => self.seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_labeled" => self.batch_labeled.to_string(),
            "batch_unlabeled" => self.batch_unlabeled.to_string(),
            "lambda" => self.lambda.to_string(),
            "lr" => self.lr.to_string(),
            "hidden_widths" => join_list(&self.hidden_widths),
            "feature_dim" => self.feature_dim.to_string(),
            "semantic_eaf" => self.semantic_eaf.to_string(),
            "instance_eaf" => self.instance_eaf.to_string(),
            "num_experts" => self.num_experts.to_string(),
            "top_k" => self.top_k.to_string(),
            "expert_kind" => self.expert_kind.to_string(),
            "bottleneck_ratio" => self.bottleneck_ratio.to_string(),
            "unsup_loss" => self.unsup_loss.to_string(),
            "threshold_T" => self.threshold_t.to_string(),
            "margin_eps" => self.margin_eps.to_string(),
            "partition_source" => self.partition_source.to_string(),
            "loss_scores" => self.loss_scores.to_string(),
            "fixed_tau" => self.fixed_tau.to_string(),
            "augment_labeled" => self.augment_labeled.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "input_dim" => self.input_dim.to_string(),
            "largest_class" => self.largest_class.to_string(),
            "imbalance_decay" => self.imbalance_decay.to_string(),
            "cluster_separation" => self.cluster_separation.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "n_labeled" => self.n_labeled.to_string(),
            "test_fraction" => self.test_fraction.to_string(),
            "weak_scale" => self.weak_scale.to_string(),
            "strong_scale" => self.strong_scale.to_string(),
            "mask_fraction" => self.mask_fraction.to_string(),
            _ => return None,
        })
    }

    /// Sets one key from its text form. Does not validate cross-key
    /// constraints; call [`validate`](Self::validate) afterwards.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "method" => self.method = v.parse()?,
            "seed" => self.seed = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_labeled" => self.batch_labeled = parse_value(key, v)?,
            "batch_unlabeled" => self.batch_unlabeled = parse_value(key, v)?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "hidden_widths" => self.hidden_widths = parse_list(key, v)?,
            "feature_dim" => self.feature_dim = parse_value(key, v)?,
            "semantic_eaf" => self.semantic_eaf = parse_value(key, v)?,
            "instance_eaf" => self.instance_eaf = parse_value(key, v)?,
            "num_experts" => self.num_experts = parse_value(key, v)?,
            "top_k" => self.top_k = parse_value(key, v)?,
            "expert_kind" => self.expert_kind = v.parse()?,
            "bottleneck_ratio" => self.bottleneck_ratio = parse_value(key, v)?,
            "unsup_loss" => self.unsup_loss = v.parse()?,
            "threshold_T" => self.threshold_t = parse_value(key, v)?,
            "margin_eps" => self.margin_eps = parse_value(key, v)?,
            "partition_source" => self.partition_source = v.parse()?,
            "loss_scores" => self.loss_scores = v.parse()?,
            "fixed_tau" => self.fixed_tau = parse_value(key, v)?,
            "augment_labeled" => self.augment_labeled = parse_value(key, v)?,
            "num_classes" => self.num_classes = parse_value(key, v)?,
            "input_dim" => self.input_dim = parse_value(key, v)?,
            "largest_class" => self.largest_class = parse_value(key, v)?,
            "imbalance_decay" => self.imbalance_decay = parse_value(key, v)?,
            "cluster_separation" => self.cluster_separation = parse_value(key, v)?,
            "noise_sigma" => self.noise_sigma = parse_value(key, v)?,
            "n_labeled" => self.n_labeled = parse_value(key, v)?,
            "test_fraction" => self.test_fraction = parse_value(key, v)?,
            "weak_scale" => self.weak_scale = parse_value(key, v)?,
            "strong_scale" => self.strong_scale = parse_value(key, v)?,
            "mask_fraction" => self.mask_fraction = parse_value(key, v)?,
            other => return Err(LeafError::config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides on top of the current values.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| LeafError::config(format!("expected key=value, got '{pair}'")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                LeafError::config(format!("line {}: expected key = value", n + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| LeafError::config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# leaf run configuration\n");
        for key in Self::KEYS {
            let value = self.get(key).expect("every listed key is readable");
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| LeafError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Stable identifier: the first 16 hex digits of SHA-256 over the
    /// canonical text (which includes the seed).
    pub fn run_id(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_labeled", self.batch_labeled),
            ("batch_unlabeled", self.batch_unlabeled),
            ("feature_dim", self.feature_dim),
            ("num_experts", self.num_experts),
            ("top_k", self.top_k),
            ("bottleneck_ratio", self.bottleneck_ratio),
            ("input_dim", self.input_dim),
            ("largest_class", self.largest_class),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(LeafError::config(format!("{name} must be >= 1")));
            }
        }
        if self.hidden_widths.contains(&0) {
            return Err(LeafError::config("hidden widths must be >= 1"));
        }
        if self.top_k > self.num_experts {
            return Err(LeafError::config(format!(
                "top_k = {} exceeds num_experts = {}",
                self.top_k, self.num_experts
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(LeafError::config("lambda must be finite and >= 0"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(LeafError::config("lr must be > 0"));
        }
        ConsistencyParams {
            threshold: self.threshold_t,
            margin: self.margin_eps,
        }
        .validate()
        .map_err(|e| LeafError::config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.fixed_tau) {
            return Err(LeafError::config("fixed_tau must lie in [0, 1]"));
        }
        if self.num_classes < 2 {
            return Err(LeafError::config("num_classes must be >= 2"));
        }
        if !(self.imbalance_decay > 0.0 && self.imbalance_decay <= 1.0) {
            return Err(LeafError::config("imbalance_decay must lie in (0, 1]"));
        }
        if !(self.cluster_separation > 0.0) {
            return Err(LeafError::config("cluster_separation must be > 0"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(LeafError::config("noise_sigma must be >= 0"));
        }
        if self.n_labeled < self.num_classes {
            return Err(LeafError::config(format!(
                "n_labeled = {} is below num_classes = {}",
                self.n_labeled, self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(LeafError::config("test_fraction must lie in [0, 1)"));
        }
        for (name, v) in [
            ("weak_scale", self.weak_scale),
            ("strong_scale", self.strong_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(LeafError::config(format!("{name} must be >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            return Err(LeafError::config("mask_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.num_classes,
            dim: self.input_dim,
            class_counts: geometric_counts(self.num_classes, self.largest_class, self.imbalance_decay),
            separation: self.cluster_separation,
            noise_sigma: self.noise_sigma,
            seed: stream_seed(self.seed, RngStream::Data),
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig::scaled(
            self.noise_sigma,
            self.weak_scale,
            self.strong_scale,
            self.mask_fraction,
        )
    }

    pub fn consistency_params(&self) -> ConsistencyParams {
        ConsistencyParams {
            threshold: self.threshold_t,
            margin: self.margin_eps,
        }
    }

    pub fn bank_config(&self, width: usize) -> BankConfig {
        BankConfig {
            width,
            num_experts: self.num_experts,
            top_k: self.top_k,
            kind: self.expert_kind,
            bottleneck_ratio: self.bottleneck_ratio,
        }
    }

    /// Whether this configuration trains on unlabeled data at all.
    pub fn uses_unlabeled(&self) -> bool {
        match self.method {
            Method::SupervisedOnly => false,
            Method::FixedThreshold => true,
            Method::Leaf => self.unsup_loss != UnsupLoss::None,
        }
    }
}
