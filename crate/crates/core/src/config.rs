//! Training configuration and the flat `key = value` config format.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contrastive::IclForm;
use crate::disentangler::{DisentanglerConfig, HeadDepth};
use crate::error::{Error, Result};

/// Model family trained by a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Idcl,
    Lightgcn,
    NoIcl,
    NoCr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Idcl, Variant::Lightgcn, Variant::NoIcl, Variant::NoCr];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Idcl => "idcl",
            Variant::Lightgcn => "lightgcn",
            Variant::NoIcl => "no-icl",
            Variant::NoCr => "no-cr",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected idcl, lightgcn, no-icl or no-cr)")))
    }
}

/// Denominator of Recall@K.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RecallDenominator {
    /// `min(K, |relevant|)`.
    #[default]
    Truncated,
    /// `|relevant|`.
    Relevant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub dim: usize,
    pub intents: usize,
    pub layers: usize,
    pub head_depth: HeadDepth,
    pub normalize_aggregation: bool,

    pub tau: f64,
    pub icl_batch: usize,
    pub strict_contrast: bool,
    pub exact_log_expectation: bool,
    pub stop_grad_p: bool,

    pub epsilon: f64,
    pub stop_grad_pi: bool,
    /// Scale every concatenated behavior row to unit norm before the rates.
    #[serde(default)]
    pub cr_unit_rows: bool,

    pub rho: f64,

    pub lambda_icl: f64,
    pub lambda_cr: f64,
    pub lambda_l2: f64,

    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,

    pub val_frac: f64,
    pub test_frac: f64,
    /// When positive, hold out this many validation users and as many test
    /// users instead of a fraction of every user's behaviors.
    #[serde(default)]
    pub heldout_users: usize,
    /// Share of each held-out user's behaviors that is evaluated on.
    #[serde(default = "default_heldout_frac")]
    pub heldout_frac: f64,
    pub eval_ks: Vec<usize>,
    pub recall_denominator: RecallDenominator,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Idcl,
            dim: 64,
            intents: 8,
            layers: 3,
            head_depth: HeadDepth::Single,
            normalize_aggregation: false,
            tau: 0.2,
            icl_batch: 256,
            strict_contrast: false,
            exact_log_expectation: false,
            stop_grad_p: false,
            epsilon: 0.5,
            stop_grad_pi: false,
            cr_unit_rows: false,
            rho: 0.1,
            lambda_icl: 0.1,
            lambda_cr: 0.01,
            lambda_l2: 1e-5,
            lr: 1e-3,
            batch_size: 2048,
            max_epochs: 500,
            patience: 10,
            eval_every: 1,
            seed: 0,
            val_frac: 0.1,
            test_frac: 0.2,
            heldout_users: 0,
            heldout_frac: default_heldout_frac(),
            eval_ks: vec![20, 50, 100],
            recall_denominator: RecallDenominator::Truncated,
        }
    }
}

fn default_heldout_frac() -> f64 {
    0.5
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    /// Defaults for `variant`, with the loss terms it drops switched off.
    pub fn for_variant(variant: Variant) -> Self {
        Self::default().with_variant(variant)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        match variant {
            Variant::Idcl => {}
            Variant::NoIcl => self.lambda_icl = 0.0,
            Variant::NoCr => self.lambda_cr = 0.0,
            Variant::Lightgcn => {
                self.lambda_icl = 0.0;
                self.lambda_cr = 0.0;
            }
        }
        self
    }

    /// Whether the model carries the concept clustering and intent heads.
    pub fn disentangles(&self) -> bool {
        self.variant != Variant::Lightgcn
    }

    pub fn slice_dim(&self) -> usize {
        self.dim / self.intents.max(1)
    }

    pub fn disentangler(&self) -> DisentanglerConfig {
        DisentanglerConfig {
            dim: self.dim,
            intents: self.intents,
            head_depth: self.head_depth,
            normalize_aggregation: self.normalize_aggregation,
        }
    }

    pub fn icl_form(&self) -> IclForm {
        if self.exact_log_expectation {
            IclForm::ExactLogExpectation
        } else {
            IclForm::Expectation
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 {
            return fail("model.layers must be at least 1".into());
        }
        self.disentangler().validate()?;
        if !(self.tau > 0.0) {
            return fail(format!("icl.tau must be positive, got {}", self.tau));
        }
        if self.icl_batch < 2 {
            return fail("icl.batch must be at least 2".into());
        }
        if !(self.epsilon > 0.0) {
            return fail(format!("cr.epsilon must be positive, got {}", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return fail(format!("aug.rho must be in [0, 1), got {}", self.rho));
        }
        for (key, v) in [
            ("loss.lambda_icl", self.lambda_icl),
            ("loss.lambda_cr", self.lambda_cr),
            ("loss.lambda_l2", self.lambda_l2),
            ("train.lr", self.lr),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{key} must be a finite non-negative number, got {v}"));
            }
        }
        if !self.disentangles() && (self.lambda_icl > 0.0 || self.lambda_cr > 0.0) {
            return fail("the lightgcn variant has no intent heads; loss.lambda_icl and loss.lambda_cr must be 0".into());
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return fail("train.batch_size and train.eval_every must be positive".into());
        }
        if !(self.val_frac > 0.0) || !(self.test_frac >= 0.0) || self.val_frac + self.test_frac >= 1.0 {
            return fail(format!("invalid split fractions {} / {}", self.val_frac, self.test_frac));
        }
        if !(self.heldout_frac > 0.0 && self.heldout_frac < 1.0) {
            return fail(format!("split.heldout_frac must be in (0, 1), got {}", self.heldout_frac));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return fail("eval.ks must list positive cutoffs".into());
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.variant" => self.variant = value.parse()?,
            "model.d" => self.dim = parse_value(key, value)?,
            "model.k" => self.intents = parse_value(key, value)?,
            "model.layers" => self.layers = parse_value(key, value)?,
            "model.head_depth" => {
                self.head_depth = match value {
                    "1" => HeadDepth::Single,
                    "2" => HeadDepth::Double,
                    _ => return Err(Error::Config(format!("model.head_depth must be 1 or 2, got `{value}`"))),
                }
            }
            "model.normalize_aggregation" => self.normalize_aggregation = parse_bool(key, value)?,
            "icl.tau" => self.tau = parse_value(key, value)?,
            "icl.batch" => self.icl_batch = parse_value(key, value)?,
            "icl.exclude_positive" => self.strict_contrast = parse_bool(key, value)?,
            "icl.exact_log_expectation" => self.exact_log_expectation = parse_bool(key, value)?,
            "icl.stop_grad_p" => self.stop_grad_p = parse_bool(key, value)?,
            "cr.epsilon" => self.epsilon = parse_value(key, value)?,
            "cr.stop_grad_pi" => self.stop_grad_pi = parse_bool(key, value)?,
            "cr.unit_rows" => self.cr_unit_rows = parse_bool(key, value)?,
            "aug.rho" => self.rho = parse_value(key, value)?,
            "loss.lambda_icl" => self.lambda_icl = parse_value(key, value)?,
            "loss.lambda_cr" => self.lambda_cr = parse_value(key, value)?,
            "loss.lambda_l2" => self.lambda_l2 = parse_value(key, value)?,
            "train.lr" => self.lr = parse_value(key, value)?,
            "train.batch_size" => self.batch_size = parse_value(key, value)?,
            "train.max_epochs" => self.max_epochs = parse_value(key, value)?,
            "train.patience" => self.patience = parse_value(key, value)?,
            "train.eval_every" => self.eval_every = parse_value(key, value)?,
            "train.seed" => self.seed = parse_value(key, value)?,
            "split.val_frac" => self.val_frac = parse_value(key, value)?,
            "split.test_frac" => self.test_frac = parse_value(key, value)?,
            "split.heldout_users" => self.heldout_users = parse_value(key, value)?,
            "split.heldout_frac" => self.heldout_frac = parse_value(key, value)?,
            "eval.ks" => {
                self.eval_ks = value
                    .split(',')
                    .map(|k| parse_value(key, k.trim()))
                    .collect::<Result<_>>()?
            }
            "eval.recall_denominator" => {
                self.recall_denominator = match value {
                    "truncated" => RecallDenominator::Truncated,
                    "relevant" => RecallDenominator::Relevant,
                    _ => return Err(Error::Config(format!("unknown recall denominator `{value}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses the flat format on top of the defaults. Blank lines and `#`
    /// comments are ignored. A `model.variant` line applies the variant's loss
    /// switches before any later keys.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "model.variant" {
                cfg = cfg.with_variant(value.parse()?);
            } else {
                cfg.set(key, value)
                    .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Writes every key; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("model.variant", self.variant.to_string());
        kv("model.d", self.dim.to_string());
        kv("model.k", self.intents.to_string());
        kv("model.layers", self.layers.to_string());
        kv("model.head_depth", self.head_depth.layers().to_string());
        kv("model.normalize_aggregation", self.normalize_aggregation.to_string());
        kv("icl.tau", format!("{:?}", self.tau));
        kv("icl.batch", self.icl_batch.to_string());
        kv("icl.exclude_positive", self.strict_contrast.to_string());
        kv("icl.exact_log_expectation", self.exact_log_expectation.to_string());
        kv("icl.stop_grad_p", self.stop_grad_p.to_string());
        kv("cr.epsilon", format!("{:?}", self.epsilon));
        kv("cr.stop_grad_pi", self.stop_grad_pi.to_string());
        kv("cr.unit_rows", self.cr_unit_rows.to_string());
        kv("aug.rho", format!("{:?}", self.rho));
        kv("loss.lambda_icl", format!("{:?}", self.lambda_icl));
        kv("loss.lambda_cr", format!("{:?}", self.lambda_cr));
        kv("loss.lambda_l2", format!("{:?}", self.lambda_l2));
        kv("train.lr", format!("{:?}", self.lr));
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.max_epochs", self.max_epochs.to_string());
        kv("train.patience", self.patience.to_string());
        kv("train.eval_every", self.eval_every.to_string());
        kv("train.seed", self.seed.to_string());
        kv("split.val_frac", format!("{:?}", self.val_frac));
        kv("split.test_frac", format!("{:?}", self.test_frac));
        kv("split.heldout_users", self.heldout_users.to_string());
        kv("split.heldout_frac", format!("{:?}", self.heldout_frac));
        kv(
            "eval.ks",
            self.eval_ks.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        kv(
            "eval.recall_denominator",
            match self.recall_denominator {
                RecallDenominator::Truncated => "truncated",
                RecallDenominator::Relevant => "relevant",
            }
            .into(),
        );
        out
    }
}
