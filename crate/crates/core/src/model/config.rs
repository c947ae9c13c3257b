use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ecn::ScalingForm;
use crate::error::{Error, FormatError, Result};

/// Which projection layer maps patch features into the model width.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    #[default]
    Ecn,
    /// One shared projection.
    P1,
    /// One projection per task.
    Pt,
}

impl ProjectionKind {
    pub const ALL: [ProjectionKind; 3] = [ProjectionKind::P1, ProjectionKind::Pt, ProjectionKind::Ecn];

    pub fn as_str(self) -> &'static str {
        match self {
            ProjectionKind::Ecn => "ecn",
            ProjectionKind::P1 => "p1",
            ProjectionKind::Pt => "pt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ecn" => Ok(ProjectionKind::Ecn),
            "p1" => Ok(ProjectionKind::P1),
            "pt" => Ok(ProjectionKind::Pt),
            other => Err(Error::Config(format!(
                "unknown projection {other:?}, expected ecn, p1 or pt"
            ))),
        }
    }
}

impl std::fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture hyperparameters. Every parameter shape is a function of this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_f: usize,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub tasks: usize,
    pub vocab_size: usize,
    /// Total category count across tasks; sizes the head-only classifier.
    pub categories: usize,
    pub gamma: f64,
    pub beta: f64,
    pub num_landmarks: usize,
    pub pinv_iterations: usize,
    pub max_decode_len: usize,
    pub pwff_hidden: usize,
    pub projection: ProjectionKind,
    pub exact_attention: bool,
    pub use_decoder: bool,
    pub router_bias: bool,
    pub scaling: ScalingForm,
    /// Adds a residual connection around the decoder feed-forward block.
    pub pwff_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_f: 64,
            d_model: 512,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 8,
            tasks: 5,
            vocab_size: 18,
            categories: 11,
            gamma: 5.0,
            beta: 5.0,
            num_landmarks: 32,
            pinv_iterations: 6,
            max_decode_len: 8,
            pwff_hidden: 2048,
            projection: ProjectionKind::Ecn,
            exact_attention: false,
            use_decoder: true,
            router_bias: true,
            scaling: ScalingForm::Normalized,
            pwff_residual: false,
        }
    }
}

const KEYS: [&str; 20] = [
    "d_f",
    "d_model",
    "encoder_layers",
    "decoder_layers",
    "heads",
    "tasks",
    "vocab_size",
    "categories",
    "gamma",
    "beta",
    "num_landmarks",
    "pinv_iterations",
    "max_decode_len",
    "pwff_hidden",
    "projection",
    "exact_attention",
    "use_decoder",
    "router_bias",
    "scaling",
    "pwff_residual",
];

impl ModelConfig {
    /// Same as the default but with the feed-forward width tied to `d_model`.
    pub fn with_width(d_model: usize) -> Self {
        ModelConfig {
            d_model,
            pwff_hidden: 4 * d_model,
            ..Self::default()
        }
    }

    /// Every violated invariant, in field order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let positive = [
            ("d_f", self.d_f),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("tasks", self.tasks),
            ("num_landmarks", self.num_landmarks),
            ("max_decode_len", self.max_decode_len),
            ("pwff_hidden", self.pwff_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                out.push(format!("{name} must be at least 1"));
            }
        }
        if self.heads > 0 && self.d_model % self.heads != 0 {
            out.push(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_model % 2 != 0 {
            out.push(format!("d_model {} must be even for positional encoding", self.d_model));
        }
        if self.use_decoder && self.vocab_size < 3 {
            out.push(format!("vocab_size {} must be at least 3", self.vocab_size));
        }
        if !self.use_decoder && self.categories == 0 {
            out.push("categories must be at least 1 without the decoder".into());
        }
        for (name, v) in [("gamma", self.gamma), ("beta", self.beta)] {
            if !(v.is_finite() && v > 0.0) {
                out.push(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// `key = value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("d_f", self.d_f.to_string());
        put("d_model", self.d_model.to_string());
        put("encoder_layers", self.encoder_layers.to_string());
        put("decoder_layers", self.decoder_layers.to_string());
        put("heads", self.heads.to_string());
        put("tasks", self.tasks.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("categories", self.categories.to_string());
        put("gamma", format!("{:?}", self.gamma));
        put("beta", format!("{:?}", self.beta));
        put("num_landmarks", self.num_landmarks.to_string());
        put("pinv_iterations", self.pinv_iterations.to_string());
        put("max_decode_len", self.max_decode_len.to_string());
        put("pwff_hidden", self.pwff_hidden.to_string());
        put("projection", self.projection.as_str().into());
        put("exact_attention", self.exact_attention.to_string());
        put("use_decoder", self.use_decoder.to_string());
        put("router_bias", self.router_bias.to_string());
        put("scaling", self.scaling.as_str().into());
        put("pwff_residual", self.pwff_residual.to_string());
        s
    }

    pub fn from_kv(text: &str) -> Result<Self, FormatError> {
        let bad = |msg: String| FormatError::MalformedConfig(msg);
        let mut values = std::collections::HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line without '=': {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(bad(format!("unknown key {k:?}")));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(bad(format!("duplicate key {k:?}")));
            }
        }
        let get = |k: &str| values.get(k).ok_or_else(|| bad(format!("missing key {k:?}")));
        let uint = |k: &str| -> Result<usize, FormatError> {
            get(k)?.parse().map_err(|_| bad(format!("{k} is not an unsigned integer")))
        };
        let float = |k: &str| -> Result<f64, FormatError> {
            get(k)?.parse().map_err(|_| bad(format!("{k} is not a number")))
        };
        let flag = |k: &str| -> Result<bool, FormatError> {
            get(k)?.parse().map_err(|_| bad(format!("{k} is not true/false")))
        };
        Ok(ModelConfig {
            d_f: uint("d_f")?,
            d_model: uint("d_model")?,
            encoder_layers: uint("encoder_layers")?,
            decoder_layers: uint("decoder_layers")?,
            heads: uint("heads")?,
            tasks: uint("tasks")?,
            vocab_size: uint("vocab_size")?,
            categories: uint("categories")?,
            gamma: float("gamma")?,
            beta: float("beta")?,
            num_landmarks: uint("num_landmarks")?,
            pinv_iterations: uint("pinv_iterations")?,
            max_decode_len: uint("max_decode_len")?,
            pwff_hidden: uint("pwff_hidden")?,
            projection: ProjectionKind::parse(get("projection")?)
                .map_err(|e| bad(e.to_string()))?,
            exact_attention: flag("exact_attention")?,
            use_decoder: flag("use_decoder")?,
            router_bias: flag("router_bias")?,
            scaling: ScalingForm::parse(get("scaling")?).map_err(|e| bad(e.to_string()))?,
            pwff_residual: flag("pwff_residual")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig {
            gamma: 0.1 + 0.2,
            projection: ProjectionKind::Pt,
            scaling: ScalingForm::Literal,
            use_decoder: false,
            ..ModelConfig::default()
        };
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn kv_rejects_unknown_and_missing_keys() {
        let text = ModelConfig::default().to_kv();
        assert!(matches!(
            ModelConfig::from_kv(&format!("{text}colour = red\n")),
            Err(FormatError::MalformedConfig(_))
        ));
        let missing: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert!(ModelConfig::from_kv(&missing).is_err());
    }

    #[test]
    fn validation_lists_every_problem() {
        let cfg = ModelConfig {
            d_model: 10,
            heads: 4,
            vocab_size: 2,
            beta: 0.0,
            ..ModelConfig::default()
        };
        let problems = cfg.problems();
        assert_eq!(problems.len(), 3, "{problems:?}");
        assert!(ModelConfig::default().validate().is_ok());
    }
}
