//! Training configuration and its flat `key = value` text form.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::UniformitySample;
use crate::loss::ContrastAnchor;
use crate::model::{NoiseKind, NoiseSpec, DEFAULT_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    LightGcn,
    SglEd,
    SglNd,
    SglRw,
    SglWa,
    SimGcl,
    XSimGcl,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::LightGcn,
        Method::SglEd,
        Method::SglNd,
        Method::SglRw,
        Method::SglWa,
        Method::SimGcl,
        Method::XSimGcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::LightGcn => "lightgcn",
            Method::SglEd => "sgl-ed",
            Method::SglNd => "sgl-nd",
            Method::SglRw => "sgl-rw",
            Method::SglWa => "sgl-wa",
            Method::SimGcl => "simgcl",
            Method::XSimGcl => "xsimgcl",
        }
    }

    pub fn is_contrastive(self) -> bool {
        self != Method::LightGcn
    }

    pub fn uses_noise(self) -> bool {
        matches!(self, Method::SimGcl | Method::XSimGcl)
    }

    /// Graph-augmented SGL variants, whose adjacencies are rebuilt every epoch.
    pub fn uses_graph_augmentation(self) -> bool {
        matches!(self, Method::SglEd | Method::SglNd | Method::SglRw)
    }

    /// Noise-based methods drop `E0` from the layer average, both in training and inference.
    pub fn skips_input_layer(self) -> bool {
        self.uses_noise()
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Layer contrasted against the anchor in the cross-layer objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastLayer {
    Fixed(usize),
    /// Redrawn uniformly from `1..=L` for every mini-batch.
    Random,
}

impl FromStr for ContrastLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(ContrastLayer::Random);
        }
        s.parse()
            .map(ContrastLayer::Fixed)
            .map_err(|_| Error::Config(format!("contrast_layer must be an integer or `random`, got `{s}`")))
    }
}

impl fmt::Display for ContrastLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContrastLayer::Fixed(l) => write!(f, "{l}"),
            ContrastLayer::Random => f.write_str("random"),
        }
    }
}

fn parse_anchor(s: &str) -> Result<ContrastAnchor> {
    if s == "final" {
        return Ok(ContrastAnchor::Final);
    }
    s.parse()
        .map(ContrastAnchor::Layer)
        .map_err(|_| Error::Config(format!("contrast_anchor must be `final` or an integer, got `{s}`")))
}

fn anchor_to_string(a: ContrastAnchor) -> String {
    match a {
        ContrastAnchor::Final => "final".into(),
        ContrastAnchor::Layer(l) => l.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub layers: usize,
    pub dim: usize,
    pub lr: f64,
    pub reg: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub contrast_layer: ContrastLayer,
    pub contrast_anchor: ContrastAnchor,
    /// Edge/node keep probability for the graph-augmented variants.
    pub keep_rate: f64,
    pub noise: NoiseKind,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Evaluate on validation every this many epochs.
    pub eval_interval: usize,
    pub top_k: usize,
    /// Train on train ∪ validation for exactly `max_epochs` epochs.
    pub merge_validation: bool,
    pub uniformity: UniformitySample,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::XSimGcl,
            layers: 2,
            dim: DEFAULT_DIM,
            lr: 0.001,
            reg: 1e-4,
            batch_size: 2048,
            lambda: 0.2,
            epsilon: 0.2,
            tau: 0.2,
            contrast_layer: ContrastLayer::Fixed(1),
            contrast_anchor: ContrastAnchor::Final,
            keep_rate: 0.9,
            noise: NoiseKind::SignedUniform,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            eval_interval: 1,
            top_k: 20,
            merge_validation: false,
            uniformity: UniformitySample::default(),
        }
    }
}

const KEYS: &[&str] = &[
    "method",
    "layers",
    "dim",
    "lr",
    "reg",
    "batch_size",
    "lambda",
    "epsilon",
    "tau",
    "contrast_layer",
    "contrast_anchor",
    "keep_rate",
    "noise",
    "max_epochs",
    "patience",
    "seed",
    "eval_interval",
    "top_k",
    "merge_validation",
    "uniformity_item_min",
    "uniformity_users",
    "uniformity_pair_cap",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for key `{key}`")))
}

impl TrainConfig {
    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec::new(self.epsilon, self.noise)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "method" => self.method = value.parse()?,
            "layers" => self.layers = parse_value(key, value)?,
            "dim" => self.dim = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "reg" => self.reg = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "contrast_layer" => self.contrast_layer = value.parse()?,
            "contrast_anchor" => self.contrast_anchor = parse_anchor(value)?,
            "keep_rate" => self.keep_rate = parse_value(key, value)?,
            "noise" => self.noise = value.parse()?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "eval_interval" => self.eval_interval = parse_value(key, value)?,
            "top_k" => self.top_k = parse_value(key, value)?,
            "merge_validation" => self.merge_validation = parse_value(key, value)?,
            "uniformity_item_min" => self.uniformity.item_min_interactions = parse_value(key, value)?,
            "uniformity_users" => self.uniformity.num_users = parse_value(key, value)?,
            "uniformity_pair_cap" => self.uniformity.pair_cap = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines (`#` starts a comment). Returns the validated config and
    /// warnings for keys the chosen method ignores.
    pub fn parse(text: &str) -> Result<(Self, Vec<String>)> {
        let mut config = TrainConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_owned()) {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
            config.set(key, value)?;
        }
        config.validate()?;
        let warnings = config.ignored_keys(&seen)
            .into_iter()
            .map(|k| format!("`{k}` has no effect for method {}", config.method))
            .collect();
        Ok((config, warnings))
    }

    fn ignored_keys(&self, set_keys: &BTreeSet<String>) -> Vec<String> {
        let relevant = |key: &str| match key {
            "lambda" | "tau" => self.method.is_contrastive(),
            "epsilon" | "noise" => self.method.uses_noise(),
            "contrast_layer" | "contrast_anchor" => self.method == Method::XSimGcl,
            "keep_rate" => self.method.uses_graph_augmentation(),
            _ => true,
        };
        set_keys.iter().filter(|k| !relevant(k)).cloned().collect()
    }

    // negated comparisons so NaN fails every check
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        if self.dim == 0 || self.batch_size == 0 || self.top_k == 0 || self.eval_interval == 0 {
            return bad("dim, batch_size, top_k and eval_interval must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.reg >= 0.0) {
            return bad(format!("lr must be > 0 and reg >= 0 (lr = {}, reg = {})", self.lr, self.reg));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.lambda >= 0.0) || !(self.epsilon >= 0.0) {
            return bad("lambda and epsilon must be >= 0".into());
        }
        if !(self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            return bad(format!("keep_rate must lie in (0, 1], got {}", self.keep_rate));
        }
        if let ContrastLayer::Fixed(l) = self.contrast_layer {
            if l == 0 || l > self.layers {
                return bad(format!(
                    "contrast_layer {l} outside 1..={} layers",
                    self.layers
                ));
            }
        }
        if let ContrastAnchor::Layer(a) = self.contrast_anchor {
            if a == 0 || a > self.layers {
                return bad(format!(
                    "contrast_anchor {a} outside 1..={} layers",
                    self.layers
                ));
            }
        }
        Ok(())
    }

    /// The config in the same text form `parse` accepts.
    pub fn to_kv_string(&self) -> String {
        let entries: Vec<(&str, String)> = vec![
            ("method", self.method.to_string()),
            ("layers", self.layers.to_string()),
            ("dim", self.dim.to_string()),
            ("lr", self.lr.to_string()),
            ("reg", self.reg.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lambda", self.lambda.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("tau", self.tau.to_string()),
            ("contrast_layer", self.contrast_layer.to_string()),
            ("contrast_anchor", anchor_to_string(self.contrast_anchor)),
            ("keep_rate", self.keep_rate.to_string()),
            ("noise", self.noise.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("top_k", self.top_k.to_string()),
            ("merge_validation", self.merge_validation.to_string()),
            ("uniformity_item_min", self.uniformity.item_min_interactions.to_string()),
            ("uniformity_users", self.uniformity.num_users.to_string()),
            ("uniformity_pair_cap", self.uniformity.pair_cap.to_string()),
        ];
        debug_assert_eq!(entries.len(), KEYS.len());
        entries
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_xsimgcl_ifashion_setting() {
        let text = "method = xsimgcl\nlambda = 0.05\nepsilon = 0.05\ncontrast_layer = 3\nlayers = 3\n";
        let (c, warnings) = TrainConfig::parse(text).unwrap();
        assert_eq!(c.method, Method::XSimGcl);
        assert_eq!(c.lambda, 0.05);
        assert_eq!(c.epsilon, 0.05);
        assert_eq!(c.contrast_layer, ContrastLayer::Fixed(3));
        assert!(warnings.is_empty());
    }

    #[test]
    fn lightgcn_warns_about_lambda() {
        let (c, warnings) = TrainConfig::parse("method = lightgcn\nlambda = 0.5\n").unwrap();
        assert_eq!(c.method, Method::LightGcn);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("lambda"));
    }

    #[test]
    fn contrast_layer_beyond_depth_is_rejected() {
        let err = TrainConfig::parse("layers = 3\ncontrast_layer = 5\n").unwrap_err();
        assert!(err.to_string().contains("contrast_layer"));
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = TrainConfig::parse("learning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        assert!(TrainConfig::parse("lr = fast\n").unwrap_err().to_string().contains("lr"));
    }

    #[test]
    fn comments_and_random_layer() {
        let (c, _) = TrainConfig::parse("# sweep base\ncontrast_layer = random # per batch\n").unwrap();
        assert_eq!(c.contrast_layer, ContrastLayer::Random);
    }

    #[test]
    fn echo_parses_back() {
        let c = TrainConfig {
            method: Method::SglRw,
            keep_rate: 0.8,
            contrast_anchor: ContrastAnchor::Layer(2),
            ..TrainConfig::default()
        };
        let (back, _) = TrainConfig::parse(&c.to_kv_string()).unwrap();
        assert_eq!(back, c);
    }
}
