//! Run configuration.
//!
//! The config file is flat `key = value` text with dotted keys:
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! provider.backend = synthetic
//! provider.dim = 64
//! reward.gamma = 0.9
//! cleaning.min_turns = 3
//! ```
//!
//! Values come from three layers: built-in defaults, the file, then command
//! line flags. `FRAGTIDE_PROVIDER_URL` sits between the file and the flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fragtide_core::embeddings::{ProviderConfig, DEFAULT_SYNTHETIC_DIM, DEFAULT_TIMEOUT_MS};
use fragtide_core::metrics::WindowConfig;
use fragtide_core::pipeline::{CleaningConfig, TripletConfig};
use fragtide_core::rewards::RewardConfig;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PROVIDER_URL_ENV: &str = "FRAGTIDE_PROVIDER_URL";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("{key}: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

/// One layer of `key -> value` settings.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layer(pub BTreeMap<String, String>);

impl Layer {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut out = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, message: "expected key = value".into() })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, message: "empty key".into() });
            }
            if !KEYS.contains(&k) {
                return Err(ConfigError::UnknownKey(k.to_string()));
            }
            out.insert(k.to_string(), unquote(v).to_string());
        }
        Ok(Layer(out))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Layer::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<(), ConfigError> {
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.0.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Parses a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: 0, message: format!("expected key=value, got {pair:?}") })?;
        self.set(k.trim(), unquote(v.trim()))
    }
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

pub const KEYS: &[&str] = &[
    "seed",
    "parallelism",
    "provider.backend",
    "provider.path",
    "provider.base_url",
    "provider.timeout_ms",
    "provider.seed",
    "provider.dim",
    "reward.lambda_utt",
    "reward.lambda_img",
    "reward.gamma",
    "reward.fragment_fallback",
    "reward.format_gate",
    "reward.weights.format",
    "reward.weights.f1",
    "reward.weights.fragment",
    "window.window_turns",
    "window.overlap_turns",
    "triplet.top_k",
    "triplet.w_text",
    "triplet.w_img",
    "triplet.branch",
    "cleaning.min_turns",
    "cleaning.min_resolution_px",
    "cleaning.max_aspect_ratio",
    "cleaning.min_image_text_sim",
    "cleaning.min_topic_coherence",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub provider: Option<ProviderConfig>,
    pub reward: RewardConfig,
    pub window: WindowConfig,
    pub triplet: TripletConfig,
    pub cleaning: CleaningConfig,
    pub seed: u64,
    pub parallelism: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            provider: None,
            reward: RewardConfig::default(),
            window: WindowConfig::default(),
            triplet: TripletConfig::default(),
            cleaning: CleaningConfig::default(),
            seed: 0,
            parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { key: key.to_string(), value: value.to_string() })
}

impl RunConfig {
    /// Resolves `file` then `env_url` then `flags` over the defaults.
    pub fn resolve(file: &Layer, env_url: Option<&str>, flags: &Layer) -> Result<Self, ConfigError> {
        let mut merged = file.0.clone();
        if let Some(url) = env_url.filter(|u| !u.is_empty()) {
            merged.insert("provider.backend".into(), "http".into());
            merged.insert("provider.base_url".into(), url.to_string());
        }
        merged.extend(flags.0.iter().map(|(k, v)| (k.clone(), v.clone())));

        let mut cfg = RunConfig::default();
        for (k, v) in &merged {
            let v = v.as_str();
            match k.as_str() {
                "seed" => cfg.seed = parse(k, v)?,
                "parallelism" => cfg.parallelism = parse(k, v)?,
                "reward.lambda_utt" => cfg.reward.lambda_utt = parse(k, v)?,
                "reward.lambda_img" => cfg.reward.lambda_img = parse(k, v)?,
                "reward.gamma" => cfg.reward.gamma = parse(k, v)?,
                "reward.fragment_fallback" => cfg.reward.fragment_fallback = parse(k, v)?,
                "reward.format_gate" => cfg.reward.format_gate = parse(k, v)?,
                "reward.weights.format" => cfg.reward.combine_weights.format = parse(k, v)?,
                "reward.weights.f1" => cfg.reward.combine_weights.f1 = parse(k, v)?,
                "reward.weights.fragment" => cfg.reward.combine_weights.fragment = parse(k, v)?,
                "window.window_turns" => cfg.window.window_turns = parse(k, v)?,
                "window.overlap_turns" => cfg.window.overlap_turns = parse(k, v)?,
                "triplet.top_k" => cfg.triplet.top_k = parse(k, v)?,
                "triplet.w_text" => cfg.triplet.w_text = parse(k, v)?,
                "triplet.w_img" => cfg.triplet.w_img = parse(k, v)?,
                "triplet.branch" => cfg.triplet.branch = parse(k, v)?,
                "cleaning.min_turns" => cfg.cleaning.min_turns = parse(k, v)?,
                "cleaning.min_resolution_px" => cfg.cleaning.min_resolution_px = parse(k, v)?,
                "cleaning.max_aspect_ratio" => cfg.cleaning.max_aspect_ratio = parse(k, v)?,
                "cleaning.min_image_text_sim" => cfg.cleaning.min_image_text_sim = parse(k, v)?,
                "cleaning.min_topic_coherence" => cfg.cleaning.min_topic_coherence = parse(k, v)?,
                k if k.starts_with("provider.") => {}
                other => return Err(ConfigError::UnknownKey(other.to_string())),
            }
        }
        cfg.provider = provider_from(&merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        if self.parallelism == 0 {
            return Err(invalid("parallelism must be positive".into()));
        }
        self.reward.validate().map_err(|e| invalid(e.to_string()))?;
        self.window.validate().map_err(|e| invalid(e.to_string()))?;
        self.triplet.validate().map_err(|e| invalid(e.to_string()))?;
        self.cleaning.validate().map_err(|e| invalid(e.to_string()))?;
        if self.cleaning.min_turns == 0 {
            return Err(invalid("cleaning.min_turns must be positive".into()));
        }
        if let Some(p) = &self.provider {
            p.validate().map_err(invalid)?;
        }
        Ok(())
    }

    /// Every effective setting except `parallelism`, which does not change outputs.
    pub fn canonical(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("seed", self.seed.to_string());
        match &self.provider {
            None => {}
            Some(ProviderConfig::File { path }) => {
                m.insert("provider.backend", "file".into());
                m.insert("provider.path", path.display().to_string());
            }
            Some(ProviderConfig::Http { base_url, timeout_ms }) => {
                m.insert("provider.backend", "http".into());
                m.insert("provider.base_url", base_url.clone());
                m.insert("provider.timeout_ms", timeout_ms.to_string());
            }
            Some(ProviderConfig::Synthetic { seed, dim }) => {
                m.insert("provider.backend", "synthetic".into());
                m.insert("provider.seed", seed.to_string());
                m.insert("provider.dim", dim.to_string());
            }
        }
        let r = &self.reward;
        m.insert("reward.lambda_utt", r.lambda_utt.to_string());
        m.insert("reward.lambda_img", r.lambda_img.to_string());
        m.insert("reward.gamma", r.gamma.to_string());
        m.insert("reward.fragment_fallback", r.fragment_fallback.to_string());
        m.insert("reward.format_gate", r.format_gate.to_string());
        m.insert("reward.weights.format", r.combine_weights.format.to_string());
        m.insert("reward.weights.f1", r.combine_weights.f1.to_string());
        m.insert("reward.weights.fragment", r.combine_weights.fragment.to_string());
        m.insert("window.window_turns", self.window.window_turns.to_string());
        m.insert("window.overlap_turns", self.window.overlap_turns.to_string());
        let t = &self.triplet;
        m.insert("triplet.top_k", t.top_k.to_string());
        m.insert("triplet.w_text", t.w_text.to_string());
        m.insert("triplet.w_img", t.w_img.to_string());
        m.insert("triplet.branch", t.branch.to_string());
        let c = &self.cleaning;
        m.insert("cleaning.min_turns", c.min_turns.to_string());
        m.insert("cleaning.min_resolution_px", c.min_resolution_px.to_string());
        m.insert("cleaning.max_aspect_ratio", c.max_aspect_ratio.to_string());
        m.insert("cleaning.min_image_text_sim", c.min_image_text_sim.to_string());
        m.insert("cleaning.min_topic_coherence", c.min_topic_coherence.to_string());
        m
    }

    /// SHA-256 over the canonical settings and `extra` (command arguments).
    pub fn hash(&self, extra: &str) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.canonical() {
            h.update(format!("{k}={v}\n"));
        }
        h.update(b"--\n");
        h.update(extra.as_bytes());
        hex::encode(h.finalize())
    }
}

/// `provider.backend` picks the variant; without it, a base URL implies http.
fn provider_from(m: &BTreeMap<String, String>) -> Result<Option<ProviderConfig>, ConfigError> {
    let get = |k: &str| m.get(k).map(String::as_str);
    let backend = match (get("provider.backend"), get("provider.base_url")) {
        (Some(b), _) => b,
        (None, Some(_)) => "http",
        (None, None) => {
            if let Some(k) = m.keys().find(|k| k.starts_with("provider.")) {
                return Err(ConfigError::Invalid(format!("{k} given without provider.backend")));
            }
            return Ok(None);
        }
    };
    Ok(Some(match backend {
        "synthetic" => ProviderConfig::Synthetic {
            seed: get("provider.seed").map(|v| parse("provider.seed", v)).transpose()?.unwrap_or(0),
            dim: get("provider.dim").map(|v| parse("provider.dim", v)).transpose()?.unwrap_or(DEFAULT_SYNTHETIC_DIM),
        },
        "file" => ProviderConfig::File {
            path: get("provider.path")
                .ok_or_else(|| ConfigError::Invalid("file provider needs provider.path".into()))?
                .into(),
        },
        "http" => ProviderConfig::Http {
            base_url: get("provider.base_url")
                .ok_or_else(|| ConfigError::Invalid("http provider needs provider.base_url".into()))?
                .to_string(),
            timeout_ms: get("provider.timeout_ms")
                .map(|v| parse("provider.timeout_ms", v))
                .transpose()?
                .unwrap_or(DEFAULT_TIMEOUT_MS),
        },
        other => return Err(ConfigError::BadValue { key: "provider.backend".into(), value: other.to_string() }),
    }))
}

/// Expands a `--provider` value into config keys: `synthetic`,
/// `synthetic:SEED:DIM`, `file:PATH` or an `http(s)://` URL.
pub fn provider_flag(spec: &str, layer: &mut Layer) -> Result<(), ConfigError> {
    if spec.starts_with("http://") || spec.starts_with("https://") {
        layer.set("provider.backend", "http")?;
        return layer.set("provider.base_url", spec);
    }
    if let Some(path) = spec.strip_prefix("file:") {
        layer.set("provider.backend", "file")?;
        return layer.set("provider.path", path);
    }
    if spec == "synthetic" {
        return layer.set("provider.backend", "synthetic");
    }
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let (seed, dim) = rest.split_once(':').unwrap_or((rest, ""));
        layer.set("provider.backend", "synthetic")?;
        layer.set("provider.seed", seed)?;
        if !dim.is_empty() {
            layer.set("provider.dim", dim)?;
        }
        return Ok(());
    }
    Err(ConfigError::BadValue { key: "--provider".into(), value: spec.to_string() })
}
