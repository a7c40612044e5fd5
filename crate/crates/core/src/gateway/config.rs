use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::escalation::DEFAULT_ESCALATION_TIMEOUT_SECS;
use crate::telemetry::{DEFAULT_DRIFT_THRESHOLD, DEFAULT_DRIFT_TRIGGER};
use crate::triage::{ContainmentLevel, GuardianRule, InterruptibilitySLA};

/// Environment variable naming the config file when `--config` is absent.
pub const CONFIG_ENV: &str = "AGENTSAFE_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    pub threshold: f64,
    pub trigger_count: u32,
    pub response_level: ContainmentLevel,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_DRIFT_THRESHOLD,
            trigger_count: DEFAULT_DRIFT_TRIGGER,
            response_level: ContainmentLevel::Pause,
        }
    }
}

pub fn default_read_only_actions() -> BTreeSet<String> {
    ["read", "get", "search", "query", "list", "summarize"]
        .into_iter()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub ledger_id: String,
    /// JSON-Lines ledger file; in-memory when absent.
    pub ledger_path: Option<PathBuf>,
    /// Hex Ed25519 seed; created on first use.
    pub key_path: Option<PathBuf>,
    pub bind: String,
    pub bearer_token: Option<String>,
    pub escalation_timeout_secs: u64,
    /// Actions still permitted in read-only fallback mode.
    pub read_only_actions: BTreeSet<String>,
    /// Rate-limit factor while a session is at throttle level or above.
    pub default_throttle_factor: f64,
    pub drift: DriftConfig,
    pub guardian_rules: Vec<GuardianRule>,
    pub sla: InterruptibilitySLA,
    /// Named registers and policy files sessions may be opened against.
    pub registers: BTreeMap<String, PathBuf>,
    pub policies: BTreeMap<String, PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            ledger_id: "agentsafe".into(),
            ledger_path: None,
            key_path: None,
            bind: "127.0.0.1:8080".into(),
            bearer_token: None,
            escalation_timeout_secs: DEFAULT_ESCALATION_TIMEOUT_SECS,
            read_only_actions: default_read_only_actions(),
            default_throttle_factor: 0.5,
            drift: DriftConfig::default(),
            guardian_rules: GuardianRule::defaults(),
            sla: InterruptibilitySLA::default(),
            registers: BTreeMap::new(),
            policies: BTreeMap::new(),
        }
    }
}

impl GatewayConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: GatewayConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.ledger_path.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.key_path.as_mut() {
            fix(p);
        }
        cfg.registers.values_mut().for_each(fix);
        cfg.policies.values_mut().for_each(fix);
        Ok(cfg)
    }

    /// `explicit` if given, else the path in `AGENTSAFE_CONFIG`, else defaults.
    pub fn discover(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) => Self::load(Path::new(&p)),
                None => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.default_throttle_factor > 0.0 && self.default_throttle_factor <= 1.0) {
            return Err(ConfigError::Invalid("default_throttle_factor must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.drift.threshold) || self.drift.trigger_count == 0 {
            return Err(ConfigError::Invalid("drift threshold must be in [0, 1] and trigger_count >= 1".into()));
        }
        for rule in &self.guardian_rules {
            rule.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.sla.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub(crate) fn guardian_window_ms(&self) -> i64 {
        use crate::triage::GuardianKind::*;
        self.guardian_rules
            .iter()
            .map(|r| match r.kind {
                DenialBurst { window_secs, .. } | ScopeSpread { window_secs, .. } => window_secs,
                RateSpike { .. } | QuarantineTouch => 1,
            })
            .max()
            .unwrap_or(1) as i64
            * 1000
    }
}
