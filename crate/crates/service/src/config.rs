use std::path::{Path, PathBuf};
use std::time::Duration;

use modalgate_core::prompting::DEFAULT_MAX_TURNS;
use modalgate_core::router::Policy;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Bearer token required on API routes when set.
pub const SERVICE_TOKEN_ENV: &str = "MODALGATE_SERVICE_TOKEN";
pub const DEFAULT_RESPOND_TIMEOUT_SECS: u64 = 120;

/// Flat JSON service configuration. Backend tokens come from the environment,
/// never from this file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub llm: String,
    pub image: Option<String>,
    pub speech: Option<String>,
    pub scorer: Option<String>,
    pub references: Option<PathBuf>,
    /// Records answered by `mock:oracle`.
    pub oracle_corpus: Option<PathBuf>,
    pub policy: Policy,
    pub max_turns: usize,
    pub max_reasks: u32,
    pub artifact_dir: PathBuf,
    pub session_dir: PathBuf,
    pub eval_dir: PathBuf,
    pub respond_timeout_secs: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            llm: "mock:echo".into(),
            image: Some("mock:image".into()),
            speech: Some("mock:speech".into()),
            scorer: None,
            references: None,
            oracle_corpus: None,
            policy: Policy::Tuned,
            max_turns: DEFAULT_MAX_TURNS,
            max_reasks: 0,
            artifact_dir: "data/artifacts".into(),
            session_dir: "data/sessions".into(),
            eval_dir: "data/eval".into(),
            respond_timeout_secs: DEFAULT_RESPOND_TIMEOUT_SECS,
        }
    }
}

impl ServiceConfig {
    pub fn from_file(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))
    }

    /// Places all state directories under `root`.
    pub fn with_data_root(mut self, root: &Path) -> Self {
        self.artifact_dir = root.join("artifacts");
        self.session_dir = root.join("sessions");
        self.eval_dir = root.join("eval");
        self
    }

    pub fn respond_timeout(&self) -> Duration {
        Duration::from_secs(self.respond_timeout_secs)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.max_turns == 0 {
            return Err(ServiceError::Config("max_turns must be at least 1".into()));
        }
        if self.respond_timeout_secs == 0 {
            return Err(ServiceError::Config("respond_timeout_secs must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: ServiceConfig = serde_json::from_str(r#"{"port": 9000, "max_turns": 4}"#).unwrap();
        assert_eq!(cfg.port, 9000);
        assert_eq!(cfg.max_turns, 4);
        assert_eq!(cfg.respond_timeout_secs, 120);
        assert!(serde_json::from_str::<ServiceConfig>(r#"{"prot": 1}"#).is_err());
    }
}
