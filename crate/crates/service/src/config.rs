use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use collab_core::experiment::{BackendKind, DEFAULT_DOCUMENT_CAP};
use collab_core::gateway::RemoteConfig;
use collab_core::persona::DescriptorTable;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid service configuration:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlackConfig {
    #[serde(default = "SlackConfig::default_secret_env")]
    pub signing_secret_env: String,
    #[serde(default = "SlackConfig::default_token_env")]
    pub bot_token_env: String,
    /// User id of the bot account, used to drop its own echoes.
    pub bot_user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_base_url: Option<String>,
}

impl SlackConfig {
    fn default_secret_env() -> String {
        "SLACK_SIGNING_SECRET".into()
    }

    fn default_token_env() -> String {
        "SLACK_BOT_TOKEN".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Event logs go here; without it they are kept in memory.
    pub data_dir: Option<PathBuf>,
    pub researcher_token_env: String,
    /// Descriptor table file; the built-in table when absent.
    pub descriptor_table: Option<PathBuf>,
    pub document_cap_bytes: usize,
    pub bot_participant_id: String,
    /// Overrides every experiment's backend selector.
    pub backend: Option<BackendKind>,
    /// Used by remote experiments that carry no remote block of their own.
    pub remote: Option<RemoteConfig>,
    pub token_budget: Option<u64>,
    pub tick_millis: u64,
    pub slack: Option<SlackConfig>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            data_dir: None,
            researcher_token_env: "COLLAB_RESEARCHER_TOKEN".into(),
            descriptor_table: None,
            document_cap_bytes: DEFAULT_DOCUMENT_CAP,
            bot_participant_id: "collab-bot".into(),
            backend: None,
            remote: None,
            token_budget: None,
            tick_millis: 1000,
            slack: None,
        }
    }
}

/// Secrets and files resolved at startup.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub bind: SocketAddr,
    pub researcher_token: String,
    pub table: DescriptorTable,
    pub slack: Option<SlackSecrets>,
}

#[derive(Debug, Clone)]
pub struct SlackSecrets {
    pub signing_secret: String,
    pub bot_token: String,
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent())
    }

    /// Relative paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config: ServiceConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?;
        if let Some(base) = base {
            for p in [&mut config.data_dir, &mut config.descriptor_table]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(config)
    }

    /// Checks everything needed to start, reading secrets through `env`.
    /// Reports every problem at once.
    pub fn resolve(&self, env: impl Fn(&str) -> Option<String>) -> Result<Resolved, ConfigError> {
        let mut errs = Vec::new();
        let secret = |errs: &mut Vec<String>, var: &str, what: &str| -> String {
            env(var).filter(|v| !v.trim().is_empty()).unwrap_or_else(|| {
                errs.push(format!("environment variable {var} ({what}) is not set"));
                String::new()
            })
        };
        let researcher_token = secret(&mut errs, &self.researcher_token_env, "researcher token");
        if self.backend == Some(BackendKind::Remote) {
            match &self.remote {
                Some(r) => {
                    secret(&mut errs, &r.api_key_env, "remote model API key");
                }
                None => errs.push("backend = \"remote\" needs a [remote] section".into()),
            }
        }
        let slack = self.slack.as_ref().map(|s| SlackSecrets {
            signing_secret: secret(&mut errs, &s.signing_secret_env, "Slack signing secret"),
            bot_token: secret(&mut errs, &s.bot_token_env, "Slack bot token"),
        });
        if let Some(s) = &self.slack {
            if s.bot_user_id.trim().is_empty() {
                errs.push("slack.bot_user_id is empty".into());
            }
        }

        let bind = self.bind.parse::<SocketAddr>().unwrap_or_else(|e| {
            errs.push(format!("bind `{}` is not a socket address: {e}", self.bind));
            SocketAddr::from(([127, 0, 0, 1], 0))
        });
        if self.tick_millis == 0 || self.tick_millis > 1000 {
            errs.push("tick_millis must be in 1..=1000".into());
        }
        if self.document_cap_bytes == 0 {
            errs.push("document_cap_bytes must be positive".into());
        }
        if self.bot_participant_id.trim().is_empty() {
            errs.push("bot_participant_id is empty".into());
        }
        if let Some(dir) = &self.data_dir {
            if dir.exists() && !dir.is_dir() {
                errs.push(format!("data_dir {} is not a directory", dir.display()));
            }
        }
        let table = match &self.descriptor_table {
            None => DescriptorTable::default_table(),
            Some(path) => match std::fs::read_to_string(path) {
                Ok(text) => DescriptorTable::parse(&text).unwrap_or_else(|e| {
                    errs.push(format!("{}: {e}", path.display()));
                    DescriptorTable::default_table()
                }),
                Err(e) => {
                    errs.push(format!("cannot read descriptor table {}: {e}", path.display()));
                    DescriptorTable::default_table()
                }
            },
        };
        if errs.is_empty() {
            Ok(Resolved {
                bind,
                researcher_token,
                table,
                slack,
            })
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(vars: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let vars: Vec<(String, String)> = vars.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        move |k| vars.iter().find(|(n, _)| n == k).map(|(_, v)| v.clone())
    }

    #[test]
    fn defaults_need_only_the_token() {
        let c = ServiceConfig::parse("", None).unwrap();
        let err = c.resolve(env(&[])).unwrap_err().to_string();
        assert!(err.contains("COLLAB_RESEARCHER_TOKEN"), "{err}");
        let ok = c.resolve(env(&[("COLLAB_RESEARCHER_TOKEN", "t")])).unwrap();
        assert_eq!(ok.bind.port(), 8080);
    }

    #[test]
    fn remote_backend_names_its_missing_key() {
        let c = ServiceConfig::parse(
            "backend = \"remote\"\n[remote]\nbase_url = \"https://example.test/v1\"\napi_key_env = \"MODEL_KEY\"\n",
            None,
        )
        .unwrap();
        let err = c
            .resolve(env(&[("COLLAB_RESEARCHER_TOKEN", "t")]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("MODEL_KEY"), "{err}");
    }

    #[test]
    fn problems_are_reported_together() {
        let c = ServiceConfig::parse(
            "bind = \"nowhere\"\ntick_millis = 0\n[slack]\nbot_user_id = \"\"\n",
            None,
        )
        .unwrap();
        let ConfigError::Invalid(errs) = c.resolve(env(&[])).unwrap_err() else {
            panic!()
        };
        assert_eq!(errs.len(), 6, "{errs:?}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ServiceConfig::parse("bnid = \"x\"", None).is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let c = ServiceConfig::parse("data_dir = \"data\"", Some(Path::new("/etc/collab"))).unwrap();
        assert_eq!(c.data_dir.unwrap(), Path::new("/etc/collab/data"));
    }
}
