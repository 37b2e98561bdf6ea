//! Run configuration: flags over environment over config file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;
use tdeval::client::EndpointConfig;
use tdeval::pipeline::PipelineConfig;

/// Contents of the optional TOML file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub endpoint: EndpointConfig,
    pub pipeline: PipelineConfig,
    pub parallelism: Option<usize>,
    pub templates: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Endpoint values given on the command line or in the environment. Clap
/// already prefers a flag over its environment variable.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct EndpointArgs {
    /// Chat-completions base URL, e.g. http://127.0.0.1:8080/v1
    #[arg(long, env = "BASE_URL")]
    pub base_url: Option<String>,
    #[arg(long, env = "MODEL")]
    pub model: Option<String>,
    #[arg(long, env = "API_KEY", hide_env_values = true)]
    pub api_key: Option<String>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    #[arg(long)]
    pub max_concurrency: Option<usize>,
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    /// Mirror every request and response to this directory.
    #[arg(long)]
    pub transcript_dir: Option<PathBuf>,
}

impl EndpointArgs {
    pub fn merge(&self, mut base: EndpointConfig) -> EndpointConfig {
        if let Some(v) = &self.base_url {
            base.base_url = v.clone();
        }
        if let Some(v) = &self.model {
            base.model_name = v.clone();
        }
        if let Some(v) = &self.api_key {
            base.api_key = v.clone();
        }
        if let Some(v) = self.max_retries {
            base.max_retries = v;
        }
        if let Some(v) = self.max_concurrency {
            base.max_concurrency = v;
        }
        if let Some(v) = self.timeout_secs {
            base.request_timeout_secs = v;
        }
        if let Some(v) = &self.transcript_dir {
            base.transcript_dir = Some(v.clone());
        }
        base
    }
}

/// Logical CPUs capped at the endpoint's concurrency.
pub fn default_parallelism(endpoint: &EndpointConfig) -> usize {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    cpus.min(endpoint.max_concurrency).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file: FileConfig = toml::from_str(
            r#"
            parallelism = 3
            [endpoint]
            base_url = "http://file"
            model_name = "file-model"
            max_retries = 1
            [pipeline]
            variant = "no_captioning"
            failure_policy = "zero_score"
            "#,
        )
        .unwrap();
        let args = EndpointArgs { base_url: Some("http://flag".into()), ..Default::default() };
        let e = args.merge(file.endpoint.clone());
        assert_eq!(e.base_url, "http://flag");
        assert_eq!(e.model_name, "file-model");
        assert_eq!(e.max_retries, 1);
        assert_eq!(e.max_concurrency, 4);
        assert_eq!(file.pipeline.variant, tdeval::record::Variant::NoCaptioning);
        assert_eq!(file.parallelism, Some(3));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("paralelism = 3").is_err());
    }
}
