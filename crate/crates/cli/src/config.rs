//! TOML run configuration with `${VAR}` interpolation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use faithpref_core::critique::CritiqueConfig;
use faithpref_core::gateway::BackendConfig;
use faithpref_core::pipeline::PipelineConfig;
use faithpref_core::prefloss::LossParams;
use faithpref_core::prompt::PromptSet;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub beta: f64,
    pub alpha: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let p = LossParams::default();
        Self {
            beta: p.beta,
            alpha: p.alpha,
            steps: 500,
            lr: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn loss_params(&self) -> LossParams {
        LossParams {
            beta: self.beta,
            alpha: self.alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub corpus: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub sft_output: Option<PathBuf>,
    pub trace_output: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub preferences: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backend: Option<BackendConfig>,
    pub pipeline: PipelineConfig,
    pub critique: CritiqueConfig,
    pub loss: TrainConfig,
    pub io: IoConfig,
    /// Template overrides keyed by template name.
    pub prompts: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&raw)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn parse(raw: &str) -> Result<Self, CliError> {
        let text = interpolate_env(raw, |k| std::env::var(k).ok())?;
        toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        if let Some(b) = &mut self.backend {
            fix(&mut b.script_path);
        }
        let io = &mut self.io;
        for p in [
            &mut io.corpus,
            &mut io.output,
            &mut io.sft_output,
            &mut io.trace_output,
            &mut io.pairs,
            &mut io.preferences,
            &mut io.report,
        ] {
            fix(p);
        }
    }

    /// Checks everything that can be checked without touching the backend.
    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(b) = &self.backend {
            b.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        self.pipeline
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.critique
            .extraction
            .validate()
            .and_then(|_| self.critique.nli.validate())
            .map_err(|e| CliError::Config(format!("critique: {e}")))?;
        self.loss
            .loss_params()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !self.loss.lr.is_finite() || self.loss.lr <= 0.0 {
            return Err(CliError::Config("loss.lr must be > 0".into()));
        }
        self.prompt_set()?;
        Ok(())
    }

    pub fn prompt_set(&self) -> Result<PromptSet, CliError> {
        PromptSet::with_overrides(self.prompts.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .map_err(|e| CliError::Config(format!("prompts: {e}")))
    }

    pub fn backend(&self) -> Result<&BackendConfig, CliError> {
        self.backend
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [backend] section".into()))
    }

    /// Short stable hash of the canonical JSON form of the config.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Replaces `${NAME}` with the variable's value; `$$` is a literal `$`.
pub fn interpolate_env<F>(raw: &str, lookup: F) -> Result<String, CliError>
where
    F: Fn(&str) -> Option<String>,
{
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(pos) = rest.find('$') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos + 1..];
        if let Some(after) = tail.strip_prefix('$') {
            out.push('$');
            rest = after;
        } else if let Some(body) = tail.strip_prefix('{') {
            let end = body
                .find('}')
                .ok_or_else(|| CliError::Config("unterminated ${ in config".into()))?;
            let name = &body[..end];
            let value = lookup(name).ok_or_else(|| {
                CliError::Config(format!("environment variable {name} is not set"))
            })?;
            out.push_str(&value);
            rest = &body[end + 1..];
        } else {
            out.push('$');
            rest = tail;
        }
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse("[pipeline]\nsamples_per_dok = 3\n").unwrap_err();
        assert!(err.to_string().contains("samples_per_dok"), "{err}");
        let err = RunConfig::parse("bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn full_config_parses() {
        let cfg = RunConfig::parse(
            r#"
[backend]
kind = "openai_compatible"
base_url = "http://localhost:8000"
model = "m"
api_key_env = "KEY"

[pipeline]
samples_per_doc = 6
critique_strategy = "binary"
selection = "random"

[pipeline.sampling]
temperature = 0.8
top_p = 0.9
max_tokens = 100
n = 1

[critique]
max_parse_retries = 1

[loss]
beta = 0.2

[prompts]
summ = "Summarize: {Document}"
"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.pipeline.samples_per_doc, 6);
        assert_eq!(cfg.loss.beta, 0.2);
        assert_eq!(cfg.loss.alpha, 1.0);
        assert_eq!(cfg.prompt_set().unwrap().summ("d").unwrap(), "Summarize: d");
    }

    #[test]
    fn partial_decoding_tables_take_defaults() {
        let cfg = RunConfig::parse("[pipeline.sampling]\ntemperature = 0.7\n").unwrap();
        assert_eq!(cfg.pipeline.sampling.temperature, 0.7);
        assert_eq!(cfg.pipeline.sampling.top_p, 0.95);
        assert_eq!(cfg.pipeline.sampling.max_tokens, 160);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let cfg = RunConfig::parse("[pipeline]\nworkers = 0\n").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::parse("[prompts]\nsumm = \"{Document\"\n").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::parse("[backend]\nkind = \"openai_compatible\"\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn env_interpolation() {
        let lookup = |k: &str| (k == "HOST").then(|| "example".to_string());
        assert_eq!(
            interpolate_env("url = \"http://${HOST}/v1\" # $$5 $x", lookup).unwrap(),
            "url = \"http://example/v1\" # $5 $x"
        );
        assert!(interpolate_env("${MISSING}", lookup).is_err());
        assert!(interpolate_env("${HOST", lookup).is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.pipeline.rng_seed = 7;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }
}
