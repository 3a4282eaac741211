use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::sim::mix;
use super::{
    CostLedger, EncoderEndpoint, GenerationEndpoint, RetryPolicy, Role, Sampling, SimWorld, SimulatedAgentProfile,
    SimulatedEncoder, SimulatedGenerator, WireEncoder, WireGenerator,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Wire,
    Simulated,
}

fn d_top_logprobs() -> u32 {
    5
}
fn d_max_tokens() -> u32 {
    64
}
fn d_concurrency() -> usize {
    4
}
fn d_timeout() -> u64 {
    60
}
fn d_dimension() -> usize {
    64
}
fn d_affinity() -> f64 {
    0.8
}

fn resolve_key(env: Option<&str>) -> Result<Option<String>> {
    match env {
        None => Ok(None),
        Some(name) => std::env::var(name)
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("environment variable {name} is not set"))),
    }
}

fn wire_parts<'a>(base_url: &'a Option<String>, model_id: &'a Option<String>) -> Result<(&'a str, &'a str)> {
    match (base_url.as_deref(), model_id.as_deref()) {
        (Some(u), Some(m)) => Ok((u, m)),
        _ => Err(Error::InvalidConfig("wire endpoints need base_url and model_id".into())),
    }
}

/// Generation endpoint settings. Secrets are never stored here: `api_key_env`
/// names the environment variable holding the key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub kind: EndpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "d_top_logprobs")]
    pub top_logprobs: u32,
    #[serde(default = "d_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "d_concurrency")]
    pub max_concurrency: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<SimulatedAgentProfile>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "d_timeout")]
    pub timeout_secs: u64,
    /// Hard cap on calls to this endpoint across the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_calls: Option<u64>,
}

impl EndpointConfig {
    pub fn simulated(profile: SimulatedAgentProfile, temperature: f64) -> Self {
        Self {
            kind: EndpointKind::Simulated,
            base_url: None,
            model_id: None,
            api_key_env: None,
            temperature,
            top_logprobs: d_top_logprobs(),
            max_tokens: d_max_tokens(),
            max_concurrency: d_concurrency(),
            profile: Some(profile),
            retry: RetryPolicy::default(),
            timeout_secs: d_timeout(),
            max_calls: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::InvalidConfig(format!("temperature {}", self.temperature)));
        }
        match self.kind {
            EndpointKind::Wire => {
                wire_parts(&self.base_url, &self.model_id)?;
            }
            EndpointKind::Simulated => {
                let p = self
                    .profile
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("simulated endpoints need a profile".into()))?;
                p.validate().map_err(Error::InvalidConfig)?;
            }
        }
        Ok(())
    }

    /// Students always request token probabilities; other roles do not.
    pub fn build(
        &self,
        role: Role,
        world: Option<&Arc<SimWorld>>,
        ledger: Arc<CostLedger>,
        run_seed: u64,
    ) -> Result<GenerationEndpoint> {
        self.validate()?;
        let inner: Arc<dyn super::Generator> = match self.kind {
            EndpointKind::Wire => {
                let (url, model) = wire_parts(&self.base_url, &self.model_id)?;
                Arc::new(WireGenerator::new(
                    url,
                    model,
                    resolve_key(self.api_key_env.as_deref())?,
                    Duration::from_secs(self.timeout_secs),
                ))
            }
            EndpointKind::Simulated => {
                let world = world
                    .ok_or_else(|| Error::InvalidConfig("simulated endpoints need a dataset to simulate".into()))?;
                let mut profile = self.profile.clone().expect("validated");
                profile.seed = mix(&[profile.seed, run_seed]);
                let id = self.model_id.clone().unwrap_or_else(|| match role {
                    Role::Student => "sim-student".into(),
                    Role::Teacher => "sim-teacher".into(),
                    Role::Encoder => "sim-encoder".into(),
                });
                Arc::new(SimulatedGenerator::new(world.clone(), profile, id))
            }
        };
        Ok(GenerationEndpoint::new(inner, role, ledger)
            .with_retry(self.retry)
            .with_max_calls(self.max_calls)
            .with_max_concurrency(self.max_concurrency)
            .with_sampling(Sampling {
                temperature: self.temperature,
                max_tokens: self.max_tokens,
                want_token_probs: role == Role::Student,
                top_logprobs: self.top_logprobs,
            }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimEncoderParams {
    #[serde(default = "d_affinity")]
    pub image_affinity: f64,
    #[serde(default = "d_affinity")]
    pub text_affinity: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimEncoderParams {
    fn default() -> Self {
        Self {
            image_affinity: d_affinity(),
            text_affinity: d_affinity(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EndpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "d_dimension")]
    pub dimension: usize,
    #[serde(default = "d_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "d_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub sim: SimEncoderParams,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EndpointKind::Simulated,
            base_url: None,
            model_id: None,
            api_key_env: None,
            dimension: d_dimension(),
            max_concurrency: d_concurrency(),
            retry: RetryPolicy::default(),
            timeout_secs: d_timeout(),
            sim: SimEncoderParams::default(),
        }
    }
}

impl EncoderConfig {
    pub fn build(&self, world: Option<&Arc<SimWorld>>, ledger: Arc<CostLedger>) -> Result<EncoderEndpoint> {
        if self.dimension == 0 {
            return Err(Error::InvalidConfig("encoder dimension must be positive".into()));
        }
        let inner: Arc<dyn super::Encoder> = match self.kind {
            EndpointKind::Wire => {
                let (url, model) = wire_parts(&self.base_url, &self.model_id)?;
                Arc::new(WireEncoder::new(
                    url,
                    model,
                    resolve_key(self.api_key_env.as_deref())?,
                    self.dimension,
                    Duration::from_secs(self.timeout_secs),
                ))
            }
            EndpointKind::Simulated => {
                let world = world
                    .ok_or_else(|| Error::InvalidConfig("simulated encoder needs a dataset to simulate".into()))?;
                let a = self.sim;
                if !(0.0..=1.0).contains(&a.image_affinity) || !(0.0..=1.0).contains(&a.text_affinity) {
                    return Err(Error::InvalidConfig("encoder affinities outside [0, 1]".into()));
                }
                Arc::new(SimulatedEncoder::new(
                    world.clone(),
                    self.dimension,
                    a.image_affinity,
                    a.text_affinity,
                    a.seed,
                ))
            }
        };
        Ok(EncoderEndpoint::new(inner, ledger)
            .with_retry(self.retry)
            .with_max_concurrency(self.max_concurrency))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_keys_are_rejected() {
        let raw = r#"{"kind":"wire","base_url":"http://x","model_id":"m","api_key":"sk-123"}"#;
        assert!(serde_json::from_str::<EndpointConfig>(raw).is_err());
    }

    #[test]
    fn missing_key_variable_is_a_config_error() {
        let cfg: EndpointConfig = serde_json::from_str(
            r#"{"kind":"wire","base_url":"http://x","model_id":"m","api_key_env":"ICD_TEST_SURELY_UNSET_VAR"}"#,
        )
        .unwrap();
        let err = cfg.build(Role::Teacher, None, Arc::new(CostLedger::default()), 0);
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn simulated_needs_profile_and_world() {
        let cfg: EndpointConfig = serde_json::from_str(r#"{"kind":"simulated"}"#).unwrap();
        assert!(cfg.validate().is_err());
        let cfg = EndpointConfig::simulated(SimulatedAgentProfile::student(0.5), 0.0);
        assert!(cfg
            .build(Role::Student, None, Arc::new(CostLedger::default()), 0)
            .is_err());
        let w = Arc::new(SimWorld::default());
        let ep = cfg
            .build(Role::Student, Some(&w), Arc::new(CostLedger::default()), 0)
            .unwrap();
        assert!(ep.sampling().want_token_probs);
    }
}
