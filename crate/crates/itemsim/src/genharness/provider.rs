//! Chat-completion provider adapters: a deterministic offline mock plus
//! OpenAI-style and Gemini-style HTTPS clients.
//!
//! Credentials are read from the environment variable named in the config,
//! never from the config file itself. The `safety_overrides` capability flag
//! is serialized per adapter: the Gemini adapter expands it into per-category
//! BLOCK_NONE settings, the OpenAI-style adapter has no equivalent and
//! ignores it with a warning.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{GenError, PromptBundle, RequestContext};
use crate::corpus::Strategy;

#[derive(Debug)]
pub enum ProviderError {
    /// Credential rejected; aborts the whole batch.
    Auth(String),
    /// Worth retrying: timeouts, rate limits, 5xx, transport failures.
    Transient(String),
    /// Not worth retrying: malformed request, provider refused permanently.
    Fatal(String),
}

/// A chat-completion endpoint that can serve one prompt per call.
pub trait Provider: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, prompt: &PromptBundle, ctx: &RequestContext)
        -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Mock,
    #[default]
    #[serde(rename = "openai_chat")]
    OpenAiChat,
    Gemini,
}

/// Connection and sampling settings for one provider.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub provider_id: String,
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub safety_overrides: bool,
    /// Name of the environment variable holding the credential.
    #[serde(default)]
    pub auth_env: Option<String>,
    /// Mock determinism seed; the CLI `--seed` flag overrides it.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retry_backoff_ms")]
    pub retry_backoff_ms: u64,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_max_tokens() -> u32 {
    2000
}

fn default_max_retries() -> u32 {
    2
}

fn default_max_in_flight() -> usize {
    4
}

fn default_retry_backoff_ms() -> u64 {
    200
}

impl ProviderConfig {
    pub fn mock(provider_id: &str, seed: u64) -> Self {
        Self {
            provider_id: provider_id.to_string(),
            kind: ProviderKind::Mock,
            endpoint: String::new(),
            model: format!("mock/{provider_id}"),
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            safety_overrides: false,
            auth_env: None,
            seed: Some(seed),
            max_retries: default_max_retries(),
            max_in_flight: default_max_in_flight(),
            retry_backoff_ms: 0,
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if !(self.temperature >= 0.0) || self.max_tokens == 0 {
            return Err(GenError::EmptyPlan);
        }
        Ok(())
    }
}

/// Instantiates the adapter for a config, reading the credential from the
/// environment for network kinds. `seed_override` (the CLI `--seed`) wins
/// over the config seed for the mock.
pub fn make_provider(
    cfg: &ProviderConfig,
    seed_override: Option<u64>,
) -> Result<Box<dyn Provider>, GenError> {
    match cfg.kind {
        ProviderKind::Mock => Ok(Box::new(MockProvider::new(
            &cfg.provider_id,
            seed_override.or(cfg.seed).unwrap_or(0),
        ))),
        ProviderKind::OpenAiChat | ProviderKind::Gemini => {
            let var = cfg
                .auth_env
                .clone()
                .ok_or_else(|| GenError::MissingCredential(format!("<unset for {}>", cfg.provider_id)))?;
            let credential =
                std::env::var(&var).map_err(|_| GenError::MissingCredential(var.clone()))?;
            match cfg.kind {
                ProviderKind::OpenAiChat => {
                    Ok(Box::new(OpenAiChatProvider::new(cfg.clone(), credential)))
                }
                ProviderKind::Gemini => Ok(Box::new(GeminiProvider::new(cfg.clone(), credential))),
                ProviderKind::Mock => unreachable!(),
            }
        }
    }
}

const MOCK_FINDINGS: [&str; 8] = [
    "low-grade fever",
    "persistent fatigue",
    "intermittent dizziness",
    "poor sleep",
    "mild dyspnea on exertion",
    "reduced appetite",
    "recurring headaches",
    "nonproductive cough",
];

const MOCK_ACTIONS: [&str; 12] = [
    "Begin first-line pharmacologic therapy",
    "Recommend lifestyle modifications and reassess in 3 months",
    "Order targeted laboratory testing",
    "Refer to a specialist for further evaluation",
    "Provide supportive counseling and schedule follow-up",
    "Obtain a chest X-ray to clarify the diagnosis",
    "Start empiric antibiotic therapy",
    "Perform a structured risk assessment",
    "Administer the indicated vaccination today",
    "Admit for inpatient monitoring",
    "Repeat the measurement at a follow-up visit",
    "Review current medications for interactions",
];

/// Deterministic offline provider. Output is a pure function of
/// (seed, provider id, strategy, topic, question number) and always parses
/// into a valid item, so the whole pipeline runs without network access.
pub struct MockProvider {
    id: String,
    seed: u64,
    refusals: Vec<(String, u32)>,
    auth_failure: bool,
    transient: Mutex<HashMap<(String, u32), u32>>,
}

impl MockProvider {
    pub fn new(id: &str, seed: u64) -> Self {
        Self {
            id: id.to_string(),
            seed,
            refusals: Vec::new(),
            auth_failure: false,
            transient: Mutex::new(HashMap::new()),
        }
    }

    /// Configure a refusal for one (topic, question number) request.
    pub fn with_refusal(mut self, topic: &str, question_number: u32) -> Self {
        self.refusals.push((topic.to_string(), question_number));
        self
    }

    /// Fail a request with a transient error `count` times before serving it.
    pub fn with_transient_failures(self, topic: &str, question_number: u32, count: u32) -> Self {
        self.transient
            .lock()
            .unwrap()
            .insert((topic.to_string(), question_number), count);
        self
    }

    /// Every call reports an authentication failure.
    pub fn with_auth_failure(mut self) -> Self {
        self.auth_failure = true;
        self
    }

    fn digest(&self, ctx: &RequestContext) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update([0u8]);
        hasher.update(ctx.provider_id.as_bytes());
        hasher.update([0u8]);
        hasher.update(match ctx.strategy {
            Strategy::Naive => [1u8],
            Strategy::Guided => [2u8],
        });
        hasher.update(ctx.topic_descriptor.as_bytes());
        hasher.update([0u8]);
        hasher.update(ctx.question_number.to_le_bytes());
        hasher.finalize().into()
    }

    fn item_text(&self, ctx: &RequestContext) -> String {
        let d = self.digest(ctx);
        let age = 25 + (d[0] as u32 % 50);
        let days = 2 + (d[1] % 12);
        let finding_a = MOCK_FINDINGS[d[2] as usize % MOCK_FINDINGS.len()];
        let mut finding_b = MOCK_FINDINGS[d[3] as usize % MOCK_FINDINGS.len()];
        if finding_b == finding_a {
            finding_b = MOCK_FINDINGS[(d[3] as usize + 1) % MOCK_FINDINGS.len()];
        }
        let scenario = match ctx.strategy {
            Strategy::Naive => "presents to the clinic",
            Strategy::Guided => "presents for structured follow-up",
        };
        let topic = ctx.topic_descriptor.to_lowercase();
        let stem = format!(
            "A {age}-year-old patient {scenario} in the context of {topic} (case {n}). \
The history notes {finding_a} and {finding_b} over the past {days} days. \
Which of the following is the most appropriate next step?",
            n = ctx.question_number
        );
        let mut pool: Vec<&str> = MOCK_ACTIONS.to_vec();
        let mut options = Vec::with_capacity(4);
        for k in 0..4 {
            let pick = d[4 + k] as usize % pool.len();
            options.push(pool.remove(pick));
        }
        let key = char::from(b'A' + (d[8] % 4));
        format!(
            "Question: {stem}\nA) {}\nB) {}\nC) {}\nD) {}\n\nAnswer: {key}",
            options[0], options[1], options[2], options[3]
        )
    }
}

impl Provider for MockProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(
        &self,
        _prompt: &PromptBundle,
        ctx: &RequestContext,
    ) -> Result<String, ProviderError> {
        if self.auth_failure {
            return Err(ProviderError::Auth("invalid credential".into()));
        }
        let key = (ctx.topic_descriptor.clone(), ctx.question_number);
        {
            let mut transient = self.transient.lock().unwrap();
            if let Some(remaining) = transient.get_mut(&key) {
                if *remaining > 0 {
                    *remaining -= 1;
                    return Err(ProviderError::Transient("simulated timeout".into()));
                }
            }
        }
        if self.refusals.contains(&key) {
            return Ok(
                "I cannot create exam questions for this request. Please consult official preparation materials."
                    .to_string(),
            );
        }
        Ok(self.item_text(ctx))
    }
}

fn classify_status(code: u16, detail: String) -> ProviderError {
    match code {
        401 | 403 => ProviderError::Auth(detail),
        408 | 429 | 500..=599 => ProviderError::Transient(detail),
        _ => ProviderError::Fatal(detail),
    }
}

fn http_error(err: ureq::Error) -> ProviderError {
    match err {
        ureq::Error::StatusCode(code) => classify_status(code, format!("http status {code}")),
        other => ProviderError::Transient(other.to_string()),
    }
}

/// OpenAI-compatible chat-completions client (also fits Azure OpenAI and
/// Anthropic-compatible gateways). Posts to the configured endpoint with a
/// bearer credential.
pub struct OpenAiChatProvider {
    cfg: ProviderConfig,
    credential: String,
    agent: ureq::Agent,
}

impl OpenAiChatProvider {
    pub fn new(cfg: ProviderConfig, credential: String) -> Self {
        if cfg.safety_overrides {
            log::warn!(
                "provider {}: safety_overrides has no openai_chat serialization; ignored",
                cfg.provider_id
            );
        }
        Self {
            cfg,
            credential,
            agent: ureq::Agent::new_with_defaults(),
        }
    }
}

impl Provider for OpenAiChatProvider {
    fn id(&self) -> &str {
        &self.cfg.provider_id
    }

    fn complete(
        &self,
        prompt: &PromptBundle,
        _ctx: &RequestContext,
    ) -> Result<String, ProviderError> {
        let body = json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
        });
        let mut response = self
            .agent
            .post(&self.cfg.endpoint)
            .header("Authorization", &format!("Bearer {}", self.credential))
            .send_json(&body)
            .map_err(http_error)?;
        let value: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::Fatal(format!("unreadable response: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.trim().to_string())
            .ok_or_else(|| ProviderError::Fatal("response carries no message content".into()))
    }
}

const GEMINI_SAFETY_CATEGORIES: [&str; 5] = [
    "HARM_CATEGORY_SEXUALLY_EXPLICIT",
    "HARM_CATEGORY_HATE_SPEECH",
    "HARM_CATEGORY_HARASSMENT",
    "HARM_CATEGORY_DANGEROUS_CONTENT",
    "HARM_CATEGORY_CIVIC_INTEGRITY",
];

/// Gemini generateContent client. With `safety_overrides` set, every harm
/// category is serialized with a BLOCK_NONE threshold.
pub struct GeminiProvider {
    cfg: ProviderConfig,
    credential: String,
    agent: ureq::Agent,
}

impl GeminiProvider {
    pub fn new(cfg: ProviderConfig, credential: String) -> Self {
        Self {
            cfg,
            credential,
            agent: ureq::Agent::new_with_defaults(),
        }
    }
}

impl Provider for GeminiProvider {
    fn id(&self) -> &str {
        &self.cfg.provider_id
    }

    fn complete(
        &self,
        prompt: &PromptBundle,
        _ctx: &RequestContext,
    ) -> Result<String, ProviderError> {
        let mut body = json!({
            "contents": [{"parts": [{"text": prompt.user}]}],
            "systemInstruction": {"parts": [{"text": prompt.system}]},
            "generationConfig": {
                "temperature": self.cfg.temperature,
                "maxOutputTokens": self.cfg.max_tokens,
            },
        });
        if self.cfg.safety_overrides {
            body["safetySettings"] = serde_json::Value::Array(
                GEMINI_SAFETY_CATEGORIES
                    .iter()
                    .map(|category| json!({"category": category, "threshold": "BLOCK_NONE"}))
                    .collect(),
            );
        }
        let url = format!("{}?key={}", self.cfg.endpoint, self.credential);
        let mut response = self
            .agent
            .post(&url)
            .send_json(&body)
            .map_err(http_error)?;
        let value: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::Fatal(format!("unreadable response: {e}")))?;
        value["candidates"][0]["content"]["parts"][0]["text"]
            .as_str()
            .map(|s| s.trim().to_string())
            .ok_or_else(|| ProviderError::Fatal("response carries no candidate text".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(n: u32) -> RequestContext {
        RequestContext {
            provider_id: "gpt-4o".into(),
            strategy: Strategy::Naive,
            topic_descriptor: "Managing the patient with high blood pressure".into(),
            question_number: n,
        }
    }

    fn prompt() -> PromptBundle {
        PromptBundle {
            system: "s".into(),
            user: "u".into(),
        }
    }

    #[test]
    fn mock_output_varies_by_question_number() {
        let provider = MockProvider::new("gpt-4o", 7);
        let a = provider.complete(&prompt(), &ctx(1)).unwrap();
        let b = provider.complete(&prompt(), &ctx(2)).unwrap();
        assert_ne!(a, b);
        let a2 = provider.complete(&prompt(), &ctx(1)).unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn mock_output_varies_by_seed_and_provider() {
        let a = MockProvider::new("gpt-4o", 7)
            .complete(&prompt(), &ctx(1))
            .unwrap();
        let b = MockProvider::new("gpt-4o", 8)
            .complete(&prompt(), &ctx(1))
            .unwrap();
        let mut other = ctx(1);
        other.provider_id = "claude".into();
        let c = MockProvider::new("claude", 7)
            .complete(&prompt(), &other)
            .unwrap();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn mock_options_are_distinct() {
        let provider = MockProvider::new("gpt-4o", 3);
        for n in 1..=20 {
            let text = provider.complete(&prompt(), &ctx(n)).unwrap();
            let options: Vec<&str> = text
                .lines()
                .filter(|l| l.len() > 2 && l.as_bytes()[1] == b')')
                .collect();
            assert_eq!(options.len(), 4, "{text}");
            for i in 0..4 {
                for j in (i + 1)..4 {
                    assert_ne!(options[i][3..], options[j][3..], "{text}");
                }
            }
        }
    }

    #[test]
    fn missing_credential_names_the_variable() {
        let cfg = ProviderConfig {
            provider_id: "gpt-4o".into(),
            kind: ProviderKind::OpenAiChat,
            endpoint: "https://example.invalid/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            auth_env: Some("ITEMSIM_TEST_MISSING_KEY".into()),
            ..ProviderConfig::mock("gpt-4o", 0)
        };
        let err = match make_provider(&cfg, None) {
            Err(err) => err,
            Ok(_) => panic!("expected missing-credential error"),
        };
        assert!(err.to_string().contains("ITEMSIM_TEST_MISSING_KEY"));
    }

    #[test]
    fn status_classification() {
        assert!(matches!(
            classify_status(401, String::new()),
            ProviderError::Auth(_)
        ));
        assert!(matches!(
            classify_status(429, String::new()),
            ProviderError::Transient(_)
        ));
        assert!(matches!(
            classify_status(503, String::new()),
            ProviderError::Transient(_)
        ));
        assert!(matches!(
            classify_status(400, String::new()),
            ProviderError::Fatal(_)
        ));
    }
}
