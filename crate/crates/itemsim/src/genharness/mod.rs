//! Prompt construction and batched item generation against chat-completion
//! providers.
//!
//! Prompt builders are pure: the same topic or blueprint path always yields
//! byte-identical text, including the spacing quirks of the original
//! templates (the naive user text runs "exam style" straight into "Exactly
//! four options").

mod provider;

pub use provider::{
    make_provider, GeminiProvider, MockProvider, OpenAiChatProvider, Provider, ProviderConfig,
    ProviderError, ProviderKind,
};

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BlueprintPath, EpaTopic, Strategy};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("authentication failed for provider {provider_id}: {reason}")]
    Auth { provider_id: String, reason: String },
    #[error("credential environment variable {0} is not set")]
    MissingCredential(String),
    #[error("guided generation needs a blueprint path on topic '{0}'")]
    MissingBlueprint(String),
    #[error("guided generation needs a guided context")]
    MissingGuidedContext,
    #[error("generation plan has no topics")]
    EmptyPlan,
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// System and user halves of one chat request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user: String,
}

pub const NAIVE_SYSTEM_PROMPT: &str =
    "You are an expert in creating ABFM certification exam style multiple-choice questions.";

pub const GUIDED_SYSTEM_PROMPT: &str =
    "You are an expert in creating multiple choice medical exam questions.";

const FORMAT_BLOCK: &str = "Question: <question text>\n\
A) <option A>\n\
B) <option B>\n\
C) <option C>\n\
D) <option D>\n\n\
Answer: <letter of the correct answer>\n\n";

/// Fallback inserted when no exemplar-items file is supplied.
pub const NO_SAMPLES_FALLBACK: &str = "No sample questions provided.";
/// Fallback inserted when no item-writing-guidelines file is supplied.
pub const NO_GUIDELINES_FALLBACK: &str = "No question writing guidelines provided.";

/// Builds the naive prompt for a public EPA topic.
pub fn build_naive_prompt(topic: &EpaTopic) -> PromptBundle {
    let user = format!(
        "Create a multiple choice question on '{}' following the ABFM certification exam style\
Exactly four options (A\u{2013}D) with one single best answer. \
Format:\n\n{FORMAT_BLOCK}\
Only output the formatted question and answer.",
        topic.descriptor
    );
    PromptBundle {
        system: NAIVE_SYSTEM_PROMPT.to_string(),
        user,
    }
}

/// Reference material supplied to guided generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidedContext {
    pub samples_text: String,
    pub guidelines_text: String,
}

impl Default for GuidedContext {
    fn default() -> Self {
        Self {
            samples_text: NO_SAMPLES_FALLBACK.to_string(),
            guidelines_text: NO_GUIDELINES_FALLBACK.to_string(),
        }
    }
}

impl GuidedContext {
    /// Reads plain-text reference files, substituting the fallback strings
    /// for absent paths.
    pub fn from_files(
        samples: Option<&Path>,
        guidelines: Option<&Path>,
    ) -> Result<Self, GenError> {
        let read = |path: &Path| {
            std::fs::read_to_string(path).map_err(|source| GenError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        Ok(Self {
            samples_text: match samples {
                Some(path) if path.exists() => read(path)?,
                _ => NO_SAMPLES_FALLBACK.to_string(),
            },
            guidelines_text: match guidelines {
                Some(path) if path.exists() => read(path)?,
                _ => NO_GUIDELINES_FALLBACK.to_string(),
            },
        })
    }
}

/// Builds the guided prompt: blueprint triplet, format block, then the
/// reference sections.
pub fn build_guided_prompt(path: &BlueprintPath, ctx: &GuidedContext) -> PromptBundle {
    let user = format!(
        "Create a multiple choice question on '{}' within '{}' under '{}'. \
Exactly four options labeled A, B, C, and D, with one single best answer. \
Format:\n\n{FORMAT_BLOCK}\
Only output the formatted question and answer.\n\n\
Below are some sample questions for reference:\n{}\n\n\
Below are the question writing guidelines:\n{}",
        path.level3, path.level2, path.level1, ctx.samples_text, ctx.guidelines_text
    );
    PromptBundle {
        system: GUIDED_SYSTEM_PROMPT.to_string(),
        user,
    }
}

/// Replaces each filename-hostile character `\ / * ? : " < > |` with `_`.
pub fn sanitize_filename(name: &str) -> String {
    name.chars()
        .map(|c| match c {
            '\\' | '/' | '*' | '?' | ':' | '"' | '<' | '>' | '|' => '_',
            other => other,
        })
        .collect()
}

/// The topic path joined for output filenames: the EPA descriptor for naive
/// runs, the underscore-joined blueprint triplet for guided runs.
pub fn output_stem(topic: &EpaTopic, strategy: Strategy) -> String {
    match (strategy, &topic.blueprint) {
        (Strategy::Guided, Some(bp)) => sanitize_filename(&bp.joined()),
        _ => sanitize_filename(&topic.descriptor),
    }
}

/// What one batch run should produce.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub topics: Vec<EpaTopic>,
    pub questions_per_topic: u32,
    pub provider: ProviderConfig,
    pub strategy: Strategy,
    #[serde(default)]
    pub guided_context: Option<GuidedContext>,
}

impl GenerationPlan {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.topics.is_empty() || self.questions_per_topic == 0 {
            return Err(GenError::EmptyPlan);
        }
        if self.strategy == Strategy::Guided {
            if self.guided_context.is_none() {
                return Err(GenError::MissingGuidedContext);
            }
            for topic in &self.topics {
                if topic.blueprint.is_none() {
                    return Err(GenError::MissingBlueprint(topic.descriptor.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Identity of one request inside a batch; deterministic providers key off
/// it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestContext {
    pub provider_id: String,
    pub strategy: Strategy,
    pub topic_descriptor: String,
    pub question_number: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestStatus {
    Ok,
    Error,
}

/// Manifest entry for one request/response pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub provider_id: String,
    pub strategy: Strategy,
    pub topic: String,
    pub question_number: u32,
    pub status: RequestStatus,
    pub attempts: u32,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub text: String,
}

/// Result of one batch: per-topic raw texts in request order plus the
/// request records for the manifest.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub texts_by_topic: Vec<(EpaTopic, Vec<String>)>,
    pub records: Vec<GenerationRecord>,
}

/// Issues `questions_per_topic` independent single-question requests per
/// topic, with bounded parallelism, preserving request order in the output.
///
/// Transient failures retry up to the provider's configured limit; a request
/// that still fails is recorded as an `ERROR: <detail>` placeholder text
/// (excluded from parsing downstream). Authentication failures abort the
/// whole batch.
pub fn generate_batch(
    plan: &GenerationPlan,
    provider: &dyn Provider,
    now: &(dyn Fn() -> DateTime<Utc> + Sync),
) -> Result<BatchOutput, GenError> {
    plan.validate()?;
    struct Request {
        topic_idx: usize,
        prompt: PromptBundle,
        ctx: RequestContext,
    }
    let mut requests = Vec::new();
    for (topic_idx, topic) in plan.topics.iter().enumerate() {
        let prompt = match plan.strategy {
            Strategy::Naive => build_naive_prompt(topic),
            Strategy::Guided => {
                let ctx = plan.guided_context.as_ref().expect("validated");
                let bp = topic.blueprint.as_ref().expect("validated");
                build_guided_prompt(bp, ctx)
            }
        };
        for n in 1..=plan.questions_per_topic {
            requests.push(Request {
                topic_idx,
                prompt: prompt.clone(),
                ctx: RequestContext {
                    provider_id: plan.provider.provider_id.clone(),
                    strategy: plan.strategy,
                    topic_descriptor: topic.descriptor.clone(),
                    question_number: n,
                },
            });
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.provider.max_in_flight.max(1))
        .build()
        .expect("worker pool");
    let max_retries = plan.provider.max_retries;
    let backoff_ms = plan.provider.retry_backoff_ms;
    let results: Vec<Result<(GenerationRecord, String), GenError>> = pool.install(|| {
        use rayon::prelude::*;
        requests
            .par_iter()
            .map(|req| {
                let started_at = now();
                let mut attempts = 0u32;
                loop {
                    attempts += 1;
                    match provider.complete(&req.prompt, &req.ctx) {
                        Ok(text) => {
                            let record = GenerationRecord {
                                provider_id: req.ctx.provider_id.clone(),
                                strategy: req.ctx.strategy,
                                topic: req.ctx.topic_descriptor.clone(),
                                question_number: req.ctx.question_number,
                                status: RequestStatus::Ok,
                                attempts,
                                started_at,
                                finished_at: now(),
                                text: text.clone(),
                            };
                            return Ok((record, text));
                        }
                        Err(ProviderError::Auth(reason)) => {
                            return Err(GenError::Auth {
                                provider_id: req.ctx.provider_id.clone(),
                                reason,
                            });
                        }
                        Err(ProviderError::Transient(reason)) if attempts <= max_retries => {
                            log::warn!(
                                "{} {} Q{}: transient failure (attempt {attempts}): {reason}",
                                req.ctx.provider_id,
                                req.ctx.topic_descriptor,
                                req.ctx.question_number
                            );
                            if backoff_ms > 0 {
                                std::thread::sleep(std::time::Duration::from_millis(
                                    backoff_ms * attempts as u64,
                                ));
                            }
                        }
                        Err(ProviderError::Transient(reason))
                        | Err(ProviderError::Fatal(reason)) => {
                            let text = format!("ERROR: {reason}");
                            let record = GenerationRecord {
                                provider_id: req.ctx.provider_id.clone(),
                                strategy: req.ctx.strategy,
                                topic: req.ctx.topic_descriptor.clone(),
                                question_number: req.ctx.question_number,
                                status: RequestStatus::Error,
                                attempts,
                                started_at,
                                finished_at: now(),
                                text: text.clone(),
                            };
                            return Ok((record, text));
                        }
                    }
                }
            })
            .collect()
    });

    let mut texts_by_topic: Vec<(EpaTopic, Vec<String>)> = plan
        .topics
        .iter()
        .map(|t| (t.clone(), Vec::with_capacity(plan.questions_per_topic as usize)))
        .collect();
    let mut records = Vec::with_capacity(requests.len());
    for (req, result) in requests.iter().zip(results) {
        let (record, text) = result?;
        records.push(record);
        texts_by_topic[req.topic_idx].1.push(text);
    }
    Ok(BatchOutput {
        texts_by_topic,
        records,
    })
}

/// Renders one topic's raw generations as a document of `Qn` blocks, the
/// layout the parser consumes.
pub fn render_generation_document(texts: &[String]) -> String {
    let mut out = String::new();
    for (i, text) in texts.iter().enumerate() {
        out.push_str(&format!("Q{}\n{}\n\n", i + 1, text));
    }
    out
}

/// Run manifest: the plans that ran, wall-clock bounds, and every
/// request/response record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub plans: Vec<ManifestPlan>,
    pub requests: Vec<GenerationRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestPlan {
    pub provider_id: String,
    pub strategy: Strategy,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub questions_per_topic: u32,
    pub topics: Vec<String>,
    /// Output file per topic descriptor.
    pub outputs: BTreeMap<String, String>,
}
