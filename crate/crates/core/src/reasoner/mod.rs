//! Figurative-commonsense reasoning over memes via a pluggable LLM backend.
//!
//! Prompts follow fixed templates, outputs are parsed into three attribute
//! sections (cause-effect, figurative understanding, mental state), and
//! every result is cached durably keyed by a prompt fingerprint.

mod backend;
mod cache;
mod parse;
mod prompt;

pub use backend::{BackendError, BackendRequest, ReasoningBackend, ScriptedBackend};
pub use cache::ReasoningCache;
pub use parse::{parse_reasoning, render_sections, ParseError, Sections};
pub use prompt::{build_reasoning_prompt, prompt_fingerprint, PromptPayload};

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{MemeInstance, TaskId};
use crate::text::fnv1a64;

/// Reasoning prompt template. The task is part of the template identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateId {
    #[serde(rename = "anxiety_v1")]
    AnxietyV1,
    #[serde(rename = "depression_v1")]
    DepressionV1,
}

impl TemplateId {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::AnxietyV1 => "anxiety_v1",
            TemplateId::DepressionV1 => "depression_v1",
        }
    }

    pub fn task(self) -> TaskId {
        match self {
            TemplateId::AnxietyV1 => TaskId::Anxiety,
            TemplateId::DepressionV1 => TaskId::Depression,
        }
    }

    pub fn for_task(task: TaskId) -> Self {
        match task {
            TaskId::Anxiety => TemplateId::AnxietyV1,
            TaskId::Depression => TemplateId::DepressionV1,
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TemplateId {
    type Err = ReasonerError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "anxiety_v1" => Ok(TemplateId::AnxietyV1),
            "depression_v1" => Ok(TemplateId::DepressionV1),
            other => Err(ReasonerError::UnknownTemplate(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningStatus {
    Success,
    Failed,
}

/// One reasoning result, successful or not. `raw_output` is always the
/// verbatim backend text; the three attribute fields are empty on failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningRecord {
    pub meme_id: String,
    pub status: ReasoningStatus,
    pub cause_effect: String,
    pub figurative_understanding: String,
    pub mental_state: String,
    pub raw_output: String,
    pub backend_id: String,
    pub prompt_fingerprint: String,
    pub created_at: u64,
    /// True when no image was attached and the backend saw text only.
    #[serde(default)]
    pub text_only: bool,
}

impl ReasoningRecord {
    pub fn is_success(&self) -> bool {
        self.status == ReasoningStatus::Success
    }

    /// The reasoning text consumed downstream (embedding and few-shot
    /// prompts). The verbatim output is used, preamble included, mirroring
    /// how generated reasoning flows into the end-to-end prompt.
    pub fn reasoning_text(&self) -> &str {
        &self.raw_output
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReasonerConfig {
    pub backend_id: String,
    pub template_id: TemplateId,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_max_in_flight() -> usize {
    1
}
fn default_max_retries() -> usize {
    2
}
fn default_timeout_secs() -> u64 {
    60
}

impl ReasonerConfig {
    pub fn new(backend_id: &str, template_id: TemplateId) -> Self {
        ReasonerConfig {
            backend_id: backend_id.to_string(),
            template_id,
            max_in_flight: default_max_in_flight(),
            max_retries: default_max_retries(),
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    pub fn validate(&self) -> Result<(), ReasonerError> {
        if self.max_in_flight == 0 {
            return Err(ReasonerError::InvalidConfig(
                "max_in_flight must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ReasonerError {
    #[error("unknown template: {0}")]
    UnknownTemplate(String),
    #[error("meme {meme_id}: both ocr_text and image_ref are empty")]
    EmptyInput { meme_id: String },
    #[error("meme {meme_id}: backend unavailable after {attempts} attempts: {last_error}")]
    BackendUnavailable {
        meme_id: String,
        attempts: usize,
        last_error: String,
    },
    #[error("meme {meme_id}: backend timed out")]
    Timeout { meme_id: String },
    #[error("meme {meme_id}: unparseable reasoning output: {source}")]
    ParseFailure {
        meme_id: String,
        source: ParseError,
    },
    #[error("template {template} is for task {expected}, corpus task is {actual}")]
    TemplateTaskMismatch {
        template: String,
        expected: TaskId,
        actual: TaskId,
    },
    #[error("invalid reasoner config: {0}")]
    InvalidConfig(String),
    #[error("cache io: {0}")]
    Cache(#[from] std::io::Error),
}

/// Drives prompt -> backend -> parse -> cache for a corpus.
pub struct Reasoner<'a> {
    backend: &'a dyn ReasoningBackend,
    config: ReasonerConfig,
}

impl<'a> Reasoner<'a> {
    pub fn new(backend: &'a dyn ReasoningBackend, config: ReasonerConfig) -> Result<Self, ReasonerError> {
        config.validate()?;
        Ok(Reasoner { backend, config })
    }

    /// Cache-first generation for a single meme. A cached successful record
    /// with the same prompt fingerprint is returned without a backend call.
    /// Parse failures are persisted as failed records and reported as errors.
    pub fn generate(
        &self,
        instance: &MemeInstance,
        cache: &mut ReasoningCache,
    ) -> Result<ReasoningRecord, ReasonerError> {
        let payload = build_reasoning_prompt(instance, self.config.template_id)?;
        let fp = prompt_fingerprint(instance, self.config.template_id);
        if let Some(hit) = cache.success(&fp) {
            return Ok(hit.clone());
        }
        let record = self.call_and_parse(instance, &payload, &fp)?;
        cache.append(record.clone())?;
        if record.is_success() {
            Ok(record)
        } else {
            Err(ReasonerError::ParseFailure {
                meme_id: instance.id.clone(),
                source: parse_reasoning(&record.raw_output).unwrap_err(),
            })
        }
    }

    /// Generates for every instance, at most `max_in_flight` backend calls
    /// at a time. Records are appended to the cache in input order. On
    /// failure the first error in input order is returned; successful and
    /// failed records produced along the way are still persisted.
    pub fn generate_all(
        &self,
        instances: &[MemeInstance],
        cache: &mut ReasoningCache,
    ) -> Result<Vec<ReasoningRecord>, ReasonerError> {
        // Resolve cache hits up front; only misses go to the backend.
        let mut slots: Vec<Option<Result<ReasoningRecord, ReasonerError>>> =
            Vec::with_capacity(instances.len());
        let mut pending = Vec::new();
        for (i, inst) in instances.iter().enumerate() {
            let fp = prompt_fingerprint(inst, self.config.template_id);
            if let Some(hit) = cache.success(&fp) {
                slots.push(Some(Ok(hit.clone())));
            } else {
                slots.push(None);
                pending.push((i, fp));
            }
        }

        let results: Mutex<Vec<(usize, Result<ReasoningRecord, ReasonerError>)>> =
            Mutex::new(Vec::with_capacity(pending.len()));
        let cursor = AtomicUsize::new(0);
        let workers = self.config.max_in_flight.min(pending.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let next = cursor.fetch_add(1, Ordering::SeqCst);
                    if next >= pending.len() {
                        break;
                    }
                    let (idx, fp) = &pending[next];
                    let inst = &instances[*idx];
                    let outcome = build_reasoning_prompt(inst, self.config.template_id)
                        .and_then(|payload| self.call_and_parse(inst, &payload, fp));
                    results.lock().unwrap().push((*idx, outcome));
                });
            }
        });
        for (idx, outcome) in results.into_inner().unwrap() {
            slots[idx] = Some(outcome);
        }

        // Persist in input order so the cache file is deterministic.
        let mut records = Vec::with_capacity(instances.len());
        let mut first_error = None;
        for (inst, slot) in instances.iter().zip(slots) {
            match slot.expect("every slot filled") {
                Ok(record) => {
                    if !cache.contains(&record.prompt_fingerprint) {
                        cache.append(record.clone())?;
                    }
                    if !record.is_success() && first_error.is_none() {
                        first_error = Some(ReasonerError::ParseFailure {
                            meme_id: inst.id.clone(),
                            source: parse_reasoning(&record.raw_output).unwrap_err(),
                        });
                    }
                    records.push(record);
                }
                Err(err) => {
                    if first_error.is_none() {
                        first_error = Some(err);
                    }
                }
            }
        }
        match first_error {
            None => Ok(records),
            Some(err) => Err(err),
        }
    }

    fn call_and_parse(
        &self,
        instance: &MemeInstance,
        payload: &PromptPayload,
        fp: &str,
    ) -> Result<ReasoningRecord, ReasonerError> {
        let request = BackendRequest {
            meme_id: instance.id.clone(),
            prompt_text: payload.text.clone(),
            image_ref: payload.image_ref.clone(),
            timeout: self.config.timeout(),
        };
        let raw = self.call_with_retry(&instance.id, &request)?;
        let record = match parse_reasoning(&raw) {
            Ok(sections) => ReasoningRecord {
                meme_id: instance.id.clone(),
                status: ReasoningStatus::Success,
                cause_effect: sections.cause_effect,
                figurative_understanding: sections.figurative_understanding,
                mental_state: sections.mental_state,
                raw_output: raw,
                backend_id: self.config.backend_id.clone(),
                prompt_fingerprint: fp.to_string(),
                created_at: unix_now(),
                text_only: payload.image_ref.is_none(),
            },
            Err(_) => ReasoningRecord {
                meme_id: instance.id.clone(),
                status: ReasoningStatus::Failed,
                cause_effect: String::new(),
                figurative_understanding: String::new(),
                mental_state: String::new(),
                raw_output: raw,
                backend_id: self.config.backend_id.clone(),
                prompt_fingerprint: fp.to_string(),
                created_at: unix_now(),
                text_only: payload.image_ref.is_none(),
            },
        };
        Ok(record)
    }

    fn call_with_retry(
        &self,
        meme_id: &str,
        request: &BackendRequest,
    ) -> Result<String, ReasonerError> {
        let mut last_error = None;
        let attempts = self.config.max_retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(backoff_delay(&request.prompt_text, attempt));
            }
            match self.backend.complete(request) {
                Ok(text) => return Ok(text),
                Err(err) => {
                    let retryable = err.is_retryable();
                    last_error = Some(err);
                    if !retryable {
                        break;
                    }
                }
            }
        }
        match last_error {
            Some(BackendError::Timeout(_)) => Err(ReasonerError::Timeout {
                meme_id: meme_id.to_string(),
            }),
            Some(err) => Err(ReasonerError::BackendUnavailable {
                meme_id: meme_id.to_string(),
                attempts,
                last_error: err.to_string(),
            }),
            None => unreachable!("retry loop runs at least once"),
        }
    }
}

/// Exponential backoff with deterministic jitter derived from the prompt,
/// so repeated runs sleep the same amounts.
fn backoff_delay(seed_text: &str, attempt: usize) -> Duration {
    let base_ms = 50u64;
    let exp = base_ms.saturating_mul(1u64 << attempt.min(6));
    let jitter = fnv1a64(format!("{seed_text}|{attempt}").as_bytes()) % base_ms;
    Duration::from_millis(exp.min(2_000) + jitter)
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// The worked sleep-meme reasoning output used across tests.
#[cfg(test)]
pub(crate) const SLEEP_MEME_REASONING: &str = "\
Here are some common sense reasoning triples extracted from the anxiety meme:
Cause-Effect
1. Cause: Not sleeping regularly at night
   Effect: Feeling tired or anxious during the day.
2. Cause: Drinking alcohol (implied with the beer bottle)
   Effect: Difficulty in sleeping or restlessness at night.
Figurative Understanding
1. Metaphor: \"I don't always sleep at night\"
   Interpretation: Suggests a chaotic or irregular sleep pattern that many can relate to, often due to anxiety.
2. Irony: \"But when I do, I don't\"
   Interpretation: Implies that even when he does sleep, it's not restful, highlighting the contradiction in seeking rest yet feeling unrested.
Mental State
1. Mental State: Anxiety or restlessness at night
   Description: Reflects the inner turmoil of being unable to sleep due to worries or stress.
2. Mental State: Humor or sarcasm
   Description: The playful tone of the statement conveys a sense of humor about the struggles of insomnia or disrupted sleep patterns.";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use std::sync::atomic::AtomicUsize;

    fn sleep_meme() -> MemeInstance {
        MemeInstance {
            id: "sleep-meme".to_string(),
            image_ref: Some("images/sleep.jpg".to_string()),
            ocr_text: "I DONT ALWAYS SLEEP AT NIGHT BUT WHEN I DO, I DONT".to_string(),
            labels: vec!["Difficulty Relaxing".to_string()],
            split: Split::Train,
            source: "unit".to_string(),
        }
    }

    struct CountingBackend {
        inner: ScriptedBackend,
        calls: AtomicUsize,
    }

    impl ReasoningBackend for CountingBackend {
        fn id(&self) -> &str {
            self.inner.id()
        }
        fn complete(&self, request: &BackendRequest) -> Result<String, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.complete(request)
        }
    }

    struct FlakyBackend {
        inner: ScriptedBackend,
        fail_first: usize,
        calls: AtomicUsize,
    }

    impl ReasoningBackend for FlakyBackend {
        fn id(&self) -> &str {
            self.inner.id()
        }
        fn complete(&self, request: &BackendRequest) -> Result<String, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(BackendError::Transport("injected failure".to_string()))
            } else {
                self.inner.complete(request)
            }
        }
    }

    fn scripted_sleep_backend() -> ScriptedBackend {
        ScriptedBackend::new(
            "scripted",
            [("sleep-meme", SLEEP_MEME_REASONING)],
        )
    }

    #[test]
    fn generate_parses_scripted_backend_output() {
        let backend = scripted_sleep_backend();
        let reasoner = Reasoner::new(
            &backend,
            ReasonerConfig::new("scripted", TemplateId::AnxietyV1),
        )
        .unwrap();
        let mut cache = ReasoningCache::in_memory();
        let record = reasoner.generate(&sleep_meme(), &mut cache).unwrap();
        assert!(record.is_success());
        assert!(record.cause_effect.contains("Not sleeping regularly at night"));
        assert!(record
            .figurative_understanding
            .contains("chaotic or irregular sleep pattern"));
        assert!(record.mental_state.contains("Anxiety or restlessness at night"));
        assert_eq!(record.raw_output, SLEEP_MEME_REASONING);
        assert!(!record.text_only);
    }

    #[test]
    fn cached_meme_returns_without_backend_call() {
        let backend = CountingBackend {
            inner: scripted_sleep_backend(),
            calls: AtomicUsize::new(0),
        };
        let reasoner = Reasoner::new(
            &backend,
            ReasonerConfig::new("scripted", TemplateId::AnxietyV1),
        )
        .unwrap();
        let mut cache = ReasoningCache::in_memory();
        let first = reasoner.generate(&sleep_meme(), &mut cache).unwrap();
        let second = reasoner.generate(&sleep_meme(), &mut cache).unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
        assert_eq!(first, second);
    }

    #[test]
    fn missing_section_is_a_parse_failure_with_raw_preserved() {
        let truncated = "Cause-Effect\n1. Cause: a\nFigurative Understanding\n1. Metaphor: b";
        let backend = ScriptedBackend::new("scripted", [("sleep-meme", truncated)]);
        let reasoner = Reasoner::new(
            &backend,
            ReasonerConfig::new("scripted", TemplateId::AnxietyV1),
        )
        .unwrap();
        let mut cache = ReasoningCache::in_memory();
        let err = reasoner.generate(&sleep_meme(), &mut cache).unwrap_err();
        assert!(matches!(err, ReasonerError::ParseFailure { .. }));
        let fp = prompt_fingerprint(&sleep_meme(), TemplateId::AnxietyV1);
        let failed = cache.get(&fp).unwrap();
        assert_eq!(failed.status, ReasoningStatus::Failed);
        assert_eq!(failed.raw_output, truncated);
        // A failed record does not satisfy later lookups.
        assert!(cache.success(&fp).is_none());
    }

    #[test]
    fn transient_failures_are_retried() {
        let backend = FlakyBackend {
            inner: scripted_sleep_backend(),
            fail_first: 2,
            calls: AtomicUsize::new(0),
        };
        let mut config = ReasonerConfig::new("scripted", TemplateId::AnxietyV1);
        config.max_retries = 2;
        let reasoner = Reasoner::new(&backend, config).unwrap();
        let mut cache = ReasoningCache::in_memory();
        let record = reasoner.generate(&sleep_meme(), &mut cache).unwrap();
        assert!(record.is_success());
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausted_retries_surface_backend_unavailable() {
        let backend = FlakyBackend {
            inner: scripted_sleep_backend(),
            fail_first: 10,
            calls: AtomicUsize::new(0),
        };
        let mut config = ReasonerConfig::new("scripted", TemplateId::AnxietyV1);
        config.max_retries = 1;
        let reasoner = Reasoner::new(&backend, config).unwrap();
        let mut cache = ReasoningCache::in_memory();
        let err = reasoner.generate(&sleep_meme(), &mut cache).unwrap_err();
        match err {
            ReasonerError::BackendUnavailable { attempts, .. } => assert_eq!(attempts, 2),
            other => panic!("expected BackendUnavailable, got {other:?}"),
        }
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn generate_all_preserves_input_order_under_concurrency() {
        let mut instances = Vec::new();
        let mut responses = Vec::new();
        for i in 0..10 {
            let id = format!("m{i}");
            instances.push(MemeInstance {
                id: id.clone(),
                image_ref: None,
                ocr_text: format!("text {i}"),
                labels: vec!["Nervousness".to_string()],
                split: Split::Train,
                source: String::new(),
            });
            responses.push((
                id,
                format!("Cause-Effect\nc{i}\nFigurative Understanding\nf{i}\nMental State\nm{i}"),
            ));
        }
        let backend = ScriptedBackend::new(
            "scripted",
            responses.iter().map(|(k, v)| (k.as_str(), v.as_str())),
        );
        let mut config = ReasonerConfig::new("scripted", TemplateId::AnxietyV1);
        config.max_in_flight = 4;
        let reasoner = Reasoner::new(&backend, config).unwrap();
        let mut cache = ReasoningCache::in_memory();
        let records = reasoner.generate_all(&instances, &mut cache).unwrap();
        assert_eq!(records.len(), 10);
        for (i, record) in records.iter().enumerate() {
            assert_eq!(record.meme_id, format!("m{i}"));
            assert!(record.text_only);
        }
    }

    #[test]
    fn template_strings_parse_back() {
        for id in [TemplateId::AnxietyV1, TemplateId::DepressionV1] {
            let parsed: TemplateId = id.as_str().parse().unwrap();
            assert_eq!(parsed, id);
        }
        assert!(matches!(
            "anxiety_v9".parse::<TemplateId>(),
            Err(ReasonerError::UnknownTemplate(_))
        ));
    }
}
