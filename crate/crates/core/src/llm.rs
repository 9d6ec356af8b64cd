//! Language-model providers.

use std::collections::BTreeMap;
use std::path::Path;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::extraction::parse_prompt;
use crate::provider::{post_json, ProviderError, RemoteConfig};
use crate::value::VarType;

pub const LLM_URL_VAR: &str = "CDR_AGENT_LLM_URL";
pub const LLM_MODEL_VAR: &str = "CDR_AGENT_LLM_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system: String,
    pub user: String,
    pub temperature: f32,
}

impl CompletionRequest {
    /// Greedy decoding (temperature 0).
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        CompletionRequest {
            system: system.into(),
            user: user.into(),
            temperature: 0.0,
        }
    }
}

#[async_trait]
pub trait LlmProvider: Send + Sync {
    fn id(&self) -> &str;

    async fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError>;
}

/// Client for an OpenAI-style chat-completions endpoint.
pub struct RemoteLlm {
    client: reqwest::Client,
    config: RemoteConfig,
    id: String,
}

impl RemoteLlm {
    pub fn new(config: RemoteConfig) -> Self {
        RemoteLlm {
            client: reqwest::Client::new(),
            id: format!("remote:{}@{}", config.model, config.url),
            config,
        }
    }

    pub fn from_env() -> Result<Self, ProviderError> {
        Ok(Self::new(RemoteConfig::from_env(LLM_URL_VAR, LLM_MODEL_VAR)?))
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    temperature: f32,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    #[serde(default)]
    content: Option<String>,
}

#[async_trait]
impl LlmProvider for RemoteLlm {
    fn id(&self) -> &str {
        &self.id
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [
                ChatMessage {
                    role: "system",
                    content: &request.system,
                },
                ChatMessage {
                    role: "user",
                    content: &request.user,
                },
            ],
            temperature: request.temperature,
        };
        let resp: ChatResponse = post_json(&self.client, &self.config, &body).await?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Decode("response has no completion text".into()))
    }
}

/// Fixture key for the combined rule-selection prompt of the baseline.
pub const BASELINE_KEY: &str = "baseline";

/// Hex SHA-256 of a note, as used in mock fixture keys.
pub fn note_digest(note: &str) -> String {
    hex::encode(Sha256::digest(note.as_bytes()))
}

/// Fixture key `<note sha256>/<cdr id or "baseline">`.
pub fn fixture_key(note: &str, target: &str) -> String {
    format!("{}/{target}", note_digest(note))
}

/// Offline model for tests and demos.
///
/// Answers come from a fixture table keyed by [`fixture_key`]. Extraction
/// prompts without a fixture fall back to a phrase matcher over the note
/// (see [`keyword_answer`]); other prompts without a fixture get an empty
/// answer.
#[derive(Debug, Clone, Default)]
pub struct MockLlm {
    fixtures: BTreeMap<String, String>,
    fallback: bool,
}

impl MockLlm {
    pub fn new() -> Self {
        MockLlm {
            fixtures: BTreeMap::new(),
            fallback: true,
        }
    }

    pub fn with_fixtures(fixtures: BTreeMap<String, String>) -> Self {
        MockLlm {
            fixtures,
            fallback: true,
        }
    }

    /// Fixture file: a JSON object mapping fixture keys to answers.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))?;
        let fixtures = serde_json::from_str(&text)
            .map_err(|e| ProviderError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::with_fixtures(fixtures))
    }

    pub fn without_fallback(mut self) -> Self {
        self.fallback = false;
        self
    }

    pub fn insert(&mut self, note: &str, target: &str, answer: impl Into<String>) {
        self.fixtures.insert(fixture_key(note, target), answer.into());
    }

    fn answer(&self, request: &CompletionRequest) -> String {
        if let Some(parts) = parse_prompt(&request.user) {
            if let Some(a) = self.fixtures.get(&fixture_key(&parts.note, &parts.cdr_id)) {
                return a.clone();
            }
            if self.fallback {
                return keyword_answer(&parts.note, &parts.variables);
            }
            return String::new();
        }
        if let Some(note) = crate::eval::baseline::prompt_note(&request.user) {
            if let Some(a) = self.fixtures.get(&fixture_key(note, BASELINE_KEY)) {
                return a.clone();
            }
        }
        String::new()
    }
}

#[async_trait]
impl LlmProvider for MockLlm {
    fn id(&self) -> &str {
        "mock"
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        Ok(self.answer(request))
    }
}

/// Lowercase, with everything but letters, digits and decimal points
/// replaced by spaces.
fn normalize(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let spaced: String = chars
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let decimal_point = c == '.'
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(char::is_ascii_digit);
            if c.is_alphanumeric() || decimal_point {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect();
    format!(" {} ", spaced.split_whitespace().collect::<Vec<_>>().join(" "))
}

const NEGATIONS: [&str; 5] = ["no", "without", "denies", "negative for", "absent"];

/// Phrase matching used by the mock model. For a variable `snake_name` the
/// phrase is `snake name`:
///
/// * boolean: `yes` if the phrase occurs, `no` if it occurs right after a
///   negation (`no`, `without`, `denies`, `negative for`, `absent`);
/// * integer/float: the number following the phrase, optionally after
///   `of`, `is`, `was` or `=`;
/// * enum: the first declared value whose phrase occurs in the note.
pub fn keyword_answer(note: &str, variables: &[(String, String)]) -> String {
    let text = normalize(note);
    let mut lines = Vec::new();
    for (name, vtype) in variables {
        let phrase = format!(" {} ", name.replace('_', " "));
        let value = match parse_type(vtype) {
            Some(VarType::Boolean) => {
                if NEGATIONS
                    .iter()
                    .any(|n| text.contains(&format!(" {n}{phrase}")))
                {
                    Some("no".to_string())
                } else if text.contains(&phrase) {
                    Some("yes".to_string())
                } else {
                    None
                }
            }
            Some(VarType::Integer) | Some(VarType::Float) => text.find(&phrase).and_then(|at| {
                text[at + phrase.len()..]
                    .split_whitespace()
                    .find(|w| !matches!(*w, "of" | "is" | "was" | "="))
                    .filter(|w| w.parse::<f64>().is_ok())
                    .map(str::to_string)
            }),
            Some(VarType::Enum(values)) => values
                .iter()
                .find(|v| text.contains(&format!(" {} ", v.replace('_', " "))))
                .cloned(),
            _ => None,
        };
        if let Some(v) = value {
            lines.push(format!("{name}: {v}"));
        }
    }
    lines.join("\n")
}

fn parse_type(text: &str) -> Option<VarType> {
    Some(match text {
        "boolean" => VarType::Boolean,
        "integer" => VarType::Integer,
        "float" => VarType::Float,
        "string" => VarType::String,
        other => VarType::Enum(
            other
                .strip_prefix("enum: ")?
                .split(" | ")
                .map(str::to_string)
                .collect(),
        ),
    })
}
