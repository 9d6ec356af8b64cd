//! Variable extraction: prompt construction, parsing of the model's answer,
//! negative imputation and exclusion checks.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::llm::{CompletionRequest, LlmProvider};
use crate::provider::ProviderError;
use crate::registry::{meta_field_type, CdrDefinition, META_AGE, META_SEX, SEX_VALUES};
use crate::rules::{self, Assignment};
use crate::value::{Value, VarType};

pub const PROMPT_TEMPLATE_VERSION: &str = "extraction_v1";
pub const PROMPT_TEMPLATE: &str = include_str!("../templates/extraction_v1.txt");
pub const SYSTEM_PROMPT: &str = include_str!("../templates/extraction_system_v1.txt");
pub const NOTE_BEGIN: &str = "<<<CLINICAL NOTE>>>";
pub const NOTE_END: &str = "<<<END CLINICAL NOTE>>>";
pub const RULE_ID_PREFIX: &str = "Rule id: ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionPrompt {
    pub cdr_id: String,
    pub system_text: String,
    pub rendered_text: String,
}

impl ExtractionPrompt {
    pub fn request(&self) -> CompletionRequest {
        CompletionRequest::new(self.system_text.clone(), self.rendered_text.clone())
    }
}

/// One `- name (type): definition` line.
pub fn variable_line(name: &str, vtype: &VarType, definition: &str) -> String {
    format!("- {name} ({vtype}): {definition}")
}

/// Fill `{key}` placeholders in a single left-to-right pass, so text inside
/// substituted values is never expanded again.
pub(crate) fn render_template(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = vars.iter().find(|(k, _)| {
            after.starts_with(k) && after[k.len()..].starts_with('}')
        });
        match hit {
            Some((k, v)) => {
                out.push_str(v);
                rest = &after[k.len() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn build_prompt(note: &str, def: &CdrDefinition) -> ExtractionPrompt {
    let variables = def
        .variables
        .iter()
        .map(|v| variable_line(&v.name, &v.vtype, &v.definition))
        .collect::<Vec<_>>()
        .join("\n");
    let rendered_text = render_template(
        PROMPT_TEMPLATE,
        &[
            ("cdr_id", &def.id),
            ("cdr_name", &def.name),
            ("variables", &variables),
            ("note", note),
        ],
    );
    ExtractionPrompt {
        cdr_id: def.id.clone(),
        system_text: SYSTEM_PROMPT.trim_end().to_string(),
        rendered_text,
    }
}

/// Pieces of a rendered extraction prompt, recovered from its fixed layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParts {
    pub cdr_id: String,
    pub variables: Vec<(String, String)>,
    pub note: String,
}

/// Inverse of [`build_prompt`] for tooling such as the mock model.
pub fn parse_prompt(text: &str) -> Option<PromptParts> {
    let cdr_id = text
        .lines()
        .find_map(|l| l.strip_prefix(RULE_ID_PREFIX))?
        .trim()
        .to_string();
    let begin = text.find(NOTE_BEGIN)? + NOTE_BEGIN.len();
    let end = text.rfind(NOTE_END)?;
    let note = text.get(begin..end)?.strip_prefix('\n')?.strip_suffix('\n')?.to_string();
    let head = &text[..begin];
    let variables = head
        .lines()
        .filter_map(|l| {
            let l = l.strip_prefix("- ")?;
            let (name, rest) = l.split_once(" (")?;
            let (vtype, _) = rest.split_once("): ")?;
            Some((name.to_string(), vtype.to_string()))
        })
        .collect();
    Some(PromptParts {
        cdr_id,
        variables,
        note,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Extracted,
    Imputed,
    UserSupplied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableValue {
    pub value: Value,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedVariables {
    pub cdr_id: String,
    pub values: BTreeMap<String, VariableValue>,
    /// Undetermined variables, in declaration order.
    pub missing: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ExtractedVariables {
    /// Nothing determined yet.
    pub fn empty(def: &CdrDefinition) -> Self {
        ExtractedVariables {
            cdr_id: def.id.clone(),
            values: BTreeMap::new(),
            missing: def.variables.iter().map(|v| v.name.clone()).collect(),
            warnings: Vec::new(),
        }
    }

    pub fn assignment(&self) -> Assignment {
        self.values
            .iter()
            .map(|(k, v)| (k.clone(), v.value.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.values.get(name).map(|v| &v.value)
    }

    /// Store a clinician-supplied value. It replaces any extracted or
    /// imputed value and removes the variable from `missing`.
    pub fn set_user_supplied(&mut self, name: &str, value: Value) {
        self.missing.retain(|m| m != name);
        self.values.insert(
            name.to_string(),
            VariableValue {
                value,
                provenance: Provenance::UserSupplied,
            },
        );
    }

    /// Overlay a fresh extraction; values supplied by a clinician are kept.
    pub fn merge_extraction(&mut self, fresh: ExtractedVariables) {
        for (name, v) in fresh.values {
            let keep = matches!(
                self.values.get(&name),
                Some(VariableValue {
                    provenance: Provenance::UserSupplied,
                    ..
                })
            );
            if !keep {
                self.missing.retain(|m| *m != name);
                self.values.insert(name, v);
            }
        }
        self.warnings.extend(fresh.warnings);
    }
}

fn clean_token(s: &str) -> &str {
    s.trim()
        .trim_matches(|c| matches!(c, '`' | '"' | '\'' | '*'))
        .trim()
}

/// Read `name: value` lines from a model answer. Never fails: unknown
/// names and unreadable values become warnings, and every variable without
/// a readable value ends up in `missing`.
pub fn parse_extraction(raw: &str, def: &CdrDefinition) -> ExtractedVariables {
    let mut warnings = Vec::new();
    let mut latest: BTreeMap<&str, Option<Value>> = BTreeMap::new();
    for (lineno, line) in raw.lines().enumerate() {
        let line = line.trim();
        let line = line
            .strip_prefix("- ")
            .or_else(|| line.strip_prefix("* "))
            .unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let Some((name, value)) = line.split_once(':') else {
            warnings.push(format!("line {}: not a `name: value` pair", lineno + 1));
            continue;
        };
        let name = clean_token(name).to_ascii_lowercase();
        let Some(spec) = def.variable(&name) else {
            warnings.push(format!("line {}: unknown variable `{name}` ignored", lineno + 1));
            continue;
        };
        let value = clean_token(value);
        let value = value.strip_suffix('.').unwrap_or(value);
        match spec.vtype.coerce_text(value) {
            Ok(v) => {
                latest.insert(&spec.name, Some(v));
            }
            Err(e) => {
                warnings.push(format!("line {}: `{}`: {e}", lineno + 1, spec.name));
                latest.insert(&spec.name, None);
            }
        }
    }
    let mut values = BTreeMap::new();
    let mut missing = Vec::new();
    for spec in &def.variables {
        match latest.remove(spec.name.as_str()).flatten() {
            Some(value) => {
                values.insert(
                    spec.name.clone(),
                    VariableValue {
                        value,
                        provenance: Provenance::Extracted,
                    },
                );
            }
            None => missing.push(spec.name.clone()),
        }
    }
    ExtractedVariables {
        cdr_id: def.id.clone(),
        values,
        missing,
        warnings,
    }
}

/// Fill every missing variable with its negative default.
pub fn impute_negative(ev: &ExtractedVariables, def: &CdrDefinition) -> ExtractedVariables {
    let mut out = ev.clone();
    for name in std::mem::take(&mut out.missing) {
        match def.variable(&name) {
            Some(spec) => {
                out.values.insert(
                    name,
                    VariableValue {
                        value: spec.negative_default.clone(),
                        provenance: Provenance::Imputed,
                    },
                );
            }
            None => out.warnings.push(format!("`{name}` is not declared by {}", def.id)),
        }
    }
    out
}

/// Patient fields available to exclusion predicates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoteMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_age_years: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_sex: Option<String>,
}

impl NoteMeta {
    pub fn validate(&self) -> Result<(), String> {
        if let Some(age) = self.patient_age_years {
            if !(age.is_finite() && age >= 0.0) {
                return Err(format!("{META_AGE} must be a non-negative number"));
            }
        }
        if let Some(sex) = &self.patient_sex {
            if !SEX_VALUES.contains(&sex.as_str()) {
                return Err(format!("{META_SEX} must be one of {}", SEX_VALUES.join(", ")));
            }
        }
        Ok(())
    }

    fn field(&self, name: &str) -> Option<Value> {
        match name {
            META_AGE => self.patient_age_years.map(Value::Float),
            META_SEX => self.patient_sex.clone().map(Value::Str),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionVerdict {
    pub cdr_id: String,
    pub excluded: bool,
    pub reasons: Vec<String>,
}

/// Evaluate the rule's exclusion predicates. A predicate that depends on a
/// field nobody has determined does not fire.
pub fn apply_exclusions(
    ev: &ExtractedVariables,
    meta: &NoteMeta,
    def: &CdrDefinition,
) -> ExclusionVerdict {
    let meta_values: BTreeMap<&str, Value> = [META_AGE, META_SEX]
        .into_iter()
        .filter_map(|f| meta.field(f).map(|v| (f, v)))
        .collect();
    let meta_types: BTreeMap<&str, VarType> = [META_AGE, META_SEX]
        .into_iter()
        .filter_map(|f| meta_field_type(f).map(|t| (f, t)))
        .collect();
    let reasons: Vec<String> = def
        .exclusions
        .iter()
        .enumerate()
        .filter(|(i, ex)| {
            let path = format!("exclusions[{i}].predicate");
            let verdict = rules::eval(
                &ex.predicate,
                &path,
                &|name| {
                    def.variable(name)
                        .map(|s| &s.vtype)
                        .or_else(|| meta_types.get(name))
                },
                &|name| ev.get(name).or_else(|| meta_values.get(name)),
            );
            matches!(verdict, Ok(Some(true)))
        })
        .map(|(_, ex)| ex.reason.clone())
        .collect();
    ExclusionVerdict {
        cdr_id: def.id.clone(),
        excluded: !reasons.is_empty(),
        reasons,
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExtractionError {
    #[error("extraction for `{cdr_id}` failed: {source}")]
    Provider {
        cdr_id: String,
        #[source]
        source: ProviderError,
    },
}

/// Prompt the model for one rule's variables and parse the answer.
pub async fn extract(
    note: &str,
    def: &CdrDefinition,
    provider: &dyn LlmProvider,
) -> Result<(ExtractedVariables, Duration), ExtractionError> {
    let start = Instant::now();
    let prompt = build_prompt(note, def);
    let raw = provider
        .complete(&prompt.request())
        .await
        .map_err(|source| ExtractionError::Provider {
            cdr_id: def.id.clone(),
            source,
        })?;
    Ok((parse_extraction(&raw, def), start.elapsed()))
}
