//! Single-prompt baseline: the model sees every rule and the note at once
//! and answers with the applicable rules and their outcomes.
//!
//! Answer format, one entry per line:
//!
//! ```text
//! selected: nexus_cspine, pecarn_tbi
//! outcome nexus_cspine: imaging recommended
//! outcome pecarn_tbi: CT not recommended
//! ```
//!
//! `selected: none` (or an empty list) means no rule applies. Parsing is
//! lenient about case, list markers, quotes and surrounding prose; rule ids
//! and outcome labels that are not in the registry are reported as warnings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::extraction::{render_template, variable_line, NOTE_BEGIN, NOTE_END};
use crate::llm::CompletionRequest;
use crate::registry::{CdrDefinition, Registry};

pub const BASELINE_TEMPLATE: &str = include_str!("../../templates/baseline_v1.txt");
pub const BASELINE_SYSTEM_PROMPT: &str = include_str!("../../templates/baseline_system_v1.txt");
pub const BASELINE_HEADER: &str = "Clinical decision rule catalogue";

fn describe(def: &CdrDefinition) -> String {
    let mut out = format!("## {} ({})\n{}\n", def.id, def.name, def.description.trim());
    out.push_str("Variables:\n");
    for v in &def.variables {
        out.push_str(&variable_line(&v.name, &v.vtype, &v.definition));
        out.push('\n');
    }
    for ex in &def.exclusions {
        out.push_str(&format!("Does not apply when: {}\n", ex.reason));
    }
    out.push_str(&format!("Decision logic: {}\n", def.rule.to_json()));
    out.push_str(&format!("Outcomes: {}\n", def.outcomes.join("; ")));
    out
}

pub fn build_baseline_prompt(note: &str, registry: &Registry) -> CompletionRequest {
    let rules = registry
        .definitions()
        .iter()
        .map(describe)
        .collect::<Vec<_>>()
        .join("\n");
    let user = render_template(
        BASELINE_TEMPLATE,
        &[("header", BASELINE_HEADER), ("rules", &rules), ("note", note)],
    );
    CompletionRequest::new(BASELINE_SYSTEM_PROMPT.trim_end(), user)
}

/// The note embedded in a baseline prompt.
pub fn prompt_note(text: &str) -> Option<&str> {
    if !text.starts_with(BASELINE_HEADER) {
        return None;
    }
    let begin = text.find(NOTE_BEGIN)? + NOTE_BEGIN.len();
    let end = text.rfind(NOTE_END)?;
    text.get(begin..end)?.strip_prefix('\n')?.strip_suffix('\n')
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineAnswer {
    /// Selected rule ids in answer order, without duplicates.
    pub selected: Vec<String>,
    /// Outcome label (as declared by the rule) per rule id.
    pub outcomes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn strip_decoration(line: &str) -> &str {
    let line = line.trim();
    let line = line
        .strip_prefix("- ")
        .or_else(|| line.strip_prefix("* "))
        .unwrap_or(line);
    line.trim_matches(|c| matches!(c, '`' | '*' | '"' | '\'')).trim()
}

fn clean(s: &str) -> String {
    s.trim()
        .trim_matches(|c| matches!(c, '`' | '*' | '"' | '\'' | '.' | '[' | ']'))
        .trim()
        .to_string()
}

const NONE_WORDS: [&str; 4] = ["none", "no applicable cdr", "no applicable rule", "no_cdr"];

/// Parse a baseline answer. Never fails. When the answer has several
/// `selected:` lines the last one wins.
pub fn parse_baseline_answer(raw: &str, registry: &Registry) -> BaselineAnswer {
    let mut answer = BaselineAnswer::default();
    let mut outcomes: Vec<(String, String)> = Vec::new();
    for line in raw.lines() {
        let line = strip_decoration(line);
        let lower = line.to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("selected:") {
            answer.selected.clear();
            let rest = clean(rest);
            if NONE_WORDS.contains(&rest.as_str()) {
                continue;
            }
            for id in rest.split(',').map(clean).filter(|s| !s.is_empty()) {
                if registry.get(&id).is_none() {
                    answer.warnings.push(format!("unknown rule `{id}` ignored"));
                } else if !answer.selected.contains(&id) {
                    answer.selected.push(id);
                }
            }
        } else if let Some(rest) = lower.strip_prefix("outcome") {
            let original = &line[line.len() - rest.len()..];
            let Some((id, label)) = original.split_once(':') else {
                answer.warnings.push(format!("unreadable outcome line `{line}`"));
                continue;
            };
            outcomes.push((clean(id).to_ascii_lowercase(), clean(label)));
        }
    }
    for (id, label) in outcomes {
        let Some(def) = registry.get(&id) else {
            answer.warnings.push(format!("outcome for unknown rule `{id}` ignored"));
            continue;
        };
        match def.outcomes.iter().find(|o| o.eq_ignore_ascii_case(&label)) {
            Some(o) => {
                answer.outcomes.insert(id, o.clone());
            }
            None => answer
                .warnings
                .push(format!("`{label}` is not an outcome of `{id}`")),
        }
    }
    answer
}
