//! Evaluation against labelled notes: dataset files, agent and baseline
//! runs, metrics and synthetic note generation.
//!
//! A dataset is a JSON-lines file with one [`LabeledNote`] per line:
//!
//! ```json
//! {"note_id": "n1", "note": "...", "note_meta": {"patient_age_years": 7},
//!  "label_sets": [["pecarn_tbi"], ["pecarn_tbi", "nexus_cspine"]],
//!  "outcome_labels": {"pecarn_tbi": "negative"}}
//! ```
//!
//! `label_sets` holds one set per annotator; an empty set means no rule
//! applies. `note_meta` and `outcome_labels` may be omitted.

pub mod baseline;
pub mod metrics;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::extraction::NoteMeta;
use crate::pipeline::{Pipeline, PipelineConfig, SessionStatus};
use crate::registry::Registry;
use crate::rules::{CdrResult, CdrStatus};
use crate::selection::SelectionConfig;
use metrics::{Counts, MetricError, NotePrediction, OutcomeConfusion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeLabel {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledNote {
    pub note_id: String,
    pub note: String,
    #[serde(default)]
    pub note_meta: NoteMeta,
    pub label_sets: Vec<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub outcome_labels: BTreeMap<String, OutcomeLabel>,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("note `{note_id}`: {message}")]
    Dataset { note_id: String, message: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("cannot serialize report: {0}")]
    Serialize(#[from] serde_json::Error),
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Read a JSON-lines dataset. Blank lines are skipped.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledNote>, EvalError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(io_error(path))?;
    let mut notes = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_error(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let note = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        notes.push(note);
    }
    Ok(notes)
}

pub fn write_dataset(path: impl AsRef<Path>, notes: &[LabeledNote]) -> Result<(), EvalError> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_error(path))?);
    for n in notes {
        serde_json::to_writer(&mut out, n)?;
        out.write_all(b"\n").map_err(io_error(path))?;
    }
    out.flush().map_err(io_error(path))
}

/// Check a dataset against a registry: unique non-empty ids, non-empty
/// notes, at least one annotator set, and only known rule ids.
pub fn validate_dataset(notes: &[LabeledNote], registry: &Registry) -> Result<(), EvalError> {
    let mut seen = HashSet::new();
    for n in notes {
        let fail = |message: String| EvalError::Dataset {
            note_id: n.note_id.clone(),
            message,
        };
        if n.note_id.is_empty() {
            return Err(fail("note_id is empty".into()));
        }
        if !seen.insert(n.note_id.as_str()) {
            return Err(fail("duplicate note_id".into()));
        }
        if n.note.trim().is_empty() {
            return Err(fail("note text is empty".into()));
        }
        if n.label_sets.is_empty() {
            return Err(fail("label_sets is empty".into()));
        }
        n.note_meta.validate().map_err(fail)?;
        let ids = n.label_sets.iter().flatten().chain(n.outcome_labels.keys());
        for id in ids {
            if registry.get(id).is_none() {
                return Err(fail(format!("unknown rule `{id}`")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Agent,
    Baseline,
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "agent" => Ok(EvalMode::Agent),
            "baseline" => Ok(EvalMode::Baseline),
            other => Err(format!("unknown mode `{other}` (expected agent or baseline)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Notes evaluated concurrently.
    pub note_parallelism: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { note_parallelism: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteDiagnostics {
    pub note_id: String,
    /// Selected rules in selection order.
    pub selected: Vec<String>,
    pub exact_match: bool,
    /// Annotator set used for F1 (index into `label_sets`).
    pub matched_annotator: usize,
    pub f1_counts: Counts,
    pub results: Vec<CdrResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub t_sel: Option<f64>,
    pub t_exe: Option<f64>,
    pub t_tot: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub registry_digest: String,
    pub selection: SelectionConfig,
    pub notes: usize,
    pub failures: usize,
    pub ea_accuracy: f64,
    pub ea_correct: usize,
    pub f1: f64,
    pub f1_counts: Counts,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub outcome_confusion: OutcomeConfusion,
    /// Mean selection time over successful notes (agent mode only).
    pub t_sel: Option<f64>,
    /// Mean time per executed rule (agent mode only).
    pub t_exe: Option<f64>,
    /// Mean end-to-end time over successful notes.
    pub t_tot: Option<f64>,
    pub per_note: Vec<NoteDiagnostics>,
}

impl EvalReport {
    pub fn to_json_pretty(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

struct NoteRun {
    selected: Vec<String>,
    results: Vec<CdrResult>,
    error: Option<String>,
    t_sel: Option<f64>,
    t_exe: Option<f64>,
    t_tot: f64,
}

async fn run_agent(pipeline: &Pipeline, config: &PipelineConfig, note: &LabeledNote) -> NoteRun {
    let start = Instant::now();
    match pipeline.analyze_with(&note.note, &note.note_meta, config).await {
        Ok(s) => NoteRun {
            selected: s.selected().to_vec(),
            error: (s.status == SessionStatus::Error).then(|| s.error.clone().unwrap_or_default()),
            results: s.report.per_cdr,
            t_sel: Some(s.timings.t_sel),
            t_exe: Some(s.timings.t_exe),
            t_tot: s.timings.t_tot,
        },
        Err(e) => NoteRun {
            selected: Vec::new(),
            results: Vec::new(),
            error: Some(e.to_string()),
            t_sel: None,
            t_exe: None,
            t_tot: start.elapsed().as_secs_f64(),
        },
    }
}

async fn run_baseline(pipeline: &Pipeline, note: &LabeledNote) -> NoteRun {
    let start = Instant::now();
    let registry = pipeline.registry();
    let request = baseline::build_baseline_prompt(&note.note, registry);
    let raw = pipeline.llm().complete(&request).await;
    let mut run = NoteRun {
        selected: Vec::new(),
        results: Vec::new(),
        error: None,
        t_sel: None,
        t_exe: None,
        t_tot: 0.0,
    };
    match raw {
        Ok(raw) => {
            let answer = baseline::parse_baseline_answer(&raw, registry);
            for id in &answer.selected {
                let status = match answer.outcomes.get(id) {
                    Some(label) => CdrStatus::Outcome {
                        label: label.clone(),
                        is_positive: registry.get(id).is_some_and(|d| d.is_positive(label)),
                    },
                    None => CdrStatus::Error {
                        stage: "baseline".into(),
                        message: "no outcome given".into(),
                        node_path: None,
                    },
                };
                run.results.push(CdrResult {
                    cdr_id: id.clone(),
                    status,
                });
            }
            run.selected = answer.selected;
        }
        Err(e) => run.error = Some(e.to_string()),
    }
    run.t_tot = start.elapsed().as_secs_f64();
    run
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Run every note through the agent (non-interactive) or the baseline and
/// score the result.
pub async fn run_eval(
    dataset: &[LabeledNote],
    pipeline: &Pipeline,
    mode: EvalMode,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let registry = pipeline.registry();
    validate_dataset(dataset, registry)?;
    let pipeline_config = PipelineConfig {
        interactive: false,
        ..pipeline.config().clone()
    };
    let runs: Vec<NoteRun> = stream::iter(dataset)
        .map(|note| {
            let pipeline_config = &pipeline_config;
            async move {
                match mode {
                    EvalMode::Agent => run_agent(pipeline, pipeline_config, note).await,
                    EvalMode::Baseline => run_baseline(pipeline, note).await,
                }
            }
        })
        .buffered(config.note_parallelism.max(1))
        .collect()
        .await;

    let preds: Vec<NotePrediction> = dataset
        .iter()
        .zip(&runs)
        .map(|(n, r)| NotePrediction {
            note_id: n.note_id.clone(),
            selected: r.selected.iter().cloned().collect(),
            positive: r
                .results
                .iter()
                .filter(|c| matches!(c.status, CdrStatus::Outcome { is_positive: true, .. }))
                .map(|c| c.cdr_id.clone())
                .collect(),
            failed: r.error.is_some(),
        })
        .collect();

    let ea_accuracy = metrics::ea_accuracy(&preds, dataset)?;
    let f1_counts = metrics::f1_counts(&preds, dataset, registry.ids().chain([metrics::NO_CDR]))?;
    let sens = metrics::sensitivity_specificity(&preds, dataset)?;

    let ok = || runs.iter().filter(|r| r.error.is_none());
    let executed: usize = ok().filter(|r| r.t_exe.is_some()).map(|r| r.selected.len()).sum();
    let t_exe = (executed > 0).then(|| {
        ok().filter_map(|r| r.t_exe.map(|t| t * r.selected.len() as f64))
            .sum::<f64>()
            / executed as f64
    });

    let per_note: Vec<NoteDiagnostics> = dataset
        .iter()
        .zip(&preds)
        .zip(runs.iter())
        .map(|((n, p), r)| {
            let (matched_annotator, counts) = metrics::note_counts(p, n);
            NoteDiagnostics {
                note_id: n.note_id.clone(),
                selected: r.selected.clone(),
                exact_match: metrics::exact_match(p, n).is_some(),
                matched_annotator,
                f1_counts: counts,
                results: r.results.clone(),
                error: r.error.clone(),
                t_sel: r.t_sel,
                t_exe: r.t_exe,
                t_tot: Some(r.t_tot),
            }
        })
        .collect();

    Ok(EvalReport {
        mode,
        registry_digest: registry.source_digest().to_string(),
        selection: pipeline_config.selection.clone(),
        notes: dataset.len(),
        failures: preds.iter().filter(|p| p.failed).count(),
        ea_accuracy,
        ea_correct: per_note.iter().filter(|d| d.exact_match).count(),
        f1: f1_counts.f1(),
        f1_counts,
        sensitivity: sens.sensitivity,
        specificity: sens.specificity,
        outcome_confusion: sens.confusion,
        t_sel: mean(ok().filter_map(|r| r.t_sel)),
        t_exe,
        t_tot: mean(ok().map(|r| r.t_tot)),
        per_note,
    })
}

/// Remove every timing field (`t_sel`, `t_exe`, `t_tot`, `seconds`,
/// `durations`) from a JSON document, recursively. Used to compare runs.
pub fn strip_timings(value: &mut serde_json::Value) {
    const KEYS: [&str; 5] = ["t_sel", "t_exe", "t_tot", "seconds", "durations"];
    match value {
        serde_json::Value::Object(map) => {
            map.retain(|k, _| !KEYS.contains(&k.as_str()));
            map.values_mut().for_each(strip_timings);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timings),
        _ => {}
    }
}
