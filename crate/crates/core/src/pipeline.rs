//! Selection, extraction, exclusion and execution for one note, with
//! interactive sessions that park undetermined variables for a clinician.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingCache, SharedEmbedder};
use crate::extraction::{
    apply_exclusions, extract, impute_negative, ExclusionVerdict, ExtractedVariables, NoteMeta,
};
use crate::llm::LlmProvider;
use crate::registry::{CdrDefinition, Registry};
use crate::rules::{execute_one, CdrResult, CdrStatus, ExecutionReport, StageSpan};
use crate::selection::{select_cdrs, SelectionConfig, SelectionError, SimilarityProfile};
use crate::value::CoercionError;

pub type SharedLlm = Arc<dyn LlmProvider>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub selection: SelectionConfig,
    /// Park undetermined variables for clinician input instead of imputing
    /// negative defaults.
    pub interactive: bool,
    /// Maximum number of concurrent extraction calls per note.
    pub extraction_parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            selection: SelectionConfig::default(),
            interactive: false,
            extraction_parallelism: 4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.selection
            .validate()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        if self.extraction_parallelism == 0 {
            return Err(PipelineError::InvalidConfig(
                "extraction_parallelism must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn apply(&self, overrides: &Overrides) -> Result<Self, PipelineError> {
        let mut out = self.clone();
        let s = &mut out.selection;
        if let Some(v) = overrides.alpha {
            s.alpha = v;
        }
        if let Some(v) = overrides.num_truncations {
            s.num_truncations = v;
        }
        if let Some(v) = overrides.retention_ratio {
            s.retention_ratio = v;
        }
        if let Some(v) = overrides.rng_seed {
            s.rng_seed = v;
        }
        if let Some(v) = overrides.include_keywords {
            s.include_keywords = v;
        }
        if let Some(v) = overrides.interactive {
            out.interactive = v;
        }
        out.validate()?;
        Ok(out)
    }
}

/// Per-request changes to the pipeline configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub num_truncations: Option<usize>,
    pub retention_ratio: Option<f64>,
    pub rng_seed: Option<u64>,
    pub include_keywords: Option<bool>,
    pub interactive: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    /// Rules selected, extraction not finished.
    Selected,
    AwaitingInput,
    Completed,
    Error,
}

/// Stage timings in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Selection, including embedding calls.
    pub t_sel: f64,
    /// Mean extraction plus execution time per selected rule.
    pub t_exe: f64,
    /// End to end.
    pub t_tot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSession {
    pub session_id: String,
    pub note: String,
    pub note_meta: NoteMeta,
    pub config: PipelineConfig,
    /// Absent only when selection itself failed.
    pub profile: Option<SimilarityProfile>,
    /// One entry per selected rule, in selection order.
    pub extractions: Vec<ExtractedVariables>,
    pub verdicts: Vec<ExclusionVerdict>,
    /// Variables waiting for clinician input, per rule.
    pub pending: BTreeMap<String, Vec<String>>,
    pub report: ExecutionReport,
    pub timings: Timings,
    pub status: SessionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AnalysisSession {
    pub fn selected(&self) -> &[String] {
        self.profile.as_ref().map_or(&[], |p| &p.selected)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("note is empty")]
    EmptyNote,
    #[error("invalid note metadata: {0}")]
    InvalidMeta(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ResolveError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session is not awaiting input (status {0:?})")]
    NotAwaitingInput(SessionStatus),
    #[error("rule `{0}` is not part of this session")]
    UnknownCdr(String),
    #[error("rule `{0}` has no pending variables")]
    CdrNotPending(String),
    #[error("no values supplied")]
    NoValues,
    #[error("rule `{cdr_id}` has no variable `{variable}`")]
    UnknownVariable { cdr_id: String, variable: String },
    #[error("variable `{variable}` of `{cdr_id}` is not pending")]
    NotPending { cdr_id: String, variable: String },
    #[error("variable `{variable}`: {source}")]
    TypeMismatch {
        variable: String,
        #[source]
        source: CoercionError,
    },
}

pub struct Pipeline {
    registry: Arc<Registry>,
    embedder: SharedEmbedder,
    llm: SharedLlm,
    cache: Arc<EmbeddingCache>,
    config: PipelineConfig,
}

struct RuleRun {
    extraction: ExtractedVariables,
    verdict: ExclusionVerdict,
    result: CdrResult,
    pending: Option<Vec<String>>,
    elapsed: Duration,
    failure: Option<String>,
}

impl Pipeline {
    pub fn new(
        registry: Arc<Registry>,
        embedder: SharedEmbedder,
        llm: SharedLlm,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Pipeline {
            registry,
            embedder,
            llm,
            cache: Arc::new(EmbeddingCache::new()),
            config,
        })
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn llm(&self) -> &SharedLlm {
        &self.llm
    }

    /// Analyze with the pipeline's own configuration.
    pub async fn analyze(&self, note: &str, meta: &NoteMeta) -> Result<AnalysisSession, PipelineError> {
        self.analyze_with(note, meta, &self.config).await
    }

    /// Run the whole workflow for one note. Provider failures do not return
    /// an error: they yield a session with status `error` and the cause.
    pub async fn analyze_with(
        &self,
        note: &str,
        meta: &NoteMeta,
        config: &PipelineConfig,
    ) -> Result<AnalysisSession, PipelineError> {
        let start = Instant::now();
        if note.trim().is_empty() {
            return Err(PipelineError::EmptyNote);
        }
        meta.validate().map_err(PipelineError::InvalidMeta)?;
        config.validate()?;

        let mut session = AnalysisSession {
            session_id: uuid::Uuid::new_v4().to_string(),
            note: note.to_string(),
            note_meta: meta.clone(),
            config: config.clone(),
            profile: None,
            extractions: Vec::new(),
            verdicts: Vec::new(),
            pending: BTreeMap::new(),
            report: ExecutionReport::default(),
            timings: Timings::default(),
            status: SessionStatus::Selected,
            error: None,
        };

        let selection = select_cdrs(
            note,
            &self.registry,
            &config.selection,
            self.embedder.as_ref(),
            &self.cache,
        )
        .await;
        let t_sel = start.elapsed();
        session.timings.t_sel = t_sel.as_secs_f64();
        let profile = match selection {
            Ok(p) => p,
            Err(SelectionError::EmptyNote) => return Err(PipelineError::EmptyNote),
            Err(SelectionError::InvalidConfig(m)) => return Err(PipelineError::InvalidConfig(m)),
            Err(e) => {
                tracing::warn!(error = %e, "selection failed");
                session.status = SessionStatus::Error;
                session.error = Some(format!("selection: {e}"));
                session.timings.t_tot = start.elapsed().as_secs_f64();
                return Ok(session);
            }
        };
        let defs: Vec<&CdrDefinition> = profile
            .selected
            .iter()
            .filter_map(|id| self.registry.get(id))
            .collect();
        session.profile = Some(profile);

        let extract_start = Instant::now();
        let llm = self.llm.as_ref();
        // Indices rather than references keep the closure argument free of
        // lifetimes, so the future stays `Send` for any executor.
        let runs: Vec<RuleRun> = stream::iter(0..defs.len())
            .map(|i| {
                let def = defs[i];
                async move {
                    let outcome = extract(note, def, llm).await;
                    let exec_start = Instant::now();
                    let extracted = outcome.as_ref().map(|(ev, _)| ev);
                    let mut run = Self::finish_rule(def, extracted, meta, config.interactive);
                    let extract_time = outcome.as_ref().map_or(Duration::ZERO, |(_, d)| *d);
                    run.elapsed = extract_time + exec_start.elapsed();
                    if let Err(e) = outcome {
                        run.failure = Some(e.to_string());
                    }
                    run
                }
            })
            .buffered(config.extraction_parallelism)
            .collect()
            .await;
        let extract_total = extract_start.elapsed();

        let mut failures = Vec::new();
        let mut exe_sum = Duration::ZERO;
        for run in &runs {
            exe_sum += run.elapsed;
        }
        if !runs.is_empty() {
            session.timings.t_exe = exe_sum.as_secs_f64() / runs.len() as f64;
        }
        for run in runs {
            if let Some(f) = run.failure {
                failures.push(f);
            }
            if let Some(p) = run.pending {
                session.pending.insert(run.extraction.cdr_id.clone(), p);
            }
            session.extractions.push(run.extraction);
            session.verdicts.push(run.verdict);
            session.report.per_cdr.push(run.result);
        }
        session.report.durations = vec![
            StageSpan {
                stage: "selection".into(),
                seconds: t_sel.as_secs_f64(),
            },
            StageSpan {
                stage: "extraction_execution".into(),
                seconds: extract_total.as_secs_f64(),
            },
        ];
        session.status = if !failures.is_empty() {
            session.error = Some(failures.join("; "));
            SessionStatus::Error
        } else if !session.pending.is_empty() {
            SessionStatus::AwaitingInput
        } else {
            SessionStatus::Completed
        };
        session.timings.t_tot = start.elapsed().as_secs_f64();
        Ok(session)
    }

    /// Exclusions are checked on the values at hand first: an excluded rule
    /// is never parked. Otherwise, in interactive mode, undetermined
    /// required variables are parked; the rest are imputed and the rule is
    /// executed.
    fn finish_rule(
        def: &CdrDefinition,
        extraction: Result<&ExtractedVariables, &crate::extraction::ExtractionError>,
        meta: &NoteMeta,
        interactive: bool,
    ) -> RuleRun {
        let ev = match extraction {
            Ok(ev) => ev.clone(),
            Err(e) => {
                return RuleRun {
                    extraction: ExtractedVariables::empty(def),
                    verdict: ExclusionVerdict {
                        cdr_id: def.id.clone(),
                        excluded: false,
                        reasons: Vec::new(),
                    },
                    result: CdrResult {
                        cdr_id: def.id.clone(),
                        status: CdrStatus::Error {
                            stage: "extraction".into(),
                            message: e.to_string(),
                            node_path: None,
                        },
                    },
                    pending: None,
                    elapsed: Duration::ZERO,
                    failure: None,
                }
            }
        };
        let early = apply_exclusions(&ev, meta, def);
        if early.excluded {
            let result = execute_one(def, &ev, &early);
            return RuleRun {
                extraction: ev,
                verdict: early,
                result,
                pending: None,
                elapsed: Duration::ZERO,
                failure: None,
            };
        }
        let pending = if interactive { pending_required(&ev, def) } else { Vec::new() };
        if !pending.is_empty() {
            return RuleRun {
                result: CdrResult {
                    cdr_id: def.id.clone(),
                    status: CdrStatus::AwaitingInput {
                        variables: pending.clone(),
                    },
                },
                extraction: ev,
                verdict: early,
                pending: Some(pending),
                elapsed: Duration::ZERO,
                failure: None,
            };
        }
        let (extraction, verdict, result) = run_complete(def, &ev, meta);
        RuleRun {
            extraction,
            verdict,
            result,
            pending: None,
            elapsed: Duration::ZERO,
            failure: None,
        }
    }

    /// Store clinician-supplied values for a parked rule. Every value is
    /// checked before anything changes, so a rejected call leaves the
    /// session untouched. A rule whose last pending variable is resolved is
    /// executed right away.
    pub fn resolve_variables(
        &self,
        session: &mut AnalysisSession,
        cdr_id: &str,
        values: &BTreeMap<String, serde_json::Value>,
    ) -> Result<(), ResolveError> {
        if session.status != SessionStatus::AwaitingInput {
            return Err(ResolveError::NotAwaitingInput(session.status));
        }
        let Some(pos) = session.extractions.iter().position(|e| e.cdr_id == cdr_id) else {
            return Err(ResolveError::UnknownCdr(cdr_id.to_string()));
        };
        let def = self
            .registry
            .get(cdr_id)
            .ok_or_else(|| ResolveError::UnknownCdr(cdr_id.to_string()))?;
        let pending = session
            .pending
            .get(cdr_id)
            .ok_or_else(|| ResolveError::CdrNotPending(cdr_id.to_string()))?;
        if values.is_empty() {
            return Err(ResolveError::NoValues);
        }
        let mut coerced = Vec::with_capacity(values.len());
        for (name, raw) in values {
            let Some(spec) = def.variable(name) else {
                return Err(ResolveError::UnknownVariable {
                    cdr_id: cdr_id.to_string(),
                    variable: name.clone(),
                });
            };
            if !pending.contains(name) {
                return Err(ResolveError::NotPending {
                    cdr_id: cdr_id.to_string(),
                    variable: name.clone(),
                });
            }
            let value = spec
                .vtype
                .coerce_json(raw)
                .map_err(|source| ResolveError::TypeMismatch {
                    variable: name.clone(),
                    source,
                })?;
            coerced.push((name, value));
        }

        let ev = &mut session.extractions[pos];
        for (name, value) in coerced {
            ev.set_user_supplied(name, value);
        }
        let remaining = pending_required(ev, def);
        if remaining.is_empty() {
            session.pending.remove(cdr_id);
            let (extraction, verdict, result) = run_complete(def, ev, &session.note_meta);
            session.extractions[pos] = extraction;
            session.verdicts[pos] = verdict;
            session.report.per_cdr[pos] = result;
        } else {
            session.report.per_cdr[pos].status = CdrStatus::AwaitingInput {
                variables: remaining.clone(),
            };
            session.pending.insert(cdr_id.to_string(), remaining);
        }
        if session.pending.is_empty() {
            session.status = SessionStatus::Completed;
        }
        Ok(())
    }
}

fn pending_required(ev: &ExtractedVariables, def: &CdrDefinition) -> Vec<String> {
    ev.missing
        .iter()
        .filter(|m| def.variable(m).is_some_and(|s| s.required))
        .cloned()
        .collect()
}

fn run_complete(
    def: &CdrDefinition,
    ev: &ExtractedVariables,
    meta: &NoteMeta,
) -> (ExtractedVariables, ExclusionVerdict, CdrResult) {
    let imputed = impute_negative(ev, def);
    let verdict = apply_exclusions(&imputed, meta, def);
    let result = execute_one(def, &imputed, &verdict);
    (imputed, verdict, result)
}
