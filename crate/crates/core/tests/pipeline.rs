mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use async_trait::async_trait;
use cdr_agent::eval::strip_timings;
use cdr_agent::llm::fixture_key;
use cdr_agent::pipeline::{PipelineError, ResolveError};
use cdr_agent::{
    AnalysisSession, CdrStatus, CompletionRequest, LlmProvider, MockEmbedder, MockLlm, NoteMeta,
    Pipeline, PipelineConfig, Provenance, ProviderError, SessionStatus, Value,
};
use serde_json::json;

fn note(id: &str) -> (String, NoteMeta) {
    let n = common::mini_dataset()
        .into_iter()
        .find(|n| n.note_id == id)
        .expect("note in mini dataset");
    (n.note, n.note_meta)
}

fn interactive() -> PipelineConfig {
    PipelineConfig {
        interactive: true,
        ..PipelineConfig::default()
    }
}

/// mini-02 selects only NEXUS; this answer leaves two indicators open.
fn partial_nexus() -> (Pipeline, String, NoteMeta) {
    let (text, meta) = note("mini-02");
    let mut llm = MockLlm::new();
    llm.insert(
        &text,
        "nexus_cspine",
        "focal_neurologic_deficit: no\nintoxication: no\ndistracting_injury: no\n",
    );
    (common::mock_pipeline(common::registry15(), llm, interactive()), text, meta)
}

fn comparable(session: &AnalysisSession) -> serde_json::Value {
    let mut v = serde_json::to_value(session).unwrap();
    strip_timings(&mut v);
    v.as_object_mut().unwrap().remove("session_id");
    v
}

#[tokio::test]
async fn nexus_note_recommends_imaging() {
    let (text, meta) = note("mini-02");
    let s = common::default_pipeline().analyze(&text, &meta).await.unwrap();
    assert_eq!(s.status, SessionStatus::Completed);
    assert_eq!(s.selected(), ["nexus_cspine"]);
    let outcome = s.report.per_cdr[0].outcome().unwrap();
    assert_eq!(outcome.label, "imaging recommended");
    assert!(outcome.is_positive);
    let ev = &s.extractions[0];
    assert_eq!(ev.values["intoxication"].value, Value::Bool(true));
    assert_eq!(ev.values["intoxication"].provenance, Provenance::Extracted);
    assert_eq!(ev.values["midline_tenderness"].provenance, Provenance::Imputed);
    assert!(ev.missing.is_empty());
}

#[tokio::test]
async fn unrelated_note_selects_nothing() {
    let (text, meta) = note("mini-19");
    let s = common::default_pipeline().analyze(&text, &meta).await.unwrap();
    assert_eq!(s.status, SessionStatus::Completed);
    assert!(s.selected().is_empty());
    assert!(s.report.is_no_applicable_cdr());
}

#[tokio::test]
async fn interactive_session_parks_then_completes() {
    let (pipeline, text, meta) = partial_nexus();
    let mut s = pipeline.analyze(&text, &meta).await.unwrap();
    assert_eq!(s.status, SessionStatus::AwaitingInput);
    let parked = vec!["midline_tenderness".to_string(), "altered_consciousness".to_string()];
    assert_eq!(s.pending["nexus_cspine"], parked);
    assert_eq!(
        s.report.per_cdr[0].status,
        CdrStatus::AwaitingInput {
            variables: parked.clone()
        }
    );

    let one = BTreeMap::from([("midline_tenderness".to_string(), json!("yes"))]);
    pipeline.resolve_variables(&mut s, "nexus_cspine", &one).unwrap();
    assert_eq!(s.status, SessionStatus::AwaitingInput);
    assert_eq!(s.pending["nexus_cspine"], ["altered_consciousness"]);

    let two = BTreeMap::from([("altered_consciousness".to_string(), json!(false))]);
    pipeline.resolve_variables(&mut s, "nexus_cspine", &two).unwrap();
    assert_eq!(s.status, SessionStatus::Completed);
    assert!(s.pending.is_empty());
    let ev = &s.extractions[0];
    assert_eq!(ev.values["midline_tenderness"].provenance, Provenance::UserSupplied);
    assert_eq!(ev.values["intoxication"].provenance, Provenance::Extracted);
    assert_eq!(s.report.per_cdr[0].outcome().unwrap().label, "imaging recommended");

    let err = pipeline.resolve_variables(&mut s, "nexus_cspine", &two).unwrap_err();
    assert_eq!(err, ResolveError::NotAwaitingInput(SessionStatus::Completed));
}

#[tokio::test]
async fn resolving_all_false_gives_negative_outcome() {
    let (pipeline, text, meta) = partial_nexus();
    let mut s = pipeline.analyze(&text, &meta).await.unwrap();
    let values = BTreeMap::from([
        ("midline_tenderness".to_string(), json!(false)),
        ("altered_consciousness".to_string(), json!("no")),
    ]);
    pipeline.resolve_variables(&mut s, "nexus_cspine", &values).unwrap();
    let outcome = s.report.per_cdr[0].outcome().unwrap();
    assert_eq!(outcome.label, "imaging not necessary");
    assert!(!outcome.is_positive);
}

#[tokio::test]
async fn rejected_resolution_leaves_session_unchanged() {
    let (pipeline, text, meta) = partial_nexus();
    let mut s = pipeline.analyze(&text, &meta).await.unwrap();
    let before = s.clone();
    let cases: Vec<(&str, BTreeMap<String, serde_json::Value>)> = vec![
        (
            "nexus_cspine",
            BTreeMap::from([
                ("midline_tenderness".to_string(), json!(true)),
                ("altered_consciousness".to_string(), json!(3.5)),
            ]),
        ),
        ("nexus_cspine", BTreeMap::from([("intoxication".to_string(), json!(true))])),
        ("nexus_cspine", BTreeMap::from([("gcs_score".to_string(), json!(15))])),
        ("nexus_cspine", BTreeMap::new()),
        ("pecarn_tbi", BTreeMap::from([("vomiting".to_string(), json!(true))])),
    ];
    let mut errors = Vec::new();
    for (cdr, values) in &cases {
        errors.push(pipeline.resolve_variables(&mut s, cdr, values).unwrap_err());
        assert_eq!(s, before);
    }
    assert!(matches!(&errors[0], ResolveError::TypeMismatch { variable, .. } if variable == "altered_consciousness"));
    assert!(matches!(&errors[1], ResolveError::NotPending { .. }));
    assert!(matches!(&errors[2], ResolveError::UnknownVariable { .. }));
    assert_eq!(errors[3], ResolveError::NoValues);
    assert_eq!(errors[4], ResolveError::UnknownCdr("pecarn_tbi".into()));
}

#[tokio::test]
async fn excluded_rule_is_never_parked() {
    let (text, _) = note("mini-03");
    let adult = NoteMeta {
        patient_age_years: Some(30.0),
        patient_sex: None,
    };
    let pipeline = common::mock_pipeline(common::registry15(), MockLlm::new(), interactive());
    let s = pipeline.analyze(&text, &adult).await.unwrap();
    assert_eq!(s.selected(), ["pecarn_tbi"]);
    assert!(s.pending.is_empty());
    assert_eq!(s.status, SessionStatus::Completed);
    assert!(matches!(&s.report.per_cdr[0].status, CdrStatus::Excluded { reasons } if reasons.len() == 1));
}

#[tokio::test]
async fn replay_is_deterministic() {
    let (text, meta) = note("mini-01");
    let pipeline = common::default_pipeline();
    let a = pipeline.analyze(&text, &meta).await.unwrap();
    let b = pipeline.analyze(&text, &meta).await.unwrap();
    let fresh = common::default_pipeline().analyze(&text, &meta).await.unwrap();
    assert_ne!(a.session_id, b.session_id);
    assert_eq!(comparable(&a), comparable(&b));
    assert_eq!(comparable(&a), comparable(&fresh));
}

#[tokio::test]
async fn session_round_trips_through_json() {
    let (pipeline, text, meta) = partial_nexus();
    let s = pipeline.analyze(&text, &meta).await.unwrap();
    let back: AnalysisSession = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
    assert_eq!(back, s);
}

#[tokio::test]
async fn bad_inputs_are_rejected() {
    let pipeline = common::default_pipeline();
    let meta = NoteMeta::default();
    assert_eq!(pipeline.analyze("  \n", &meta).await.unwrap_err(), PipelineError::EmptyNote);
    let bad = NoteMeta {
        patient_age_years: Some(-1.0),
        patient_sex: None,
    };
    assert!(matches!(pipeline.analyze("neck pain", &bad).await, Err(PipelineError::InvalidMeta(_))));
    let config = PipelineConfig {
        extraction_parallelism: 0,
        ..PipelineConfig::default()
    };
    assert!(matches!(
        pipeline.analyze_with("neck pain", &meta, &config).await,
        Err(PipelineError::InvalidConfig(_))
    ));
}

/// Fails every prompt that mentions `needle`, delegating the rest.
struct FailOn {
    needle: &'static str,
    inner: MockLlm,
}

#[async_trait]
impl LlmProvider for FailOn {
    fn id(&self) -> &str {
        "fail-on"
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        if request.user.contains(self.needle) {
            return Err(ProviderError::Transport {
                message: "connection refused".into(),
                attempts: 3,
            });
        }
        self.inner.complete(request).await
    }
}

fn failing_pipeline(needle: &'static str) -> Pipeline {
    Pipeline::new(
        Arc::new(common::registry15()),
        Arc::new(MockEmbedder::default()),
        Arc::new(FailOn {
            needle,
            inner: MockLlm::new(),
        }),
        PipelineConfig::default(),
    )
    .unwrap()
}

#[tokio::test]
async fn extraction_failure_is_isolated_per_rule() {
    let (text, meta) = note("mini-01");
    let s = failing_pipeline("Canadian").analyze(&text, &meta).await.unwrap();
    assert_eq!(s.selected(), ["nexus_cspine", "canadian_cspine"]);
    assert_eq!(s.status, SessionStatus::Error);
    assert!(s.error.as_deref().unwrap().contains("connection refused"));
    assert_eq!(s.report.per_cdr[0].outcome().unwrap().label, "imaging recommended");
    assert!(matches!(&s.report.per_cdr[1].status, CdrStatus::Error { stage, .. } if stage == "extraction"));
}

#[tokio::test]
async fn provider_outage_yields_error_session() {
    let (text, meta) = note("mini-02");
    let s = failing_pipeline("").analyze(&text, &meta).await.unwrap();
    assert_eq!(s.status, SessionStatus::Error);
    assert!(s.report.per_cdr.iter().all(|r| r.outcome().is_none()));
}

#[tokio::test]
async fn fixture_answers_take_priority() {
    let (text, meta) = note("mini-02");
    let mut llm = MockLlm::new();
    llm.insert(&text, "nexus_cspine", "intoxication: no\ndistracting_injury: no\n");
    let s = common::mock_pipeline(common::registry15(), llm, PipelineConfig::default())
        .analyze(&text, &meta)
        .await
        .unwrap();
    assert_eq!(s.report.per_cdr[0].outcome().unwrap().label, "imaging not necessary");
    assert!(fixture_key(&text, "nexus_cspine").ends_with("/nexus_cspine"));
}
