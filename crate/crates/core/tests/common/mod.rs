#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use cdr_agent::eval::{load_dataset, LabeledNote};
use cdr_agent::registry::bundled;
use cdr_agent::{MockEmbedder, MockLlm, Pipeline, PipelineConfig, Registry};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// The bundled rules plus the extension fixtures: 15 rules in all.
pub fn registry15() -> Registry {
    Registry::load_dirs(&[bundled::dir(), fixtures().join("registry_ext")])
        .expect("fixture registry loads")
}

pub fn mini_dataset() -> Vec<LabeledNote> {
    load_dataset(fixtures().join("mini_dataset.jsonl")).expect("mini dataset loads")
}

pub fn mock_pipeline(registry: Registry, llm: MockLlm, config: PipelineConfig) -> Pipeline {
    Pipeline::new(
        Arc::new(registry),
        Arc::new(MockEmbedder::default()),
        Arc::new(llm),
        config,
    )
    .expect("valid config")
}

/// Pipeline over the 15-rule registry with the phrase-matching mock model.
pub fn default_pipeline() -> Pipeline {
    mock_pipeline(registry15(), MockLlm::new(), PipelineConfig::default())
}
