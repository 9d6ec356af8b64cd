//! Clinical decision rule definitions: file format, validation and the
//! loaded registry.
//!
//! Each rule lives in its own JSON file. See `docs/definition-format.md` for
//! the schema; `crates/core/registry/` holds the bundled definitions.

mod definition;
pub mod lint;
mod validate;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};

pub use definition::{
    CdrDefinition, CmpOp, ExclusionRule, Operand, Predicate, RuleNode, TreeError, VariableSpec,
    SCHEMA_VERSION,
};
pub use validate::{
    check_comparison, is_identifier, meta_field_type, validate_definition, Violation,
    ViolationCode, MAX_TREE_DEPTH, META_AGE, META_SEX, SEX_VALUES,
};

/// Line introducing keyword expansions in the selection text.
pub const KEYWORDS_PREFIX: &str = "Keywords to consider often include: ";

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}:{column}: field `{field}`: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        column: usize,
        field: String,
        message: String,
    },
    #[error("duplicate definition id `{id}` in {first} and {second}")]
    DuplicateId {
        id: String,
        first: PathBuf,
        second: PathBuf,
    },
    #[error("{file}: invalid definition `{id}`: {}", join_violations(.violations))]
    Invalid {
        file: PathBuf,
        id: String,
        violations: Vec<Violation>,
    },
    #[error("no definitions found in {0}")]
    NoDefinitions(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Parse one definition document without validating it.
pub fn parse_definition(text: &str, file: &Path) -> Result<CdrDefinition, RegistryError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let parsed: Result<CdrDefinition, _> = serde_path_to_error::deserialize(&mut de);
    match parsed {
        Ok(def) => {
            de.end().map_err(|e| RegistryError::Parse {
                file: file.to_path_buf(),
                line: e.line(),
                column: e.column(),
                field: ".".into(),
                message: e.to_string(),
            })?;
            Ok(def)
        }
        Err(err) => {
            let field = err.path().to_string();
            let inner = err.into_inner();
            Err(RegistryError::Parse {
                file: file.to_path_buf(),
                line: inner.line(),
                column: inner.column(),
                field,
                message: inner.to_string(),
            })
        }
    }
}

/// Immutable, validated set of rule definitions ordered by id.
#[derive(Debug, Clone)]
pub struct Registry {
    definitions: Arc<[CdrDefinition]>,
    index: Arc<BTreeMap<String, usize>>,
    source_digest: String,
}

impl Registry {
    /// Load every `*.json` file in `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, RegistryError> {
        Self::load_dirs(&[dir.as_ref()])
    }

    /// Load and merge several directories; ids must be unique across all of
    /// them.
    pub fn load_dirs<P: AsRef<Path>>(dirs: &[P]) -> Result<Self, RegistryError> {
        let mut sources = Vec::new();
        for dir in dirs {
            let dir = dir.as_ref();
            let entries = fs::read_dir(dir).map_err(|source| RegistryError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
            let mut files: Vec<PathBuf> = entries
                .filter_map(Result::ok)
                .map(|e| e.path())
                .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
                .collect();
            files.sort();
            for path in files {
                let text = fs::read_to_string(&path).map_err(|source| RegistryError::Io {
                    path: path.clone(),
                    source,
                })?;
                sources.push((path, text));
            }
        }
        if sources.is_empty() {
            let names: Vec<String> = dirs
                .iter()
                .map(|d| d.as_ref().display().to_string())
                .collect();
            return Err(RegistryError::NoDefinitions(names.join(", ")));
        }
        Self::from_sources(sources)
    }

    /// Build a registry from `(origin, json text)` pairs.
    pub fn from_sources(sources: Vec<(PathBuf, String)>) -> Result<Self, RegistryError> {
        let mut by_id: BTreeMap<String, (PathBuf, CdrDefinition, [u8; 32])> = BTreeMap::new();
        for (path, text) in sources {
            let def = parse_definition(&text, &path)?;
            let violations = validate_definition(&def);
            if !violations.is_empty() {
                return Err(RegistryError::Invalid {
                    file: path,
                    id: def.id,
                    violations,
                });
            }
            let hash: [u8; 32] = Sha256::digest(text.as_bytes()).into();
            if let Some((first, _, _)) = by_id.get(&def.id) {
                return Err(RegistryError::DuplicateId {
                    id: def.id.clone(),
                    first: first.clone(),
                    second: path,
                });
            }
            by_id.insert(def.id.clone(), (path, def, hash));
        }
        if by_id.is_empty() {
            return Err(RegistryError::NoDefinitions("<sources>".into()));
        }
        let mut digest = Sha256::new();
        let mut defs = Vec::with_capacity(by_id.len());
        for (id, (_, def, hash)) in by_id {
            digest.update(id.as_bytes());
            digest.update([0u8]);
            digest.update(hash);
            defs.push(def);
        }
        Ok(Self::assemble(defs, hex::encode(digest.finalize())))
    }

    /// Build a registry from already parsed definitions (validated here).
    pub fn from_definitions(defs: Vec<CdrDefinition>) -> Result<Self, RegistryError> {
        let sources = defs
            .into_iter()
            .map(|d| {
                let text = serde_json::to_string(&d).expect("definitions serialize");
                (PathBuf::from(format!("<{}>", d.id)), text)
            })
            .collect();
        Self::from_sources(sources)
    }

    fn assemble(defs: Vec<CdrDefinition>, source_digest: String) -> Self {
        let index = defs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.clone(), i))
            .collect();
        Registry {
            definitions: defs.into(),
            index: Arc::new(index),
            source_digest,
        }
    }

    pub fn definitions(&self) -> &[CdrDefinition] {
        &self.definitions
    }

    pub fn get(&self, id: &str) -> Option<&CdrDefinition> {
        self.index.get(id).map(|&i| &self.definitions[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.definitions.iter().map(|d| d.id.as_str())
    }

    pub fn len(&self) -> usize {
        self.definitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.definitions.is_empty()
    }

    /// SHA-256 over (id, file hash) pairs in id order.
    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }
}

/// Text embedded for similarity against notes: the description, optionally
/// followed by one line listing the keyword expansions.
pub fn selection_text(def: &CdrDefinition, include_keywords: bool) -> String {
    if !include_keywords || def.keywords.is_empty() {
        return def.description.clone();
    }
    format!(
        "{}\n{}{}",
        def.description,
        KEYWORDS_PREFIX,
        def.keywords.join(", ")
    )
}

/// Definitions shipped with the crate.
pub mod bundled {
    use std::path::PathBuf;

    use super::{parse_definition, CdrDefinition, Registry};

    pub const NEXUS_CSPINE: &str = include_str!("../../registry/nexus_cspine.json");
    pub const PECARN_TBI: &str = include_str!("../../registry/pecarn_tbi.json");
    pub const PECARN_IAI: &str = include_str!("../../registry/pecarn_iai.json");

    /// Directory holding the bundled definition files.
    pub fn dir() -> PathBuf {
        PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/registry"))
    }

    fn parse(text: &str, name: &str) -> CdrDefinition {
        parse_definition(text, name.as_ref()).expect("bundled definition parses")
    }

    pub fn nexus_cspine() -> CdrDefinition {
        parse(NEXUS_CSPINE, "nexus_cspine.json")
    }

    pub fn pecarn_tbi() -> CdrDefinition {
        parse(PECARN_TBI, "pecarn_tbi.json")
    }

    pub fn pecarn_iai() -> CdrDefinition {
        parse(PECARN_IAI, "pecarn_iai.json")
    }

    pub fn all() -> Vec<CdrDefinition> {
        vec![nexus_cspine(), pecarn_iai(), pecarn_tbi()]
    }

    pub fn registry() -> Registry {
        Registry::from_sources(vec![
            ("nexus_cspine.json".into(), NEXUS_CSPINE.to_string()),
            ("pecarn_iai.json".into(), PECARN_IAI.to_string()),
            ("pecarn_tbi.json".into(), PECARN_TBI.to_string()),
        ])
        .expect("bundled registry is valid")
    }
}
