//! Template-based synthetic notes from tabular patient features.
//!
//! The table is a CSV file with a header row. Reserved columns:
//!
//! * `cdr_id` (required): the rule the row was collected for;
//! * `intervention` (required): `1` if the patient needed the intervention
//!   the rule screens for, else `0`;
//! * `age_years`, `sex` (optional): demographics for the opening sentence
//!   and the note metadata.
//!
//! Every other column is a feature. Templates map each feature to a map
//! from cell value to sentence; an empty cell produces no sentence.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LabeledNote, OutcomeLabel};
use crate::extraction::NoteMeta;
use crate::llm::{CompletionRequest, LlmProvider};
use crate::provider::ProviderError;
use crate::registry::SEX_VALUES;

pub const COL_CDR: &str = "cdr_id";
pub const COL_INTERVENTION: &str = "intervention";
pub const COL_AGE: &str = "age_years";
pub const COL_SEX: &str = "sex";

pub type Templates = BTreeMap<String, BTreeMap<String, String>>;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, thiserror::Error)]
pub enum SyntheticError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("feature table has no rows")]
    EmptyTable,
    #[error("feature table lacks the `{0}` column")]
    MissingColumn(&'static str),
    #[error("no template for feature `{feature}`")]
    MissingFeature { feature: String },
    #[error("no template for value {value:?} of feature `{feature}`")]
    MissingTemplate { feature: String, value: String },
    #[error("row {row}, column `{column}`: {message}")]
    BadCell {
        row: usize,
        column: String,
        message: String,
    },
    #[error("positive_fraction must lie in [0, 1], got {0}")]
    BadFraction(f64),
    #[error("need {needed} {class} rows, table has {available}")]
    InsufficientRows {
        class: &'static str,
        needed: usize,
        available: usize,
    },
}

impl FeatureTable {
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self, csv::Error> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.iter().map(str::to_string).collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()?;
        Ok(FeatureTable { headers, rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SyntheticError> {
        let path = path.as_ref();
        let read = |message: String| SyntheticError::Read {
            path: path.display().to_string(),
            message,
        };
        let file = std::fs::File::open(path).map_err(|e| read(e.to_string()))?;
        Self::from_csv_reader(file).map_err(|e| read(e.to_string()))
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<Templates, SyntheticError> {
    let path = path.as_ref();
    let read = |message: String| SyntheticError::Read {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| read(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| read(e.to_string()))
}

struct Columns {
    cdr: usize,
    intervention: usize,
    age: Option<usize>,
    sex: Option<usize>,
    features: Vec<usize>,
}

fn columns(table: &FeatureTable, templates: &Templates) -> Result<Columns, SyntheticError> {
    let cdr = table.column(COL_CDR).ok_or(SyntheticError::MissingColumn(COL_CDR))?;
    let intervention = table
        .column(COL_INTERVENTION)
        .ok_or(SyntheticError::MissingColumn(COL_INTERVENTION))?;
    let reserved = [COL_CDR, COL_INTERVENTION, COL_AGE, COL_SEX];
    let features: Vec<usize> = (0..table.headers.len())
        .filter(|&i| !reserved.contains(&table.headers[i].as_str()))
        .collect();
    for &f in &features {
        let name = &table.headers[f];
        let map = templates
            .get(name)
            .ok_or_else(|| SyntheticError::MissingFeature {
                feature: name.clone(),
            })?;
        for row in &table.rows {
            let value = row.get(f).map(String::as_str).unwrap_or("");
            if !value.is_empty() && !map.contains_key(value) {
                return Err(SyntheticError::MissingTemplate {
                    feature: name.clone(),
                    value: value.to_string(),
                });
            }
        }
    }
    Ok(Columns {
        cdr,
        intervention,
        age: table.column(COL_AGE),
        sex: table.column(COL_SEX),
        features,
    })
}

fn cell(row: &[String], i: usize) -> &str {
    row.get(i).map(String::as_str).unwrap_or("")
}

fn intervention(row: &[String], cols: &Columns, index: usize) -> Result<bool, SyntheticError> {
    match cell(row, cols.intervention) {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(SyntheticError::BadCell {
            row: index + 1,
            column: COL_INTERVENTION.into(),
            message: format!("expected 0 or 1, got {other:?}"),
        }),
    }
}

fn demographics(row: &[String], cols: &Columns, index: usize) -> Result<NoteMeta, SyntheticError> {
    let bad = |column: &str, message: String| SyntheticError::BadCell {
        row: index + 1,
        column: column.into(),
        message,
    };
    let age = match cols.age.map(|i| cell(row, i)).filter(|s| !s.is_empty()) {
        None => None,
        Some(s) => match s.parse::<f64>() {
            Ok(a) if a.is_finite() && a >= 0.0 => Some(a),
            _ => return Err(bad(COL_AGE, format!("not a non-negative number: {s:?}"))),
        },
    };
    let sex = match cols.sex.map(|i| cell(row, i)).filter(|s| !s.is_empty()) {
        None => None,
        Some(s) => {
            let s = s.to_ascii_lowercase();
            if !SEX_VALUES.contains(&s.as_str()) {
                return Err(bad(COL_SEX, format!("expected one of {}", SEX_VALUES.join(", "))));
            }
            Some(s)
        }
    };
    Ok(NoteMeta {
        patient_age_years: age,
        patient_sex: sex,
    })
}

/// Opening sentence, e.g. "A 7-year-old male patient presents to the
/// emergency department."
pub fn preamble(meta: &NoteMeta) -> String {
    let who = match meta.patient_sex.as_deref() {
        Some("female") => "female patient",
        Some("male") => "male patient",
        _ => "patient",
    };
    match meta.patient_age_years {
        Some(age) => format!("A {age}-year-old {who} presents to the emergency department."),
        None => format!("A {who} presents to the emergency department."),
    }
}

/// The note for one row: the preamble followed by one sentence per
/// non-empty feature, in column order.
pub fn render_row(
    table: &FeatureTable,
    templates: &Templates,
    index: usize,
) -> Result<(String, NoteMeta), SyntheticError> {
    let cols = columns(table, templates)?;
    render(table, templates, &cols, index)
}

fn render(
    table: &FeatureTable,
    templates: &Templates,
    cols: &Columns,
    index: usize,
) -> Result<(String, NoteMeta), SyntheticError> {
    let row = &table.rows[index];
    let meta = demographics(row, cols, index)?;
    let mut sentences = vec![preamble(&meta)];
    for &f in &cols.features {
        let value = cell(row, f);
        if !value.is_empty() {
            sentences.push(templates[&table.headers[f]][value].trim().to_string());
        }
    }
    Ok((sentences.join(" "), meta))
}

/// Sample `n` rows, `round(n * positive_fraction)` of them with
/// intervention, without replacement, and render them as labelled notes
/// with ids `syn-0001`, `syn-0002`, ...
pub fn gen_synthetic(
    table: &FeatureTable,
    templates: &Templates,
    n: usize,
    positive_fraction: f64,
    seed: u64,
) -> Result<Vec<LabeledNote>, SyntheticError> {
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(SyntheticError::BadFraction(positive_fraction));
    }
    if table.rows.is_empty() {
        return Err(SyntheticError::EmptyTable);
    }
    let cols = columns(table, templates)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, row) in table.rows.iter().enumerate() {
        if cell(row, cols.cdr).is_empty() {
            return Err(SyntheticError::BadCell {
                row: i + 1,
                column: COL_CDR.into(),
                message: "empty".into(),
            });
        }
        if intervention(row, &cols, i)? {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    let n_pos = (n as f64 * positive_fraction).round() as usize;
    let n_neg = n - n_pos;
    for (class, needed, available) in [("positive", n_pos, pos.len()), ("negative", n_neg, neg.len())] {
        if needed > available {
            return Err(SyntheticError::InsufficientRows {
                class,
                needed,
                available,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut chosen: Vec<usize> = pos[..n_pos].iter().chain(&neg[..n_neg]).copied().collect();
    chosen.shuffle(&mut rng);

    chosen
        .into_iter()
        .enumerate()
        .map(|(k, i)| {
            let (note, note_meta) = render(table, templates, &cols, i)?;
            let row = &table.rows[i];
            let cdr = cell(row, cols.cdr).to_string();
            let label = if intervention(row, &cols, i)? {
                OutcomeLabel::Positive
            } else {
                OutcomeLabel::Negative
            };
            Ok(LabeledNote {
                note_id: format!("syn-{:04}", k + 1),
                note,
                note_meta,
                label_sets: vec![BTreeSet::from([cdr.clone()])],
                outcome_labels: BTreeMap::from([(cdr, label)]),
            })
        })
        .collect()
}

const PARAPHRASE_SYSTEM: &str =
    "You rewrite emergency department notes. Keep every clinical fact; add none.";

/// Optional rewrite of each note into freer clinical prose by the model.
/// Labels are kept as they are.
pub async fn paraphrase(
    notes: &mut [LabeledNote],
    llm: &dyn LlmProvider,
) -> Result<(), ProviderError> {
    for n in notes.iter_mut() {
        let request = CompletionRequest::new(
            PARAPHRASE_SYSTEM,
            format!(
                "Rewrite the following note as a clinician would write it. Output only the note.\n\n{}",
                n.note
            ),
        );
        let text = llm.complete(&request).await?;
        if !text.trim().is_empty() {
            n.note = text.trim().to_string();
        }
    }
    Ok(())
}
