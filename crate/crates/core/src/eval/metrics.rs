//! Selection and outcome metrics over labelled notes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{LabeledNote, OutcomeLabel};

/// Candidate asserted when a set of rules is empty.
pub const NO_CDR: &str = "NO_CDR";

/// What a run produced for one note.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NotePrediction {
    pub note_id: String,
    pub selected: BTreeSet<String>,
    /// Selected rules whose executed outcome is a positive outcome.
    pub positive: BTreeSet<String>,
    /// The run failed; the note counts as a miss.
    #[serde(default)]
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("{predictions} predictions for {labels} labelled notes")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("note {index}: prediction is for `{predicted}` but label is for `{labeled}`")]
    IdMismatch {
        index: usize,
        predicted: String,
        labeled: String,
    },
    #[error("no notes to score")]
    Empty,
    #[error("note `{note_id}`: `{cdr_id}` is not a candidate rule")]
    UnknownCdr { note_id: String, cdr_id: String },
}

fn aligned<'a>(
    preds: &'a [NotePrediction],
    labels: &'a [LabeledNote],
) -> Result<impl Iterator<Item = (&'a NotePrediction, &'a LabeledNote)>, MetricError> {
    if preds.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            predictions: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    for (index, (p, l)) in preds.iter().zip(labels).enumerate() {
        if p.note_id != l.note_id {
            return Err(MetricError::IdMismatch {
                index,
                predicted: p.note_id.clone(),
                labeled: l.note_id.clone(),
            });
        }
    }
    Ok(preds.iter().zip(labels))
}

/// Index of the first annotator set equal to the prediction.
pub fn exact_match(pred: &NotePrediction, label: &LabeledNote) -> Option<usize> {
    if pred.failed {
        return None;
    }
    label.label_sets.iter().position(|s| *s == pred.selected)
}

/// Fraction of notes whose predicted set equals at least one annotator's set.
pub fn ea_accuracy(preds: &[NotePrediction], labels: &[LabeledNote]) -> Result<f64, MetricError> {
    let pairs = aligned(preds, labels)?;
    let correct = pairs.filter(|(p, l)| exact_match(p, l).is_some()).count();
    Ok(correct as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    /// `2TP / (2TP + FP + FN)`, zero when there is nothing to score.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn with_no_cdr(set: &BTreeSet<String>) -> BTreeSet<&str> {
    if set.is_empty() {
        BTreeSet::from([NO_CDR])
    } else {
        set.iter().map(String::as_str).collect()
    }
}

/// Decision counts for one note against each annotator set, and the index
/// of the best annotator (highest per-note F1, first on ties).
pub fn note_counts(pred: &NotePrediction, label: &LabeledNote) -> (usize, Counts) {
    let predicted: BTreeSet<&str> = if pred.failed {
        BTreeSet::new()
    } else {
        with_no_cdr(&pred.selected)
    };
    let mut best = (0, Counts::default(), f64::NEG_INFINITY);
    for (i, set) in label.label_sets.iter().enumerate() {
        let truth = with_no_cdr(set);
        let tp = predicted.intersection(&truth).count();
        let c = Counts {
            tp,
            fp: predicted.len() - tp,
            fn_: truth.len() - tp,
        };
        let f1 = c.f1();
        if f1 > best.2 {
            best = (i, c, f1);
        }
    }
    (best.0, best.1)
}

/// Micro-summed decision counts over all notes. Every predicted or
/// labelled id must be in `candidates`.
pub fn f1_counts<'a>(
    preds: &[NotePrediction],
    labels: &[LabeledNote],
    candidates: impl IntoIterator<Item = &'a str>,
) -> Result<Counts, MetricError> {
    let candidates: BTreeSet<&str> = candidates.into_iter().collect();
    let mut total = Counts::default();
    for (p, l) in aligned(preds, labels)? {
        let ids = p.selected.iter().chain(l.label_sets.iter().flatten());
        if let Some(bad) = ids.into_iter().find(|id| !candidates.contains(id.as_str())) {
            return Err(MetricError::UnknownCdr {
                note_id: p.note_id.clone(),
                cdr_id: bad.clone(),
            });
        }
        total.add(note_counts(p, l).1);
    }
    Ok(total)
}

/// Micro-averaged F1 over (note, candidate) decisions, where the candidate
/// space is the registry plus [`NO_CDR`].
pub fn f1_score<'a>(
    preds: &[NotePrediction],
    labels: &[LabeledNote],
    candidates: impl IntoIterator<Item = &'a str>,
) -> Result<f64, MetricError> {
    Ok(f1_counts(preds, labels, candidates)?.f1())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeConfusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SensSpec {
    /// Absent when there is no labelled-positive pair.
    pub sensitivity: Option<f64>,
    /// Absent when there is no labelled-negative pair.
    pub specificity: Option<f64>,
    pub confusion: OutcomeConfusion,
}

/// Outcome sensitivity and specificity over correctly selected rules: the
/// (note, rule) pairs where the rule was predicted, appears in at least one
/// annotator set, and has an outcome label.
pub fn sensitivity_specificity(
    preds: &[NotePrediction],
    labels: &[LabeledNote],
) -> Result<SensSpec, MetricError> {
    let mut c = OutcomeConfusion::default();
    for (p, l) in aligned(preds, labels)? {
        if p.failed {
            continue;
        }
        for id in &p.selected {
            if !l.label_sets.iter().any(|s| s.contains(id)) {
                continue;
            }
            let Some(truth) = l.outcome_labels.get(id) else {
                continue;
            };
            let predicted = p.positive.contains(id);
            match (truth, predicted) {
                (OutcomeLabel::Positive, true) => c.tp += 1,
                (OutcomeLabel::Positive, false) => c.fn_ += 1,
                (OutcomeLabel::Negative, true) => c.fp += 1,
                (OutcomeLabel::Negative, false) => c.tn += 1,
            }
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(SensSpec {
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        confusion: c,
    })
}
