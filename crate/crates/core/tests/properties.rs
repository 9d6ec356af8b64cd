mod common;

use std::collections::{BTreeMap, BTreeSet};

use async_trait::async_trait;
use cdr_agent::eval::baseline::parse_baseline_answer;
use cdr_agent::eval::metrics::{ea_accuracy, f1_score, NotePrediction, NO_CDR};
use cdr_agent::eval::LabeledNote;
use cdr_agent::extraction::{impute_negative, parse_extraction};
use cdr_agent::registry::{bundled, parse_definition, CmpOp, Operand, Predicate, RuleNode};
use cdr_agent::selection::{cosine_similarity, select_cdrs, SimilarityProfile};
use cdr_agent::{
    EmbeddingCache, EmbeddingProvider, EmbeddingVector, MockEmbedder, Provenance, ProviderError,
    SelectionConfig, Value,
};
use proptest::prelude::*;

fn value() -> impl Strategy<Value = Value> {
    prop_oneof![
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(Value::Int),
        (-1e6f64..1e6).prop_map(Value::Float),
        "[a-z_]{1,8}".prop_map(Value::Str),
    ]
}

fn predicate() -> impl Strategy<Value = Predicate> {
    let op = prop_oneof![
        Just(CmpOp::Eq),
        Just(CmpOp::Ne),
        Just(CmpOp::Lt),
        Just(CmpOp::Le),
        Just(CmpOp::Gt),
        Just(CmpOp::Ge),
    ];
    let leaf = prop_oneof![
        ("[a-z][a-z_]{0,6}", op, value()).prop_map(|(var, op, v)| Predicate::Cmp {
            var,
            op,
            value: Operand::One(v),
        }),
        ("[a-z][a-z_]{0,6}", prop::collection::vec(value(), 1..4)).prop_map(|(var, vs)| {
            Predicate::Cmp {
                var,
                op: CmpOp::In,
                value: Operand::Many(vs),
            }
        }),
    ];
    leaf.prop_recursive(4, 24, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 1..4).prop_map(Predicate::All),
            prop::collection::vec(inner.clone(), 1..4).prop_map(Predicate::Any),
            inner.prop_map(|p| Predicate::Not(Box::new(p))),
        ]
    })
}

fn rule_tree() -> impl Strategy<Value = RuleNode> {
    "[a-z ]{1,12}".prop_map(RuleNode::Leaf).prop_recursive(4, 16, 2, |inner| {
        (predicate(), inner.clone(), inner).prop_map(|(cond, then, otherwise)| RuleNode::Branch {
            cond,
            then: Box::new(then),
            otherwise: Box::new(otherwise),
        })
    })
}

proptest! {
    #[test]
    fn rule_trees_round_trip_through_json(tree in rule_tree()) {
        let json = tree.to_json();
        let back = RuleNode::from_json(&json, "rule").unwrap();
        prop_assert_eq!(back, tree);
    }

    #[test]
    fn extraction_parser_is_total(raw in ".{0,400}", lines in prop::collection::vec(("[a-z_]{1,30}", ".{0,20}"), 0..8)) {
        let mut text = raw;
        for (k, v) in lines {
            text.push_str(&format!("\n{k}: {v}"));
        }
        for def in bundled::all() {
            let ev = parse_extraction(&text, &def);
            for spec in &def.variables {
                let has = ev.values.contains_key(&spec.name);
                let missing = ev.missing.contains(&spec.name);
                prop_assert!(has != missing, "{} both or neither", spec.name);
                if let Some(v) = ev.values.get(&spec.name) {
                    prop_assert!(spec.vtype.admits(&v.value));
                    prop_assert_eq!(v.provenance, Provenance::Extracted);
                }
            }
            prop_assert_eq!(ev.values.len() + ev.missing.len(), def.variables.len());
        }
    }

    #[test]
    fn imputation_is_idempotent_and_keeps_extracted_values(
        answers in prop::collection::vec(prop::sample::select(vec!["yes", "no", "unknown", "12", "under_2", "15"]), 11)
    ) {
        for def in bundled::all() {
            let raw: String = def
                .variables
                .iter()
                .zip(&answers)
                .map(|(v, a)| format!("{}: {a}\n", v.name))
                .collect();
            let ev = parse_extraction(&raw, &def);
            let once = impute_negative(&ev, &def);
            prop_assert!(once.missing.is_empty());
            prop_assert_eq!(&impute_negative(&once, &def), &once);
            for (name, v) in &ev.values {
                prop_assert_eq!(&once.values[name], v);
            }
        }
    }

    #[test]
    fn cosine_is_scale_invariant(
        xs in prop::collection::vec(-10.0f64..10.0, 2..32),
        scale in 1e-3f64..1e3,
    ) {
        prop_assume!(xs.iter().any(|x| x.abs() > 1e-3));
        let ys: Vec<f64> = xs.iter().rev().map(|x| x + 0.5).collect();
        let a = EmbeddingVector::new(xs.clone()).unwrap();
        let b = EmbeddingVector::new(ys).unwrap();
        prop_assume!(b.norm() > 1e-3);
        let base = cosine_similarity(&a, &b).unwrap();
        let scaled = cosine_similarity(&a.scaled(scale), &b).unwrap();
        prop_assert!((base - scaled).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
    }

    #[test]
    fn selection_is_ordered_and_matches_the_test(
        scores in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 1..4), 2..40),
        alpha in 0.001f64..0.5,
    ) {
        let input: Vec<(String, Vec<f64>)> = scores
            .into_iter()
            .enumerate()
            .map(|(i, s)| (format!("r{i:02}"), s))
            .collect();
        let p = SimilarityProfile::from_scores(input, alpha, 1e-9).unwrap();
        let flagged: BTreeSet<&String> = p.per_cdr.iter().filter(|(_, c)| c.p_value < alpha).map(|(id, _)| id).collect();
        prop_assert_eq!(flagged, p.selected.iter().collect::<BTreeSet<_>>());
        for w in p.selected.windows(2) {
            let (a, b) = (&p.per_cdr[&w[0]], &p.per_cdr[&w[1]]);
            prop_assert!(a.statistic > b.statistic || (a.statistic == b.statistic && w[0] < w[1]));
        }
        for c in p.per_cdr.values() {
            prop_assert!(c.zscore.is_finite());
            prop_assert!((0.0..=1.0).contains(&c.p_value));
        }
    }

    #[test]
    fn baseline_parser_is_total(raw in ".{0,300}", ids in prop::collection::vec("[a-z_]{1,16}", 0..5)) {
        let registry = bundled::registry();
        let text = format!("{raw}\nselected: {}\noutcome {}: x", ids.join(", "), ids.first().map_or("", |s| s));
        let answer = parse_baseline_answer(&text, &registry);
        for id in &answer.selected {
            prop_assert!(registry.get(id).is_some());
        }
        for (id, label) in &answer.outcomes {
            prop_assert!(registry.get(id).unwrap().outcomes.contains(label));
        }
    }

    #[test]
    fn perfect_exact_agreement_means_perfect_f1(
        sets in prop::collection::vec(prop::collection::btree_set(0usize..6, 0..4), 1..30),
        flips in prop::collection::vec(any::<bool>(), 30),
    ) {
        let ids: Vec<String> = (0..6).map(|i| format!("c{i}")).collect();
        let to_ids = |s: &BTreeSet<usize>| s.iter().map(|&i| ids[i].clone()).collect::<BTreeSet<_>>();
        let labels: Vec<LabeledNote> = sets
            .iter()
            .enumerate()
            .map(|(k, s)| LabeledNote {
                note_id: format!("n{k}"),
                note: "x".into(),
                note_meta: Default::default(),
                label_sets: vec![to_ids(s)],
                outcome_labels: BTreeMap::new(),
            })
            .collect();
        let preds: Vec<NotePrediction> = sets
            .iter()
            .zip(&flips)
            .enumerate()
            .map(|(k, (s, &flip))| {
                let mut selected = to_ids(s);
                if flip {
                    selected.insert(ids[5].clone());
                }
                NotePrediction { note_id: format!("n{k}"), selected, ..Default::default() }
            })
            .collect();
        let candidates = || ids.iter().map(String::as_str).chain([NO_CDR]);
        let ea = ea_accuracy(&preds, &labels).unwrap();
        let f1 = f1_score(&preds, &labels, candidates()).unwrap();
        prop_assert!((0.0..=1.0).contains(&ea) && (0.0..=1.0).contains(&f1));
        if ea == 1.0 {
            prop_assert_eq!(f1, 1.0);
        }
    }
}

/// The mock embedder with every vector multiplied by a constant.
struct Scaled(MockEmbedder, f64, String);

#[async_trait]
impl EmbeddingProvider for Scaled {
    fn id(&self) -> &str {
        &self.2
    }

    async fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        let base = self.0.embed_batch(texts).await?;
        Ok(base.iter().map(|v| v.scaled(self.1)).collect())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn selection_ignores_embedding_scale(scale in 1e-3f64..1e3, seed in any::<u64>(), pick in 0usize..20) {
        let rt = tokio::runtime::Builder::new_current_thread().build().unwrap();
        let registry = common::registry15();
        let note = common::mini_dataset()[pick].note.clone();
        let config = SelectionConfig { rng_seed: seed, ..SelectionConfig::default() };
        let (plain, scaled) = rt.block_on(async {
            let plain = select_cdrs(&note, &registry, &config, &MockEmbedder::default(), &EmbeddingCache::new()).await.unwrap();
            let provider = Scaled(MockEmbedder::default(), scale, format!("scaled-{scale}"));
            let scaled = select_cdrs(&note, &registry, &config, &provider, &EmbeddingCache::new()).await.unwrap();
            (plain, scaled)
        });
        prop_assert_eq!(&plain.selected, &scaled.selected);
        for (id, c) in &plain.per_cdr {
            prop_assert!((c.statistic - scaled.per_cdr[id].statistic).abs() < 1e-12);
        }
    }
}

#[test]
fn definitions_round_trip_through_serde() {
    for def in common::registry15().definitions() {
        let text = serde_json::to_string_pretty(def).unwrap();
        let back = parse_definition(&text, "roundtrip.json".as_ref()).unwrap();
        assert_eq!(&back, def);
    }
}
