//! Interpreter for rule trees.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::extraction::{ExclusionVerdict, ExtractedVariables};
use crate::registry::{check_comparison, CdrDefinition, CmpOp, Operand, Predicate, RuleNode};
use crate::value::{Value, VarType};

/// Complete variable assignment for one rule.
pub type Assignment = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub cdr_id: String,
    pub label: String,
    pub is_positive: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExecError {
    #[error("variable `{variable}` has no value")]
    MissingVariable { variable: String },
    #[error("variable `{variable}` expects {expected}, got {found}")]
    BadValue {
        variable: String,
        expected: String,
        found: String,
    },
    #[error("at {path}: {message}")]
    TypeMismatch { path: String, message: String },
    #[error("at {path}: unknown variable `{variable}`")]
    UnknownVariable { path: String, variable: String },
}

impl ExecError {
    pub fn node_path(&self) -> Option<&str> {
        match self {
            ExecError::TypeMismatch { path, .. } | ExecError::UnknownVariable { path, .. } => {
                Some(path)
            }
            _ => None,
        }
    }
}

/// Walk the rule tree of `def` under `values` and return the leaf reached.
pub fn execute_rule(def: &CdrDefinition, values: &Assignment) -> Result<Outcome, ExecError> {
    for spec in &def.variables {
        match values.get(&spec.name) {
            None => {
                return Err(ExecError::MissingVariable {
                    variable: spec.name.clone(),
                })
            }
            Some(v) if !spec.vtype.admits(v) => {
                return Err(ExecError::BadValue {
                    variable: spec.name.clone(),
                    expected: spec.vtype.to_string(),
                    found: format!("{} {v}", v.kind()),
                })
            }
            Some(_) => {}
        }
    }
    let mut node = &def.rule;
    let mut path = String::from("rule");
    loop {
        match node {
            RuleNode::Leaf(label) => {
                return Ok(Outcome {
                    cdr_id: def.id.clone(),
                    label: label.clone(),
                    is_positive: def.is_positive(label),
                })
            }
            RuleNode::Branch {
                cond,
                then,
                otherwise,
            } => {
                let taken = eval(
                    cond,
                    &format!("{path}.if"),
                    &|name| def.variable(name).map(|s| &s.vtype),
                    &|name| values.get(name),
                )?.ok_or_else(|| {
                    ExecError::TypeMismatch {
                        path: format!("{path}.if"),
                        message: "condition could not be decided".into(),
                    }
                })?;
                if taken {
                    node = then;
                    path.push_str(".then");
                } else {
                    node = otherwise;
                    path.push_str(".else");
                }
            }
        }
    }
}

/// Three-valued evaluation: `Ok(None)` when a referenced field is absent.
/// `All` and `Any` follow Kleene logic so that a known `false` (resp.
/// `true`) member decides the result regardless of unknown ones.
pub(crate) fn eval<'t, 'v>(
    pred: &Predicate,
    path: &str,
    types: &dyn Fn(&str) -> Option<&'t VarType>,
    env: &dyn Fn(&str) -> Option<&'v Value>,
) -> Result<Option<bool>, ExecError> {
    match pred {
        Predicate::Cmp { var, op, value } => {
            let vtype = types(var).ok_or_else(|| ExecError::UnknownVariable {
                path: path.to_string(),
                variable: var.clone(),
            })?;
            check_comparison(vtype, *op, value).map_err(|(_, message)| ExecError::TypeMismatch {
                path: path.to_string(),
                message,
            })?;
            match env(var) {
                None => Ok(None),
                Some(actual) => compare(actual, *op, value)
                    .map(Some)
                    .ok_or_else(|| ExecError::TypeMismatch {
                        path: path.to_string(),
                        message: format!("cannot compare {} value of `{var}`", actual.kind()),
                    }),
            }
        }
        Predicate::All(ps) => {
            let mut unknown = false;
            for (i, p) in ps.iter().enumerate() {
                match eval(p, &format!("{path}.all[{i}]"), types, env)? {
                    Some(false) => return Ok(Some(false)),
                    None => unknown = true,
                    Some(true) => {}
                }
            }
            Ok(if unknown { None } else { Some(true) })
        }
        Predicate::Any(ps) => {
            let mut unknown = false;
            for (i, p) in ps.iter().enumerate() {
                match eval(p, &format!("{path}.any[{i}]"), types, env)? {
                    Some(true) => return Ok(Some(true)),
                    None => unknown = true,
                    Some(false) => {}
                }
            }
            Ok(if unknown { None } else { Some(false) })
        }
        Predicate::Not(p) => Ok(eval(p, &format!("{path}.not"), types, env)?.map(|b| !b)),
    }
}

fn compare(actual: &Value, op: CmpOp, operand: &Operand) -> Option<bool> {
    match (op, operand) {
        (CmpOp::In, Operand::Many(items)) => {
            let mut any = false;
            for item in items {
                any |= equal(actual, item)?;
            }
            Some(any)
        }
        (CmpOp::Eq, Operand::One(lit)) => equal(actual, lit),
        (CmpOp::Ne, Operand::One(lit)) => equal(actual, lit).map(|b| !b),
        (op, Operand::One(lit)) => {
            let ord = match (actual, lit) {
                (Value::Int(a), Value::Int(b)) => a.cmp(b),
                _ => actual.as_f64()?.partial_cmp(&lit.as_f64()?)?,
            };
            Some(match op {
                CmpOp::Lt => ord.is_lt(),
                CmpOp::Le => ord.is_le(),
                CmpOp::Gt => ord.is_gt(),
                CmpOp::Ge => ord.is_ge(),
                _ => return None,
            })
        }
        _ => None,
    }
}

fn equal(a: &Value, b: &Value) -> Option<bool> {
    match (a, b) {
        (Value::Bool(x), Value::Bool(y)) => Some(x == y),
        (Value::Str(x), Value::Str(y)) => Some(x == y),
        (Value::Int(x), Value::Int(y)) => Some(x == y),
        _ => Some(a.as_f64()? == b.as_f64()?),
    }
}

/// Wall-clock span of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpan {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CdrStatus {
    Outcome {
        label: String,
        is_positive: bool,
    },
    Excluded {
        reasons: Vec<String>,
    },
    /// Needs manual review; no outcome is produced.
    Error {
        stage: String,
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        node_path: Option<String>,
    },
    /// Interactive sessions only: waiting for clinician-supplied values.
    AwaitingInput {
        variables: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdrResult {
    pub cdr_id: String,
    #[serde(flatten)]
    pub status: CdrStatus,
}

impl CdrResult {
    pub fn outcome(&self) -> Option<Outcome> {
        match &self.status {
            CdrStatus::Outcome { label, is_positive } => Some(Outcome {
                cdr_id: self.cdr_id.clone(),
                label: label.clone(),
                is_positive: *is_positive,
            }),
            _ => None,
        }
    }
}

/// Per-rule results in selection order. Empty means no applicable rule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub per_cdr: Vec<CdrResult>,
    pub durations: Vec<StageSpan>,
}

impl ExecutionReport {
    pub fn get(&self, cdr_id: &str) -> Option<&CdrResult> {
        self.per_cdr.iter().find(|r| r.cdr_id == cdr_id)
    }

    pub fn outcomes(&self) -> impl Iterator<Item = Outcome> + '_ {
        self.per_cdr.iter().filter_map(CdrResult::outcome)
    }

    pub fn is_no_applicable_cdr(&self) -> bool {
        self.per_cdr.is_empty()
    }
}

/// Run one selected rule given its (imputed) extraction and exclusion
/// verdict.
pub fn execute_one(
    def: &CdrDefinition,
    extracted: &ExtractedVariables,
    verdict: &ExclusionVerdict,
) -> CdrResult {
    let status = if verdict.excluded {
        CdrStatus::Excluded {
            reasons: verdict.reasons.clone(),
        }
    } else {
        match execute_rule(def, &extracted.assignment()) {
            Ok(o) => CdrStatus::Outcome {
                label: o.label,
                is_positive: o.is_positive,
            },
            Err(e) => CdrStatus::Error {
                stage: "execution".into(),
                node_path: e.node_path().map(str::to_string),
                message: e.to_string(),
            },
        }
    };
    CdrResult {
        cdr_id: def.id.clone(),
        status,
    }
}

/// Execute every selected rule, isolating failures per rule.
pub fn execute_all(
    selected: &[(&CdrDefinition, &ExtractedVariables, &ExclusionVerdict)],
) -> ExecutionReport {
    let start = Instant::now();
    let per_cdr = selected
        .iter()
        .map(|(def, ev, verdict)| execute_one(def, ev, verdict))
        .collect();
    ExecutionReport {
        per_cdr,
        durations: vec![StageSpan {
            stage: "execution".into(),
            seconds: start.elapsed().as_secs_f64(),
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::bundled;

    const NEXUS_VARS: [&str; 5] = [
        "focal_neurologic_deficit",
        "midline_tenderness",
        "altered_consciousness",
        "intoxication",
        "distracting_injury",
    ];

    fn nexus_assignment(bits: u32) -> Assignment {
        NEXUS_VARS
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_string(), Value::Bool(bits >> i & 1 == 1)))
            .collect()
    }

    #[test]
    fn nexus_all_negative() {
        let out = execute_rule(&bundled::nexus_cspine(), &nexus_assignment(0)).unwrap();
        assert_eq!(out.label, "imaging not necessary");
        assert!(!out.is_positive);
    }

    #[test]
    fn nexus_intoxication_only() {
        let mut a = nexus_assignment(0);
        a.insert("intoxication".into(), Value::Bool(true));
        let out = execute_rule(&bundled::nexus_cspine(), &a).unwrap();
        assert_eq!(out.label, "imaging recommended");
        assert!(out.is_positive);
    }

    #[test]
    fn nexus_truth_table_matches_or() {
        let def = bundled::nexus_cspine();
        for bits in 0..32u32 {
            let out = execute_rule(&def, &nexus_assignment(bits)).unwrap();
            let any = NEXUS_VARS.iter().enumerate().any(|(i, _)| bits >> i & 1 == 1);
            assert_eq!(out.is_positive, any, "bits {bits:05b}");
        }
    }

    #[test]
    fn incomplete_and_mistyped_assignments() {
        let def = bundled::nexus_cspine();
        let mut a = nexus_assignment(0);
        a.remove("intoxication");
        assert_eq!(
            execute_rule(&def, &a),
            Err(ExecError::MissingVariable {
                variable: "intoxication".into()
            })
        );
        let mut a = nexus_assignment(0);
        a.insert("intoxication".into(), Value::Int(1));
        assert!(matches!(execute_rule(&def, &a), Err(ExecError::BadValue { .. })));
    }

    #[test]
    fn mistyped_tree_reports_node_path() {
        // bypasses registry validation on purpose
        let mut def = bundled::nexus_cspine();
        if let RuleNode::Branch { cond, .. } = &mut def.rule {
            if let Predicate::Any(ps) = cond {
                ps[3] = Predicate::Cmp {
                    var: "intoxication".into(),
                    op: CmpOp::Gt,
                    value: Operand::One(Value::Int(1)),
                };
            }
        }
        let err = execute_rule(&def, &nexus_assignment(0)).unwrap_err();
        assert_eq!(err.node_path(), Some("rule.if.any[3]"));
    }

    #[test]
    fn numeric_comparisons_are_exact() {
        let types = |_: &str| Some(&VarType::Float);
        let lt2: Predicate = serde_json::from_str(r#"{"var": "age", "op": "lt", "value": 2}"#).unwrap();
        for (age, want) in [(1.999_999_999, true), (2.0, false), (2.000_000_001, false)] {
            let v = Value::Float(age);
            let env = |_: &str| Some(&v);
            assert_eq!(eval(&lt2, "p", &types, &env).unwrap(), Some(want), "{age}");
        }
    }

    #[test]
    fn kleene_logic_with_unknowns() {
        let types = |_: &str| Some(&VarType::Boolean);
        let t = Value::Bool(true);
        let f = Value::Bool(false);
        let env = |n: &str| match n {
            "t" => Some(&t),
            "f" => Some(&f),
            _ => None,
        };
        let p = |s: &str| -> Predicate { serde_json::from_str(s).unwrap() };
        let any = p(r#"{"any": [{"var": "u", "op": "eq", "value": true}, {"var": "t", "op": "eq", "value": true}]}"#);
        assert_eq!(eval(&any, "p", &types, &env).unwrap(), Some(true));
        let all = p(r#"{"all": [{"var": "u", "op": "eq", "value": true}, {"var": "t", "op": "eq", "value": true}]}"#);
        assert_eq!(eval(&all, "p", &types, &env).unwrap(), None);
        let all_f = p(r#"{"all": [{"var": "u", "op": "eq", "value": true}, {"var": "f", "op": "eq", "value": true}]}"#);
        assert_eq!(eval(&all_f, "p", &types, &env).unwrap(), Some(false));
        let not_u = p(r#"{"not": {"var": "u", "op": "eq", "value": true}}"#);
        assert_eq!(eval(&not_u, "p", &types, &env).unwrap(), None);
    }

    #[test]
    fn in_operator() {
        let vt = VarType::Integer;
        let types = |_: &str| Some(&vt);
        let p: Predicate = serde_json::from_str(r#"{"var": "n", "op": "in", "value": [3, 5]}"#).unwrap();
        for (n, want) in [(3, true), (4, false), (5, true)] {
            let v = Value::Int(n);
            let env = |_: &str| Some(&v);
            assert_eq!(eval(&p, "p", &types, &env).unwrap(), Some(want));
        }
    }
}
