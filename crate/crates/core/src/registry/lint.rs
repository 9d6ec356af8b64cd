//! Checks beyond validity: dead variables and monotonicity of a rule in its
//! boolean indicators.

use std::collections::BTreeSet;

use serde::Serialize;

use super::definition::{for_each_cmp, for_each_condition, CdrDefinition, Operand};
use crate::rules::{execute_rule, Assignment};
use crate::value::{Value, VarType};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LintWarning {
    pub code: &'static str,
    pub variable: String,
    pub message: String,
}

/// Variables that neither the rule nor any exclusion references.
pub fn dead_variables(def: &CdrDefinition) -> Vec<String> {
    let used = referenced_variables(def);
    def.variables
        .iter()
        .filter(|v| !used.contains(v.name.as_str()))
        .map(|v| v.name.clone())
        .collect()
}

fn referenced_variables(def: &CdrDefinition) -> BTreeSet<&str> {
    let mut used = BTreeSet::new();
    for_each_condition(&def.rule, &mut |p| {
        for_each_cmp(p, &mut |var, _, _| {
            used.insert(var);
        })
    });
    for ex in &def.exclusions {
        for_each_cmp(&ex.predicate, &mut |var, _, _| {
            used.insert(var);
        });
    }
    used
}

pub fn lint_definition(def: &CdrDefinition) -> Vec<LintWarning> {
    dead_variables(def)
        .into_iter()
        .map(|name| LintWarning {
            code: "DEAD_VARIABLE",
            message: format!("`{name}` is never referenced by the rule or its exclusions"),
            variable: name,
        })
        .collect()
}

/// Representative values for a non-boolean variable: every literal the rule
/// compares it against, its neighbours, and the negative default.
pub fn probe_values(def: &CdrDefinition, name: &str) -> Vec<Value> {
    let Some(spec) = def.variable(name) else {
        return Vec::new();
    };
    let mut literals = Vec::new();
    for_each_condition(&def.rule, &mut |p| {
        for_each_cmp(p, &mut |var, _, operand| {
            if var == name {
                match operand {
                    Operand::One(v) => literals.push(v.clone()),
                    Operand::Many(vs) => literals.extend(vs.iter().cloned()),
                }
            }
        })
    });
    let mut out: Vec<Value> = Vec::new();
    let mut push = |v: Value| {
        if !out.contains(&v) {
            out.push(v);
        }
    };
    push(spec.negative_default.clone());
    match &spec.vtype {
        VarType::Boolean => {
            push(Value::Bool(false));
            push(Value::Bool(true));
        }
        VarType::Enum(values) => values.iter().for_each(|v| push(Value::Str(v.clone()))),
        VarType::Integer => {
            for lit in literals {
                if let Value::Int(i) = lit {
                    push(Value::Int(i - 1));
                    push(Value::Int(i));
                    push(Value::Int(i + 1));
                }
            }
        }
        VarType::Float => {
            for lit in literals {
                if let Some(x) = lit.as_f64() {
                    push(Value::Float(x - 0.5));
                    push(Value::Float(x));
                    push(Value::Float(x + 0.5));
                }
            }
        }
        VarType::String => {
            literals.into_iter().for_each(&mut push);
            push(Value::Str("unspecified".into()));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub monotone: bool,
    pub states_checked: usize,
    /// Assignment where setting `flipped` to true turns a positive outcome
    /// into a non-positive one.
    pub counterexample: Option<(Assignment, String)>,
}

#[derive(Debug, thiserror::Error)]
pub enum LintError {
    #[error("state space of {0} assignments is too large to enumerate")]
    TooLarge(u128),
    #[error(transparent)]
    Exec(#[from] crate::rules::ExecError),
}

pub const MAX_MONOTONICITY_STATES: u128 = 1 << 24;

/// Check that the rule's positivity never decreases when a boolean
/// indicator goes from false to true, for every combination of probe values
/// of the non-boolean variables.
pub fn check_monotone(def: &CdrDefinition) -> Result<MonotonicityReport, LintError> {
    let bools: Vec<&str> = def
        .variables
        .iter()
        .filter(|v| v.vtype == VarType::Boolean)
        .map(|v| v.name.as_str())
        .collect();
    let others: Vec<(&str, Vec<Value>)> = def
        .variables
        .iter()
        .filter(|v| v.vtype != VarType::Boolean)
        .map(|v| (v.name.as_str(), probe_values(def, &v.name)))
        .collect();
    let combos: u128 = others.iter().map(|(_, d)| d.len() as u128).product();
    let total = combos << bools.len();
    if bools.len() > 24 || total > MAX_MONOTONICITY_STATES {
        return Err(LintError::TooLarge(total));
    }

    let masks = 1usize << bools.len();
    let mut states = 0;
    let mut index = vec![0usize; others.len()];
    loop {
        let mut base = Assignment::new();
        for ((name, domain), &i) in others.iter().zip(&index) {
            base.insert(name.to_string(), domain[i].clone());
        }
        let mut positive = Vec::with_capacity(masks);
        for mask in 0..masks {
            let mut a = base.clone();
            for (bit, name) in bools.iter().enumerate() {
                a.insert(name.to_string(), Value::Bool(mask >> bit & 1 == 1));
            }
            positive.push(execute_rule(def, &a)?.is_positive);
            states += 1;
        }
        for mask in 0..masks {
            for (bit, name) in bools.iter().enumerate() {
                if mask >> bit & 1 == 0 && positive[mask] && !positive[mask | 1 << bit] {
                    let mut a = base.clone();
                    for (b, n) in bools.iter().enumerate() {
                        a.insert(n.to_string(), Value::Bool(mask >> b & 1 == 1));
                    }
                    return Ok(MonotonicityReport {
                        monotone: false,
                        states_checked: states,
                        counterexample: Some((a, name.to_string())),
                    });
                }
            }
        }
        // odometer over the non-boolean probe domains
        let mut k = 0;
        loop {
            if k == others.len() {
                return Ok(MonotonicityReport {
                    monotone: true,
                    states_checked: states,
                    counterexample: None,
                });
            }
            index[k] += 1;
            if index[k] < others[k].1.len() {
                break;
            }
            index[k] = 0;
            k += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{bundled, RuleNode};

    #[test]
    fn bundled_have_no_dead_variables() {
        for def in bundled::all() {
            assert_eq!(lint_definition(&def), vec![], "{}", def.id);
        }
    }

    #[test]
    fn detects_dead_variable() {
        let mut def = bundled::nexus_cspine();
        let mut extra = def.variables[0].clone();
        extra.name = "unused_flag".into();
        def.variables.push(extra);
        assert_eq!(dead_variables(&def), vec!["unused_flag".to_string()]);
    }

    #[test]
    fn bundled_are_monotone() {
        for def in bundled::all() {
            let report = check_monotone(&def).unwrap();
            assert!(report.monotone, "{}: {:?}", def.id, report.counterexample);
        }
    }

    #[test]
    fn detects_non_monotone_rule() {
        let mut def = bundled::nexus_cspine();
        def.rule = serde_json::from_str(
            r#"{"if": {"var": "intoxication", "op": "eq", "value": false},
                "then": "imaging recommended", "else": "imaging not necessary"}"#,
        )
        .unwrap();
        let report = check_monotone(&def).unwrap();
        assert!(!report.monotone);
        assert_eq!(report.counterexample.unwrap().1, "intoxication");
        assert!(matches!(def.rule, RuleNode::Branch { .. }));
    }

    #[test]
    fn probe_values_cover_thresholds() {
        let def = bundled::pecarn_tbi();
        let gcs = probe_values(&def, "gcs_score");
        for v in [14, 15, 16] {
            assert!(gcs.contains(&Value::Int(v)), "{v}");
        }
        assert_eq!(probe_values(&def, "age_group").len(), 2);
    }
}
