//! Static checks over a parsed definition.

use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::definition::{CdrDefinition, CmpOp, Operand, Predicate, RuleNode, SCHEMA_VERSION};
use crate::value::{Value, VarType};

pub const MAX_TREE_DEPTH: usize = 64;

/// Note metadata fields that exclusion predicates may reference.
pub const META_AGE: &str = "patient_age_years";
pub const META_SEX: &str = "patient_sex";
pub const SEX_VALUES: [&str; 4] = ["female", "male", "other", "unknown"];

pub fn meta_field_type(name: &str) -> Option<VarType> {
    match name {
        META_AGE => Some(VarType::Float),
        META_SEX => Some(VarType::Enum(
            SEX_VALUES.iter().map(|s| s.to_string()).collect(),
        )),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    UnsupportedSchemaVersion,
    InvalidIdentifier,
    EmptyDescription,
    NoVariables,
    DuplicateVariable,
    ReservedName,
    EnumTooFewValues,
    /// Input is lower-cased before matching, so such a value never matches.
    EnumValueNotLowercase,
    UnknownEnumValue,
    EmptyOutcomes,
    DuplicateOutcome,
    UnknownOutcome,
    UnknownVariable,
    TypeMismatch,
    DepthExceeded,
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}: {}", self.code, self.path, self.message)
    }
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some('a'..='z'))
        && chars.all(|c| matches!(c, 'a'..='z' | '0'..='9' | '_'))
}

/// All invariant violations of `def`; empty when the definition is valid.
pub fn validate_definition(def: &CdrDefinition) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |code, path: String, message: String| {
        out.push(Violation {
            code,
            path,
            message,
        })
    };

    if def.schema_version != SCHEMA_VERSION {
        push(
            ViolationCode::UnsupportedSchemaVersion,
            "schema_version".into(),
            format!("expected {SCHEMA_VERSION}, found {}", def.schema_version),
        );
    }
    if !is_identifier(&def.id) {
        push(
            ViolationCode::InvalidIdentifier,
            "id".into(),
            format!("`{}` does not match [a-z][a-z0-9_]*", def.id),
        );
    }
    if def.description.trim().is_empty() {
        push(
            ViolationCode::EmptyDescription,
            "description".into(),
            "description must be non-empty".into(),
        );
    }
    if def.variables.is_empty() {
        push(
            ViolationCode::NoVariables,
            "variables".into(),
            "a rule needs at least one variable".into(),
        );
    }

    let mut seen = HashSet::new();
    for (i, var) in def.variables.iter().enumerate() {
        let path = format!("variables[{i}]");
        if !is_identifier(&var.name) {
            push(
                ViolationCode::InvalidIdentifier,
                format!("{path}.name"),
                format!("`{}` does not match [a-z][a-z0-9_]*", var.name),
            );
        }
        if !seen.insert(var.name.as_str()) {
            push(
                ViolationCode::DuplicateVariable,
                format!("{path}.name"),
                format!("variable `{}` declared twice", var.name),
            );
        }
        if meta_field_type(&var.name).is_some() {
            push(
                ViolationCode::ReservedName,
                format!("{path}.name"),
                format!("`{}` is a note metadata field", var.name),
            );
        }
        match &var.vtype {
            VarType::Enum(values) => {
                let distinct: HashSet<_> = values.iter().collect();
                if distinct.len() < 2 || distinct.len() != values.len() {
                    push(
                        ViolationCode::EnumTooFewValues,
                        format!("{path}.values"),
                        "enum needs at least two distinct values".into(),
                    );
                }
                for v in values.iter().filter(|v| v.to_lowercase() != **v) {
                    push(
                        ViolationCode::EnumValueNotLowercase,
                        format!("{path}.values"),
                        format!("`{v}` must be lower case"),
                    );
                }
                match &var.negative_default {
                    Value::Str(s) if !values.contains(s) => push(
                        ViolationCode::UnknownEnumValue,
                        format!("{path}.negative_default"),
                        format!("`{s}` is not one of the enum values"),
                    ),
                    Value::Str(_) => {}
                    other => push(
                        ViolationCode::TypeMismatch,
                        format!("{path}.negative_default"),
                        format!("{} default for an enum variable", other.kind()),
                    ),
                }
            }
            vtype => {
                if !vtype.admits(&var.negative_default) {
                    push(
                        ViolationCode::TypeMismatch,
                        format!("{path}.negative_default"),
                        format!(
                            "{} default for a {} variable",
                            var.negative_default.kind(),
                            vtype.tag()
                        ),
                    );
                }
            }
        }
    }

    if def.outcomes.is_empty() {
        push(
            ViolationCode::EmptyOutcomes,
            "outcomes".into(),
            "at least one outcome is required".into(),
        );
    }
    let mut seen = HashSet::new();
    for (i, o) in def.outcomes.iter().enumerate() {
        if !seen.insert(o.as_str()) {
            push(
                ViolationCode::DuplicateOutcome,
                format!("outcomes[{i}]"),
                format!("outcome `{o}` listed twice"),
            );
        }
    }
    for (i, o) in def.positive_outcomes.iter().enumerate() {
        if !def.outcomes.contains(o) {
            push(
                ViolationCode::UnknownOutcome,
                format!("positive_outcomes[{i}]"),
                format!("`{o}` is not a declared outcome"),
            );
        }
    }

    let lookup_var = |name: &str| def.variable(name).map(|v| v.vtype.clone());
    check_node(&def.rule, "rule", 1, def, &lookup_var, &mut out);

    let lookup_excl = |name: &str| lookup_var(name).or_else(|| meta_field_type(name));
    for (i, ex) in def.exclusions.iter().enumerate() {
        check_predicate(
            &ex.predicate,
            &format!("exclusions[{i}].predicate"),
            1,
            &lookup_excl,
            &mut out,
        );
    }
    out
}

fn check_node(
    node: &RuleNode,
    path: &str,
    depth: usize,
    def: &CdrDefinition,
    lookup: &dyn Fn(&str) -> Option<VarType>,
    out: &mut Vec<Violation>,
) {
    if depth > MAX_TREE_DEPTH {
        out.push(Violation {
            code: ViolationCode::DepthExceeded,
            path: path.to_string(),
            message: format!("rule tree deeper than {MAX_TREE_DEPTH}"),
        });
        return;
    }
    match node {
        RuleNode::Leaf(label) => {
            if !def.outcomes.contains(label) {
                out.push(Violation {
                    code: ViolationCode::UnknownOutcome,
                    path: path.to_string(),
                    message: format!("leaf `{label}` is not a declared outcome"),
                });
            }
        }
        RuleNode::Branch {
            cond,
            then,
            otherwise,
        } => {
            check_predicate(cond, &format!("{path}.if"), depth + 1, lookup, out);
            check_node(then, &format!("{path}.then"), depth + 1, def, lookup, out);
            check_node(otherwise, &format!("{path}.else"), depth + 1, def, lookup, out);
        }
    }
}

fn check_predicate(
    pred: &Predicate,
    path: &str,
    depth: usize,
    lookup: &dyn Fn(&str) -> Option<VarType>,
    out: &mut Vec<Violation>,
) {
    if depth > MAX_TREE_DEPTH {
        out.push(Violation {
            code: ViolationCode::DepthExceeded,
            path: path.to_string(),
            message: format!("predicate nested deeper than {MAX_TREE_DEPTH}"),
        });
        return;
    }
    match pred {
        Predicate::Cmp { var, op, value } => match lookup(var) {
            None => out.push(Violation {
                code: ViolationCode::UnknownVariable,
                path: path.to_string(),
                message: format!("unknown variable `{var}`"),
            }),
            Some(vtype) => {
                if let Err((code, message)) = check_comparison(&vtype, *op, value) {
                    out.push(Violation {
                        code,
                        path: path.to_string(),
                        message: format!("`{var}`: {message}"),
                    });
                }
            }
        },
        Predicate::All(ps) | Predicate::Any(ps) => {
            let key = if matches!(pred, Predicate::All(_)) {
                "all"
            } else {
                "any"
            };
            for (i, p) in ps.iter().enumerate() {
                check_predicate(p, &format!("{path}.{key}[{i}]"), depth + 1, lookup, out);
            }
        }
        Predicate::Not(p) => check_predicate(p, &format!("{path}.not"), depth + 1, lookup, out),
    }
}

/// Whether comparing a variable of `vtype` with `op` against `operand` is
/// well-typed.
pub fn check_comparison(
    vtype: &VarType,
    op: CmpOp,
    operand: &Operand,
) -> Result<(), (ViolationCode, String)> {
    let mismatch = |msg: String| Err((ViolationCode::TypeMismatch, msg));
    if op.is_ordering() && !vtype.is_numeric() {
        return mismatch(format!("operator `{}` needs a numeric variable, found {}", op.as_str(), vtype.tag()));
    }
    if op == CmpOp::In && *vtype == VarType::Boolean {
        return mismatch("operator `in` is not defined for boolean variables".into());
    }
    let literals: &[Value] = match (op, operand) {
        (CmpOp::In, Operand::Many(items)) if !items.is_empty() => items,
        (CmpOp::In, _) => return mismatch("operator `in` needs a non-empty list".into()),
        (_, Operand::One(v)) => std::slice::from_ref(v),
        (_, Operand::Many(_)) => {
            return mismatch(format!("operator `{}` needs a scalar literal", op.as_str()))
        }
    };
    for lit in literals {
        let compatible = match (vtype, lit) {
            (VarType::Enum(values), Value::Str(s)) => {
                if !values.contains(s) {
                    return Err((
                        ViolationCode::UnknownEnumValue,
                        format!("`{s}` is not one of the enum values"),
                    ));
                }
                true
            }
            (vtype, lit) => vtype.admits(lit),
        };
        if !compatible {
            return mismatch(format!(
                "{} literal compared with a {} variable",
                lit.kind(),
                vtype.tag()
            ));
        }
    }
    Ok(())
}
