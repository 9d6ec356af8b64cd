//! In-memory form of a CDR definition file and its JSON encoding.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value as Json};

use crate::value::{Value, VarType};

pub const SCHEMA_VERSION: u32 = 1;

/// One input variable of a rule.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableSpec {
    pub name: String,
    pub vtype: VarType,
    pub definition: String,
    /// Value assigned when the note does not determine the variable. Must not
    /// push the rule towards a positive outcome on its own.
    pub negative_default: Value,
    pub required: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVariable {
    name: String,
    #[serde(rename = "type")]
    vtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values: Option<Vec<String>>,
    definition: String,
    negative_default: Value,
    #[serde(default = "default_true")]
    required: bool,
}

fn default_true() -> bool {
    true
}

impl<'de> Deserialize<'de> for VariableSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawVariable::deserialize(d)?;
        let vtype = match (raw.vtype.as_str(), raw.values) {
            ("enum", values) => VarType::Enum(values.unwrap_or_default()),
            (_, Some(_)) => {
                return Err(D::Error::custom(format!(
                    "`values` is only allowed on enum variables (variable `{}`)",
                    raw.name
                )))
            }
            ("boolean", None) => VarType::Boolean,
            ("integer", None) => VarType::Integer,
            ("float", None) => VarType::Float,
            ("string", None) => VarType::String,
            (other, None) => {
                return Err(D::Error::custom(format!(
                    "unknown variable type `{other}` (expected boolean, integer, float, string or enum)"
                )))
            }
        };
        Ok(VariableSpec {
            name: raw.name,
            vtype,
            definition: raw.definition,
            negative_default: raw.negative_default,
            required: raw.required,
        })
    }
}

impl Serialize for VariableSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let values = match &self.vtype {
            VarType::Enum(v) => Some(v.clone()),
            _ => None,
        };
        RawVariable {
            name: self.name.clone(),
            vtype: self.vtype.tag().to_string(),
            values,
            definition: self.definition.clone(),
            negative_default: self.negative_default.clone(),
            required: self.required,
        }
        .serialize(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    In,
}

impl CmpOp {
    pub fn as_str(self) -> &'static str {
        match self {
            CmpOp::Eq => "eq",
            CmpOp::Ne => "ne",
            CmpOp::Lt => "lt",
            CmpOp::Le => "le",
            CmpOp::Gt => "gt",
            CmpOp::Ge => "ge",
            CmpOp::In => "in",
        }
    }

    pub fn is_ordering(self) -> bool {
        matches!(self, CmpOp::Lt | CmpOp::Le | CmpOp::Gt | CmpOp::Ge)
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "eq" => CmpOp::Eq,
            "ne" => CmpOp::Ne,
            "lt" => CmpOp::Lt,
            "le" => CmpOp::Le,
            "gt" => CmpOp::Gt,
            "ge" => CmpOp::Ge,
            "in" => CmpOp::In,
            _ => return None,
        })
    }
}

/// Right-hand side of a comparison: a scalar, or a list for `in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Operand {
    One(Value),
    Many(Vec<Value>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Cmp {
        var: String,
        op: CmpOp,
        value: Operand,
    },
    All(Vec<Predicate>),
    Any(Vec<Predicate>),
    Not(Box<Predicate>),
}

/// Decision tree over predicates; leaves are outcome labels.
#[derive(Debug, Clone, PartialEq)]
pub enum RuleNode {
    Leaf(String),
    Branch {
        cond: Predicate,
        then: Box<RuleNode>,
        otherwise: Box<RuleNode>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExclusionRule {
    pub predicate: Predicate,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdrDefinition {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub id: String,
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    pub variables: Vec<VariableSpec>,
    #[serde(default)]
    pub exclusions: Vec<ExclusionRule>,
    pub rule: RuleNode,
    pub outcomes: Vec<String>,
    #[serde(default)]
    pub positive_outcomes: Vec<String>,
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

impl CdrDefinition {
    pub fn variable(&self, name: &str) -> Option<&VariableSpec> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn is_positive(&self, label: &str) -> bool {
        self.positive_outcomes.iter().any(|p| p == label)
    }
}

// JSON encoding of rule trees. Conversion goes through `serde_json::Value`
// so that malformed trees report the position inside the tree.

#[derive(Debug, thiserror::Error)]
#[error("{path}: {message}")]
pub struct TreeError {
    pub path: String,
    pub message: String,
}

fn tree_err(path: &str, message: impl Into<String>) -> TreeError {
    TreeError {
        path: path.to_string(),
        message: message.into(),
    }
}

impl RuleNode {
    pub fn from_json(json: &Json, path: &str) -> Result<Self, TreeError> {
        match json {
            Json::String(label) => Ok(RuleNode::Leaf(label.clone())),
            Json::Object(obj) => {
                expect_keys(obj, &["if", "then", "else"], path)?;
                let get = |k: &str| {
                    obj.get(k)
                        .ok_or_else(|| tree_err(path, format!("missing `{k}`")))
                };
                Ok(RuleNode::Branch {
                    cond: Predicate::from_json(get("if")?, &format!("{path}.if"))?,
                    then: Box::new(RuleNode::from_json(get("then")?, &format!("{path}.then"))?),
                    otherwise: Box::new(RuleNode::from_json(
                        get("else")?,
                        &format!("{path}.else"),
                    )?),
                })
            }
            _ => Err(tree_err(
                path,
                "expected an outcome label or an {\"if\", \"then\", \"else\"} object",
            )),
        }
    }

    pub fn to_json(&self) -> Json {
        match self {
            RuleNode::Leaf(label) => Json::String(label.clone()),
            RuleNode::Branch {
                cond,
                then,
                otherwise,
            } => json!({"if": cond.to_json(), "then": then.to_json(), "else": otherwise.to_json()}),
        }
    }
}

impl Predicate {
    pub fn from_json(json: &Json, path: &str) -> Result<Self, TreeError> {
        let obj = json
            .as_object()
            .ok_or_else(|| tree_err(path, "expected a predicate object"))?;
        let list = |key: &str| -> Result<Vec<Predicate>, TreeError> {
            let items = obj[key]
                .as_array()
                .ok_or_else(|| tree_err(path, format!("`{key}` must be a list")))?;
            items
                .iter()
                .enumerate()
                .map(|(i, p)| Predicate::from_json(p, &format!("{path}.{key}[{i}]")))
                .collect()
        };
        if obj.contains_key("var") {
            expect_keys(obj, &["var", "op", "value"], path)?;
            let var = obj["var"]
                .as_str()
                .ok_or_else(|| tree_err(path, "`var` must be a string"))?
                .to_string();
            let op_text = obj
                .get("op")
                .and_then(Json::as_str)
                .ok_or_else(|| tree_err(path, "missing or non-string `op`"))?;
            let op = CmpOp::parse(op_text)
                .ok_or_else(|| tree_err(path, format!("unknown operator `{op_text}`")))?;
            let raw = obj
                .get("value")
                .ok_or_else(|| tree_err(path, "missing `value`"))?;
            let value = Operand::deserialize(raw)
                .map_err(|e| tree_err(&format!("{path}.value"), e.to_string()))?;
            Ok(Predicate::Cmp { var, op, value })
        } else if obj.contains_key("all") {
            expect_keys(obj, &["all"], path)?;
            Ok(Predicate::All(list("all")?))
        } else if obj.contains_key("any") {
            expect_keys(obj, &["any"], path)?;
            Ok(Predicate::Any(list("any")?))
        } else if let Some(inner) = obj.get("not") {
            expect_keys(obj, &["not"], path)?;
            Ok(Predicate::Not(Box::new(Predicate::from_json(
                inner,
                &format!("{path}.not"),
            )?)))
        } else {
            Err(tree_err(
                path,
                "predicate needs one of `var`, `all`, `any`, `not`",
            ))
        }
    }

    pub fn to_json(&self) -> Json {
        match self {
            Predicate::Cmp { var, op, value } => {
                json!({"var": var, "op": op.as_str(), "value": value})
            }
            Predicate::All(ps) => json!({"all": ps.iter().map(Predicate::to_json).collect::<Vec<_>>()}),
            Predicate::Any(ps) => json!({"any": ps.iter().map(Predicate::to_json).collect::<Vec<_>>()}),
            Predicate::Not(p) => json!({"not": p.to_json()}),
        }
    }
}

fn expect_keys(obj: &Map<String, Json>, allowed: &[&str], path: &str) -> Result<(), TreeError> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(tree_err(path, format!("unexpected key `{k}`"))),
        None => Ok(()),
    }
}

impl<'de> Deserialize<'de> for RuleNode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let json = Json::deserialize(d)?;
        RuleNode::from_json(&json, "rule").map_err(D::Error::custom)
    }
}

impl Serialize for RuleNode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Predicate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let json = Json::deserialize(d)?;
        Predicate::from_json(&json, "predicate").map_err(D::Error::custom)
    }
}

impl Serialize for Predicate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

/// Visit every comparison in a predicate.
pub(crate) fn for_each_cmp<'a>(pred: &'a Predicate, f: &mut impl FnMut(&'a str, CmpOp, &'a Operand)) {
    match pred {
        Predicate::Cmp { var, op, value } => f(var, *op, value),
        Predicate::All(ps) | Predicate::Any(ps) => ps.iter().for_each(|p| for_each_cmp(p, f)),
        Predicate::Not(p) => for_each_cmp(p, f),
    }
}

/// Visit every predicate in a rule tree.
pub(crate) fn for_each_condition<'a>(node: &'a RuleNode, f: &mut impl FnMut(&'a Predicate)) {
    if let RuleNode::Branch {
        cond,
        then,
        otherwise,
    } = node
    {
        f(cond);
        for_each_condition(then, f);
        for_each_condition(otherwise, f);
    }
}
