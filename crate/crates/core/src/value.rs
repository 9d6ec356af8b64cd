//! Typed literals shared by definition files, extraction and execution.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Declared type of a rule variable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VarType {
    Boolean,
    Integer,
    Float,
    String,
    Enum(Vec<String>),
}

impl VarType {
    pub fn tag(&self) -> &'static str {
        match self {
            VarType::Boolean => "boolean",
            VarType::Integer => "integer",
            VarType::Float => "float",
            VarType::String => "string",
            VarType::Enum(_) => "enum",
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, VarType::Integer | VarType::Float)
    }

    /// Whether `value` is a well-typed literal for this type.
    ///
    /// Float variables accept integer literals; enum variables only accept
    /// one of their declared values.
    pub fn admits(&self, value: &Value) -> bool {
        match (self, value) {
            (VarType::Boolean, Value::Bool(_)) => true,
            (VarType::Integer, Value::Int(_)) => true,
            (VarType::Float, Value::Int(_) | Value::Float(_)) => true,
            (VarType::String, Value::Str(_)) => true,
            (VarType::Enum(values), Value::Str(s)) => values.iter().any(|v| v == s),
            _ => false,
        }
    }

    /// Coerce free text (as produced by a language model or typed by a
    /// clinician) into a literal of this type.
    pub fn coerce_text(&self, raw: &str) -> Result<Value, CoercionError> {
        let text = raw.trim();
        let fail = || CoercionError {
            expected: self.clone(),
            found: text.to_string(),
        };
        match self {
            VarType::Boolean => match text.to_ascii_lowercase().as_str() {
                "true" | "yes" | "present" => Ok(Value::Bool(true)),
                "false" | "no" | "absent" => Ok(Value::Bool(false)),
                _ => Err(fail()),
            },
            VarType::Integer => text.parse::<i64>().map(Value::Int).map_err(|_| fail()),
            VarType::Float => match text.parse::<f64>() {
                Ok(f) if f.is_finite() => Ok(Value::Float(f)),
                _ => Err(fail()),
            },
            VarType::String => {
                if text.is_empty() {
                    Err(fail())
                } else {
                    Ok(Value::Str(text.to_string()))
                }
            }
            VarType::Enum(values) => {
                let needle = text.to_lowercase();
                values
                    .iter()
                    .find(|v| **v == needle)
                    .map(|v| Value::Str(v.clone()))
                    .ok_or_else(fail)
            }
        }
    }

    /// Coerce a JSON value supplied over the API. Strings go through
    /// [`VarType::coerce_text`], so `"yes"` is accepted for booleans.
    pub fn coerce_json(&self, json: &serde_json::Value) -> Result<Value, CoercionError> {
        let fail = || CoercionError {
            expected: self.clone(),
            found: json.to_string(),
        };
        match json {
            serde_json::Value::String(s) => self.coerce_text(s),
            serde_json::Value::Bool(b) if *self == VarType::Boolean => Ok(Value::Bool(*b)),
            serde_json::Value::Number(n) => match self {
                VarType::Integer => n.as_i64().map(Value::Int).ok_or_else(fail),
                VarType::Float => n.as_f64().map(Value::Float).ok_or_else(fail),
                _ => Err(fail()),
            },
            _ => Err(fail()),
        }
    }
}

impl fmt::Display for VarType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarType::Enum(values) => write!(f, "enum: {}", values.join(" | ")),
            other => f.write_str(other.tag()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("cannot read {found:?} as {expected}")]
pub struct CoercionError {
    pub expected: VarType,
    pub found: String,
}

/// A typed literal. Enum members are carried as `Str`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl Value {
    pub fn kind(&self) -> &'static str {
        match self {
            Value::Bool(_) => "boolean",
            Value::Int(_) => "integer",
            Value::Float(_) => "float",
            Value::Str(_) => "string",
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Str(s) => f.write_str(s),
        }
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Float(x)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boolean_vocabulary() {
        let t = VarType::Boolean;
        for (text, want) in [
            ("yes", true),
            ("YES", true),
            ("Present", true),
            ("true", true),
            ("no", false),
            ("absent", false),
            (" False ", false),
        ] {
            assert_eq!(t.coerce_text(text), Ok(Value::Bool(want)), "{text}");
        }
        assert!(t.coerce_text("maybe").is_err());
        assert!(t.coerce_text("1").is_err());
    }

    #[test]
    fn numeric_coercion() {
        assert_eq!(VarType::Integer.coerce_text("14"), Ok(Value::Int(14)));
        assert!(VarType::Integer.coerce_text("abc").is_err());
        assert!(VarType::Integer.coerce_text("1.5").is_err());
        assert_eq!(VarType::Float.coerce_text("-2.5"), Ok(Value::Float(-2.5)));
        assert!(VarType::Float.coerce_text("NaN").is_err());
    }

    #[test]
    fn enum_matches_after_trim_and_lowercase() {
        let t = VarType::Enum(vec!["under_2".into(), "2_or_older".into()]);
        assert_eq!(t.coerce_text(" UNDER_2 "), Ok(Value::Str("under_2".into())));
        assert!(t.coerce_text("under 2").is_err());
    }

    #[test]
    fn json_coercion() {
        use serde_json::json;
        assert_eq!(VarType::Boolean.coerce_json(&json!("yes")), Ok(Value::Bool(true)));
        assert_eq!(VarType::Boolean.coerce_json(&json!(false)), Ok(Value::Bool(false)));
        assert!(VarType::Boolean.coerce_json(&json!(1)).is_err());
        assert_eq!(VarType::Float.coerce_json(&json!(3)), Ok(Value::Float(3.0)));
        assert!(VarType::Integer.coerce_json(&json!(3.5)).is_err());
    }

    #[test]
    fn untagged_literals_round_trip() {
        let vals: Vec<Value> = serde_json::from_str(r#"[true, 3, 2.5, "x", 2.0]"#).unwrap();
        assert_eq!(
            vals,
            vec![
                Value::Bool(true),
                Value::Int(3),
                Value::Float(2.5),
                Value::Str("x".into()),
                Value::Float(2.0)
            ]
        );
        let back = serde_json::to_string(&vals).unwrap();
        assert_eq!(back, r#"[true,3,2.5,"x",2.0]"#);
    }
}
