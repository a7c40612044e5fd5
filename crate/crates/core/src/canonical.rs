//! Canonical JSON: keys sorted, no insignificant whitespace, UTF-8,
//! numbers in serde_json's shortest round-trip form.
//!
//! Every ledger payload and every wire body goes through this writer, so the
//! byte representation (and therefore every hash) is stable.

use std::fmt;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CanonicalizationError {
    #[error("payload is not valid JSON: {0}")]
    Invalid(String),
    #[error("payload is valid JSON but not in canonical form")]
    NotCanonical,
    #[error("value cannot be represented as JSON: {0}")]
    Unrepresentable(String),
}

pub fn to_canonical_string(value: &Value) -> String {
    let mut out = String::new();
    write_value(value, &mut out);
    out
}

fn write_value(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => out.push_str(&n.to_string()),
        Value::String(s) => write_str(s, out),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_str(key, out);
                out.push(':');
                write_value(&map[key], out);
            }
            out.push('}');
        }
    }
}

fn write_str(s: &str, out: &mut String) {
    // serde_json's string escaping is already minimal and deterministic
    out.push_str(&serde_json::to_string(s).expect("string serialization is infallible"));
}

/// Text guaranteed to be canonical JSON.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CanonicalJson(String);

impl CanonicalJson {
    pub fn from_value(value: &Value) -> Self {
        Self(to_canonical_string(value))
    }

    pub fn from_serialize<T: Serialize>(item: &T) -> Result<Self, CanonicalizationError> {
        let value = serde_json::to_value(item)
            .map_err(|e| CanonicalizationError::Unrepresentable(e.to_string()))?;
        Ok(Self::from_value(&value))
    }

    /// Accepts `text` only if it is already canonical.
    pub fn parse(text: &str) -> Result<Self, CanonicalizationError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| CanonicalizationError::Invalid(e.to_string()))?;
        let canonical = to_canonical_string(&value);
        if canonical == text {
            Ok(Self(canonical))
        } else {
            Err(CanonicalizationError::NotCanonical)
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    pub fn to_value(&self) -> Value {
        serde_json::from_str(&self.0).expect("canonical JSON is valid JSON")
    }
}

impl fmt::Display for CanonicalJson {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}
