//! Deterministic in-memory tool backends.

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::gateway::ToolAdapter;
use crate::ledger::payload::ToolCallRequest;
use crate::policy::Scalar;

/// Tools the harness can back with a mock.
pub const MOCK_TOOLS: [&str; 10] = [
    "ehr",
    "trading",
    "fs",
    "web",
    "kb",
    "drug-checker",
    "insurance",
    "pharmacy",
    "treatment",
    "explainer",
];

pub(crate) trait MockTool: Send {
    fn call(&mut self, request: &ToolCallRequest) -> Result<Value, String>;
    /// Simulated service time in virtual milliseconds.
    fn duration_ms(&self) -> i64;
}

pub(crate) fn mock_for(tool: &str, seed: u64) -> Option<Box<dyn MockTool>> {
    Some(match tool {
        "ehr" => Box::new(Ehr::new(seed)),
        "trading" => Box::new(Trading::new(seed)),
        "fs" => Box::new(Fs::default()),
        "web" => Box::new(Echo { duration: 80 }),
        "kb" | "drug-checker" | "insurance" | "pharmacy" | "treatment" | "explainer" => Box::new(Echo { duration: 15 }),
        _ => return None,
    })
}

/// A mock exposed as an ordinary gateway adapter, without virtual-time effects.
struct MockAdapter(Mutex<Box<dyn MockTool>>);

impl ToolAdapter for MockAdapter {
    fn invoke(&self, request: &ToolCallRequest) -> Result<Value, String> {
        self.0.lock().call(request)
    }
}

/// Adapter for one of [`MOCK_TOOLS`], or `None` for an unknown tool.
pub fn mock_adapter(tool: &str, seed: u64) -> Option<Arc<dyn ToolAdapter>> {
    mock_for(tool, seed).map(|m| Arc::new(MockAdapter(Mutex::new(m))) as Arc<dyn ToolAdapter>)
}

fn arg_str<'a>(r: &'a ToolCallRequest, name: &str) -> Option<&'a str> {
    match r.args.get(name) {
        Some(Scalar::Str(s)) => Some(s),
        _ => None,
    }
}

const MEDICATIONS: [&str; 8] = [
    "metformin",
    "lisinopril",
    "atorvastatin",
    "warfarin",
    "amoxicillin",
    "sertraline",
    "insulin",
    "ibuprofen",
];
const ALLERGIES: [&str; 4] = ["penicillin", "latex", "sulfa", "none"];

struct Ehr {
    seed: u64,
    overrides: BTreeMap<String, Value>,
}

impl Ehr {
    fn new(seed: u64) -> Self {
        Self {
            seed,
            overrides: BTreeMap::new(),
        }
    }

    fn record(&self, patient: &str) -> Value {
        if let Some(v) = self.overrides.get(patient) {
            return v.clone();
        }
        let h = patient.bytes().fold(self.seed, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let meds: Vec<&str> = (0..rng.gen_range(1..=3))
            .map(|_| MEDICATIONS[rng.gen_range(0..MEDICATIONS.len())])
            .collect();
        json!({
            "patient": patient,
            "age": rng.gen_range(18..=90),
            "allergy": ALLERGIES[rng.gen_range(0..ALLERGIES.len())],
            "medications": meds,
        })
    }
}

impl MockTool for Ehr {
    fn call(&mut self, r: &ToolCallRequest) -> Result<Value, String> {
        let patient = r.resource.clone().ok_or("ehr calls need a patient resource")?;
        match r.action.as_str() {
            "read" | "get" | "summarize" => Ok(self.record(&patient)),
            "write" | "update" => {
                let mut rec = self.record(&patient);
                for (k, v) in &r.args {
                    rec[k] = serde_json::to_value(v).unwrap_or(Value::Null);
                }
                self.overrides.insert(patient, rec.clone());
                Ok(rec)
            }
            "delete" => Ok(json!({ "deleted": self.overrides.remove(&patient).is_some() })),
            other => Err(format!("ehr: unsupported action `{other}`")),
        }
    }

    fn duration_ms(&self) -> i64 {
        20
    }
}

struct Trading {
    rng: ChaCha8Rng,
    next_order: u64,
    positions: BTreeMap<String, i64>,
}

impl Trading {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6164_6500),
            next_order: 0,
            positions: BTreeMap::new(),
        }
    }
}

impl MockTool for Trading {
    fn call(&mut self, r: &ToolCallRequest) -> Result<Value, String> {
        let symbol = arg_str(r, "symbol").unwrap_or("IDX").to_string();
        match r.action.as_str() {
            "quote" => Ok(json!({ "symbol": symbol, "price_cents": self.rng.gen_range(1_000..50_000) })),
            "buy" | "sell" => {
                let qty = match r.args.get("qty") {
                    Some(Scalar::Int(q)) => *q,
                    _ => return Err("trading: qty must be an integer".into()),
                };
                let signed = if r.action == "buy" { qty } else { -qty };
                let pos = self.positions.entry(symbol.clone()).or_default();
                *pos += signed;
                self.next_order += 1;
                Ok(json!({ "order_id": format!("o-{}", self.next_order), "symbol": symbol, "position": *pos }))
            }
            "cancel" => Ok(json!({ "cancelled": true })),
            other => Err(format!("trading: unsupported action `{other}`")),
        }
    }

    fn duration_ms(&self) -> i64 {
        35
    }
}

#[derive(Default)]
struct Fs {
    files: BTreeMap<String, String>,
}

impl MockTool for Fs {
    fn call(&mut self, r: &ToolCallRequest) -> Result<Value, String> {
        let path = r.resource.clone().ok_or("fs calls need a path resource")?;
        match r.action.as_str() {
            "read" => Ok(json!({ "path": path, "content": self.files.get(&path).cloned().unwrap_or_default() })),
            "write" => {
                let content = arg_str(r, "content").unwrap_or_default().to_string();
                self.files.insert(path.clone(), content);
                Ok(json!({ "path": path, "written": true }))
            }
            "delete" => Ok(json!({ "path": path, "deleted": self.files.remove(&path).is_some() })),
            "list" => Ok(json!({
                "entries": self.files.keys().filter(|k| k.starts_with(path.trim_end_matches('*'))).collect::<Vec<_>>()
            })),
            "exec" => Ok(json!({ "path": path, "exit_code": 0 })),
            other => Err(format!("fs: unsupported action `{other}`")),
        }
    }

    fn duration_ms(&self) -> i64 {
        10
    }
}

struct Echo {
    duration: i64,
}

impl MockTool for Echo {
    fn call(&mut self, r: &ToolCallRequest) -> Result<Value, String> {
        Ok(json!({ "tool": r.tool, "action": r.action, "ok": true }))
    }

    fn duration_ms(&self) -> i64 {
        self.duration
    }
}
