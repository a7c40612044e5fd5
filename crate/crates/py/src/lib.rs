//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists; failures raise `ValueError` (bad input) or `RuntimeError`.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use agentsafe_core::canonical::CanonicalJson;
use agentsafe_core::clock::SystemClock;
use agentsafe_core::escalation::{OperatorVerdict, TicketStatus};
use agentsafe_core::evalharness::{load_scenarios, mock_adapter, run_bank, HarnessConfig, MOCK_TOOLS};
use agentsafe_core::gateway::{self, GatewayConfig, GatewayError};
use agentsafe_core::ledger::payload::ToolCallRequest;
use agentsafe_core::ledger::{keys, verify_ledger_text, ApgFormat, Ledger};
use agentsafe_core::policy::{lint_policies, PolicySet};
use agentsafe_core::register::{load_register, RiskRegister};
use agentsafe_core::telemetry::{EventKind, SemanticEvent};
use agentsafe_core::triage::ContainmentLevel;

fn value_error(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn gateway_error(e: GatewayError) -> PyErr {
    match e {
        GatewayError::Ledger(_) => PyRuntimeError::new_err(e.to_string()),
        other => value_error(other),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = CanonicalJson::from_serialize(value)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?
        .into_string();
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_error)
}

fn register(text: &str) -> PyResult<RiskRegister> {
    load_register(text).map_err(value_error)
}

fn policies(text: &str) -> PyResult<PolicySet> {
    PolicySet::parse(text, "python").map_err(value_error)
}

/// Parse and cross-check a register document; returns a summary dict.
#[pyfunction]
fn validate_register<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    let reg = register(text)?;
    to_py(
        py,
        &serde_json::json!({
            "register_id": reg.register_id,
            "agent_id": reg.agent_id,
            "capabilities": reg.capabilities.len(),
            "risks": reg.risks.len(),
        }),
    )
}

/// Policy diagnostics against a register.
#[pyfunction]
fn lint<'py>(py: Python<'py>, register_text: &str, policy_text: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &lint_policies(&policies(policy_text)?, &register(register_text)?))
}

/// Verify a JSON-Lines ledger.
#[pyfunction]
fn verify_ledger<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &verify_ledger_text(text).map_err(value_error)?)
}

/// Replay a scenario bank; returns the full report.
#[pyfunction]
#[pyo3(signature = (bank_dir, register_path, policies_path, seed = 7))]
fn run_eval<'py>(
    py: Python<'py>,
    bank_dir: PathBuf,
    register_path: PathBuf,
    policies_path: PathBuf,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let read = |p: &PathBuf| std::fs::read_to_string(p).map_err(|e| value_error(format!("{}: {e}", p.display())));
    let reg = register(&read(&register_path)?)?;
    let set = policies(&read(&policies_path)?)?;
    let report = py.detach(|| {
        let bank = load_scenarios(&bank_dir, &reg).map_err(|e| e.to_string())?;
        let cfg = HarnessConfig {
            seed,
            ..HarnessConfig::default()
        };
        run_bank(&bank, Arc::new(reg), Arc::new(set), &cfg).map_err(|e| e.to_string())
    });
    let report = report.map_err(value_error)?;
    py.import("json")?.call_method1("loads", (report.to_canonical_json(),))
}

/// An in-memory gateway bound to one register and one policy set.
#[pyclass(name = "Gateway")]
struct PyGateway {
    inner: gateway::Gateway,
    register: Arc<RiskRegister>,
    policy: Arc<PolicySet>,
}

#[pymethods]
impl PyGateway {
    #[new]
    #[pyo3(signature = (register_text, policy_text, mock_tools = true))]
    fn new(register_text: &str, policy_text: &str, mock_tools: bool) -> PyResult<Self> {
        let clock = Arc::new(SystemClock);
        let config = GatewayConfig {
            ledger_id: "python".into(),
            ..GatewayConfig::default()
        };
        let inner = gateway::Gateway::new(config, Ledger::in_memory("python", keys::generate(), clock.clone()), clock);
        if mock_tools {
            for tool in MOCK_TOOLS {
                if let Some(adapter) = mock_adapter(tool, 1) {
                    inner.register_tool(tool, adapter);
                }
            }
        }
        Ok(Self {
            inner,
            register: Arc::new(register(register_text)?),
            policy: Arc::new(policies(policy_text)?),
        })
    }

    fn open_session(&self, agent_id: &str, declared_objective: &str) -> PyResult<String> {
        self.inner
            .open_session(agent_id, declared_objective, self.register.clone(), self.policy.clone())
            .map_err(gateway_error)
    }

    /// Authorize (and, if allowed, dispatch) one tool call.
    #[pyo3(signature = (session_id, tool, action, args = None, resource = None, intent = ""))]
    fn authorize<'py>(
        &self,
        py: Python<'py>,
        session_id: &str,
        tool: &str,
        action: &str,
        args: Option<&Bound<'py, PyAny>>,
        resource: Option<String>,
        intent: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mut request = ToolCallRequest::new(tool, action).with_intent(intent);
        request.resource = resource;
        if let Some(a) = args {
            request.args = from_py(a)?;
        }
        let out = py
            .detach(|| self.inner.authorize_tool_call(session_id, request))
            .map_err(gateway_error)?;
        to_py(py, &out)
    }

    /// Submit a semantic event: kind is goal, plan, plan-step, observation or reflection.
    fn submit_event<'py>(&self, py: Python<'py>, session_id: &str, kind: &str, text: &str) -> PyResult<Bound<'py, PyAny>> {
        let kind: EventKind = serde_json::from_value(serde_json::Value::from(kind)).map_err(value_error)?;
        let event = SemanticEvent::new(kind, text);
        to_py(py, &self.inner.submit_event(session_id, event).map_err(gateway_error)?)
    }

    fn contain<'py>(&self, py: Python<'py>, session_id: &str, level: &str, cause: &str) -> PyResult<Bound<'py, PyAny>> {
        let level: ContainmentLevel = level.parse().map_err(value_error)?;
        to_py(py, &self.inner.apply_containment(session_id, level, cause).map_err(gateway_error)?)
    }

    fn status<'py>(&self, py: Python<'py>, session_id: &str) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.session_status(session_id).map_err(gateway_error)?)
    }

    #[pyo3(signature = (status = None))]
    fn escalations<'py>(&self, py: Python<'py>, status: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        let status: Option<TicketStatus> = status.map(str::parse).transpose().map_err(value_error)?;
        to_py(py, &self.inner.escalations(status))
    }

    #[pyo3(signature = (escalation_id, verdict, operator_id, modified_args = None))]
    fn decide<'py>(
        &self,
        py: Python<'py>,
        escalation_id: &str,
        verdict: &str,
        operator_id: &str,
        modified_args: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let verdict: OperatorVerdict = verdict.parse().map_err(value_error)?;
        let modified = modified_args.map(from_py).transpose()?;
        let out = py
            .detach(|| self.inner.decide(escalation_id, verdict, operator_id, modified))
            .map_err(gateway_error)?;
        to_py(py, &out)
    }

    fn close_session(&self, session_id: &str, reason: &str) -> PyResult<u64> {
        self.inner.close_session(session_id, reason).map_err(gateway_error)
    }

    /// Provenance graph of a session as a DOT or JSON string.
    #[pyo3(signature = (session_id, format = "json"))]
    fn apg(&self, session_id: &str, format: &str) -> PyResult<String> {
        let format: ApgFormat = format.parse().map_err(value_error)?;
        self.inner.apg(session_id, format).map_err(gateway_error)
    }

    fn verify<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.verify_ledger())
    }

    /// The ledger as JSON Lines, header first.
    fn ledger_text(&self) -> String {
        self.inner.ledger_snapshot().to_text()
    }
}

#[pymodule]
fn agentsafe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(validate_register, m)?)?;
    m.add_function(wrap_pyfunction!(lint, m)?)?;
    m.add_function(wrap_pyfunction!(verify_ledger, m)?)?;
    m.add_function(wrap_pyfunction!(run_eval, m)?)?;
    m.add_class::<PyGateway>()?;
    Ok(())
}
