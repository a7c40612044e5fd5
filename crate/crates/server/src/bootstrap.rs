use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use agentsafe_core::clock::{Clock, SystemClock};
use agentsafe_core::evalharness::{mock_adapter, MOCK_TOOLS};
use agentsafe_core::gateway::{Gateway, GatewayConfig};
use agentsafe_core::ledger::{keys, Ledger, LedgerError};
use agentsafe_core::policy::{PolicyError, PolicySet};
use agentsafe_core::register::{load_register, RegisterError};

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("register `{name}`: {source}")]
    Register { name: String, source: RegisterError },
    #[error("policy `{name}`: {source}")]
    Policy { name: String, source: PolicyError },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

fn read(path: &Path) -> Result<String, BootstrapError> {
    std::fs::read_to_string(path).map_err(|source| BootstrapError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Build a wall-clock gateway from `config`: open (or create) the ledger and
/// key, and load the named registers and policies. With `mock_tools`, the
/// deterministic mock backends are registered as tool adapters.
pub fn build_gateway(config: GatewayConfig, mock_tools: bool) -> Result<Gateway, BootstrapError> {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let key = match &config.key_path {
        Some(p) => keys::load_or_create(p)?,
        None => keys::generate(),
    };
    let ledger = match &config.ledger_path {
        Some(p) => Ledger::open(p, &config.ledger_id, key, clock.clone())?,
        None => Ledger::in_memory(&config.ledger_id, key, clock.clone()),
    };
    let registers = config.registers.clone();
    let policies = config.policies.clone();
    let gw = Gateway::new(config, ledger, clock);
    for (name, path) in &registers {
        let register = load_register(&read(path)?).map_err(|source| BootstrapError::Register {
            name: name.clone(),
            source,
        })?;
        gw.add_register(name, register);
    }
    for (name, path) in &policies {
        let policy = PolicySet::parse(&read(path)?, name).map_err(|source| BootstrapError::Policy {
            name: name.clone(),
            source,
        })?;
        gw.add_policy(name, policy);
    }
    if mock_tools {
        for tool in MOCK_TOOLS {
            if let Some(adapter) = mock_adapter(tool, 0) {
                gw.register_tool(tool, adapter);
            }
        }
    }
    Ok(gw)
}
