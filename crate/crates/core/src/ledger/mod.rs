//! Signed, append-only provenance ledger.
//!
//! Each record commits to its predecessor:
//!
//! ```text
//! record_hash = SHA-256("{seq}|{ts}|{session_id}|{kind}|{payload_hash}|{prev_hash}")
//! sig         = Ed25519(record_hash bytes)
//! ```
//!
//! The on-disk form is JSON Lines: a header line carrying the public key,
//! then one canonical-JSON record per line. Appends are flushed before they
//! return.

mod apg;
pub mod payload;

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use apg::{build_apg, build_apg_unchecked, export_apg, ActionProvenanceGraph, ApgEdge, ApgError, ApgFormat, ApgNode, EdgeType, NodeType};

use crate::canonical::{CanonicalJson, CanonicalizationError};
use crate::clock::{format_rfc3339, Clock, Millis};

pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("session `{0}` is sealed; no further records may be appended")]
    SealedSession(String),
    #[error(transparent)]
    Canonicalization(#[from] CanonicalizationError),
    #[error("ledger I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed ledger: {0}")]
    Malformed(String),
    #[error("existing ledger failed verification at seq {seq}: {failure}")]
    Corrupt { seq: u64, failure: ChainFailure },
    #[error("signing key does not match ledger public key")]
    KeyMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    SessionOpen,
    Goal,
    Plan,
    PlanStep,
    ToolCallRequest,
    Decision,
    EscalationOpened,
    EscalationDecided,
    Containment,
    GuardianAlert,
    DriftAlert,
    Observation,
    Reflection,
    Fallback,
    Quarantine,
    SessionClose,
}

impl RecordKind {
    pub const ALL: [RecordKind; 16] = [
        RecordKind::SessionOpen,
        RecordKind::Goal,
        RecordKind::Plan,
        RecordKind::PlanStep,
        RecordKind::ToolCallRequest,
        RecordKind::Decision,
        RecordKind::EscalationOpened,
        RecordKind::EscalationDecided,
        RecordKind::Containment,
        RecordKind::GuardianAlert,
        RecordKind::DriftAlert,
        RecordKind::Observation,
        RecordKind::Reflection,
        RecordKind::Fallback,
        RecordKind::Quarantine,
        RecordKind::SessionClose,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::SessionOpen => "session-open",
            RecordKind::Goal => "goal",
            RecordKind::Plan => "plan",
            RecordKind::PlanStep => "plan-step",
            RecordKind::ToolCallRequest => "tool-call-request",
            RecordKind::Decision => "decision",
            RecordKind::EscalationOpened => "escalation-opened",
            RecordKind::EscalationDecided => "escalation-decided",
            RecordKind::Containment => "containment",
            RecordKind::GuardianAlert => "guardian-alert",
            RecordKind::DriftAlert => "drift-alert",
            RecordKind::Observation => "observation",
            RecordKind::Reflection => "reflection",
            RecordKind::Fallback => "fallback",
            RecordKind::Quarantine => "quarantine",
            RecordKind::SessionClose => "session-close",
        }
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecordKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown record kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvenanceRecord {
    pub seq: u64,
    pub ts: String,
    pub session_id: String,
    pub kind: RecordKind,
    /// Canonical JSON text.
    pub payload: String,
    pub payload_hash: String,
    pub prev_hash: String,
    pub record_hash: String,
    pub sig: String,
}

impl ProvenanceRecord {
    pub fn payload_value(&self) -> serde_json::Value {
        serde_json::from_str(&self.payload).unwrap_or(serde_json::Value::Null)
    }

    pub fn payload_as<T: serde::de::DeserializeOwned>(&self) -> Option<T> {
        serde_json::from_str(&self.payload).ok()
    }

    pub fn ts_ms(&self) -> Option<Millis> {
        crate::clock::parse_rfc3339(&self.ts)
    }

    pub fn to_line(&self) -> String {
        CanonicalJson::from_serialize(self)
            .expect("records are serializable")
            .into_string()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash preimage of a record, byte-exact.
pub fn record_preimage(
    seq: u64,
    ts: &str,
    session_id: &str,
    kind: RecordKind,
    payload_hash: &str,
    prev_hash: &str,
) -> String {
    format!("{seq}|{ts}|{session_id}|{kind}|{payload_hash}|{prev_hash}")
}

pub fn compute_record_hash(r: &ProvenanceRecord) -> String {
    sha256_hex(record_preimage(r.seq, &r.ts, &r.session_id, r.kind, &r.payload_hash, &r.prev_hash).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerHeader {
    pub ledger_id: String,
    pub pubkey: String,
    pub alg: String,
    pub hash: String,
}

impl LedgerHeader {
    pub fn new(ledger_id: &str, key: &VerifyingKey) -> Self {
        Self {
            ledger_id: ledger_id.to_string(),
            pubkey: hex::encode(key.as_bytes()),
            alg: "ed25519".to_string(),
            hash: "sha256".to_string(),
        }
    }

    pub fn verifying_key(&self) -> Option<VerifyingKey> {
        let bytes: [u8; 32] = hex::decode(&self.pubkey).ok()?.try_into().ok()?;
        VerifyingKey::from_bytes(&bytes).ok()
    }

    pub fn to_line(&self) -> String {
        CanonicalJson::from_serialize(self)
            .expect("header is serializable")
            .into_string()
    }
}

/// Key material helpers. Keys are stored as 64 hex characters (the 32-byte seed).
pub mod keys {
    use super::*;
    use rand::SeedableRng;

    pub fn from_seed(seed: u64) -> SigningKey {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        SigningKey::generate(&mut rng)
    }

    pub fn generate() -> SigningKey {
        SigningKey::generate(&mut rand::rngs::OsRng)
    }

    pub fn load_or_create(path: &Path) -> Result<SigningKey, LedgerError> {
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            let bytes: [u8; 32] = hex::decode(text.trim())
                .ok()
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| LedgerError::Malformed(format!("bad key file {}", path.display())))?;
            Ok(SigningKey::from_bytes(&bytes))
        } else {
            let key = generate();
            std::fs::write(path, hex::encode(key.to_bytes()))?;
            Ok(key)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainFailure {
    HashMismatch,
    BrokenLink,
    BadSignature,
    SeqGap,
    /// A line that does not parse as a record.
    Malformed,
}

impl fmt::Display for ChainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChainFailure::HashMismatch => "hash-mismatch",
            ChainFailure::BrokenLink => "broken-link",
            ChainFailure::BadSignature => "bad-signature",
            ChainFailure::SeqGap => "seq-gap",
            ChainFailure::Malformed => "malformed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub valid: bool,
    pub first_bad_seq: Option<u64>,
    pub failure: Option<ChainFailure>,
    /// Number of records that verified before the first failure (all of them when valid).
    pub verified_records: u64,
    /// Hash of the last verified record, for anchoring against truncation.
    pub head_hash: String,
}

impl VerificationReport {
    fn ok(n: u64, head: &str) -> Self {
        Self {
            valid: true,
            first_bad_seq: None,
            failure: None,
            verified_records: n,
            head_hash: head.to_string(),
        }
    }

    fn bad(seq: u64, failure: ChainFailure, verified: u64, head: &str) -> Self {
        Self {
            valid: false,
            first_bad_seq: Some(seq),
            failure: Some(failure),
            verified_records: verified,
            head_hash: head.to_string(),
        }
    }
}

/// Signatures must be the lowercase hex of exactly 64 bytes.
fn decode_sig(sig: &str) -> Option<Signature> {
    if sig.len() != 128 || sig.bytes().any(|b| !matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        return None;
    }
    let bytes: [u8; 64] = hex::decode(sig).ok()?.try_into().ok()?;
    Some(Signature::from_bytes(&bytes))
}

fn decode_hash(h: &str) -> Option<[u8; 32]> {
    hex::decode(h).ok()?.try_into().ok()
}

fn check_signature(key: &VerifyingKey, r: &ProvenanceRecord) -> bool {
    match (decode_sig(&r.sig), decode_hash(&r.record_hash)) {
        (Some(sig), Some(msg)) => key.verify(&msg, &sig).is_ok(),
        _ => false,
    }
}

const SIG_BATCH: usize = 256;

fn batch_ok(key: &VerifyingKey, records: &[ProvenanceRecord]) -> bool {
    let decoded: Option<Vec<([u8; 32], Signature)>> = records
        .iter()
        .map(|r| Some((decode_hash(&r.record_hash)?, decode_sig(&r.sig)?)))
        .collect();
    decoded.is_some_and(|d| {
        let msgs: Vec<&[u8]> = d.iter().map(|(m, _)| &m[..]).collect();
        let sigs: Vec<Signature> = d.iter().map(|(_, s)| *s).collect();
        ed25519_dalek::verify_batch(&msgs, &sigs, &vec![*key; d.len()]).is_ok()
    })
}

/// Index of the first record whose signature does not verify. Chunks are
/// batch-verified; a failing chunk is bisected down to single records.
fn first_bad_signature(key: Option<&VerifyingKey>, records: &[ProvenanceRecord]) -> Option<usize> {
    let Some(key) = key else {
        return (!records.is_empty()).then_some(0);
    };
    let mut start = 0;
    while start < records.len() {
        let end = (start + SIG_BATCH).min(records.len());
        if batch_ok(key, &records[start..end]) {
            start = end;
            continue;
        }
        let (mut lo, mut hi) = (start, end);
        while hi - lo > 8 {
            let mid = lo + (hi - lo) / 2;
            if batch_ok(key, &records[lo..mid]) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        return (lo..hi).find(|&i| !check_signature(key, &records[i]));
    }
    None
}

/// Check every record's hash, signature, sequence number and back-link.
///
/// A record whose own content is inconsistent (hash or signature) is reported
/// at its expected position; an authentic record that is out of place
/// (sequence gap, broken link) is reported under its own `seq`.
pub fn verify_chain(header: &LedgerHeader, records: &[ProvenanceRecord]) -> VerificationReport {
    let head_before = |i: usize| if i == 0 { GENESIS_HASH } else { records[i - 1].record_hash.as_str() };
    // structural pass first; signatures are the expensive part
    let mut structural = None;
    let mut prev = GENESIS_HASH;
    for (i, r) in records.iter().enumerate() {
        let expected = i as u64;
        if sha256_hex(r.payload.as_bytes()) != r.payload_hash || compute_record_hash(r) != r.record_hash {
            structural = Some((i, expected, ChainFailure::HashMismatch));
        } else if r.seq != expected {
            structural = Some((i, r.seq, ChainFailure::SeqGap));
        } else if r.prev_hash != prev {
            structural = Some((i, r.seq, ChainFailure::BrokenLink));
        }
        if structural.is_some() {
            break;
        }
        prev = &r.record_hash;
    }
    // an out-of-place record still has its own signature checked first
    let signed = match structural {
        Some((i, _, ChainFailure::HashMismatch)) => i,
        Some((i, _, _)) => i + 1,
        None => records.len(),
    };
    if let Some(i) = first_bad_signature(header.verifying_key().as_ref(), &records[..signed]) {
        return VerificationReport::bad(i as u64, ChainFailure::BadSignature, i as u64, head_before(i));
    }
    match structural {
        Some((i, seq, failure)) => VerificationReport::bad(seq, failure, i as u64, head_before(i)),
        None => VerificationReport::ok(records.len() as u64, head_before(records.len())),
    }
}

/// Parse a ledger file's text into its header and records. A line that fails
/// to parse truncates the record list; its index is returned alongside.
pub fn parse_ledger_text(text: &str) -> Result<(LedgerHeader, Vec<ProvenanceRecord>, Option<u64>), LedgerError> {
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| LedgerError::Malformed("missing header line".into()))?;
    let header: LedgerHeader =
        serde_json::from_str(header_line).map_err(|e| LedgerError::Malformed(format!("header: {e}")))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        match serde_json::from_str::<ProvenanceRecord>(line) {
            Ok(r) => records.push(r),
            Err(_) => return Ok((header, records, Some(i as u64))),
        }
    }
    Ok((header, records, None))
}

/// Verify ledger file text; unparseable record lines are `malformed`.
pub fn verify_ledger_text(text: &str) -> Result<VerificationReport, LedgerError> {
    let (header, records, bad_line) = parse_ledger_text(text)?;
    let report = verify_chain(&header, &records);
    match bad_line {
        Some(idx) if report.valid => Ok(VerificationReport::bad(
            idx,
            ChainFailure::Malformed,
            report.verified_records,
            &report.head_hash,
        )),
        _ => Ok(report),
    }
}

/// Read-only copy of a ledger prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerSnapshot {
    pub header: LedgerHeader,
    pub records: Vec<ProvenanceRecord>,
}

impl LedgerSnapshot {
    pub fn verify(&self) -> VerificationReport {
        verify_chain(&self.header, &self.records)
    }

    pub fn session_records<'a>(&'a self, session_id: &'a str) -> impl Iterator<Item = &'a ProvenanceRecord> + 'a {
        self.records.iter().filter(move |r| r.session_id == session_id)
    }

    pub fn to_text(&self) -> String {
        let mut out = self.header.to_line();
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }
}

/// The single writer of a ledger. Callers share it behind a mutex; the lock
/// order defines the total order of appends.
pub struct Ledger {
    header: LedgerHeader,
    key: SigningKey,
    records: Vec<ProvenanceRecord>,
    sealed: BTreeSet<String>,
    sink: Option<BufWriter<File>>,
    clock: Arc<dyn Clock>,
}

impl Ledger {
    pub fn in_memory(ledger_id: &str, key: SigningKey, clock: Arc<dyn Clock>) -> Self {
        Self {
            header: LedgerHeader::new(ledger_id, &key.verifying_key()),
            key,
            records: Vec::new(),
            sealed: BTreeSet::new(),
            sink: None,
            clock,
        }
    }

    /// Open (or create) a JSON-Lines ledger file. An existing file must verify
    /// and must have been written with `key`.
    pub fn open(path: &Path, ledger_id: &str, key: SigningKey, clock: Arc<dyn Clock>) -> Result<Self, LedgerError> {
        if path.exists() && std::fs::metadata(path)?.len() > 0 {
            let text = std::fs::read_to_string(path)?;
            let (header, records, bad) = parse_ledger_text(&text)?;
            if header.pubkey != hex::encode(key.verifying_key().as_bytes()) {
                return Err(LedgerError::KeyMismatch);
            }
            if let Some(idx) = bad {
                return Err(LedgerError::Corrupt {
                    seq: idx,
                    failure: ChainFailure::Malformed,
                });
            }
            let report = verify_chain(&header, &records);
            if !report.valid {
                return Err(LedgerError::Corrupt {
                    seq: report.first_bad_seq.unwrap_or_default(),
                    failure: report.failure.unwrap_or(ChainFailure::Malformed),
                });
            }
            let sealed = records
                .iter()
                .filter(|r| r.kind == RecordKind::Containment)
                .filter(|r| {
                    r.payload_as::<payload::ContainmentPayload>()
                        .is_some_and(|p| p.level == crate::triage::ContainmentLevel::Kill)
                })
                .map(|r| r.session_id.clone())
                .collect();
            let file = OpenOptions::new().append(true).open(path)?;
            Ok(Self {
                header,
                key,
                records,
                sealed,
                sink: Some(BufWriter::new(file)),
                clock,
            })
        } else {
            let header = LedgerHeader::new(ledger_id, &key.verifying_key());
            let mut file = BufWriter::new(File::create(path)?);
            writeln!(file, "{}", header.to_line())?;
            file.flush()?;
            Ok(Self {
                header,
                key,
                records: Vec::new(),
                sealed: BTreeSet::new(),
                sink: Some(file),
                clock,
            })
        }
    }

    pub fn header(&self) -> &LedgerHeader {
        &self.header
    }

    pub fn records(&self) -> &[ProvenanceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn head_hash(&self) -> &str {
        self.records.last().map_or(GENESIS_HASH, |r| r.record_hash.as_str())
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            header: self.header.clone(),
            records: self.records.clone(),
        }
    }

    pub fn is_sealed(&self, session_id: &str) -> bool {
        self.sealed.contains(session_id)
    }

    /// Refuse all further appends for `session_id`.
    pub fn seal(&mut self, session_id: &str) {
        self.sealed.insert(session_id.to_string());
    }

    pub fn append(
        &mut self,
        kind: RecordKind,
        session_id: &str,
        payload: &CanonicalJson,
    ) -> Result<ProvenanceRecord, LedgerError> {
        if self.sealed.contains(session_id) {
            return Err(LedgerError::SealedSession(session_id.to_string()));
        }
        let seq = self.records.len() as u64;
        let ts = format_rfc3339(self.clock.now_ms());
        let payload = payload.as_str().to_string();
        let payload_hash = sha256_hex(payload.as_bytes());
        let prev_hash = self.head_hash().to_string();
        let preimage = record_preimage(seq, &ts, session_id, kind, &payload_hash, &prev_hash);
        let digest = Sha256::digest(preimage.as_bytes());
        let record = ProvenanceRecord {
            seq,
            ts,
            session_id: session_id.to_string(),
            kind,
            payload,
            payload_hash,
            prev_hash,
            record_hash: hex::encode(digest),
            sig: hex::encode(self.key.sign(&digest).to_bytes()),
        };
        if let Some(sink) = self.sink.as_mut() {
            writeln!(sink, "{}", record.to_line())?;
            sink.flush()?;
        }
        self.records.push(record.clone());
        Ok(record)
    }

    /// Append raw payload text, which must already be canonical JSON.
    pub fn append_text(&mut self, kind: RecordKind, session_id: &str, payload: &str) -> Result<ProvenanceRecord, LedgerError> {
        let canonical = CanonicalJson::parse(payload)?;
        self.append(kind, session_id, &canonical)
    }

    pub fn append_serialize<T: Serialize>(
        &mut self,
        kind: RecordKind,
        session_id: &str,
        payload: &T,
    ) -> Result<ProvenanceRecord, LedgerError> {
        let canonical = CanonicalJson::from_serialize(payload)?;
        self.append(kind, session_id, &canonical)
    }
}

/// Read a ledger file for offline verification and graph export.
pub fn read_ledger_file(path: &Path) -> Result<String, LedgerError> {
    let mut text = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    Ok(text)
}
