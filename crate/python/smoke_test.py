"""Smoke test for the `agentsafe` extension module.

Build and install it first:

    maturin develop -m crates/py/Cargo.toml

then run `python python/smoke_test.py` from the repository root.
"""

import json
import pathlib
import sys

import agentsafe

ROOT = pathlib.Path(__file__).resolve().parent.parent
BANK = ROOT / "bank"


def main() -> int:
    register_text = (BANK / "register.json").read_text()
    policy_text = (BANK / "policies.asp").read_text()

    summary = agentsafe.validate_register(register_text)
    assert summary["register_id"] == "clinic-ops", summary
    assert agentsafe.lint(register_text, policy_text) == []

    try:
        agentsafe.validate_register("{}")
    except ValueError:
        pass
    else:
        raise AssertionError("empty register accepted")

    gw = agentsafe.Gateway(register_text, policy_text)
    sid = gw.open_session("clinical-ops-agent", "summarize patient record 123")

    ack = gw.submit_event(sid, "goal", "summarize patient record 123")
    assert ack["drift_score"] == 0.0, ack

    out = gw.authorize(sid, "ehr", "read", resource="patient/123")
    assert out["status"] == "allowed", out
    out = gw.authorize(sid, "ehr", "write", resource="patient/123")
    assert out["status"] == "denied", out

    out = gw.authorize(sid, "treatment", "change", args={"units": 4})
    assert out["status"] == "escalated", out
    pending = gw.escalations("pending")
    assert [t["escalation_id"] for t in pending] == [out["escalation_id"]]
    decided = gw.decide(out["escalation_id"], "approve", "dr-lee")
    assert decided["outcome"]["status"] == "allowed", decided
    assert gw.escalations("pending") == []

    gw.contain(sid, "pause", "operator")
    assert gw.authorize(sid, "kb", "search")["status"] == "contained"
    gw.contain(sid, "kill", "operator")
    assert gw.status(sid)["level"] == "kill"

    graph = json.loads(gw.apg(sid, "json"))
    assert any(n["node_type"] == "Escalation" for n in graph["nodes"])
    assert gw.apg(sid, "dot").startswith("digraph apg {")

    assert gw.verify()["valid"]
    text = gw.ledger_text()
    assert agentsafe.verify_ledger(text)["valid"]
    lines = text.splitlines()
    lines[3] = lines[3].replace('"seq":2', '"seq":9')
    report = agentsafe.verify_ledger("\n".join(lines))
    assert not report["valid"] and report["first_bad_seq"] == 2, report

    report = agentsafe.run_eval(str(BANK / "scenarios"), str(BANK / "register.json"), str(BANK / "policies.asp"))
    metrics = report["metrics"]
    assert metrics["scenarios_total"] == len(list((BANK / "scenarios").glob("*.json")))
    print(
        f"ok: {metrics['scenarios_passed']}/{metrics['scenarios_total']} scenarios passed, "
        f"risk coverage {metrics['risk_coverage_score']:.4f}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
