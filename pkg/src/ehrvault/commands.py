"""Command dispatch shared by the CLI and the scenario runner.

Every actor command maps onto one agents-module operation; both entry
points call ``execute`` so scripted scenarios exercise exactly the code
paths a human would.
"""

from __future__ import annotations

import json
from pathlib import Path

from . import agents, audit
from .canonical import sha256_hex
from .deployment import Deployment
from .errors import ProtocolViolation, ScenarioDiverged, VaultError


def execute(dep: Deployment, actor: str, command: str, args: dict) -> dict:
    dep.wake_all()
    handler = _HANDLERS.get(command)
    if handler is None:
        raise ProtocolViolation(f"unknown command: {command}")
    return handler(dep, actor, args)


def _cmd_register_patient(dep, actor, args):
    name = args.get("name", actor)
    wallet = dep.register_patient(name)
    return {"name": name, "did": wallet.did}


def _cmd_register_doctor(dep, actor, args):
    name = args.get("name", actor)
    wallet = dep.register_doctor(name, set(args["attrs"]))
    return {"name": name, "did": wallet.did, "attrs": sorted(args["attrs"])}


def _cmd_admit(dep, actor, args):
    patient = dep.agent(args.get("patient", actor))
    hospital = dep.hospital_agent()
    mine, _ = agents.handshake(patient, hospital)
    return {"state": mine.state, "pairwise_did": mine.my_did}


def _cmd_enroll_emergency(dep, actor, args):
    doctor = dep.agent(args.get("doctor", actor))
    server = dep.emergency_agent()
    mine, _ = agents.handshake(doctor, server)
    return {"state": mine.state, "pairwise_did": mine.my_did}


def _cmd_store(dep, actor, args):
    hospital = dep.hospital_agent()
    patient_wallet = dep.wallets.get(args["patient"])
    if patient_wallet is None:
        raise ProtocolViolation(f"no wallet named {args['patient']!r}")
    if "record_text" in args:
        plaintext = args["record_text"].encode("utf-8")
    else:
        plaintext = Path(args["file"]).read_bytes()
    cid, env = agents.store_record(hospital, patient_wallet.did, plaintext)
    return {"cid": cid, "version": env.version}


def _cmd_request_access(dep, actor, args):
    doctor = dep.agent(args.get("doctor", actor))
    hospital = dep.hospital_agent()
    anchor = dep.services.ledger.record_anchor(args["cid"])
    agents.request_access(doctor, hospital, args["cid"], args.get("why", ""))
    patient_wallet = dep.wallet_by_did(anchor.body["patient_did"]) if anchor else None
    if patient_wallet is None or not patient_wallet.consent_requests:
        raise ProtocolViolation("request did not reach the patient")
    request_id = list(patient_wallet.consent_requests)[-1]
    return {"request_id": request_id, "patient": patient_wallet.name}


def _cmd_consent(dep, actor, args):
    patient = dep.agent(args.get("patient", actor))
    request_id = args["request_id"]
    grant = args["decision"] == "grant"
    narrow = set(args["narrow"]) if args.get("narrow") else None
    request = patient.wallet.consent_requests.get(request_id)
    if request is None:
        raise ProtocolViolation(f"no pending consent request {request_id}")
    cid = request["cid"]
    agents.decide_consent(patient, request_id, grant, narrow)
    result = {"decision": "grant" if grant else "deny", "cid": cid}
    if grant:
        result["version"] = dep.services.ledger.current_version(cid)
    return result


def _cmd_grant(dep, actor, args):
    patient = dep.agent(args.get("patient", actor))
    env = agents.grant_access(
        patient, dep.hospital_agent(), args["cid"], set(args["attrs"])
    )
    return {"cid": args["cid"], "version": env.version}


def _cmd_revoke(dep, actor, args):
    patient = dep.agent(args.get("patient", actor))
    env = agents.revoke_access(
        patient, dep.hospital_agent(), args["cid"], set(args["attrs"])
    )
    return {"cid": args["cid"], "version": env.version}


def _cmd_read(dep, actor, args):
    doctor = dep.agent(args.get("doctor", actor))
    plaintext = agents.access_record(doctor, args["cid"])
    result = {"cid": args["cid"], "bytes": len(plaintext), "sha256": sha256_hex(plaintext)}
    if args.get("out"):
        Path(args["out"]).write_bytes(plaintext)
        result["out"] = args["out"]
    return result


def _cmd_emergency(dep, actor, args):
    doctor = dep.agent(args.get("doctor", actor))
    server = dep.emergency_agent()
    if doctor.wallet.channel_with(server.wallet.did) is None:
        agents.handshake(doctor, server)
    env = agents.emergency_access(doctor, server, args["cid"], args["why"])
    return {"cid": args["cid"], "version": env.version}


def _cmd_audit_consent(dep, actor, args):
    rows = audit.consent_report(dep.services.ledger, dep.services.cas, args["cid"])
    return {"cid": args["cid"], "rows": rows}


def _cmd_audit_emergency(dep, actor, args):
    rows = audit.emergency_report(
        dep.services.ledger, cid=args.get("cid"), requester_did=args.get("did")
    )
    return {"rows": rows}


def _cmd_audit_integrity(dep, actor, args):
    server_did = dep.wallets[dep.config["names"]["emergency"]].did
    return audit.integrity_report(dep.services.ledger, dep.services.cas, server_did)


def _cmd_ledger_verify(dep, actor, args):
    ok, first_bad = dep.services.ledger.verify_file(dep.home / "ledger.jsonl")
    return {"ok": ok, "first_bad_height": first_bad}


_HANDLERS = {
    "register-patient": _cmd_register_patient,
    "register-doctor": _cmd_register_doctor,
    "admit": _cmd_admit,
    "enroll-emergency": _cmd_enroll_emergency,
    "store": _cmd_store,
    "request-access": _cmd_request_access,
    "consent": _cmd_consent,
    "grant": _cmd_grant,
    "revoke": _cmd_revoke,
    "read": _cmd_read,
    "emergency": _cmd_emergency,
    "audit-consent": _cmd_audit_consent,
    "audit-emergency": _cmd_audit_emergency,
    "audit-integrity": _cmd_audit_integrity,
    "ledger-verify": _cmd_ledger_verify,
}


# --- scenario runner ---

def _substitute(value, variables: dict):
    if isinstance(value, str) and value.startswith("$"):
        name = value[1:]
        if name not in variables:
            raise ProtocolViolation(f"scenario references unset variable ${name}")
        return variables[name]
    if isinstance(value, list):
        return [_substitute(v, variables) for v in value]
    if isinstance(value, dict):
        return {k: _substitute(v, variables) for k, v in value.items()}
    return value


def run_scenario(dep: Deployment, steps: list[dict]) -> list[dict]:
    """Execute steps in order; stop at the first expectation divergence.

    Each step: {actor, command, args, expect?, capture?}. ``expect`` is
    "ok" (default) or an error class name; ``capture`` maps variable names
    to result keys for later ``$var`` references.
    """
    variables: dict = {}
    transcript_rows = []
    for index, step in enumerate(steps):
        expect = step.get("expect", "ok")
        args = _substitute(step.get("args", {}), variables)
        try:
            result = execute(dep, step.get("actor", ""), step["command"], args)
            outcome = "ok"
        except VaultError as exc:
            result = {"error": type(exc).__name__, "message": str(exc)}
            outcome = type(exc).__name__
        row = {
            "step": index,
            "actor": step.get("actor", ""),
            "command": step["command"],
            "outcome": outcome,
            "result": result,
        }
        transcript_rows.append(row)
        if outcome != expect:
            raise ScenarioDiverged(
                index, expect, outcome, detail=json.dumps(result, sort_keys=True)
            )
        for var, key in step.get("capture", {}).items():
            if key not in result:
                raise ScenarioDiverged(
                    index, f"result key {key!r}", "missing", detail=str(sorted(result))
                )
            variables[var] = result[key]
    return transcript_rows


def load_scenario(path: str | Path) -> list[dict]:
    steps = json.loads(Path(path).read_text())
    if not isinstance(steps, list):
        raise ProtocolViolation("a scenario file must hold a JSON array of steps")
    return steps
