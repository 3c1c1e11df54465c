"""Command-line entry point.

One deployment lives in one home directory (``--home``, default ``.`` or
$EHRVAULT_HOME). Actor commands run the whole flow in-process; ``serve``
and ``admit --connect`` demonstrate the same handshake over a framed local
socket between two processes sharing the home directory.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import audit, commands
from .deployment import Deployment
from .errors import IntegrityViolation, VaultError


def _fail(exc: VaultError):
    click.echo(f"error[{type(exc).__name__}]: {exc}", err=True)
    sys.exit(exc.exit_code)


def vault_command(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except VaultError as exc:
            _fail(exc)

    return wrapper


def _load(ctx) -> Deployment:
    return Deployment.load(ctx.obj["home"])


def _run(ctx, actor: str, command: str, args: dict) -> dict:
    dep = _load(ctx)
    result = commands.execute(dep, actor, command, args)
    dep.save()
    return result


def _emit(result: dict) -> None:
    click.echo(json.dumps(result, indent=2, sort_keys=True))


@click.group()
@click.option(
    "--home",
    default=".",
    envvar="EHRVAULT_HOME",
    show_default=True,
    help="Deployment directory.",
)
@click.pass_context
def main(ctx, home):
    """Self-sovereign EHR exchange, desk scale."""
    ctx.ensure_object(dict)
    ctx.obj["home"] = Path(home)


@main.command()
@click.option("--seed", default=None, help="64 hex chars; makes the run reproducible.")
@click.pass_context
@vault_command
def init(ctx, seed):
    """Provision a deployment in the home directory."""
    seed_bytes = bytes.fromhex(seed) if seed else None
    dep = Deployment.provision(ctx.obj["home"], seed_bytes)
    _emit(
        {
            "home": str(dep.home),
            "authority_id": dep.config["authority_id"],
            "hospital_did": dep.wallets["hospital"].did,
            "emergency_did": dep.wallets["emergency"].did,
        }
    )


@main.command("register-patient")
@click.argument("name")
@click.pass_context
@vault_command
def register_patient(ctx, name):
    """Create a patient wallet and register its DID on chain."""
    _emit(_run(ctx, name, "register-patient", {"name": name}))


@main.command("register-doctor")
@click.argument("name")
@click.option("--attrs", "attrs", multiple=True, required=True, help="e.g. dept:cardiology")
@click.pass_context
@vault_command
def register_doctor(ctx, name, attrs):
    """Create a doctor wallet with credential-mirrored ABE attributes."""
    _emit(_run(ctx, name, "register-doctor", {"name": name, "attrs": list(attrs)}))


@main.command()
@click.argument("patient")
@click.option("--connect", default=None, metavar="HOST:PORT", help="Handshake over a socket.")
@click.pass_context
@vault_command
def admit(ctx, patient, connect):
    """Run the mutual-authentication handshake with the hospital."""
    if connect is None:
        _emit(_run(ctx, patient, "admit", {"patient": patient}))
        return
    import socket as socket_mod

    host, _, port = connect.rpartition(":")
    dep = _load(ctx)
    dep.wake_all()
    agent = dep.agent(patient)
    hospital_did = dep.wallets[dep.config["names"]["hospital"]].did
    with socket_mod.create_connection((host or "127.0.0.1", int(port))) as sock:
        channel = _handshake_over_socket(agent, hospital_did, sock)
    dep.save(wallet_names=[patient])
    _emit({"state": channel.state, "pairwise_did": channel.my_did, "via": connect})


@main.command("enroll-emergency")
@click.argument("doctor")
@click.pass_context
@vault_command
def enroll_emergency(ctx, doctor):
    """Authenticate a doctor to the emergency server ahead of need."""
    _emit(_run(ctx, doctor, "enroll-emergency", {"doctor": doctor}))


@main.command()
@click.argument("patient")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
@vault_command
def store(ctx, patient, file):
    """Hospital stores an encrypted record for an admitted patient."""
    _emit(_run(ctx, "hospital", "store", {"patient": patient, "file": file}))


@main.command("request-access")
@click.argument("doctor")
@click.argument("cid")
@click.option("--why", default="", help="Purpose shown to the patient.")
@click.pass_context
@vault_command
def request_access(ctx, doctor, cid, why):
    """Doctor asks for access; the hospital relays to the patient."""
    _emit(_run(ctx, doctor, "request-access", {"doctor": doctor, "cid": cid, "why": why}))


@main.command()
@click.argument("patient")
@click.argument("request_id")
@click.option("--grant/--deny", "grant", required=True)
@click.option("--narrow", multiple=True, help="Grant only these attributes.")
@click.pass_context
@vault_command
def consent(ctx, patient, request_id, grant, narrow):
    """Decide a pending consent request."""
    args = {
        "patient": patient,
        "request_id": request_id,
        "decision": "grant" if grant else "deny",
        "narrow": list(narrow) or None,
    }
    _emit(_run(ctx, patient, "consent", args))


@main.command()
@click.argument("patient")
@click.argument("cid")
@click.option("--attr", "attrs", multiple=True, required=True)
@click.pass_context
@vault_command
def revoke(ctx, patient, cid, attrs):
    """Withdraw attributes from a record's policy (rotates the KEK)."""
    _emit(_run(ctx, patient, "revoke", {"patient": patient, "cid": cid, "attrs": list(attrs)}))


@main.command()
@click.argument("doctor")
@click.argument("cid")
@click.option("-o", "--out", default=None, type=click.Path(dir_okay=False))
@click.pass_context
@vault_command
def read(ctx, doctor, cid, out):
    """Doctor fetches and decrypts a record via the latest envelope."""
    _emit(_run(ctx, doctor, "read", {"doctor": doctor, "cid": cid, "out": out}))


@main.command()
@click.argument("doctor")
@click.argument("cid")
@click.option("--why", required=True, help="Justification; its hash goes on chain.")
@click.pass_context
@vault_command
def emergency(ctx, doctor, cid, why):
    """Emergency override: access without patient consent, always audited."""
    _emit(_run(ctx, doctor, "emergency", {"doctor": doctor, "cid": cid, "why": why}))


# --- audit group ---

@main.group()
def audit_group():
    """Accountability reports."""


audit_group.name = "audit"
main.add_command(audit_group, "audit")


def _report_outputs(rows, columns, json_out, csv_out, fig, render):
    click.echo(audit.format_table(rows, columns))
    if json_out:
        Path(json_out).write_text(json.dumps(rows, indent=2, sort_keys=True))
    if csv_out:
        audit.write_csv(rows, columns, csv_out)
    if fig:
        if rows:
            render(fig)
            click.echo(f"figure written to {fig}")
        else:
            click.echo("no rows; skipping figure", err=True)


@audit_group.command("consent")
@click.argument("cid")
@click.option("--json", "json_out", default=None, type=click.Path(dir_okay=False))
@click.option("--csv", "csv_out", default=None, type=click.Path(dir_okay=False))
@click.option("--fig", default=None, type=click.Path(dir_okay=False))
@click.pass_context
@vault_command
def audit_consent(ctx, cid, json_out, csv_out, fig):
    """Consent history for one record."""
    result = _run(ctx, "auditor", "audit-consent", {"cid": cid})
    rows = result["rows"]
    _report_outputs(
        rows,
        ["version", "timestamp", "authorized_by", "policy"],
        json_out,
        csv_out,
        fig,
        lambda path: audit.render_consent_timeline(rows, path, cid=cid),
    )


@audit_group.command("emergency")
@click.option("--did", default=None, help="Filter by requester DID.")
@click.option("--cid", default=None, help="Filter by record CID.")
@click.option("--json", "json_out", default=None, type=click.Path(dir_okay=False))
@click.option("--csv", "csv_out", default=None, type=click.Path(dir_okay=False))
@click.option("--fig", default=None, type=click.Path(dir_okay=False))
@click.pass_context
@vault_command
def audit_emergency(ctx, did, cid, json_out, csv_out, fig):
    """Emergency access events, optionally filtered."""
    result = _run(ctx, "auditor", "audit-emergency", {"did": did, "cid": cid})
    rows = result["rows"]
    _report_outputs(
        rows,
        ["cid", "requester", "server", "timestamp", "justification_hash"],
        json_out,
        csv_out,
        fig,
        lambda path: audit.render_emergency_events(rows, path),
    )


@audit_group.command("integrity")
@click.option("--json", "json_out", default=None, type=click.Path(dir_okay=False))
@click.pass_context
@vault_command
def audit_integrity(ctx, json_out):
    """Chain verification plus anchor-store consistency."""
    report = _run(ctx, "auditor", "audit-integrity", {})
    click.echo(json.dumps(report, indent=2, sort_keys=True))
    if json_out:
        Path(json_out).write_text(json.dumps(report, indent=2, sort_keys=True))
    if not report["chain_ok"] or report["findings"]:
        sys.exit(IntegrityViolation.exit_code)


# --- ledger group ---

@main.group("ledger")
def ledger_group():
    """Ledger maintenance."""


@ledger_group.command("verify")
@click.pass_context
@vault_command
def ledger_verify(ctx):
    """Replay the persisted chain and recheck every hash and link.

    Reads the block file directly, so it works even when the chain is too
    damaged for the deployment to load.
    """
    from .errors import ProtocolViolation
    from .ledger import Ledger

    chain_file = ctx.obj["home"] / "ledger.jsonl"
    if not chain_file.exists():
        raise ProtocolViolation(f"{ctx.obj['home']} is not an initialized deployment")
    ok, first_bad = Ledger.verify_file(chain_file)
    click.echo(json.dumps({"ok": ok, "first_bad_height": first_bad}, sort_keys=True))
    if not ok:
        sys.exit(IntegrityViolation.exit_code)


@main.command("run-scenario")
@click.argument("script", type=click.Path(exists=True, dir_okay=False))
@click.option("--transcript", "transcript_out", default=None, type=click.Path(dir_okay=False))
@click.pass_context
@vault_command
def run_scenario(ctx, script, transcript_out):
    """Replay a scripted scenario; exits nonzero at the first divergence."""
    dep = _load(ctx)
    steps = commands.load_scenario(script)
    rows = commands.run_scenario(dep, steps)
    dep.save()
    if transcript_out:
        with open(transcript_out, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    for row in rows:
        click.echo(json.dumps(row, sort_keys=True))
    click.echo(f"scenario ok: {len(rows)} steps")


@main.command()
@click.option("--listen", required=True, metavar="HOST:PORT")
@click.option("--connections", default=1, show_default=True, help="Serve N connections, then exit.")
@click.pass_context
@vault_command
def serve(ctx, listen, connections):
    """Host the hospital agent on a framed local socket (handshake demo)."""
    import socket as socket_mod

    from .transport import recv_message, send_message, sign_message, MSG_ERROR

    host, _, port = listen.rpartition(":")
    dep = _load(ctx)
    # Two processes share the home dir here; seeded streams cannot be kept
    # coherent across them, so the server falls back to system randomness.
    from .rng import SystemClock, SystemRng

    dep.services.rng = SystemRng()
    dep.services.clock = SystemClock()
    dep.wake_all()
    hospital = dep.hospital_agent()
    transcript = dep.services.router.transcript
    with socket_mod.socket(socket_mod.AF_INET, socket_mod.SOCK_STREAM) as server_sock:
        server_sock.setsockopt(socket_mod.SOL_SOCKET, socket_mod.SO_REUSEADDR, 1)
        server_sock.bind((host or "127.0.0.1", int(port)))
        server_sock.listen()
        click.echo(f"hospital listening on {listen}", err=True)
        for _ in range(connections):
            conn, _addr = server_sock.accept()
            with conn:
                while True:
                    msg = recv_message(conn)
                    if msg is None:
                        break
                    transcript.append(msg)
                    try:
                        responses = hospital.receive(msg)
                    except VaultError as exc:
                        err = sign_message(
                            hospital.wallet.did,
                            msg.sender,
                            MSG_ERROR,
                            {"error": type(exc).__name__, "message": str(exc)},
                            dep.services.rng.bytes(32),
                            hospital.wallet.keys,
                        )
                        transcript.append(err)
                        send_message(conn, err)
                        break
                    for response in responses:
                        transcript.append(response)
                        send_message(conn, response)
            dep.save(
                wallet_names=[dep.config["names"]["hospital"]], include_shared=False
            )
    click.echo("serve done", err=True)


def _handshake_over_socket(agent, responder_did, sock):
    from .errors import ProtocolViolation, error_by_name
    from .transport import MSG_ERROR, recv_message, send_message
    from .wallet import STATE_ADMITTED

    send_message(sock, agent.begin_handshake(responder_did))
    channel = agent.wallet.channel_with(responder_did)
    while channel.state != STATE_ADMITTED:
        incoming = recv_message(sock)
        if incoming is None:
            raise ProtocolViolation("peer closed the connection mid-handshake")
        if incoming.type == MSG_ERROR:
            cls = error_by_name(incoming.body.get("error", "")) or ProtocolViolation
            raise cls(incoming.body.get("message", "remote error"))
        for response in agent.receive(incoming):
            send_message(sock, response)
    return channel


if __name__ == "__main__":
    main()
