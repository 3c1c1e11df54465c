"""Read-only accountability queries over the ledger and store.

Reports are pure functions of (ledger, cas) state: consent history per
record, emergency accesses, and an integrity sweep that replays the chain
and checks every anchor against the store. Each report renders three ways:
a plain table for terminals, JSON for machines, CSV for spreadsheets, and
(for the time-series ones) a matplotlib timeline saved to file.
"""

from __future__ import annotations

import csv
from pathlib import Path

from .cas import cid_from_digest_hex
from .envelope import KeyEnvelope
from .errors import NotFound
from .ledger import (
    KIND_EMERGENCY_ACCESS,
    KIND_KEY_ANCHOR,
    KIND_RECORD_ANCHOR,
    Ledger,
)
from .policy import policy_to_string


def consent_report(ledger: Ledger, cas, cid: str) -> list[dict]:
    """One row per consent version, policies recovered from the store."""
    rows = []
    for tx in ledger.consent_history(cid):
        envelope_hash = tx.body["envelope_hash"]
        try:
            env_bytes = cas.get(cid_from_digest_hex(envelope_hash))
        except NotFound:
            raise NotFound(
                f"envelope v{tx.body['version']} for {cid} missing from the store "
                f"(anchor-store inconsistency)"
            )
        env = KeyEnvelope.from_bytes(env_bytes)
        rows.append(
            {
                "version": tx.body["version"],
                "timestamp": tx.timestamp,
                "authorized_by": tx.body["authorized_by_did"],
                "policy": policy_to_string(env.policy),
            }
        )
    return rows


def emergency_report(
    ledger: Ledger, cid: str | None = None, requester_did: str | None = None
) -> list[dict]:
    return [
        {
            "cid": tx.body["cid"],
            "requester": tx.body["requester_did"],
            "server": tx.body["server_did"],
            "timestamp": tx.timestamp,
            "justification_hash": tx.body["justification_hash"],
        }
        for tx in ledger.emergency_accesses(cid=cid, requester_did=requester_did)
    ]


def emergency_pairing(ledger: Ledger, server_did: str | None = None) -> list[dict]:
    """Every emergency access must sit directly before its key anchor.

    Returns one finding per unpaired item in either direction; an empty list
    means grants-without-log = 0 and logs-without-grant = 0. Pass the
    emergency server's DID to also catch server-authorized anchors that were
    never logged; without it only logged events are checked.
    """
    findings = []
    anchors = {
        h: tx for h, tx in ledger.iter_transactions() if tx.kind == KIND_KEY_ANCHOR
    }
    paired_anchor_heights = set()
    for height, tx in ledger.iter_transactions():
        if tx.kind != KIND_EMERGENCY_ACCESS:
            continue
        anchor = anchors.get(height + 1)
        if (
            anchor is None
            or anchor.body["cid"] != tx.body["cid"]
            or anchor.body["authorized_by_did"] != tx.body["server_did"]
        ):
            findings.append(
                {"kind": "emergency_without_anchor", "height": height, "cid": tx.body["cid"]}
            )
        else:
            paired_anchor_heights.add(height + 1)
    if server_did is not None:
        for height, tx in anchors.items():
            if (
                tx.body["authorized_by_did"] == server_did
                and height not in paired_anchor_heights
            ):
                findings.append(
                    {
                        "kind": "unlogged_emergency_grant",
                        "height": height,
                        "cid": tx.body["cid"],
                    }
                )
    return findings


def integrity_report(ledger: Ledger, cas, server_did: str | None = None) -> dict:
    """Chain verification plus anchor-store consistency findings."""
    chain_ok, first_bad = ledger.verify_chain()
    findings = []
    for height, tx in ledger.iter_transactions():
        if tx.kind == KIND_KEY_ANCHOR:
            envelope_cid = cid_from_digest_hex(tx.body["envelope_hash"])
            if not cas.has(envelope_cid):
                findings.append(
                    {
                        "kind": "missing_envelope",
                        "height": height,
                        "cid": tx.body["cid"],
                        "version": tx.body["version"],
                        "envelope_hash": tx.body["envelope_hash"],
                    }
                )
                continue
            env = KeyEnvelope.from_bytes(cas.get(envelope_cid))
            if env.cid != tx.body["cid"] or env.version != tx.body["version"]:
                findings.append(
                    {
                        "kind": "envelope_mismatch",
                        "height": height,
                        "cid": tx.body["cid"],
                        "version": tx.body["version"],
                    }
                )
        elif tx.kind == KIND_RECORD_ANCHOR:
            if not cas.has(tx.body["cid"]):
                findings.append(
                    {"kind": "missing_record", "height": height, "cid": tx.body["cid"]}
                )
    findings.extend(emergency_pairing(ledger, server_did=server_did))
    return {
        "chain_ok": chain_ok,
        "first_bad_height": first_bad,
        "findings": findings,
    }


# --- rendering ---

def format_table(rows: list[dict], columns: list[str]) -> str:
    if not rows:
        return "(no rows)"
    widths = {c: max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in columns}
    header = "  ".join(c.ljust(widths[c]) for c in columns)
    rule = "  ".join("-" * widths[c] for c in columns)
    lines = [header, rule]
    for row in rows:
        lines.append("  ".join(str(row.get(c, "")).ljust(widths[c]) for c in columns))
    return "\n".join(lines)


def write_csv(rows: list[dict], columns: list[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def render_consent_timeline(rows: list[dict], path: str | Path, cid: str = "") -> None:
    """Step plot of consent versions over time, annotated with policies."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(9, 3.5))
    times = [r["timestamp"] for r in rows]
    versions = [r["version"] for r in rows]
    ax.step(times, versions, where="post", marker="o")
    for row in rows:
        ax.annotate(
            row["policy"],
            (row["timestamp"], row["version"]),
            textcoords="offset points",
            xytext=(6, 6),
            fontsize=7,
        )
    ax.set_xlabel("time (s since epoch)")
    ax.set_ylabel("consent version")
    ax.set_yticks(versions)
    title = "consent history"
    if cid:
        title += f" for {cid[:23]}…"
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_emergency_events(rows: list[dict], path: str | Path) -> None:
    """Event markers per requester over time."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(9, 3))
    requesters = sorted({r["requester"] for r in rows})
    lanes = {req: i for i, req in enumerate(requesters)}
    for row in rows:
        y = lanes[row["requester"]]
        ax.plot(row["timestamp"], y, "rv", markersize=9)
        ax.annotate(
            row["cid"][:15] + "…",
            (row["timestamp"], y),
            textcoords="offset points",
            xytext=(6, -4),
            fontsize=7,
        )
    ax.set_yticks(list(lanes.values()))
    ax.set_yticklabels([r[:24] for r in requesters], fontsize=7)
    ax.set_xlabel("time (s since epoch)")
    ax.set_title("emergency accesses")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
