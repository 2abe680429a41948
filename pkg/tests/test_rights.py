from __future__ import annotations

import json
import os
import random
from dataclasses import replace

import pytest

from conftest import GOLDEN, ts
from fixtures import chiraz_scenario
from pdguard.audit import AuditLog, read_chain
from pdguard.dbfs import PdRef, _issue_capability, encode_record
from pdguard.envelope import CiphertextEnvelope, generate_authority_keypair
from pdguard.errors import (
    AuditIntegrityError,
    DecryptFailure,
    KeyParseError,
    NoAuthorityKey,
    UnknownRef,
    UnknownSubject,
    UnknownView,
)
from pdguard.pdtype import ALL, Grant
from pdguard.rights import authority_decrypt
from pdguard.system import Runtime

CAP = _issue_capability("rights")
T0 = ts("2024-05-02")
EXPORT_GOLDEN = GOLDEN / "chiraz_export.json"


@pytest.fixture
def scenario(make_runtime):
    rt = make_runtime(seed="golden")
    return rt, chiraz_scenario(rt)


def store_bytes(root) -> bytes:
    return b"".join(p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file())


# -- export -----------------------------------------------------------------

def test_export_matches_golden(scenario, tmp_path):
    rt, refs = scenario
    out = tmp_path / "export.json"
    summary = rt.rights.export_subject("chiraz", out)
    if os.environ.get("PDGUARD_REGEN_GOLDEN"):
        EXPORT_GOLDEN.write_bytes(out.read_bytes())
    assert out.read_bytes() == EXPORT_GOLDEN.read_bytes()
    assert (summary.records, summary.audit_entries) == (1, 3)


def test_export_uses_meaningful_keys(scenario, tmp_path):
    rt, refs = scenario
    out = tmp_path / "export.json"
    rt.rights.export_subject("chiraz", out)
    doc = json.loads(out.read_text("utf-8"))
    (rec,) = doc["records"]
    assert rec["fields"] == {"first_name": "Chiraz", "last_name": "Benamor"}
    assert "Chiraz" not in rec["fields"]
    assert rec["type"] == "person" and rec["ref"] == str(refs["chiraz"])
    # every audit entry naming her ref appears with the record
    assert [e["seq"] for e in rec["audit"]] == [e.seq for e in rt.audit.query(ref=str(refs["chiraz"]))]
    assert {e["kind"] for e in rec["audit"]} == {"collection", "execute", "consent-override"}
    assert "Someone" not in out.read_text("utf-8")


def test_subject_query_is_union_of_ref_queries(scenario):
    rt, refs = scenario
    by_subject = {e.seq for e in rt.audit.query(subject="chiraz")}
    by_ref = {e.seq for e in rt.audit.query(ref=str(refs["chiraz"]))}
    assert by_subject == by_ref


def test_export_of_unknown_subject_is_empty(scenario, tmp_path):
    rt, _ = scenario
    s = rt.rights.export_subject("nobody", tmp_path / "e.json")
    doc = json.loads((tmp_path / "e.json").read_text())
    assert doc["records"] == [] and doc["audit"] == [] and s.records == 0


def test_export_after_invoke_includes_execute_entry(scenario, tmp_path):
    rt, refs = scenario
    rt.ps.ps_invoke("can_greet", now=T0 + 10**5)
    rt.rights.export_subject("chiraz", tmp_path / "e.json")
    doc = json.loads((tmp_path / "e.json").read_text())
    assert sum(e["kind"] == "execute" for e in doc["records"][0]["audit"]) == 2


# -- forget -----------------------------------------------------------------

def test_forget_round_trip(scenario, authority_keys, tmp_path):
    rt, refs = scenario
    ref = refs["chiraz"]
    canonical = encode_record(rt.store.fetch_record(ref, CAP))
    assert rt.rights.forget("chiraz", now=T0 + 10**4) == 1
    blob = store_bytes(rt.root)
    assert b"Chiraz" not in blob and b"Benamor" not in blob
    assert b"Someone" in blob
    env = rt.rights.envelope(ref)
    assert authority_decrypt(env, authority_keys[0]) == canonical
    (entry,) = rt.audit.query(kind="forget")
    assert entry.pd_ref == str(ref) and entry.subject_id == "chiraz"
    # forgetting again is a no-op
    assert rt.rights.forget("chiraz", now=T0) == 0
    assert rt.rights.forget(ref, now=T0) == 0
    # export now lists no record but keeps the erasure in the audit section
    rt.rights.export_subject("chiraz", tmp_path / "after.json")
    doc = json.loads((tmp_path / "after.json").read_text())
    assert doc["records"] == []
    assert "forget" in {e["kind"] for e in doc["audit"]}


def test_forget_counts_copies(make_runtime, authority_keys):
    rt = make_runtime()
    refs = chiraz_scenario(rt)
    copy = rt.ps.copy(refs["chiraz"], now=T0)
    rt.ps.copy(copy, now=T0)
    live = [r for r in rt.store.refs() if rt.store.fetch_record(r, CAP).membrane.subject_id == "chiraz"]
    assert rt.rights.forget("chiraz", now=T0) == len(live) == 3


def test_forget_errors(scenario, authority_keys):
    rt, refs = scenario
    with pytest.raises(UnknownSubject):
        rt.rights.forget("nobody", now=T0)
    with pytest.raises(UnknownRef):
        rt.rights.forget(PdRef("person", "f" * 32), now=T0)
    with pytest.raises(KeyParseError):
        rt.rights.forget("chiraz", b"not a key", now=T0)


def test_forget_without_key(make_runtime, tmp_path):
    with Runtime.init(tmp_path / "nokey", sync=False) as rt:
        chiraz_scenario(rt)
        with pytest.raises(NoAuthorityKey):
            rt.rights.forget("chiraz", now=T0)


def test_wrong_key_and_tampering_are_detected(scenario, authority_keys):
    rt, refs = scenario
    rt.rights.forget(refs["chiraz"], now=T0)
    env = rt.rights.envelope(refs["chiraz"])
    other_private, _ = generate_authority_keypair(2048)
    with pytest.raises(DecryptFailure):
        authority_decrypt(env, other_private)
    rng = random.Random(5)
    for field in ("ciphertext", "nonce", "wrapped_key"):
        raw = bytearray(getattr(env, field))
        raw[rng.randrange(len(raw))] ^= 1 << rng.randrange(8)
        with pytest.raises(DecryptFailure):
            authority_decrypt(replace(env, **{field: bytes(raw)}), authority_keys[0])
    with pytest.raises(DecryptFailure):
        authority_decrypt(replace(env, binding="person:" + "0" * 32), authority_keys[0])
    assert CiphertextEnvelope.from_dict(env.to_dict()) == env


def test_private_key_never_enters_store(scenario, authority_keys):
    rt, _ = scenario
    rt.rights.forget("chiraz", now=T0)
    priv_body = b"".join(authority_keys[0].splitlines()[1:-1])
    assert priv_body[:40] not in store_bytes(rt.root)


# -- consent and sweep --------------------------------------------------------

def test_set_consent_propagates_and_is_audited(scenario):
    rt, refs = scenario
    rt.ps.copy(refs["chiraz"], now=T0)
    assert rt.rights.set_consent(refs["chiraz"], "support", ALL, now=T0) == 2
    overrides = rt.audit.query(kind="consent-override", subject="chiraz")
    assert len(overrides) == 1 + 2  # scenario's marketing change, then both copies
    with pytest.raises(UnknownView):
        rt.rights.set_consent("chiraz", "support", Grant.of_view("v_nope"), now=T0)
    with pytest.raises(UnknownSubject):
        rt.rights.set_consent("nobody", "support", ALL, now=T0)


def test_sweep_writes_audit_entries(scenario):
    rt, refs = scenario
    assert rt.rights.sweep(ts("2026-05-03")) == 2
    assert {e.pd_ref for e in rt.audit.query(kind="sweep")} == {str(r) for r in refs.values()}
    assert rt.rights.sweep(ts("2026-05-03")) == 0


# -- audit log --------------------------------------------------------------

def test_audit_sequence_is_monotone_and_chained(scenario):
    rt, refs = scenario
    rng = random.Random(11)
    for i in range(1000):
        op = rng.random()
        if op < 0.4:
            rt.ps.collect("person", "web_form", [{"subject_id": f"s{i}", "first_name": "a", "last_name": "b"}],
                          now=T0)
        elif op < 0.7:
            rt.rights.set_consent(refs["other"], "support", rng.choice([ALL, Grant.parse("none")]), now=T0)
        else:
            rt.ps.update(refs["other"], {"last_name": f"n{i}"}, now=T0)
    seqs = [e.seq for e in rt.audit.entries]
    assert seqs == list(range(1, len(seqs) + 1))
    assert rt.audit.verify()
    assert not any("n99" in json.dumps(e.to_dict()) for e in rt.audit.entries)


def test_tampered_audit_log_fails_to_open(scenario):
    rt, _ = scenario
    path = rt.audit.path
    rt.close()
    data = bytearray(path.read_bytes())
    i = data.index(b'"kind":"execute"')
    data[i + 9:i + 16] = b"collect"
    path.write_bytes(bytes(data))
    with pytest.raises(AuditIntegrityError):
        read_chain(path)
    with pytest.raises(AuditIntegrityError):
        AuditLog(path)


def test_audit_rejects_unknown_kinds_and_needs_capability(scenario):
    rt, _ = scenario
    with pytest.raises(ValueError):
        rt.audit.append([{"ts": 0, "kind": "bogus", "outcome": "x"}], CAP)
    from pdguard.errors import CapabilityError
    with pytest.raises(CapabilityError):
        rt.audit.append([{"ts": 0, "kind": "forget", "outcome": "x"}], None)


def test_forget_by_ref_erases_the_copy_group(scenario):
    rt, refs = scenario
    first = rt.ps.copy(refs["chiraz"], now=T0)
    second = rt.ps.copy(first, now=T0)
    assert rt.rights.forget(second, now=T0) == 3
    assert {rt.store.state_of(r) for r in (refs["chiraz"], first, second)} == {"tombstoned"}
    assert rt.store.state_of(refs["other"]) == "live"
