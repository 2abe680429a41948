from __future__ import annotations

import json
import random
import struct
import threading
from dataclasses import replace
from datetime import date

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import counter_ids, ts, user_pdt
from pdguard.dbfs import (
    AccessCapability,
    PdRecord,
    PdRef,
    Selector,
    Store,
    _issue_capability,
    decode_record,
    encode_record,
)
from pdguard.envelope import load_public_key, seal
from pdguard.errors import (
    CapabilityError,
    DuplicateType,
    MissingMembrane,
    NoAuthorityKey,
    NoneView,
    RefTombstoned,
    StoreLocked,
    TypeMismatch,
    UnknownRef,
    UnknownType,
)
from pdguard.membrane import (
    DENY,
    FULL,
    Membrane,
    Permission,
    apply_consent_override,
    check_copy_consistency,
    effective_view,
    is_expired,
    membrane_from_defaults,
)
from pdguard.pdtype import ALL, NONE, Duration, Grant, parse_type_file, validate

CAP = _issue_capability("ded")
T0 = ts("2024-01-01")
(USER,) = [validate(d) for d in parse_type_file(user_pdt())]
CHIRAZ = {"name": "Chiraz", "pwd": "s3cret-pw", "year_of_birthdate": 1990}
MIXED_PDT = """\
type note { fields { body: string, day: date, score: float, ok: bool }; consent { p: all }; sensitivity: low; }
type memo { fields { body: string }; consent { p: all }; sensitivity: medium; }
"""


@pytest.fixture
def store(tmp_path, authority_keys):
    s = Store.init(tmp_path / "db", sync=False, new_id=counter_ids())
    s.create_table(USER)
    s.set_authority_key(authority_keys[1])
    yield s
    s.close()


def insert_user(store, values=CHIRAZ, subject="chiraz", at=T0):
    return store.insert_record(values, membrane_from_defaults(USER, subject, None, at, new_id=store.new_id), CAP)


def store_bytes(root) -> bytes:
    return b"".join(p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file())


# -- catalog ----------------------------------------------------------------

def test_create_table_persists(tmp_path):
    with Store.init(tmp_path / "db", sync=False) as s:
        s.create_table(USER)
        assert "user" in s.catalog
        with pytest.raises(DuplicateType):
            s.create_table(USER)
    with Store.open(tmp_path / "db") as s:
        assert s.decl("user") == USER
        with pytest.raises(UnknownType):
            s.decl("nope")


def test_second_writer_is_locked_out(store):
    with pytest.raises(StoreLocked):
        Store.open(store.root)


# -- capabilities -----------------------------------------------------------

def test_capabilities_cannot_be_forged(store):
    with pytest.raises(CapabilityError):
        AccessCapability("ded")
    with pytest.raises(CapabilityError):
        AccessCapability("ded", object())
    for bogus in (None, "ded", object()):
        with pytest.raises(CapabilityError):
            store.fetch_membranes("user", Selector.all(), bogus)
        with pytest.raises(CapabilityError):
            store.insert_record(CHIRAZ, membrane_from_defaults(USER, "s", None, T0), bogus)


# -- insert -----------------------------------------------------------------

def test_insert_and_fetch(store):
    ref = insert_user(store)
    assert ref.type_name == "user" and len(ref.id) == 32
    assert "Chiraz" not in str(ref)
    rec = store.fetch_record(ref, CAP)
    assert rec.values == CHIRAZ and rec.membrane.subject_id == "chiraz"


def test_insert_rejects_bad_input(store):
    mem = membrane_from_defaults(USER, "s", None, T0)
    with pytest.raises(TypeMismatch):
        store.insert_record({"name": "x", "pwd": "y"}, mem, CAP)
    with pytest.raises(TypeMismatch):
        store.insert_record({**CHIRAZ, "year_of_birthdate": "1990"}, mem, CAP)
    with pytest.raises(TypeMismatch):
        store.insert_record({**CHIRAZ, "salary": 1}, mem, CAP)
    with pytest.raises(TypeMismatch):
        store.insert_record(CHIRAZ, replace(mem, consents={"p": Grant.of_view("v_nope")}), CAP)
    with pytest.raises(MissingMembrane):
        store.insert_record(CHIRAZ, None, CAP)
    with pytest.raises(UnknownType):
        store.insert_record(CHIRAZ, replace(mem, type_name="ghost"), CAP)
    assert store.refs() == []


def test_thousand_inserts_give_distinct_refs(tmp_path):
    with Store.init(tmp_path / "db", sync=False) as s:  # random ids
        s.create_table(USER)
        refs = {insert_user(s, subject=f"s{i}") for i in range(1000)}
        assert len(refs) == 1000
        assert set(s.refs()) == refs


# -- selectors --------------------------------------------------------------

def test_fetch_membranes_selectors(store, authority_keys):
    assert store.fetch_membranes("user", Selector.all(), CAP) == []
    refs = [insert_user(store, subject=s) for s in ("s1", "s1", "s2", "s3")]
    dead = refs[3]
    env = seal(b"x", load_public_key(authority_keys[1]), str(dead))
    store.tombstone_record(dead, env, CAP)
    got = store.fetch_membranes("user", Selector.all(), CAP)
    assert sorted(r for r, _ in got) == sorted(refs[:3])
    assert all(isinstance(m, Membrane) for _, m in got)
    s1 = store.fetch_membranes("user", Selector.of_subject("s1"), CAP)
    assert sorted(r for r, _ in s1) == sorted(refs[:2])
    assert store.fetch_membranes("user", Selector.of_refs([refs[2], dead]), CAP)[0][0] == refs[2]
    with pytest.raises(UnknownRef):
        store.fetch_membranes("user", Selector.of_refs([PdRef("user", "0" * 32)]), CAP)
    with pytest.raises(UnknownType):
        store.fetch_membranes("ghost", Selector.all(), CAP)


# -- projection -------------------------------------------------------------

def test_fetch_fields_for_purpose3(store):
    ref = insert_user(store)
    part = store.fetch_fields(ref, Permission.of_fields({"year_of_birthdate"}), CAP)
    assert dict(part.values) == {"year_of_birthdate": 1990}
    assert part.absent == {"name", "pwd"}
    assert "name" not in part
    assert dict(store.fetch_fields(ref, FULL, CAP).values) == CHIRAZ
    with pytest.raises(NoneView):
        store.fetch_fields(ref, DENY, CAP)


@settings(max_examples=100, deadline=None)
@given(st.sets(st.sampled_from(["name", "pwd", "year_of_birthdate", "extra", "other"]), min_size=1))
def test_projection_is_exact(tmp_path_factory, requested):
    with Store.init(tmp_path_factory.mktemp("proj"), sync=False) as s:
        s.create_table(USER)
        ref = insert_user(s)
        part = s.fetch_fields(ref, Permission.of_fields(requested), CAP)
        declared = set(USER.field_names)
        assert set(part.values) == requested & declared
        assert set(part.absent) == declared - requested
        assert all(part.values[k] == CHIRAZ[k] for k in part.values)


# -- update / copy ----------------------------------------------------------

def test_update_read_your_write(store):
    ref = insert_user(store)
    before = store.fetch_record(ref, CAP).membrane
    store.update_record(ref, {"year_of_birthdate": 1991}, CAP)
    rec = store.fetch_record(ref, CAP)
    assert rec.values["year_of_birthdate"] == 1991 and rec.values["name"] == "Chiraz"
    assert rec.membrane == before
    with pytest.raises(TypeMismatch):
        store.update_record(ref, {"salary": 3}, CAP)


def test_readers_see_whole_snapshots(store):
    (decl,) = parse_type_file("type pair { fields { a: int, b: int }; consent { p: all }; }")
    store.create_table(validate(decl))
    ref = store.insert_record({"a": 0, "b": 0}, membrane_from_defaults(decl, "s", None, T0), CAP)
    stop = threading.Event()
    torn = []

    def reader():
        while not stop.is_set():
            v = store.fetch_record(ref, CAP).values
            if v["a"] != v["b"]:
                torn.append(dict(v))

    threads = [threading.Thread(target=reader) for _ in range(3)]
    for t in threads:
        t.start()
    for i in range(1, 400):
        store.update_record(ref, {"a": i, "b": i}, CAP)
    stop.set()
    for t in threads:
        t.join()
    assert torn == []


def test_copies_share_a_group_and_stay_consistent(store):
    ref = insert_user(store)
    c1 = store.copy_record(ref, CAP)
    c2 = store.copy_record(c1, CAP)
    group = store.fetch_record(ref, CAP).membrane.copy_group
    members = store.copy_group(group, CAP)
    assert {r for r, _ in members} == {ref, c1, c2}
    assert check_copy_consistency([m for _, m in members])
    assert store.fetch_record(c2, CAP).membrane.lineage == (f"copy-of:{ref}", f"copy-of:{c1}")
    assert store.fetch_record(c1, CAP).values == CHIRAZ


def test_consent_override_propagates_to_copies(store):
    ref = insert_user(store)
    copy = store.copy_record(ref, CAP)
    mem = store.fetch_record(ref, CAP).membrane
    assert apply_consent_override(mem, "purpose2", ALL, store, CAP) == 2
    for r in (ref, copy):
        assert effective_view(store.fetch_record(r, CAP).membrane, "purpose2", USER) == FULL
    # same grant again: nothing observable changes
    assert apply_consent_override(mem, "purpose2", ALL, store, CAP) == 2
    assert store.fetch_record(copy, CAP).membrane.consents["purpose2"] == ALL
    apply_consent_override(mem, "purpose1", NONE, store, CAP)
    assert effective_view(store.fetch_record(ref, CAP).membrane, "purpose1", USER) == DENY
    assert store.scan_violations() == []


# -- tombstones and sweep ---------------------------------------------------

def test_tombstone_scrubs_every_version(store, authority_keys):
    ref = insert_user(store)
    store.update_record(ref, {"pwd": "older-secret"}, CAP)
    keep = insert_user(store, {"name": "Bob", "pwd": "bobs-pw", "year_of_birthdate": 1970}, "bob")
    rec = store.fetch_record(ref, CAP)
    env = seal(encode_record(rec), load_public_key(authority_keys[1]), str(ref))
    store.tombstone_record(ref, env, CAP)
    blob = store_bytes(store.root)
    for secret in (b"Chiraz", b"s3cret-pw", b"older-secret"):
        assert secret not in blob
    assert b"Bob" in blob
    assert store.state_of(ref) == "tombstoned"
    assert store.envelope(ref) == env
    with pytest.raises(RefTombstoned):
        store.tombstone_record(ref, env, CAP)
    with pytest.raises(RefTombstoned):
        store.fetch_record(ref, CAP)
    assert store.fetch_record(keep, CAP).values["name"] == "Bob"
    store.close()
    with Store.open(store.root) as again:
        assert again.state_of(ref) == "tombstoned"
        assert again.fetch_record(keep, CAP).values["pwd"] == "bobs-pw"
        assert again.scan_violations() == []


def test_sweep_counts_match_brute_force(store):
    rng = random.Random(7)
    for i in range(40):
        mem = membrane_from_defaults(USER, f"s{i}", None, T0 + rng.randrange(0, 800) * 86400)
        mem = replace(mem, ttl=Duration(rng.randint(1, 24), rng.choice("DMY")))
        store.insert_record({**CHIRAZ, "name": f"n{i}"}, mem, CAP)
    now = T0 + 400 * 86400
    expected = sum(is_expired(m, now) for _, m in store.fetch_membranes("user", Selector.all(), CAP))
    seen = []
    assert store.sweep_expired(now, CAP, lambda r, m: seen.append(r)) == expected
    assert len(seen) == expected
    assert store.sweep_expired(now, CAP) == 0
    assert all(not is_expired(m, now) for _, m in store.fetch_membranes("user", Selector.all(), CAP))


def test_sweep_single_record(store):
    insert_user(store)
    assert store.sweep_expired(T0 + 2 * 366 * 86400, CAP) == 1


def test_sweep_needs_authority_key(tmp_path):
    with Store.init(tmp_path / "db", sync=False) as s:
        s.create_table(USER)
        with pytest.raises(NoAuthorityKey):
            s.sweep_expired(T0, CAP)


# -- layout -----------------------------------------------------------------

def test_sensitivity_levels_use_disjoint_segments(store):
    for d in parse_type_file(MIXED_PDT):
        store.create_table(validate(d))
    note, memo = store.decl("note"), store.decl("memo")
    store.insert_record({"body": "LOWLOW", "day": "2024-05-01", "score": 1.5, "ok": True},
                        membrane_from_defaults(note, "s", None, T0), CAP)
    store.insert_record({"body": "MEDMED"}, membrane_from_defaults(memo, "s", None, T0), CAP)
    insert_user(store)
    seg = store.root / "segments"
    content = {s: b"".join(p.read_bytes() for p in (seg / s).glob("*.seg")) for s in ("low", "medium", "high")}
    assert b"LOWLOW" in content["low"] and b"LOWLOW" not in content["medium"] + content["high"]
    assert b"MEDMED" in content["medium"] and b"MEDMED" not in content["low"] + content["high"]
    assert b"Chiraz" in content["high"] and b"Chiraz" not in content["low"] + content["medium"]


def test_torn_tail_is_dropped_on_open(store):
    ref = insert_user(store)
    path = store.root / "segments" / "high" / "0.seg"
    store.close()
    good = path.read_bytes()
    path.write_bytes(good + struct.pack("<I", 500) + b'{"partial')
    with Store.open(store.root) as s:
        assert s.fetch_record(ref, CAP).values == CHIRAZ
    assert path.read_bytes() == good


def test_segments_rotate(tmp_path, monkeypatch):
    import pdguard.dbfs as dbfs
    monkeypatch.setattr(dbfs, "SEGMENT_LIMIT", 2000)
    with Store.init(tmp_path / "db", sync=False) as s:
        s.create_table(USER)
        refs = [insert_user(s, subject=f"s{i}") for i in range(30)]
    assert len(list((tmp_path / "db" / "segments" / "high").glob("*.seg"))) > 3
    with Store.open(tmp_path / "db") as s:
        assert sorted(s.refs()) == sorted(refs)


GOLDEN_RECORD = (
    b'{"membrane":{"collected_at":1704067200,"consents":{"purpose1":"all","purpose2":"none",'
    b'"purpose3":"view:v_ano"},"copy_group":"g1","lineage":[],"origin":"subject","sensitivity":"high",'
    b'"subject_id":"chiraz","ttl":"1Y","type_name":"user"},"ref":"user:000000000000000000000000000000ab",'
    b'"state":"live","type":"user","values":{"name":"Chiraz","pwd":"s3cret-pw","year_of_birthdate":1990}}'
)


def test_record_encoding_is_frozen():
    mem = membrane_from_defaults(USER, "chiraz", None, T0, new_id=lambda: "g1")
    rec = PdRecord(PdRef("user", "0" * 30 + "ab"), CHIRAZ, mem)
    assert encode_record(rec) == GOLDEN_RECORD
    assert decode_record(GOLDEN_RECORD, {"user": USER}) == rec


def test_segment_frame_layout(store):
    insert_user(store)
    data = (store.root / "segments" / "high" / "0.seg").read_bytes()
    (length,) = struct.unpack_from("<I", data)
    assert len(data) == 4 + length
    obj = json.loads(data[4:])
    assert obj["values"] == CHIRAZ and obj["state"] == "live"


def test_dates_round_trip(store):
    for d in parse_type_file(MIXED_PDT):
        store.create_table(validate(d))
    note = store.decl("note")
    ref = store.insert_record({"body": "b", "day": "2024-05-01", "score": 2, "ok": False},
                              membrane_from_defaults(note, "s", None, T0), CAP)
    store.close()
    with Store.open(store.root) as s:
        assert s.fetch_record(ref, CAP).values == {"body": "b", "day": date(2024, 5, 1), "score": 2.0, "ok": False}
