"""The personal-data store: one table per declared type, membrane-wrapped records.

On-disk layout under the store root::

    manifest                     catalog + segment index (canonical JSON)
    segments/<sensitivity>/<n>.seg
    authority.pub                optional; the authority's public key (PEM)
    audit.log                    owned by pdguard.audit
    processings.json             owned by pdguard.ps
    lock

A segment is a sequence of frames: a 4-byte little-endian length followed by
one canonical record encoding (see ``encode_record`` and docs/FORMAT.md).
Every mutation appends the record's new version; the newest frame for an id
wins on replay. Superseded frames linger until compaction, which runs on
every tombstone so that erased plaintext never survives on disk.

Every operation that touches field values or membranes takes an
``AccessCapability``; only the execution domain and the rights component
can mint one.
"""

from __future__ import annotations

import fcntl
import json
import math
import os
import secrets
import struct
import threading
from dataclasses import dataclass, replace
from datetime import date
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Iterable, Iterator, Mapping, Sequence, Union

from . import envelope as _envelope
from .envelope import CiphertextEnvelope
from .errors import (
    CapabilityError,
    DuplicateType,
    MissingMembrane,
    NoAuthorityKey,
    NoneView,
    RefTombstoned,
    StoreCorrupt,
    StoreLocked,
    TypeMismatch,
    UnknownRef,
    UnknownType,
)
from .membrane import Membrane, Permission, check_copy_consistency, check_membrane, is_expired, with_consent
from .pdtype import SENSITIVITIES, Grant, TypeDecl, canonical_print, parse_type_file, validate

Scalar = Union[str, int, float, bool, date]
FieldValues = dict[str, Scalar]

MANIFEST_FORMAT = "pdguard-store/1"
SEGMENT_LIMIT = 1 << 20
_FRAME = struct.Struct("<I")
_INT_MIN, _INT_MAX = -(1 << 63), (1 << 63) - 1


@dataclass(frozen=True, order=True)
class PdRef:
    """Opaque handle to a stored record. Carries no field values."""

    type_name: str
    id: str

    def __str__(self) -> str:
        return f"{self.type_name}:{self.id}"

    @classmethod
    def parse(cls, text: str) -> PdRef:
        type_name, sep, rid = text.partition(":")
        if not sep or not type_name or len(rid) != 32:
            raise UnknownRef(f"malformed ref {text!r}")
        try:
            int(rid, 16)
        except ValueError:
            raise UnknownRef(f"malformed ref {text!r}") from None
        return cls(type_name, rid)


@dataclass(frozen=True)
class Selector:
    kind: str  # all | refs | subject
    refs: tuple[PdRef, ...] = ()
    subject: str | None = None

    @classmethod
    def all(cls) -> Selector:
        return cls("all")

    @classmethod
    def of_refs(cls, refs: Iterable[PdRef]) -> Selector:
        return cls("refs", refs=tuple(refs))

    @classmethod
    def of_subject(cls, subject: str) -> Selector:
        return cls("subject", subject=subject)

    def __str__(self) -> str:
        if self.kind == "refs":
            return "refs(" + ",".join(map(str, self.refs)) + ")"
        if self.kind == "subject":
            return f"subject({self.subject})"
        return "all"


_SEAL = object()


class AccessCapability:
    """Token required by every store operation that touches PD."""

    __slots__ = ("holder",)

    def __init__(self, holder: str, seal: object = None):
        if seal is not _SEAL:
            raise CapabilityError("access capabilities are issued by trusted components only")
        if holder not in ("ded", "rights"):
            raise CapabilityError(f"unknown capability holder {holder!r}")
        self.holder = holder

    def __repr__(self) -> str:
        return f"<AccessCapability {self.holder}>"


def _issue_capability(holder: str) -> AccessCapability:
    return AccessCapability(holder, _SEAL)


def _check(cap: object) -> None:
    if not isinstance(cap, AccessCapability):
        raise CapabilityError("operation requires an AccessCapability")


@dataclass(frozen=True)
class PdRecord:
    ref: PdRef
    values: Mapping[str, Scalar] | None
    membrane: Membrane | None
    state: str = "live"
    envelope: CiphertextEnvelope | None = None

    @property
    def type_name(self) -> str:
        return self.ref.type_name

    @property
    def live(self) -> bool:
        return self.state == "live"


@dataclass(frozen=True)
class PartialRecord:
    """Field values visible under one permission; withheld fields are listed in ``absent``."""

    ref: PdRef
    values: Mapping[str, Scalar]
    absent: frozenset[str]

    def __contains__(self, name: object) -> bool:
        return name in self.values

    def __getitem__(self, name: str) -> Scalar:
        return self.values[name]


# -- values and canonical encoding ------------------------------------------

def coerce_value(decl: TypeDecl, name: str, value: object) -> Scalar:
    try:
        ftype = decl.field_type(name)
    except Exception:
        raise TypeMismatch(f"{decl.name}: undeclared field {name!r}") from None
    ok = False
    if ftype == "string":
        ok = isinstance(value, str)
    elif ftype == "int":
        ok = isinstance(value, int) and not isinstance(value, bool) and _INT_MIN <= value <= _INT_MAX
    elif ftype == "float":
        if isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        ok = isinstance(value, float) and math.isfinite(value)
    elif ftype == "bool":
        ok = isinstance(value, bool)
    elif ftype == "date":
        if isinstance(value, str):
            try:
                value = date.fromisoformat(value)
            except ValueError:
                pass
        ok = isinstance(value, date)
    if not ok:
        raise TypeMismatch(f"{decl.name}.{name}: expected {ftype}, got {value!r}")
    return value


def coerce_values(decl: TypeDecl, values: Mapping[str, object], *, complete: bool = True) -> FieldValues:
    out = {name: coerce_value(decl, name, v) for name, v in values.items()}
    if complete:
        missing = [f for f in decl.field_names if f not in out]
        if missing:
            raise TypeMismatch(f"{decl.name}: missing field(s) {', '.join(missing)}")
    return out


def _encode_scalar(v: Scalar) -> object:
    return v.isoformat() if isinstance(v, date) else v


def canonical_json(obj: object) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False).encode("utf-8")


def encode_record(rec: PdRecord) -> bytes:
    if rec.live:
        obj = {
            "membrane": rec.membrane.to_dict(),
            "ref": str(rec.ref),
            "state": "live",
            "type": rec.type_name,
            "values": {k: _encode_scalar(v) for k, v in rec.values.items()},
        }
    else:
        obj = {
            "envelope": rec.envelope.to_dict(),
            "ref": str(rec.ref),
            "state": "tombstoned",
            "type": rec.type_name,
        }
    return canonical_json(obj)


def decode_record(data: bytes, catalog: Mapping[str, TypeDecl]) -> PdRecord:
    try:
        obj = json.loads(data.decode("utf-8"))
        ref = PdRef.parse(obj["ref"])
        if obj["type"] != ref.type_name:
            raise StoreCorrupt(f"{ref}: type field disagrees with ref")
        if obj["state"] == "tombstoned":
            return PdRecord(ref, None, None, "tombstoned", CiphertextEnvelope.from_dict(obj["envelope"]))
        decl = catalog.get(ref.type_name)
        if decl is None:
            raise StoreCorrupt(f"{ref}: type not in catalog")
        values = {k: (date.fromisoformat(v) if decl.field_type(k) == "date" else v)
                  for k, v in obj["values"].items()}
        membrane = Membrane.from_dict(obj["membrane"]) if obj.get("membrane") is not None else None
        return PdRecord(ref, values, membrane, "live")
    except StoreCorrupt:
        raise
    except (KeyError, ValueError, TypeError, UnknownRef) as exc:
        raise StoreCorrupt(f"undecodable record frame: {exc}") from None


def iter_frames(data: bytes) -> Iterator[tuple[int, bytes]]:
    """Yield ``(offset, payload)``; stops silently at a torn trailing frame."""
    pos = 0
    while pos + _FRAME.size <= len(data):
        (length,) = _FRAME.unpack_from(data, pos)
        end = pos + _FRAME.size + length
        if end > len(data):
            return
        yield pos, data[pos + _FRAME.size:end]
        pos = end


def _frame(payload: bytes) -> bytes:
    return _FRAME.pack(len(payload)) + payload


def _fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def _atomic_write(path: Path, data: bytes, sync: bool) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        if sync:
            os.fsync(fh.fileno())
    os.chmod(tmp, 0o600)
    os.replace(tmp, path)
    if sync:
        _fsync_dir(path.parent)


# -- the store --------------------------------------------------------------

class Store:
    """File-backed PD store. Single writer, snapshot readers."""

    def __init__(self, root: Path, *, sync: bool, new_id: Callable[[], str]):
        self.root = Path(root)
        self.sync = sync
        self._new_id = new_id
        self._lock = threading.RLock()
        self._catalog: dict[str, TypeDecl] = {}
        self._segments: dict[str, list[int]] = {s: [] for s in SENSITIVITIES}
        self._records: dict[str, PdRecord] = {}
        self._loc: dict[str, tuple[str, int, int]] = {}
        self._versions: dict[str, set[tuple[str, int]]] = {}
        self._groups: dict[str, dict[str, None]] = {}
        self._handles: dict[str, object] = {}
        self._lockfile = None
        self._closed = False

    def new_id(self) -> str:
        """A fresh identifier from the store's generator (record and copy-group ids)."""
        return self._new_id()

    # lifecycle

    @classmethod
    def init(cls, root: str | os.PathLike, **kwargs) -> Store:
        root = Path(root)
        if (root / "manifest").exists():
            raise StoreCorrupt(f"{root} already holds a store")
        root.mkdir(parents=True, exist_ok=True, mode=0o700)
        for s in SENSITIVITIES:
            (root / "segments" / s).mkdir(parents=True, exist_ok=True, mode=0o700)
        store = cls(root, sync=kwargs.get("sync", True), new_id=kwargs.get("new_id") or _random_id)
        store._acquire_lock()
        store._write_manifest()
        return store

    @classmethod
    def open(cls, root: str | os.PathLike, *, create: bool = False, sync: bool = True,
             new_id: Callable[[], str] | None = None) -> Store:
        root = Path(root)
        if not (root / "manifest").exists():
            if create:
                return cls.init(root, sync=sync, new_id=new_id)
            raise StoreCorrupt(f"no store at {root} (run init first)")
        store = cls(root, sync=sync, new_id=new_id or _random_id)
        store._acquire_lock()
        try:
            store._load()
        except BaseException:
            store.close()
            raise
        return store

    def _acquire_lock(self) -> None:
        fh = open(self.root / "lock", "a+")
        try:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            fh.close()
            raise StoreLocked(f"{self.root} is in use by another writer") from None
        self._lockfile = fh

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            for fh in self._handles.values():
                fh.close()
            self._handles.clear()
            if self._lockfile is not None:
                fcntl.flock(self._lockfile.fileno(), fcntl.LOCK_UN)
                self._lockfile.close()
                self._lockfile = None
            self._closed = True

    def __enter__(self) -> Store:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _load(self) -> None:
        try:
            manifest = json.loads((self.root / "manifest").read_text("utf-8"))
        except ValueError as exc:
            raise StoreCorrupt(f"bad manifest: {exc}") from None
        if manifest.get("format") != MANIFEST_FORMAT:
            raise StoreCorrupt(f"unsupported store format {manifest.get('format')!r}")
        for name, text in sorted(manifest["types"].items()):
            (decl,) = parse_type_file(text)
            self._catalog[name] = validate(decl)
        self._segments = {s: list(manifest["segments"].get(s, [])) for s in SENSITIVITIES}
        for sens in SENSITIVITIES:
            for n in self._segments[sens]:
                path = self._segment_path(sens, n)
                data = path.read_bytes() if path.exists() else b""
                end = 0
                for offset, payload in iter_frames(data):
                    rec = decode_record(payload, self._catalog)
                    self._place(rec, sens, n, offset)
                    end = offset + _FRAME.size + len(payload)
                if end < len(data):
                    with open(path, "r+b") as fh:  # drop a torn trailing frame
                        fh.truncate(end)
        for rid, rec in self._records.items():
            if rec.live:
                self._groups.setdefault(rec.membrane.copy_group, {})[rid] = None

    def _place(self, rec: PdRecord, sens: str, n: int, offset: int) -> None:
        rid = rec.ref.id
        self._records[rid] = rec
        self._loc[rid] = (sens, n, offset)
        self._versions.setdefault(rid, set()).add((sens, n))

    def _write_manifest(self) -> None:
        manifest = {
            "format": MANIFEST_FORMAT,
            "segments": {s: self._segments[s] for s in SENSITIVITIES},
            "types": {name: canonical_print(d) for name, d in sorted(self._catalog.items())},
        }
        _atomic_write(self.root / "manifest", json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8") + b"\n",
                      self.sync)

    def _segment_path(self, sens: str, n: int) -> Path:
        return self.root / "segments" / sens / f"{n}.seg"

    def _ensure_open(self) -> None:
        if self._closed:
            raise StoreCorrupt("store is closed")

    # catalog

    @property
    def catalog(self) -> Mapping[str, TypeDecl]:
        return MappingProxyType(self._catalog)

    def decl(self, type_name: str) -> TypeDecl:
        try:
            return self._catalog[type_name]
        except KeyError:
            raise UnknownType(type_name) from None

    def create_table(self, decl: TypeDecl) -> None:
        with self._lock:
            self._ensure_open()
            if decl.name in self._catalog:
                raise DuplicateType(decl.name)
            if not decl.validated:
                decl = validate(decl, self._catalog)
            self._catalog[decl.name] = decl
            self._write_manifest()

    # authority key

    @property
    def authority_public_key(self) -> bytes | None:
        path = self.root / "authority.pub"
        return path.read_bytes() if path.exists() else None

    def set_authority_key(self, public_pem: bytes) -> None:
        _envelope.load_public_key(public_pem)
        _atomic_write(self.root / "authority.pub", public_pem, self.sync)

    # appends

    def _append(self, rec: PdRecord, sens: str) -> None:
        payload = encode_record(rec)
        if not self._segments[sens]:
            self._segments[sens].append(0)
            self._write_manifest()
        n = self._segments[sens][-1]
        fh = self._handles.get(sens)
        if fh is None or fh.name != str(self._segment_path(sens, n)):
            if fh is not None:
                fh.close()
            fh = open(self._segment_path(sens, n), "ab")
            os.chmod(fh.name, 0o600)
            self._handles[sens] = fh
        offset = fh.tell()
        if offset and offset + len(payload) > SEGMENT_LIMIT:
            fh.close()
            n += 1
            self._segments[sens].append(n)
            self._write_manifest()
            fh = open(self._segment_path(sens, n), "ab")
            os.chmod(fh.name, 0o600)
            self._handles[sens] = fh
            offset = 0
        fh.write(_frame(payload))
        fh.flush()
        if self.sync:
            os.fsync(fh.fileno())
        records = dict(self._records)
        records[rec.ref.id] = rec
        self._records = records  # readers hold the old dict as their snapshot
        self._loc[rec.ref.id] = (sens, n, offset)
        self._versions.setdefault(rec.ref.id, set()).add((sens, n))

    def _live(self, ref: PdRef, records: Mapping[str, PdRecord] | None = None) -> PdRecord:
        rec = (records if records is not None else self._records).get(ref.id)
        if rec is None or rec.ref != ref:
            raise UnknownRef(str(ref))
        if not rec.live:
            raise RefTombstoned(str(ref))
        return rec

    # record operations

    def insert_record(self, values: Mapping[str, object], membrane: Membrane | None,
                      cap: AccessCapability) -> PdRef:
        _check(cap)
        if membrane is None:
            raise MissingMembrane("every stored record needs a membrane")
        with self._lock:
            self._ensure_open()
            decl = self.decl(membrane.type_name)
            problems = check_membrane(membrane, decl)
            if problems:
                raise TypeMismatch(f"invalid membrane: {'; '.join(problems)}")
            clean = coerce_values(decl, values)
            rid = self._new_id()
            assert rid not in self._records, "record id collision"
            ref = PdRef(decl.name, rid)
            self._append(PdRecord(ref, clean, membrane), membrane.sensitivity)
            self._groups.setdefault(membrane.copy_group, {})[rid] = None
            return ref

    def _select(self, type_name: str, selector: Selector,
                records: Mapping[str, PdRecord]) -> list[PdRecord]:
        if selector.kind == "refs":
            out = []
            for ref in selector.refs:
                if ref.type_name != type_name:
                    raise UnknownType(f"{ref} is not a {type_name} record")
                rec = records.get(ref.id)
                if rec is None or rec.ref != ref:
                    raise UnknownRef(str(ref))
                if rec.live:
                    out.append(rec)
            return out
        out = [r for r in records.values() if r.live and r.ref.type_name == type_name]
        if selector.kind == "subject":
            out = [r for r in out if r.membrane.subject_id == selector.subject]
        return out

    def fetch_membranes(self, type_name: str, selector: Selector,
                        cap: AccessCapability) -> list[tuple[PdRef, Membrane]]:
        _check(cap)
        records = self._records
        self.decl(type_name)
        return [(r.ref, r.membrane) for r in self._select(type_name, selector, records)]

    def fetch_fields(self, ref: PdRef, allowed: Permission, cap: AccessCapability) -> PartialRecord:
        _check(cap)
        if allowed.kind == "none":
            raise NoneView(f"{ref}: fetching with permission none")
        rec = self._live(ref, self._records)
        decl = self.decl(ref.type_name)
        visible = allowed.visible(decl)
        return PartialRecord(
            ref,
            {f: rec.values[f] for f in visible},
            frozenset(decl.field_names) - set(visible),
        )

    def fetch_record(self, ref: PdRef, cap: AccessCapability) -> PdRecord:
        _check(cap)
        return self._live(ref, self._records)

    def records_of_subject(self, subject_id: str, cap: AccessCapability) -> list[PdRecord]:
        _check(cap)
        return [r for r in self._records.values() if r.live and r.membrane.subject_id == subject_id]

    def update_record(self, ref: PdRef, values: Mapping[str, object], cap: AccessCapability) -> None:
        _check(cap)
        with self._lock:
            self._ensure_open()
            rec = self._live(ref)
            clean = coerce_values(self.decl(ref.type_name), values, complete=False)
            merged = dict(rec.values)
            merged.update(clean)
            self._append(replace(rec, values=merged), rec.membrane.sensitivity)

    def copy_record(self, ref: PdRef, cap: AccessCapability) -> PdRef:
        _check(cap)
        with self._lock:
            self._ensure_open()
            rec = self._live(ref)
            rid = self._new_id()
            assert rid not in self._records, "record id collision"
            new_ref = PdRef(ref.type_name, rid)
            membrane = replace(rec.membrane, lineage=rec.membrane.lineage + (f"copy-of:{ref}",))
            self._append(PdRecord(new_ref, dict(rec.values), membrane), membrane.sensitivity)
            self._groups.setdefault(membrane.copy_group, {})[rid] = None
            return new_ref

    def copy_group(self, copy_group: str, cap: AccessCapability) -> list[tuple[PdRef, Membrane]]:
        _check(cap)
        records = self._records
        ids = list(self._groups.get(copy_group, ()))
        return [(records[i].ref, records[i].membrane) for i in ids if i in records and records[i].live]

    def set_group_consent(self, type_name: str, copy_group: str, purpose: str, grant: Grant,
                          cap: AccessCapability) -> int:
        _check(cap)
        with self._lock:
            self._ensure_open()
            count = 0
            for rid in list(self._groups.get(copy_group, ())):
                rec = self._records[rid]
                if not rec.live or rec.type_name != type_name:
                    continue
                self._append(replace(rec, membrane=with_consent(rec.membrane, purpose, grant)),
                             rec.membrane.sensitivity)
                count += 1
            return count

    def tombstone_record(self, ref: PdRef, envelope: CiphertextEnvelope, cap: AccessCapability) -> None:
        self.tombstone_records([(ref, envelope)], cap)

    def tombstone_records(self, items: Sequence[tuple[PdRef, CiphertextEnvelope]],
                          cap: AccessCapability) -> None:
        """Replace records by ciphertext-only tombstones, then compact every
        segment that ever held a version of them."""
        _check(cap)
        with self._lock:
            self._ensure_open()
            recs = [self._live(ref) for ref, _ in items]
            touched: set[tuple[str, int]] = set()
            for rec, (ref, env) in zip(recs, items):
                sens = rec.membrane.sensitivity
                self._append(PdRecord(ref, None, None, "tombstoned", env), sens)
                group = self._groups.get(rec.membrane.copy_group)
                if group is not None:
                    group.pop(ref.id, None)
                    if not group:
                        del self._groups[rec.membrane.copy_group]
                touched |= self._versions[ref.id]
            for sens, n in sorted(touched):
                self._compact_segment(sens, n)

    def envelope(self, ref: PdRef) -> CiphertextEnvelope:
        rec = self._records.get(ref.id)
        if rec is None or rec.ref != ref:
            raise UnknownRef(str(ref))
        if rec.live:
            raise UnknownRef(f"{ref} has not been erased")
        return rec.envelope

    def state_of(self, ref: PdRef) -> str:
        rec = self._records.get(ref.id)
        if rec is None or rec.ref != ref:
            raise UnknownRef(str(ref))
        return rec.state

    def refs(self, type_name: str | None = None, *, include_tombstoned: bool = False) -> list[PdRef]:
        return [r.ref for r in self._records.values()
                if (include_tombstoned or r.live) and (type_name is None or r.type_name == type_name)]

    def sweep_expired(self, now: int, cap: AccessCapability,
                      on_erase: Callable[[PdRef, Membrane], None] | None = None) -> int:
        """Crypto-erase every live record whose lifetime has run out."""
        _check(cap)
        pem = self.authority_public_key
        if pem is None:
            raise NoAuthorityKey("configure the authority public key before sweeping")
        public_key = _envelope.load_public_key(pem)
        with self._lock:
            self._ensure_open()
            expired = [r for r in self._records.values() if r.live and is_expired(r.membrane, now)]
            items = [(r.ref, _envelope.seal(encode_record(r), public_key, str(r.ref))) for r in expired]
            if items:
                self.tombstone_records(items, cap)
            if on_erase is not None:
                for r in expired:
                    on_erase(r.ref, r.membrane)
            return len(items)

    # compaction

    def compact(self, sensitivity: str | None = None) -> None:
        with self._lock:
            self._ensure_open()
            for sens in [sensitivity] if sensitivity else SENSITIVITIES:
                for n in list(self._segments[sens]):
                    self._compact_segment(sens, n)

    def _compact_segment(self, sens: str, n: int) -> None:
        path = self._segment_path(sens, n)
        active = self._segments[sens] and self._segments[sens][-1] == n
        fh = self._handles.get(sens)
        if fh is not None and fh.name == str(path):
            fh.close()
            del self._handles[sens]
        data = path.read_bytes() if path.exists() else b""
        kept: list[tuple[str, bytes]] = []
        present: set[str] = set()
        for offset, payload in iter_frames(data):
            rid = json.loads(payload)["ref"].partition(":")[2]
            present.add(rid)
            if self._loc.get(rid) == (sens, n, offset):
                kept.append((rid, payload))
        out = bytearray()
        new_loc = {}
        for rid, payload in kept:
            new_loc[rid] = len(out)
            out += _frame(payload)
        if not kept and not active:
            self._scrub(path)
            path.unlink(missing_ok=True)
            self._segments[sens].remove(n)
            self._write_manifest()
        else:
            tmp = path.with_name(path.name + ".tmp")
            with open(tmp, "wb") as out_fh:
                out_fh.write(out)
                out_fh.flush()
                os.fsync(out_fh.fileno())
            os.chmod(tmp, 0o600)
            self._scrub(path)
            os.replace(tmp, path)
            _fsync_dir(path.parent)
        for rid in present:
            if rid in new_loc:
                self._loc[rid] = (sens, n, new_loc[rid])
            else:
                self._versions[rid].discard((sens, n))

    @staticmethod
    def _scrub(path: Path) -> None:
        if not path.exists():
            return
        size = path.stat().st_size
        with open(path, "r+b") as fh:
            fh.write(b"\0" * size)
            fh.flush()
            os.fsync(fh.fileno())

    # verification

    def scan_violations(self) -> list[str]:
        """Re-read every segment from disk and report records that break the
        membrane invariants or copy-group consistency. Empty means clean."""
        with self._lock:
            latest: dict[str, PdRecord] = {}
            problems = []
            for sens in SENSITIVITIES:
                for n in self._segments[sens]:
                    path = self._segment_path(sens, n)
                    if not path.exists():
                        problems.append(f"missing segment {path}")
                        continue
                    for _, payload in iter_frames(path.read_bytes()):
                        try:
                            rec = decode_record(payload, self._catalog)
                        except StoreCorrupt as exc:
                            problems.append(str(exc))
                            continue
                        latest[rec.ref.id] = rec
                        if rec.live and rec.membrane is not None and rec.membrane.sensitivity != sens:
                            problems.append(f"{rec.ref}: {rec.membrane.sensitivity} record in {sens} segment")
            groups: dict[str, list[Membrane]] = {}
            for rec in latest.values():
                if not rec.live:
                    if rec.envelope is None or rec.values is not None:
                        problems.append(f"{rec.ref}: malformed tombstone")
                    continue
                if rec.membrane is None:
                    problems.append(f"{rec.ref}: live record without membrane")
                    continue
                decl = self._catalog.get(rec.type_name)
                if decl is None:
                    problems.append(f"{rec.ref}: unknown type")
                    continue
                problems += [f"{rec.ref}: {p}" for p in check_membrane(rec.membrane, decl)]
                try:
                    coerce_values(decl, rec.values)
                except TypeMismatch as exc:
                    problems.append(f"{rec.ref}: {exc}")
                groups.setdefault(rec.membrane.copy_group, []).append(rec.membrane)
            for gid, members in groups.items():
                if not check_copy_consistency(members):
                    problems.append(f"copy group {gid} is inconsistent")
            if set(latest) != set(self._records):
                problems.append("on-disk record set differs from memory")
            return problems


def _random_id() -> str:
    return secrets.token_hex(16)
