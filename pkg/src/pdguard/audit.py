"""Append-only, hash-chained audit log (``audit.log`` in the store root).

Each frame is a 4-byte little-endian length and the canonical JSON of one
entry. Every entry carries the SHA-256 of its predecessor, and the whole
chain is verified when the log is opened.

Entries hold refs, subject ids and metadata only. Field values never enter
the log, so erasing a record cannot be undone by reading the audit trail.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

from .dbfs import AccessCapability, _check, _frame, canonical_json, iter_frames
from .errors import AuditIntegrityError

KINDS = ("collection", "execute", "update", "copy", "consent-override", "forget", "sweep")
GENESIS = "0" * 64


@dataclass(frozen=True)
class AuditEntry:
    seq: int
    ts: int
    kind: str
    outcome: str
    pd_ref: str | None = None
    subject_id: str | None = None
    processing_id: str | None = None
    purpose: str | None = None
    permission: str | None = None
    run_id: int | None = None
    output_ref: str | None = None
    detail: str | None = None
    prev_hash: str = GENESIS
    hash: str = ""

    def body(self) -> dict:
        return {name: getattr(self, name) for name in _BODY_FIELDS}

    def compute_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.body())).hexdigest()

    def to_dict(self) -> dict:
        return {**self.body(), "hash": self.hash}


# every field is a plain scalar, so a flat copy is enough (asdict deep-copies)
_BODY_FIELDS = tuple(f.name for f in fields(AuditEntry) if f.name != "hash")


def read_chain(path: Path) -> tuple[list[AuditEntry], int, int]:
    """Decode and verify every frame; returns (entries, end of last good frame, file size)."""
    data = path.read_bytes()
    entries: list[AuditEntry] = []
    prev, end = GENESIS, 0
    for offset, payload in iter_frames(data):
        try:
            entry = AuditEntry(**json.loads(payload))
        except (ValueError, TypeError) as exc:
            raise AuditIntegrityError(f"undecodable audit frame at byte {offset}: {exc}") from None
        expected_seq = entries[-1].seq + 1 if entries else 1
        if entry.seq != expected_seq:
            raise AuditIntegrityError(f"audit sequence gap: expected {expected_seq}, got {entry.seq}")
        if entry.prev_hash != prev:
            raise AuditIntegrityError(f"audit entry {entry.seq} does not chain to its predecessor")
        if entry.compute_hash() != entry.hash:
            raise AuditIntegrityError(f"audit entry {entry.seq} was altered")
        prev = entry.hash
        entries.append(entry)
        end = offset + 4 + len(payload)
    return entries, end, len(data)


class AuditLog:
    def __init__(self, path: str | os.PathLike, *, sync: bool = True):
        self.path = Path(path)
        self.sync = sync
        self._lock = threading.Lock()
        self._entries: list[AuditEntry] = []
        self._max_run = 0
        self._load()
        self._fh = open(self.path, "ab")
        os.chmod(self.path, 0o600)

    def _load(self) -> None:
        if not self.path.exists():
            return
        self._entries, end, size = read_chain(self.path)
        if end < size:
            # a torn batch never acknowledged its triggering operation
            with open(self.path, "r+b") as fh:
                fh.truncate(end)
        self._max_run = max((e.run_id or 0 for e in self._entries), default=0)

    def verify(self) -> bool:
        """Re-read the file and check the full chain against memory."""
        with self._lock:
            try:
                on_disk, _, _ = read_chain(self.path)
            except AuditIntegrityError:
                return False
            return [e.hash for e in on_disk] == [e.hash for e in self._entries]

    def close(self) -> None:
        self._fh.close()

    def append(self, events: Iterable[Mapping], cap: AccessCapability) -> list[AuditEntry]:
        """Append a batch atomically: one write, one fsync."""
        _check(cap)
        with self._lock:
            prev = self._entries[-1].hash if self._entries else GENESIS
            seq = self._entries[-1].seq if self._entries else 0
            batch, out = [], bytearray()
            for ev in events:
                if ev["kind"] not in KINDS:
                    raise ValueError(f"unknown audit kind {ev['kind']!r}")
                seq += 1
                entry = AuditEntry(seq=seq, prev_hash=prev, **ev)
                entry = AuditEntry(**{**entry.to_dict(), "hash": entry.compute_hash()})
                prev = entry.hash
                batch.append(entry)
                out += _frame(canonical_json(entry.to_dict()))
            if batch:
                self._fh.write(out)
                self._fh.flush()
                if self.sync:
                    os.fsync(self._fh.fileno())
                self._entries.extend(batch)
                self._max_run = max([self._max_run] + [e.run_id or 0 for e in batch])
            return batch

    @property
    def entries(self) -> tuple[AuditEntry, ...]:
        return tuple(self._entries)

    def allocate_run_id(self) -> int:
        # runs that trace no record leave no entry, so their id may recur after reopen
        with self._lock:
            self._max_run += 1
            return self._max_run

    def query(self, *, subject: str | None = None, ref: str | None = None,
              kind: str | None = None, run: int | None = None) -> list[AuditEntry]:
        ref = str(ref) if ref is not None else None
        return [
            e for e in self._entries
            if (subject is None or e.subject_id == subject)
            and (ref is None or e.pd_ref == ref)
            and (kind is None or e.kind == kind)
            and (run is None or e.run_id == run)
        ]
