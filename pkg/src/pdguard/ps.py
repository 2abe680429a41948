"""The processing store: register processings, then invoke them through the DED.

Registration rejects sources without a purpose and raises an alert when the
body reads fields outside the view its header declares. An alerted
processing waits in ``pending`` until an operator approves it.
The catalog persists in ``processings.json`` next to the store.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .audit import AuditLog
from .clock import utcnow, year_of
from .dbfs import PdRef, Selector, Store, _atomic_write
from .ded import (
    EXECUTED,
    FAULT,
    SKIPPED_EXPIRED,
    SKIPPED_NO_CONSENT,
    CollectResult,
    DataExecutionDomain,
    _issue_ticket,
)
from .errors import CollectionSourceUnknown, DuplicateProcessing, RegistrationAlert, TypeMismatch, UnknownProcessing
from .proclang import Clock, Processing, declared_fields, parse_processing

CATALOG_FILE = "processings.json"


@dataclass(frozen=True)
class PsEntry:
    processing: Processing
    registered_at: int
    approved: bool = False
    alert: str | None = None

    def to_dict(self) -> dict:
        return {
            "alert": self.alert,
            "approved": self.approved,
            "registered_at": self.registered_at,
            "source": self.processing.source,
        }


@dataclass(frozen=True)
class ProcessingSummary:
    id: str
    purpose: str
    input_type: str
    declared_view: str
    output: str
    accessed: tuple[str, ...]
    state: str  # registered | approved | pending-approval
    alert: str | None


@dataclass
class InvokeResult:
    """Everything a caller gets back: scalars, refs and a skip report. Never field values."""

    processing_id: str
    run_id: int
    scalars: list[tuple[PdRef, object]] = field(default_factory=list)
    pd_refs: list[PdRef] = field(default_factory=list)
    skipped: list[tuple[PdRef, str]] = field(default_factory=list)
    collected: CollectResult | None = None

    @property
    def processed(self) -> int:
        return len(self.scalars) + len(self.pd_refs)

    def summary(self) -> str:
        reasons = [r for _, r in self.skipped]
        return (f"run {self.run_id}: {self.processed} processed, "
                f"{reasons.count(SKIPPED_NO_CONSENT)} skipped(no-consent), "
                f"{reasons.count(SKIPPED_EXPIRED)} skipped(expired), "
                f"{reasons.count(FAULT)} fault")


def load_payload(path: str | os.PathLike) -> list[dict]:
    """Read a collection payload: a JSON array of objects with ``subject_id`` plus fields."""
    data = json.loads(Path(path).read_text("utf-8"))
    if not isinstance(data, list):
        raise TypeMismatch(f"{path}: payload must be a JSON array")
    return data


class ProcessingStore:
    def __init__(self, store: Store, audit: AuditLog):
        self._store = store
        self._ded = DataExecutionDomain(store, audit)
        self._path = Path(store.root) / CATALOG_FILE
        self._lock = threading.Lock()
        self._catalog: dict[str, PsEntry] = {}
        self._pending: dict[str, PsEntry] = {}
        self._load()

    @property
    def executions(self) -> int:
        return self._ded.executions

    def _load(self) -> None:
        if not self._path.exists():
            return
        data = json.loads(self._path.read_text("utf-8"))
        for section, target in (("catalog", self._catalog), ("pending", self._pending)):
            for pid, d in data.get(section, {}).items():
                proc = parse_processing(d["source"], self._store.catalog, name=pid)
                target[pid] = PsEntry(replace(proc, approved=d["approved"]),
                                      d["registered_at"], d["approved"], d["alert"])

    def _save(self) -> None:
        data = {
            "catalog": {pid: e.to_dict() for pid, e in sorted(self._catalog.items())},
            "pending": {pid: e.to_dict() for pid, e in sorted(self._pending.items())},
        }
        _atomic_write(self._path, json.dumps(data, indent=2, sort_keys=True).encode("utf-8") + b"\n",
                      self._store.sync)

    def ps_register(self, source: str, approve: bool = False, *, name: str | None = None,
                    now: int | None = None) -> str:
        """Register a processing and return its id (the processing name).

        Raises ``RegistrationAlert`` when the body reads beyond its declared
        view and ``approve`` is false; the alert is kept for later approval.
        """
        now = utcnow() if now is None else now
        proc = parse_processing(source, self._store.catalog, name=name)
        decl = self._store.decl(proc.input_type)
        extra = proc.accessed - declared_fields(proc, decl)
        with self._lock:
            if proc.name in self._catalog:
                raise DuplicateProcessing(proc.name)
            alert = None
            if extra:
                alert = RegistrationAlert(proc.name, extra)
                if not approve:
                    self._pending[proc.name] = PsEntry(proc, now, False, str(alert))
                    self._save()
                    raise alert
            self._pending.pop(proc.name, None)
            approved = bool(extra)
            self._catalog[proc.name] = PsEntry(
                replace(proc, approved=approved), now, approved,
                str(alert) if alert else None,
            )
            self._save()
            return proc.name

    def ps_approve(self, processing_id: str) -> str:
        with self._lock:
            entry = self._pending.pop(processing_id, None)
            if entry is None:
                raise UnknownProcessing(f"no pending alert for {processing_id!r}")
            proc = replace(entry.processing, approved=True)
            self._catalog[processing_id] = PsEntry(proc, entry.registered_at, True, entry.alert)
            self._save()
            return processing_id

    def _get(self, processing_id: str) -> Processing:
        entry = self._catalog.get(processing_id)
        if entry is None:
            if processing_id in self._pending:
                raise UnknownProcessing(f"{processing_id!r} awaits operator approval")
            raise UnknownProcessing(processing_id)
        return entry.processing

    def ps_invoke(self, processing_id: str, selector: Selector | None = None,
                  collection: tuple[str, Sequence[Mapping] | str | os.PathLike] | None = None, do_collect: bool = False,
                  *, now: int | None = None, clock: Clock | None = None) -> InvokeResult:
        """Run a registered processing.

        With ``do_collect`` the ``(source, payload)`` pair is stored first via
        the collection built-in; without an explicit selector the run then
        covers exactly the newly collected records.
        """
        proc = self._get(processing_id)
        now = utcnow() if now is None else now
        clock = year_of(now) if clock is None else clock
        collected = None
        if do_collect:
            if collection is None:
                raise CollectionSourceUnknown("do_collect needs a (source, payload) collection")
            source, payload = collection
            if isinstance(payload, (str, os.PathLike)):
                payload = load_payload(payload)
            collected = self._ded.builtin_collect(proc.input_type, source, payload, now)
            if selector is None:
                selector = Selector.of_refs(collected.refs)
        run = self._ded.run_pipeline(proc, selector or Selector.all(), now, clock, _issue_ticket())
        return InvokeResult(
            processing_id=proc.name,
            run_id=run.run_id,
            scalars=list(run.scalars),
            pd_refs=[out for _, out in run.outputs],
            skipped=[(t.ref, t.outcome) for t in run.trace if t.outcome != EXECUTED],
            collected=collected,
        )

    def list_processings(self) -> list[ProcessingSummary]:
        out = []
        for section, entries in (("catalog", self._catalog), ("pending", self._pending)):
            for pid, e in sorted(entries.items()):
                p = e.processing
                state = "pending-approval" if section == "pending" else ("approved" if e.approved else "registered")
                out.append(ProcessingSummary(pid, p.purpose, p.input_type, p.declared_view, str(p.output),
                                             tuple(sorted(p.accessed)), state, e.alert))
        return out

    # built-ins, dispatched through the same entry point

    def collect(self, type_name: str, source: str, payload: Sequence[Mapping],
                *, now: int | None = None) -> CollectResult:
        return self._ded.builtin_collect(type_name, source, payload, utcnow() if now is None else now)

    def update(self, ref: PdRef, values: Mapping[str, object], *, now: int | None = None) -> None:
        self._ded.builtin_update(ref, values, utcnow() if now is None else now)

    def copy(self, ref: PdRef, *, now: int | None = None) -> PdRef:
        return self._ded.builtin_copy(ref, utcnow() if now is None else now)
