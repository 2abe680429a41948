"""The data execution domain: the only code that reads PD on behalf of a processing.

A run walks eight steps in a fixed order:

1. type2req       selector -> query on the processing's input type
2. load_membrane  membranes only, no field values
3. filter         keep records whose membrane allows this purpose and is not expired
4. load_data      per record, only the fields that record's permission exposes
5. execute        evaluate the body on the minimized record
6. build_membrane derive a membrane for any PD the body produced
7. store          insert produced PD under its new membrane
8. return         scalars by value, PD by reference

The built-in write functions (collect, update, copy) also live here, since
they are the only other paths that touch stored records.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .audit import AuditLog
from .dbfs import PartialRecord, PdRef, Selector, Store, _issue_capability, coerce_values
from .errors import (
    CapabilityError,
    PdError,
    ProcessingFault,
    TypeMismatch,
    UnknownSource,
    UnknownType,
)
from .membrane import Membrane, Permission, derive_membrane, effective_view, is_expired, membrane_from_defaults
from .pdtype import TypeDecl
from .proclang import Clock, Processing, RecordValue, evaluate

log = logging.getLogger(__name__)

EXECUTED = "executed"
SKIPPED_NO_CONSENT = "skipped-no-consent"
SKIPPED_EXPIRED = "skipped-expired"
FAULT = "fault"

_TICKET_SEAL = object()


class InvokeTicket:
    """Proof that a run was dispatched by the processing store."""

    __slots__ = ()

    def __init__(self, seal: object = None):
        if seal is not _TICKET_SEAL:
            raise CapabilityError("pipeline runs are started through ps_invoke only")


def _issue_ticket() -> InvokeTicket:
    return InvokeTicket(_TICKET_SEAL)


@dataclass(frozen=True)
class Query:
    type_name: str
    selector: Selector


@dataclass(frozen=True)
class TraceEntry:
    ref: PdRef
    permission: Permission
    outcome: str
    detail: str | None = None
    output_ref: PdRef | None = None


@dataclass
class FilterResult:
    kept: list[tuple[PdRef, Permission]] = field(default_factory=list)
    skipped: list[tuple[PdRef, str]] = field(default_factory=list)


@dataclass
class DedRun:
    run_id: int
    processing_id: str
    purpose: str
    query: Query
    started_at: int
    trace: list[TraceEntry] = field(default_factory=list)
    scalars: list[tuple[PdRef, object]] = field(default_factory=list)
    outputs: list[tuple[PdRef, PdRef]] = field(default_factory=list)
    ended_at: int | None = None

    def count(self, outcome: str) -> int:
        return sum(1 for t in self.trace if t.outcome == outcome)


@dataclass
class CollectResult:
    refs: list[PdRef] = field(default_factory=list)
    rejected: list[tuple[int, str]] = field(default_factory=list)  # (payload index, error name)


def ded_filter(membranes: Sequence[tuple[PdRef, Membrane]], purpose: str, decl: TypeDecl,
               now: int) -> FilterResult:
    """Split fetched membranes into records this purpose may process and skips."""
    result = FilterResult()
    for ref, m in membranes:
        if is_expired(m, now):
            result.skipped.append((ref, SKIPPED_EXPIRED))
            continue
        perm = effective_view(m, purpose, decl)
        if perm.kind == "none":
            result.skipped.append((ref, SKIPPED_NO_CONSENT))
        else:
            result.kept.append((ref, perm))
    return result


class DataExecutionDomain:
    def __init__(self, store: Store, audit: AuditLog):
        self._store = store
        self._audit = audit
        self._cap = _issue_capability("ded")
        self.executions = 0

    # pipeline steps

    def ded_type2req(self, p: Processing, selector: Selector) -> Query:
        if p.input_type not in self._store.catalog:
            raise UnknownType(p.input_type)
        for ref in selector.refs:
            if ref.type_name != p.input_type:
                raise UnknownType(f"{ref} is not a {p.input_type} record")
        return Query(p.input_type, selector)

    def _ded_load_membrane(self, query: Query) -> list[tuple[PdRef, Membrane]]:
        fetched = self._store.fetch_membranes(query.type_name, query.selector, self._cap)
        return list(dict(fetched).items())  # a ref listed twice is processed once

    def _ded_load_data(self, ref: PdRef, permission: Permission) -> PartialRecord:
        return self._store.fetch_fields(ref, permission, self._cap)

    def _ded_execute(self, p: Processing, data: PartialRecord, clock: Clock) -> object:
        self.executions += 1
        return evaluate(p, data.values, clock)

    def _ded_build_membrane(self, p: Processing, source: tuple[PdRef, Membrane], now: int) -> Membrane:
        ref, m = source
        return derive_membrane([m], p.name, now, catalog=self._store.catalog,
                               type_name=p.output.pd_type, refs=[ref],
                               new_id=self._store.new_id)

    def _ded_store(self, value: RecordValue, membrane: Membrane) -> PdRef:
        decl = self._store.decl(value.type_name)
        return self._store.insert_record(coerce_values(decl, value.values), membrane, self._cap)

    def run_pipeline(self, p: Processing, selector: Selector, now: int, clock: Clock,
                     ticket: InvokeTicket) -> DedRun:
        if not isinstance(ticket, InvokeTicket):
            raise CapabilityError("pipeline runs are started through ps_invoke only")
        query = self.ded_type2req(p, selector)
        decl = self._store.decl(query.type_name)
        run = DedRun(self._audit.allocate_run_id(), p.name, p.purpose, query, started_at=now)

        membranes = self._ded_load_membrane(query)
        by_ref = dict(membranes)
        filtered = ded_filter(membranes, p.purpose, decl, now)
        skips = dict(filtered.skipped)
        kept = dict(filtered.kept)

        for ref, _ in membranes:
            if ref in skips:
                run.trace.append(TraceEntry(ref, Permission("none"), skips[ref]))
                continue
            perm = kept[ref]
            data = self._ded_load_data(ref, perm)
            try:
                value = self._ded_execute(p, data, clock)
                out_ref = None
                if p.output.is_pd:
                    out_ref = self._ded_store(value, self._ded_build_membrane(p, (ref, by_ref[ref]), now))
                    run.outputs.append((ref, out_ref))
                else:
                    run.scalars.append((ref, value))
                run.trace.append(TraceEntry(ref, perm, EXECUTED, output_ref=out_ref))
            except (ProcessingFault, TypeMismatch) as exc:
                # exception text may quote values, so only the class name is kept
                run.trace.append(TraceEntry(ref, perm, FAULT, detail=type(exc).__name__))

        run.ended_at = now
        self._audit.append([
            {
                "ts": now,
                "kind": "execute",
                "outcome": t.outcome,
                "pd_ref": str(t.ref),
                "subject_id": by_ref[t.ref].subject_id,
                "processing_id": p.name,
                "purpose": p.purpose,
                "permission": str(t.permission),
                "run_id": run.run_id,
                "output_ref": str(t.output_ref) if t.output_ref else None,
                "detail": t.detail,
            }
            for t in run.trace
        ], self._cap)
        return run

    # built-in write functions

    def builtin_collect(self, type_name: str, source: str, payload: Sequence[Mapping],
                        now: int) -> CollectResult:
        """Store one record per payload entry, each wrapped in the type's default membrane."""
        decl = self._store.decl(type_name)
        if source not in decl.collection:
            raise UnknownSource(f"{type_name} declares no collection source {source!r}")
        result = CollectResult()
        events = []
        for i, entry in enumerate(payload):
            try:
                if not isinstance(entry, Mapping):
                    raise TypeMismatch(f"payload entry {i} is not an object")
                entry = dict(entry)
                subject = entry.pop("subject_id", None)
                if not isinstance(subject, str) or not subject:
                    raise TypeMismatch(f"payload entry {i} lacks subject_id")
                values = coerce_values(decl, entry)
                membrane = membrane_from_defaults(decl, subject, None, now, new_id=self._store.new_id)
                ref = self._store.insert_record(values, membrane, self._cap)
            except PdError as exc:
                log.warning("collection entry %d rejected: %s", i, type(exc).__name__)
                result.rejected.append((i, type(exc).__name__))
                continue
            result.refs.append(ref)
            events.append({"ts": now, "kind": "collection", "outcome": "stored", "pd_ref": str(ref),
                           "subject_id": subject, "detail": f"source={source}"})
        self._audit.append(events, self._cap)
        return result

    def builtin_update(self, ref: PdRef, values: Mapping[str, object], now: int) -> None:
        record = self._store.fetch_record(ref, self._cap)
        self._store.update_record(ref, values, self._cap)
        self._audit.append([{
            "ts": now, "kind": "update", "outcome": "updated", "pd_ref": str(ref),
            "subject_id": record.membrane.subject_id,
            "detail": "fields=" + ",".join(sorted(values)),
        }], self._cap)

    def builtin_copy(self, ref: PdRef, now: int) -> PdRef:
        record = self._store.fetch_record(ref, self._cap)
        new_ref = self._store.copy_record(ref, self._cap)
        self._audit.append([{
            "ts": now, "kind": "copy", "outcome": "copied", "pd_ref": str(ref),
            "subject_id": record.membrane.subject_id, "output_ref": str(new_ref),
        }], self._cap)
        return new_ref
