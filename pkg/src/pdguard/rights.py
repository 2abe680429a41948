"""Subject rights: consent changes, access export, erasure and the TTL sweep.

Erasure is cryptographic. A record's canonical encoding is sealed under the
authority's public key and the record is replaced by a tombstone holding
only that envelope; the operator keeps no way to read it back.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from datetime import date
from pathlib import Path

from .audit import AuditLog
from .dbfs import PdRecord, PdRef, Store, _issue_capability, encode_record
from .envelope import AEAD_AES_256_GCM, KEM_RSA_OAEP_SHA256, CiphertextEnvelope, load_private_key, load_public_key, seal, unseal
from .errors import NoAuthorityKey, RefTombstoned, UnknownSubject
from .membrane import Membrane, apply_consent_override
from .pdtype import Grant

log = logging.getLogger(__name__)

EXPORT_FORMAT = "pdguard-export/1"

# The authority's private key in PEM form; holding it is what authorises decryption.
AuthorityPrivateKey = bytes
CanonicalRecord = bytes


@dataclass(frozen=True)
class ExportSummary:
    subject_id: str
    path: str
    records: int
    audit_entries: int


def _json_value(v: object) -> object:
    return v.isoformat() if isinstance(v, date) else v


class SubjectRights:
    def __init__(self, store: Store, audit: AuditLog):
        self._store = store
        self._audit = audit
        self._cap = _issue_capability("rights")

    def _targets(self, target: PdRef | str) -> list[PdRecord]:
        if isinstance(target, PdRef):
            return [self._store.fetch_record(target, self._cap)]
        records = self._store.records_of_subject(target, self._cap)
        if not records and not self._audit.query(subject=target):
            raise UnknownSubject(target)
        return records

    def set_consent(self, target: PdRef | str, purpose: str, grant: Grant, *, now: int) -> int:
        """Override one purpose's consent on a record (or all of a subject's records)
        and on every copy of them. Returns the number of membranes rewritten."""
        records = self._targets(target)
        groups: dict[str, Membrane] = {}
        for rec in records:
            groups.setdefault(rec.membrane.copy_group, rec.membrane)
        total = 0
        events = []
        for group_id, m in groups.items():
            total += apply_consent_override(m, purpose, grant, self._store, self._cap)
            for ref, member in self._store.copy_group(group_id, self._cap):
                events.append({"ts": now, "kind": "consent-override", "outcome": "applied",
                               "pd_ref": str(ref), "subject_id": member.subject_id,
                               "purpose": purpose, "permission": str(grant)})
        self._audit.append(events, self._cap)
        return total

    def export_subject(self, subject_id: str, out: str | os.PathLike) -> ExportSummary:
        """Write everything held about ``subject_id`` to ``out`` as structured JSON.

        Values stay keyed by their declared field names; each record lists the
        audit entries that name it, and the top-level ``audit`` section lists
        every entry about the subject, including erasures.
        """
        records = sorted(self._store.records_of_subject(subject_id, self._cap), key=lambda r: str(r.ref))
        subject_entries = [e.to_dict() for e in self._audit.query(subject=subject_id)]
        doc = {
            "audit": subject_entries,
            "format": EXPORT_FORMAT,
            "records": [
                {
                    "audit": [e.to_dict() for e in self._audit.query(ref=str(rec.ref))],
                    "fields": {k: _json_value(v) for k, v in rec.values.items()},
                    "membrane": rec.membrane.to_dict(),
                    "ref": str(rec.ref),
                    "type": rec.type_name,
                }
                for rec in records
            ],
            "subject_id": subject_id,
        }
        text = json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
        Path(out).write_text(text, encoding="utf-8")
        return ExportSummary(subject_id, str(out), len(records), len(subject_entries))

    def _public_key(self, public_pem: bytes | str | None):
        if public_pem is None:
            public_pem = self._store.authority_public_key
        if public_pem is None:
            raise NoAuthorityKey("no authority public key given or configured")
        return load_public_key(public_pem)

    def forget(self, target: PdRef | str, public_pem: bytes | str | None = None, *, now: int) -> int:
        """Crypto-erase a record (with its copies) or every live record of a subject; returns the count."""
        key = self._public_key(public_pem)
        try:
            records = self._targets(target)
        except RefTombstoned:
            log.warning("%s was already erased", target)
            return 0
        if isinstance(target, PdRef):
            # a copy holds the same values, so erasing one record erases its copy group
            (rec,) = records
            records = [self._store.fetch_record(ref, self._cap)
                       for ref, _ in self._store.copy_group(rec.membrane.copy_group, self._cap)]
        items = [(rec.ref, seal(encode_record(rec), key, str(rec.ref))) for rec in records]
        if items:
            self._store.tombstone_records(items, self._cap)
        self._audit.append([
            {"ts": now, "kind": "forget", "outcome": "erased", "pd_ref": str(rec.ref),
             "subject_id": rec.membrane.subject_id, "detail": f"{KEM_RSA_OAEP_SHA256}+{AEAD_AES_256_GCM}"}
            for rec in records
        ], self._cap)
        return len(items)

    def sweep(self, now: int) -> int:
        """Crypto-erase every record whose lifetime has ended."""
        events = []

        def on_erase(ref: PdRef, m: Membrane) -> None:
            events.append({"ts": now, "kind": "sweep", "outcome": "erased", "pd_ref": str(ref),
                           "subject_id": m.subject_id, "detail": "ttl expired"})

        count = self._store.sweep_expired(now, self._cap, on_erase)
        self._audit.append(events, self._cap)
        return count

    def envelope(self, ref: PdRef) -> CiphertextEnvelope:
        return self._store.envelope(ref)


def authority_decrypt(envelope: CiphertextEnvelope, private_key: AuthorityPrivateKey) -> CanonicalRecord:
    """Recover the exact canonical encoding of an erased record (authority side)."""
    return unseal(envelope, load_private_key(private_key))
