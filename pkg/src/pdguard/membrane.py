"""Membranes: the consent, lifetime and provenance metadata carried by every record.

A membrane answers one question for the pipeline: which fields of this
record may a given purpose see right now? Everything else here keeps that
answer consistent across copies and derivations.
"""

from __future__ import annotations

import secrets
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Callable, Iterable, Mapping, Sequence

from .clock import add_duration
from .errors import EmptyInputs, MixedGroups, UnknownType, UnknownView
from .pdtype import ALL, NONE, ORIGINS, SENSITIVITIES, Duration, Grant, TypeDecl, parse_duration

if TYPE_CHECKING:
    from .dbfs import AccessCapability, PdRef, Store

MEMBRANE_ORIGINS = ORIGINS + ("derived",)
_SENSITIVITY_RANK = {s: i for i, s in enumerate(SENSITIVITIES)}


def new_group_id() -> str:
    return secrets.token_hex(16)


@dataclass(frozen=True)
class Membrane:
    subject_id: str
    type_name: str
    origin: str
    consents: Mapping[str, Grant]
    collected_at: int
    ttl: Duration
    sensitivity: str
    lineage: tuple[str, ...] = ()
    copy_group: str = field(default_factory=new_group_id)

    def to_dict(self) -> dict:
        return {
            "collected_at": self.collected_at,
            "consents": {p: str(g) for p, g in sorted(self.consents.items())},
            "copy_group": self.copy_group,
            "lineage": list(self.lineage),
            "origin": self.origin,
            "sensitivity": self.sensitivity,
            "subject_id": self.subject_id,
            "ttl": str(self.ttl),
            "type_name": self.type_name,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> Membrane:
        return cls(
            subject_id=d["subject_id"],
            type_name=d["type_name"],
            origin=d["origin"],
            consents={p: Grant.parse(g) for p, g in d["consents"].items()},
            collected_at=int(d["collected_at"]),
            ttl=parse_duration(d["ttl"]),
            sensitivity=d["sensitivity"],
            lineage=tuple(d["lineage"]),
            copy_group=d["copy_group"],
        )

    @property
    def expires_at(self) -> int:
        return add_duration(self.collected_at, self.ttl)


@dataclass(frozen=True)
class Permission:
    """What a purpose may see of one record: everything, nothing, or a field set."""

    kind: str
    fields: frozenset[str] = frozenset()

    @classmethod
    def of_fields(cls, names: Iterable[str]) -> Permission:
        names = frozenset(names)
        return cls("fields", names) if names else DENY

    def __le__(self, other: Permission) -> bool:
        if self.kind == "none" or other.kind == "all":
            return True
        if other.kind == "none" or self.kind == "all":
            return False
        return self.fields <= other.fields

    def meet(self, other: Permission) -> Permission:
        if self.kind == "none" or other.kind == "none":
            return DENY
        if self.kind == "all":
            return other
        if other.kind == "all":
            return self
        return Permission.of_fields(self.fields & other.fields)

    def visible(self, decl: TypeDecl) -> tuple[str, ...]:
        """Declared fields this permission exposes, in declaration order."""
        if self.kind == "all":
            return decl.field_names
        return tuple(f for f in decl.field_names if f in self.fields)

    def __str__(self) -> str:
        if self.kind == "fields":
            return "fields(" + ",".join(sorted(self.fields)) + ")"
        return self.kind


FULL = Permission("all")
DENY = Permission("none")


def grant_permission(grant: Grant | None, decl: TypeDecl | None = None) -> Permission:
    """Resolve a grant to a permission; unresolvable views deny."""
    if grant is None or grant.kind == "none":
        return DENY
    if grant.kind == "all":
        return FULL
    if grant.kind == "fields":
        return Permission.of_fields(grant.fields)
    view = decl.view(grant.view) if decl is not None else None
    return Permission.of_fields(view.members) if view is not None else DENY


def membrane_from_defaults(decl: TypeDecl, subject_id: str, origin: str | None, now: int,
                           *, new_id: Callable[[], str] = new_group_id) -> Membrane:
    return Membrane(
        subject_id=subject_id,
        type_name=decl.name,
        origin=origin or decl.origin,
        consents=dict(decl.default_consent),
        collected_at=now,
        ttl=decl.ttl,
        sensitivity=decl.sensitivity,
        lineage=(),
        copy_group=new_id(),
    )


def effective_view(m: Membrane, purpose: str, decl: TypeDecl) -> Permission:
    perm = grant_permission(m.consents.get(purpose), decl)
    if perm.kind == "fields":
        return Permission.of_fields(perm.fields & set(decl.field_names))
    return perm


def is_expired(m: Membrane, now: int) -> bool:
    return now >= m.expires_at


def check_membrane(m: Membrane, decl: TypeDecl) -> list[str]:
    """Structural problems with ``m`` relative to its type; empty when valid."""
    problems = []
    if m.type_name != decl.name:
        problems.append(f"type_name {m.type_name!r} != {decl.name!r}")
    if m.origin not in MEMBRANE_ORIGINS:
        problems.append(f"bad origin {m.origin!r}")
    if m.sensitivity not in SENSITIVITIES:
        problems.append(f"bad sensitivity {m.sensitivity!r}")
    if not m.subject_id:
        problems.append("empty subject_id")
    if not m.copy_group:
        problems.append("empty copy_group")
    for purpose, grant in m.consents.items():
        if grant.kind == "view" and decl.view(grant.view) is None:
            problems.append(f"consent {purpose}: unknown view {grant.view!r}")
    return problems


def derive_membrane(inputs: Sequence[Membrane], processing_id: str, now: int, *,
                    catalog: Mapping[str, TypeDecl], type_name: str | None = None,
                    refs: Sequence[PdRef] = (),
                    new_id: Callable[[], str] = new_group_id) -> Membrane:
    """Membrane for PD produced by a processing from ``inputs``.

    Each purpose gets the meet of its permissions across the inputs, so a
    derivation can never see more than any one input allowed. Lifetime is the
    shortest remaining one (whole days, at least one), sensitivity the highest.
    """
    if not inputs:
        raise EmptyInputs("derive_membrane needs at least one input")
    for m in inputs:
        if m.type_name not in catalog:
            raise UnknownType(m.type_name)
    target = type_name or inputs[0].type_name
    same_type = all(m.type_name == target for m in inputs)

    consents: dict[str, Grant] = {}
    purposes = sorted(set().union(*(m.consents.keys() for m in inputs)))
    for purpose in purposes:
        perms = [grant_permission(m.consents.get(purpose), catalog[m.type_name]) for m in inputs]
        combined = perms[0]
        for p in perms[1:]:
            combined = combined.meet(p)
        consents[purpose] = _as_grant(combined, [m.consents.get(purpose) for m in inputs],
                                      perms, same_type)

    remaining = min(m.expires_at for m in inputs) - now
    subjects = sorted({m.subject_id for m in inputs})
    return Membrane(
        subject_id=subjects[0] if len(subjects) == 1 else "+".join(subjects),
        type_name=target,
        origin="derived",
        consents=consents,
        collected_at=now,
        ttl=Duration(max(1, remaining // 86400), "D"),
        sensitivity=max((m.sensitivity for m in inputs), key=_SENSITIVITY_RANK.__getitem__),
        lineage=tuple(f"ref:{r}" for r in refs) + (f"proc:{processing_id}",),
        copy_group=new_id(),
    )


def _as_grant(combined: Permission, grants: list[Grant | None], perms: list[Permission],
              same_type: bool) -> Grant:
    if combined.kind == "all":
        return ALL
    if combined.kind == "none":
        return NONE
    # keep a view grant when it already says exactly this and still resolves
    if same_type:
        for g, p in zip(grants, perms):
            if g is not None and g.kind == "view" and p == combined:
                return g
    return Grant.of_fields(combined.fields)


def check_copy_consistency(group: Sequence[Membrane]) -> bool:
    if not group:
        return True
    if len({m.copy_group for m in group}) > 1:
        raise MixedGroups("membranes belong to different copy groups")
    first = group[0]
    return all(
        dict(m.consents) == dict(first.consents) and m.ttl == first.ttl
        and m.sensitivity == first.sensitivity
        for m in group[1:]
    )


def with_consent(m: Membrane, purpose: str, grant: Grant) -> Membrane:
    consents = dict(m.consents)
    consents[purpose] = grant
    return replace(m, consents=consents)


def apply_consent_override(m: Membrane, purpose: str, grant: Grant, store: Store,
                           cap: AccessCapability) -> int:
    """Replace the consent for ``purpose`` on ``m`` and on every copy of it.

    Returns how many stored membranes were rewritten.
    """
    decl = store.catalog.get(m.type_name)
    if decl is None:
        raise UnknownType(m.type_name)
    if grant.kind == "view" and decl.view(grant.view) is None:
        raise UnknownView(purpose, grant.view)
    return store.set_group_consent(m.type_name, m.copy_group, purpose, grant, cap)
