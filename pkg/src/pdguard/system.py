"""One object that opens a store directory and wires every component to it."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Callable

from .audit import AuditLog
from .dbfs import Store
from .pdtype import TypeDecl, parse_type_file, validate
from .ps import ProcessingStore
from .rights import SubjectRights

AUDIT_FILE = "audit.log"


class Runtime:
    def __init__(self, store: Store):
        self.store = store
        try:
            self.audit = AuditLog(store.root / AUDIT_FILE, sync=store.sync)
        except BaseException:
            store.close()
            raise
        self.ps = ProcessingStore(store, self.audit)
        self.rights = SubjectRights(store, self.audit)

    @classmethod
    def init(cls, root: str | os.PathLike, *, authority_public_key: bytes | None = None,
             sync: bool = True, new_id: Callable[[], str] | None = None) -> Runtime:
        store = Store.init(root, sync=sync, new_id=new_id)
        if authority_public_key is not None:
            store.set_authority_key(authority_public_key)
        return cls(store)

    @classmethod
    def open(cls, root: str | os.PathLike, *, sync: bool = True,
             new_id: Callable[[], str] | None = None) -> Runtime:
        return cls(Store.open(root, sync=sync, new_id=new_id))

    @property
    def root(self) -> Path:
        return self.store.root

    def load_types(self, text: str) -> list[TypeDecl]:
        """Validate every declaration in ``text`` and create a table for each.

        The whole file is validated before any table is created, so a bad
        declaration leaves the catalog untouched.
        """
        catalog = dict(self.store.catalog)
        decls = []
        for decl in parse_type_file(text):
            decl = validate(decl, catalog)
            catalog[decl.name] = decl
            decls.append(decl)
        for decl in decls:
            self.store.create_table(decl)
        return decls

    def close(self) -> None:
        self.audit.close()
        self.store.close()

    def __enter__(self) -> Runtime:
        return self

    def __exit__(self, *exc) -> None:
        self.close()
