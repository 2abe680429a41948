"""Operator and subject command line.

Exit codes: 0 on success, 1 on a domain error (``error: <ErrorName>: message``
on stderr), 2 on a usage error. No command prints stored field values; the
subject export goes to the file named by ``--out``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Sequence

from .clock import parse_instant, utcnow
from .dbfs import PdRef, Selector
from .envelope import generate_authority_keypair
from .errors import PdError, RegistrationAlert
from .pdtype import ALL, NONE, Grant
from .ps import load_payload
from .rights import authority_decrypt
from .system import Runtime

STORE_ENV = "PDGUARD_STORE"
ID_SEED_ENV = "PDGUARD_ID_SEED"


class _Usage(Exception):
    pass


def _instant(text: str) -> int:
    try:
        return parse_instant(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _grant(text: str) -> Grant:
    if text == "all":
        return ALL
    if text == "none":
        return NONE
    return Grant.parse(text) if text.startswith("view:") else Grant.of_view(text)


def _seeded_ids(seed: str) -> tuple[Callable[[], str], Callable[[Runtime], None]]:
    """Reproducible ids for scripted runs: hash(seed, records at open, draw number)."""
    state = {"base": 0, "k": 0}

    def new_id() -> str:
        state["k"] += 1
        return hashlib.sha256(f"{seed}:{state['base']}:{state['k']}".encode()).hexdigest()[:32]

    def bind(rt: Runtime) -> None:
        state["base"] = len(rt.store.refs(include_tombstoned=True))

    return new_id, bind


def _open(args: argparse.Namespace) -> Runtime:
    root = args.store or os.environ.get(STORE_ENV)
    if not root:
        raise _Usage(f"no store given (use --store or set {STORE_ENV})")
    seed = os.environ.get(ID_SEED_ENV)
    if seed is None:
        return Runtime.open(root)
    new_id, bind = _seeded_ids(seed)
    rt = Runtime.open(root, new_id=new_id)
    bind(rt)
    return rt


def _now(args: argparse.Namespace) -> int:
    return args.now if args.now is not None else utcnow()


def _read_key(path: str | None) -> bytes | None:
    return Path(path).read_bytes() if path else None


def _target(args: argparse.Namespace) -> PdRef | str:
    return PdRef.parse(args.ref) if args.ref else args.subject


# -- commands -------------------------------------------------------------

def cmd_init(args: argparse.Namespace, out) -> int:
    rt = Runtime.init(args.dir, authority_public_key=_read_key(args.authority_key))
    rt.close()
    print(f"initialized store at {args.dir}", file=out)
    return 0


def cmd_types_load(args: argparse.Namespace, out) -> int:
    with _open(args) as rt:
        for decl in rt.load_types(Path(args.file).read_text("utf-8")):
            print(f"loaded type {decl.name} ({len(decl.fields)} fields, {len(decl.views)} views)", file=out)
    return 0


def cmd_collect(args: argparse.Namespace, out) -> int:
    payload = load_payload(args.input)
    with _open(args) as rt:
        result = rt.ps.collect(args.type, args.source, payload, now=_now(args))
    for ref in result.refs:
        print(ref, file=out)
    for index, err in result.rejected:
        print(f"rejected entry {index}: {err}", file=out)
    print(f"collected {len(result.refs)} record(s)", file=out)
    return 0 if not result.rejected else 1


def cmd_consent_set(args: argparse.Namespace, out) -> int:
    with _open(args) as rt:
        n = rt.rights.set_consent(_target(args), args.purpose, _grant(args.grant), now=_now(args))
    print(f"updated {n} membrane(s)", file=out)
    return 0


def cmd_proc_register(args: argparse.Namespace, out) -> int:
    path = Path(args.file)
    with _open(args) as rt:
        try:
            pid = rt.ps.ps_register(path.read_text("utf-8"), args.approve, name=path.stem, now=_now(args))
        except RegistrationAlert as alert:
            print(f"pending approval: {alert.processing_id} (run `proc approve {alert.processing_id}`)",
                  file=sys.stderr)
            raise
    print(f"registered {pid}", file=out)
    return 0


def cmd_proc_approve(args: argparse.Namespace, out) -> int:
    with _open(args) as rt:
        pid = rt.ps.ps_approve(args.id)
    print(f"approved {pid}", file=out)
    return 0


def cmd_proc_list(args: argparse.Namespace, out) -> int:
    with _open(args) as rt:
        for s in rt.ps.list_processings():
            accessed = ",".join(s.accessed) or "-"
            print(f"{s.id}\t{s.state}\tpurpose={s.purpose}\tinput={s.input_type} view={s.declared_view}"
                  f"\toutput={s.output}\treads={accessed}", file=out)
    return 0


def cmd_invoke(args: argparse.Namespace, out) -> int:
    if args.ref:
        selector = Selector.of_refs(PdRef.parse(r) for r in args.ref)
    elif args.subject:
        selector = Selector.of_subject(args.subject)
    elif args.all or not args.collect:
        selector = Selector.all()
    else:
        selector = None  # just the records collected by this call
    collection = None
    if args.collect:
        if not (args.source and args.input):
            raise _Usage("--collect needs --source and --input")
        collection = (args.source, args.input)
    with _open(args) as rt:
        result = rt.ps.ps_invoke(args.id, selector, collection, args.collect, now=_now(args))
    print(result.summary(), file=out)
    # scalar results are the processing's declared non-PD output
    for ref, value in result.scalars:
        print(f"{ref}\t{json.dumps(value)}", file=out)
    for ref in result.pd_refs:
        print(f"-> {ref}", file=out)
    return 0


def cmd_rights_export(args: argparse.Namespace, out) -> int:
    with _open(args) as rt:
        s = rt.rights.export_subject(args.subject, args.out)
    print(f"exported {s.records} record(s) and {s.audit_entries} audit entries to {s.path}", file=out)
    return 0


def cmd_rights_forget(args: argparse.Namespace, out) -> int:
    with _open(args) as rt:
        n = rt.rights.forget(_target(args), _read_key(args.authority_key), now=_now(args))
    if n == 0:
        print("warning: nothing left to erase", file=sys.stderr)
    print(f"erased {n} record(s)", file=out)
    return 0


def cmd_audit_show(args: argparse.Namespace, out) -> int:
    with _open(args) as rt:
        if not rt.audit.verify():
            print("warning: audit chain does not verify", file=sys.stderr)
        for e in rt.audit.query(subject=args.subject, ref=args.ref, run=args.run, kind=args.kind):
            print(json.dumps(e.to_dict(), sort_keys=True), file=out)
    return 0


def cmd_sweep(args: argparse.Namespace, out) -> int:
    with _open(args) as rt:
        n = rt.rights.sweep(_now(args))
    print(f"swept {n} expired record(s)", file=out)
    return 0


def cmd_authority_keygen(args: argparse.Namespace, out) -> int:
    private = Path(args.private).resolve()
    store = args.store or os.environ.get(STORE_ENV)
    if store and Path(store).resolve() in private.parents:
        raise _Usage("the authority private key must not live inside the store directory")
    priv_pem, pub_pem = generate_authority_keypair()
    private.write_bytes(priv_pem)
    os.chmod(private, 0o600)
    Path(args.public).write_bytes(pub_pem)
    print(f"wrote {args.public} (public) and {args.private} (private)", file=out)
    return 0


def cmd_authority_decrypt(args: argparse.Namespace, out) -> int:
    with _open(args) as rt:
        env = rt.rights.envelope(PdRef.parse(args.ref))
    Path(args.out).write_bytes(authority_decrypt(env, Path(args.key).read_bytes()))
    print(f"wrote canonical record of {args.ref} to {args.out}", file=out)
    return 0


# -- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--store", default=argparse.SUPPRESS, help=f"store directory (or ${STORE_ENV})")
    common.add_argument("--now", type=_instant, default=argparse.SUPPRESS, metavar="DATE",
                        help="clock override, YYYY-MM-DD or ISO-8601")
    common.add_argument("--authority-key", default=argparse.SUPPRESS, metavar="PEM",
                        help="authority public key file")

    parser = argparse.ArgumentParser(prog="pdguard", parents=[common],
                                     description="Typed personal-data store with consent-mediated processing.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(subparsers, name, func, **kw):
        p = subparsers.add_parser(name, parents=[common], **kw)
        p.set_defaults(func=func)
        return p

    p = add(sub, "init", cmd_init, help="create a store")
    p.add_argument("dir")

    types = sub.add_parser("types").add_subparsers(dest="types_cmd", required=True)
    add(types, "load", cmd_types_load).add_argument("file")

    p = add(sub, "collect", cmd_collect, help="store records from a payload file")
    p.add_argument("--type", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--input", required=True)

    consent = sub.add_parser("consent").add_subparsers(dest="consent_cmd", required=True)
    p = add(consent, "set", cmd_consent_set)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--ref")
    g.add_argument("--subject")
    p.add_argument("--purpose", required=True)
    p.add_argument("--grant", required=True, help="all | none | <view>")

    proc = sub.add_parser("proc").add_subparsers(dest="proc_cmd", required=True)
    p = add(proc, "register", cmd_proc_register)
    p.add_argument("file")
    p.add_argument("--approve", action="store_true", help="accept a registration alert")
    add(proc, "approve", cmd_proc_approve).add_argument("id")
    add(proc, "list", cmd_proc_list)

    p = add(sub, "invoke", cmd_invoke, help="run a registered processing")
    p.add_argument("id")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--all", action="store_true")
    g.add_argument("--ref", action="append")
    g.add_argument("--subject")
    p.add_argument("--collect", action="store_true")
    p.add_argument("--source")
    p.add_argument("--input")

    rights = sub.add_parser("rights").add_subparsers(dest="rights_cmd", required=True)
    p = add(rights, "export", cmd_rights_export)
    p.add_argument("--subject", required=True)
    p.add_argument("--out", required=True)
    p = add(rights, "forget", cmd_rights_forget)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--ref")
    g.add_argument("--subject")

    audit = sub.add_parser("audit").add_subparsers(dest="audit_cmd", required=True)
    p = add(audit, "show", cmd_audit_show)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--subject")
    g.add_argument("--ref")
    g.add_argument("--run", type=int)
    p.add_argument("--kind")

    add(sub, "sweep", cmd_sweep, help="crypto-erase expired records")

    authority = sub.add_parser("authority").add_subparsers(dest="authority_cmd", required=True)
    p = add(authority, "keygen", cmd_authority_keygen)
    p.add_argument("--public", required=True)
    p.add_argument("--private", required=True)
    p = add(authority, "decrypt", cmd_authority_decrypt)
    p.add_argument("--ref", required=True)
    p.add_argument("--key", required=True, help="authority private key file")
    p.add_argument("--out", required=True)
    return parser


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("store", "now", "authority_key"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args, out)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"pdguard: error: {exc}", file=sys.stderr)
        return 2
    except PdError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
