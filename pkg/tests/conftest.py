from __future__ import annotations

import hashlib
import itertools
import re
from importlib import resources
from pathlib import Path

import pytest

from pdguard.clock import parse_instant
from pdguard.envelope import generate_authority_keypair
from pdguard.system import Runtime

CORPUS = resources.files("pdguard") / "corpus"
GOLDEN = Path(__file__).parent / "golden"

PERSON_PDT = """\
type person {
  fields { first_name: string, last_name: string };
  consent { support: all };
  collection { web_form: person_form.html };
  origin: subject;
  age: 2Y;
  sensitivity: medium;
}
"""


def user_pdt() -> str:
    return (CORPUS / "user.pdt").read_text("utf-8")


def compute_age_src() -> str:
    return (CORPUS / "compute_age.pproc").read_text("utf-8")


def counter_ids(seed: str = "t"):
    """Deterministic 32-hex id generator for golden tests."""
    counter = itertools.count(1)
    return lambda: hashlib.sha256(f"{seed}:{next(counter)}".encode()).hexdigest()[:32]


def ts(text: str) -> int:
    return parse_instant(text)


@pytest.fixture(scope="session")
def authority_keys() -> tuple[bytes, bytes]:
    """(private PEM, public PEM); generated once, kept outside any store dir."""
    return generate_authority_keypair(2048)


@pytest.fixture
def make_runtime(tmp_path, authority_keys):
    opened: list[Runtime] = []

    def make(name: str = "store", *, seed: str | None = "t", types: tuple[str, ...] = (),
             sync: bool = False) -> Runtime:
        rt = Runtime.init(tmp_path / name, authority_public_key=authority_keys[1], sync=sync,
                          new_id=counter_ids(seed) if seed else None)
        for text in types:
            rt.load_types(text)
        opened.append(rt)
        return rt

    yield make
    for rt in opened:
        rt.close()


@pytest.fixture
def user_rt(make_runtime) -> Runtime:
    return make_runtime(types=(user_pdt(),))


# -- acceptance summary -----------------------------------------------------

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRITERION.search(getattr(rep, "nodeid", ""))
            if m and getattr(rep, "when", "call") in ("call", "setup"):
                n = int(m.group(1))
                if outcome != "passed" or n not in rows:
                    rows[n] = ("PASS" if outcome == "passed" else "FAIL", m.group(2))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(rows):
        verdict, name = rows[n]
        terminalreporter.write_line(f"criterion {n:2d} [{verdict}] {name.replace('_', ' ')}")
