"""Scenario builders shared by the unit and acceptance suites."""

from __future__ import annotations

from conftest import PERSON_PDT, ts
from pdguard.pdtype import NONE

GREETING = ("name: can_greet\npurpose: support\ninput: person all\noutput: bool\n\n"
            "has(first_name) and has(last_name)\n")


def chiraz_scenario(rt) -> dict:
    """Two subjects in the `person` table; Chiraz gets one processing run and a consent change."""
    rt.load_types(PERSON_PDT)
    t = ts("2024-05-02")
    res = rt.ps.collect("person", "web_form", [
        {"subject_id": "chiraz", "first_name": "Chiraz", "last_name": "Benamor"},
        {"subject_id": "other", "first_name": "Someone", "last_name": "Else"},
    ], now=t)
    chiraz, other = res.refs
    rt.ps.ps_register(GREETING, now=t)
    rt.ps.ps_invoke("can_greet", now=t + 3600)
    rt.rights.set_consent("chiraz", "marketing", NONE, now=t + 7200)
    return {"chiraz": chiraz, "other": other}
