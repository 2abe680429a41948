from __future__ import annotations

import pytest

import surface
from pdguard.dbfs import AccessCapability, _issue_capability
from pdguard.errors import CapabilityError


def test_no_capability_free_pd_returners():
    assert surface.surface_violations() == []


def test_classifier_is_not_vacuous():
    found = surface.pd_returners()
    for name in ("dbfs.Store.fetch_record", "dbfs.Store.fetch_fields", "dbfs.Store.records_of_subject",
                 "rights.authority_decrypt"):
        assert f"pdguard.{name}" in found


def test_classifier_flags_a_planted_leak(monkeypatch):
    fake = surface.Exported("pdguard.x.leak", "PdRecord", {"ref": "str"}, "def leak(ref): ...")
    monkeypatch.setattr(surface, "public_callables", lambda: [fake])
    assert surface.surface_violations() == ["pdguard.x.leak -> PdRecord takes no capability"]


def test_only_ps_invoke_reaches_the_evaluator():
    callers = surface.reaches("_ded_execute")
    library = {c for c in callers if not c.startswith("cli.")}
    assert library == {"ded.run_pipeline", "ps.ps_invoke"}
    assert surface.call_sites("run_pipeline") == {"ps.ps_invoke"}
    # the command line gets there only through ps_invoke
    assert surface.call_sites("ps_invoke") == {"cli.cmd_invoke"}


def test_trusted_issuers_are_confined():
    assert surface.module_references("_issue_ticket") == {"ps"}
    assert surface.module_references("_issue_capability") == {"ded", "rights"}


def test_capabilities_cannot_be_forged():
    with pytest.raises(CapabilityError):
        AccessCapability("ded")
    with pytest.raises(CapabilityError):
        _issue_capability("cli")
