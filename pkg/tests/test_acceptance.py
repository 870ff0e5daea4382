"""Acceptance suite: one test per criterion, full desk scale.

Heavy fixtures (the default-config equilibrium) are shared module-wide;
each test prints its pass/fail line so the run reads as a report.
"""

import pytest

from two_settle.acceptance import CRITERIA, AcceptanceContext


@pytest.fixture(scope="module")
def ctx():
    return AcceptanceContext(fast=False)


@pytest.mark.parametrize("index,name,fn", [(i + 1, n, f) for i, (n, f) in enumerate(CRITERIA)],
                         ids=[f"criterion_{i+1:02d}" for i in range(len(CRITERIA))])
def test_criterion(ctx, index, name, fn):
    passed, detail = fn(ctx)
    status = "PASS" if passed else "FAIL"
    print(f"[{index:2d}] {status}  {name}: {detail}")
    assert passed, f"{name}: {detail}"
