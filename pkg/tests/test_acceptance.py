"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run directly (``python tests/test_acceptance.py``) for the table alone.
"""

import pytest

from asyncoffload.checks import CHECKS, format_table, run_all, run_check

SLOW = {9, 11}


def _line(res) -> str:
    return f"[{res.verdict}] #{res.id:<2} {res.claim}: {res.computed} (reference {res.reference}; {res.tolerance})"


@pytest.mark.parametrize("check_id", [pytest.param(i, marks=pytest.mark.slow) if i in SLOW else i
                                      for i in sorted(CHECKS)])
def test_criterion(check_id, capsys):
    res = run_check(check_id)
    with capsys.disabled():
        print("\n" + _line(res))
    assert res.passed, _line(res)


if __name__ == "__main__":
    print(format_table(run_all()))
