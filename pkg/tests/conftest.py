import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cltv import datagen
from cltv.data_model import DAY, TimeSplit

START = datagen.DEFAULT_START


@pytest.fixture(scope="session")
def small_log():
    cfg = datagen.GenConfig(n_customers=400, n_products=60, seed=11)
    events, truth = datagen.generate_with_truth(cfg)
    return events, truth, TimeSplit.from_start(cfg.start_ts)


@pytest.fixture
def split():
    return TimeSplit.from_start(START)


def day(d):
    """Timestamp ``d`` days after the default window start."""
    return START + int(round(d * DAY))


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, secs, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key:>3}  {'PASS' if ok else 'FAIL'}  {secs:7.1f}s  {detail}")
