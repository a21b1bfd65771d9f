import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bidfit.consumer import BidModel  # noqa: E402
from bidfit.data import MarketData  # noqa: E402

CRITERIA = {}


def record_criterion(number, passed, detail):
    """Remember one acceptance outcome for the end-of-run summary."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[number])


def hourly(n, start="2020-01-01T00:00:00"):
    return np.datetime64(start) + np.arange(n) * np.timedelta64(1, "h")


def make_frame(price, load, features=None, gap=None, names=None):
    price = np.asarray(price, dtype=float)
    T = price.size
    features = np.zeros((T, 0)) if features is None else np.asarray(features, float).reshape(T, -1)
    gap = np.ones(T, int) if gap is None else gap
    return MarketData(hourly(T), price, load, features, gap, tuple(names or ()))


def random_bid_model(rng, n_blocks, n_features=0):
    """A random model that stays feasible for features in [0, 1]."""
    utility = np.sort(rng.uniform(0.02, 0.3, n_blocks))[::-1]
    coef = lambda scale: rng.uniform(-scale, scale, n_features)
    pmin = rng.uniform(5.0, 20.0)
    return BidModel(
        utility=utility, utility_coef=coef(0.02),
        ramp_up=rng.uniform(3.0, 15.0), ramp_up_coef=coef(1.0),
        ramp_down=rng.uniform(3.0, 15.0), ramp_down_coef=coef(1.0),
        pmin=pmin, pmin_coef=coef(1.0),
        pmax=pmin + rng.uniform(10.0, 40.0), pmax_coef=coef(1.0),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
