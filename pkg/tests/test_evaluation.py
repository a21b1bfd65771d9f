from dataclasses import replace

import numpy as np
import pytest

from bidfit.data import demo_dataset
from bidfit.estimation import EstimationConfig
from bidfit.evaluation import (InsufficientHistoryError, benchmark, cross_validate, metrics,
                               rolling_forecast, select_best, select_test_days)


@pytest.fixture(scope="module")
def short():
    frame, _ = demo_dataset(16, seed=11)
    return frame


CFG = EstimationConfig(n_blocks=2, penalty=0.1, forgetting=1.0)


def test_metric_examples():
    actual = np.array([10.0, 20.0, 40.0])
    assert metrics(actual, actual).as_dict() == {"mae": 0.0, "rmse": 0.0, "mape": 0.0}
    assert metrics(1.1 * actual, actual).mape == pytest.approx(0.1, abs=1e-15)
    m = metrics([1.0, 5.0], [2.0, 1.0])
    assert (m.mae, m.rmse) == (pytest.approx(2.5), pytest.approx(np.sqrt(8.5)))


def test_metrics_masking():
    pred, actual = np.array([1.0, 100.0, 3.0]), np.array([2.0, 1.0, 3.0])
    assert metrics(pred, actual, [1, 0, 1]).mae == pytest.approx(0.5)
    with pytest.raises(ValueError, match="masked"):
        metrics(pred, actual, [0, 0, 0])
    with pytest.raises(ValueError):
        metrics([1.0], [1.0, 2.0])


def test_ten_day_backtest_counts(short):
    fits = []
    report = rolling_forecast(short, CFG, "inv", n_test_days=10, train_days=4,
                              on_fit=lambda issue, train: fits.append((issue, train)))
    assert len(fits) == 10
    assert report.predicted.shape == (240,)
    assert len(report.per_day()) == 10
    for issue, train in fits:
        assert train.timestamps.max() < issue
        assert issue.astype("datetime64[h]").astype(int) % 24 == 12
    np.testing.assert_array_equal(report.issue_times, [f[0] for f in fits])


def test_no_lookahead_in_training_window(short):
    seen = []
    days = select_test_days(short, 3)
    rolling_forecast(short, CFG, "arx", days=days, train_days=10,
                     arx_options={"lags": 2},
                     on_fit=lambda issue, train: seen.append(train.timestamps[-1] - issue))
    assert all(gap == -np.timedelta64(1, "h") for gap in seen)


def test_forecasts_ignore_future_loads(short):
    days = select_test_days(short, 2)
    base = rolling_forecast(short, CFG, "simple-inv", days=days, train_days=4)
    start = short.index_of(days[0].astype("datetime64[s]") - np.timedelta64(12, "h"))
    scrambled = replace(short, load=np.r_[short.load[:start], short.load[start:][::-1]])
    again = rolling_forecast(scrambled, CFG, "simple-inv", days=days[:1], train_days=4)
    np.testing.assert_array_equal(again.predicted, base.predicted[:24])


def test_unmeasured_day_is_reported_but_not_scored(short):
    days = select_test_days(short, 3)
    t0 = short.index_of(days[1].astype("datetime64[s]"))
    gap = short.gap.copy()
    gap[t0:t0 + 24] = 0
    frame = replace(short, gap=gap)
    report = rolling_forecast(frame, CFG, "simple-inv", days=days, train_days=4)
    assert report.predicted.size == 72
    rows = report.per_day()
    assert np.isnan(rows[1]["mape"]) and not np.isnan(rows[0]["mape"])
    keep = np.r_[0:24, 48:72]
    assert report.mape == pytest.approx(
        metrics(report.predicted[keep], report.actual[keep]).mape)


def test_metrics_permutation_invariant(short):
    report = rolling_forecast(short, CFG, "arx", n_test_days=4, train_days=10,
                              arx_options={"lags": 2})
    order = np.random.default_rng(0).permutation(4)
    idx = np.concatenate([np.arange(24 * d, 24 * d + 24) for d in order])
    shuffled = metrics(report.predicted[idx], report.actual[idx], report.gap[idx])
    assert shuffled.mape == pytest.approx(report.mape, rel=1e-12)
    assert shuffled.rmse == pytest.approx(report.rmse, rel=1e-12)


def test_insufficient_history(short):
    with pytest.raises(InsufficientHistoryError):
        rolling_forecast(short, CFG, "inv", n_test_days=2, train_days=30)
    with pytest.raises(InsufficientHistoryError):
        select_test_days(short, 40)
    with pytest.raises(ValueError, match="unknown method"):
        rolling_forecast(short, CFG, "oracle", n_test_days=1)


def test_report_files(short, tmp_path):
    report = rolling_forecast(short, CFG, "simple-inv", n_test_days=2, train_days=4)
    report.to_csv(tmp_path / "series.csv")
    report.days_to_csv(tmp_path / "days.csv")
    lines = (tmp_path / "series.csv").read_text().splitlines()
    assert lines[0] == "timestamp,predicted,actual,gap" and len(lines) == 49
    assert len((tmp_path / "days.csv").read_text().splitlines()) == 3


def test_one_cell_grid(short):
    cv = cross_validate(short, CFG, penalties=[0.2], forgetting=[2.0], method="simple-inv",
                        validation_days=2, train_days=4)
    assert (cv.best_penalty, cv.best_forgetting) == (0.2, 2.0)
    assert cv.surface.shape == (1, 1)


def test_surface_independent_of_order(short):
    kw = dict(method="simple-inv", validation_days=2, train_days=4)
    a = cross_validate(short, CFG, penalties=[0.1, 0.3], forgetting=[0.0, 3.0], **kw)
    b = cross_validate(short, CFG, penalties=[0.3, 0.1], forgetting=[3.0, 0.0], **kw)
    np.testing.assert_array_equal(a.surface, b.surface[::-1, ::-1])
    assert (a.best_penalty, a.best_forgetting) == (b.best_penalty, b.best_forgetting)


def test_tie_breaking():
    L, E = np.array([0.1, 0.3, 1.0]), np.array([0.0, 1.0, 2.0])
    surface = np.full((3, 3), 0.2)
    surface[0, 1] = surface[1, 2] = surface[1, 1] = 0.1
    assert select_best(L, E, surface) == (0.3, 1.0)
    surface[1, 1] = 0.15
    assert select_best(L, E, surface) == (0.3, 2.0)


def test_empty_grid(short):
    with pytest.raises(ValueError, match="empty"):
        cross_validate(short, CFG, penalties=[], forgetting=[1.0])


def test_benchmark_shares_test_days(short):
    out = benchmark(short, CFG, methods=("arx", "simple-inv"), n_test_days=2, train_days=4,
                    arx_options={"lags": 2})
    np.testing.assert_array_equal(out["arx"].timestamps, out["simple-inv"].timestamps)
