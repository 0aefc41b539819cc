import statistics
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aqllm.airdata import Pollutant
from aqllm.chunking import chunk_history
from aqllm.errors import PreconditionError, ShapeError
from aqllm.stats import (
    ChunkStats,
    DailyAverage,
    chunk_stats,
    daily_averages,
    iqr_fences,
    iqr_outlier_days,
    iqr_outlier_hours,
    mae,
    percentile,
    quartiles,
    rmse,
    score_worker_numbers,
    write_chunk_stats_csv,
    write_error_table_csv,
)

from conftest import make_history

D0 = date(2025, 1, 1)


def dailies(values, pollutant=Pollutant.PM25):
    return [DailyAverage(D0 + timedelta(days=k), v, v) for k, v in enumerate(values)]


def test_daily_average_constant():
    c = chunk_history(make_history([7.0] * 48), strict=False)[0]
    assert [d.pm25_avg for d in daily_averages(c)] == [7.0, 7.0]


def test_daily_average_closed_form():
    c = chunk_history(make_history(list(range(1, 25)) * 2), strict=False)[0]
    assert daily_averages(c)[0].pm25_avg == 12.5


@pytest.mark.parametrize("values, expected", [
    ([1, 2, 3, 4], (1.75, 3.25)),
    ([5], (5, 5)),
    ([1, 1, 1, 1, 100], (1, 1)),
])
def test_quartiles(values, expected):
    assert quartiles(values) == expected


def test_quartiles_empty():
    with pytest.raises(PreconditionError):
        quartiles([])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50), st.floats(0, 1))
def test_percentile_matches_numpy(values, p):
    assert percentile(values, p) == pytest.approx(float(np.percentile(values, p * 100)), rel=1e-12, abs=1e-6)


def test_outlier_single_spike():
    events = iqr_outlier_days(dailies([1, 1, 1, 1, 100]), Pollutant.PM25)
    assert len(events) == 1
    assert events[0].start_date == events[0].end_date == D0 + timedelta(days=4)
    assert events[0].max_level == 100
    assert events[0].pollutant is Pollutant.PM25


def test_outlier_constant():
    assert iqr_outlier_days(dailies([3] * 8), Pollutant.PM25) == []


def test_outlier_adjacent_days_merge():
    events = iqr_outlier_days(dailies([1, 1, 1, 1, 1, 1, 90, 100, 1, 1]), Pollutant.PM25)
    assert len(events) == 1
    e = events[0]
    assert (e.start_date, e.end_date, e.max_level) == (D0 + timedelta(days=6), D0 + timedelta(days=7), 100)


def test_outlier_too_few_days(caplog):
    assert iqr_outlier_days(dailies([1, 1, 100]), Pollutant.PM25) == []
    assert "skipped" in caplog.text


def test_outlier_hours_finds_spike(la_history):
    c = chunk_history(la_history)[3]
    events = iqr_outlier_hours(list(c.records), Pollutant.PM25)
    assert max(e.max_level for e in events) == 509.07


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 500, allow_nan=False), min_size=4, max_size=30), st.randoms())
def test_flagged_day_count_depends_on_multiset_only(values, rnd):
    def flagged_days(vals):
        return sum((e.end_date - e.start_date).days + 1 for e in iqr_outlier_days(dailies(vals), Pollutant.PM25))

    shuffled = values[:]
    rnd.shuffle(shuffled)
    lo, hi = iqr_fences(values)
    expected = sum(v > hi or v < lo for v in values)
    assert flagged_days(values) == flagged_days(shuffled) == expected


def test_chunk_stats_closed_forms():
    c = chunk_history(make_history([5.0] * 48), strict=False)[0]
    s = chunk_stats(c)
    assert (s.pm25_mean, s.pm25_std) == (5.0, 0.0)
    c = chunk_history(make_history([0.0, 10.0] * 24), strict=False)[0]
    s = chunk_stats(c)
    assert (s.pm25_mean, s.pm25_std) == (5.0, 5.0)


def test_chunk_stats_vs_statistics(la_history):
    for c in chunk_history(la_history):
        s = chunk_stats(c)
        v = [r.value(Pollutant.PM10) for r in c.records]
        assert s.pm10_mean == pytest.approx(statistics.fmean(v), abs=1e-9)
        assert s.pm10_std == pytest.approx(statistics.pstdev(v), abs=1e-9)


def test_mae_rmse():
    assert mae([1, 2], [1, 2]) == rmse([1, 2], [1, 2]) == 0
    assert mae([0, 0], [3, 4]) == 3.5
    assert rmse([0, 0], [3, 4]) == pytest.approx(3.5355, abs=1e-4)
    with pytest.raises(ShapeError):
        mae([1], [1, 2])
    with pytest.raises(ShapeError):
        rmse([], [])


@settings(max_examples=200)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=40))
def test_rmse_at_least_mae(pairs):
    p, t = zip(*pairs)
    assert rmse(p, t) >= mae(p, t) - 1e-12


def _oracle(n):
    return [ChunkStats(k, 10.0 + k, 1.0 + k / 10, 20.0 + k, 2.0 + k / 10) for k in range(1, n + 1)]


def test_score_against_itself():
    table = score_worker_numbers(_oracle(30), _oracle(30))
    assert all(s.mae == 0 and s.rmse == 0 for s in table.rows.values())
    assert table.deficiency is None


def test_score_constant_offset():
    shifted = [ChunkStats(s.index, s.pm25_mean + 1, s.pm25_std + 1, s.pm10_mean + 1, s.pm10_std + 1) for s in _oracle(30)]
    table = score_worker_numbers(shifted, _oracle(30))
    for s in table.rows.values():
        assert s.mae == pytest.approx(1.0) and s.rmse == pytest.approx(1.0)


def test_score_missing_chunk():
    table = score_worker_numbers(_oracle(30)[:-1], _oracle(30))
    assert table.pairs == 29
    assert list(table.missing) == [30]
    assert "30" in table.deficiency


def test_csv_writers(tmp_path):
    p = write_chunk_stats_csv(_oracle(3), tmp_path / "s.csv")
    assert len(p.read_text().splitlines()) == 4
    p = write_error_table_csv({"run": score_worker_numbers(_oracle(3), _oracle(3))}, tmp_path / "e.csv")
    assert "PM2.5 Mean" in p.read_text()
