"""Exact numerical oracles for the quantities Workers are asked to report.

Conventions (also stated in the Worker prompts so model and oracle agree):

* quartiles use linear interpolation between order statistics
  (position ``p * (n - 1)`` in the sorted data);
* standard deviation is the population form (divide by N);
* outliers are values beyond ``q1 - 1.5 IQR`` or ``q3 + 1.5 IQR``, with
  consecutive flagged days merged into one event.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .airdata import HourlyRecord, Pollutant
from .chunking import Chunk, day_slice
from .errors import GapError, PreconditionError, ShapeError

log = logging.getLogger(__name__)

PM = (Pollutant.PM25, Pollutant.PM10)
IQR_FACTOR = 1.5


@dataclass(frozen=True)
class DailyAverage:
    date: date
    pm25_avg: float
    pm10_avg: float

    def level(self, pollutant: Pollutant) -> float:
        return self.pm25_avg if pollutant is Pollutant.PM25 else self.pm10_avg


@dataclass(frozen=True)
class OutlierEvent:
    """A run of flagged days and the peak level(s) seen during it.

    ``peaks`` maps pollutant to peak level. Events detected here carry one
    pollutant; Worker replies sometimes report both PM peaks in one event.
    """

    start_date: date
    end_date: date
    peaks: Mapping[Pollutant, float]

    def __post_init__(self):
        if self.start_date > self.end_date:
            raise PreconditionError(f"event starts {self.start_date} after it ends {self.end_date}")
        if not self.peaks:
            raise PreconditionError("event carries no peak level")
        for p, v in self.peaks.items():
            if not math.isfinite(v) or v < 0:
                raise PreconditionError(f"invalid peak {v!r} for {p.value}")

    @property
    def pollutant(self) -> Pollutant | None:
        return next(iter(self.peaks)) if len(self.peaks) == 1 else None

    @property
    def max_level(self) -> float:
        return max(self.peaks.values())


@dataclass(frozen=True)
class ChunkStats:
    index: int
    pm25_mean: float
    pm25_std: float
    pm10_mean: float
    pm10_std: float


@dataclass(frozen=True)
class ErrorScore:
    mae: float
    rmse: float


STAT_FIELDS = (
    ("PM10 Mean", "pm10_mean"),
    ("PM10 Std", "pm10_std"),
    ("PM2.5 Mean", "pm25_mean"),
    ("PM2.5 Std", "pm25_std"),
)


@dataclass
class ScoreTable:
    rows: dict[str, ErrorScore]
    pairs: int
    missing: list[int] = field(default_factory=list)

    @property
    def deficiency(self) -> str | None:
        if not self.missing:
            return None
        return f"{len(self.missing)} chunk(s) missing from model output: {self.missing}"


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def _pm_values(records: Iterable[HourlyRecord], pollutant: Pollutant, where: str) -> list[float]:
    out = []
    for rec in records:
        v = rec.value(pollutant)
        if v is None:
            raise GapError(f"{where}: no {pollutant.value} reading at {rec.timestamp.isoformat()}", [rec.timestamp])
        out.append(v)
    return out


def daily_averages(chunk: Chunk) -> list[DailyAverage]:
    """Mean PM2.5 and PM10 of each of the chunk's two days, in time order."""
    out = []
    for d in chunk.days:
        recs = day_slice(chunk, d)
        where = f"chunk {chunk.index} day {d}"
        out.append(DailyAverage(
            d,
            _mean(_pm_values(recs, Pollutant.PM25, where)),
            _mean(_pm_values(recs, Pollutant.PM10, where)),
        ))
    return out


def quartiles(values: Sequence[float]) -> tuple[float, float]:
    if len(values) == 0:
        raise PreconditionError("quartiles of an empty sequence")
    return percentile(values, 0.25), percentile(values, 0.75)


def percentile(values: Sequence[float], p: float) -> float:
    """Linear interpolation between closest ranks (the common default)."""
    if len(values) == 0:
        raise PreconditionError("percentile of an empty sequence")
    xs = sorted(values)
    pos = p * (len(xs) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(xs) - 1)
    frac = pos - lo
    return xs[lo] + frac * (xs[hi] - xs[lo])


def iqr_fences(values: Sequence[float]) -> tuple[float, float]:
    q1, q3 = quartiles(values)
    iqr = q3 - q1
    return q1 - IQR_FACTOR * iqr, q3 + IQR_FACTOR * iqr


def _merge_flagged(flagged: list[tuple[date, float]], pollutant: Pollutant) -> list[OutlierEvent]:
    events: list[OutlierEvent] = []
    run: list[tuple[date, float]] = []
    for d, v in sorted(flagged):
        if run and d - run[-1][0] > timedelta(days=1):
            events.append(OutlierEvent(run[0][0], run[-1][0], {pollutant: max(x for _, x in run)}))
            run = []
        run.append((d, v))
    if run:
        events.append(OutlierEvent(run[0][0], run[-1][0], {pollutant: max(x for _, x in run)}))
    return events


def iqr_outlier_days(daily: Sequence[DailyAverage], pollutant: Pollutant,
                     min_days: int = 4) -> list[OutlierEvent]:
    """Flag days whose average lies outside the 1.5 IQR fences.

    Fewer than ``min_days`` days give no meaningful quartiles; the result is
    then empty and a warning is logged.
    """
    if len(daily) < min_days:
        log.warning("outlier detection skipped: %d day(s) < %d", len(daily), min_days)
        return []
    levels = [d.level(pollutant) for d in daily]
    lo, hi = iqr_fences(levels)
    flagged = [(d.date, v) for d, v in zip(daily, levels) if v > hi or v < lo]
    return _merge_flagged(flagged, pollutant)


def iqr_outlier_hours(records: Sequence[HourlyRecord], pollutant: Pollutant,
                      min_values: int = 4) -> list[OutlierEvent]:
    """Hourly variant: fences from hourly values; events span the days of flagged hours."""
    if len(records) < min_values:
        log.warning("outlier detection skipped: %d value(s) < %d", len(records), min_values)
        return []
    values = _pm_values(records, pollutant, "hourly outliers")
    lo, hi = iqr_fences(values)
    per_day: dict[date, float] = {}
    for rec, v in zip(records, values):
        if v > hi or v < lo:
            d = rec.timestamp.date()
            per_day[d] = max(per_day.get(d, v), v)
    return _merge_flagged(list(per_day.items()), pollutant)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    mu = _mean(values)
    var = math.fsum((x - mu) ** 2 for x in values) / len(values)
    return mu, math.sqrt(var)


def chunk_stats(chunk: Chunk) -> ChunkStats:
    """Mean and population std of PM2.5 and PM10 over the full 48-hour window."""
    recs = [r for d in chunk.days for r in day_slice(chunk, d)]
    where = f"chunk {chunk.index}"
    m25, s25 = mean_std(_pm_values(recs, Pollutant.PM25, where))
    m10, s10 = mean_std(_pm_values(recs, Pollutant.PM10, where))
    return ChunkStats(chunk.index, m25, s25, m10, s10)


def _check_pair(pred: Sequence[float], truth: Sequence[float]):
    if len(pred) != len(truth):
        raise ShapeError(f"length mismatch: {len(pred)} predictions vs {len(truth)} truths")
    if not pred:
        raise ShapeError("cannot score empty sequences")


def mae(pred: Sequence[float], truth: Sequence[float]) -> float:
    _check_pair(pred, truth)
    return math.fsum(abs(p - t) for p, t in zip(pred, truth)) / len(pred)


def rmse(pred: Sequence[float], truth: Sequence[float]) -> float:
    _check_pair(pred, truth)
    return math.sqrt(math.fsum((p - t) ** 2 for p, t in zip(pred, truth)) / len(pred))


def score_worker_numbers(summaries: Sequence[ChunkStats], oracle: Sequence[ChunkStats]) -> ScoreTable:
    """MAE/RMSE per statistic between model-reported and oracle chunk stats.

    Chunks absent from ``summaries`` are excluded and listed in ``missing``.
    """
    reported = {s.index: s for s in summaries}
    pairs = [(reported[o.index], o) for o in oracle if o.index in reported]
    missing = [o.index for o in oracle if o.index not in reported]
    if missing:
        log.warning("scoring %d pair(s); missing chunks %s", len(pairs), missing)
    if not pairs:
        raise ShapeError("no chunk of the oracle was reported")
    rows = {}
    for label, attr in STAT_FIELDS:
        pred = [getattr(p, attr) for p, _ in pairs]
        truth = [getattr(o, attr) for _, o in pairs]
        rows[label] = ErrorScore(mae(pred, truth), rmse(pred, truth))
    return ScoreTable(rows, len(pairs), missing)


def write_chunk_stats_csv(stats: Sequence[ChunkStats], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["chunk", "pm25_mean", "pm25_std", "pm10_mean", "pm10_std"])
        for s in stats:
            w.writerow([s.index, f"{s.pm25_mean:.6f}", f"{s.pm25_std:.6f}", f"{s.pm10_mean:.6f}", f"{s.pm10_std:.6f}"])
    return path


def write_error_table_csv(tables: Mapping[str, ScoreTable], path: str | Path) -> Path:
    """One row per statistic, one ``mae``/``rmse`` column pair per model."""
    path = Path(path)
    models = list(tables)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric"] + [f"{m}_{k}" for m in models for k in ("mae", "rmse")])
        for label, _ in STAT_FIELDS:
            row = [label]
            for m in models:
                score = tables[m].rows[label]
                row += [f"{score.mae:.6f}", f"{score.rmse:.6f}"]
            w.writerow(row)
    return path
