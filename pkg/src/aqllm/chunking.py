"""Split a history into per-day 48-hour chunks.

Chunk ``k`` targets day ``k`` and carries the previous day as context, except
chunk 1, which has no previous day and borrows day 2 instead. Chunks 1 and 2
therefore hold the same 48 records with different target days.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date, datetime, timedelta, timezone
from typing import Sequence

from .airdata import HOUR, AirQualityHistory, HourlyRecord, Pollutant, format_timestamp
from .errors import GapError, InsufficientDataError, ShapeError

DAY = timedelta(days=1)
STRICT_HOURS = 720

DEFAULT_COLUMNS = (Pollutant.PM25, Pollutant.PM10)


@dataclass(frozen=True)
class Chunk:
    index: int
    target_day_date: date
    records: tuple[HourlyRecord, ...]
    target_first: bool = False  # True only for chunk 1, whose context day follows the target

    @property
    def days(self) -> tuple[date, date]:
        """(first, second) calendar day covered, in time order."""
        if self.target_first:
            return self.target_day_date, self.target_day_date + DAY
        return self.target_day_date - DAY, self.target_day_date

    @property
    def context_day_date(self) -> date:
        return self.days[1] if self.target_first else self.days[0]

    @property
    def span_start(self) -> datetime:
        return _midnight(self.days[0])

    @property
    def span_end(self) -> datetime:
        """Exclusive end of the 48-hour window."""
        return _midnight(self.days[1]) + DAY


def _midnight(d: date) -> datetime:
    return datetime(d.year, d.month, d.day, tzinfo=timezone.utc)


def _day_records(records: Sequence[HourlyRecord], d: date) -> tuple[HourlyRecord, ...]:
    lo = _midnight(d)
    hi = lo + DAY
    return tuple(r for r in records if lo <= r.timestamp < hi)


def chunk_history(history: AirQualityHistory, strict: bool = True) -> list[Chunk]:
    """Chunk a whole-day history into one chunk per day.

    ``strict`` requires exactly 720 hours (30 days). Otherwise any span that is
    a multiple of 24 hours and at least 48 long is accepted. Day boundaries are
    UTC midnights; missing hours inside the span are allowed here and surface
    later as ``GapError`` when a chunk's days are read.
    """
    recs = history.records
    if not recs:
        raise InsufficientDataError("history is empty")
    first, last = recs[0].timestamp, recs[-1].timestamp
    span = int((last - first) / HOUR) + 1
    if span < 48:
        raise InsufficientDataError(f"need at least 48 hours, history spans {span}")
    if span % 24:
        raise ShapeError(f"history spans {span} hours, not a multiple of 24")
    if first.hour != 0:
        raise ShapeError(f"history starts at {format_timestamp(first)}, not at a UTC midnight")
    if strict and span != STRICT_HOURS:
        raise ShapeError(f"strict mode needs {STRICT_HOURS} hours, history spans {span}")

    n_days = span // 24
    day0 = first.date()
    per_day = [_day_records(recs, day0 + k * DAY) for k in range(n_days)]
    chunks = [Chunk(1, day0, per_day[0] + per_day[1], target_first=True)]
    for k in range(1, n_days):
        chunks.append(Chunk(k + 1, day0 + k * DAY, per_day[k - 1] + per_day[k]))
    return chunks


def day_slice(chunk: Chunk, d: date) -> list[HourlyRecord]:
    """The 24 records of calendar day ``d`` in ``chunk``; raises on missing hours."""
    recs = _day_records(chunk.records, d)
    if len(recs) != 24:
        present = {r.timestamp for r in recs}
        start = _midnight(d)
        missing = [start + h * HOUR for h in range(24) if start + h * HOUR not in present]
        names = ", ".join(format_timestamp(t) for t in missing)
        raise GapError(f"chunk {chunk.index}: day {d} is missing hour(s) {names}", missing)
    return list(recs)


def target_slice(chunk: Chunk) -> list[HourlyRecord]:
    return day_slice(chunk, chunk.target_day_date)


def context_slice(chunk: Chunk) -> list[HourlyRecord]:
    return day_slice(chunk, chunk.context_day_date)


def serialize_chunk(chunk: Chunk, pollutants: Sequence[Pollutant] = DEFAULT_COLUMNS,
                    all_pollutants: bool = False) -> str:
    """Compact tabular text embedded in Worker prompts.

    One header line, then one line per hour: ``timestamp,<value>,...`` with
    values printed via ``repr`` of the float so token counts are stable.
    Missing readings are left empty.
    """
    cols = tuple(Pollutant) if all_pollutants else tuple(pollutants)
    lines = ["timestamp," + ",".join(_column_name(c, chunk) for c in cols)]
    for rec in chunk.records:
        vals = []
        for c in cols:
            v = rec.value(c)
            vals.append("" if v is None else repr(v))
        lines.append(rec.timestamp.strftime("%Y-%m-%dT%H:%MZ") + "," + ",".join(vals))
    return "\n".join(lines)


def _column_name(code: Pollutant, chunk: Chunk) -> str:
    label = "PM2.5" if code is Pollutant.PM25 else code.value
    for rec in chunk.records:
        reading = rec.readings.get(code)
        if reading is not None:
            return f"{label}[{reading.unit}]"
    return label
