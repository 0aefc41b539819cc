"""Build a scripted-provider script for offline pipeline runs.

Worker replies are computed from the oracle statistics of each chunk, so a
scripted run exercises parsing, ordering and cross-checking with realistic
numbers. Replies are keyed on prompt content only.
"""

from __future__ import annotations

import json
from typing import Any

from . import prompts
from .airdata import AirQualityHistory, Pollutant, trim_to_whole_days
from .chunking import chunk_history
from .orchestrator import AnalysisTask, TaskKind, _event_json
from .stats import PM, chunk_stats, daily_averages, iqr_outlier_hours

INSTRUCTOR = "o3"
WORKER = "gpt41"


def _r(x: float) -> float:
    return round(x, 2)


def worker_reply(chunk, with_stats: bool) -> str:
    days = [{"date": d.date.isoformat(), "pm25_avg": _r(d.pm25_avg), "pm10_avg": _r(d.pm10_avg)}
            for d in daily_averages(chunk)]
    events = []
    for p in PM:
        for e in iqr_outlier_hours(list(chunk.records), p):
            events.append(dict(_event_json(e), max_level=_r(e.max_level)))
    doc: dict[str, Any] = {"daily_averages": days, "outlier_events": events}
    if with_stats:
        s = chunk_stats(chunk)
        doc["chunk_stats"] = {"pm25_mean": _r(s.pm25_mean), "pm25_std": _r(s.pm25_std),
                              "pm10_mean": _r(s.pm10_mean), "pm10_std": _r(s.pm10_std)}
    return "```json\n" + json.dumps(doc, indent=1) + "\n```"


def _peak_lines(history_chunks) -> tuple[list[str], dict]:
    peaks: dict[Pollutant, tuple[float, str]] = {}
    for c in history_chunks:
        for p in PM:
            for e in iqr_outlier_hours(list(c.records), p):
                lvl = _r(e.max_level)
                if p not in peaks or lvl > peaks[p][0]:
                    peaks[p] = (lvl, e.start_date.isoformat())
    lines = []
    for p, (lvl, day) in sorted(peaks.items(), key=lambda kv: kv[0].value):
        label = "PM2.5" if p is Pollutant.PM25 else "PM10"
        lines.append(f"- {day}:\n  - {label}: Peaked at {lvl:.2f} (highest recorded spike).")
    return lines, peaks


def reference_script(history: AirQualityHistory, task: AnalysisTask, instructor_model: str = INSTRUCTOR,
                     worker_model: str = WORKER, strict: bool = True) -> list[dict[str, Any]]:
    if history.records and history.records[0].timestamp.hour != 0:
        history = trim_to_whole_days(history)
    chunks = chunk_history(history, strict)
    numerical = task.kind is TaskKind.NUMERICAL
    schema_id = "stats-v1" if numerical else "summary-v1"
    loc = task.location
    entries: list[dict[str, Any]] = [
        {"match": {"model": instructor_model, "contains": "choose the functions required"},
         "response": "fetch_history"},
        {"match": {"model": instructor_model, "contains": "Write instructions for Worker models"},
         "response": "\n".join(f"{k}. {s}" for k, s in enumerate(prompts.schema(schema_id)["steps"], 1))
                     + f"\nschema: {schema_id}"},
        {"match": {"model": instructor_model, "contains": "exactly one function call"},
         "response": f"fetch_history(lat={loc.latitude!r}, lng={loc.longitude!r}, hours={task.hours})"},
    ]
    for c in chunks:
        entries.append({"match": {"model": worker_model, "contains": f"Data chunk {c.index} ("},
                        "response": worker_reply(c, numerical)})
    lines, _ = _peak_lines(chunks)
    entries.append({"match": {"model": instructor_model, "contains": "Worker summaries (one JSON"},
                    "response": "Key Pollutant Spike Events\n\n" + "\n".join(lines)
                                + "\n\nLevels returned to baseline after the spikes."})
    entries.append({"match": {"model": instructor_model, "contains": "write health recommendations"},
                    "response": "Air quality may aggravate respiratory conditions.\n"
                                "- Reduce the intensity of outdoor activities.\n"
                                "- Keep relevant medications available and consult a doctor if needed."})
    entries.append({"match": {"model": instructor_model, "contains": "Policy Recommendations"},
                    "response": "Air Quality Report and Policy Recommendation\n\n1. Severe Pollution Episodes\n"
                                + "\n".join(lines)
                                + "\n2. Prolonged Exposure\n3. Recurring Outliers\n4. Policy Recommendations\n"
                                  "- Issue real-time alerts for vulnerable groups."})
    return entries
