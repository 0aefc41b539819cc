"""Instructor/Worker pipeline.

The Instructor selects functions, writes the Worker instruction and, once
every chunk has been summarized, turns the summaries into the final text.
Workers each see one 48-hour chunk. Numbers quoted by the Instructor are
checked against the Worker summaries; unmatched ones are flagged.
"""

from __future__ import annotations

import concurrent.futures
import csv
import enum
import json
import logging
import re
from dataclasses import dataclass, field
from datetime import date
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import prompts
from .airdata import AirQualityHistory, GeoPoint, Pollutant, PopulationClass, trim_to_whole_days
from .chunking import Chunk, chunk_history, serialize_chunk
from .codeexec import DataContext, Registry, RuleChecker, dispatch, gate, request_call, select_functions
from .errors import (
    AggregationError,
    CoverageError,
    MalformedSummaryError,
    NegativeConcentrationError,
    OutOfSpanError,
    PipelineError,
    PlanningError,
    PreconditionError,
    ProviderError,
    SummaryError,
)
from .gateway import Gateway, Message, assistant, system, user
from .stats import ChunkStats, DailyAverage, OutlierEvent, ScoreTable, chunk_stats, score_worker_numbers, write_chunk_stats_csv, write_error_table_csv

log = logging.getLogger(__name__)

# WHO 2021 air-quality guideline, 24-hour means, µg/m³
WHO_24H = {Pollutant.PM25: 15.0, Pollutant.PM10: 45.0}


class TaskKind(str, enum.Enum):
    TREND = "trend"
    HEALTH = "health"
    POLICY = "policy"
    NUMERICAL = "numerical-summary"


CLASS_LABELS = {
    PopulationClass.GENERAL: "the general population (healthy people)",
    PopulationClass.LUNG_DISEASE: "people with lung diseases",
    PopulationClass.HEART_DISEASE: "people with heart diseases",
    PopulationClass.PREGNANCY: "pregnant women",
    PopulationClass.ELDERLY: "the elderly",
    PopulationClass.CHILDREN: "children",
}


@dataclass(frozen=True)
class AnalysisTask:
    user_prompt: str
    location: GeoPoint
    hours: int = 720
    kind: TaskKind = TaskKind.TREND
    date: date | None = None
    population: PopulationClass | None = None
    refinement: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if not self.user_prompt or not self.user_prompt.strip():
            raise PreconditionError("empty user prompt")
        if self.kind is TaskKind.HEALTH and (self.date is None or self.population is None):
            raise PreconditionError("a health recommendation task needs a date and a population class")

    def to_json(self) -> dict[str, Any]:
        return {
            "user_prompt": self.user_prompt,
            "location": {"lat": self.location.latitude, "lng": self.location.longitude},
            "hours": self.hours,
            "kind": self.kind.value,
            "date": None if self.date is None else self.date.isoformat(),
            "population": None if self.population is None else self.population.value,
            "refinement": self.refinement,
        }


@dataclass(frozen=True)
class WorkerInstruction:
    steps: tuple[str, ...]
    schema_id: str

    def __post_init__(self):
        if self.schema_id not in prompts.schema_ids():
            raise PlanningError(f"unregistered output schema {self.schema_id!r}")

    def text(self) -> str:
        lines = ["Instructions for Worker models:"]
        lines += [f"{k}. {s}" for k, s in enumerate(self.steps, 1)]
        lines += ["", f"Output schema ({self.schema_id}):", prompts.schema(self.schema_id)["description"]]
        return "\n".join(lines)


@dataclass
class Plan:
    functions: list[str]
    instruction: WorkerInstruction
    instructor_reply: str = ""


@dataclass
class WorkerSummary:
    index: int
    daily_averages: list[DailyAverage] = field(default_factory=list)
    outlier_events: list[OutlierEvent] = field(default_factory=list)
    chunk_stats: ChunkStats | None = None
    prompts: int = 1
    failed: bool = False
    raw_reply: str | None = None
    error: str | None = None

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "chunk": self.index,
            "daily_averages": [
                {"date": d.date.isoformat(), "pm25_avg": d.pm25_avg, "pm10_avg": d.pm10_avg}
                for d in self.daily_averages
            ],
            "outlier_events": [_event_json(e) for e in self.outlier_events],
        }
        if self.chunk_stats is not None:
            s = self.chunk_stats
            out["chunk_stats"] = {"pm25_mean": s.pm25_mean, "pm25_std": s.pm25_std,
                                  "pm10_mean": s.pm10_mean, "pm10_std": s.pm10_std}
        return out

    def values(self) -> list[tuple[float, Pollutant | None]]:
        """Every reported number with the pollutant it refers to."""
        out: list[tuple[float, Pollutant | None]] = []
        for d in self.daily_averages:
            out += [(d.pm25_avg, Pollutant.PM25), (d.pm10_avg, Pollutant.PM10)]
        for e in self.outlier_events:
            out += [(v, p) for p, v in e.peaks.items()]
        if self.chunk_stats is not None:
            s = self.chunk_stats
            out += [(s.pm25_mean, Pollutant.PM25), (s.pm25_std, Pollutant.PM25),
                    (s.pm10_mean, Pollutant.PM10), (s.pm10_std, Pollutant.PM10)]
        return out


def _pm_label(p: Pollutant) -> str:
    return "PM2.5" if p is Pollutant.PM25 else p.value


def _event_json(e: OutlierEvent) -> dict[str, Any]:
    out: dict[str, Any] = {"start_date": e.start_date.isoformat(), "end_date": e.end_date.isoformat()}
    if e.pollutant is not None:
        out.update(pollutant=_pm_label(e.pollutant), max_level=e.max_level)
    else:
        out.update({f"peak_{p.value.lower()}": v for p, v in e.peaks.items()})
    return out


@dataclass(frozen=True)
class Finding:
    date_span: str
    pollutant: Pollutant | None
    level: float
    classification: str
    verified: bool
    chunks: tuple[int, ...] = ()
    source: str = "narrative"  # narrative | summaries

    def row(self) -> list:
        return [self.date_span, "" if self.pollutant is None else _pm_label(self.pollutant), repr(self.level),
                self.classification, "yes" if self.verified else "no",
                " ".join(map(str, self.chunks)), self.source]


@dataclass
class AggregateReport:
    narrative: str
    findings: list[Finding]
    provenance: tuple[int, ...]

    @property
    def flagged(self) -> list[Finding]:
        """Numbers the Instructor quoted that no Worker reported: possible hallucinations."""
        return [f for f in self.findings if not f.verified]


# --- planning -------------------------------------------------------------------

_SCHEMA_RE = re.compile(r"(?im)schema\s*(?:id)?\s*[:=]\s*[`'\"]?([a-z0-9][a-z0-9-]*)")
_STEP_RE = re.compile(r"(?m)^\s*(?:\*\*)?([1-4])[.)]\s*(?:\*\*)?\s*(.+?)\s*$")


def plan(task: AnalysisTask, registry: Registry, gateway: Gateway, model: str) -> Plan:
    """Select functions and get the Worker instruction from the Instructor.

    The reply must name a registered schema. If it contains four numbered
    steps they become the instruction; otherwise the schema's stock steps
    are used. Numerical tasks always use the ``stats-v1`` schema.
    """
    if not task.user_prompt.strip():
        raise PreconditionError("empty user prompt")
    specs = select_functions(task.user_prompt, registry, gateway, model)
    request = prompts.render(prompts.template("plan_request"), KIND=task.kind.value,
                             SCHEMAS=", ".join(prompts.schema_ids()))
    reply = gateway.chat(model, [system(prompts.instructor_system_prompt()), system(request), user(task.user_prompt)],
                         tag="instructor-02-plan").content
    m = _SCHEMA_RE.search(reply)
    if not m or m.group(1) not in prompts.schema_ids():
        raise PlanningError(f"instructor reply names no registered schema: {reply[:120]!r}")
    schema_id = m.group(1)
    if task.kind is TaskKind.NUMERICAL and schema_id != "stats-v1":
        log.warning("numerical task planned with %s; using stats-v1", schema_id)
        schema_id = "stats-v1"
    steps: dict[int, str] = {}
    for num, text in _STEP_RE.findall(reply):
        steps.setdefault(int(num), text)
    if sorted(steps) == [1, 2, 3, 4] and schema_id == m.group(1):
        chosen = tuple(steps[k] for k in range(1, 5))
    else:
        chosen = tuple(prompts.schema(schema_id)["steps"])
    return Plan([s.name for s in specs], WorkerInstruction(chosen, schema_id), reply)


# --- Worker summaries ----------------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:json|JSON)?\s*\n?(.*?)```", re.S)


def _extract_block(text: str) -> str:
    m = _FENCE_RE.search(text)
    block = m.group(1) if m else text
    block = block.strip()
    if not block.startswith("{"):
        start = block.find('"daily_averages"')
        if start < 0:
            start = block.find("{")
            if start < 0:
                raise MalformedSummaryError("no structured block in reply")
        else:
            block = "{" + block[start:].rstrip().rstrip(",") + "}"
    return block


def _number(obj: Mapping, keys: Sequence[str], what: str) -> float:
    for k in keys:
        if k in obj:
            v = obj[k]
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise MalformedSummaryError(f"{what}: {k} is not a number: {v!r}")
            if v < 0:
                raise NegativeConcentrationError(f"{what}: negative concentration {k}={v}")
            return float(v)
    raise MalformedSummaryError(f"{what}: missing {' / '.join(keys)}")


def _date(value, what: str) -> date:
    try:
        return date.fromisoformat(str(value))
    except ValueError:
        raise MalformedSummaryError(f"{what}: bad date {value!r}") from None


_PM25_KEYS = ("pm25_avg", "PM2.5_avg", "pm2_5_avg", "PM25_avg")
_PM10_KEYS = ("pm10_avg", "PM10_avg")


def parse_worker_summary(text: str, chunk: Chunk | None = None, index: int | None = None) -> WorkerSummary:
    """Parse a Worker reply into a summary.

    Accepts a fenced JSON block or bare JSON, with or without the outer
    braces. Outlier events may use ``pollutant``/``max_level`` or one
    ``peak_pm25``/``peak_pm10`` pair. With a ``chunk``, every date must fall
    on one of the chunk's two days.
    """
    block = _extract_block(text)
    try:
        doc = json.loads(block)
    except json.JSONDecodeError as exc:
        raise MalformedSummaryError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedSummaryError("summary is not a JSON object")
    for key in ("daily_averages", "outlier_events"):
        if not isinstance(doc.get(key), list):
            raise MalformedSummaryError(f"missing list {key!r}")

    dailies = []
    for k, item in enumerate(doc["daily_averages"]):
        what = f"daily_averages[{k}]"
        if not isinstance(item, dict) or "date" not in item:
            raise MalformedSummaryError(f"{what}: expected an object with a date")
        dailies.append(DailyAverage(_date(item["date"], what), _number(item, _PM25_KEYS, what),
                                    _number(item, _PM10_KEYS, what)))

    events = []
    for k, item in enumerate(doc["outlier_events"]):
        what = f"outlier_events[{k}]"
        if not isinstance(item, dict) or "start_date" not in item:
            raise MalformedSummaryError(f"{what}: expected an object with a start_date")
        start = _date(item["start_date"], what)
        end = _date(item.get("end_date", item["start_date"]), what)
        if start > end:
            raise MalformedSummaryError(f"{what}: start_date after end_date")
        if "pollutant" in item:
            try:
                code = Pollutant.parse(str(item["pollutant"]))
            except Exception as exc:
                raise MalformedSummaryError(f"{what}: {exc}") from None
            peaks = {code: _number(item, ("max_level",), what)}
        else:
            peaks = {}
            for code, key in ((Pollutant.PM25, "peak_pm25"), (Pollutant.PM10, "peak_pm10")):
                if key in item:
                    peaks[code] = _number(item, (key,), what)
            if not peaks:
                raise MalformedSummaryError(f"{what}: no pollutant level")
        events.append(OutlierEvent(start, end, peaks))

    stats = None
    if doc.get("chunk_stats") is not None:
        cs = doc["chunk_stats"]
        if not isinstance(cs, dict):
            raise MalformedSummaryError("chunk_stats is not an object")
        idx = index if index is not None else (chunk.index if chunk else 0)
        stats = ChunkStats(idx, *(_number(cs, (k,), "chunk_stats")
                                  for k in ("pm25_mean", "pm25_std", "pm10_mean", "pm10_std")))

    if chunk is not None:
        span = set(chunk.days)
        dates = [d.date for d in dailies] + [x for e in events for x in (e.start_date, e.end_date)]
        outside = sorted({d for d in dates if d not in span})
        if outside:
            raise OutOfSpanError(f"chunk {chunk.index}: dates {[d.isoformat() for d in outside]} outside "
                                 f"{chunk.days[0]}..{chunk.days[1]}")
    idx = index if index is not None else (chunk.index if chunk is not None else 0)
    return WorkerSummary(idx, dailies, events, stats)


def _worker_messages(chunk: Chunk, instruction: WorkerInstruction, all_pollutants: bool) -> list[Message]:
    table = serialize_chunk(chunk, all_pollutants=all_pollutants)
    header = table.split("\n", 1)[0]
    body = prompts.render(prompts.template("worker_user"), INDEX=chunk.index,
                          TARGET=chunk.target_day_date.isoformat(), COLUMNS=header, CHUNK_DATA=table)
    return [system(instruction.text()), user(body)]


def summarize_chunk(chunk: Chunk, instruction: WorkerInstruction, gateway: Gateway, model: str,
                    all_pollutants: bool = False) -> WorkerSummary:
    tag = f"worker-{chunk.index:02d}"
    messages = _worker_messages(chunk, instruction, all_pollutants)
    reply = ""
    for attempt in (1, 2):
        try:
            reply = gateway.chat(model, messages, tag=tag).content
        except ProviderError as exc:
            log.error("chunk %d: worker call failed: %s", chunk.index, exc)
            return WorkerSummary(chunk.index, prompts=attempt, failed=True, raw_reply=reply or None, error=str(exc))
        try:
            summary = parse_worker_summary(reply, chunk)
        except SummaryError as exc:
            if attempt == 2:
                log.error("chunk %d: unparseable worker reply after re-prompt: %s", chunk.index, exc)
                return WorkerSummary(chunk.index, prompts=2, failed=True, raw_reply=reply, error=str(exc))
            note = prompts.render(prompts.template("worker_reprompt"), ERROR=str(exc),
                                  SCHEMA=prompts.schema(instruction.schema_id)["description"])
            messages = messages + [assistant(reply or "(empty reply)"), user(note)]
            continue
        summary.prompts = attempt
        return summary
    raise AssertionError("unreachable")


def summarize_chunks(chunks: Sequence[Chunk], instruction: WorkerInstruction, gateway: Gateway, model: str,
                     all_pollutants: bool = False) -> list[WorkerSummary]:
    """Fan chunks out to Workers; results come back in chunk order."""
    if not chunks:
        raise PreconditionError("no chunks to summarize")
    workers = max(1, gateway.max_concurrency)
    with concurrent.futures.ThreadPoolExecutor(workers) as pool:
        futures = [pool.submit(summarize_chunk, c, instruction, gateway, model, all_pollutants) for c in chunks]
        results = [f.result() for f in futures]
    return sorted(results, key=lambda s: s.index)


# --- findings ----------------------------------------------------------------------------

_MONTHS = ("january|february|march|april|may|june|july|august|september|october|november|december"
           "|jan|feb|mar|apr|jun|jul|aug|sep|sept|oct|nov|dec")
_DATE_RE = re.compile(
    rf"(?i)\b(?:\d{{4}}-\d{{2}}-\d{{2}}(?:\s*(?:–|-|to)\s*\d{{4}}-\d{{2}}-\d{{2}})?"
    rf"|(?:{_MONTHS})\.?\s+\d{{1,2}}(?:\s*(?:–|-|to)\s*\d{{1,2}})?(?:,?\s*\d{{4}})?"
    rf"|\d{{1,2}}/\d{{1,2}}(?:\s*(?:–|-)\s*\d{{1,2}}/\d{{1,2}})?)"
)
_POLLUTANT_RE = re.compile(r"(?i)\bPM\s?(2\.5|25|10)\b")
# decimal numbers, or integers followed by a concentration unit
_LEVEL_RE = re.compile(r"(?<![\w.\-/])(\d+\.\d+|\d+(?=\s*(?:µg|μg|ug)/m))")
_REFERENCE_RE = re.compile(r"(?i)\b(?:WHO|guideline|limit|standard|threshold)\b")


def _decimals(text: str) -> int:
    return len(text.split(".", 1)[1]) if "." in text else 0


def _value_index(summaries: Sequence[WorkerSummary]) -> list[tuple[float, Pollutant | None, int]]:
    return [(v, p, s.index) for s in summaries for v, p in s.values()]


def _matches(claim: str, value: float) -> bool:
    try:
        return Decimal(repr(value)).quantize(Decimal(1).scaleb(-_decimals(claim))) == Decimal(claim)
    except InvalidOperation:
        return False


def classify(pollutant: Pollutant | None, level: float) -> str:
    if pollutant is None:
        return "unclassified"
    limit = WHO_24H[pollutant]
    return f"{'exceeds' if level > limit else 'within'} WHO 24-h guideline ({limit:g} µg/m³)"


def extract_findings(narrative: str, summaries: Sequence[WorkerSummary]) -> list[Finding]:
    """Pull quoted concentration figures out of free text and cross-check them.

    A figure is verified when some Worker summary holds a value that rounds
    to it at the precision quoted. Figures after a reference keyword (WHO,
    limit, ...) and threshold claims (``>70``) are not findings.
    """
    index = _value_index(summaries)
    findings = []
    span = ""
    for line in narrative.splitlines():
        dm = _DATE_RE.search(line)
        if dm:
            span = dm.group(0).strip()
        ref = _REFERENCE_RE.search(line)
        date_ranges = [m.span() for m in _DATE_RE.finditer(line)]
        for m in _LEVEL_RE.finditer(line):
            start = m.start()
            if ref is not None and start > ref.start():
                continue
            if any(a <= start < b for a, b in date_ranges):
                continue
            if line[:start].rstrip().endswith((">", "<", "≥", "≤")):
                continue
            claim = m.group(1)
            mentions = [pm for pm in _POLLUTANT_RE.finditer(line) if pm.start() < start]
            pollutant = None
            if mentions:
                pollutant = Pollutant.PM25 if mentions[-1].group(1) in ("2.5", "25") else Pollutant.PM10
            sources = tuple(sorted({c for v, p, c in index if _matches(claim, v)}))
            level = float(claim)
            findings.append(Finding(span, pollutant, level, classify(pollutant, level), bool(sources), sources))
    return findings


def exceedance_findings(summaries: Sequence[WorkerSummary]) -> list[Finding]:
    """Highest reported level per PM pollutant, compared with the WHO 24-h guideline."""
    out = []
    for p in (Pollutant.PM25, Pollutant.PM10):
        best = None
        for s in summaries:
            for d in s.daily_averages:
                cand = (d.level(p), d.date.isoformat(), s.index)
                best = cand if best is None or cand[0] > best[0] else best
            for e in s.outlier_events:
                if p in e.peaks:
                    span = e.start_date.isoformat() if e.start_date == e.end_date else \
                        f"{e.start_date.isoformat()}..{e.end_date.isoformat()}"
                    cand = (e.peaks[p], span, s.index)
                    best = cand if best is None or cand[0] > best[0] else best
        if best is None:
            continue
        level, span, idx = best
        chunks = tuple(sorted({s.index for s in summaries for v, q in s.values() if q is p and v == level}))
        out.append(Finding(span, p, level, classify(p, level), True, chunks or (idx,), "summaries"))
    return out


# --- Instructor outputs --------------------------------------------------------------------

def _ok(summaries: Sequence[WorkerSummary]) -> list[WorkerSummary]:
    ok = [s for s in summaries if not s.failed]
    if not ok:
        raise AggregationError("no successful Worker summary to aggregate")
    return ok


def summaries_context(summaries: Sequence[WorkerSummary]) -> str:
    return "\n".join(json.dumps(s.to_json(), sort_keys=True, ensure_ascii=False) for s in summaries)


def _instructor_stack(task: AnalysisTask) -> list[Message]:
    stack = [system(prompts.instructor_system_prompt())]
    if task.refinement:
        stack.append(system(task.refinement))
    return stack


def aggregate(summaries: Sequence[WorkerSummary], task: AnalysisTask, gateway: Gateway, model: str) -> AggregateReport:
    ok = _ok(summaries)
    body = prompts.render(prompts.template("aggregate_user"), USER_PROMPT=task.user_prompt,
                          SUMMARIES=summaries_context(ok))
    narrative = gateway.chat(model, _instructor_stack(task) + [user(body)], tag="instructor-04-aggregate").content
    findings = extract_findings(narrative, ok)
    for f in findings:
        if not f.verified:
            log.warning("unverified figure %s (%s) in narrative: possible hallucination", f.level, f.date_span)
    return AggregateReport(narrative, findings, tuple(s.index for s in ok))


def recommend_health(task: AnalysisTask, summaries: Sequence[WorkerSummary], gateway: Gateway, model: str) -> str:
    """Health recommendation for the task's population class and date."""
    if task.date is None or task.population is None:
        raise PreconditionError("health recommendation needs a date and a population class")
    ok = _ok(summaries)
    covered = {d.date for s in ok for d in s.daily_averages}
    if task.date not in covered:
        raise CoverageError(f"no Worker summary covers {task.date.isoformat()}")
    body = prompts.render(prompts.template("health_user"), CLASS=CLASS_LABELS[task.population],
                          DATE=task.date.isoformat(), SUMMARIES=summaries_context(ok))
    return gateway.chat(model, _instructor_stack(task) + [user(body)], tag="instructor-05-health").content


def generate_policy_report(summaries: Sequence[WorkerSummary], task: AnalysisTask, gateway: Gateway,
                           model: str) -> AggregateReport:
    ok = _ok(summaries)
    body = prompts.render(prompts.template("policy_user"), USER_PROMPT=task.user_prompt,
                          SUMMARIES=summaries_context(ok))
    narrative = gateway.chat(model, _instructor_stack(task) + [user(body)], tag="instructor-06-policy").content
    findings = extract_findings(narrative, ok) + exceedance_findings(ok)
    return AggregateReport(narrative, findings, tuple(s.index for s in ok))


# --- whole run ------------------------------------------------------------------------------

@dataclass
class RunResult:
    task: AnalysisTask
    plan: Plan
    call: str
    history: AirQualityHistory
    chunks: list[Chunk]
    summaries: list[WorkerSummary]
    report: AggregateReport | None = None
    recommendation: str | None = None
    oracle: list[ChunkStats] = field(default_factory=list)
    scores: ScoreTable | None = None


class Pipeline:
    def __init__(self, gateway: Gateway, registry: Registry, context: DataContext, instructor_model: str,
                 worker_model: str, checker=None, shadow: Sequence = (), strict: bool = True,
                 all_pollutants: bool = False):
        self.gateway = gateway
        self.registry = registry
        self.context = context
        self.instructor_model = instructor_model
        self.worker_model = worker_model
        self.checker = checker or RuleChecker()
        self.shadow = tuple(shadow)
        self.strict = strict
        self.all_pollutants = all_pollutants

    def _stage(self, name: str, fn, *args):
        try:
            return fn(*args)
        except PipelineError:
            raise
        except Exception as exc:
            exc.stage = getattr(exc, "stage", None) or name
            raise

    def retrieve(self, task: AnalysisTask, p: Plan) -> tuple[str, AirQualityHistory]:
        loc = task.location
        instruction = (f"Retrieve {task.hours} hours of air-quality history at latitude {loc.latitude}, "
                       f"longitude {loc.longitude}.")
        specs = [self.registry.get(n) for n in p.functions]
        call = request_call(task.user_prompt, instruction, specs, self.gateway, self.instructor_model)
        approved = gate(call, self.registry, self.checker, self.shadow)
        result = dispatch(approved, self.registry, self.context).value
        if not isinstance(result, AirQualityHistory):
            raise PipelineError(f"{approved.parsed.name} did not return an hourly history", stage="retrieve")
        return call.raw, result

    def run(self, task: AnalysisTask) -> RunResult:
        p = self._stage("plan", plan, task, self.registry, self.gateway, self.instructor_model)
        call, history = self._stage("retrieve", self.retrieve, task, p)
        if history.records and history.records[0].timestamp.hour != 0:
            history = trim_to_whole_days(history)
        chunks = self._stage("chunk", chunk_history, history, self.strict)
        summaries = self._stage("summarize", summarize_chunks, chunks, p.instruction, self.gateway,
                                self.worker_model, self.all_pollutants)
        result = RunResult(task, p, call, history, chunks, summaries)
        if task.kind is TaskKind.HEALTH:
            result.recommendation = self._stage("recommend", recommend_health, task, summaries, self.gateway,
                                                self.instructor_model)
        elif task.kind is TaskKind.POLICY:
            result.report = self._stage("report", generate_policy_report, summaries, task, self.gateway,
                                        self.instructor_model)
        else:
            result.report = self._stage("aggregate", aggregate, summaries, task, self.gateway, self.instructor_model)
        if task.kind is TaskKind.NUMERICAL:
            result.oracle = [chunk_stats(c) for c in chunks]
            reported = [s.chunk_stats for s in summaries if not s.failed and s.chunk_stats is not None]
            result.scores = score_worker_numbers(reported, result.oracle)
        return result


def write_findings_csv(findings: Iterable[Finding], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date_span", "pollutant", "level", "classification", "verified", "chunks", "source"])
        for f in findings:
            w.writerow(f.row())
    return path


def write_run(result: RunResult, outdir: str | Path, gateway: Gateway | None = None,
              ledger=None) -> Path:
    """Write the run artifact directory. Contents depend only on the run."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)

    def dump(name: str, obj):
        (out / name).write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                                encoding="utf-8")

    dump("task.json", result.task.to_json())
    dump("plan.json", {"functions": result.plan.functions, "schema": result.plan.instruction.schema_id,
                       "steps": list(result.plan.instruction.steps), "call": result.call})
    dump("summaries.json", [
        dict(s.to_json(), prompts=s.prompts, failed=s.failed, error=s.error, raw_reply=s.raw_reply if s.failed else None)
        for s in result.summaries
    ])
    if result.report is not None:
        (out / "report.md").write_text(result.report.narrative.rstrip() + "\n", encoding="utf-8")
        write_findings_csv(result.report.findings, out / "findings.csv")
    if result.recommendation is not None:
        (out / "recommendation.md").write_text(result.recommendation.rstrip() + "\n", encoding="utf-8")
    if result.oracle:
        write_chunk_stats_csv(result.oracle, out / "chunk_stats_oracle.csv")
        reported = [s.chunk_stats for s in result.summaries if s.chunk_stats is not None]
        write_chunk_stats_csv(reported, out / "chunk_stats_worker.csv")
    if result.scores is not None:
        write_error_table_csv({"worker": result.scores}, out / "error_scores.csv")
        if result.scores.deficiency:
            (out / "coverage.txt").write_text(result.scores.deficiency + "\n", encoding="utf-8")
    if gateway is not None:
        gateway.write_transcripts(out / "transcripts.jsonl")
    if ledger is not None:
        dump("usage.json", ledger.snapshot())
    return out
