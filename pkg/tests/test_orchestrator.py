import json
from datetime import date

import pytest

from aqllm.airdata import AirQualityClient, Pollutant, PopulationClass
from aqllm.chunking import chunk_history
from aqllm.codeexec import DataContext, RuleChecker, default_registry
from aqllm.cost import UsageLedger
from aqllm.errors import AggregationError, CoverageError, OutOfSpanError, PlanningError, PreconditionError
from aqllm.gateway import Gateway, RetryPolicy, ScriptedProvider
from aqllm.mockscript import reference_script, worker_reply
from aqllm.orchestrator import (
    AnalysisTask,
    Pipeline,
    TaskKind,
    WorkerInstruction,
    WorkerSummary,
    aggregate,
    exceedance_findings,
    extract_findings,
    generate_policy_report,
    parse_worker_summary,
    plan,
    recommend_health,
    summarize_chunks,
    write_run,
)
from aqllm import prompts
from aqllm.stats import DailyAverage, OutlierEvent

from conftest import DATA, LA, scripted_gateway

BLOCK = (DATA / "worker_reply_block.txt").read_text(encoding="utf-8")
SELECT = {"match": {"contains": "choose the functions required"}, "response": "fetch_history"}


def task(kind=TaskKind.TREND, **kw):
    return AnalysisTask("Analyze PM levels and outliers.", LA, 720, kind, **kw)


def instruction(schema="summary-v1"):
    return WorkerInstruction(tuple(prompts.schema(schema)["steps"]), schema)


def summary(index, d, pm25, pm10, events=()):
    return WorkerSummary(index, [DailyAverage(d, pm25, pm10)], list(events))


def test_plan_trend(registry):
    steps = "1. Extract daily means\n2. Find IQR outliers\n3. Summarize\n4. Output JSON only\nschema: summary-v1"
    gw = scripted_gateway([SELECT, {"response": steps}])
    p = plan(task(), registry, gw, "m")
    assert p.functions == ["fetch_history"]
    assert p.instruction.schema_id == "summary-v1"
    assert len(p.instruction.steps) == 4 and p.instruction.steps[1] == "Find IQR outliers"


def test_plan_numerical_uses_stats_schema(registry):
    gw = scripted_gateway([SELECT, {"response": "schema: summary-v1"}])
    p = plan(task(TaskKind.NUMERICAL), registry, gw, "m")
    assert p.instruction.schema_id == "stats-v1"
    text = p.instruction.text()
    assert "mean" in text and "standard deviation" in text and "PM10" in text


def test_plan_without_schema(registry):
    gw = scripted_gateway([SELECT, {"response": "I will do my best."}])
    with pytest.raises(PlanningError):
        plan(task(), registry, gw, "m")


def test_empty_prompt():
    with pytest.raises(PreconditionError):
        AnalysisTask("  ", LA)


def test_health_task_needs_date_and_class():
    with pytest.raises(PreconditionError):
        AnalysisTask("x", LA, kind=TaskKind.HEALTH, date=date(2025, 1, 10))


def test_parse_reference_block():
    s = parse_worker_summary(BLOCK)
    assert len(s.daily_averages) == 6
    first = s.daily_averages[0]
    assert (first.date, first.pm25_avg, first.pm10_avg) == (date(2025, 2, 4), 8.94, 13.23)
    assert [(e.start_date, e.end_date, e.peaks[Pollutant.PM25], e.peaks[Pollutant.PM10]) for e in s.outlier_events] == [
        (date(2025, 2, 4), date(2025, 2, 4), 16.2, 18.44),
        (date(2025, 2, 8), date(2025, 2, 9), 5.99, 19.79),
    ]


def test_parse_empty_summary():
    s = parse_worker_summary('{"daily_averages": [], "outlier_events": []}')
    assert s.daily_averages == [] and s.outlier_events == []


def test_parse_out_of_span(la_history):
    chunk = chunk_history(la_history)[0]
    with pytest.raises(OutOfSpanError):
        parse_worker_summary('{"daily_averages": [{"date": "2025-03-01", "pm25_avg": 1, "pm10_avg": 2}], '
                             '"outlier_events": []}', chunk)


@pytest.mark.parametrize("text", [
    "no json here",
    '{"daily_averages": [{"date": "2025-01-09", "pm25_avg": -1, "pm10_avg": 2}], "outlier_events": []}',
    '{"daily_averages": [{"date": "x", "pm25_avg": 1, "pm10_avg": 2}], "outlier_events": []}',
    '{"daily_averages": [], "outlier_events": [{"start_date": "2025-01-09"}]}',
    '{"outlier_events": []}',
])
def test_parse_malformed(text):
    from aqllm.errors import SummaryError

    with pytest.raises(SummaryError):
        parse_worker_summary(text)


def test_summarize_thirty_in_order(la_history):
    chunks = chunk_history(la_history)
    entries = [{"match": {"contains": f"Data chunk {c.index} ("}, "response": worker_reply(c, False)}
               for c in reversed(chunks)]
    out = summarize_chunks(chunks, instruction(), scripted_gateway(entries), "w")
    assert [s.index for s in out] == list(range(1, 31))
    assert not any(s.failed for s in out)


def test_reprompt_then_success(la_history):
    c = chunk_history(la_history)[2]
    entries = [{"match": {"contains": "could not be parsed"}, "response": worker_reply(c, False)},
               {"response": "sorry, here you go: daily averages were fine"}]
    s = summarize_chunks([c], instruction(), scripted_gateway(entries), "w")[0]
    assert not s.failed and s.prompts == 2


def test_unparseable_twice_marks_failed(la_history):
    c = chunk_history(la_history)[2]
    s = summarize_chunks([c], instruction(), scripted_gateway([{"response": "nope"}]), "w")[0]
    assert s.failed and s.raw_reply == "nope" and s.prompts == 2


def test_provider_failure_isolated(la_history):
    chunks = chunk_history(la_history)[:3]
    entries = [{"match": {"contains": "Data chunk 2 ("}, "error": "down"}] + [
        {"match": {"contains": f"Data chunk {c.index} ("}, "response": worker_reply(c, False)} for c in chunks]
    out = summarize_chunks(chunks, instruction(), scripted_gateway(entries), "w")
    assert [s.failed for s in out] == [False, True, False]


def test_summarize_empty():
    with pytest.raises(PreconditionError):
        summarize_chunks([], instruction(), scripted_gateway([]), "w")


SPIKE = [summary(4, date(2025, 1, 12), 509.07, 480.0), summary(5, date(2025, 1, 13), 4.92, 9.0)]


def test_aggregate_accepts_verified_figure():
    gw = scripted_gateway([{"response": "- January 12, 2025:\n  - PM2.5: Peaked at 509.07 (highest spike)."}])
    report = aggregate(SPIKE, task(), gw, "i")
    f = report.findings[0]
    assert f.verified and f.level == 509.07 and f.chunks == (4,) and f.pollutant is Pollutant.PM25
    assert report.flagged == []


def test_aggregate_flags_unknown_figure(caplog):
    gw = scripted_gateway([{"response": "PM10 spiked to 92.45 on Jan 21."}])
    report = aggregate(SPIKE, task(), gw, "i")
    assert [f.level for f in report.flagged] == [92.45]
    assert "hallucination" in caplog.text


def test_aggregate_single_chunk():
    report = aggregate(SPIKE[:1], task(), scripted_gateway([{"response": "ok"}]), "i")
    assert report.provenance == (4,)


def test_aggregate_all_failed():
    with pytest.raises(AggregationError):
        aggregate([WorkerSummary(1, failed=True)], task(), scripted_gateway([]), "i")


def test_findings_skip_reference_numbers():
    text = "PM2.5 reached 509.07, far above the WHO limit of 15.00 µg/m³; alert when >70.5"
    assert [f.level for f in extract_findings(text, SPIKE)] == [509.07]


def test_recommend_health_verbatim():
    t = task(TaskKind.HEALTH, date=date(2025, 1, 12), population=PopulationClass.LUNG_DISEASE)
    gw = scripted_gateway([{"response": "Stay indoors."}])
    assert recommend_health(t, SPIKE, gw, "i") == "Stay indoors."


def test_recommend_health_refined_stack():
    t = task(TaskKind.HEALTH, date=date(2025, 1, 12), population=PopulationClass.ELDERLY,
             refinement=prompts.preset("lafd-wildfire"))
    provider = ScriptedProvider([{"response": "Limit outdoor time."}])
    text = recommend_health(t, SPIKE, Gateway(provider, RetryPolicy(1, 0)), "i")
    assert text
    roles = [m.role.value for m in provider.requests[0].messages]
    assert roles == ["system", "system", "user"]
    assert "the elderly" in provider.requests[0].text


def test_recommend_health_uncovered():
    t = task(TaskKind.HEALTH, date=date(2025, 2, 1), population=PopulationClass.GENERAL)
    with pytest.raises(CoverageError):
        recommend_health(t, SPIKE, scripted_gateway([{"response": "x"}]), "i")


def test_policy_report_headers_and_exceedance():
    reply = "Severe Pollution Episodes\n...\nPolicy Recommendations\n- alerts"
    report = generate_policy_report(SPIKE, task(TaskKind.POLICY), scripted_gateway([{"response": reply}]), "i")
    assert "Policy Recommendations" in report.narrative
    ex = [f for f in report.findings if f.source == "summaries" and f.pollutant is Pollutant.PM25][0]
    assert ex.level == 509.07 and "exceeds" in ex.classification and "15" in ex.classification


def test_policy_report_empty():
    with pytest.raises(AggregationError):
        generate_policy_report([], task(TaskKind.POLICY), scripted_gateway([]), "i")


def test_exceedance_uses_event_peaks():
    ev = OutlierEvent(date(2025, 1, 12), date(2025, 1, 12), {Pollutant.PM10: 600.0})
    out = exceedance_findings([summary(4, date(2025, 1, 12), 3.0, 5.0, [ev])])
    pm10 = [f for f in out if f.pollutant is Pollutant.PM10][0]
    assert pm10.level == 600.0


def _run(history, t, tmp_path, latency=None):
    ledger = UsageLedger()
    gw = Gateway(ScriptedProvider(reference_script(history, t), latency=latency), RetryPolicy(1, 0), ledger,
                 deterministic=True)
    result = Pipeline(gw, default_registry(),
                      DataContext(AirQualityClient.from_history(history, ledger)), "o3", "gpt41",
                      RuleChecker()).run(t)
    return result, write_run(result, tmp_path, gw, ledger)


def test_pipeline_numerical(la_history, tmp_path):
    result, out = _run(la_history, task(TaskKind.NUMERICAL), tmp_path)
    assert len(result.oracle) == 30 and result.scores.pairs == 30
    assert all(s.mae < 0.005 for s in result.scores.rows.values())
    assert (out / "error_scores.csv").exists() and (out / "chunk_stats_oracle.csv").exists()


def test_pipeline_health_artifact(la_history, tmp_path):
    t = task(TaskKind.HEALTH, date=date(2025, 1, 10), population=PopulationClass.LUNG_DISEASE,
             refinement=prompts.preset("lafd-wildfire"))
    result, out = _run(la_history, t, tmp_path)
    assert (out / "recommendation.md").read_text().strip()
    assert json.loads((out / "task.json").read_text())["refinement"]


def test_pipeline_trend_golden(tmp_path):
    from aqllm.airdata import load_fixture

    history = load_fixture(DATA / "la_720h.json")
    result, out = _run(history, task(), tmp_path)
    golden = DATA / "golden_trend"
    for name in ("report.md", "findings.csv", "summaries.json", "plan.json"):
        assert (out / name).read_bytes() == (golden / name).read_bytes(), name


def test_refined_and_normal_stacks_differ():
    def transcript(refinement):
        t = task(TaskKind.HEALTH, date=date(2025, 1, 12), population=PopulationClass.GENERAL, refinement=refinement)
        gw = scripted_gateway([{"response": "ok"}])
        recommend_health(t, SPIKE, gw, "i")
        return gw.transcripts[0]["request"]["messages"]

    normal, refined = transcript(None), transcript(prompts.preset("lafd-wildfire"))
    assert len(refined) == len(normal) + 1
    assert refined[1]["role"] == "system" and "fire" in refined[1]["content"]
