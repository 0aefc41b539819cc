"""Command-line front end.

Exit codes: 0 success, 2 usage, 3 data, 4 provider, 5 compliance,
6 evaluation. Without credentials every command runs from fixtures and
scripted replies.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import random
import sys
from datetime import date
from decimal import Decimal
from pathlib import Path

from . import prompts
from .airdata import (
    AirQualityClient,
    GeoPoint,
    Pollutant,
    PopulationClass,
    fetch_history,
    format_timestamp,
    load_archive,
    load_fixture,
    parse_timestamp,
    save_fixture,
)
from .codeexec import DataContext, LlmChecker, RuleChecker, default_registry
from .cost import PricingTable, UsageLedger, chunk_cost, display_round, estimate_task, run_cost
from .errors import AqError, ConfigurationError, PreconditionError, exit_code
from .evaluation import (
    PUBLISHED_REFERENCE,
    HashEmbedder,
    OneHotEmbedder,
    ScoreRow,
    TransformerEmbedder,
    compare_prompt_variants,
    group_scores,
    read_scores_csv,
    score_text,
    write_boxplot_csv,
    write_scores_csv,
)
from .gateway import ChatCompletionsProvider, Gateway, RetryPolicy, RoutingProvider, ScriptedProvider
from .mockscript import INSTRUCTOR, WORKER, reference_script
from .orchestrator import AnalysisTask, Pipeline, TaskKind, write_run

log = logging.getLogger("aqllm")

DEFAULT_PROMPTS = {
    TaskKind.TREND: "Analyze the PM2.5 and PM10 levels of this location over the period, "
                    "identify outlier events and their possible causes.",
    TaskKind.HEALTH: "Generate health recommendations based on the air quality.",
    TaskKind.POLICY: "The area was affected by wildfires. Write a short report with policy recommendations "
                     "based on the air quality.",
    TaskKind.NUMERICAL: "Extract the 48-hour mean and standard deviation of PM10 and PM2.5 for each data chunk.",
}


def _date(text: str) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aqllm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", help="retrieve an hourly history and save it as a fixture")
    p.add_argument("--lat", type=float, required=True)
    p.add_argument("--lng", type=float, required=True)
    p.add_argument("--hours", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--fixture", type=Path, help="serve data from this fixture instead of the live API")
    p.add_argument("--end", help="exclusive end hour (ISO 8601, UTC); default: latest available")
    p.add_argument("--retrieved-at", help="timestamp to stamp into the fixture (ISO 8601)")
    p.add_argument("--workers", type=int, default=1, help="parallel page requests")

    p = sub.add_parser("analyze", help="run the Instructor/Worker pipeline")
    p.add_argument("--fixture", type=Path, help="history fixture (mock data mode)")
    p.add_argument("--script", type=Path, help="scripted replies; default: built from the fixture")
    p.add_argument("--live", action="store_true", help="use live LLM providers from environment credentials")
    p.add_argument("--task", choices=[k.value for k in TaskKind], default=TaskKind.TREND.value)
    p.add_argument("--prompt", help="user prompt (default depends on the task)")
    p.add_argument("--lat", type=float)
    p.add_argument("--lng", type=float)
    p.add_argument("--hours", type=int)
    p.add_argument("--date", type=_date)
    p.add_argument("--class", dest="population", choices=[c.value for c in PopulationClass])
    p.add_argument("--refined", action="store_true", help="add the refinement preset as an extra system prompt")
    p.add_argument("--preset", default="lafd-wildfire")
    p.add_argument("--instructor-model", default=INSTRUCTOR)
    p.add_argument("--worker-model", default=WORKER)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--max-attempts", type=int, default=3)
    p.add_argument("--base-delay", type=float, default=0.5)
    p.add_argument("--llm-checker", action="store_true", help="also require an LLM safety review")
    p.add_argument("--lenient", action="store_true", help="accept any whole number of days >= 2")
    p.add_argument("--all-pollutants", action="store_true")
    p.add_argument("--seed", type=int, default=0, help="seed for simulated worker latencies")
    p.add_argument("--latency-ms", type=float, default=0.0, help="max simulated latency per scripted call")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("make-script", help="write the reference mock script for a fixture")
    p.add_argument("--fixture", type=Path, required=True)
    p.add_argument("--task", choices=[k.value for k in TaskKind], default=TaskKind.TREND.value)
    p.add_argument("--instructor-model", default=INSTRUCTOR)
    p.add_argument("--worker-model", default=WORKER)
    p.add_argument("--lenient", action="store_true")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", help="BERTScore generated texts against references")
    p.add_argument("--candidates", type=Path, required=True, help="JSON lines: iteration, day, population_class, text")
    p.add_argument("--references", type=Path, required=True, help="JSON list: day, population_class, text")
    p.add_argument("--refined", type=Path, help="second candidate set to compare against the first")
    p.add_argument("--embedder", default="hash", help="hash | onehot | transformer:<model name>")
    p.add_argument("--compare-published", action="store_true", help="print published live-mode values alongside")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("cost", help="estimate LLM and data-API cost")
    p.add_argument("--chunks", type=int, default=30)
    p.add_argument("--model", default="gpt41")
    p.add_argument("--pricing", type=Path)
    p.add_argument("--input-tokens", type=int, default=25_000)
    p.add_argument("--output-tokens", type=int, default=200)
    p.add_argument("--cached-fraction", type=Decimal, default=Decimal(0))
    p.add_argument("--data-calls", type=int, default=0)
    p.add_argument("--bucketed", action="store_true")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("plotdata", help="tidy CSVs for time-series and boxplot figures")
    p.add_argument("--fixture", type=Path, action="append", default=[],
                   help="history fixture; repeat for several locations (label=path allowed)")
    p.add_argument("--scores", type=Path, help="scores CSV from `evaluate`")
    p.add_argument("--metric", default="f1")
    p.add_argument("--out", type=Path, required=True)
    return parser


# --- commands ------------------------------------------------------------------

def cmd_fetch(args) -> int:
    location = GeoPoint(args.lat, args.lng)
    if not 1 <= args.hours <= 720:
        raise PreconditionError(f"--hours must be in 1..720, got {args.hours}")
    ledger = UsageLedger()
    client = AirQualityClient.from_env(args.fixture, ledger)
    client.max_workers = args.workers
    end = parse_timestamp(args.end) if args.end else None
    history = fetch_history(location, args.hours, client, end=end)
    retrieved = parse_timestamp(args.retrieved_at) if args.retrieved_at else None
    provenance = "replayed fixture" if args.fixture else "live"
    save_fixture(history, args.out, retrieved, provenance)
    print(f"wrote {history.hours} records to {args.out} ({ledger.data_calls} provider call(s), "
          f"{len(history.gaps)} missing hour(s))")
    return 0


def _seeded_latency(seed: int, scale: float):
    """Per-request delay fixed by seed and request content; only shuffles completion order."""
    def latency(request) -> float:
        return random.Random(f"{seed}:{request.fingerprint()}").random() * scale
    return latency


def _task_from_args(args, location: GeoPoint, hours: int) -> AnalysisTask:
    kind = TaskKind(args.task)
    return AnalysisTask(
        user_prompt=args.prompt or DEFAULT_PROMPTS[kind],
        location=location,
        hours=hours,
        kind=kind,
        date=args.date,
        population=PopulationClass(args.population) if args.population else None,
        refinement=prompts.preset(args.preset) if args.refined else None,
    )


def cmd_analyze(args) -> int:
    ledger = UsageLedger()
    if args.fixture is not None:
        history = load_fixture(args.fixture)
        client = AirQualityClient.from_history(history, ledger)
    else:
        history = None
        client = AirQualityClient.from_env(None, ledger)
    loc = history.location if history is not None and history.location is not None else None
    if args.lat is not None and args.lng is not None:
        loc = GeoPoint(args.lat, args.lng)
    if loc is None:
        raise ConfigurationError("no location: pass --lat/--lng or a fixture that records one")
    hours = args.hours or (min(history.hours, 720) if history is not None else 720)
    task = _task_from_args(args, loc, hours)

    if args.live:
        routes = {}
        for model in {args.instructor_model, args.worker_model}:
            vendor = "deepseek" if model.startswith("deepseek") else "openai"
            routes[model] = ChatCompletionsProvider.from_env(vendor)
        provider = RoutingProvider(routes)
        deterministic = False
    else:
        if args.script is not None:
            entries = json.loads(args.script.read_text(encoding="utf-8"))
        elif history is not None:
            entries = reference_script(history, task, args.instructor_model, args.worker_model, not args.lenient)
        else:
            raise ConfigurationError("mock mode needs --script or --fixture")
        latency = _seeded_latency(args.seed, args.latency_ms / 1000.0) if args.latency_ms > 0 else None
        provider = ScriptedProvider(entries, latency=latency)
        deterministic = True
    policy = RetryPolicy(args.max_attempts, args.base_delay if args.live else 0.0)
    gateway = Gateway(provider, policy, ledger, args.concurrency, deterministic=deterministic)
    shadow = [LlmChecker(gateway, args.instructor_model)] if args.llm_checker else []
    pipeline = Pipeline(gateway, default_registry(), DataContext(client), args.instructor_model,
                        args.worker_model, RuleChecker(), shadow, strict=not args.lenient,
                        all_pollutants=args.all_pollutants)
    result = pipeline.run(task)
    write_run(result, args.out, gateway, ledger)
    failed = [s.index for s in result.summaries if s.failed]
    print(f"wrote run artifacts to {args.out} ({len(result.summaries)} chunk(s), {len(failed)} failed)")
    if result.report is not None and result.report.flagged:
        print(f"warning: {len(result.report.flagged)} figure(s) in the report not found in any summary")
    if result.scores is not None:
        for label, score in result.scores.rows.items():
            print(f"{label:11s} MAE {score.mae:.3f}  RMSE {score.rmse:.3f}")
    return 0


def cmd_make_script(args) -> int:
    archive = load_archive(args.fixture)
    history = archive.history()
    if history.location is None:
        raise ConfigurationError("fixture has no location")
    kind = TaskKind(args.task)
    task = AnalysisTask(DEFAULT_PROMPTS[kind], history.location, min(history.hours, 720), kind,
                        date=history.records[0].timestamp.date() if kind is TaskKind.HEALTH else None,
                        population=PopulationClass.GENERAL if kind is TaskKind.HEALTH else None)
    entries = reference_script(history, task, args.instructor_model, args.worker_model, not args.lenient)
    args.out.write_text(json.dumps(entries, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    print(f"wrote {len(entries)} script entries to {args.out}")
    return 0


def _embedder(spec: str):
    if spec == "hash":
        return HashEmbedder()
    if spec == "onehot":
        return OneHotEmbedder()
    if spec.startswith("transformer:"):
        return TransformerEmbedder(spec.split(":", 1)[1])
    raise ConfigurationError(f"unknown embedder {spec!r}")


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _score_set(candidates: list[dict], refs: dict, embedder) -> list[ScoreRow]:
    rows = []
    for c in candidates:
        key = (str(c.get("day", "")), str(c.get("population_class", "")))
        ref = refs.get(key)
        if ref is None:
            log.warning("no reference for day=%s class=%s; skipped", *key)
            continue
        rows.append(ScoreRow(str(c.get("iteration", "")), key[0], key[1], score_text(c["text"], ref, embedder)))
    return rows


def cmd_evaluate(args) -> int:
    embedder = _embedder(args.embedder)
    refs: dict[tuple[str, str], str] = {}
    if args.references.exists():
        for r in json.loads(args.references.read_text(encoding="utf-8")):
            refs[(str(r.get("day", "")), str(r.get("population_class", "")))] = r["text"]
    else:
        log.warning("reference file %s not found; every candidate is skipped", args.references)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = _score_set(_read_jsonl(args.candidates), refs, embedder)
    write_scores_csv(rows, args.out / "scores.csv")
    groups = group_scores([dict(day=r.day, population_class=r.population_class, f1=str(r.score.f1)) for r in rows])
    write_boxplot_csv(groups, args.out / "boxplot.csv")
    print(f"scored {len(rows)} candidate(s); wrote {args.out / 'scores.csv'}")
    if args.refined is not None:
        refined_rows = _score_set(_read_jsonl(args.refined), refs, embedder)
        write_scores_csv(refined_rows, args.out / "scores_refined.csv")
        if not rows or not refined_rows:
            raise PreconditionError("variant comparison needs scored candidates in both sets")
        cmp = compare_prompt_variants([r.score.f1 for r in rows], [r.score.f1 for r in refined_rows])
        with (args.out / "comparison.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["mean_delta", "normal_min", "refined_min", "normal_max", "refined_max", "separated", "disjoint"])
            w.writerow([f"{cmp.mean_delta:.6f}", f"{cmp.normal_min:.6f}", f"{cmp.refined_min:.6f}",
                        f"{cmp.normal_max:.6f}", f"{cmp.refined_max:.6f}", cmp.separated, cmp.disjoint])
        print(f"refined - normal mean F1: {cmp.mean_delta:+.4f} (quartiles separated: {cmp.separated})")
        if args.compare_published:
            print(f"  published: delta {PUBLISHED_REFERENCE['lafd_mean_delta_f1']}, minima "
                  f"{PUBLISHED_REFERENCE['lafd_min_normal_f1']} / {PUBLISHED_REFERENCE['lafd_min_refined_f1']}; "
                  f"here: minima {cmp.normal_min:.4f} / {cmp.refined_min:.4f}")
    if args.compare_published and rows:
        worst = min(rows, key=lambda r: r.score.f1)
        print(f"  published minimum triple {PUBLISHED_REFERENCE['min_triple_jan10_lung']}; "
              f"here {tuple(round(x, 3) for x in worst.score.as_tuple())}")
    return 0


def cmd_cost(args) -> int:
    pricing = PricingTable.load(args.pricing)
    price = pricing[args.model]
    if args.chunks < 0:
        raise PreconditionError("--chunks must be >= 0")
    per_chunk = chunk_cost(args.input_tokens, args.output_tokens, price, args.cached_fraction)
    est = estimate_task(args.chunks * 24, pricing, args.model, chunk_input_tokens=args.input_tokens,
                        chunk_output_tokens=args.output_tokens)
    ledger = UsageLedger()
    for _ in range(args.chunks):
        cached = int(Decimal(args.input_tokens) * args.cached_fraction)
        ledger.record(est.model, args.input_tokens, args.output_tokens, cached)
    ledger.record_data_call(args.data_calls)
    report = run_cost(ledger, pricing, bucketed=args.bucketed)
    lines = [
        f"model              {est.model} (prices compiled {pricing.compiled})",
        f"per_chunk_exact    {per_chunk}",
        f"per_chunk_rounded  {display_round(per_chunk)}",
        f"chunks             {args.chunks}",
        f"total_exact        {per_chunk * args.chunks}",
        f"total_rounded      {display_round(per_chunk) * args.chunks}",
        f"aggregation_est    {display_round(est.aggregation)} ({est.aggregation})",
        f"task_range         {display_round(est.low)} .. {display_round(est.high)}",
        f"data_api           {report.data_cost} ({report.data_calls} calls)",
        f"grand_total        {report.total}",
    ]
    print("\n".join(lines))
    if args.out is not None:
        report.notes.extend(lines)
        report.to_csv(args.out)
    return 0


def cmd_plotdata(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    columns = ["location", "timestamp"] + [p.value for p in Pollutant] + ["aqi"]
    with (args.out / "timeseries.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for spec in args.fixture:
            label, _, path = str(spec).rpartition("=")
            path = Path(path)
            history = load_fixture(path)
            label = label or path.stem
            for rec in history.records:
                vals = [rec.value(p) for p in Pollutant]
                w.writerow([label, format_timestamp(rec.timestamp)] + ["" if v is None else repr(v) for v in vals]
                           + ["" if rec.aqi is None else rec.aqi])
    groups = {}
    if args.scores is not None:
        if args.scores.exists():
            groups = group_scores(read_scores_csv(args.scores), args.metric)
        else:
            log.warning("scores file %s not found", args.scores)
    write_boxplot_csv(groups, args.out / "boxplot.csv")
    print(f"wrote plot data to {args.out}")
    return 0


COMMANDS = {
    "fetch": cmd_fetch,
    "analyze": cmd_analyze,
    "make-script": cmd_make_script,
    "evaluate": cmd_evaluate,
    "cost": cmd_cost,
    "plotdata": cmd_plotdata,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except AqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
