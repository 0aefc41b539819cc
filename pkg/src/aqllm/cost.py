"""Token and data-API cost accounting.

All money is ``Decimal`` so per-chunk figures such as 0.0516 USD come out
exact. Prices are USD per one million tokens.
"""

from __future__ import annotations

import csv
import json
import math
import threading
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping

from .errors import PreconditionError, PricingError

MILLION = Decimal(1_000_000)
CENT = Decimal("0.01")


def _dec(x) -> Decimal:
    return x if isinstance(x, Decimal) else Decimal(str(x))


@dataclass(frozen=True)
class PriceEntry:
    model: str
    input: Decimal
    cached_input: Decimal
    output: Decimal

    def __post_init__(self):
        for name in ("input", "cached_input", "output"):
            object.__setattr__(self, name, _dec(getattr(self, name)))
            if getattr(self, name) < 0:
                raise PricingError(f"{self.model}: negative {name} price")
        if self.cached_input > self.input:
            raise PricingError(f"{self.model}: cached price exceeds input price")


@dataclass(frozen=True)
class DataApiQuota:
    free_calls: int = 10_000
    price_per_1000: Decimal = Decimal("5.00")

    def __post_init__(self):
        object.__setattr__(self, "price_per_1000", _dec(self.price_per_1000))
        if self.free_calls < 0 or self.price_per_1000 < 0:
            raise PricingError("quota values must be non-negative")

    def cost(self, calls: int, bucketed: bool = False) -> Decimal:
        over = max(0, calls - self.free_calls)
        if bucketed:
            return math.ceil(over / 1000) * self.price_per_1000
        return over * self.price_per_1000 / 1000


class PricingTable:
    def __init__(self, entries: Mapping[str, PriceEntry], compiled: str | None = None,
                 aliases: Mapping[str, str] | None = None, quota: DataApiQuota | None = None):
        self.entries = dict(entries)
        self.compiled = compiled
        self.aliases = dict(aliases or {})
        self.quota = quota or DataApiQuota()

    @classmethod
    def load(cls, path: str | Path | None = None) -> "PricingTable":
        if path is None:
            text = resources.files("aqllm.data").joinpath("pricing.json").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        doc = json.loads(text)
        entries, aliases = {}, {}
        for model, p in doc["models"].items():
            entries[model] = PriceEntry(model, p["input"], p["cached_input"], p["output"])
            for a in p.get("aliases", []):
                aliases[a.lower()] = model
        q = doc.get("data_api", {})
        quota = DataApiQuota(q.get("free_calls", 10_000), q.get("price_per_1000", "5.00"))
        return cls(entries, doc.get("compiled"), aliases, quota)

    def resolve(self, model: str) -> str:
        key = model.lower()
        if key in self.entries:
            return key
        if key in self.aliases:
            return self.aliases[key]
        raise PricingError(f"no price for model {model!r}")

    def __getitem__(self, model: str) -> PriceEntry:
        return self.entries[self.resolve(model)]

    def __contains__(self, model: str) -> bool:
        try:
            self.resolve(model)
        except PricingError:
            return False
        return True


def chunk_cost(input_tokens: int, output_tokens: int, price: PriceEntry,
               cached_fraction=0) -> Decimal:
    """((1-f)*in*p_in + f*in*p_cached + out*p_out) / 1e6, exactly."""
    if input_tokens < 0 or output_tokens < 0:
        raise PreconditionError("token counts must be non-negative")
    f = _dec(cached_fraction)
    if not 0 <= f <= 1:
        raise PreconditionError(f"cached_fraction {cached_fraction} outside [0, 1]")
    n_in = Decimal(input_tokens)
    total = (1 - f) * n_in * price.input + f * n_in * price.cached_input + Decimal(output_tokens) * price.output
    return total / MILLION


def display_round(amount: Decimal) -> Decimal:
    """Round to whole cents, the way headline figures are displayed."""
    return amount.quantize(CENT, rounding=ROUND_HALF_UP)


@dataclass
class Tally:
    input_tokens: int = 0
    cached_input_tokens: int = 0
    output_tokens: int = 0
    calls: int = 0


class UsageLedger:
    """Thread-safe accumulator of LLM token usage and data-API calls."""

    def __init__(self):
        self._lock = threading.Lock()
        self.models: dict[str, Tally] = {}
        self.calls: list[tuple[str, int, int, int]] = []
        self.data_calls = 0

    def record(self, model: str, input_tokens: int, output_tokens: int, cached_input_tokens: int = 0):
        if min(input_tokens, output_tokens, cached_input_tokens) < 0:
            raise PreconditionError("usage counts must be non-negative")
        if cached_input_tokens > input_tokens:
            raise PreconditionError("cached input tokens exceed input tokens")
        with self._lock:
            t = self.models.setdefault(model, Tally())
            t.input_tokens += input_tokens
            t.cached_input_tokens += cached_input_tokens
            t.output_tokens += output_tokens
            t.calls += 1
            self.calls.append((model, input_tokens, cached_input_tokens, output_tokens))

    def record_data_call(self, n: int = 1):
        with self._lock:
            self.data_calls += n

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "models": {m: vars(t).copy() for m, t in sorted(self.models.items())},
                "data_calls": self.data_calls,
            }


@dataclass
class CostReport:
    per_model: dict[str, Decimal]
    data_calls: int
    data_cost: Decimal
    compiled: str | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def llm_total(self) -> Decimal:
        return sum(self.per_model.values(), Decimal(0))

    @property
    def total(self) -> Decimal:
        return self.llm_total + self.data_cost

    def rows(self) -> list[tuple[str, str]]:
        out = [(f"llm:{m}", str(c)) for m, c in sorted(self.per_model.items())]
        out += [("data_api_calls", str(self.data_calls)), ("data_api", str(self.data_cost)),
                ("llm_total", str(self.llm_total)), ("total", str(self.total)),
                ("total_rounded", str(display_round(self.total)))]
        return out

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["item", "usd"])
            w.writerows(self.rows())
        return path

    def to_text(self) -> str:
        width = max(len(k) for k, _ in self.rows())
        lines = [f"{k.ljust(width)}  {v}" for k, v in self.rows()]
        if self.compiled:
            lines.append(f"(prices compiled {self.compiled}; subject to change)")
        return "\n".join(lines + self.notes)


def run_cost(ledger: UsageLedger, pricing: PricingTable, quota: DataApiQuota | None = None,
             bucketed: bool = False) -> CostReport:
    """Itemized cost of everything recorded in ``ledger``."""
    quota = quota or pricing.quota
    unpriced = sorted(m for m in ledger.models if m not in pricing)
    if unpriced:
        raise PricingError(f"unpriced model(s) in ledger: {', '.join(unpriced)}")
    per_model: dict[str, Decimal] = {}
    for model, t in ledger.models.items():
        price = pricing[model]
        n_in = Decimal(t.input_tokens)
        cached = Decimal(t.cached_input_tokens)
        per_model[model] = ((n_in - cached) * price.input + cached * price.cached_input
                            + Decimal(t.output_tokens) * price.output) / MILLION
    return CostReport(per_model, ledger.data_calls, quota.cost(ledger.data_calls, bucketed), pricing.compiled)


# Reference per-chunk workload: raw provider response for a 48-hour chunk and
# a short structured summary.
CHUNK_INPUT_TOKENS = 25_000
CHUNK_OUTPUT_TOKENS = 200
REPORT_WORDS = 500


@dataclass(frozen=True)
class CostEstimate:
    model: str
    chunks: int
    low: Decimal
    high: Decimal
    per_chunk_exact: Decimal
    aggregation: Decimal

    @property
    def per_chunk_rounded(self) -> Decimal:
        return display_round(self.per_chunk_exact)

    @property
    def summarization_exact(self) -> Decimal:
        return self.per_chunk_exact * self.chunks

    @property
    def summarization_rounded(self) -> Decimal:
        return self.per_chunk_rounded * self.chunks


def estimate_task(task, pricing: PricingTable, model: str = "gpt41",
                  estimator: Callable[[str], int] | None = None,
                  chunk_input_tokens: int = CHUNK_INPUT_TOKENS,
                  chunk_output_tokens: int = CHUNK_OUTPUT_TOKENS,
                  report_words: int = REPORT_WORDS,
                  instructor_prompt: str | None = None) -> CostEstimate:
    """Predict a task's LLM cost before running it.

    ``high`` prices every input token at the full rate; ``low`` assumes all
    chunk input hits the provider's input cache. Aggregation feeds every
    chunk summary back to the Instructor and writes a ``report_words`` report
    (about 4/3 tokens per word).
    """
    from .gateway import count_tokens
    from .prompts import instructor_system_prompt

    estimator = estimator or count_tokens
    price = pricing[model]
    hours = getattr(task, "hours", task) if task is not None else 0
    chunks = int(hours) // 24
    if instructor_prompt is None:
        instructor_prompt = instructor_system_prompt()
    agg_in = chunks * chunk_output_tokens + estimator(instructor_prompt)
    agg_out = math.ceil(report_words * 4 / 3)
    aggregation = chunk_cost(agg_in, agg_out, price)
    high_chunk = chunk_cost(chunk_input_tokens, chunk_output_tokens, price, 0)
    low_chunk = chunk_cost(chunk_input_tokens, chunk_output_tokens, price, 1)
    return CostEstimate(pricing.resolve(model), chunks, chunks * low_chunk + aggregation,
                        chunks * high_chunk + aggregation, high_chunk, aggregation)
