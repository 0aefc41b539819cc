from decimal import Decimal

import pytest

from aqllm.cost import (
    DataApiQuota,
    PriceEntry,
    PricingTable,
    UsageLedger,
    chunk_cost,
    estimate_task,
    display_round,
    run_cost,
)
from aqllm.errors import PricingError

PRICING = PricingTable.load()
GPT41 = PRICING["gpt41"]


def test_pricing_table_aliases():
    assert PRICING.resolve("gpt-4.1") == "gpt41"
    assert GPT41 == PriceEntry("gpt41", Decimal("2.00"), Decimal("0.50"), Decimal("8.00"))
    with pytest.raises(PricingError):
        PRICING["nope"]


def test_chunk_cost_examples():
    assert chunk_cost(25_000, 200, GPT41) == Decimal("0.0516")
    assert display_round(chunk_cost(25_000, 200, GPT41)) == Decimal("0.05")
    assert chunk_cost(0, 0, GPT41) == 0
    assert chunk_cost(25_000, 200, GPT41, 1) == Decimal("0.0141")


def test_run_cost_thirty_chunks():
    ledger = UsageLedger()
    for _ in range(30):
        ledger.record("gpt41", 25_000, 200)
    report = run_cost(ledger, PRICING)
    assert report.llm_total == Decimal("1.548")
    assert display_round(chunk_cost(25_000, 200, GPT41)) * 30 == Decimal("1.50")


def test_run_cost_unpriced_model():
    ledger = UsageLedger()
    ledger.record("mystery-model", 1, 1)
    with pytest.raises(PricingError) as exc:
        run_cost(ledger, PRICING)
    assert "mystery-model" in str(exc.value)


@pytest.mark.parametrize("calls, linear, bucketed", [
    (9_999, "0", "0"), (10_000, "0", "0"), (10_500, "2.50", "5.00"), (12_000, "10.00", "10.00"),
])
def test_data_api_quota(calls, linear, bucketed):
    q = DataApiQuota()
    assert q.cost(calls) == Decimal(linear)
    assert q.cost(calls, bucketed=True) == Decimal(bucketed)


def test_cached_tokens_priced_lower():
    ledger = UsageLedger()
    ledger.record("gpt41", 25_000, 200, cached_input_tokens=25_000)
    assert run_cost(ledger, PRICING).llm_total == Decimal("0.0141")


def test_estimate_range():
    est = estimate_task(720, PRICING)
    assert est.chunks == 30
    assert est.per_chunk_exact == Decimal("0.0516")
    assert est.high == Decimal("1.548") + est.aggregation
    assert est.low == Decimal("0.423") + est.aggregation
    assert Decimal("0.005") < est.aggregation < Decimal("0.03")


def test_estimate_zero_chunks_is_aggregation_only():
    est = estimate_task(0, PRICING)
    assert est.low == est.high == est.aggregation
    assert display_round(est.aggregation) in (Decimal("0.01"), Decimal("0.02"))


def test_deepseek_about_eight_times_cheaper():
    ratio = estimate_task(720, PRICING).high / estimate_task(720, PRICING, "deepseek-v3").high
    assert 6 < ratio < 9


def test_report_outputs(tmp_path):
    ledger = UsageLedger()
    ledger.record("gpt41", 1000, 10)
    ledger.record_data_call(3)
    report = run_cost(ledger, PRICING)
    text = report.to_text()
    assert "llm:gpt41" in text and "compiled" in text
    rows = report.to_csv(tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "item,usd"
