from datetime import date, datetime, timedelta, timezone
from pathlib import Path

import pytest

from aqllm.airdata import (
    UG_M3,
    AirQualityClient,
    AirQualityHistory,
    GeoPoint,
    HourlyRecord,
    Pollutant,
    PollutantReading,
    synthetic_history,
)
from aqllm.codeexec import DataContext, default_registry
from aqllm.cost import UsageLedger
from aqllm.gateway import Gateway, RetryPolicy, ScriptedProvider

DATA = Path(__file__).parent / "data"
LA = GeoPoint(34.0725, -118.5445)
T0 = datetime(2025, 1, 9, tzinfo=timezone.utc)


def make_history(pm25, pm10=None, start=T0, location=LA):
    """History from plain hourly PM lists (PM10 defaults to PM2.5)."""
    pm10 = pm25 if pm10 is None else pm10
    records = [
        HourlyRecord(start + timedelta(hours=h), {
            Pollutant.PM25: PollutantReading(Pollutant.PM25, float(a), UG_M3),
            Pollutant.PM10: PollutantReading(Pollutant.PM10, float(b), UG_M3),
        })
        for h, (a, b) in enumerate(zip(pm25, pm10))
    ]
    return AirQualityHistory(location, records)


def scripted_gateway(entries, ledger=None, **kw):
    return Gateway(ScriptedProvider(entries), RetryPolicy(3, 0.0), ledger, deterministic=True, **kw)


@pytest.fixture(scope="session")
def la_history():
    return synthetic_history()


@pytest.fixture
def registry():
    return default_registry()


@pytest.fixture
def data_context(la_history):
    return DataContext(AirQualityClient.from_history(la_history, UsageLedger()))


@pytest.fixture
def day():
    return date(2025, 1, 10)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
