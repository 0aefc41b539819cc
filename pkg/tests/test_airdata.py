import json
from datetime import timedelta

import pytest
from hypothesis import given, settings, strategies as st

from aqllm.airdata import (
    HOUR,
    AirQualityClient,
    GeoPoint,
    Pollutant,
    PopulationClass,
    current_conditions,
    fetch_history,
    history_to_pages,
    load_fixture,
    normalize_history,
    page_windows,
    record_to_wire,
    save_fixture,
    synthetic_history,
    trim_to_whole_days,
)
from aqllm.cost import UsageLedger
from aqllm.errors import ConfigurationError, ConflictError, IntegrityError, ParseError, PreconditionError

from conftest import LA, T0, make_history


def test_geopoint_bounds():
    with pytest.raises(PreconditionError):
        GeoPoint(91, 0)
    with pytest.raises(PreconditionError):
        GeoPoint(0, -181)


def test_pollutant_parse_aliases():
    assert Pollutant.parse("pm2.5") is Pollutant.PM25
    assert Pollutant.parse("pm25") is Pollutant.PM25
    assert Pollutant.parse("PM10") is Pollutant.PM10
    with pytest.raises(ParseError):
        Pollutant.parse("radon")


def test_one_page_identity():
    h = make_history(range(24))
    pages = history_to_pages(h)
    assert len(pages) == 1
    out = normalize_history(pages, LA)
    assert out.hours == 24
    assert [r.timestamp for r in out.records] == [r.timestamp for r in h.records]


def test_two_pages_merge_sorted():
    h = make_history(range(336))
    pages = history_to_pages(h, 168)
    out = normalize_history(list(reversed(pages)), LA)
    assert out.hours == 336
    ts = [r.timestamp for r in out.records]
    assert ts == sorted(ts) and len(set(ts)) == 336


def test_duplicate_identical_hour_deduplicated():
    h = make_history(range(24))
    page = history_to_pages(h)[0]
    page["hoursInfo"].append(page["hoursInfo"][5])
    assert normalize_history([page]).hours == 24


def test_conflicting_duplicate_raises():
    h = make_history(range(24))
    page = history_to_pages(h)[0]
    other = json.loads(json.dumps(page["hoursInfo"][5]))
    other["pollutants"][0]["concentration"]["value"] = 999.0
    page["hoursInfo"].append(other)
    with pytest.raises(ConflictError):
        normalize_history([page])


def test_malformed_page_names_field():
    with pytest.raises(ParseError) as exc:
        normalize_history([{"hoursInfo": [{"pollutants": []}]}])
    assert "dateTime" in str(exc.value)


def test_wire_roundtrip_keeps_all_pollutants(la_history):
    rec = la_history.records[0]
    again = normalize_history([{"hoursInfo": [record_to_wire(rec)]}]).records[0]
    assert again == rec
    assert len(again.readings) == 6


def test_fetch_call_counts(la_history):
    for hours, calls in ((720, 5), (168, 1), (169, 2), (1, 1)):
        ledger = UsageLedger()
        client = AirQualityClient.from_history(la_history, ledger)
        h = fetch_history(LA, hours, client)
        assert h.hours == hours
        assert ledger.data_calls == calls


def test_fetch_parallel_matches_serial(la_history):
    a = fetch_history(LA, 720, AirQualityClient.from_history(la_history))
    b = fetch_history(LA, 720, AirQualityClient.from_history(la_history, max_workers=4))
    assert a.records == b.records == la_history.records


@pytest.mark.parametrize("hours", [0, 721, -5])
def test_fetch_bounds(la_history, hours):
    with pytest.raises(PreconditionError):
        fetch_history(LA, hours, AirQualityClient.from_history(la_history))


def test_fetch_reports_gaps():
    h = make_history(range(48))
    holed = type(h)(h.location, [r for r in h.records if r.timestamp != T0 + 13 * HOUR])
    out = fetch_history(LA, 48, AirQualityClient.from_history(holed), end=T0 + 48 * HOUR)
    assert out.hours == 47
    assert out.gaps == (T0 + 13 * HOUR,)


def test_page_windows_cover_request():
    end = T0 + 720 * HOUR
    windows = page_windows(end, 720)
    assert len(windows) == 5
    assert windows[0][0] == T0 and windows[-1][1] == end
    assert all(b - a <= timedelta(hours=168) for a, b in windows)


def test_current_conditions_replay(la_history):
    rec = current_conditions(LA, AirQualityClient.from_history(la_history))
    assert rec == la_history.records[-1]
    assert len(rec.readings) == 6
    assert set(rec.health_recommendations) == set(PopulationClass)


def test_missing_credentials_is_configuration_error():
    with pytest.raises(ConfigurationError):
        AirQualityClient.from_env(None, env={})


def test_fixture_roundtrip(tmp_path, la_history):
    path = save_fixture(la_history, tmp_path / "la.json")
    assert load_fixture(path) == la_history


def test_truncated_fixture(tmp_path, la_history):
    path = save_fixture(la_history, tmp_path / "la.json")
    path.write_text(path.read_text()[:500])
    with pytest.raises(IntegrityError):
        load_fixture(path)


def test_tampered_fixture(tmp_path):
    path = save_fixture(make_history(range(24)), tmp_path / "x.json")
    doc = json.loads(path.read_text())
    doc["records"][3]["readings"]["PM25"]["value"] = 1234.5
    path.write_text(json.dumps(doc))
    with pytest.raises(IntegrityError):
        load_fixture(path)


def test_trim_to_whole_days():
    h = make_history(range(60), start=T0 + 5 * HOUR)
    t = trim_to_whole_days(h)
    assert t.hours == 24 and t.start.hour == 0


def test_synthetic_is_deterministic_and_peaks():
    a, b = synthetic_history(), synthetic_history()
    assert a == b
    assert max(r.value(Pollutant.PM25) for r in a.records) == 509.07


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1000, allow_nan=False).map(lambda x: round(x, 2)), min_size=1, max_size=400),
       st.integers(1, 200))
def test_pages_roundtrip_property(values, page_hours):
    h = make_history(values)
    assert normalize_history(history_to_pages(h, page_hours), LA).records == h.records
