"""Air-quality data model, history client with paging, and fixture store.

The canonical record format here is independent of the provider's wire
format. ``normalize_history`` is the only place that knows the wire shape;
fixtures store canonical records so every downstream module runs offline.
"""

from __future__ import annotations

import concurrent.futures
import enum
import hashlib
import json
import math
import os
from dataclasses import dataclass
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping

import httpx
import numpy as np

from .errors import (
    ConfigurationError,
    ConflictError,
    IntegrityError,
    ParseError,
    PreconditionError,
    TransportError,
)

HOUR = timedelta(hours=1)
MAX_HOURS = 720
HOURS_PER_CALL = 168

UG_M3 = "µg/m³"
PPB = "ppb"

_WIRE_UNITS = {
    "MICROGRAMS_PER_CUBIC_METER": UG_M3,
    "PARTS_PER_BILLION": PPB,
}
_UNIT_TO_WIRE = {v: k for k, v in _WIRE_UNITS.items()}


class Pollutant(str, enum.Enum):
    CO = "CO"
    NO2 = "NO2"
    O3 = "O3"
    PM10 = "PM10"
    PM25 = "PM25"
    SO2 = "SO2"

    @classmethod
    def parse(cls, code: str) -> "Pollutant":
        key = code.strip().upper().replace(".", "").replace("_", "")
        try:
            return cls(key)
        except ValueError:
            raise ParseError(f"unknown pollutant code {code!r}", field="code") from None


class PopulationClass(str, enum.Enum):
    GENERAL = "general"
    LUNG_DISEASE = "lung-disease"
    HEART_DISEASE = "heart-disease"
    PREGNANCY = "pregnancy"
    ELDERLY = "elderly"
    CHILDREN = "children"


# provider key -> class; provider keys outside the six classes are ignored
_WIRE_CLASSES = {
    "generalPopulation": PopulationClass.GENERAL,
    "lungDiseasePopulation": PopulationClass.LUNG_DISEASE,
    "heartDiseasePopulation": PopulationClass.HEART_DISEASE,
    "pregnantWomen": PopulationClass.PREGNANCY,
    "elderly": PopulationClass.ELDERLY,
    "children": PopulationClass.CHILDREN,
}
_CLASS_TO_WIRE = {v: k for k, v in _WIRE_CLASSES.items()}


@dataclass(frozen=True)
class GeoPoint:
    latitude: float
    longitude: float

    def __post_init__(self):
        for name, value, bound in (("latitude", self.latitude, 90.0), ("longitude", self.longitude, 180.0)):
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise PreconditionError(f"{name} must be a finite number, got {value!r}")
            if not -bound <= value <= bound:
                raise PreconditionError(f"{name} {value} outside [-{bound:g}, {bound:g}]")


@dataclass(frozen=True)
class PollutantReading:
    code: Pollutant
    concentration: float
    unit: str = UG_M3

    def __post_init__(self):
        if not isinstance(self.code, Pollutant):
            object.__setattr__(self, "code", Pollutant.parse(str(self.code)))
        c = self.concentration
        if not isinstance(c, (int, float)) or not math.isfinite(c) or c < 0:
            raise ParseError(f"invalid concentration {c!r} for {self.code.value}", field="concentration")


@dataclass(frozen=True)
class HourlyRecord:
    timestamp: datetime
    readings: Mapping[Pollutant, PollutantReading]
    aqi: int | None = None
    health_recommendations: Mapping[PopulationClass, str] | None = None

    def __post_init__(self):
        ts = self.timestamp
        if ts.tzinfo is None:
            raise ParseError("timestamp must be timezone-aware", field="timestamp")
        ts = ts.astimezone(timezone.utc)
        if ts.minute or ts.second or ts.microsecond:
            raise ParseError(f"timestamp {ts.isoformat()} not aligned to the hour", field="timestamp")
        object.__setattr__(self, "timestamp", ts)
        for code, reading in self.readings.items():
            if reading.code != code:
                raise ParseError(f"reading keyed {code} carries code {reading.code}", field="readings")
        if self.aqi is not None and self.aqi < 0:
            raise ParseError(f"negative AQI {self.aqi}", field="aqi")

    def value(self, code: Pollutant) -> float | None:
        reading = self.readings.get(code)
        return None if reading is None else reading.concentration


@dataclass(frozen=True)
class AirQualityHistory:
    location: GeoPoint | None
    records: tuple[HourlyRecord, ...]
    gaps: tuple[datetime, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "gaps", tuple(self.gaps))
        for prev, cur in zip(self.records, self.records[1:]):
            if cur.timestamp <= prev.timestamp:
                raise ParseError(
                    f"records not strictly ascending at {cur.timestamp.isoformat()}", field="timestamp"
                )

    @property
    def hours(self) -> int:
        return len(self.records)

    @property
    def start(self) -> datetime:
        return self.records[0].timestamp

    @property
    def end(self) -> datetime:
        return self.records[-1].timestamp


@dataclass(frozen=True)
class FixtureArchive:
    location: GeoPoint | None
    retrieved_at: datetime
    records: tuple[HourlyRecord, ...]
    provenance: str = "synthetic"

    def history(self) -> AirQualityHistory:
        return AirQualityHistory(self.location, self.records, find_gaps(self.records))


def find_gaps(records: Iterable[HourlyRecord], start=None, end=None) -> tuple[datetime, ...]:
    """Hours missing between ``start`` and ``end`` (inclusive; default: first/last record)."""
    stamps = [r.timestamp for r in records]
    if not stamps and (start is None or end is None):
        return ()
    start = stamps[0] if start is None else start
    end = stamps[-1] if end is None else end
    present = set(stamps)
    missing = []
    t = start
    while t <= end:
        if t not in present:
            missing.append(t)
        t += HOUR
    return tuple(missing)


def parse_timestamp(text: str) -> datetime:
    if not isinstance(text, str):
        raise ParseError(f"timestamp must be a string, got {text!r}", field="dateTime")
    try:
        ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        raise ParseError(f"unparseable timestamp {text!r}", field="dateTime") from None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


# --- provider wire format -------------------------------------------------

def _parse_wire_hour(item: Mapping[str, Any], where: str) -> HourlyRecord:
    if not isinstance(item, Mapping):
        raise ParseError(f"{where}: hour entry is not an object", field="hoursInfo")
    if "dateTime" not in item:
        raise ParseError(f"{where}: missing timestamp", field="dateTime")
    ts = parse_timestamp(item["dateTime"])
    readings: dict[Pollutant, PollutantReading] = {}
    for p in item.get("pollutants") or []:
        try:
            code = Pollutant.parse(p["code"])
            conc = p["concentration"]
            value = float(conc["value"])
            units = conc.get("units", "MICROGRAMS_PER_CUBIC_METER")
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{where}: bad pollutant entry {p!r}", field="pollutants") from exc
        if units not in _WIRE_UNITS:
            raise ParseError(f"{where}: unknown unit {units!r}", field="pollutants.concentration.units")
        if code in readings:
            raise ParseError(f"{where}: duplicate pollutant {code.value}", field="pollutants")
        readings[code] = PollutantReading(code, value, _WIRE_UNITS[units])
    aqi = None
    for index in item.get("indexes") or []:
        if isinstance(index, Mapping) and "aqi" in index:
            aqi = int(index["aqi"])
            break
    recs = None
    raw_recs = item.get("healthRecommendations")
    if raw_recs:
        if not isinstance(raw_recs, Mapping):
            raise ParseError(f"{where}: healthRecommendations is not an object", field="healthRecommendations")
        recs = {_WIRE_CLASSES[k]: str(v) for k, v in raw_recs.items() if k in _WIRE_CLASSES}
    return HourlyRecord(ts, readings, aqi, recs)


def normalize_history(raw_pages: Iterable[Mapping[str, Any]], location: GeoPoint | None = None) -> AirQualityHistory:
    """Merge provider pages into one ascending, de-duplicated history.

    A page is ``{"hoursInfo": [...]}``. Duplicate hours with identical content
    collapse to one record; duplicates that disagree raise ``ConflictError``.
    """
    by_time: dict[datetime, HourlyRecord] = {}
    for n, page in enumerate(raw_pages):
        if not isinstance(page, Mapping) or not isinstance(page.get("hoursInfo", []), list):
            raise ParseError(f"page {n}: expected an object with a hoursInfo list", field="hoursInfo")
        for k, item in enumerate(page.get("hoursInfo", [])):
            rec = _parse_wire_hour(item, f"page {n} hour {k}")
            prev = by_time.get(rec.timestamp)
            if prev is not None and prev != rec:
                raise ConflictError(f"conflicting values for {format_timestamp(rec.timestamp)}")
            by_time[rec.timestamp] = rec
    records = tuple(by_time[t] for t in sorted(by_time))
    return AirQualityHistory(location, records, find_gaps(records))


def record_to_wire(rec: HourlyRecord) -> dict[str, Any]:
    item: dict[str, Any] = {
        "dateTime": format_timestamp(rec.timestamp),
        "pollutants": [
            {
                "code": r.code.value.lower(),
                "concentration": {"value": r.concentration, "units": _UNIT_TO_WIRE[r.unit]},
            }
            for r in rec.readings.values()
        ],
    }
    if rec.aqi is not None:
        item["indexes"] = [{"code": "uaqi", "aqi": rec.aqi}]
    if rec.health_recommendations:
        item["healthRecommendations"] = {
            _CLASS_TO_WIRE[c]: text for c, text in rec.health_recommendations.items()
        }
    return item


def history_to_pages(history: AirQualityHistory, page_hours: int = HOURS_PER_CALL) -> list[dict[str, Any]]:
    """Inverse of ``normalize_history``; used by the fixture transport and in tests."""
    items = [record_to_wire(r) for r in history.records]
    return [{"hoursInfo": items[i:i + page_hours]} for i in range(0, len(items), page_hours)] or [{"hoursInfo": []}]


# --- transports and client ------------------------------------------------

class HttpTransport:
    """Talks to the cloud air-quality endpoints over HTTPS."""

    DEFAULT_BASE_URL = "https://airquality.googleapis.com"

    def __init__(self, api_key: str, base_url: str | None = None, timeout: float = 30.0,
                 http: httpx.Client | None = None):
        self.api_key = api_key
        self.base_url = (base_url or self.DEFAULT_BASE_URL).rstrip("/")
        self._http = http or httpx.Client(timeout=timeout)

    def _post(self, path: str, body: dict) -> dict:
        try:
            resp = self._http.post(f"{self.base_url}{path}", params={"key": self.api_key}, json=body)
        except httpx.HTTPError as exc:
            raise TransportError(f"request to {path} failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"provider rejected {path}: {resp.text[:200]}", status=resp.status_code)
        return resp.json()

    def history(self, location: GeoPoint, start: datetime, end: datetime) -> dict:
        hours = int((end - start) / HOUR)
        body = {
            "location": {"latitude": location.latitude, "longitude": location.longitude},
            "period": {"startTime": format_timestamp(start), "endTime": format_timestamp(end)},
            "pageSize": hours,
            "universalAqi": True,
            "extraComputations": ["HEALTH_RECOMMENDATIONS", "POLLUTANT_CONCENTRATION"],
        }
        return self._post("/v1/history:lookup", body)

    def current(self, location: GeoPoint) -> dict:
        body = {
            "location": {"latitude": location.latitude, "longitude": location.longitude},
            "universalAqi": True,
            "extraComputations": ["HEALTH_RECOMMENDATIONS", "POLLUTANT_CONCENTRATION"],
        }
        return self._post("/v1/currentConditions:lookup", body)

    def latest_hour(self) -> datetime:
        now = datetime.now(timezone.utc)
        return now.replace(minute=0, second=0, microsecond=0)


class FixtureTransport:
    """Serves provider-format pages from a recorded history."""

    def __init__(self, history: AirQualityHistory):
        self._records = history.records

    def history(self, location: GeoPoint, start: datetime, end: datetime) -> dict:
        page = AirQualityHistory(None, [r for r in self._records if start <= r.timestamp < end])
        return history_to_pages(page, page_hours=max(1, page.hours))[0]

    def current(self, location: GeoPoint) -> dict:
        if not self._records:
            raise TransportError("fixture holds no records", status=404)
        return record_to_wire(self._records[-1])

    def latest_hour(self) -> datetime:
        if not self._records:
            raise TransportError("fixture holds no records", status=404)
        return self._records[-1].timestamp + HOUR


class AirQualityClient:
    """Provider handle: a transport plus optional usage ledger."""

    def __init__(self, transport, ledger=None, max_workers: int = 1):
        self.transport = transport
        self.ledger = ledger
        self.max_workers = max_workers

    @classmethod
    def from_env(cls, fixture: str | Path | None = None, ledger=None, env: Mapping[str, str] | None = None):
        env = os.environ if env is None else env
        if fixture is not None:
            return cls(FixtureTransport(load_fixture(fixture)), ledger)
        key = env.get("AQ_API_KEY") or env.get("GOOGLE_MAPS_API_KEY")
        if not key:
            raise ConfigurationError("no data-provider credentials (AQ_API_KEY) and no fixture given")
        return cls(HttpTransport(key, env.get("AQ_BASE_URL")), ledger)

    @classmethod
    def from_history(cls, history: AirQualityHistory, ledger=None, max_workers: int = 1):
        return cls(FixtureTransport(history), ledger, max_workers)

    def _log_call(self):
        if self.ledger is not None:
            self.ledger.record_data_call()

    def history_page(self, location: GeoPoint, start: datetime, end: datetime) -> dict:
        self._log_call()
        return self.transport.history(location, start, end)

    def current(self, location: GeoPoint) -> dict:
        self._log_call()
        return self.transport.current(location)


def page_windows(end: datetime, hours: int) -> list[tuple[datetime, datetime]]:
    """Split ``[end - hours, end)`` into windows of at most one provider call each."""
    start = end - hours * HOUR
    windows = []
    t = start
    while t < end:
        w_end = min(t + HOURS_PER_CALL * HOUR, end)
        windows.append((t, w_end))
        t = w_end
    return windows


def fetch_history(location: GeoPoint, hours: int, client: AirQualityClient,
                  end: datetime | None = None) -> AirQualityHistory:
    """Retrieve ``hours`` hourly records ending just before ``end``.

    One provider call covers at most 168 hours, so a 720-hour request makes
    five calls. Missing hours are reported in ``history.gaps``, never filled.
    """
    if not isinstance(hours, int) or isinstance(hours, bool) or not 1 <= hours <= MAX_HOURS:
        raise PreconditionError(f"hours must be an integer in [1, {MAX_HOURS}], got {hours!r}")
    if end is None:
        end = client.transport.latest_hour()
    windows = page_windows(end, hours)
    if client.max_workers > 1:
        with concurrent.futures.ThreadPoolExecutor(client.max_workers) as pool:
            pages = list(pool.map(lambda w: client.history_page(location, *w), windows))
    else:
        pages = [client.history_page(location, *w) for w in windows]
    merged = normalize_history(pages, location)
    start = end - hours * HOUR
    records = tuple(r for r in merged.records if start <= r.timestamp < end)
    return AirQualityHistory(location, records, find_gaps(records, start, end - HOUR))


def current_conditions(location: GeoPoint, client: AirQualityClient) -> HourlyRecord:
    raw = client.current(location)
    return _parse_wire_hour(raw, "current conditions")


def trim_to_whole_days(history: AirQualityHistory) -> AirQualityHistory:
    """Drop leading and trailing partial UTC days."""
    recs = history.records
    if not recs:
        return history
    first = recs[0].timestamp
    start = first if first.hour == 0 else (first + timedelta(days=1)).replace(hour=0)
    last = recs[-1].timestamp
    end = last + HOUR if last.hour == 23 else last.replace(hour=0)
    kept = tuple(r for r in recs if start <= r.timestamp < end)
    return AirQualityHistory(history.location, kept, find_gaps(kept))


# --- fixtures ---------------------------------------------------------------

def record_to_json(rec: HourlyRecord) -> dict[str, Any]:
    out: dict[str, Any] = {
        "ts": format_timestamp(rec.timestamp),
        "readings": {c.value: {"value": r.concentration, "unit": r.unit} for c, r in rec.readings.items()},
    }
    if rec.aqi is not None:
        out["aqi"] = rec.aqi
    if rec.health_recommendations is not None:
        out["health_recommendations"] = {c.value: t for c, t in rec.health_recommendations.items()}
    return out


def record_from_json(obj: Mapping[str, Any]) -> HourlyRecord:
    readings = {}
    for code, r in obj["readings"].items():
        p = Pollutant(code)
        readings[p] = PollutantReading(p, float(r["value"]), r["unit"])
    recs = obj.get("health_recommendations")
    if recs is not None:
        recs = {PopulationClass(k): v for k, v in recs.items()}
    return HourlyRecord(parse_timestamp(obj["ts"]), readings, obj.get("aqi"), recs)


def _digest(records_json: list) -> str:
    blob = json.dumps(records_json, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def save_fixture(history: AirQualityHistory, path: str | Path, retrieved_at: datetime | None = None,
                 provenance: str = "synthetic") -> Path:
    path = Path(path)
    records = [record_to_json(r) for r in history.records]
    loc = history.location
    doc = {
        "location": None if loc is None else {"lat": loc.latitude, "lng": loc.longitude},
        "retrieved_at": format_timestamp(retrieved_at or datetime.now(timezone.utc).replace(microsecond=0)),
        "provenance": provenance,
        "records": records,
        "sha256": _digest(records),
    }
    path.write_text(json.dumps(doc, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")
    return path


def load_archive(path: str | Path) -> FixtureArchive:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"fixture {path} is not valid UTF-8 JSON: {exc}") from exc
    try:
        records_json = doc["records"]
        if "sha256" in doc and doc["sha256"] != _digest(records_json):
            raise IntegrityError(f"fixture {path}: checksum mismatch")
        loc = doc.get("location")
        location = None if loc is None else GeoPoint(float(loc["lat"]), float(loc["lng"]))
        records = tuple(record_from_json(r) for r in records_json)
        archive = FixtureArchive(location, parse_timestamp(doc["retrieved_at"]), records,
                                 doc.get("provenance", "unknown"))
        archive.history()  # validates ordering
    except IntegrityError:
        raise
    except (KeyError, TypeError, ValueError, ParseError) as exc:
        raise IntegrityError(f"fixture {path} is malformed: {exc}") from exc
    return archive


def load_fixture(path: str | Path) -> AirQualityHistory:
    return load_archive(path).history()


# --- synthetic data -----------------------------------------------------------

_HEALTH_TEXT = {
    "good": "With this level of air quality, you have no limitations. Enjoy the outdoors!",
    "moderate": "Consider reducing the intensity of outdoor activities if you experience symptoms.",
    "poor": "Reduce the intensity of outdoor activities. Keep relevant medications available.",
    "very-poor": "Avoid outdoor activities. Stay indoors with an activated air filtration system.",
}


def _aqi_band(pm25: float) -> tuple[int, str]:
    # universal-AQI style: 100 is best, 0 is worst
    aqi = int(max(0.0, 100.0 - pm25 * 0.8))
    if aqi >= 80:
        return aqi, "good"
    if aqi >= 60:
        return aqi, "moderate"
    if aqi >= 40:
        return aqi, "poor"
    return aqi, "very-poor"


def synthetic_history(location: GeoPoint | None = None, start: datetime | None = None, hours: int = MAX_HOURS,
                      seed: int = 0, spikes: Mapping[int, float] | None = None) -> AirQualityHistory:
    """Deterministic pseudo-observations with a clean baseline and a few spikes.

    ``spikes`` maps a 0-based day index to the peak PM2.5 on that day, reached
    at 14:00 UTC where PM10 reads the same value (a saturated co-spike); the
    default mimics two early wildfire episodes and a later minor one.
    """
    location = location or GeoPoint(34.0725, -118.5445)
    start = start or datetime(2025, 1, 9, tzinfo=timezone.utc)
    spikes = {1: 382.03, 3: 509.07, 12: 37.86} if spikes is None else spikes
    rng = np.random.default_rng(seed)
    records = []
    for h in range(hours):
        day, hour = divmod(h, 24)
        pm25 = float(rng.lognormal(np.log(4.0), 0.45))
        if day in spikes:
            shape = math.exp(-((hour - 14) ** 2) / 18.0)
            pm25 += spikes[day] * shape
        pm10 = pm25 * float(rng.uniform(1.1, 1.8)) + float(rng.uniform(0, 4))
        if day in spikes and hour == 14:
            pm25 = pm10 = spikes[day]
        pm25, pm10 = round(pm25, 2), round(pm10, 2)
        readings = {
            Pollutant.PM25: PollutantReading(Pollutant.PM25, pm25, UG_M3),
            Pollutant.PM10: PollutantReading(Pollutant.PM10, pm10, UG_M3),
            Pollutant.CO: PollutantReading(Pollutant.CO, round(float(rng.uniform(150, 400)), 2), PPB),
            Pollutant.NO2: PollutantReading(Pollutant.NO2, round(float(rng.uniform(2, 25)), 2), PPB),
            Pollutant.O3: PollutantReading(Pollutant.O3, round(float(rng.uniform(10, 45)), 2), PPB),
            Pollutant.SO2: PollutantReading(Pollutant.SO2, round(float(rng.uniform(0, 3)), 2), PPB),
        }
        aqi, band = _aqi_band(pm25)
        recs = {c: _HEALTH_TEXT[band] for c in PopulationClass}
        records.append(HourlyRecord(start + h * HOUR, readings, aqi, recs))
    return AirQualityHistory(location, records)


def day_of(ts: datetime) -> date:
    return ts.astimezone(timezone.utc).date()
