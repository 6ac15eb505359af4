"""Address records, category labels, geocoding and WGS84 projection."""

import csv
import enum
import io
import logging
import math
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .errors import (
    GeocodeUnavailableError,
    IngestError,
    LowConfidenceError,
    ParseError,
    UnsupportedCRSError,
)

log = logging.getLogger(__name__)

CSV_FIELDS = ("address_id", "street_text", "category_code", "lat", "lon", "tract_id", "zipcode")
DEFAULT_MULTI_CODES = frozenset({"B1"})


class Label(enum.IntEnum):
    SINGLE_FAMILY = 0
    MULTI_FAMILY = 1

    @property
    def display(self):
        return "MultiFamily" if self else "SingleFamily"


@dataclass(frozen=True)
class AddressRecord:
    address_id: str
    street_text: str
    category_code: str
    official_label: Label
    lat: float | None = None
    lon: float | None = None
    tract_id: str = ""
    zipcode: str = ""

    def __post_init__(self):
        if self.lat is not None and not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"{self.address_id}: latitude {self.lat} out of range")
        if self.lon is not None and not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"{self.address_id}: longitude {self.lon} out of range")

    @property
    def coords(self):
        if self.lat is None or self.lon is None:
            return None
        return self.lat, self.lon


def label_from_category(code, multi_codes=DEFAULT_MULTI_CODES):
    return Label.MULTI_FAMILY if code in multi_codes else Label.SINGLE_FAMILY


def _coord(value, name, lineno):
    value = value.strip()
    if not value:
        return None
    try:
        v = float(value)
    except ValueError:
        raise ParseError(f"unparseable {name} {value!r}", line=lineno) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite {name} {value!r}", line=lineno)
    return v


def parse_address_csv(text, multi_codes=DEFAULT_MULTI_CODES):
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise ParseError("missing header row", line=1)
    if tuple(h.strip() for h in header) != CSV_FIELDS:
        raise ParseError(f"expected header {','.join(CSV_FIELDS)}", line=1)
    records = []
    seen = {}
    dupes = []
    for row in reader:
        lineno = reader.line_num
        if not row:
            continue
        if len(row) != len(CSV_FIELDS):
            raise ParseError(f"expected {len(CSV_FIELDS)} fields, got {len(row)}", line=lineno)
        aid, street, code, lat, lon, tract, zipcode = row
        lat_v = _coord(lat, "latitude", lineno)
        lon_v = _coord(lon, "longitude", lineno)
        if (lat_v is None) != (lon_v is None):
            raise ParseError("lat and lon must both be present or both blank", line=lineno)
        try:
            rec = AddressRecord(
                address_id=aid,
                street_text=street,
                category_code=code,
                official_label=label_from_category(code, multi_codes),
                lat=lat_v,
                lon=lon_v,
                tract_id=tract,
                zipcode=zipcode,
            )
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        if aid in seen:
            dupes.append(aid)
        seen[aid] = lineno
        records.append(rec)
    if dupes:
        raise IngestError(f"duplicate address_id values: {', '.join(sorted(set(dupes)))}")
    return records


def format_address_csv(records):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in records:
        writer.writerow(
            [
                r.address_id,
                r.street_text,
                r.category_code,
                "" if r.lat is None else repr(r.lat),
                "" if r.lon is None else repr(r.lon),
                r.tract_id,
                r.zipcode,
            ]
        )
    return buf.getvalue()


def read_address_csv(path, multi_codes=DEFAULT_MULTI_CODES):
    return parse_address_csv(Path(path).read_text(encoding="utf-8"), multi_codes)


# ---------------------------------------------------------------------------
# geocoding


@dataclass(frozen=True)
class GeocodeResult:
    lat: float
    lon: float
    confidence: float
    source: str  # "cache" | "client" | "stub"


class GeocodeClientError(Exception):
    """Raised by clients for failed lookups; retried by :func:`geocode`."""


class StubGeocoder:
    """Deterministic offline client answering from a fixed table."""

    source = "stub"

    def __init__(self, table, confidence=1.0):
        self.table = {normalize_address(k): v for k, v in table.items()}
        self.confidence = confidence
        self.calls = 0

    def lookup(self, street_text):
        self.calls += 1
        hit = self.table.get(normalize_address(street_text))
        if hit is None:
            raise GeocodeClientError(f"no match for {street_text!r}")
        if len(hit) == 3:
            return hit
        return hit[0], hit[1], self.confidence


def normalize_address(text):
    return " ".join(text.lower().split())


class GeocodeCache:
    """Key-value store of ``normalized_address<TAB>lat<TAB>lon<TAB>confidence``.

    With a path, entries are loaded on construction and appended on ``put``.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._entries = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for lineno, line in enumerate(self.path.read_text(encoding="utf-8").splitlines(), 1):
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise ParseError(f"{self.path}: expected 4 tab-separated fields", line=lineno)
                try:
                    self._entries[parts[0]] = tuple(float(p) for p in parts[1:])
                except ValueError:
                    raise ParseError(f"{self.path}: bad number", line=lineno) from None

    def __len__(self):
        return len(self._entries)

    def get(self, street_text):
        return self._entries.get(normalize_address(street_text))

    def put(self, street_text, lat, lon, confidence):
        key = normalize_address(street_text)
        with self._lock:
            self._entries[key] = (lat, lon, confidence)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(f"{key}\t{lat!r}\t{lon!r}\t{confidence!r}\n")


def geocode(record, client, cache, *, retries=3, backoff=0.5, min_confidence=0.5, sleep=time.sleep):
    if not record.street_text.strip():
        raise ValueError(f"{record.address_id}: empty street_text")
    hit = cache.get(record.street_text)
    if hit is not None:
        lat, lon, conf = hit
        return GeocodeResult(lat, lon, conf, "cache")
    if client is None:
        raise GeocodeUnavailableError(record.address_id, "not cached and no client configured")
    delay = backoff
    last = None
    for attempt in range(retries):
        try:
            lat, lon, conf = client.lookup(record.street_text)
            break
        except GeocodeClientError as exc:
            last = exc
            if attempt + 1 < retries:
                sleep(delay)
                delay *= 2
    else:
        raise GeocodeUnavailableError(record.address_id, str(last))
    if conf < min_confidence:
        raise LowConfidenceError(record.address_id, conf, min_confidence)
    cache.put(record.street_text, lat, lon, conf)
    return GeocodeResult(lat, lon, conf, getattr(client, "source", "client"))


def geocode_all(records, client, cache, *, min_interval=0.0, **kwargs):
    """Fill in missing coordinates, one client call at a time.

    Records that already carry coordinates pass through untouched.
    ``min_interval`` spaces consecutive client calls (seconds).
    """
    out = []
    last_call = None
    sleep = kwargs.get("sleep", time.sleep)
    for rec in records:
        if rec.coords is not None:
            out.append(rec)
            continue
        if cache.get(rec.street_text) is None and min_interval and last_call is not None:
            wait = min_interval - (time.monotonic() - last_call)
            if wait > 0:
                sleep(wait)
        res = geocode(rec, client, cache, **kwargs)
        if res.source != "cache":
            last_call = time.monotonic()
        out.append(replace(rec, lat=res.lat, lon=res.lon))
    return out


# ---------------------------------------------------------------------------
# projection

EARTH_RADIUS = 6371008.8
IDENTITY_CRS = "LOCAL:DEGREE-SCALE"
DEGREE_SCALE = 111320.0  # metres per degree at the equator (small-angle)


def parse_crs(crs):
    """Return ``("identity", {})`` or ``("tmerc", params)`` for a CRS string.

    Supported declarations are :data:`IDENTITY_CRS` and a spherical
    transverse Mercator written proj-style, e.g.
    ``+proj=tmerc +lat_0=29.7 +lon_0=-95.37 +k_0=1 +x_0=300000 +y_0=3300000``.
    """
    s = crs.strip()
    if s == IDENTITY_CRS:
        return "identity", {}
    parts = s.split()
    params = {}
    for p in parts:
        if not p.startswith("+") or "=" not in p:
            raise UnsupportedCRSError(f"unsupported CRS {crs!r}")
        k, v = p[1:].split("=", 1)
        params[k] = v
    if params.get("proj") != "tmerc":
        raise UnsupportedCRSError(f"unsupported CRS {crs!r}")
    try:
        out = {
            "lat_0": float(params.get("lat_0", 0.0)),
            "lon_0": float(params.get("lon_0", 0.0)),
            "k_0": float(params.get("k_0", 1.0)),
            "x_0": float(params.get("x_0", 0.0)),
            "y_0": float(params.get("y_0", 0.0)),
            "R": float(params.get("R", EARTH_RADIUS)),
        }
    except ValueError:
        raise UnsupportedCRSError(f"bad numeric parameter in CRS {crs!r}") from None
    return "tmerc", out


def project_wgs84(lat, lon, crs):
    kind, p = parse_crs(crs)
    if kind == "identity":
        return lon * DEGREE_SCALE, lat * DEGREE_SCALE
    phi = math.radians(lat)
    lam = math.radians(lon - p["lon_0"])
    scale = p["k_0"] * p["R"]
    b = math.cos(phi) * math.sin(lam)
    x = p["x_0"] + scale * math.atanh(b)
    y = p["y_0"] + scale * (math.atan2(math.tan(phi), math.cos(lam)) - math.radians(p["lat_0"]))
    return x, y


def unproject_wgs84(x, y, crs):
    """Inverse of :func:`project_wgs84`; returns ``(lat, lon)``."""
    kind, p = parse_crs(crs)
    if kind == "identity":
        return y / DEGREE_SCALE, x / DEGREE_SCALE
    scale = p["k_0"] * p["R"]
    xs = (x - p["x_0"]) / scale
    d = (y - p["y_0"]) / scale + math.radians(p["lat_0"])
    lat = math.degrees(math.asin(math.sin(d) / math.cosh(xs)))
    lon = p["lon_0"] + math.degrees(math.atan2(math.sinh(xs), math.cos(d)))
    return lat, lon
