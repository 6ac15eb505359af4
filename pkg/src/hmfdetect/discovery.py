"""Region-wide detector sweeps and the ranked suspect report."""

import csv
import io
import json
import logging
from collections import Counter
from dataclasses import dataclass

from . import geodata
from .dataset import locate
from .errors import EmptyInputError, ExportError, JoinError
from .model import predict_scores
from .records import Label

log = logging.getLogger(__name__)

COORD_DECIMALS = 9
SUSPECT_FIELDS = ("rank", "address_id", "score", "lat", "lon")


@dataclass(frozen=True)
class SuspectEntry:
    address_id: str
    score: float
    official_label: Label
    lat: float | None
    lon: float | None


@dataclass(frozen=True)
class SuspectReport:
    region: str
    entries: tuple
    threshold: float
    model_id: str
    confirmations: tuple = ()  # officially multi-family addresses, same ordering


def sweep_region(records, scenes, model, side_m=50.0, tally=None, batch_size=64):
    """Score every croppable record; returns ``[(address_id, score), ...]``
    in input order.  Skipped records are counted in ``tally``."""
    tally = Counter() if tally is None else tally
    out = []
    ids, tiles = [], []

    def flush():
        out.extend(zip(ids, (float(s) for s in predict_scores(model, tiles))))
        ids.clear()
        tiles.clear()

    for rec in records:
        scene, center = locate(rec, scenes)
        if scene is None:
            tally["outside"] += 1
            continue
        try:
            tiles.append(geodata.crop_tile(scene, center, side_m, rec.address_id))
        except geodata.PartialCoverageError:
            tally["partial"] += 1
            continue
        ids.append(rec.address_id)
        if len(tiles) == batch_size:
            flush()
    if tiles:
        flush()
    if not out:
        raise EmptyInputError("no address in the region could be cropped")
    if sum(tally.values()):
        log.warning("sweep skipped %d records: %s", sum(tally.values()), dict(tally))
    return out


def _ordered(entries):
    return tuple(sorted(entries, key=lambda e: (-e.score, e.address_id)))


def rank_suspects(scores, records, threshold=0.5, region="", model_id=""):
    """Officially single-family records scoring at or above ``threshold``,
    best first (ties by address_id).  Officially multi-family records that
    were scored are listed under ``confirmations``."""
    by_id = {r.address_id: r for r in records}
    suspects, confirm = [], []
    for aid, score in dict(scores).items():
        rec = by_id.get(aid)
        if rec is None:
            raise JoinError(f"score for unknown address_id {aid!r}")
        entry = SuspectEntry(aid, float(score), rec.official_label, rec.lat, rec.lon)
        if rec.official_label == Label.MULTI_FAMILY:
            confirm.append(entry)
        elif score >= threshold:
            suspects.append(entry)
    return SuspectReport(region, _ordered(suspects), float(threshold), model_id, _ordered(confirm))


def export_geojson(report):
    features = []
    for rank, e in enumerate(report.entries, start=1):
        if e.lat is None or e.lon is None:
            raise ExportError(f"suspect {e.address_id!r} has no coordinates")
        features.append(
            {
                "type": "Feature",
                "geometry": {
                    "type": "Point",
                    "coordinates": [round(e.lon, COORD_DECIMALS), round(e.lat, COORD_DECIMALS)],
                },
                "properties": {
                    "address_id": e.address_id,
                    "score": e.score,
                    "rank": rank,
                    "official_label": e.official_label.display,
                },
            }
        )
    doc = {"type": "FeatureCollection", "features": features}
    return json.dumps(doc, indent=1, ensure_ascii=False) + "\n"


def format_suspect_csv(entries):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUSPECT_FIELDS)
    for rank, e in enumerate(entries, start=1):
        w.writerow([
            rank, e.address_id, repr(e.score),
            "" if e.lat is None else f"{e.lat:.{COORD_DECIMALS}f}",
            "" if e.lon is None else f"{e.lon:.{COORD_DECIMALS}f}",
        ])
    return buf.getvalue()
