"""Labeled tile datasets: assembly, stratified splitting and synthetic fixtures."""

import csv
import io
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import geodata
from .errors import (
    ConfigError,
    EmptyClassError,
    HMFError,
    StratificationError,
)
from .records import (
    AddressRecord,
    Label,
    format_address_csv,
    label_from_category,
    project_wgs84,
    unproject_wgs84,
)

log = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.64, 0.16, 0.2)
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class LabeledTile:
    tile: geodata.ImageTile
    label: int
    address_id: str


@dataclass(frozen=True)
class AssemblyConfig:
    negative_ratio: float = 9.0  # negatives kept per positive
    side_m: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if not self.negative_ratio > 0:
            raise ConfigError(f"negative_ratio must be > 0, got {self.negative_ratio!r}")
        if not self.side_m > 0:
            raise ConfigError(f"side_m must be > 0, got {self.side_m!r}")


def record_center(record, scene):
    return project_wgs84(record.lat, record.lon, scene.crs)


def locate(record, scenes):
    """Return ``(scene, (x, y))`` for the first scene holding the record."""
    if record.coords is None:
        return None, None
    for scene in scenes:
        x, y = record_center(record, scene)
        if scene.contains(x, y):
            return scene, (x, y)
    return None, None


def crop_record(record, scenes, side_m):
    scene, center = locate(record, scenes)
    if scene is None:
        return None
    return geodata.crop_tile(scene, center, side_m, address_id=record.address_id)


def assemble(records, scenes, cfg, tally=None):
    """Crop every positive and a seeded uniform subsample of negatives.

    Records that cannot be cropped are skipped and counted in ``tally``
    (a :class:`collections.Counter`) under ``"outside"`` or ``"partial"``.
    Output is in the input record order.
    """
    tally = Counter() if tally is None else tally
    pos, neg = [], []
    for i, rec in enumerate(records):
        (pos if rec.official_label == Label.MULTI_FAMILY else neg).append(i)
    if not pos:
        raise EmptyClassError("no multi-family records to assemble")

    def try_crop(i):
        try:
            tile = crop_record(records[i], scenes, cfg.side_m)
        except geodata.PartialCoverageError:
            tally["partial"] += 1
            return None
        if tile is None:
            tally["outside"] += 1
        return tile

    kept = {}
    for i in pos:
        t = try_crop(i)
        if t is not None:
            kept[i] = t
    n_pos = len(kept)
    if n_pos == 0:
        raise EmptyClassError("no multi-family record could be cropped")
    target = min(len(neg), geodata.round_half_up(n_pos * cfg.negative_ratio))
    rng = np.random.default_rng(cfg.seed)
    got = 0
    for j in rng.permutation(len(neg)):
        if got == target:
            break
        t = try_crop(neg[j])
        if t is not None:
            kept[neg[j]] = t
            got += 1
    if sum(tally.values()):
        log.warning("assemble skipped %d records: %s", sum(tally.values()), dict(tally))
    return [
        LabeledTile(kept[i], int(records[i].official_label), records[i].address_id)
        for i in sorted(kept)
    ]


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    val: tuple
    test: tuple
    ratios: tuple = DEFAULT_RATIOS
    seed: int = 0
    stratified: bool = True

    def sizes(self):
        return len(self.train), len(self.val), len(self.test)

    def name_of(self):
        out = {}
        for name in SPLIT_NAMES:
            for i in getattr(self, name):
                out[i] = name
        return out


def apportion(n, ratios):
    """Largest-remainder integer sizes; leftovers go by descending fractional
    part, ties resolved in list order."""
    quotas = [n * Fraction(repr(float(r))) for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    rems = [q - s for q, s in zip(quotas, sizes)]
    order = sorted(range(len(ratios)), key=lambda i: (-rems[i], i))
    for k in range(n - sum(sizes)):
        sizes[order[k % len(order)]] += 1
    return tuple(sizes)


def split(n, ratios=DEFAULT_RATIOS, seed=0, stratify_labels=None):
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    if stratify_labels is None:
        if n < 3:
            raise ConfigError(f"need at least 3 items to split, got {n}")
        groups = [np.arange(n)]
    else:
        labels = np.asarray(stratify_labels)
        if len(labels) != n:
            raise ConfigError(f"{len(labels)} labels for {n} items")
        groups = []
        for cls in np.unique(labels):
            idx = np.flatnonzero(labels == cls)
            if len(idx) < 3:
                raise StratificationError(f"class {cls!r} has {len(idx)} items; need at least 3")
            groups.append(idx)
    parts = ([], [], [])
    for idx in groups:
        perm = rng.permutation(idx)
        a, b, _ = apportion(len(idx), ratios)
        parts[0].extend(perm[:a].tolist())
        parts[1].extend(perm[a : a + b].tolist())
        parts[2].extend(perm[a + b :].tolist())
    return DatasetSplit(
        train=tuple(sorted(parts[0])),
        val=tuple(sorted(parts[1])),
        test=tuple(sorted(parts[2])),
        ratios=ratios,
        seed=seed,
        stratified=stratify_labels is not None,
    )


# ---------------------------------------------------------------------------
# manifest / oracle files

MANIFEST_FIELDS = ("address_id", "label", "split", "scene_id", "center_x", "center_y")
ORACLE_FIELDS = ("address_id", "true_label", "official_label")


@dataclass(frozen=True)
class ManifestRow:
    address_id: str
    label: int
    split: str
    scene_id: str
    center_x: float
    center_y: float


def manifest_rows(tiles, ds):
    names = ds.name_of()
    return [
        ManifestRow(t.address_id, t.label, names[i], t.tile.provenance[0], *t.tile.center)
        for i, t in enumerate(tiles)
    ]


def write_manifest(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.address_id, r.label, r.split, r.scene_id, repr(r.center_x), repr(r.center_y)])


def read_manifest(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise HMFError(f"{path}: unexpected manifest header {reader.fieldnames}")
        return [
            ManifestRow(
                r["address_id"], int(r["label"]), r["split"], r["scene_id"],
                float(r["center_x"]), float(r["center_y"]),
            )
            for r in reader
        ]


def read_oracle(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return {r["address_id"]: int(r["true_label"]) for r in csv.DictReader(fh)}


# ---------------------------------------------------------------------------
# synthetic fixture

FIXTURE_CRS = "+proj=tmerc +lat_0=29.72 +lon_0=-95.36 +k_0=1 +x_0=300000 +y_0=3300000"


@dataclass(frozen=True)
class FixtureSpec:
    """Planted-pattern fixture parameters.

    ``n_single`` officially single-family addresses, of which ``n_hidden`` are
    really multi-family (the hidden ones); ``n_multi`` addresses are
    officially multi-family.  ``strength`` in [0, 1] blends the multi-family
    signature (annex block + dividing fence) into the image; 0 disables it.
    """

    n_single: int = 400
    n_hidden: int = 40
    n_multi: int = 40
    gsd: float = 0.5
    strength: float = 1.0
    side_m: float = 50.0
    spacing_m: float = 60.0
    grid_cols: int = 12
    pattern_m: float = 48.0
    zipcode: str = "77004"
    per_tract: int = 40
    crs: str = FIXTURE_CRS

    def validate(self):
        errs = []
        if self.n_single < 0 or self.n_multi < 0 or self.n_hidden < 0:
            errs.append("address counts must be non-negative")
        if self.n_hidden > self.n_single:
            errs.append("n_hidden cannot exceed n_single")
        if not 0.0 <= self.strength <= 1.0:
            errs.append("strength must lie in [0, 1]")
        if self.pattern_m > self.side_m:
            errs.append(f"pattern extent {self.pattern_m} m exceeds tile side {self.side_m} m")
        if self.pattern_m < 30.0:
            errs.append("pattern_m must be at least 30 m to hold the house signature")
        if self.spacing_m < self.side_m:
            errs.append("spacing_m must be at least side_m")
        if self.gsd <= 0 or self.grid_cols < 1 or self.per_tract < 1:
            errs.append("gsd, grid_cols and per_tract must be positive")
        if errs:
            raise ConfigError("; ".join(errs))


@dataclass
class Fixture:
    spec: FixtureSpec
    scenes: list
    records: list
    truth: dict  # address_id -> true label (0/1)
    tract_stats: list = field(default_factory=list)

    @property
    def hidden_ids(self):
        return sorted(
            r.address_id for r in self.records
            if self.truth[r.address_id] == 1 and r.official_label == Label.SINGLE_FAMILY
        )


def _blend(img, r0, r1, c0, c1, color, alpha):
    h, w = img.shape[:2]
    r0, r1 = max(r0, 0), min(r1, h)
    c0, c1 = max(c0, 0), min(c1, w)
    if r0 >= r1 or c0 >= c1 or alpha <= 0:
        return
    region = img[r0:r1, c0:c1]
    region *= 1.0 - alpha
    region += alpha * np.asarray(color)


def _draw_house(img, cy, cx, gsd, rng, multi, strength, pattern_m):
    def px(v):
        return max(1, int(round(v / gsd)))

    half_w_m, half_h_m = rng.uniform(5.0, 8.0), rng.uniform(4.5, 7.0)
    hw, hh = px(half_w_m), px(half_h_m)
    oy, ox = rng.integers(-2, 3, size=2)
    roof = np.clip(rng.uniform(110, 190) + rng.normal(0, 12, 3), 0, 255)
    side = rng.integers(4)
    reach = pattern_m / 2 - 1.0  # signature stays inside this radius
    house_half = half_w_m if side < 2 else half_h_m
    annex_len = px(min(rng.uniform(6.0, 9.0), reach - house_half))
    annex_color = np.clip(roof - 45 + rng.normal(0, 8, 3), 0, 255)
    fence_len = px(rng.uniform(0.75, 1.0) * (reach - house_half))
    fence_half = px(1.0) // 2 + 1
    fence_color = np.clip(np.array([232.0, 228.0, 215.0]) + rng.normal(0, 6, 3), 0, 255)
    trees = [
        (rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(2.0, 4.0))
        for _ in range(rng.integers(0, 3))
    ]

    y, x = cy + int(oy), cx + int(ox)
    for ty, tx, rad in trees:
        r, ty, tx = px(rad), y + int(round(ty / gsd)), x + int(round(tx / gsd))
        _blend(img, ty - r, ty + r, tx - r, tx + r, (40, 75, 35), 0.8)
    _blend(img, y - hh, y + hh, x - hw, x + hw, roof, 1.0)
    if not multi:
        return
    a, q, f, fh = strength, annex_len, fence_len, fence_half
    if side == 0:  # annex east, fence west
        _blend(img, y - hh + 2, y + hh - 2, x + hw, x + hw + q, annex_color, a)
        _blend(img, y - fh, y + fh, x - hw - f, x - hw, fence_color, a)
    elif side == 1:  # annex west, fence east
        _blend(img, y - hh + 2, y + hh - 2, x - hw - q, x - hw, annex_color, a)
        _blend(img, y - fh, y + fh, x + hw, x + hw + f, fence_color, a)
    elif side == 2:  # annex south, fence north
        _blend(img, y + hh, y + hh + q, x - hw + 2, x + hw - 2, annex_color, a)
        _blend(img, y - hh - f, y - hh, x - fh, x + fh, fence_color, a)
    else:  # annex north, fence south
        _blend(img, y - hh - q, y - hh, x - hw + 2, x + hw - 2, annex_color, a)
        _blend(img, y + hh, y + hh + f, x - fh, x + fh, fence_color, a)


def _background(shape, gsd, rng):
    h, w = shape
    coarse_px = max(1, int(round(8.0 / gsd)))
    ch, cw = -(-h // coarse_px), -(-w // coarse_px)
    coarse = rng.normal(0.0, 10.0, size=(ch, cw, 1))
    low = np.repeat(np.repeat(coarse, coarse_px, axis=0), coarse_px, axis=1)[:h, :w]
    base = np.array([88.0, 118.0, 68.0])
    return base + low * np.array([1.0, 1.2, 0.8])


def synthesize_fixture(spec=FixtureSpec(), seed=0):
    spec.validate()
    ss = np.random.SeedSequence(seed)
    role_ss, scene_ss, house_ss, tract_ss = ss.spawn(4)
    total = spec.n_single + spec.n_multi
    roles = np.empty(total, dtype=np.int64)  # 0 single, 1 hidden, 2 official multi
    perm = np.random.default_rng(role_ss).permutation(total)
    roles[perm[: spec.n_multi]] = 2
    roles[perm[spec.n_multi : spec.n_multi + spec.n_hidden]] = 1
    roles[perm[spec.n_multi + spec.n_hidden :]] = 0

    per_scene = spec.grid_cols * spec.grid_cols
    n_scenes = max(1, -(-total // per_scene))
    cell_px = geodata.round_half_up(spec.spacing_m / spec.gsd)
    side_px = cell_px * spec.grid_cols
    scene_m = side_px * spec.gsd
    scene_rngs = [np.random.default_rng(s) for s in scene_ss.spawn(n_scenes)]
    house_rngs = [np.random.default_rng(s) for s in house_ss.spawn(total)]
    canvases = [_background((side_px, side_px), spec.gsd, r) for r in scene_rngs]
    transforms = [
        geodata.GeoTransform(
            a=spec.gsd, b=0.0, c=300000.0 - 4 * scene_m + i * (scene_m + 200.0) + spec.gsd / 2,
            d=0.0, e=-spec.gsd, f=3300000.0 + scene_m / 2 - spec.gsd / 2,
        )
        for i in range(n_scenes)
    ]

    records, truth = [], {}
    for k in range(total):
        s, cell = divmod(k, per_scene)
        gy, gx = divmod(cell, spec.grid_cols)
        hrng = house_rngs[k]
        jy, jx = hrng.integers(-4, 5, size=2)
        cy = gy * cell_px + cell_px // 2 + int(jy)
        cx = gx * cell_px + cell_px // 2 + int(jx)
        multi = roles[k] > 0
        _draw_house(canvases[s], cy, cx, spec.gsd, hrng, multi, spec.strength, spec.pattern_m)
        x, y = geodata.pixel_to_projected(transforms[s], cx, cy)
        lat, lon = unproject_wgs84(x, y, spec.crs)
        aid = f"A{k + 1:05d}"
        code = "B1" if roles[k] == 2 else "A1"
        records.append(
            AddressRecord(
                address_id=aid,
                street_text=f"{k + 100} Fixture St",
                category_code=code,
                official_label=label_from_category(code),
                lat=lat,
                lon=lon,
                tract_id=f"{spec.zipcode}{k // spec.per_tract + 1:02d}",
                zipcode=spec.zipcode,
            )
        )
        truth[aid] = int(multi)

    scenes = []
    for i, (canvas, rng) in enumerate(zip(canvases, scene_rngs)):
        canvas += rng.normal(0.0, 9.0, size=canvas.shape)
        px = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
        scenes.append(geodata.RasterScene(f"scene{i:02d}", px, transforms[i], spec.crs))

    tract_ids = sorted({r.tract_id for r in records})
    stats = synthesize_tract_stats(tract_ids, spec.zipcode, np.random.default_rng(tract_ss))
    return Fixture(spec, scenes, records, truth, stats)


def synthesize_tract_stats(planted_tracts, planted_zip, rng, other_zips=("77002", "77003", "77005", "77006"), per_zip=4):
    """Tracts for the allocation stage: the planted zipcode is all (High, Low);
    every other zipcode draws from the remaining level combinations."""
    from .allocation import BadMaf, LowResponse, TractStat

    stats = [TractStat(t, planted_zip, BadMaf.HIGH, LowResponse.LOW) for t in planted_tracts]
    combos = [
        (b, lr) for b in BadMaf for lr in LowResponse if (b, lr) != (BadMaf.HIGH, LowResponse.LOW)
    ]
    for z in other_zips:
        for j in range(per_zip):
            b, lr = combos[rng.integers(len(combos))]
            stats.append(TractStat(f"{z}{j + 1:02d}", z, b, lr))
    return stats


def write_fixture(fixture, directory):
    from .allocation import format_tract_csv

    directory = Path(directory)
    (directory / "scenes").mkdir(parents=True, exist_ok=True)
    for scene in fixture.scenes:
        geodata.save_scene(scene, directory / "scenes")
    (directory / "records.csv").write_text(format_address_csv(fixture.records), encoding="utf-8")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ORACLE_FIELDS)
    by_id = {r.address_id: r for r in fixture.records}
    for aid in fixture.hidden_ids:
        w.writerow([aid, fixture.truth[aid], int(by_id[aid].official_label)])
    (directory / "oracle.csv").write_text(buf.getvalue(), encoding="utf-8")
    (directory / "tract_stats.csv").write_text(format_tract_csv(fixture.tract_stats), encoding="utf-8")
