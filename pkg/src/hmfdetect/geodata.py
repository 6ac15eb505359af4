"""Geo-referenced rasters: world files, pixel/ground transforms, tile cropping.

Pixel ``(col, row)`` addresses the centre of a pixel, following the
world-file convention where ``(c, f)`` is the centre of the upper-left pixel.
Scenes are stored on disk as a ``<name>.ppm`` (binary P6, maxval 255),
``<name>.wld`` and a one-line ``<name>.crs``.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateTransformError,
    OutOfSceneError,
    ParseError,
    PartialCoverageError,
    UnsupportedRasterError,
)

MAX_OVERHANG = 0.10
INCH = 0.0254
SIX_INCH_GSD = 6 * INCH


def round_half_up(v):
    return int(math.floor(v + 0.5))


@dataclass(frozen=True)
class GeoTransform:
    """Affine map ``x = a*col + b*row + c``, ``y = d*col + e*row + f``."""

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float

    def __post_init__(self):
        if self.determinant == 0.0 or not math.isfinite(self.determinant):
            raise DegenerateTransformError(
                f"affine transform is not invertible (determinant {self.determinant!r})"
            )

    @property
    def determinant(self):
        return self.a * self.e - self.b * self.d

    def to_world_file(self):
        return "".join(f"{v!r}\n" for v in (self.a, self.d, self.b, self.e, self.c, self.f))


def parse_world_file(text):
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if len(lines) != 6:
        raise ParseError(f"world file must have exactly 6 lines, got {len(lines)}")
    values = []
    for i, line in enumerate(lines, start=1):
        try:
            v = float(line.strip())
        except ValueError:
            raise ParseError(f"not a decimal number: {line.strip()!r}", line=i) from None
        if not math.isfinite(v):
            raise ParseError(f"non-finite value: {line.strip()!r}", line=i)
        values.append(v)
    a, d, b, e, c, f = values
    return GeoTransform(a=a, b=b, c=c, d=d, e=e, f=f)


def pixel_to_projected(gt, col, row):
    return gt.a * col + gt.b * row + gt.c, gt.d * col + gt.e * row + gt.f


def projected_to_pixel(gt, x, y):
    dx = x - gt.c
    dy = y - gt.f
    det = gt.determinant
    col = (gt.e * dx - gt.b * dy) / det
    row = (-gt.d * dx + gt.a * dy) / det
    return col, row


def gsd_of(gt):
    if gt.b != 0.0 or gt.d != 0.0:
        raise UnsupportedRasterError("rotated/sheared rasters are not supported")
    if abs(abs(gt.a) - abs(gt.e)) > 1e-9:
        raise UnsupportedRasterError(
            f"anisotropic pixel scale |a|={abs(gt.a)!r} |e|={abs(gt.e)!r}"
        )
    return abs(gt.a)


@dataclass(frozen=True, eq=False)
class RasterScene:
    scene_id: str
    pixels: np.ndarray  # (height, width, 3) uint8
    transform: GeoTransform
    crs: str

    def __post_init__(self):
        px = self.pixels
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] != 3:
            raise UnsupportedRasterError(f"scene {self.scene_id!r}: expected HxWx3 uint8 pixels")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise UnsupportedRasterError(f"scene {self.scene_id!r} is empty")

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    def contains(self, x, y):
        col, row = projected_to_pixel(self.transform, x, y)
        c, r = round_half_up(col), round_half_up(row)
        return 0 <= c < self.width and 0 <= r < self.height


@dataclass(frozen=True, eq=False)
class ImageTile:
    pixels: np.ndarray  # (side, side, 3) float64 in [0, 1]
    side_m: float
    center: tuple
    provenance: tuple  # (scene_id, address_id)
    padded: bool = field(default=False)


def tile_side_px(gsd, side_m):
    return round_half_up(side_m / gsd)


def crop_tile(scene, center, side_m, address_id=""):
    """Cut a square window of ``side_m`` metres centred on ``center``.

    The centre is snapped to the nearest pixel; no resampling happens.  Up to
    10% of the window may hang off the scene (zero-filled, ``padded=True``).
    """
    if not side_m > 0:
        raise ValueError(f"side_m must be positive, got {side_m!r}")
    gsd = gsd_of(scene.transform)
    n = tile_side_px(gsd, side_m)
    if n < 1:
        raise UnsupportedRasterError(f"{side_m} m is smaller than one pixel at GSD {gsd}")
    col, row = projected_to_pixel(scene.transform, center[0], center[1])
    cc, rr = round_half_up(col), round_half_up(row)
    if not (0 <= cc < scene.width and 0 <= rr < scene.height):
        raise OutOfSceneError(
            f"center {center!r} falls outside scene {scene.scene_id!r} (pixel {cc},{rr})"
        )
    c0 = cc - n // 2
    r0 = rr - n // 2
    ci0, ci1 = max(c0, 0), min(c0 + n, scene.width)
    ri0, ri1 = max(r0, 0), min(r0 + n, scene.height)
    inside = (ci1 - ci0) * (ri1 - ri0)
    overhang = 1.0 - inside / (n * n)
    if overhang > MAX_OVERHANG:
        raise PartialCoverageError(
            f"{overhang:.0%} of the tile around {center!r} lies outside scene {scene.scene_id!r}",
            overhang,
        )
    out = np.zeros((n, n, 3))
    out[ri0 - r0 : ri1 - r0, ci0 - c0 : ci1 - c0] = scene.pixels[ri0:ri1, ci0:ci1] / 255.0
    return ImageTile(
        pixels=out,
        side_m=float(side_m),
        center=(float(center[0]), float(center[1])),
        provenance=(scene.scene_id, address_id),
        padded=overhang > 0,
    )


def area_resample(img, side):
    """Area-average resample an (H, W, C) image to (side, side, C).

    Each output pixel is the mean of the input area it covers, with partial
    input pixels weighted by overlap.
    """
    h, w = img.shape[:2]
    if h == side and w == side:
        return np.asarray(img, dtype=np.float64)
    rows = _area_weights(h, side)
    cols = _area_weights(w, side)
    return np.einsum("ih,hwc,jw->ijc", rows, img, cols, optimize=True)


def _area_weights(n_in, n_out):
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo = edges[:-1, None]
    hi = edges[1:, None]
    px = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# disk format


def read_ppm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P6":
        raise ParseError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError(f"{path}: bad PPM header") from None
    if maxval != 255:
        raise UnsupportedRasterError(f"{path}: maxval {maxval} (only 255 supported)")
    body = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=pos)
    return body.reshape(height, width, 3).copy()


def write_ppm(path, pixels):
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def save_scene(scene, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / scene.scene_id
    write_ppm(stem.with_suffix(".ppm"), scene.pixels)
    stem.with_suffix(".wld").write_text(scene.transform.to_world_file())
    stem.with_suffix(".crs").write_text(scene.crs + "\n")


def load_scene(ppm_path):
    ppm_path = Path(ppm_path)
    gt = parse_world_file(ppm_path.with_suffix(".wld").read_text())
    crs = ppm_path.with_suffix(".crs").read_text().strip()
    return RasterScene(ppm_path.stem, read_ppm(ppm_path), gt, crs)


def load_scenes(directory):
    return [load_scene(p) for p in sorted(Path(directory).glob("*.ppm"))]


def find_scene(scenes, x, y):
    for scene in scenes:
        if scene.contains(x, y):
            return scene
    return None
