"""Tract scoring and canvasser allocation from the suggested-effort table."""

import csv
import enum
import io
import math
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path

from .errors import ConfigError, EmptyInputError, ParseError


class BadMaf(str, enum.Enum):
    HIGH = "High"
    MEDIUM = "Medium"
    LOW = "Low"


class LowResponse(str, enum.Enum):
    HIGH = "High"
    LOW = "Low"


@dataclass(frozen=True)
class TractStat:
    tract_id: str
    zipcode: str
    bad_maf: BadMaf
    low_response: LowResponse
    population: int | None = None


@dataclass(frozen=True)
class EffortRow:
    bad_maf: BadMaf
    low_response: LowResponse
    effort: float


@dataclass(frozen=True)
class EffortTable:
    rows: tuple

    def __post_init__(self):
        for r in self.rows:
            if not 0.0 <= r.effort <= 1.0:
                raise ConfigError(f"effort fraction {r.effort} outside [0, 1]")
        if sum(r.effort for r in self.rows) > 1.0 + 1e-9:
            raise ConfigError("effort fractions sum to more than 1")

    def match(self, bad_maf, low_response):
        """Index of the first row matching the levels, or None."""
        for i, r in enumerate(self.rows):
            if r.bad_maf == bad_maf and r.low_response == low_response:
                return i
        return None


@dataclass(frozen=True)
class TractAllocation:
    tract_id: str
    effort_fraction: float
    canvassers: int


@dataclass(frozen=True)
class AllocationPlan:
    tracts: tuple
    budget: int

    @property
    def total(self):
        return sum(t.canvassers for t in self.tracts)


def _rows(*spec):
    return EffortTable(tuple(EffortRow(BadMaf(b), LowResponse(lr), e) for b, lr, e in spec))


def default_effort_table():
    """The four suggested-effort rows, verbatim and in published order.

    The (High, High) row appears twice (0.20 and 0.15); lookups take the
    first match, so the second is only reachable by row index.
    """
    return _rows(
        ("High", "Low", 0.50),
        ("High", "High", 0.20),
        ("Medium", "Low", 0.15),
        ("High", "High", 0.15),
    )


def text_reading_effort_table():
    """Alternative table where the 50% row targets (High, High), as the
    accompanying prose describes; the other rows are kept verbatim."""
    return _rows(
        ("High", "High", 0.50),
        ("High", "High", 0.20),
        ("Medium", "Low", 0.15),
        ("High", "High", 0.15),
    )


BUNDLED_TABLES = {
    "default": "effort_table.csv",
    "text-reading": "effort_table_text_reading.csv",
}


def effort_for(table, bad_maf, low_response):
    i = table.match(BadMaf(bad_maf), LowResponse(low_response))
    return 0.0 if i is None else table.rows[i].effort


def _largest_remainder(quotas, total):
    floors = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - floors[i]), i))
    for k in range(total - sum(floors)):
        floors[order[k]] += 1
    return floors


def allocate(tracts, table, budget, weight_by_population=False):
    """Split ``budget`` canvassers across tracts.

    A tract's share is its first-matching row's effort, divided equally (or by
    population with ``weight_by_population``) among tracts in that row
    bucket.  Integer counts come from largest-remainder rounding of
    ``budget * share``; unmatched tracts get nothing.
    """
    if budget < 0:
        raise ConfigError(f"budget must be non-negative, got {budget}")
    if not tracts:
        if budget > 0:
            raise EmptyInputError("no tracts to allocate a positive budget over")
        return AllocationPlan((), budget)
    buckets = defaultdict(list)
    for i, t in enumerate(tracts):
        row = table.match(t.bad_maf, t.low_response)
        if row is not None:
            buckets[row].append(i)
    shares = [Fraction(0)] * len(tracts)
    for row, members in buckets.items():
        effort = Fraction(repr(table.rows[row].effort))
        if weight_by_population:
            pops = [tracts[i].population or 0 for i in members]
            if sum(pops) <= 0:
                raise ConfigError(f"row {row}: population weighting needs positive populations")
            for i, p in zip(members, pops):
                shares[i] = effort * Fraction(p, sum(pops))
        else:
            for i in members:
                shares[i] = effort / len(members)
    quotas = [budget * s for s in shares]
    total = math.floor(sum(quotas))
    counts = _largest_remainder(quotas, total)
    return AllocationPlan(
        tuple(TractAllocation(t.tract_id, float(s), c) for t, s, c in zip(tracts, shares, counts)),
        budget,
    )


def rank_zipcodes(tracts, table):
    """Zipcodes by descending summed effort of member tracts, ties by name."""
    score = defaultdict(float)
    for t in tracts:
        score[t.zipcode] += effort_for(table, t.bad_maf, t.low_response)
    return sorted(score, key=lambda z: (-score[z], z))


# ---------------------------------------------------------------------------
# files

TRACT_FIELDS = ("tract_id", "zipcode", "bad_maf_score", "low_response_score")
PLAN_FIELDS = ("tract_id", "effort_fraction", "canvassers")


def format_fraction(x):
    s = f"{x:.6f}".rstrip("0")
    head, _, tail = s.partition(".")
    return f"{head}.{tail.ljust(2, '0')}"


def _level(enum_cls, text, lineno):
    for member in enum_cls:
        if member.value.lower() == text.strip().lower():
            return member
    raise ParseError(f"unknown {enum_cls.__name__} level {text!r}", line=lineno)


def _tertile_cuts(values):
    s = sorted(values)
    n = len(s)
    return s[(n - 1) // 3], s[(2 * (n - 1)) // 3]


def parse_tract_csv(text, bad_maf_cuts=None, low_response_cut=None):
    """Parse tract stats with level-valued or numeric score columns.

    Numeric Bad MAF scores map to Low/Medium/High by ``bad_maf_cuts``
    (``(low_max, medium_max)``, default: empirical tertiles).  Numeric Low
    Response scores map to High above ``low_response_cut`` (default: median).
    """
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != TRACT_FIELDS:
        raise ParseError(f"expected header {','.join(TRACT_FIELDS)}", line=1)
    raw = [(reader.line_num, row) for row in reader if row]
    for lineno, row in raw:
        if len(row) != len(TRACT_FIELDS):
            raise ParseError(f"expected {len(TRACT_FIELDS)} fields", line=lineno)

    def numeric(col):
        try:
            return [float(row[col]) for _, row in raw]
        except ValueError:
            return None

    bm_num = numeric(2) if raw else None
    lr_num = numeric(3) if raw else None
    if bm_num is not None:
        lo, mid = bad_maf_cuts or _tertile_cuts(bm_num)
    if lr_num is not None:
        cut = low_response_cut
        if cut is None:
            s = sorted(lr_num)
            cut = s[(len(s) - 1) // 2]
    out = []
    for k, (lineno, row) in enumerate(raw):
        tract_id, zipcode = row[0], row[1]
        if bm_num is not None:
            v = bm_num[k]
            bm = BadMaf.LOW if v <= lo else BadMaf.MEDIUM if v <= mid else BadMaf.HIGH
        else:
            bm = _level(BadMaf, row[2], lineno)
        if lr_num is not None:
            lr = LowResponse.HIGH if lr_num[k] > cut else LowResponse.LOW
        else:
            lr = _level(LowResponse, row[3], lineno)
        out.append(TractStat(tract_id, zipcode, bm, lr))
    return out


def format_tract_csv(tracts):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACT_FIELDS)
    for t in tracts:
        w.writerow([t.tract_id, t.zipcode, t.bad_maf.value, t.low_response.value])
    return buf.getvalue()


def parse_effort_table(text):
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["bad_maf", "low_response", "effort"]:
        raise ParseError("expected header bad_maf,low_response,effort", line=1)
    rows = []
    for row in reader:
        if not row:
            continue
        lineno = reader.line_num
        try:
            effort = float(row[2])
        except (ValueError, IndexError):
            raise ParseError("bad effort value", line=lineno) from None
        rows.append(EffortRow(_level(BadMaf, row[0], lineno), _level(LowResponse, row[1], lineno), effort))
    return EffortTable(tuple(rows))


def load_effort_table(name_or_path="default"):
    if name_or_path in BUNDLED_TABLES:
        text = resources.files("hmfdetect").joinpath("data", BUNDLED_TABLES[name_or_path]).read_text()
    else:
        text = Path(name_or_path).read_text(encoding="utf-8")
    return parse_effort_table(text)


def format_plan_csv(plan):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLAN_FIELDS)
    for t in plan.tracts:
        w.writerow([t.tract_id, format_fraction(t.effort_fraction), t.canvassers])
    return buf.getvalue()
