"""Run configuration: an INI file (``key = value`` under ``[sections]``).

Every key is optional; see ``DEFAULTS`` for the full set.  Relative paths are
resolved against the directory holding the config file.  The config hash
covers every value except ``[paths]`` so that a run can be relocated without
changing its identity; stage manifests record input digests instead.
"""

import configparser
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .dataset import AssemblyConfig, FixtureSpec
from .errors import ConfigError
from .model import FAMILIES, ModelSpec, TrainConfig

DEFAULTS = {
    "run": {"seed": "0"},
    "paths": {
        "scenes_dir": "",
        "records_csv": "",
        "geocode_cache": "",
        "geocode_stub": "",
        "tract_stats": "",
        "effort_table": "default",
    },
    "assembly": {"negative_ratio": "9", "side_m": "50"},
    "split": {"ratios": "0.64, 0.16, 0.2", "stratify": "true"},
    "model": {
        "families": "plain",
        "stages": "8x1, 16x1, 16x1",
        "input_side": "64",
        "growth_rate": "8",
    },
    "train": {
        "learning_rate": "0.05",
        "epochs": "20",
        "batch_size": "32",
        "pos_weight": "auto",
        "optimizer": "momentum",
        "momentum": "0.9",
    },
    "eval": {"threshold": "0.5"},
    "discover": {"region": "77004", "threshold": "0.5", "family": "plain"},
    "allocate": {"budget": "100", "weight_by_population": "false"},
    "fixture": {
        "n_single": "400",
        "n_hidden": "40",
        "n_multi": "40",
        "gsd": "0.5",
        "strength": "1.0",
        "zipcode": "77004",
    },
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    paths: dict
    assembly: AssemblyConfig
    ratios: tuple
    stratify: bool
    families: tuple
    model_specs: dict  # family -> ModelSpec
    train: TrainConfig
    eval_threshold: float
    region: str
    discover_threshold: float
    discover_family: str
    budget: int
    weight_by_population: bool
    fixture: FixtureSpec
    values: dict  # normalised non-path values, hashed

    @property
    def config_hash(self):
        blob = json.dumps(self.values, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


class _Collector:
    def __init__(self, cp):
        self.cp = cp
        self.errors = []

    def get(self, section, key, conv, check=None, msg=""):
        raw = self.cp.get(section, key)
        try:
            v = conv(raw)
        except (ValueError, TypeError, ConfigError) as exc:
            self.errors.append(f"[{section}] {key} = {raw!r}: {exc}")
            return None
        if check is not None and not check(v):
            self.errors.append(f"[{section}] {key} = {raw!r}: {msg}")
            return None
        return v


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true/false")


def _floats(s):
    return tuple(float(p) for p in s.split(",") if p.strip())


def _stages(s):
    out = []
    for part in s.split(","):
        f, _, b = part.strip().lower().partition("x")
        out.append((int(f), int(b or 1)))
    if not out:
        raise ValueError("no stages")
    return tuple(out)


def _families(s):
    fams = tuple(p.strip().lower() for p in s.split(",") if p.strip())
    bad = [f for f in fams if f not in FAMILIES]
    if bad or not fams:
        raise ValueError(f"families must be drawn from {FAMILIES}")
    return fams


def _pos_weight(s):
    return None if s.strip().lower() == "auto" else float(s)


def load_config(path=None, seed=None, overrides=None):
    """Build a validated :class:`RunConfig`; all field errors are reported together."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.resolve().parent
        unknown = [
            f"[{s}] {k}" for s in cp.sections() for k in cp[s]
            if s not in DEFAULTS or k not in DEFAULTS[s]
        ]
        if unknown:
            raise ConfigError("unknown config keys: " + ", ".join(unknown))
    for (section, key), value in (overrides or {}).items():
        cp.set(section, key, str(value))
    if seed is not None:
        cp.set("run", "seed", str(seed))

    c = _Collector(cp)
    seed_v = c.get("run", "seed", int, lambda v: v >= 0, "must be a non-negative integer")
    neg = c.get("assembly", "negative_ratio", float, lambda v: v > 0, "must be > 0")
    side = c.get("assembly", "side_m", float, lambda v: v > 0, "must be > 0")
    ratios = c.get(
        "split", "ratios", _floats,
        lambda v: len(v) == 3 and min(v) >= 0 and abs(sum(v) - 1) <= 1e-9,
        "need three non-negative ratios summing to 1",
    )
    stratify = c.get("split", "stratify", _bool)
    families = c.get("model", "families", _families)
    stages = c.get("model", "stages", _stages, lambda v: all(f >= 1 and b >= 0 for f, b in v), "bad stage")
    input_side = c.get("model", "input_side", int, lambda v: v >= 4, "must be >= 4")
    growth = c.get("model", "growth_rate", int, lambda v: v >= 1, "must be >= 1")
    lr = c.get("train", "learning_rate", float, lambda v: v >= 0, "must be >= 0")
    epochs = c.get("train", "epochs", int, lambda v: v >= 1, "must be >= 1")
    batch = c.get("train", "batch_size", int, lambda v: v >= 1, "must be >= 1")
    posw = c.get("train", "pos_weight", _pos_weight, lambda v: v is None or v > 0, "must be > 0 or auto")
    opt = c.get("train", "optimizer", str.strip, lambda v: v in ("sgd", "momentum"), "sgd or momentum")
    mom = c.get("train", "momentum", float, lambda v: 0 <= v < 1, "must be in [0, 1)")
    ev_thr = c.get("eval", "threshold", float)
    region = cp.get("discover", "region").strip()
    d_thr = c.get("discover", "threshold", float)
    d_fam = c.get("discover", "family", str.strip, lambda v: v in FAMILIES, f"one of {FAMILIES}")
    budget = c.get("allocate", "budget", int, lambda v: v >= 0, "must be >= 0")
    wpop = c.get("allocate", "weight_by_population", _bool)
    fx = {
        "n_single": c.get("fixture", "n_single", int),
        "n_hidden": c.get("fixture", "n_hidden", int),
        "n_multi": c.get("fixture", "n_multi", int),
        "gsd": c.get("fixture", "gsd", float),
        "strength": c.get("fixture", "strength", float),
        "zipcode": cp.get("fixture", "zipcode").strip(),
    }
    fixture = None
    if None not in fx.values():
        try:
            fixture = FixtureSpec(**fx)
            fixture.validate()
        except ConfigError as exc:
            c.errors.append(f"[fixture] {exc}")

    paths = {}
    for key, raw in cp["paths"].items():
        raw = raw.strip()
        if key == "effort_table" and raw in ("default", "text-reading"):
            paths[key] = raw
        else:
            paths[key] = str((base / raw).resolve()) if raw else ""

    if c.errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(c.errors))

    specs = {f: ModelSpec(f, stages, input_side, growth) for f in families + (d_fam,)}
    values = {s: dict(cp[s]) for s in cp.sections() if s != "paths"}
    values["paths"] = {"effort_table": paths["effort_table"] if paths["effort_table"] in ("default", "text-reading") else "file"}
    return RunConfig(
        seed=seed_v,
        paths=paths,
        assembly=AssemblyConfig(neg, side, seed_v),
        ratios=ratios,
        stratify=stratify,
        families=families,
        model_specs=specs,
        train=TrainConfig(lr, epochs, batch, seed_v, posw, opt, mom),
        eval_threshold=ev_thr,
        region=region,
        discover_threshold=d_thr,
        discover_family=d_fam,
        budget=budget,
        weight_by_population=wpop,
        fixture=fixture,
        values=values,
    )
