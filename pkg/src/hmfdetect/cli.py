"""Command-line pipeline: ``hmfdetect <fixture|ingest|train|eval|discover|allocate>``.

Artifacts for a config land in ``<out>/<config-hash>/<stage>/`` next to a
``run_manifest.json`` recording the hash, seed, library versions and the
digests of every input and output.  Exit codes: 0 ok, 1 validation, 2 runtime.
"""

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from collections import Counter
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import __version__, allocation, dataset, discovery, evaluation, geodata, kernels, model, records
from .config import load_config
from .errors import ConfigError, HMFError

log = logging.getLogger("hmfdetect")

STAGES = ("fixture", "ingest", "train", "eval", "discover", "allocate")


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require(*paths):
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise ConfigError("missing input path(s): " + ", ".join(missing))


class Run:
    def __init__(self, cfg, out):
        self.cfg = cfg
        self.root = Path(out) / cfg.config_hash

    def stage_dir(self, stage):
        d = self.root / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def path(self, key, fallback):
        return Path(self.cfg.paths.get(key) or fallback)

    @property
    def scenes_dir(self):
        return self.path("scenes_dir", self.root / "fixture" / "scenes")

    @property
    def records_csv(self):
        return self.path("records_csv", self.root / "fixture" / "records.csv")

    def write_manifest(self, stage, inputs, outputs, extra=None):
        doc = {
            "stage": stage,
            "config_hash": self.cfg.config_hash,
            "config": self.cfg.values,
            "seed": self.cfg.seed,
            "versions": {
                "hmfdetect": __version__,
                "numpy": np.__version__,
                "python": platform.python_version(),
                "kernels": kernels.implementation(),
            },
            "inputs": {name: _digest(p) for name, p in sorted(inputs.items())},
            "outputs": {Path(p).name: _digest(p) for p in sorted(outputs)},
        }
        if extra:
            doc["details"] = extra
        path = self.stage_dir(stage) / "run_manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _scene_inputs(scenes_dir):
    return {f"scene:{p.name}": p for p in sorted(Path(scenes_dir).glob("*.ppm"))}


# ---------------------------------------------------------------------------
# stages


def cmd_fixture(run, args):
    cfg = run.cfg
    out = run.stage_dir("fixture")
    fx = dataset.synthesize_fixture(cfg.fixture, seed=cfg.seed)
    dataset.write_fixture(fx, out)
    outputs = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "run_manifest.json")
    run.write_manifest("fixture", {}, outputs, {"hidden": len(fx.hidden_ids), "scenes": len(fx.scenes)})
    print(f"fixture: {len(fx.records)} records, {len(fx.hidden_ids)} hidden, {len(fx.scenes)} scenes -> {out}")


def _load_stub(path):
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            table[row["street_text"]] = (float(row["lat"]), float(row["lon"]), float(row.get("confidence") or 1.0))
    return records.StubGeocoder(table)


def cmd_ingest(run, args):
    cfg = run.cfg
    stub = cfg.paths.get("geocode_stub")
    _require(run.records_csv, run.scenes_dir, *([stub] if stub else []))
    out = run.stage_dir("ingest")
    recs = records.read_address_csv(run.records_csv)
    cache = records.GeocodeCache(run.path("geocode_cache", out / "geocode_cache.tsv"))
    client = _load_stub(stub) if stub else None
    recs = records.geocode_all(recs, client, cache)
    scenes = geodata.load_scenes(run.scenes_dir)
    tally = Counter()
    tiles = dataset.assemble(recs, scenes, cfg.assembly, tally)
    labels = [t.label for t in tiles]
    ds = dataset.split(len(tiles), cfg.ratios, cfg.seed, labels if cfg.stratify else None)
    dataset.write_manifest(out / "manifest.csv", dataset.manifest_rows(tiles, ds))
    (out / "records_resolved.csv").write_text(records.format_address_csv(recs), encoding="utf-8")
    inputs = {"records_csv": run.records_csv, **_scene_inputs(run.scenes_dir)}
    run.write_manifest(
        "ingest", inputs, [out / "manifest.csv", out / "records_resolved.csv"],
        {"tiles": len(tiles), "positives": int(sum(labels)), "split_sizes": list(ds.sizes()), "skipped": dict(tally)},
    )
    print(f"ingest: {len(tiles)} tiles ({sum(labels)} positive), split {ds.sizes()} -> {out}")


def _load_split_arrays(run, side):
    manifest = run.root / "ingest" / "manifest.csv"
    _require(manifest, run.scenes_dir)
    rows = dataset.read_manifest(manifest)
    scenes = {s.scene_id: s for s in geodata.load_scenes(run.scenes_dir)}
    tiles = [
        geodata.crop_tile(scenes[r.scene_id], (r.center_x, r.center_y), run.cfg.assembly.side_m, r.address_id)
        for r in rows
    ]
    x = model.prepare_inputs(tiles, side)
    y = np.array([r.label for r in rows], dtype=np.float64)
    idx = {name: tuple(i for i, r in enumerate(rows) if r.split == name) for name in dataset.SPLIT_NAMES}
    ds = dataset.DatasetSplit(idx["train"], idx["val"], idx["test"], run.cfg.ratios, run.cfg.seed, run.cfg.stratify)
    return x, y, ds, manifest


def cmd_train(run, args):
    cfg = run.cfg
    families = tuple(args.family) if args.family else cfg.families
    side = cfg.model_specs[families[0]].input_side
    x, y, ds, manifest = _load_split_arrays(run, side)
    out = run.stage_dir("train")
    outputs = []
    for fam in families:
        spec = cfg.model_specs.get(fam) or model.ModelSpec(fam, *_shape_of(cfg))
        trained = model.train(x, y, ds, spec, cfg.train)
        ck = out / f"model-{fam}.ckpt"
        model.save_checkpoint(trained, ck)
        hist = out / f"history-{fam}.csv"
        with open(hist, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "val_auc"])
            for h in trained.history:
                w.writerow([h.epoch, repr(h.loss), repr(h.val_auc)])
        outputs += [ck, hist]
        print(f"train: {fam} best epoch {trained.best_epoch} -> {ck}")
    run.write_manifest("train", {"manifest": manifest, **_scene_inputs(run.scenes_dir)}, outputs)


def _shape_of(cfg):
    spec = next(iter(cfg.model_specs.values()))
    return spec.stages, spec.input_side, spec.growth_rate


def _checkpoint_args(run, items, default_families):
    pairs = {}
    for item in items or []:
        fam, sep, path = item.partition("=")
        if not sep:
            fam, path = Path(item).stem.removeprefix("model-"), item
        pairs[fam] = Path(path)
    if not pairs:
        pairs = {f: run.root / "train" / f"model-{f}.ckpt" for f in default_families}
    _require(*pairs.values())
    return pairs


def cmd_eval(run, args):
    cfg = run.cfg
    ckpts = _checkpoint_args(run, args.checkpoint, cfg.families)
    models = {fam: model.load_checkpoint(p) for fam, p in ckpts.items()}
    side = next(iter(models.values())).spec.input_side
    x, y, ds, manifest = _load_split_arrays(run, side)
    te = np.asarray(ds.test, dtype=np.int64)
    out = run.stage_dir("eval")
    report = evaluation.compare_models(x[te], y[te], models, cfg.eval_threshold, out_dir=out)
    outputs = [out / r.curve_path for r in report.rows] + [out / "comparison.csv"]
    inputs = {"manifest": manifest, **{f"checkpoint:{f}": p for f, p in ckpts.items()}}
    run.write_manifest("eval", inputs, outputs)
    for r in report.rows:
        c = r.confusion
        print(f"eval: {r.family} auc={r.auc:.4f} tp={c.tp} fp={c.fp} fn={c.fn} tn={c.tn}")


def cmd_discover(run, args):
    cfg = run.cfg
    resolved = run.root / "ingest" / "records_resolved.csv"
    rec_path = resolved if resolved.exists() else run.records_csv
    ckpt = Path(args.checkpoint) if args.checkpoint else run.root / "train" / f"model-{cfg.discover_family}.ckpt"
    _require(rec_path, ckpt, run.scenes_dir)
    region = args.region if args.region is not None else cfg.region
    recs = records.read_address_csv(rec_path)
    if region:
        recs = [r for r in recs if r.zipcode == region]
    trained = model.load_checkpoint(ckpt)
    scenes = geodata.load_scenes(run.scenes_dir)
    tally = Counter()
    scores = discovery.sweep_region(recs, scenes, trained, cfg.assembly.side_m, tally)
    report = discovery.rank_suspects(scores, recs, cfg.discover_threshold, region, trained.model_id)
    out = run.stage_dir("discover")
    (out / "suspects.csv").write_text(discovery.format_suspect_csv(report.entries), encoding="utf-8")
    (out / "confirmations.csv").write_text(discovery.format_suspect_csv(report.confirmations), encoding="utf-8")
    (out / "suspects.geojson").write_text(discovery.export_geojson(report), encoding="utf-8")
    run.write_manifest(
        "discover",
        {"records": rec_path, "checkpoint": ckpt, **_scene_inputs(run.scenes_dir)},
        [out / "suspects.csv", out / "confirmations.csv", out / "suspects.geojson"],
        {"region": region, "threshold": cfg.discover_threshold, "model_id": trained.model_id,
         "scored": len(scores), "suspects": len(report.entries), "skipped": dict(tally)},
    )
    print(f"discover: {len(report.entries)} suspects of {len(scores)} scored in {region or 'all'} -> {out}")


def cmd_allocate(run, args):
    cfg = run.cfg
    tract_path = Path(args.tracts) if args.tracts else run.path("tract_stats", run.root / "fixture" / "tract_stats.csv")
    table_ref = cfg.paths.get("effort_table") or "default"
    _require(tract_path, *([] if table_ref in allocation.BUNDLED_TABLES else [table_ref]))
    budget = args.budget if args.budget is not None else cfg.budget
    if budget < 0:
        raise ConfigError("budget must be non-negative")
    table = allocation.load_effort_table(table_ref)
    tracts = allocation.parse_tract_csv(tract_path.read_text(encoding="utf-8"))
    plan = allocation.allocate(tracts, table, budget, cfg.weight_by_population)
    ranking = allocation.rank_zipcodes(tracts, table)
    out = run.stage_dir("allocate")
    (out / "plan.csv").write_text(allocation.format_plan_csv(plan), encoding="utf-8")
    (out / "zipcode_ranking.csv").write_text(
        "rank,zipcode\n" + "".join(f"{i},{z}\n" for i, z in enumerate(ranking, 1)), encoding="utf-8"
    )
    run.write_manifest(
        "allocate", {"tract_stats": tract_path}, [out / "plan.csv", out / "zipcode_ranking.csv"],
        {"budget": budget, "allocated": plan.total, "effort_table": table_ref if table_ref in allocation.BUNDLED_TABLES else "file"},
    )
    print(f"allocate: {plan.total} of {budget} canvassers over {len(tracts)} tracts; top zipcode {ranking[0] if ranking else '-'}")


COMMANDS = {
    "fixture": cmd_fixture,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval": cmd_eval,
    "discover": cmd_discover,
    "allocate": cmd_allocate,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override [run] seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output root (default: ./runs)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="hmfdetect", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fixture", parents=[common], help="write a synthetic planted-pattern fixture")
    sub.add_parser("ingest", parents=[common], help="geocode records, crop tiles, write the dataset manifest")
    p = sub.add_parser("train", parents=[common], help="train one checkpoint per block family")
    p.add_argument("--family", action="append", choices=model.FAMILIES)
    p = sub.add_parser("eval", parents=[common], help="ROC/AUC and confusion on the test split")
    p.add_argument("--checkpoint", action="append", metavar="[FAMILY=]PATH")
    p = sub.add_parser("discover", parents=[common], help="rank suspect hidden multi-family addresses")
    p.add_argument("--checkpoint")
    p.add_argument("--region", help="zipcode to sweep ('' for all records)")
    p = sub.add_parser("allocate", parents=[common], help="turn tract stats into a canvasser plan")
    p.add_argument("--tracts", help="tract stats CSV")
    p.add_argument("--budget", type=int)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors are validation errors (1), not runtime (2)
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(getattr(args, "config", None), seed=getattr(args, "seed", None))
        run = Run(cfg, getattr(args, "out", "runs"))
        run.root.mkdir(parents=True, exist_ok=True)
        with FileLock(str(run.root / ".lock")):
            COMMANDS[args.command](run, args)
    except ConfigError as exc:
        print(f"hmfdetect: error: {exc}", file=sys.stderr)
        return 1
    except HMFError as exc:
        print(f"hmfdetect: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
