"""Command-line entry point: ``semlidar <command> --config run.json``.

Every command reads one strictly validated JSON config, writes its
outputs atomically and leaves ``<command>.manifest.json`` beside them.
The manifest echoes the config, hashes every input and output file and
records library versions, so consecutive stages form a hash chain.

Relative paths in a config resolve against ``--root``, else the
``SEMLIDAR_ROOT`` environment variable, else the working directory.

Exit codes: 0 ok, 1 config or schema error, 2 IO or format error,
3 numeric or training failure.  Failures print one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import platform
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import baseline as base_mod
from . import harness, net, photon, presets, scene
from . import skb as skb_mod
from .errors import ConfigError, FormatError, SemlidarError, StateError
from .io_util import atomic_write_text, canonical_json, config_hash, sha256_file

log = logging.getLogger("semlidar")

ROOT_ENV = "SEMLIDAR_ROOT"

# ---------------------------------------------------------------------------
# Schemas
# ---------------------------------------------------------------------------


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_NUM = {"type": "number"}
_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_SEED = {"type": "integer", "minimum": 0}
_PATH = {"type": "string", "minLength": 1}
_RANGE = {"oneOf": [_NUM, {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}]}

CLASS_SCHEMA = _obj({
    "class_id": _INT,
    "family": {"type": "string", "enum": sorted(scene.FAMILIES)},
    "params": {"type": "object", "additionalProperties": _RANGE},
    "extent": _NUM,
    "reflectivity": {"type": "string", "enum": ["binary", "continuous"]},
    "max_range": _NUM,
}, ["class_id", "family", "params"])

DATASET_SCHEMA = _obj({
    "classes": {"type": "array", "items": CLASS_SCHEMA, "minItems": 1},
    "snr_db": {"type": "array", "items": _NUM, "minItems": 1},
    "samples_per_cell": _POS_INT,
    "photon_budget": _NUM,
    "axis": _obj({"bin_width": _NUM, "bin_count": _POS_INT, "rep_period": _NUM}),
    "pulse": _obj({"width_fwhm": _NUM, "jitter_fwhm": _NUM}),
    "scene_width": _POS_INT,
    "scene_height": _POS_INT,
}, ["classes", "snr_db"])

TRAIN_SCHEMA = _obj({
    "latent_dim": _POS_INT,
    "enc_hidden": {"type": "array", "items": _POS_INT, "minItems": 1},
    "dec_hidden": {"type": "array", "items": _POS_INT, "minItems": 1},
    "lr": _NUM,
    "batch_size": _POS_INT,
    "epochs": _POS_INT,
    "beta": _NUM,
    "rec_loss": {"type": "string", "enum": ["mse", "poisson"]},
    "center_scale": _NUM,
    "center_lr_scale": _NUM,
    "adam_b1": _NUM,
    "adam_b2": _NUM,
    "adam_eps": _NUM,
})

SPLIT_SCHEMA = _obj({"train": _NUM, "val": _NUM, "test": _NUM, "min_cell": _POS_INT})

CLASS_LIST = {"type": "array", "items": _INT, "uniqueItems": True}

SCHEMAS = {
    "gen-scenes": _obj({
        "seed": _SEED,
        "classes": {"oneOf": [{"type": "array", "items": CLASS_SCHEMA, "minItems": 1},
                              {"type": "string", "enum": ["catalogue"]}]},
        "variants": _POS_INT,
        "width": {"type": "integer", "minimum": 8},
        "height": {"type": "integer", "minimum": 8},
        "out": _PATH,
    }, ["seed", "classes", "variants", "out"]),
    "gen": _obj({
        "seed": _SEED,
        "preset": {"type": "string", "enum": ["desk-closed", "desk-open"]},
        "dataset": DATASET_SCHEMA,
        "out": _PATH,
    }, ["seed", "out"]),
    "train": _obj({
        "seed": _SEED,
        "dataset": _PATH,
        "classes": CLASS_LIST,
        "split": SPLIT_SCHEMA,
        "train": TRAIN_SCHEMA,
        "baseline": {"type": "boolean"},
        "out": _PATH,
    }, ["seed", "dataset", "out"]),
    "skb-build": _obj({
        "seed": _SEED,
        "dataset": _PATH,
        "model": _PATH,
        "split": _PATH,
        "var_floor": _NUM,
        "out": _PATH,
    }, ["seed", "dataset", "model", "split", "out"]),
    "eval-closed": _obj({
        "seed": _SEED,
        "dataset": _PATH,
        "model": _PATH,
        "skb": _PATH,
        "split": _PATH,
        "baseline": _PATH,
        "out": _PATH,
    }, ["seed", "dataset", "model", "skb", "split", "out"]),
    "eval-open": _obj({
        "seed": _SEED,
        "dataset": _PATH,
        "model": _PATH,
        "skb": _PATH,
        "split": _PATH,
        "unknown_classes": {**CLASS_LIST, "minItems": 1},
        "tau_target": _NUM,
        "maturity": _POS_INT,
        "radius": _NUM,
        "sweeps": {"type": "array", "items": {"enum": ["snr", "unknowns"]}, "minItems": 1,
                   "uniqueItems": True},
        "out": _PATH,
    }, ["seed", "dataset", "model", "skb", "split", "unknown_classes", "out"]),
    "plot": _obj({
        "seed": _SEED,
        "tables": {"type": "array", "items": _PATH, "minItems": 1},
        "out": _PATH,
    }, ["seed", "tables", "out"]),
}


def _key_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        parts.append(err.message.split("'")[1])
    elif err.validator == "additionalProperties":
        extra = [k for k in err.instance if k not in err.schema.get("properties", {})]
        parts.append(extra[0] if extra else "?")
    return ".".join(parts) or "<root>"


def validate_config(command: str, cfg) -> None:
    """Raise ConfigError naming the offending key path."""
    validator = jsonschema.Draft202012Validator(SCHEMAS[command])
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        e = errors[0]
        kind = {"required": "missing key", "additionalProperties": "unknown key"}.get(e.validator, "invalid value")
        raise ConfigError(f"{kind} at {_key_path(e)}: {e.message}")


# ---------------------------------------------------------------------------
# Run context and manifests
# ---------------------------------------------------------------------------


class Run:
    """Path resolution and the input/output ledger for one command."""

    def __init__(self, command: str, cfg: dict, root: Path, workers: int):
        self.command = command
        self.cfg = cfg
        self.root = root
        self.workers = workers
        self.inputs: dict[str, dict] = {}
        self.outputs: dict[str, dict] = {}
        self.extra: dict = {}

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    def out_dir(self) -> Path:
        d = self.path(self.cfg["out"])
        d.mkdir(parents=True, exist_ok=True)
        return d

    def input(self, name: str, rel) -> Path:
        p = self.path(rel)
        if not p.is_file():
            raise FileNotFoundError(f"input {name}: no such file {p}")
        self.inputs[name] = {"path": str(rel), "sha256": sha256_file(p)}
        return p

    def output(self, name: str, p: Path) -> None:
        self.outputs[name] = {"path": p.name, "sha256": sha256_file(p)}

    @property
    def hash(self) -> str:
        return config_hash(self.cfg)

    def manifest(self) -> dict:
        return {
            "command": self.command,
            "config": self.cfg,
            "config_hash": self.hash,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "versions": {
                "semlidar": __version__,
                "numpy": np.__version__,
                "python": platform.python_version(),
            },
            **self.extra,
        }

    def write_manifest(self) -> Path:
        p = self.out_dir() / f"{self.command}.manifest.json"
        atomic_write_text(p, json.dumps(self.manifest(), indent=1, sort_keys=True) + "\n")
        return p


def _derived_seed(seed: int, stage: str) -> int:
    """Independent per-stage seed drawn from the master seed."""
    tag = int.from_bytes(stage.encode(), "little") % (2**32)
    return int(np.random.SeedSequence([seed, tag]).generate_state(1, np.uint32)[0])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_scenes(run: Run) -> None:
    cfg = run.cfg
    if cfg["classes"] == "catalogue":
        classes = presets.catalogue_classes()
    else:
        classes = [scene.SceneClassSpec.from_dict(c) for c in cfg["classes"]]
    for c in classes:
        c.validate()
    w, h = cfg.get("width", 32), cfg.get("height", 32)
    out = run.out_dir()
    for c in classes:
        seeds = np.random.SeedSequence([cfg["seed"], c.class_id]).generate_state(cfg["variants"], np.uint32)
        for v, vs in enumerate(seeds):
            m = scene.gen_scene(c, int(vs), w, h)
            p = out / f"class{c.class_id:03d}_v{v:04d}.tspm"
            scene.save_map(m, p)
            run.output(p.stem, p)


def cmd_gen(run: Run) -> None:
    cfg = run.cfg
    if ("preset" in cfg) == ("dataset" in cfg):
        raise ConfigError("exactly one of preset or dataset is required")
    if "preset" in cfg:
        ds_cfg = (presets.desk_closed_config if cfg["preset"] == "desk-closed" else presets.desk_open_config)()
        ds_cfg.master_seed = cfg["seed"]
    else:
        ds_cfg = photon.DatasetConfig.from_dict({**cfg["dataset"], "master_seed": cfg["seed"]})
    ds_cfg.validate()
    out = run.out_dir() / "dataset.tspd"
    photon.generate_dataset(ds_cfg, out, workers=run.workers)
    run.output("dataset", out)
    run.output("dataset_manifest", photon.manifest_path(out))


def cmd_train(run: Run) -> None:
    cfg = run.cfg
    ds = photon.read_dataset(run.input("dataset", cfg["dataset"]))
    classes = cfg.get("classes", [int(c) for c in ds.class_ids()])
    missing = sorted(set(classes) - set(int(c) for c in ds.class_ids()))
    if missing:
        raise ConfigError(f"classes {missing} are not in the dataset")
    split = harness.split_dataset(ds, harness.SplitSpec(**cfg.get("split", {}),
                                                        seed=_derived_seed(cfg["seed"], "split")))
    # config keys override the desk defaults
    tcfg = dataclasses.replace(presets.desk_train_config(), **cfg.get("train", {}),
                               seed=_derived_seed(cfg["seed"], "train"))
    tcfg.validate()
    idx = harness.select(ds, split.train, classes=classes)
    x = net.normalize_input(ds.counts[idx])
    out = run.out_dir()
    split_path = out / "split.json"
    atomic_write_text(split_path, canonical_json(split.to_dict()))
    run.output("split", split_path)
    model, trace = net.train(x, ds.labels[idx], tcfg, class_ids=sorted(classes))
    meta = {"config_hash": run.hash, "train_config": tcfg.to_dict()}
    net.save_params(model, out / "model.tspn", meta)
    net.save_trace(trace, out / "loss_trace.csv")
    run.output("model", out / "model.tspn")
    run.output("loss_trace", out / "loss_trace.csv")
    if cfg.get("baseline", False):
        bp, ce = base_mod.train_baseline(x, ds.labels[idx], tcfg, class_ids=sorted(classes))
        net.save_params(bp.as_model(), out / "baseline.tspn", {**meta, "kind": "baseline"})
        atomic_write_text(out / "baseline_trace.csv",
                          "epoch,cross_entropy\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(ce)))
        run.output("baseline", out / "baseline.tspn")
        run.output("baseline_trace", out / "baseline_trace.csv")
    run.extra["final_loss"] = trace.rows[-1][1]


def _load_split(path: Path) -> harness.Split:
    try:
        d = json.loads(path.read_text())
        return harness.Split(*(np.asarray(d[k], dtype=np.intp) for k in ("train", "val", "test")))
    except (ValueError, KeyError) as e:
        raise FormatError(f"malformed split file: {e}", path=path) from e


def _load_common(run: Run):
    cfg = run.cfg
    ds = photon.read_dataset(run.input("dataset", cfg["dataset"]))
    model, _ = net.load_params(run.input("model", cfg["model"]))
    split = _load_split(run.input("split", cfg["split"]))
    if len(ds) and max(int(split.train.max(initial=-1)), int(split.val.max(initial=-1)),
                       int(split.test.max(initial=-1))) >= len(ds):
        raise ConfigError("split indices exceed the dataset size")
    return ds, model, split


def cmd_skb_build(run: Run) -> None:
    ds, model, split = _load_common(run)
    val = harness.select(ds, split.val, classes=model.class_ids)
    feats = net.extract_features(ds.counts[val], model)
    kb = skb_mod.build_skb(feats, ds.labels[val], run.cfg.get("var_floor", skb_mod.VAR_FLOOR))
    out = run.out_dir()
    skb_mod.save_skb(kb, out / "skb.tspk")
    skb_mod.export_skb_json(kb, out / "skb.json")
    run.output("skb", out / "skb.tspk")
    run.output("skb_json", out / "skb.json")


def _write_table(run: Run, table: harness.ResultTable) -> None:
    out = run.out_dir()
    p = out / f"{table.name}.csv"
    atomic_write_text(p, table.to_csv())
    run.output(table.name, p)
    for method, records in table.logs.items():
        slug = method.replace(" ", "_").replace("|", "_at_")
        slug = "".join(ch for ch in slug if ch.isalnum() or ch in "_.-")
        lp = out / f"{table.name}.{slug}.jsonl"
        harness.write_log(records, lp)
        run.output(lp.name, lp)
    if table.meta:
        mp = out / f"{table.name}.meta.json"
        atomic_write_text(mp, json.dumps(table.meta, indent=1, sort_keys=True) + "\n")
        run.output(mp.name, mp)


def cmd_eval_closed(run: Run) -> None:
    ds, model, split = _load_common(run)
    kb = skb_mod.load_skb(run.input("skb", run.cfg["skb"]))
    bp = None
    if "baseline" in run.cfg:
        bp = base_mod.BaselineParams.from_model(net.load_params(run.input("baseline", run.cfg["baseline"]))[0])
    table = harness.eval_closed(ds, split, model, kb, bp, config_hash=run.hash)
    _write_table(run, table)


def cmd_eval_open(run: Run) -> None:
    cfg = run.cfg
    ds, model, split = _load_common(run)
    skb_path = run.input("skb", cfg["skb"])
    kb = skb_mod.load_skb(skb_path)
    before = skb_path.read_bytes()
    features = net.extract_features(ds.counts, model)
    order_seed = _derived_seed(cfg["seed"], "order")
    for sweep in cfg.get("sweeps", ["snr", "unknowns"]):
        parts = []
        for update in (True, False):
            proto = harness.OpenSetProtocol(
                known_classes=[int(c) for c in kb.class_ids],
                unknown_classes=list(cfg["unknown_classes"]),
                update=update,
                tau_target=cfg.get("tau_target", 0.95),
                order_seed=order_seed,
                maturity=cfg.get("maturity", 20),
                radius=cfg.get("radius", 0.15),
            )
            parts.append(harness.eval_open(ds, split, model, kb, proto, sweep=sweep,
                                           config_hash=run.hash, features=features))
        _write_table(run, harness.merge_tables(parts))
    if skb_mod.skb_to_bytes(kb) != before:
        raise StateError("open-set evaluation modified the stored SKB")


def cmd_plot(run: Run) -> None:
    tables = []
    for i, rel in enumerate(run.cfg["tables"]):
        p = run.input(f"table{i}", rel)
        name = p.stem
        x_label = "unknown classes" if "unknowns" in name else "snr_db"
        tables.append(harness.ResultTable.from_csv(p.read_text(), name=name, x_label=x_label))
    for p in harness.emit_report(tables, run.out_dir()):
        if p.suffix == ".svg":
            run.output(p.name, p)


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "gen": cmd_gen,
    "train": cmd_train,
    "skb-build": cmd_skb_build,
    "eval-closed": cmd_eval_closed,
    "eval-open": cmd_eval_open,
    "plot": cmd_plot,
}


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semlidar", description="Semantic single-photon lidar recognition pipeline")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument("--out", help="override the config's output directory")
        sp.add_argument("--root", help=f"base for relative paths (default ${ROOT_ENV} or cwd)")
        sp.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on it)")
    return ap


def _fail(code: int, err: BaseException) -> int:
    msg = str(err).replace("\n", " ")
    print(json.dumps({"exit": code, "error": type(err).__name__, "reason": msg}), file=sys.stderr)
    return code


def dispatch(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if args.out is not None:
            cfg["out"] = args.out
        validate_config(args.command, cfg)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        root = Path(args.root or os.environ.get(ROOT_ENV) or ".")
        run = Run(args.command, cfg, root, args.workers)
        COMMANDS[args.command](run)
        run.write_manifest()
    except SemlidarError as e:
        return _fail(e.exit_code, e)
    except (OSError, EOFError) as e:
        return _fail(2, e)
    except (ValueError, TypeError, KeyError) as e:
        return _fail(1, e)
    except ArithmeticError as e:
        return _fail(3, e)
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
