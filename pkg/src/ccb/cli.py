"""``ccb`` command line: gen-data, train, eval, ablate, report, replay.

Every command resolves its options as defaults < ``--config`` JSON file <
explicit flags, runs, and writes a ``manifest.json`` next to its outputs.
``ccb replay manifest.json`` re-executes a run from the manifest alone and
checks that every output hash matches.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .ablation import DEFAULT_GRID, grid_from_names, run_ablation
from .bias import estimate_bias, load_bias_table, save_bias_table
from .dataset import ShiftSpec, generate_iid_split, generate_toy_dataset, load_split, save_split
from .errors import CCBError, DatasetParseError, LeakageError, SchemaVersionError, ValidationError
from .evaluation import MetricsReport, evaluate
from .report import AblationLine, render_ablation, render_results, result_row
from .training import TrainConfig, TrainedModel, train

log = logging.getLogger("ccb")

MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(CCBError):
    pass


def data_root() -> Path:
    return Path(os.environ.get("CCB_DATA_DIR", "ccb_runs"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# option plumbing
# ---------------------------------------------------------------------------

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(p: argparse.ArgumentParser, cls, skip=()):
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        d = f.default
        kw = {"dest": f.name, "default": argparse.SUPPRESS, "help": f"default: {d}"}
        if isinstance(d, bool):
            p.add_argument(_flag(f.name), action=argparse.BooleanOptionalAction, **kw)
        elif isinstance(d, tuple):
            p.add_argument(_flag(f.name), nargs=len(d), type=type(d[0]), **kw)
        else:
            p.add_argument(_flag(f.name), type=type(d), **kw)


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(obj, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return obj


def _resolve(ns: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    out = dict(defaults)
    file_cfg = _load_config_file(getattr(ns, "config", None))
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise UsageError(f"unknown keys in config file: {sorted(unknown)}")
    out.update(file_cfg)
    for k, v in vars(ns).items():
        if k in defaults:
            out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _split_opts(opts: dict, cls) -> dict:
    names = _field_names(cls)
    return {k: v for k, v in opts.items() if k in names}


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def write_manifest(out_dir: Path, command: str, opts: dict, inputs: dict, outputs: list[Path],
                   seed) -> Path:
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "command": command,
        "config": opts,
        "seed": seed,
        "inputs": {role: {"path": str(Path(p).resolve()), "sha256": sha256_file(p)}
                   for role, p in inputs.items()},
        "outputs": {p.name: sha256_file(p) for p in outputs},
        "tool_version": __version__,
        "backend": kernels.backend_name(),
        "platform": {"python": platform.python_version(), "numpy": np.__version__,
                     "machine": platform.machine()},
    }
    return _write_json(out_dir / MANIFEST_NAME, manifest)


# ---------------------------------------------------------------------------
# commands; each takes resolved options and returns (outputs, inputs, seed)
# ---------------------------------------------------------------------------

GEN_DEFAULTS = {**ShiftSpec().to_dict(), "n_val": 1000}
TRAIN_DEFAULTS = {**TrainConfig().to_dict(), "data": None}
EVAL_DEFAULTS = {"model": None, "split": None, "iid_split": None, "head": None, "bias": None,
                 "label": None}
ABLATE_DEFAULTS = {**ShiftSpec().to_dict(), **TrainConfig().to_dict(), "n_val": 1000,
                   "seeds": 5, "cells": [c.name for c in DEFAULT_GRID], "jobs": 1}
ABLATE_DEFAULTS.pop("seed")
ABLATE_DEFAULTS.pop("loss_mode")
ABLATE_DEFAULTS.pop("r")
ABLATE_DEFAULTS.pop("context_label")


def run_gen_data(opts: dict, out: Path):
    spec = ShiftSpec.from_dict(_split_opts(opts, ShiftSpec))
    if int(opts["n_val"]) <= 0:
        raise ValidationError("n_val: must be > 0")
    train_s, test_s = generate_toy_dataset(spec)
    val = generate_iid_split(spec, int(opts["n_val"]))
    out.mkdir(parents=True, exist_ok=True)
    files = [save_split(s, out / f"{s.split_name}.jsonl") for s in (train_s, test_s, val)]
    table = estimate_bias(train_s)
    files.append(save_bias_table(table, out / "bias.tsv", train_s.answer_space.answers,
                                 train_s.qtype_table.type_names))
    files.append(_write_json(out / "spec.json", spec.to_dict()))
    return files, {}, spec.seed


def run_train(opts: dict, out: Path):
    data = Path(opts["data"] or data_root() / "data")
    train_path = _require(data / "train.jsonl", "training split")
    bias_path = _require(data / "bias.tsv", "bias table")
    split = load_split(train_path)
    table, answers, names = load_bias_table(bias_path)
    if tuple(answers) != split.answer_space.answers or tuple(names) != split.qtype_table.type_names:
        raise ValidationError("bias table header does not match the training split")
    cfg = TrainConfig.from_dict(_split_opts(opts, TrainConfig))
    model, history = train(cfg, split, table)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = model.save(out / "model.ckpt")
    hist = out / "history.jsonl"
    with open(hist, "w", encoding="utf-8") as f:
        for rec in history:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return [ckpt, hist], {"train": train_path, "bias": bias_path}, cfg.seed


def run_eval(opts: dict, out: Path):
    root = data_root()
    model_path = _require(opts["model"] or root / "model" / "model.ckpt", "checkpoint")
    split_path = _require(opts["split"] or root / "data" / "test.jsonl", "evaluation split")
    model = TrainedModel.load(model_path)
    inputs = {"model": model_path, "split": split_path}
    if opts.get("bias"):
        bias_path = _require(opts["bias"], "bias table")
        model.bias_table = load_bias_table(bias_path)[0]
        inputs["bias"] = bias_path
    split = load_split(split_path)
    shifted = evaluate(model, split, opts.get("head"))
    iid = None
    if opts.get("iid_split"):
        iid_path = _require(opts["iid_split"], "in-distribution split")
        inputs["iid_split"] = iid_path
        iid = evaluate(model, load_split(iid_path), opts.get("head"))
        shifted.gap = iid.overall - shifted.overall
    out.mkdir(parents=True, exist_ok=True)
    payload = {"shifted": shifted.as_dict(), "iid": None if iid is None else iid.as_dict(),
               "label": opts.get("label") or model.train_config.loss_mode}
    files = [_write_json(out / "metrics.json", payload)]
    table = render_results([result_row(payload["label"], shifted, iid)])
    (out / "metrics.txt").write_text(table, encoding="utf-8")
    files.append(out / "metrics.txt")
    return files, inputs, model.train_config.seed


def run_ablate(opts: dict, out: Path):
    spec_d = _split_opts({**opts, "seed": 0}, ShiftSpec)
    base = _split_opts(opts, TrainConfig)
    seeds = range(int(opts["seeds"]))
    if int(opts["seeds"]) <= 0:
        raise ValidationError("seeds: must be > 0")
    result = run_ablation(TrainConfig.from_dict(base), grid_from_names(opts["cells"]), seeds,
                          ShiftSpec.from_dict(spec_d), jobs=int(opts["jobs"]), n_val=int(opts["n_val"]))
    out.mkdir(parents=True, exist_ok=True)
    files = [_write_json(out / "ablation.json", result.as_dict())]
    (out / "ablation.txt").write_text(result.render(), encoding="utf-8")
    files.append(out / "ablation.txt")
    return files, {}, list(seeds)


def _ablation_lines(obj: dict) -> list[AblationLine]:
    cells = obj["cells"]
    multi = any(len(c.get("seeds", [0])) > 1 for c in cells)
    lines = []
    for c in cells:
        label = {"ml_baseline": "+None", "lmh_baseline": "+LMH"}.get(c["loss_mode"], "+CCB")
        acc = c["mean"] if "mean" in c else c["accuracy"]
        lines.append(AblationLine(label, c.get("r"), c.get("context_label"), acc,
                                  c.get("std") if multi else None))
    return lines


def _metric_rows(obj) -> list:
    entries = obj if isinstance(obj, list) else [obj]
    rows = []
    for e in entries:
        shifted = MetricsReport.from_dict(e["shifted"])
        iid = MetricsReport.from_dict(e["iid"]) if e.get("iid") else None
        rows.append(result_row(e.get("label") or shifted.head, shifted, iid))
    return rows


def render_report_files(paths) -> str:
    """One results table for all metrics.json inputs, one table per ablation.json."""
    rows, tables = [], []
    for path in paths:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(obj, dict) and "cells" in obj:
            tables.append(render_ablation(_ablation_lines(obj)))
        else:
            rows += _metric_rows(obj)
    if rows:
        tables.insert(0, render_results(rows))
    return "\n".join(tables)


def run_report(opts: dict, out: Path):
    text = render_report_files([_require(p, "report input") for p in opts["inputs"]])
    out.mkdir(parents=True, exist_ok=True)
    dest = out / "report.txt"
    dest.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return [dest], {f"input{i}": p for i, p in enumerate(opts["inputs"])}, None


COMMANDS = {
    "gen-data": (run_gen_data, GEN_DEFAULTS, "data"),
    "train": (run_train, TRAIN_DEFAULTS, "model"),
    "eval": (run_eval, EVAL_DEFAULTS, "eval"),
    "ablate": (run_ablate, ABLATE_DEFAULTS, "ablation"),
    "report": (run_report, {"inputs": []}, "report"),
}


def execute(command: str, opts: dict, out: Path) -> Path:
    runner = COMMANDS[command][0]
    outputs, inputs, seed = runner(opts, out)
    return write_manifest(out, command, opts, inputs, outputs, seed)


def replay(manifest_path, out: Path | None = None) -> tuple[bool, dict]:
    """Re-run a manifest into ``out``; returns (all hashes equal, per-file comparison)."""
    manifest_path = _require(manifest_path, "manifest")
    m = json.loads(manifest_path.read_text(encoding="utf-8"))
    if m.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise SchemaVersionError(f"manifest schema_version {m.get('schema_version')!r}")
    for role, rec in m["inputs"].items():
        if sha256_file(_require(rec["path"], f"input {role}")) != rec["sha256"]:
            raise ValidationError(f"input {role} ({rec['path']}) changed since the run")
    out = out or manifest_path.parent.with_name(manifest_path.parent.name + "_replay")
    new = json.loads(execute(m["command"], m["config"], Path(out)).read_text(encoding="utf-8"))
    cmp = {name: (h, new["outputs"].get(name)) for name, h in m["outputs"].items()}
    return all(a == b for a, b in cmp.values()), cmp


# ---------------------------------------------------------------------------
# argparse
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccb", description="Content and context debiasing on a synthetic prior-shift benchmark.")
    p.add_argument("--version", action="version", version=f"ccb {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file of options; explicit flags win")
        sp.add_argument("--out", help="output directory (default under $CCB_DATA_DIR)")

    g = sub.add_parser("gen-data", help="generate train/test/val splits and the bias table")
    common(g)
    _add_dataclass_flags(g, ShiftSpec)
    g.add_argument("--n-val", dest="n_val", type=int, default=argparse.SUPPRESS)

    t = sub.add_parser("train", help="train one model")
    common(t)
    t.add_argument("--data", dest="data", default=argparse.SUPPRESS,
                   help="directory written by gen-data")
    t.add_argument("--loss", dest="loss_mode", choices=("ccb", "ml_baseline", "lmh_baseline"),
                   default=argparse.SUPPRESS)
    _add_dataclass_flags(t, TrainConfig, skip=("loss_mode",))

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(e)
    e.add_argument("--model", dest="model", default=argparse.SUPPRESS)
    e.add_argument("--split", dest="split", default=argparse.SUPPRESS)
    e.add_argument("--iid-split", dest="iid_split", default=argparse.SUPPRESS,
                   help="in-distribution split; adds the gap")
    e.add_argument("--head", dest="head", choices=("joint", "content", "base", "context"),
                   default=argparse.SUPPRESS)
    e.add_argument("--bias", dest="bias", default=argparse.SUPPRESS,
                   help="override the checkpoint's bias table")
    e.add_argument("--label", dest="label", default=argparse.SUPPRESS, help="row label in the table")

    a = sub.add_parser("ablate", help="run the r / context-label grid over seeds")
    common(a)
    _add_dataclass_flags(a, ShiftSpec, skip=("seed",))
    _add_dataclass_flags(a, TrainConfig, skip=("seed", "loss_mode", "r", "context_label"))
    a.add_argument("--n-val", dest="n_val", type=int, default=argparse.SUPPRESS)
    a.add_argument("--seeds", dest="seeds", type=int, default=argparse.SUPPRESS)
    a.add_argument("--cells", dest="cells", nargs="+", default=argparse.SUPPRESS)
    a.add_argument("--jobs", dest="jobs", type=int, default=argparse.SUPPRESS)

    r = sub.add_parser("report", help="render metrics.json / ablation.json files as tables")
    common(r)
    r.add_argument("inputs", nargs="+")

    rp = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    rp.add_argument("manifest")
    rp.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.command == "replay":
            ok, cmp = replay(ns.manifest, Path(ns.out) if ns.out else None)
            for name, (a, b) in cmp.items():
                print(f"{'same' if a == b else 'DIFF'} {name}")
            return EXIT_OK if ok else EXIT_RUNTIME
        _, defaults, sub_dir = COMMANDS[ns.command]
        opts = _resolve(ns, defaults)
        out = Path(ns.out) if ns.out else data_root() / sub_dir
        manifest = execute(ns.command, opts, out)
        if ns.command != "report":
            print(f"wrote {manifest.parent}")
            if ns.command == "eval":
                sys.stdout.write((out / "metrics.txt").read_text(encoding="utf-8"))
            elif ns.command == "ablate":
                sys.stdout.write((out / "ablation.txt").read_text(encoding="utf-8"))
        return EXIT_OK
    except (UsageError, ValidationError, DatasetParseError, SchemaVersionError, LeakageError) as e:
        print(f"ccb {ns.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CCBError, RuntimeError, OSError, ValueError) as e:
        print(f"ccb {ns.command}: failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
