"""Command-line entry point: ``gdnstream <command> [--config C] [--out DIR] ...``.

Commands::

    bench          sweep frame counts per backend; metrics CSVs plus fitted-shape summary
    generate       stream frames with a toy model; frame blob, norms CSV, metrics CSV
    distill        per-layer alignment training, optionally followed by joint training
    select-layers  recovery rates, protection scores and the replacement set from a score file
    cost           closed-form MACs and bytes for history lengths 0..max_history

Each config is a JSON object with ``"version": 1``; missing fields take the
defaults in ``DEFAULTS``.  ``--seed`` and ``--precision`` override the
config.  Every successful run writes ``manifest.json`` next to its
artifacts; a failed run writes ``error.json`` and exits nonzero (2 for a bad
config or missing input, 1 for a failure during compute).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import jsonschema
import numpy as np

from . import blob, distill, hybrid, numerics, selection, streaming

CONFIG_VERSION = 1

_POS = {"type": "integer", "minimum": 1}
_DIMS = {
    "hidden": _POS,
    "heads": _POS,
    "tokens_per_frame": _POS,
    "denoise_steps": _POS,
    "layers": _POS,
    "seed": {"type": "integer", "minimum": 0},
    "precision": {"enum": ["double", "single"]},
    "d_ff": {"type": ["integer", "null"], "minimum": 1},
    "granularity": {"enum": list(hybrid.GRANULARITIES)},
}


def _schema(props: dict, required: Sequence[str] = ()) -> dict:
    return {
        "type": "object",
        "properties": {"version": {"const": CONFIG_VERSION}, **props},
        "required": ["version", *required],
        "additionalProperties": False,
    }


SCHEMAS = {
    "bench": _schema({
        **_DIMS,
        "frames": {"type": "array", "items": _POS, "minItems": 1, "uniqueItems": True},
        "backends": {"type": "array", "items": {"enum": list(streaming.BACKENDS)},
                     "minItems": 1, "uniqueItems": True},
    }),
    "generate": _schema({
        **_DIMS,
        "frames": _POS,
        "backends": {"type": "array", "items": {"enum": list(streaming.BACKENDS)}, "minItems": 1},
    }),
    "distill": _schema({
        **_DIMS,
        "replace": {"type": "array", "items": {"type": "integer", "minimum": 0},
                    "minItems": 1, "uniqueItems": True},
        "history_frames": {"type": "integer", "minimum": 0},
        "batch": _POS,
        "steps": _POS,
        "lr": {"type": "number", "minimum": 0},
        "optimizer": {"enum": ["sgd", "adam"]},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "teacher_history": {"type": "boolean"},
        "joint_steps": {"type": "integer", "minimum": 0},
        "joint_lr": {"type": "number", "minimum": 0},
    }),
    "select-layers": _schema({
        "scores": {"type": "string", "minLength": 1},
        "budget": {"type": "integer", "minimum": 0},
        "beta": {"type": "number", "minimum": 0},
        "threshold_hr": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    }, required=("scores", "budget")),
    "cost": _schema({
        **_DIMS,
        "max_history": {"type": "integer", "minimum": 0},
    }),
}

_BASE = {"version": 1, "hidden": 64, "heads": 4, "tokens_per_frame": 16, "denoise_steps": 4,
         "layers": 4, "seed": 0, "precision": "double", "d_ff": None, "granularity": "headwise"}
DEFAULTS = {
    "bench": {**_BASE, "frames": [5, 10, 20, 40, 80], "backends": ["softmax", "hybrid"]},
    "generate": {**_BASE, "frames": 8, "backends": ["hybrid"]},
    "distill": {**_BASE, "hidden": 16, "heads": 2, "tokens_per_frame": 4, "layers": 2,
                "replace": [0], "history_frames": 2, "batch": 8, "steps": 200, "lr": 2.0,
                "optimizer": "sgd", "momentum": 0.9, "teacher_history": True,
                "joint_steps": 0, "joint_lr": 0.05},
    "select-layers": {"version": 1, "beta": selection.DEFAULT_BETA,
                      "threshold_hr": selection.DEFAULT_THRESHOLD},
    "cost": {**_BASE, "max_history": 100},
}


class ConfigError(ValueError):
    def __init__(self, message: str, details: Optional[List[str]] = None):
        super().__init__(message)
        self.details = details or []


# ---------------------------------------------------------------------------
# config handling

def load_config(command: str, path: Optional[str], seed: Optional[int] = None,
                precision: Optional[str] = None) -> dict:
    raw: dict = {"version": CONFIG_VERSION}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
    schema = SCHEMAS[command]
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(raw), key=lambda e: list(e.path))
    if errors:
        raise ConfigError("config does not match the schema",
                          [f"{'/'.join(map(str, e.path)) or '<root>'}: {e.message}" for e in errors])
    cfg = {**DEFAULTS[command], **raw}
    if seed is not None and "seed" in schema["properties"]:
        cfg["seed"] = seed
    if precision is not None and "precision" in schema["properties"]:
        cfg["precision"] = precision
    if "hidden" in cfg and cfg["hidden"] % cfg["heads"]:
        raise ConfigError("config does not match the schema", ["hidden: must be divisible by heads"])
    if command == "select-layers" and path is not None:
        cfg["scores"] = str((Path(path).parent / cfg["scores"]).resolve())
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


def _versions() -> dict:
    try:
        own = metadata.version("gdnstream")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"gdnstream": own, "numpy": np.__version__, "jsonschema": metadata.version("jsonschema"),
            "python": platform.python_version()}


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _stream_config(cfg: dict, frames: int, backends: Sequence[str]) -> streaming.StreamConfig:
    return streaming.StreamConfig(frames, cfg["tokens_per_frame"], cfg["denoise_steps"],
                                  cfg["hidden"], cfg["heads"], cfg["seed"], tuple(backends),
                                  cfg["precision"], cfg["d_ff"])


# ---------------------------------------------------------------------------
# commands; each returns the list of artifacts it wrote

def cmd_bench(cfg: dict, out: Path) -> List[str]:
    L, d = cfg["tokens_per_frame"], cfg["hidden"]
    frames = sorted(cfg["frames"])
    artifacts, result_rows, summary = [], [], []
    for backend in cfg["backends"]:
        macs, mem = [], []
        for n in frames:
            sc = _stream_config(cfg, n, [backend] * cfg["layers"])
            model = sc.build_model(granularity=cfg["granularity"])
            _, metrics = streaming.generate(model, sc)
            name = f"metrics_{backend}_N{n}.csv"
            metrics.to_csv(out / name)
            artifacts.append(name)
            total = int(metrics.attention_macs()[-1])
            mem_layer = int(metrics.memory_bytes(0)[-1])
            macs.append(total)
            mem.append(mem_layer)
            result_rows.append([backend, n, total, mem_layer, int(metrics.memory_bytes()[-1]),
                                int(metrics.state_writes(0)[-1]), int(metrics.wall_time_ns()[-1])])
        deg = streaming.fitted_degree(frames, macs) if len(frames) > 1 else ""
        r2 = streaming.fit_polynomial(frames, macs, deg)[1] if deg != "" and len(frames) > deg else ""
        slope = streaming.exact_slope(frames, mem)
        summary.append([backend, " ".join(map(str, frames)), deg, r2,
                        "" if slope is None else slope,
                        2 * L * d * numerics.dtype_for(cfg["precision"]).itemsize,
                        int(len(set(mem)) == 1)])
    _write_csv(out / "results.csv", ["backend", "frames", "cumulative_macs", "layer0_bytes",
                                     "total_bytes", "layer0_state_writes", "wall_ns"], result_rows)
    _write_csv(out / "summary.csv", ["backend", "frames", "macs_fitted_degree", "macs_r2",
                                     "memory_slope_bytes_per_frame", "kv_slope_reference",
                                     "memory_constant"], summary)
    return artifacts + ["results.csv", "summary.csv"]


def cmd_generate(cfg: dict, out: Path) -> List[str]:
    backends = cfg["backends"]
    if len(backends) == 1:
        backends = backends * cfg["layers"]
    elif len(backends) != cfg["layers"]:
        raise ConfigError("config does not match the schema",
                          ["backends: give one backend or one per layer"])
    sc = _stream_config(cfg, cfg["frames"], backends)
    model = sc.build_model(granularity=cfg["granularity"])
    frames, metrics = streaming.generate(model, sc)
    blob.save(out / "frames.blob", {f"frame_{i:04d}": z for i, z in enumerate(frames)},
              {"kind": "frames", "backends": list(backends), "precision": cfg["precision"]})
    _write_csv(out / "frame_norms.csv", ["frame", "l2_norm"],
               [[i, repr(float(np.linalg.norm(z)))] for i, z in enumerate(frames)])
    metrics.to_csv(out / "metrics.csv")
    return ["frames.blob", "frame_norms.csv", "metrics.csv"]


def cmd_distill(cfg: dict, out: Path) -> List[str]:
    if cfg["precision"] != "double":
        raise ConfigError("config does not match the schema",
                          ["precision: distillation runs in double precision only"])
    bad = [i for i in cfg["replace"] if i >= cfg["layers"]]
    if bad:
        raise ConfigError("config does not match the schema", [f"replace: no layer {bad}"])
    teacher = streaming.build_toy_model(cfg["hidden"], cfg["heads"], ["softmax"] * cfg["layers"],
                                        cfg["seed"], d_ff=cfg["d_ff"], granularity=cfg["granularity"])
    backends = ["hybrid" if i in cfg["replace"] else "softmax" for i in range(cfg["layers"])]
    student = streaming.with_backends(teacher, backends)
    artifacts, runs = [], {}
    for i in sorted(cfg["replace"]):
        layer = student.blocks[i].layer
        rng = numerics.make_rng(cfg["seed"], stream=10 + i)
        samples = distill.make_alignment_samples(layer.proj, cfg["tokens_per_frame"],
                                                 cfg["history_frames"], cfg["batch"], rng,
                                                 teacher_history=cfg["teacher_history"])
        run = distill.train_stage1(layer, teacher.blocks[i].proj, distill.fixed_batch(samples),
                                   cfg["steps"], cfg["lr"], cfg["seed"], cfg["optimizer"],
                                   cfg["momentum"])
        runs[f"L{i}"] = run.manifest()
        _write_csv(out / f"loss_L{i}.csv", ["step", "loss", "smoothed"],
                   [[s, repr(a), repr(float(b))] for s, (a, b) in
                    enumerate(zip(run.loss_trace, run.smoothed))])
        hybrid.save_layer(layer, out / f"layer_L{i}.blob")
        artifacts += [f"loss_L{i}.csv", f"layer_L{i}.blob"]
    if cfg["joint_steps"]:
        rng = numerics.make_rng(cfg["seed"], stream=9)
        samples = distill.make_joint_samples(teacher, cfg["tokens_per_frame"], cfg["history_frames"],
                                             cfg["batch"], rng)
        run = distill.train_stage2(student, distill.fixed_batch(samples), cfg["joint_steps"],
                                   cfg["joint_lr"], cfg["seed"], cfg["optimizer"], cfg["momentum"])
        runs["joint"] = run.manifest()
        _write_csv(out / "loss_joint.csv", ["step", "loss", "smoothed"],
                   [[s, repr(a), repr(float(b))] for s, (a, b) in
                    enumerate(zip(run.loss_trace, run.smoothed))])
        blob.save(out / "student_ffn.blob",
                  {f"L{i}.{w}": getattr(student.blocks[i], w)
                   for i in sorted(cfg["replace"]) for w in ("w1", "w2")}, {"kind": "ffn"})
        for i in sorted(cfg["replace"]):
            hybrid.save_layer(student.blocks[i].layer, out / f"layer_L{i}.blob")
        artifacts += ["loss_joint.csv", "student_ffn.blob"]
    (out / "runs.json").write_text(json.dumps(runs, indent=2, sort_keys=True), encoding="utf-8")
    return artifacts + ["runs.json"]


def cmd_select_layers(cfg: dict, out: Path) -> List[str]:
    path = Path(cfg["scores"])
    if not path.exists():
        raise ConfigError(f"score file not found: {path}")
    table = selection.ScoreTable.load(path)
    if cfg["budget"] > len(table.layers):
        raise ConfigError("config does not match the schema",
                          [f"budget: {cfg['budget']} exceeds {len(table.layers)} layers"])
    res = selection.select_layers(table, cfg["budget"], cfg["beta"], cfg["threshold_hr"])
    (out / "selection.json").write_text(json.dumps(res.to_json(), indent=2, sort_keys=True),
                                        encoding="utf-8")
    return ["selection.json"]


def cmd_cost(cfg: dict, out: Path) -> List[str]:
    L, d, H = cfg["tokens_per_frame"], cfg["hidden"], cfg["heads"]
    D = d // H
    gran, prec = cfg["granularity"], cfg["precision"]
    rows = []
    for n in range(cfg["max_history"] + 1):
        row = [n]
        for backend in streaming.BACKENDS:
            row += [streaming.count_attention_flops(backend, L, d, H, D, n, "noisy", gran),
                    streaming.count_attention_flops(backend, L, d, H, D, n, "clean", gran),
                    streaming.memory_footprint(backend, L, d, H, D, n, prec)]
        rows.append(row)
    _write_csv(out / "cost.csv", ["history_frames",
                                  "softmax_macs_noisy", "softmax_macs_clean", "softmax_bytes",
                                  "hybrid_macs_noisy", "hybrid_macs_clean", "hybrid_bytes"], rows)
    return ["cost.csv"]


COMMANDS: Dict[str, Callable[[dict, Path], List[str]]] = {
    "bench": cmd_bench,
    "generate": cmd_generate,
    "distill": cmd_distill,
    "select-layers": cmd_select_layers,
    "cost": cmd_cost,
}


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gdnstream", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (version 1)")
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--precision", choices=["double", "single"])
    return parser


def _fail(out: Path, code: int, kind: str, message: str, details=None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    err = {"status": "error", "error": kind, "message": message, "details": details or []}
    (out / "error.json").write_text(json.dumps(err, indent=2), encoding="utf-8")
    print(f"error: {message}", file=sys.stderr)
    for line in details or []:
        print(f"  {line}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    if args.seed is not None and args.seed < 0:
        return _fail(out, 2, "ConfigError", "--seed must be nonnegative")
    start = time.perf_counter()
    try:
        cfg = load_config(args.command, args.config, args.seed, args.precision)
        out.mkdir(parents=True, exist_ok=True)
        stale = out / "error.json"
        if stale.exists():
            stale.unlink()
        artifacts = COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        return _fail(out, 2, "ConfigError", str(exc), exc.details)
    except (selection.ContractError, distill.DivergenceError, blob.BlobFormatError,
            FloatingPointError) as exc:
        return _fail(out, 1, type(exc).__name__, str(exc))
    manifest = {
        "status": "ok",
        "command": args.command,
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "seed": cfg.get("seed"),
        "versions": _versions(),
        "wall_time_s": time.perf_counter() - start,
        "artifacts": artifacts,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True),
                                       encoding="utf-8")
    return 0


if __name__ == "__main__":
    sys.exit(main())
