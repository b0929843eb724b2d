"""``radiomap`` command line: gen-data | features | train | predict | eval | report.

Exit codes: 0 ok, 1 usage, 2 validation, 3 runtime. Failures print one line
``radiomap: error=<kind> exit=<code> reason=<json string>`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .evaluate import TASK_WEIGHTS, VARIANTS, _fit_pred, evaluate, variant_predictor
from .features import FeatureConfig, assemble_features, feature_channel_count
from .grid import IDENTITY, NormalizationSpec, d4_elements, resize_nearest
from .model import ModelConfig, StageModel
from .oracle import GeneratorParams, SplitCounts, TraceConfig, build_dataset, physics_baseline
from .scene_io import (dump_json, emit_heatmap, load_manifest, load_scene, read_pathloss, write_pathloss,
                       write_tensor)
from .train import (TrainConfig, fit_to_size, load_checkpoint, load_samples, save_checkpoint,
                    train_two_stage)

log = logging.getLogger("radiomap")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
SIZES = (64, 128, 384)


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


# ---------------------------------------------------------------------------
# config

@dataclass
class EvalOptions:
    variant: str = "full"
    size: int | None = None
    tta: str = "d4"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.size is not None and self.size not in SIZES:
            raise ValueError(f"size must be one of {SIZES}")
        if self.tta not in ("none", "d4"):
            raise ValueError("tta must be 'none' or 'd4'")


_SECTIONS = {
    "generator": GeneratorParams,
    "splits": SplitCounts,
    "trace": TraceConfig,
    "features": FeatureConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "fine_train": TrainConfig,
    "eval": EvalOptions,
}


@dataclass
class RunConfig:
    generator: GeneratorParams = field(default_factory=GeneratorParams)
    splits: SplitCounts = field(default_factory=SplitCounts)
    trace: TraceConfig = field(default_factory=TraceConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: dict = field(default_factory=dict)  # ModelConfig fields except in_channels
    train: TrainConfig = field(default_factory=TrainConfig)
    fine_train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def model_config(self, fine: bool = False) -> ModelConfig:
        return ModelConfig(in_channels=feature_channel_count(self.features, fine), **self.model)

    def to_json(self) -> str:
        doc = {}
        for name in _SECTIONS:
            value = getattr(self, name)
            doc[name] = dict(value) if isinstance(value, dict) else asdict(value)
        return dump_json(_plain(doc))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _section(cls, values: dict, name: str):
    if not isinstance(values, dict):
        raise ValidationError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValidationError(f"config section {name!r}: unknown key(s) {unknown}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"config section {name!r}: {exc}") from None


def load_config(path: str | None, args: argparse.Namespace) -> RunConfig:
    """Config file, then flag overrides, validated in full before any work starts."""
    doc = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ValidationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ValidationError("config file must hold a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ValidationError(f"unknown config section(s) {unknown}")
    doc = {k: dict(v) if isinstance(v, dict) else v for k, v in doc.items()}
    seed = getattr(args, "seed", None)
    if seed is not None:
        doc.setdefault("generator", {})["seed"] = seed
        for name, offset in (("train", 0), ("fine_train", 1)):
            doc.setdefault(name, {}).update(seed=seed + offset, model_seed=seed + offset)
    for flag in ("variant", "size", "tta"):
        value = getattr(args, flag, None)
        if value is not None:
            doc.setdefault("eval", {})[flag] = value
    cfg = RunConfig()
    for name, cls in _SECTIONS.items():
        if name not in doc:
            continue
        if cls is ModelConfig:
            values = doc[name]
            if not isinstance(values, dict) or "in_channels" in values:
                raise ValidationError("config section 'model': in_channels is derived from the features")
            _section(ModelConfig, {"in_channels": 1, **values}, name)
            cfg.model = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
        else:
            setattr(cfg, name, _section(cls, doc[name], name))
    cfg.model_config()
    return cfg


# ---------------------------------------------------------------------------
# helpers

def _manifest(path):
    if path is None:
        raise UsageError("--data is required")
    p = Path(path)
    if not (p / "manifest.json").is_file() and not p.is_file():
        raise ValidationError(f"no dataset manifest at {path}")
    return load_manifest(p)


def _checkpoints(path, need_fine: bool):
    if path is None:
        raise UsageError("--checkpoint is required")
    p = Path(path)
    if p.is_dir():
        coarse_path, fine_path = p / "coarse.ckpt", p / "fine.ckpt"
    else:
        coarse_path, fine_path = p, p.with_name("fine.ckpt")
    if not coarse_path.is_file():
        raise ValidationError(f"no coarse checkpoint at {coarse_path}")
    coarse = load_checkpoint(coarse_path)
    fine = None
    if need_fine:
        if not fine_path.is_file():
            raise ValidationError(f"variant needs a fine checkpoint; none at {fine_path}")
        fine = load_checkpoint(fine_path)
    return coarse, fine


def _out_dir(path) -> Path:
    if path is None:
        raise UsageError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _transforms(tta: str):
    return list(d4_elements()) if tta == "d4" else [IDENTITY]


def _write_timing(out: Path, timing: dict, name: str = "timing.json") -> None:
    (out / name).write_text(json.dumps(timing, sort_keys=True, indent=2) + "\n")


def _stem(rel: str) -> str:
    name = Path(rel).name
    return name[: -len(".scene.json")] if name.endswith(".scene.json") else Path(rel).stem


def _map_parallel(fn, items, threads: int):
    # every job writes its own files; order of completion never reaches the output bytes
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _stage_maps(scene, coarse: StageModel, fine: StageModel | None, norm: NormalizationSpec,
                size, transforms) -> dict:
    """dB maps for the heatmap quintet: coarse, fine and post-processed (TTA)."""
    maps = {"coarse": variant_predictor("coarse_only", coarse, None, norm, size)(scene)}
    if fine is not None:
        maps["fine"] = variant_predictor("two_stage", coarse, fine, norm, size)(scene)
        maps["postprocessed"] = variant_predictor("full", coarse, fine, norm, size, transforms)(scene)
    return maps


def _emit_quintet(out: Path, stem: str, scene, target, maps: dict, norm: NormalizationSpec, size) -> None:
    walls = scene.transmittance_db_per_m
    if size is not None and walls.shape != (size, size):
        walls = resize_nearest(walls, size, size)
    emit_heatmap(walls, 0.0, max(float(np.max(walls)), 1.0), out / f"{stem}_input.ppm")
    for name, grid in maps.items():
        emit_heatmap(grid, norm.lo_db, norm.hi_db, out / f"{stem}_{name}.ppm")
    emit_heatmap(target, norm.lo_db, norm.hi_db, out / f"{stem}_target.ppm")


def _target(manifest, entry, size):
    target = read_pathloss(manifest.resolve(entry.target))
    if size is not None and target.shape != (size, size):
        target = resize_nearest(target, size, size)
    return target


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    t0 = time.perf_counter()
    manifest = build_dataset(cfg.generator, cfg.splits, out, cfg.trace, threads=args.threads)
    (out / "config.json").write_text(cfg.to_json())
    _write_timing(out, {"gen_data_s": time.perf_counter() - t0, "scenes": len(manifest.scenes)})
    print(f"dataset {out} scenes={len(manifest.scenes)}")
    return EXIT_OK


def cmd_features(args, cfg: RunConfig) -> int:
    manifest = _manifest(args.data)
    out = _out_dir(args.out)
    size = cfg.eval.size

    def run(entry):
        scene = load_scene(manifest.resolve(entry.scene))
        stack, _ = fit_to_size(assemble_features(scene, cfg.features), np.zeros(scene.shape), size)
        write_tensor(stack, out / f"{_stem(entry.scene)}.features.rmt")

    _map_parallel(run, manifest.scenes, args.threads)
    (out / "config.json").write_text(cfg.to_json())
    print(f"features {out} stacks={len(manifest.scenes)}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    manifest = _manifest(args.data)
    out = _out_dir(args.out)
    size = cfg.eval.size
    (out / "config.json").write_text(cfg.to_json())
    timing = {}
    t0 = time.perf_counter()
    train = load_samples(manifest, "train", cfg.features, size)
    val = load_samples(manifest, "val", cfg.features, size)
    timing["load_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    coarse, fine, hist = train_two_stage(train, val, cfg.model_config(), cfg.train, cfg.fine_train,
                                         manifest.normalization, cfg.features, cfg.model_config(fine=True))
    timing["train_s"] = time.perf_counter() - t0
    save_checkpoint(coarse, out / "coarse.ckpt")
    save_checkpoint(fine, out / "fine.ckpt")
    (out / "history_coarse.json").write_text(hist["coarse"].to_json())
    (out / "history_fine.json").write_text(hist["fine"].to_json())
    entry = manifest.entries("val")[0]
    scene = load_scene(manifest.resolve(entry.scene))
    target = _target(manifest, entry, size)
    maps = _stage_maps(scene, coarse, fine, manifest.normalization, size, _transforms(cfg.eval.tta))
    heat = out / "heatmaps"
    heat.mkdir(exist_ok=True)
    _emit_quintet(heat, _stem(entry.scene), scene, target, maps, manifest.normalization, size)
    _write_timing(out, timing)
    print(f"run {out} coarse_val_db={min(hist['coarse'].val_rmse_db):.4f} "
          f"fine_val_db={min(hist['fine'].val_rmse_db):.4f}")
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    manifest = _manifest(args.data)
    variant = cfg.eval.variant
    coarse, fine = _checkpoints(args.checkpoint, variant != "coarse_only")
    out = _out_dir(args.out)
    norm, size = manifest.normalization, cfg.eval.size
    predict = variant_predictor(variant, coarse, fine, norm, size, _transforms(cfg.eval.tta))
    entries = manifest.entries(args.split) if args.split else manifest.scenes

    def run(entry):
        scene = load_scene(manifest.resolve(entry.scene))
        stem = _stem(entry.scene)
        pred = predict(scene)
        write_pathloss(pred, out / f"{stem}.pathloss.rmt")
        emit_heatmap(pred, norm.lo_db, norm.hi_db, out / f"{stem}.ppm")

    t0 = time.perf_counter()
    _map_parallel(run, entries, args.threads)
    (out / "config.json").write_text(cfg.to_json())
    _write_timing(out, {"predict_s": time.perf_counter() - t0, "scenes": len(entries)})
    print(f"predictions {out} scenes={len(entries)} variant={variant}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    manifest = _manifest(args.data)
    variant = cfg.eval.variant
    coarse, fine = _checkpoints(args.checkpoint, variant != "coarse_only")
    out = _out_dir(args.out)
    norm, size = manifest.normalization, cfg.eval.size
    transforms = _transforms(cfg.eval.tta)
    report = evaluate(manifest, variant_predictor(variant, coarse, fine, norm, size, transforms), variant, size,
                      split=args.split or "test")
    (out / f"report_{variant}.json").write_text(report.to_json())
    (out / f"report_{variant}.txt").write_text(_table([report]))
    heat = out / "heatmaps"
    heat.mkdir(exist_ok=True)
    for task in (1, 2, 3):
        entries = manifest.entries(args.split or "test", task)
        if not entries:
            continue
        scene = load_scene(manifest.resolve(entries[0].scene))
        target = _target(manifest, entries[0], size)
        maps = _stage_maps(scene, coarse, fine if variant != "coarse_only" else None, norm, size, transforms)
        _emit_quintet(heat, _stem(entries[0].scene), scene, target, maps, norm, size)
    _write_timing(out, {"inference_s_per_sample": report.inference_s_per_sample}, f"timing_{variant}.json")
    sys.stdout.write(_table([report]))
    return EXIT_OK


def _table(reports) -> str:
    lines = [f"{'run':<28}{'variant':<14}{'task1':>9}{'task2':>9}{'task3':>9}{'overall':>10}"]
    for r in reports:
        t = r["task_rmse_db"] if isinstance(r, dict) else {str(k): v for k, v in r.task_rmse_db.items()}
        run = r.get("run", "-") if isinstance(r, dict) else "-"
        variant = r["variant"] if isinstance(r, dict) else r.variant
        overall = r["overall_db"] if isinstance(r, dict) else r.overall_db
        lines.append(f"{run:<28}{variant:<14}{t['1']:>9.3f}{t['2']:>9.3f}{t['3']:>9.3f}{overall:>10.3f}")
    return "\n".join(lines) + "\n"


def cmd_report(args, cfg: RunConfig) -> int:
    runs = list(args.runs)
    if not runs:
        raise UsageError("report needs at least one run directory")
    rows = []
    for run in runs:
        p = Path(run)
        if not p.is_dir():
            raise ValidationError(f"run directory {run} not found")
        found = sorted(p.glob("report_*.json"))
        if not found:
            raise ValidationError(f"no evaluation reports in {run}")
        for f in found:
            doc = json.loads(f.read_text())
            rows.append({"run": p.name, **doc})
    if args.physics:
        manifest = _manifest(args.data)
        physics = evaluate(manifest, lambda s: _fit_pred(physics_baseline(s, cfg.features.d_min_m), cfg.eval.size),
                           "physics_only", cfg.eval.size)
        rows.insert(0, {"run": "-", **physics.to_dict()})
    order = {v: i for i, v in enumerate(("physics_only",) + VARIANTS)}
    rows.sort(key=lambda r: (r["run"] != "-", r["run"], order.get(r["variant"], len(order))))
    table = _table(rows)
    if args.out:
        out = _out_dir(args.out)
        (out / "ablation.json").write_text(dump_json({"task_weights": list(TASK_WEIGHTS), "rows": [
            {k: r[k] for k in ("run", "variant", "task_rmse_db", "overall_db")} for r in rows]}))
        (out / "ablation.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message} (usage: {self.format_usage().strip()[len('usage: '):]})")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--size", type=int, choices=SIZES)
    parser = _Parser(prog="radiomap", description="Indoor pathloss maps: data, training, evaluation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate and trace a dataset")
    p = sub.add_parser("features", parents=[common], help="persist model input stacks")
    p.add_argument("--data")
    p = sub.add_parser("train", parents=[common], help="train coarse and fine stages")
    p.add_argument("--data")
    for name in ("predict", "eval"):
        p = sub.add_parser(name, parents=[common], help=f"{name} with trained checkpoints")
        p.add_argument("--data")
        p.add_argument("--checkpoint")
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--tta", choices=("none", "d4"))
        p.add_argument("--split", choices=("train", "val", "test"))
    p = sub.add_parser("report", parents=[common], help="ablation table across run directories")
    p.add_argument("runs", nargs="*")
    p.add_argument("--data", help="dataset for the physics-only row")
    p.add_argument("--physics", action="store_true", help="add the physics-only baseline row")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "features": cmd_features, "train": cmd_train,
            "predict": cmd_predict, "eval": cmd_eval, "report": cmd_report}


def _fail(kind: str, code: int, reason: str) -> int:
    sys.stderr.write(f"radiomap: error={kind} exit={code} reason={json.dumps(str(reason))}\n")
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("RADIOMAP_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand (one of " + ", ".join(COMMANDS) + ")")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if args.command in ("predict", "eval") and args.checkpoint is None:
            raise UsageError(f"{args.command} requires --checkpoint")
        cfg = load_config(args.config, args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except (ValidationError, ValueError, FileNotFoundError) as exc:
        return _fail("validation", EXIT_VALIDATION, exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        log.debug("runtime failure", exc_info=True)
        return _fail("runtime", EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
