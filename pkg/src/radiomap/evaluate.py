"""Test-time D4 ensembling and the three-task weighted RMSE report."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor
from .features import assemble_features
from .grid import (D4Element, GridError, NormalizationSpec, d4_elements, d4_inverse, d4_transform,
                   denormalize, resize_bilinear, resize_nearest)
from .model import StageModel, fine_combine, forward
from .oracle import physics_baseline
from .scene_io import DatasetManifest, Scene, dump_json, load_scene, read_pathloss, transform_scene
from .train import fit_to_size

TASK_WEIGHTS = (0.3, 0.3, 0.4)
VARIANTS = ("coarse_only", "two_stage", "full")


def rmse_db(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise GridError(f"prediction {pred.shape} and target {target.shape} differ")
    err = pred - target
    return math.sqrt(float(np.mean(err * err)))


def weighted_score(task_rmse: Sequence[float]) -> float:
    """0.3 * t1 + 0.3 * t2 + 0.4 * t3."""
    if len(task_rmse) != 3 or not all(math.isfinite(t) for t in task_rmse):
        raise ValueError(f"need three finite task RMSEs, got {task_rmse}")
    return sum(w * t for w, t in zip(TASK_WEIGHTS, task_rmse))


Predictor = Callable[[Scene], np.ndarray]


def tta_predict(predict: Predictor, scene: Scene, transforms: Sequence[D4Element] | None = None) -> np.ndarray:
    """Mean in dB over predictions on D4-transformed scenes, each mapped back by the inverse."""
    transforms = list(d4_elements() if transforms is None else transforms)
    if not transforms:
        raise ValueError("need at least one transform")
    h, w = scene.shape
    if h != w:
        raise GridError("test-time augmentation needs square scenes")
    total = None
    for e in transforms:
        mapped = predict(scene if e.is_identity else transform_scene(scene, e))
        back = d4_transform(mapped, d4_inverse(e))
        total = back.astype(np.float64) if total is None else total + back
    return total / len(transforms)


def model_predictor(coarse: StageModel, norm: NormalizationSpec, fine: StageModel | None = None,
                    size: int | None = None) -> Predictor:
    """Scene -> predicted dB map at the model's working size."""
    def predict(scene: Scene) -> np.ndarray:
        feats, _ = fit_to_size(assemble_features(scene, coarse.feature_cfg), np.zeros(scene.shape), size)
        x = feats.data[None].astype(np.float32)
        out = forward(coarse.params, Tensor(x), coarse.cfg)
        if fine is not None:
            xf = np.concatenate([x, out.data], axis=1)
            out = fine_combine(out, forward(fine.params, Tensor(xf), fine.cfg))
        return denormalize(out.data[0, 0].astype(np.float64), norm)
    return predict


def variant_predictor(variant: str, coarse: StageModel, fine: StageModel | None, norm: NormalizationSpec,
                      size: int | None = None, transforms: Sequence[D4Element] | None = None) -> Predictor:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "coarse_only":
        return model_predictor(coarse, norm, None, size)
    if fine is None:
        raise ValueError(f"variant {variant} needs a fine checkpoint")
    base = model_predictor(coarse, norm, fine, size)
    if variant == "two_stage":
        return base
    return lambda scene: tta_predict(base, scene, transforms)


@dataclass
class EvalReport:
    variant: str
    task_rmse_db: dict            # task id -> pooled RMSE
    overall_db: float
    per_scene: list               # [{"scene", "task_id", "rmse_db"}]
    inference_s_per_sample: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "task_rmse_db": {str(k): v for k, v in sorted(self.task_rmse_db.items())},
            "overall_db": self.overall_db,
            "task_weights": list(TASK_WEIGHTS),
            "per_scene": self.per_scene,
        }

    def to_json(self) -> str:
        return dump_json(self.to_dict())


def evaluate(manifest: DatasetManifest, predict: Predictor, variant: str = "custom",
             size: int | None = None, split: str = "test") -> EvalReport:
    """Per-task RMSE pooled over every pixel of every scene in the task, then the weighted score."""
    sq = {1: 0.0, 2: 0.0, 3: 0.0}
    count = {1: 0, 2: 0, 3: 0}
    per_scene = []
    elapsed = 0.0
    entries = manifest.entries(split)
    for e in entries:
        scene = load_scene(manifest.resolve(e.scene))
        target = read_pathloss(manifest.resolve(e.target))
        if size is not None and target.shape != (size, size):
            target = resize_nearest(target, size, size)
        t0 = time.perf_counter()
        pred = predict(scene)
        elapsed += time.perf_counter() - t0
        err = np.asarray(pred, dtype=np.float64) - target
        if e.task_id in sq:
            sq[e.task_id] += float(np.sum(err * err))
            count[e.task_id] += err.size
        per_scene.append({"scene": e.scene, "task_id": e.task_id, "rmse_db": rmse_db(pred, target)})
    missing = [t for t in (1, 2, 3) if count[t] == 0]
    if missing:
        raise ValueError(f"manifest has no {split} scenes for task(s) {missing}")
    task = {t: math.sqrt(sq[t] / count[t]) for t in (1, 2, 3)}
    return EvalReport(variant, task, weighted_score([task[1], task[2], task[3]]), per_scene,
                      elapsed / max(len(entries), 1))


@dataclass
class AblationReport:
    rows: list = field(default_factory=list)  # EvalReport per variant

    def to_json(self) -> str:
        return dump_json({"rows": [r.to_dict() for r in self.rows]})

    def timing_json(self) -> str:
        return json.dumps({r.variant: {"inference_s_per_sample": r.inference_s_per_sample} for r in self.rows},
                          sort_keys=True, indent=2) + "\n"

    def table(self) -> str:
        lines = [f"{'variant':<18}{'task1':>9}{'task2':>9}{'task3':>9}{'overall':>10}"]
        for r in self.rows:
            t = r.task_rmse_db
            lines.append(f"{r.variant:<18}{t[1]:>9.3f}{t[2]:>9.3f}{t[3]:>9.3f}{r.overall_db:>10.3f}")
        return "\n".join(lines) + "\n"


def ablation(manifest: DatasetManifest, coarse: StageModel, fine: StageModel | None, size: int | None = None,
             transforms: Sequence[D4Element] | None = None, include_physics: bool = True) -> AblationReport:
    norm = manifest.normalization
    report = AblationReport()
    if include_physics:
        report.rows.append(evaluate(manifest, lambda s: _fit_pred(physics_baseline(s, coarse.feature_cfg.d_min_m),
                                                                  size), "physics_only", size))
    for variant in VARIANTS:
        if variant != "coarse_only" and fine is None:
            continue
        report.rows.append(evaluate(manifest, variant_predictor(variant, coarse, fine, norm, size, transforms),
                                    variant, size))
    return report


def _fit_pred(pred: np.ndarray, size: int | None) -> np.ndarray:
    if size is None or pred.shape == (size, size):
        return pred
    return resize_bilinear(pred, size, size)
