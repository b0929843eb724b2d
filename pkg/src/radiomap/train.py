"""Two-stage coarse-to-fine training."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import FeatureConfig, assemble_features, is_positional
from .grid import (D4Element, FeatureStack, GridError, NormalizationSpec, d4_elements, d4_transform,
                   denormalize, normalize, resize_bilinear, resize_nearest)
from .model import ModelConfig, StageModel, build_model, fine_combine, forward
from .scene_io import (DatasetManifest, FormatError, decode_tensor, encode_tensor, load_scene,
                       read_pathloss)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    base_lr: float = 1e-4
    seed: int = 0
    model_seed: int = 0
    freeze_coarse: bool = True
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.base_lr > 0:
            raise ValueError("need epochs >= 1, batch_size >= 1, base_lr > 0")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_rmse_db: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def lr_at(epoch: int, total_epochs: int, base_lr: float) -> float:
    """Step schedule: halved at floor(50%) and again at floor(75%) of the epochs."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if epoch < math.floor(0.5 * total_epochs):
        return base_lr
    if epoch < math.floor(0.75 * total_epochs):
        return base_lr / 2
    return base_lr / 4


# ---------------------------------------------------------------------------
# samples

@dataclass
class SampleSet:
    """Precomputed model inputs and targets for one split."""

    x: np.ndarray           # [N, C, H, W] float32 model inputs
    y: np.ndarray           # [N, H, W] normalized targets
    target_db: np.ndarray   # [N, H, W] ground truth in dB
    channel_names: list
    names: list = field(default_factory=list)
    task_ids: list = field(default_factory=list)

    def __len__(self):
        return self.x.shape[0]

    def with_channel(self, values: np.ndarray, name: str) -> "SampleSet":
        return SampleSet(np.concatenate([self.x, values[:, None].astype(self.x.dtype)], axis=1),
                         self.y, self.target_db, self.channel_names + [name], self.names, self.task_ids)


def fit_to_size(stack: FeatureStack, target_db: np.ndarray, size: int | None):
    """Bilinear for inputs, nearest for targets."""
    if size is None or stack.shape == (size, size):
        return stack, target_db
    data = np.stack([resize_bilinear(c, size, size) for c in stack.data])
    return FeatureStack(data, stack.channel_names), resize_nearest(target_db, size, size)


def load_samples(manifest: DatasetManifest, split: str, feature_cfg: FeatureConfig,
                 size: int | None = None, task_id: int | None = None) -> SampleSet:
    entries = manifest.entries(split, task_id)
    if not entries:
        raise ValueError(f"dataset has no {split!r} scenes")
    xs, ys, ts = [], [], []
    names = None
    for e in entries:
        scene = load_scene(manifest.resolve(e.scene))
        stack, target = fit_to_size(assemble_features(scene, feature_cfg),
                                    read_pathloss(manifest.resolve(e.target)), size)
        names = stack.channel_names
        xs.append(stack.data.astype(np.float32))
        ts.append(target)
        ys.append(normalize(target, manifest.normalization).astype(np.float32))
    return SampleSet(np.stack(xs), np.stack(ys), np.stack(ts), names,
                     [e.scene for e in entries], [e.task_id for e in entries])


def augment_sample(features: FeatureStack, target: np.ndarray, rng: np.random.Generator,
                   element: D4Element | None = None):
    """Random D4 element applied to all channels but the absolute positional ones."""
    h, w = features.shape
    if h != w:
        raise GridError("augmentation needs square grids")
    e = element if element is not None else d4_elements()[int(rng.integers(8))]
    pos = np.array([is_positional(n) for n in features.channel_names])
    data = d4_transform(features.data, e)
    data[pos] = features.data[pos]
    return FeatureStack(data, features.channel_names), d4_transform(target, e), e


def _augment_batch(x, y, rng, channel_names):
    pos = np.array([is_positional(n) for n in channel_names])
    elements = d4_elements()
    xb, yb = np.empty_like(x), np.empty_like(y)
    for i in range(x.shape[0]):
        e = elements[int(rng.integers(8))]
        xb[i] = d4_transform(x[i], e)
        xb[i, pos] = x[i, pos]
        yb[i] = d4_transform(y[i], e)
    return xb, yb


# ---------------------------------------------------------------------------
# training

def _snapshot(params):
    return {k: p.data.copy() for k, p in params.items()}


def predict_set(model: StageModel, samples: SampleSet, batch: int = 8) -> np.ndarray:
    """Normalized predictions for every sample; fine models combine with the last channel."""
    out = []
    for i in range(0, len(samples), batch):
        xb = samples.x[i:i + batch]
        raw = forward(model.params, Tensor(xb), model.cfg)
        if model.fine:
            raw = fine_combine(Tensor(xb[:, -1:]), raw)
        out.append(raw.data[:, 0].astype(np.float64))
    return np.concatenate(out)


def pooled_rmse_db(pred_norm: np.ndarray, samples: SampleSet, norm: NormalizationSpec) -> float:
    err = denormalize(pred_norm, norm) - samples.target_db
    return float(np.sqrt(np.mean(err * err)))


def train_stage(samples: SampleSet, model_cfg: ModelConfig, cfg: TrainConfig,
                norm: NormalizationSpec, val: SampleSet | None = None,
                coarse: StageModel | None = None, feature_cfg: FeatureConfig | None = None,
                fine: bool = False) -> tuple[StageModel, TrainHistory]:
    """Minibatch Adam on MSE in normalized space; keeps the best-validation weights.

    For the fine stage the last input channel of ``samples`` is the coarse
    prediction and the loss is taken on the combined map. With
    ``freeze_coarse=False`` the coarse model is re-run inside the graph and
    trained jointly.
    """
    if len(samples) == 0:
        raise ValueError("empty training set")
    if fine and coarse is None and not cfg.freeze_coarse:
        raise ValueError("joint fine training needs the coarse model")
    feature_cfg = feature_cfg or FeatureConfig()
    rng = np.random.default_rng(cfg.seed)
    params = build_model(model_cfg, cfg.model_seed, zero_head=fine)
    model = StageModel(params, model_cfg, fine=fine, feature_cfg=feature_cfg)
    trainable = dict(params)
    joint = fine and not cfg.freeze_coarse
    if joint:
        trainable.update({f"coarse/{k}": v for k, v in coarse.params.items()})
    opt = ad.Adam(trainable, lr=cfg.base_lr)
    history = TrainHistory()
    best, best_rmse = None, math.inf
    n = len(samples)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.epochs, cfg.base_lr)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = samples.x[idx], samples.y[idx]
            if cfg.augment:
                xb, yb = _augment_batch(xb, yb, rng, samples.channel_names)
            target = yb[:, None]
            with ad.Tape() as tape:
                if joint:
                    xc = Tensor(xb[:, :-1])
                    coarse_out = forward(coarse.params, xc, coarse.cfg)
                    out = forward(params, ad.concat_channels([xc, coarse_out]), model_cfg)
                    pred = fine_combine(coarse_out, out)
                elif fine:
                    pred = fine_combine(Tensor(xb[:, -1:]), forward(params, Tensor(xb), model_cfg))
                else:
                    pred = forward(params, Tensor(xb), model_cfg)
                loss = ad.mse_loss(pred, target)
                opt.zero_grad()
                tape.backward(loss)
            opt.step(lr)
            total += float(loss.data) * len(idx)
        history.train_loss.append(total / n)
        history.lr.append(lr)
        if val is not None:
            if joint:
                val_now = with_coarse_channel(coarse, _drop_last(val))
            else:
                val_now = val
            rmse = pooled_rmse_db(predict_set(model, val_now), val, norm)
            history.val_rmse_db.append(rmse)
            if rmse < best_rmse:
                best_rmse, best, history.best_epoch = rmse, (_snapshot(params),
                                                             _snapshot(coarse.params) if joint else None), epoch
        log.info("epoch %d/%d lr %.3g loss %.6f val %s", epoch + 1, cfg.epochs, lr, history.train_loss[-1],
                 f"{history.val_rmse_db[-1]:.3f} dB" if val is not None else "-")
    if best is not None:
        for k, v in best[0].items():
            params[k].data = v
        if best[1] is not None:
            for k, v in best[1].items():
                coarse.params[k].data = v
    return model, history


def _drop_last(samples: SampleSet) -> SampleSet:
    return SampleSet(samples.x[:, :-1], samples.y, samples.target_db, samples.channel_names[:-1],
                     samples.names, samples.task_ids)


def with_coarse_channel(coarse: StageModel, samples: SampleSet) -> SampleSet:
    return samples.with_channel(predict_set(coarse, samples), "coarse_pred")


def train_two_stage(train: SampleSet, val: SampleSet, model_cfg: ModelConfig, coarse_cfg: TrainConfig,
                    fine_cfg: TrainConfig, norm: NormalizationSpec, feature_cfg: FeatureConfig | None = None,
                    fine_model_cfg: ModelConfig | None = None):
    """Stage 1 trains the coarse model; stage 2 trains the fine model on inputs plus coarse output."""
    coarse, h_coarse = train_stage(train, model_cfg, coarse_cfg, norm, val, feature_cfg=feature_cfg)
    if fine_model_cfg is None:
        fine_model_cfg = ModelConfig(**{**asdict(model_cfg), "in_channels": model_cfg.in_channels + 1})
    fine, h_fine = train_stage(with_coarse_channel(coarse, train), fine_model_cfg, fine_cfg, norm,
                               with_coarse_channel(coarse, val), coarse=coarse, feature_cfg=feature_cfg,
                               fine=True)
    return coarse, fine, {"coarse": h_coarse, "fine": h_fine}


# ---------------------------------------------------------------------------
# checkpoints: one RMT1 channel holding every parameter, the name gives the table

CHECKPOINT_FORMAT = "radiomap-checkpoint/1"


def checkpoint_bytes(model: StageModel) -> bytes:
    table = {
        "format": CHECKPOINT_FORMAT,
        "fine": model.fine,
        "model": asdict(model.cfg),
        "features": asdict(model.feature_cfg),
        "params": [[k, list(p.data.shape)] for k, p in model.params.items()],
    }
    flat = np.concatenate([p.data.astype(np.float32).reshape(-1) for p in model.params.values()])
    return encode_tensor(FeatureStack(flat.reshape(1, 1, -1), [json.dumps(table, sort_keys=True)]))


def save_checkpoint(model: StageModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> StageModel:
    stack = decode_tensor(Path(path).read_bytes())
    try:
        table = json.loads(stack.channel_names[0])
    except json.JSONDecodeError:
        raise FormatError(f"{path}: not a checkpoint (channel name is not a parameter table)") from None
    if table.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: unknown checkpoint format {table.get('format')!r}")
    flat = stack.data.reshape(-1)
    params, offset = {}, 0
    with ad.precision(np.float32):
        for name, shape in table["params"]:
            size = int(np.prod(shape))
            params[name] = Tensor(flat[offset:offset + size].reshape(shape), requires_grad=True, name=name,
                                  copy=True)
            offset += size
    if offset != flat.size:
        raise FormatError(f"{path}: parameter table covers {offset} of {flat.size} values")
    m = dict(table["model"])
    cfg = ModelConfig(**{**m, "attention_stages": tuple(m["attention_stages"]),
                         "decoder_kernels": tuple(m["decoder_kernels"])})
    return StageModel(params, cfg, fine=bool(table["fine"]), feature_cfg=FeatureConfig(**table["features"]))
