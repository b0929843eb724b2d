"""Desk-scale U-shaped pathloss network with coarse and fine variants.

Encoder: 3x3 conv stem, then per stage a stride-2 conv and a 3x3 conv, each
followed by group norm and GELU; the deepest stage adds a single-head
transformer block over its flattened tokens. Decoder, deepest to shallowest:
nearest upsample and 1x1 projection, a sigmoid gate on the skip connection,
a residual multiscale depthwise block (kernels 1, 3, 5 summed, then pointwise)
and squeeze-style channel attention. A 1x1 head with sigmoid maps to [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import FeatureConfig, assemble_features
from .grid import NormalizationSpec, denormalize, normalize


@dataclass
class ModelConfig:
    in_channels: int
    base_width: int = 16
    n_stages: int = 4
    attention_stages: tuple = ()  # empty means deepest only
    decoder_kernels: tuple = (1, 3, 5)
    heads: int = 1

    def __post_init__(self):
        if self.n_stages < 2:
            raise ValueError("n_stages must be >= 2")
        if self.in_channels < 1 or self.base_width < 1:
            raise ValueError("in_channels and base_width must be positive")
        if any(k % 2 == 0 for k in self.decoder_kernels):
            raise ValueError("decoder kernels must be odd")
        self.attention_stages = tuple(self.attention_stages) or (self.n_stages - 1,)
        self.decoder_kernels = tuple(sorted(self.decoder_kernels))

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2 ** s for s in range(self.n_stages)]

    def check_input(self, h: int, w: int) -> None:
        m = 2 ** (self.n_stages - 1)
        if h % m or w % m:
            raise ValueError(f"input {h}x{w} not divisible by {m} for {self.n_stages} stages")


def _groups(c: int) -> int:
    return 4 if c % 4 == 0 else 1


class _Init:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def add(self, name, shape, fan_in=None, value=None):
        if value is not None:
            data = np.full(shape, value, dtype=np.float64)
        else:
            bound = math.sqrt(3.0 / fan_in)
            data = self.rng.uniform(-bound, bound, size=shape)
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = Tensor(data.astype(ad.default_dtype()), requires_grad=True, name=name)

    def conv(self, name, cin, cout, k):
        self.add(f"{name}.weight", (cout, cin, k, k), fan_in=cin * k * k)
        self.add(f"{name}.bias", (cout,), value=0.0)

    def norm(self, name, c):
        self.add(f"{name}.weight", (c,), value=1.0)
        self.add(f"{name}.bias", (c,), value=0.0)

    def linear(self, name, cin, cout):
        self.add(f"{name}.weight", (cout, cin), fan_in=cin)
        self.add(f"{name}.bias", (cout,), value=0.0)


def build_model(cfg: ModelConfig, seed: int = 0, zero_head: bool = False) -> dict[str, Tensor]:
    """Deterministic parameter set for ``cfg``. ``zero_head`` makes the output exactly 0.5."""
    init = _Init(seed)
    w = cfg.widths
    init.conv("stem.conv", cfg.in_channels, w[0], 3)
    init.norm("stem.norm", w[0])
    init.conv("enc0.conv", w[0], w[0], 3)
    init.norm("enc0.norm", w[0])
    for s in range(1, cfg.n_stages):
        init.conv(f"enc{s}.down", w[s - 1], w[s], 3)
        init.norm(f"enc{s}.down_norm", w[s])
        init.conv(f"enc{s}.conv", w[s], w[s], 3)
        init.norm(f"enc{s}.norm", w[s])
    for s in cfg.attention_stages:
        c = w[s]
        init.norm(f"attn{s}.norm", c)
        for proj in ("q", "k", "v", "o"):
            init.linear(f"attn{s}.{proj}", c, c)
        init.norm(f"mlp{s}.norm", c)
        init.conv(f"mlp{s}.fc1", c, 2 * c, 1)
        init.conv(f"mlp{s}.fc2", 2 * c, c, 1)
    for s in range(cfg.n_stages - 2, -1, -1):
        c = w[s]
        init.conv(f"dec{s}.up", w[s + 1], c, 1)
        init.conv(f"dec{s}.gate_up", c, c, 1)
        init.conv(f"dec{s}.gate_skip", c, c, 1)
        for k in cfg.decoder_kernels:
            init.add(f"dec{s}.dw{k}.weight", (c, 1, k, k), fan_in=k * k)
            init.add(f"dec{s}.dw{k}.bias", (c,), value=0.0)
        init.conv(f"dec{s}.pw", c, c, 1)
        init.norm(f"dec{s}.norm", c)
        hidden = max(c // 4, 4)
        init.linear(f"dec{s}.ca1", c, hidden)
        init.linear(f"dec{s}.ca2", hidden, c)
    if zero_head:
        init.add("head.conv.weight", (1, w[0], 1, 1), value=0.0)
        init.add("head.conv.bias", (1,), value=0.0)
    else:
        init.conv("head.conv", w[0], 1, 1)
    return init.params


def parameter_count(params: dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))


def _conv(p, name, x, stride=1):
    return ad.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride)


def _gn(p, name, x, groups=None):
    c = x.shape[1]
    return ad.group_norm(x, groups or _groups(c), p[f"{name}.weight"], p[f"{name}.bias"])


def _multiscale(p, s, x, kernels):
    # parallel depthwise convs with 'same' padding equal one conv with the summed, centred kernels
    kmax = kernels[-1]
    weight, bias = None, None
    for k in kernels:
        wk = ad.pad2d(p[f"dec{s}.dw{k}.weight"], (kmax - k) // 2)
        weight = wk if weight is None else weight + wk
        bk = p[f"dec{s}.dw{k}.bias"]
        bias = bk if bias is None else bias + bk
    return ad.depthwise_conv2d(x, weight, bias)


def forward(params: dict[str, Tensor], x: Tensor, cfg: ModelConfig) -> Tensor:
    """[N, C, H, W] features -> [N, 1, H, W] values in [0, 1]."""
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ad.ShapeError(f"model expects [N, {cfg.in_channels}, H, W], got {x.shape}")
    cfg.check_input(x.shape[2], x.shape[3])
    p = params
    h = ad.gelu(_gn(p, "stem.norm", _conv(p, "stem.conv", x)))
    h = ad.gelu(_gn(p, "enc0.norm", _conv(p, "enc0.conv", h)))
    skips = [h]
    for s in range(1, cfg.n_stages):
        h = ad.gelu(_gn(p, f"enc{s}.down_norm", _conv(p, f"enc{s}.down", h, stride=2)))
        h = ad.gelu(_gn(p, f"enc{s}.norm", _conv(p, f"enc{s}.conv", h)))
        if s in cfg.attention_stages:
            h = _transformer_block(p, s, h, cfg.heads)
        skips.append(h)
    for s in range(cfg.n_stages - 2, -1, -1):
        skip = skips[s]
        up = _conv(p, f"dec{s}.up", ad.upsample_nearest(h, 2))
        gate = ad.sigmoid(_conv(p, f"dec{s}.gate_up", up) + _conv(p, f"dec{s}.gate_skip", skip))
        h = up + skip * gate
        m = ad.gelu(_multiscale(p, s, h, cfg.decoder_kernels))
        h = h + ad.gelu(_gn(p, f"dec{s}.norm", _conv(p, f"dec{s}.pw", m)))
        squeeze = ad.gelu(ad.linear(ad.global_avg_pool(h), p[f"dec{s}.ca1.weight"], p[f"dec{s}.ca1.bias"]))
        h = ad.scale_channels(h, ad.sigmoid(ad.linear(squeeze, p[f"dec{s}.ca2.weight"], p[f"dec{s}.ca2.bias"])))
    return ad.sigmoid(_conv(p, "head.conv", h))


def _transformer_block(p, s, h, heads):
    n, c, hh, ww = h.shape
    z = _gn(p, f"attn{s}.norm", h, groups=1)
    tokens = ad.transpose(ad.reshape(z, (n, c, hh * ww)), (0, 2, 1))
    names = [p[f"attn{s}.{proj}.{kind}"] for proj in ("q", "k", "v", "o") for kind in ("weight", "bias")]
    mixed = ad.scaled_dot_attention(tokens, *names, heads=heads)
    h = h + ad.reshape(ad.transpose(mixed, (0, 2, 1)), (n, c, hh, ww))
    z = _gn(p, f"mlp{s}.norm", h, groups=1)
    return h + _conv(p, f"mlp{s}.fc2", ad.gelu(_conv(p, f"mlp{s}.fc1", z)))


# ---------------------------------------------------------------------------
# stage models and pathloss prediction

@dataclass
class StageModel:
    params: dict[str, Tensor]
    cfg: ModelConfig
    fine: bool = False
    feature_cfg: FeatureConfig = field(default_factory=FeatureConfig)


def fine_combine(coarse_norm: Tensor, fine_out: Tensor) -> Tensor:
    """Bounded residual: clamp01(coarse + 2 (fine - 0.5))."""
    return ad.clamp(coarse_norm + ad.scale(fine_out + (-0.5), 2.0), 0.0, 1.0)


def run_normalized(model: StageModel, stacks: np.ndarray) -> np.ndarray:
    """Forward a batch of input stacks [N, C, H, W] without recording; returns [N, H, W]."""
    return forward(model.params, Tensor(stacks), model.cfg).data[:, 0].astype(np.float64)


def predict_normalized(scene, coarse: StageModel, fine: StageModel | None = None) -> dict[str, np.ndarray]:
    """Normalized coarse (and fine) maps for one scene."""
    feats = assemble_features(scene, coarse.feature_cfg)
    coarse_norm = run_normalized(coarse, feats.data[None])[0]
    out = {"coarse": coarse_norm}
    if fine is not None:
        fine_feats = assemble_features(scene, fine.feature_cfg, coarse_pred=coarse_norm)
        f = forward(fine.params, Tensor(fine_feats.data[None]), fine.cfg)
        out["fine"] = fine_combine(Tensor(coarse_norm[None, None]), f).data[0, 0].astype(np.float64)
    return out


def predict_pathloss(scene, coarse: StageModel, norm: NormalizationSpec,
                     fine: StageModel | None = None) -> np.ndarray:
    """Predicted pathloss in dB: coarse map, or coarse plus the fine residual."""
    maps = predict_normalized(scene, coarse, fine)
    return denormalize(maps["fine" if fine is not None else "coarse"], norm)


__all__ = ["ModelConfig", "StageModel", "build_model", "forward", "fine_combine", "parameter_count",
           "predict_pathloss", "predict_normalized", "run_normalized", "normalize"]
