"""Small convolutional feature extractor with tapped intermediate outputs.

Each stage is ``conv 3x3 (pad 1) -> relu -> optional 2x2 max-pool``.  A tap
exposes the post-relu output of its stage (before the pool), in ``H x W x C``
layout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor, make_node


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple = (16, 32, 64, 64)
    pools: tuple = (True, True, True, False)
    taps: tuple = ("t1", "t2", "t3", "t4")
    in_channels: int = 3

    def __post_init__(self):
        if len(self.channels) == 0:
            raise ConfigError("backbone needs at least one stage")
        if len(self.pools) != len(self.channels):
            raise ConfigError(f"{len(self.channels)} stages but {len(self.pools)} pool flags")
        if any(int(c) < 1 for c in self.channels):
            raise ConfigError(f"channel counts must be positive: {self.channels}")
        if not self.taps:
            raise ConfigError("backbone needs at least one tap")
        for t in self.taps:
            if t not in self.stage_names:
                raise ConfigError(f"unknown tap {t!r}; stages are {self.stage_names}")

    @property
    def stage_names(self) -> tuple:
        return tuple(f"t{i + 1}" for i in range(len(self.channels)))

    @property
    def stages(self) -> list:
        """``(out_channels, kernel, stride, pool)`` per stage."""
        return [(c, 3, 1, p) for c, p in zip(self.channels, self.pools)]

    def stage_index(self, tap: str) -> int:
        return self.stage_names.index(tap)

    def tap_channels(self, tap: str) -> int:
        return int(self.channels[self.stage_index(tap)])

    def stride(self, tap: str) -> int:
        """Cumulative downsampling factor at ``tap``."""
        return 2 ** sum(bool(p) for p in self.pools[:self.stage_index(tap)])

    def receptive_field(self, tap: str) -> int:
        rf, jump = 1, 1
        for i, pool in enumerate(self.pools):
            rf += 2 * jump
            if i == self.stage_index(tap):
                return rf
            if pool:
                rf += jump
                jump *= 2
        raise ConfigError(tap)

    def min_input(self, taps=None) -> int:
        deepest = max(self.stage_index(t) for t in (taps or self.taps))
        return 2 ** sum(bool(p) for p in self.pools[:deepest + 1])

    def tap_size(self, tap: str, height: int, width: int) -> tuple:
        h, w = height, width
        for i, pool in enumerate(self.pools[:self.stage_index(tap)]):
            if pool:
                h, w = h // 2, w // 2
        return h, w


@dataclass
class FeatureMap:
    values: Tensor          # (H, W, C) or (B, H, W, C)
    tap: str

    @property
    def H(self) -> int:
        return self.values.shape[-3]

    @property
    def W(self) -> int:
        return self.values.shape[-2]

    @property
    def C(self) -> int:
        return self.values.shape[-1]


def backbone_init(cfg: BackboneConfig, seed: int) -> Dict[str, Tensor]:
    """He-scaled Gaussian weights, zero biases; deterministic per seed."""
    if not isinstance(cfg, BackboneConfig):
        raise ConfigError("backbone_init needs a BackboneConfig")
    rng = T.make_rng(seed)
    params = {}
    cin = cfg.in_channels
    for name, cout in zip(cfg.stage_names, cfg.channels):
        std = np.sqrt(2.0 / (9 * cin))
        params[f"backbone/{name}/w"] = Tensor(rng.standard_normal((3, 3, cin, cout)) * std,
                                              requires_grad=True)
        params[f"backbone/{name}/b"] = Tensor(np.zeros(cout), requires_grad=True)
        cin = cout
    return params


# --- primitives ------------------------------------------------------------

def _im2col(xp: np.ndarray, H: int, W: int) -> np.ndarray:
    B, C = xp.shape[0], xp.shape[-1]
    cols = np.empty((B, H, W, 9, C), dtype=xp.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, 3 * i + j, :] = xp[:, i:i + H, j:j + W, :]
    return cols.reshape(B * H * W, 9 * C)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution with zero padding 1 on ``(B, H, W, C)`` input."""
    if x.ndim != 4 or w.shape[:3] != (3, 3, x.shape[-1]):
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    B, H, W, C = x.shape
    O = w.shape[-1]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col(xp, H, W)
    wmat = w.data.reshape(9 * C, O)
    out = (cols @ wmat + b.data).reshape(B, H, W, O)

    def backward_fn(g):
        g2 = g.reshape(-1, O)
        gw = (cols.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat.T).reshape(B, H, W, 9, C)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(3):
            for j in range(3):
                gxp[:, i:i + H, j:j + W, :] += gcols[:, :, :, 3 * i + j, :]
        return gxp[:, 1:-1, 1:-1, :], gw, gb

    return make_node(out, (x, w, b), backward_fn, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max-pool with stride 2; odd trailing rows/columns are dropped."""
    B, H, W, C = x.shape
    H2, W2 = H // 2, W // 2
    if H2 < 1 or W2 < 1:
        raise ShapeError(f"maxpool2: {H}x{W} map too small to pool")
    xc = x.data[:, :2 * H2, :2 * W2, :]
    blocks = xc.reshape(B, H2, 2, W2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H2, W2, C, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, H2, W2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, 2 * H2, 2 * W2, C)
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :2 * H2, :2 * W2, :] = gb
        return (full,)

    return make_node(out, (x,), backward_fn, "maxpool2")


# --- forward ---------------------------------------------------------------

def backbone_forward(params: Mapping[str, Tensor], image, cfg: BackboneConfig,
                     taps=None, record: list | None = None,
                     start: int = 0, stop_after_pool: bool = False
                     ) -> Dict[str, FeatureMap]:
    """Run stages up to the deepest requested tap; returns tap name -> FeatureMap.

    ``image`` is ``H x W x 3`` or a batch ``B x H x W x 3``.  With ``start > 0``
    the input is instead the (pooled) output of stage ``start - 1``; this lets
    training cache a frozen prefix of the network.  If ``record`` is a list,
    each stage's pre-activation and pooled-input arrays are appended to it
    (used to locate relu/max-pool kinks in gradient checks).
    """
    taps = tuple(taps or cfg.taps)
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    cin = cfg.in_channels if start == 0 else cfg.channels[start - 1]
    if x.ndim != 4 or x.shape[-1] != cin:
        raise ShapeError(f"backbone_forward: expected (B,)H x W x {cin}, got {x.shape}")
    need = cfg.min_input(taps)
    if start == 0 and (x.shape[1] < need or x.shape[2] < need):
        raise ShapeError(f"image {x.shape[1]}x{x.shape[2]} smaller than minimum {need}x{need}")
    deepest = max(cfg.stage_index(t) for t in taps)
    out = {}
    for i, name in enumerate(cfg.stage_names[:deepest + 1]):
        if i < start:
            continue
        z = conv2d(x, params[f"backbone/{name}/w"], params[f"backbone/{name}/b"])
        x = T.relu(z)
        if record is not None:
            record.append(("relu", z.data))
        if name in taps:
            v = T.reshape(x, x.shape[1:]) if single else x
            out[name] = FeatureMap(v, name)
        if cfg.pools[i] and (i < deepest or stop_after_pool):
            if record is not None:
                record.append(("maxpool", x.data))
            x = maxpool2(x)
    if stop_after_pool:
        out["_out"] = FeatureMap(x, "_out")
    return out


def flatten_locations(fm) -> Tensor:
    """``(..., H, W, C) -> (..., H*W, C)`` with row-major location order."""
    v = fm.values if isinstance(fm, FeatureMap) else fm
    return T.reshape(v, v.shape[:-3] + (v.shape[-3] * v.shape[-2], v.shape[-1]))


def unflatten_locations(F: Tensor, H: int, W: int) -> Tensor:
    if F.shape[-2] != H * W:
        raise ShapeError(f"cannot unflatten {F.shape[-2]} locations to {H}x{W}")
    return T.reshape(F, F.shape[:-2] + (H, W, F.shape[-1]))


def kink_distance(record: list) -> float:
    """Smallest distance to a relu kink or a max-pool tie in a recorded forward."""
    best = np.inf
    for kind, arr in record:
        if kind == "relu":
            best = min(best, float(np.abs(arr).min()))
        else:
            B, H, W, C = arr.shape
            H2, W2 = H // 2, W // 2
            blocks = arr[:, :2 * H2, :2 * W2, :].reshape(B, H2, 2, W2, 2, C)
            blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(-1, 4)
            s = np.sort(blocks, axis=1)
            live = s[:, -1] > 0          # all-zero windows carry no gradient
            if live.any():
                best = min(best, float((s[live, -1] - s[live, -2]).min()))
    return best
