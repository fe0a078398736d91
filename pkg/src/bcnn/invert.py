"""Category pre-images: optimize pixels so per-layer bilinear classifiers agree on a class."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence

import numpy as np

from . import encoders as E
from . import tensor as T
from .backbone import BackboneConfig, FeatureMap, backbone_forward, flatten_locations
from .errors import ConfigError, ContractError
from .tensor import Tensor
from .train import SoftmaxHead, fit_logistic_head


@dataclass
class InversionConfig:
    gamma: float = 1e-8
    beta: float = 2.0
    layers: tuple = ("t2", "t3", "t4")
    max_iters: int = 200
    height: int = 64
    width: int = 64
    seed: int = 0
    init_step: float = 0.05      # first trial step, as max pixel change
    armijo: float = 1e-4

    def validate(self) -> None:
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.beta <= 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")
        if not self.layers:
            raise ConfigError("at least one layer is required")
        if self.height < 1 or self.width < 1:
            raise ConfigError("image extents must be positive")


@dataclass
class LayerClassifierBank:
    heads: Dict[str, SoftmaxHead]
    num_classes: int

    def check(self, layers: Sequence[str]) -> None:
        missing = [l for l in layers if l not in self.heads]
        if missing:
            raise ConfigError(f"no classifier for layer(s) {missing}")


def layer_descriptor(F: Tensor) -> Tensor:
    """Mean-pooled, normalized bilinear descriptor of ``(L, C)`` location features."""
    x = T.scale(E.bilinear_pool(F, F), 1.0 / F.shape[-2])
    return E.normalize_descriptor(E.flatten_pooled(x, F.ndim == 3))


def aggregate_bilinear_per_layer(taps: Mapping[str, object]) -> Dict[str, Tensor]:
    """Per tap: average of per-location outer products, then signed sqrt and l2."""
    out = {}
    for name, fm in taps.items():
        v = fm.values if isinstance(fm, FeatureMap) else fm
        if not isinstance(v, Tensor):
            v = Tensor(np.asarray(v, dtype=np.float64))
        out[name] = layer_descriptor(flatten_locations(v) if v.ndim >= 3 else v)
    return out


def tv_prior(image, beta: float = 2.0) -> Tensor:
    """``sum_ij ((x[i,j+1]-x[i,j])^2 + (x[i+1,j]-x[i,j])^2)^(beta/2)`` summed over channels.

    Differences that would reach past the last row or column are taken as 0.
    """
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
    if x.ndim == 2:
        x = T.reshape(x, x.shape + (1,))
    H, W, C = x.shape
    zc = Tensor(np.zeros((H, 1, C)))
    zr = Tensor(np.zeros((1, W, C)))
    dh = T.concat([T.sub(x[:, 1:, :], x[:, :-1, :]), zc], axis=1) if W > 1 else Tensor(np.zeros((H, W, C)))
    dv = T.concat([T.sub(x[1:, :, :], x[:-1, :, :]), zr], axis=0) if H > 1 else Tensor(np.zeros((H, W, C)))
    s = T.add(T.square(dh), T.square(dv))
    if beta != 2.0:
        s = T.power(s, beta / 2.0)
    return T.reduce(s)


def train_layer_bank(params: Mapping[str, Tensor], bcfg: BackboneConfig, images: np.ndarray,
                     labels, layers: Sequence[str], num_classes: int, max_iter: int = 300,
                     l2: float = 1e-6, chunk: int = 64) -> LayerClassifierBank:
    """Fit one logistic-regression head per layer on mean-pooled bilinear descriptors."""
    feats = {l: [] for l in layers}
    for s in range(0, len(images), chunk):
        taps = backbone_forward(params, images[s:s + chunk], bcfg, taps=tuple(layers))
        for l, d in aggregate_bilinear_per_layer(taps).items():
            feats[l].append(d.data)
    heads = {}
    for l in layers:
        X = np.concatenate(feats[l])
        heads[l] = fit_logistic_head(X, np.asarray(labels), num_classes, max_iter, l2)
    return LayerClassifierBank(heads, num_classes)


def layer_log_posteriors(x: Tensor, params, bcfg: BackboneConfig, bank: LayerClassifierBank,
                         layers: Sequence[str]) -> Dict[str, Tensor]:
    taps = backbone_forward(params, x, bcfg, taps=tuple(layers))
    descs = aggregate_bilinear_per_layer(taps)
    return {l: T.log_softmax(bank.heads[l].logits(descs[l]), axis=-1) for l in layers}


def inversion_objective(x: Tensor, params, bcfg: BackboneConfig, bank: LayerClassifierBank,
                        target: int, cfg: InversionConfig) -> Tensor:
    """Sum over layers of the target's NLL plus ``gamma * tv_prior``."""
    bank.check(cfg.layers)
    if not 0 <= target < bank.num_classes:
        raise ConfigError(f"target class {target} out of range [0, {bank.num_classes})")
    logp = layer_log_posteriors(x, params, bcfg, bank, cfg.layers)
    onehot = np.zeros(bank.num_classes)
    onehot[target] = 1.0
    total = None
    for l in cfg.layers:
        nll = T.scale(T.reduce(T.mul(logp[l], Tensor(onehot))), -1.0)
        total = nll if total is None else T.add(total, nll)
    if cfg.gamma:
        total = T.add(total, T.scale(tv_prior(x, cfg.beta), cfg.gamma))
    return total


def target_posteriors(image: np.ndarray, params, bcfg, bank, target: int,
                      layers: Sequence[str]) -> Dict[str, float]:
    logp = layer_log_posteriors(Tensor(image), params, bcfg, bank, layers)
    return {l: float(np.exp(v.data[target])) for l, v in logp.items()}


@dataclass
class InversionResult:
    image: np.ndarray
    trace: List[float] = field(default_factory=list)


def invert_category(params, bcfg: BackboneConfig, bank: LayerClassifierBank, target: int,
                    cfg: InversionConfig) -> InversionResult:
    """Projected gradient descent with backtracking from seeded noise in [0.4, 0.6].

    Every accepted step satisfies an Armijo decrease, so the trace never
    increases.  Pixels are clamped to [0, 1] after each step.
    """
    cfg.validate()
    bank.check(cfg.layers)
    # only the pixels are optimized; constant copies keep the graph small
    params = {n: Tensor(p.data) for n, p in params.items()}
    bank = LayerClassifierBank({l: SoftmaxHead(Tensor(h.W.data), Tensor(h.bias.data))
                                for l, h in bank.heads.items()}, bank.num_classes)
    rng = T.make_rng(cfg.seed)
    x = rng.uniform(0.4, 0.6, size=(cfg.height, cfg.width, bcfg.in_channels))

    def value_grad(img):
        leaf = Tensor(img, requires_grad=True)
        f = inversion_objective(leaf, params, bcfg, bank, target, cfg)
        val = f.item()
        if not np.isfinite(val):
            raise ContractError(f"non-finite inversion objective {val} (target {target})")
        (g,) = T.backward(f, [leaf])
        return val, g

    def value(img):
        val = inversion_objective(Tensor(img), params, bcfg, bank, target, cfg).item()
        if not np.isfinite(val):
            raise ContractError(f"non-finite inversion objective {val} (target {target})")
        return val

    f, g = value_grad(x) if cfg.max_iters else (value(x), None)
    trace = [f]
    step = None
    for _ in range(cfg.max_iters):
        gmax = float(np.abs(g).max())
        if gmax == 0.0:
            break
        if step is None:
            step = cfg.init_step / gmax
        accepted = False
        for _ in range(40):
            cand = np.clip(x - step * g, 0.0, 1.0)
            fc = value(cand)
            if fc <= f - cfg.armijo * float((g * (x - cand)).sum()) and fc <= f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        x = cand
        f, g = value_grad(x)
        trace.append(f)
        step *= 2.0
    return InversionResult(x, trace)
