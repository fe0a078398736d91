"""Models, classification heads, two-step training and evaluation."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import encoders as E
from . import tensor as T
from .backbone import BackboneConfig, backbone_forward, backbone_init, flatten_locations
from .data_io import hflip
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

try:
    from sklearn.exceptions import ConvergenceWarning
except ImportError:  # pragma: no cover
    ConvergenceWarning = Warning

logger = logging.getLogger(__name__)

ENCODERS = ("bilinear", "netvlad", "netfv", "netbovw", "fc-baseline")


@dataclass
class TrainConfig:
    lr: float = 0.001
    lr_head: float = 10.0
    momentum: float = 0.9
    epochs_head: int = 1000            # L-BFGS iterations cap (sgd solver: epochs)
    epochs_finetune: int = 10
    batch_size: int = 32
    head_batch_size: int = 0          # 0: full batch (sgd head solver only)
    head_solver: str = "lbfgs"        # "lbfgs" (convex logistic regression) or "sgd"
    head_l2: float = 1e-6
    c_svm: float = 1.0
    svm_loss: str = "sum"
    flip_augment: bool = True
    patience: int = 5
    frozen: tuple = ()                # parameter-name prefixes kept fixed in phase 2
    seed: int = 0

    def validate(self) -> None:
        for name in ("lr", "lr_head", "c_svm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        for name in ("epochs_head", "epochs_finetune", "patience", "head_batch_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.head_solver not in ("lbfgs", "sgd"):
            raise ConfigError(f"unknown head_solver {self.head_solver!r}")
        if self.svm_loss not in ("sum", "mean"):
            raise ConfigError(f"unknown svm_loss {self.svm_loss!r}")
        if self.head_l2 < 0:
            raise ConfigError("head_l2 must be >= 0")


@dataclass
class ModelConfig:
    num_classes: int
    encoder: str = "bilinear"
    tap: str = "t3"
    k: int | None = None              # codebook size; None picks 64 (256 for netbovw)
    rank: int = 0                     # bilinear: project one stream to this rank (0 = off)
    tied: bool = False
    scales: tuple = (1.0,)
    merge_scales: bool = True
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    gamma: float = 0.0                # codebook scale override; 0 keeps the k-means estimate

    def __post_init__(self):
        if self.k is None:
            self.k = 256 if self.encoder == "netbovw" else 64

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"unknown encoder {self.encoder!r}; choose from {ENCODERS}")
        if self.tap not in self.backbone.stage_names:
            raise ConfigError(f"tap {self.tap!r} not in backbone stages")
        if self.encoder in ("netvlad", "netfv", "netbovw") and self.k < 1:
            raise ConfigError(f"k must be >= 1 for {self.encoder}, got {self.k}")
        C = self.backbone.tap_channels(self.tap)
        if self.rank < 0 or self.rank > C:
            raise ConfigError(f"rank must lie in [0, {C}]")
        if not self.scales:
            raise ConfigError("scales must be nonempty")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")

    @property
    def channels(self) -> int:
        return self.backbone.tap_channels(self.tap)

    @property
    def descriptor_dim(self) -> int:
        C = self.channels
        return {"bilinear": (self.rank or C) * C, "netvlad": self.k * C,
                "netfv": 2 * self.k * C, "netbovw": self.k, "fc-baseline": C}[self.encoder]


# --- heads -----------------------------------------------------------------

@dataclass
class SoftmaxHead:
    W: Tensor        # D x K
    bias: Tensor     # K

    @classmethod
    def init(cls, dim: int, num_classes: int, rng: np.random.Generator) -> "SoftmaxHead":
        return cls(Tensor(rng.standard_normal((dim, num_classes)) * 0.01, requires_grad=True),
                   Tensor(np.zeros(num_classes), requires_grad=True))

    def logits(self, d: Tensor) -> Tensor:
        batched = d.ndim == 2
        d2 = d if batched else T.reshape(d, (1, -1))
        if d2.shape[1] != self.W.shape[0]:
            raise ShapeError(f"head expects {self.W.shape[0]}-dim descriptors, got {d2.shape[1]}")
        z = T.matmul(d2, self.W)
        z = T.add(z, T.broadcast_to(T.reshape(self.bias, (1, -1)), z.shape))
        return z if batched else T.reshape(z, (-1,))


def softmax_loss(head: SoftmaxHead, descriptor: Tensor, label) -> Tensor:
    """Mean negative log-likelihood of ``label`` under ``softmax(W^T d + bias)``."""
    z = head.logits(descriptor)
    z2 = z if z.ndim == 2 else T.reshape(z, (1, -1))
    labels = np.atleast_1d(np.asarray(label, dtype=int))
    K = z2.shape[1]
    if len(labels) != z2.shape[0]:
        raise ShapeError(f"{len(labels)} labels for {z2.shape[0]} descriptors")
    if labels.min() < 0 or labels.max() >= K:
        raise ContractError(f"label out of range [0, {K})")
    onehot = np.zeros(z2.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    ll = T.reduce(T.mul(T.log_softmax(z2, axis=1), Tensor(onehot)))
    return T.scale(ll, -1.0 / len(labels))


def fit_softmax_head(X: np.ndarray, y: np.ndarray, num_classes: int, epochs: int,
                     lr: float, momentum: float = 0.9, batch_size: int = 0,
                     seed: int = 0, head: SoftmaxHead | None = None,
                     log: Callable | None = None) -> SoftmaxHead:
    """Train a softmax head on fixed descriptors with momentum SGD."""
    rng = T.make_rng(seed)
    head = head or SoftmaxHead.init(X.shape[1], num_classes, rng)
    opt = T.SGD([head.W, head.bias], lr=lr, momentum=momentum)
    n = len(X)
    bs = batch_size or n
    for epoch in range(epochs):
        order = np.arange(n) if bs >= n else rng.permutation(n)
        total = 0.0
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            opt.zero_grad()
            loss = softmax_loss(head, Tensor(X[idx]), y[idx])
            T.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        if log is not None:
            log(epoch, total / n)
    return head


def fit_logistic_head(X: np.ndarray, y: np.ndarray, num_classes: int, max_iter: int = 200,
                      l2: float = 1e-4, head: SoftmaxHead | None = None,
                      log: Callable | None = None) -> SoftmaxHead:
    """Multinomial logistic regression on fixed descriptors (convex; L-BFGS).

    Minimizes ``mean NLL + l2/2 |W|^2`` and writes the result into ``head``.
    """
    from scipy.optimize import minimize

    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    n, D = X.shape
    K = num_classes
    Y = np.zeros((n, K))
    Y[np.arange(n), y] = 1.0
    head = head or SoftmaxHead(Tensor(np.zeros((D, K)), requires_grad=True),
                               Tensor(np.zeros(K), requires_grad=True))

    def fg(theta):
        W = theta[:D * K].reshape(D, K)
        b = theta[D * K:]
        z = X @ W + b
        z -= z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - lse
        f = -(Y * logp).sum() / n + 0.5 * l2 * (W * W).sum()
        G = (np.exp(logp) - Y) / n
        return f, np.concatenate([(X.T @ G + l2 * W).ravel(), G.sum(axis=0)])

    it = [0]

    def callback(theta):
        if log is not None:
            head.W.data = theta[:D * K].reshape(D, K).copy()
            head.bias.data = theta[D * K:].copy()
            log(it[0], fg(theta)[0])
        it[0] += 1

    theta0 = np.concatenate([head.W.data.ravel(), head.bias.data])
    res = minimize(fg, theta0, jac=True, method="L-BFGS-B", callback=callback,
                   options={"maxiter": max_iter, "gtol": 1e-9, "ftol": 1e-12})
    head.W.data = res.x[:D * K].reshape(D, K).copy()
    head.bias.data = res.x[D * K:].copy()
    return head


# --- the model -------------------------------------------------------------

class Model:
    """Backbone + orderless encoder + optional projection + softmax head.

    Parameters live in ``params`` under names ``backbone/<stage>/{w,b}``,
    ``encoder/{mu,w,b}``, ``proj/P`` and ``head/{W,b}``.
    """

    def __init__(self, cfg: ModelConfig, params: Dict[str, Tensor]):
        cfg.validate()
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int) -> "Model":
        cfg.validate()
        params = backbone_init(cfg.backbone, seed)
        return cls(cfg, params)

    # encoder parameter views
    @property
    def codebook(self) -> E.Codebook:
        p = self.params
        cb = E.Codebook(p["encoder/mu"], float(p["encoder/gamma"].item()), self.cfg.tied)
        if not self.cfg.tied:
            cb.w, cb.b = p["encoder/w"], p["encoder/b"]
        return cb

    @property
    def head(self) -> SoftmaxHead:
        return SoftmaxHead(self.params["head/W"], self.params["head/b"])

    @property
    def has_head(self) -> bool:
        return "head/W" in self.params

    def init_encoder(self, features: np.ndarray, seed: int) -> None:
        """Initialize codebook (k-means) or projection (PCA) from location features."""
        X = features.reshape(-1, features.shape[-1])
        rng = T.make_rng(seed)
        if len(X) > 20000:
            X = X[np.sort(rng.choice(len(X), 20000, replace=False))]
        enc = self.cfg.encoder
        if enc in ("netvlad", "netfv", "netbovw"):
            cb = E.kmeans_init(X, self.cfg.k, seed=seed, tied=self.cfg.tied, requires_grad=True)
            if self.cfg.gamma > 0:
                cb = E.Codebook.from_centers(cb.mu.data, self.cfg.gamma, self.cfg.tied,
                                             requires_grad=True)
            self.params["encoder/mu"] = cb.mu
            self.params["encoder/gamma"] = Tensor(np.array([cb.gamma]))
            if not self.cfg.tied:
                self.params["encoder/w"] = cb.w
                self.params["encoder/b"] = cb.b
        elif enc == "bilinear" and self.cfg.rank:
            self.params["proj/P"] = E.pca_projection(X, self.cfg.rank, requires_grad=True).P

    def init_head(self, seed: int) -> None:
        h = SoftmaxHead.init(self.cfg.descriptor_dim, self.cfg.num_classes, T.make_rng(seed + 7919))
        self.params["head/W"], self.params["head/b"] = h.W, h.bias

    # forward pieces
    def features(self, images, start: int = 0) -> Tensor:
        """Location features ``(B, L, C)`` at the configured tap."""
        fm = backbone_forward(self.params, images, self.cfg.backbone, taps=(self.cfg.tap,),
                              start=start)[self.cfg.tap]
        return flatten_locations(fm)

    def pool(self, F: Tensor) -> Tensor:
        """Raw (unnormalized) pooled descriptor, flattened to ``(B, D)`` or ``(D,)``."""
        enc = self.cfg.encoder
        batched = F.ndim == 3
        if enc == "bilinear":
            A = F
            if self.cfg.rank:
                A = E.project_one_feature(F, E.ProjectionMatrix(self.params["proj/P"]))
            x = E.bilinear_pool(A, F)
        elif enc == "netvlad":
            x = E.netvlad_encode(F, self.codebook)
        elif enc == "netfv":
            x = E.netfv_encode(F, self.codebook)
        elif enc == "netbovw":
            x = E.netbovw_encode(F, self.codebook)
        else:
            x = T.reduce(F, axis=-2, mode="mean")
        return E.flatten_pooled(x, batched)

    def encode(self, F: Tensor) -> Tensor:
        return E.normalize_descriptor(self.pool(F))

    def descriptors(self, images: np.ndarray, chunk: int = 64) -> np.ndarray:
        if tuple(self.cfg.scales) != (1.0,):
            return np.stack([self.descriptor_multiscale(im) for im in images]) if len(images) \
                else np.zeros((0, self.cfg.descriptor_dim))
        out = []
        for s in range(0, len(images), chunk):
            out.append(self.encode(self.features(images[s:s + chunk])).data)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.descriptor_dim))

    def descriptor_multiscale(self, image: np.ndarray) -> np.ndarray:
        rf = self.cfg.backbone.receptive_field(self.cfg.tap)
        d = E.multiscale_pool(image, self.cfg.scales, lambda im: self.features(im),
                              self.pool, rf, merge=self.cfg.merge_scales)
        return d.vec

    def logits(self, images: np.ndarray) -> np.ndarray:
        return self.head.logits(Tensor(self.descriptors(images))).data

    def trainable(self, frozen: Sequence[str] = ()) -> List[str]:
        return [n for n, p in self.params.items()
                if p.requires_grad and not any(n.startswith(f) for f in frozen)]

    def state(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for n, v in state.items():
            self.params[n].data = v.copy()


# --- training --------------------------------------------------------------

def augment_flip(images: np.ndarray, labels) -> tuple:
    """Append the horizontal mirror of every image, keeping labels."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    return np.concatenate([images, hflip(images)]), np.concatenate([labels, labels])


@dataclass
class LogEntry:
    epoch: int
    phase: str
    train_loss: float
    val_acc: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.phase}\t{self.train_loss:.10g}\t{self.val_acc:.6g}"


def _first_trainable_stage(model: Model, names: Sequence[str]) -> int:
    stages = model.cfg.backbone.stage_names
    tap_idx = model.cfg.backbone.stage_index(model.cfg.tap)
    for i, s in enumerate(stages[:tap_idx + 1]):
        if any(n.startswith(f"backbone/{s}/") for n in names):
            return i
    return tap_idx + 1


def _prefix_cache(model: Model, images: np.ndarray, start: int, chunk: int = 64) -> np.ndarray:
    """Outputs of the frozen stages before ``start`` (tap features if nothing is trainable)."""
    cfg = model.cfg.backbone
    tap_idx = cfg.stage_index(model.cfg.tap)
    out = []
    for s in range(0, len(images), chunk):
        batch = images[s:s + chunk]
        if start > tap_idx:
            out.append(model.features(batch).data)
        elif start == 0:
            out.append(np.asarray(batch, dtype=np.float64))
        else:
            prev = cfg.stage_names[start - 1]
            res = backbone_forward(model.params, batch, cfg, taps=(prev,), stop_after_pool=True)
            out.append(res["_out"].values.data)
    return np.concatenate(out)


def _forward_from_cache(model: Model, x: np.ndarray, start: int) -> Tensor:
    tap_idx = model.cfg.backbone.stage_index(model.cfg.tap)
    if start > tap_idx:
        return model.encode(Tensor(x))
    return model.encode(model.features(Tensor(x), start=start))


def _accuracy_from_cache(model: Model, cache: np.ndarray, labels: np.ndarray, start: int,
                         chunk: int = 128) -> float:
    if len(labels) == 0:
        return float("nan")
    preds = []
    for s in range(0, len(cache), chunk):
        d = _forward_from_cache(model, cache[s:s + chunk], start)
        preds.append(model.head.logits(Tensor(d.data)).data.argmax(axis=1))
    return float((np.concatenate(preds) == labels).mean())


def dataset_loss(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    d = model.descriptors(images)
    return softmax_loss(model.head, Tensor(d), labels).item()


def train_two_step(model: Model, train, cfg: TrainConfig, val=None,
                   emit: Callable[[str], None] | None = None):
    """Train the head with everything else frozen, then fine-tune jointly.

    ``train`` and ``val`` are ``(images, labels)`` pairs.  Phase 2 stops early
    when validation accuracy has not improved for ``cfg.patience`` epochs and
    restores the best parameters, counting the model as it was before
    fine-tuning.  Returns ``(model, log)``.
    """
    cfg.validate()
    images, labels = train
    labels = np.asarray(labels, dtype=int)
    if len(images) == 0:
        raise ConfigError("training set is empty")
    if labels.min() < 0 or labels.max() >= model.cfg.num_classes:
        raise ConfigError("training labels out of range")
    if cfg.flip_augment:
        images, labels = augment_flip(images, labels)
    rng = T.make_rng(cfg.seed)
    log: List[LogEntry] = []

    def record(entry: LogEntry) -> None:
        log.append(entry)
        if emit is not None:
            emit(entry.line())

    if model.cfg.encoder in ("netvlad", "netfv", "netbovw") and "encoder/mu" not in model.params \
            or model.cfg.rank and "proj/P" not in model.params:
        model.init_encoder(_prefix_cache(model, images[:256], 10 ** 6), cfg.seed)
    if not model.has_head:
        model.init_head(cfg.seed)

    # phase 1: head only, on cached descriptors
    desc = model.descriptors(images)
    val_desc = model.descriptors(val[0]) if val is not None and len(val[0]) else None
    head = model.head

    def head_log(epoch, loss):
        acc = float("nan")
        if val_desc is not None:
            acc = float((head.logits(Tensor(val_desc)).data.argmax(1) == val[1]).mean())
        record(LogEntry(epoch, "head", loss, acc))

    if cfg.head_solver == "lbfgs":
        fit_logistic_head(desc, labels, model.cfg.num_classes, cfg.epochs_head, cfg.head_l2,
                          head=head, log=head_log)
    else:
        fit_softmax_head(desc, labels, model.cfg.num_classes, cfg.epochs_head, cfg.lr_head,
                         cfg.momentum, cfg.head_batch_size, cfg.seed, head=head, log=head_log)

    # phase 2: joint fine-tuning of everything not frozen
    names = model.trainable(cfg.frozen)
    if cfg.epochs_finetune == 0 or not names:
        return model, log
    start = _first_trainable_stage(model, names)
    cache = _prefix_cache(model, images, start)
    val_cache = _prefix_cache(model, val[0], start) if val_desc is not None else None
    opt = T.SGD([model.params[n] for n in names], lr=cfg.lr, momentum=cfg.momentum)
    # the phase-1 model competes too, so fine-tuning can only help on validation
    best_acc, best_state, stale = -1.0, model.state(), 0
    if val_cache is not None:
        best_acc = _accuracy_from_cache(model, val_cache, np.asarray(val[1]), start)
    n = len(labels)
    for epoch in range(cfg.epochs_finetune):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            opt.zero_grad()
            loss = softmax_loss(model.head, _forward_from_cache(model, cache[idx], start),
                                labels[idx])
            T.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        acc = float("nan")
        if val_cache is not None:
            acc = _accuracy_from_cache(model, val_cache, np.asarray(val[1]), start)
        record(LogEntry(epoch, "finetune", total / n, acc))
        if val_cache is None:
            continue
        if acc > best_acc:
            best_acc, best_state, stale = acc, model.state(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if val_cache is not None:
        model.load_state(best_state)
    return model, log


# --- linear SVMs -----------------------------------------------------------

@dataclass
class LinearSVM:
    w: np.ndarray
    b: float
    calibration: tuple = (1.0, 0.0)

    def score(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) @ self.w + self.b


def svm_train_ova(descriptors: np.ndarray, labels, C_svm: float = 1.0, loss: str = "sum",
                  tol: float = 1e-6, max_iter: int = 100000,
                  num_classes: int | None = None) -> List[LinearSVM]:
    """One-vs-all linear SVMs for ``1/2 |[w, b]|^2 + C * hinge`` (bias regularized).

    ``loss="sum"`` sums the hinge over examples (the liblinear meaning of C);
    ``loss="mean"`` averages it, which makes the solution invariant to
    duplicating the training set.  Solved in the dual by liblinear's
    coordinate descent with a fixed example order seed.
    """
    from sklearn.svm import LinearSVC

    X = np.asarray(descriptors, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if loss not in ("sum", "mean"):
        raise ConfigError(f"unknown svm loss {loss!r}")
    K = num_classes or int(labels.max()) + 1
    C = C_svm if loss == "sum" else C_svm / len(X)
    out = []
    for k in range(K):
        y = np.where(labels == k, 1, -1)
        if not (y > 0).any() or not (y < 0).any():
            raise ContractError(f"class {k}: needs at least one positive and one negative example")
        clf = LinearSVC(C=C, loss="hinge", dual=True, tol=tol, max_iter=max_iter,
                        fit_intercept=True, intercept_scaling=1.0, random_state=0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            clf.fit(X, y)
        out.append(LinearSVM(clf.coef_[0].copy(), float(clf.intercept_[0])))
    return out


def svm_calibrate(svm: LinearSVM, pos_scores, neg_scores) -> LinearSVM:
    """Fold ``a s + c`` into (w, b) so the two score medians land on +1 and -1."""
    pos, neg = np.asarray(pos_scores, float), np.asarray(neg_scores, float)
    if len(pos) == 0 or len(neg) == 0:
        raise ContractError("calibration needs positive and negative scores")
    mp, mn = float(np.median(pos)), float(np.median(neg))
    if mp == mn:
        raise ContractError("degenerate calibration: positive and negative medians coincide")
    a = 2.0 / (mp - mn)
    c = 1.0 - a * mp
    return LinearSVM(svm.w * a, svm.b * a + c, (a, c))


def svm_fit_calibrated(X: np.ndarray, labels, C_svm: float = 1.0, **kw) -> List[LinearSVM]:
    """Train one-vs-all SVMs and calibrate each on its own training scores."""
    labels = np.asarray(labels, dtype=int)
    svms = svm_train_ova(X, labels, C_svm, **kw)
    out = []
    for k, s in enumerate(svms):
        sc = s.score(X)
        out.append(svm_calibrate(s, sc[labels == k], sc[labels != k]))
    return out


def svm_scores(svms: Sequence[LinearSVM], X: np.ndarray) -> np.ndarray:
    return np.stack([s.score(X) for s in svms], axis=1)


# --- prediction and reports ------------------------------------------------

def predict_flip_average(score_fn: Callable[[np.ndarray], np.ndarray], images: np.ndarray):
    """Average class scores of each image and its mirror; returns ``(scores, argmax)``."""
    images = np.asarray(images)
    single = images.ndim == 3
    batch = images[None] if single else images
    scores = 0.5 * (score_fn(batch) + score_fn(hflip(batch)))
    if single:
        scores = scores[0]
    return scores, scores.argmax(axis=-1)


def confusion_top_pairs(predictions, labels, top_n: int | None = None) -> list:
    """Class pairs ranked by symmetric confusion count (errors i->j plus j->i)."""
    counts: Dict[tuple, int] = {}
    for p, l in zip(np.asarray(predictions, int), np.asarray(labels, int)):
        if p != l:
            key = (min(p, l), max(p, l))
            counts[key] = counts.get(key, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    ranked = [((int(i), int(j)), c) for (i, j), c in ranked]
    return ranked if top_n is None else ranked[:top_n]


@dataclass
class EvalReport:
    accuracy: float
    predictions: np.ndarray
    confused: list


def evaluate(model: Model, images: np.ndarray, labels, svms: Sequence[LinearSVM] | None = None,
             flip_avg: bool = False, top_n: int = 0) -> EvalReport:
    labels = np.asarray(labels, dtype=int)

    def score_fn(batch):
        d = model.descriptors(batch)
        if svms is not None:
            return svm_scores(svms, d)
        return model.head.logits(Tensor(d)).data

    if flip_avg:
        _, pred = predict_flip_average(score_fn, images)
    else:
        pred = score_fn(images).argmax(axis=1)
    acc = float((pred == labels).mean()) if len(labels) else float("nan")
    return EvalReport(acc, pred, confusion_top_pairs(pred, labels, top_n) if top_n else [])
