"""Orderless pooling encoders built on the autodiff core.

Location features are tensors of shape ``(L, C)`` or batched ``(B, L, C)``:
one row per spatial location, flattened row-major from ``H x W``.  Every
encoder pools by summing over the location axis, so it is invariant to a
permutation of the rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import AlignmentError, ConfigError, ShapeError
from .tensor import Tensor, make_node, matmul_ascending

SQRT_EPS = 1e-8
NORM_EPS = 1e-12


@dataclass
class BilinearDescriptor:
    M: int
    N: int
    vec: np.ndarray
    normalized: bool = True


# --- bilinear pooling ------------------------------------------------------

def bilinear_backward(A: np.ndarray, B: np.ndarray, dl_dx: np.ndarray):
    """Closed-form gradients of ``x = A^T B``: ``(B dl_dx^T, A dl_dx)``."""
    if A.shape[:-1] != B.shape[:-1]:
        raise ShapeError(f"bilinear_backward: location dims {A.shape} and {B.shape} differ")
    if dl_dx.shape != A.shape[:-2] + (A.shape[-1], B.shape[-1]):
        raise ShapeError(f"bilinear_backward: gradient dims {dl_dx.shape} do not match")
    return (matmul_ascending(B, np.swapaxes(dl_dx, -1, -2)),
            matmul_ascending(A, dl_dx))


def bilinear_pool(A: Tensor, B: Tensor) -> Tensor:
    """Sum over locations of per-location outer products, i.e. ``A^T B`` (M x N)."""
    if A.ndim < 2 or A.shape[:-1] != B.shape[:-1]:
        raise ShapeError(f"bilinear_pool: streams {A.shape} and {B.shape} "
                         "must share location count (align first)")
    a, b = A.data, B.data
    x = matmul_ascending(np.swapaxes(a, -1, -2), b)

    def backward_fn(g):
        # looked up at call time so the closed form can be swapped in tests
        return bilinear_backward(a, b, g)

    return make_node(x, (A, B), backward_fn, "bilinear_pool")


# --- normalization ---------------------------------------------------------

def signed_sqrt(v: Tensor) -> Tensor:
    x = v.data
    y = np.sign(x) * np.sqrt(np.abs(x))

    def backward_fn(g):
        return (g / (2.0 * np.sqrt(np.maximum(np.abs(x), SQRT_EPS))),)

    return make_node(y, (v,), backward_fn, "signed_sqrt")


def l2_normalize(v: Tensor) -> Tensor:
    """Scale each row (last axis) to unit norm; rows with norm <= 1e-12 pass through."""
    x = v.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    small = n <= NORM_EPS
    safe = np.where(small, 1.0, n)
    y = np.where(small, x, x / safe)

    def backward_fn(g):
        proj = g - y * (g * y).sum(axis=-1, keepdims=True)
        return (np.where(small, g, proj / safe),)

    return make_node(y, (v,), backward_fn, "l2_normalize")


def normalize_descriptor(x: Tensor) -> Tensor:
    """Flatten the trailing pooled block(s) to a vector, then signed sqrt and l2."""
    return l2_normalize(signed_sqrt(x))


def flatten_pooled(x: Tensor, batched: bool) -> Tensor:
    if batched:
        return T.reshape(x, (x.shape[0], -1))
    return T.reshape(x, (-1,))


# --- codebooks and soft assignment -----------------------------------------

@dataclass
class Codebook:
    """Centers ``mu`` (k x d) with scale ``gamma`` and the linear assignment layer.

    In tied mode ``w = 2 gamma mu`` and ``b = -gamma |mu|^2`` are recomputed from
    ``mu`` inside the graph.  In untied mode ``w`` and ``b`` are free parameters
    and ``mu`` only enters through the residuals.
    """
    mu: Tensor
    gamma: float
    tied: bool = False
    w: Optional[Tensor] = None
    b: Optional[Tensor] = None

    @classmethod
    def from_centers(cls, mu, gamma: float, tied: bool = False,
                     requires_grad: bool = False) -> "Codebook":
        mu = np.array(mu, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        if gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {gamma}")
        cb = cls(Tensor(mu, requires_grad=requires_grad), float(gamma), tied)
        if not tied:
            cb.w = Tensor(2.0 * gamma * mu, requires_grad=requires_grad)
            cb.b = Tensor(-gamma * (mu * mu).sum(axis=1), requires_grad=requires_grad)
        return cb

    @property
    def k(self) -> int:
        return self.mu.shape[0]

    @property
    def d(self) -> int:
        return self.mu.shape[1]

    def parameters(self) -> list:
        return [self.mu] if self.tied else [self.mu, self.w, self.b]

    def linear(self):
        """The assignment layer ``(w, b)`` as graph tensors."""
        if self.tied:
            w = T.scale(self.mu, 2.0 * self.gamma)
            b = T.scale(T.reduce(T.square(self.mu), axis=1), -self.gamma)
            return w, b
        return self.w, self.b

    def derived(self):
        """Numeric ``(w, b)`` implied by ``(mu, gamma)``."""
        mu = self.mu.data
        return 2.0 * self.gamma * mu, -self.gamma * (mu * mu).sum(axis=1)


def _check_dim(x: Tensor, cb: Codebook, op: str) -> None:
    if x.shape[-1] != cb.d:
        raise ShapeError(f"{op}: feature dim {x.shape[-1]} != codebook dim {cb.d}")


def soft_assign(x: Tensor, cb: Codebook) -> Tensor:
    """Softmax over components of ``w_k^T x + b_k``; accepts ``(..., d)`` inputs."""
    _check_dim(x, cb, "soft_assign")
    lead = x.shape[:-1]
    x2 = T.reshape(x, (-1, cb.d))
    w, b = cb.linear()
    logits = T.matmul(x2, w, transpose_b=True)
    logits = T.add(logits, T.broadcast_to(T.reshape(b, (1, cb.k)), logits.shape))
    return T.reshape(T.softmax(logits, axis=-1), lead + (cb.k,))


def soft_assign_distance(x: np.ndarray, mu: np.ndarray, gamma: float) -> np.ndarray:
    """Reference form: softmax over k of ``-gamma |x - mu_k|^2`` (numpy only)."""
    d2 = ((np.asarray(x)[..., None, :] - mu) ** 2).sum(axis=-1)
    z = -gamma * d2
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _lead_broadcast(t: Tensor, lead: tuple) -> Tensor:
    """Repeat a parameter across leading batch axes."""
    if not lead:
        return t
    return T.broadcast_to(T.reshape(t, (1,) * len(lead) + t.shape), lead + t.shape)


def _vlad_terms(F: Tensor, cb: Codebook):
    _check_dim(F, cb, "encode")
    eta = soft_assign(F, cb)                                  # (..., L, k)
    first = T.matmul(eta, F, transpose_a=True)                # (..., k, d): sum eta x
    lead = F.shape[:-2]
    mass = T.reduce(eta, axis=-2)                             # (..., k)
    mass_b = T.broadcast_to(T.reshape(mass, lead + (cb.k, 1)), lead + (cb.k, cb.d))
    mu_b = _lead_broadcast(cb.mu, lead)
    return eta, first, mass_b, mu_b


def netvlad_encode(F: Tensor, cb: Codebook) -> Tensor:
    """Row k is ``sum_x eta_k(x) (x - mu_k)``; output ``(..., k, d)``."""
    _, first, mass_b, mu_b = _vlad_terms(F, cb)
    return T.sub(first, T.mul(mass_b, mu_b))


def netfv_encode(F: Tensor, cb: Codebook) -> Tensor:
    """Row k is ``sum_x eta_k(x) [x - mu_k, (x - mu_k)^2]``; output ``(..., k, 2d)``."""
    eta, first, mass_b, mu_b = _vlad_terms(F, cb)
    vlad = T.sub(first, T.mul(mass_b, mu_b))
    # sum eta (x - mu)^2 = sum eta x^2 - 2 mu * sum eta x + mass * mu^2
    sq = T.matmul(eta, T.square(F), transpose_a=True)
    second = T.add(T.sub(sq, T.scale(T.mul(first, mu_b), 2.0)),
                   T.mul(mass_b, T.square(mu_b)))
    return T.concat([vlad, second], axis=-1)


def netbovw_encode(F: Tensor, cb: Codebook) -> Tensor:
    """Sum of soft assignments over locations; output ``(..., k)``."""
    _check_dim(F, cb, "netbovw_encode")
    return T.reduce(soft_assign(F, cb), axis=-2)


def hard_vlad_encode(F, mu) -> np.ndarray:
    """Classical VLAD with nearest-center assignment (ties go to the lowest index)."""
    F = np.asarray(F.data if isinstance(F, Tensor) else F, dtype=np.float64)
    mu = np.asarray(mu.data if isinstance(mu, Tensor) else mu, dtype=np.float64)
    if mu.ndim == 1:
        mu = mu[:, None]
    if F.shape[-1] != mu.shape[1]:
        raise ShapeError(f"hard_vlad_encode: feature dim {F.shape[-1]} != {mu.shape[1]}")
    out = np.zeros(mu.shape)
    for x in F.reshape(-1, mu.shape[1]):
        d2 = ((x - mu) ** 2).sum(axis=1)
        k = int(np.argmin(d2))
        out[k] += x - mu[k]
    return out


# --- dimensionality reduction ----------------------------------------------

@dataclass
class ProjectionMatrix:
    P: Tensor
    init_mode: str = "pca"

    @property
    def in_dim(self) -> int:
        return self.P.shape[0]

    @property
    def out_dim(self) -> int:
        return self.P.shape[1]


def pca_projection(samples: np.ndarray, out_dim: int, requires_grad: bool = False
                   ) -> ProjectionMatrix:
    """Top principal directions of ``samples`` (n x d) as orthonormal columns."""
    X = np.asarray(samples, dtype=np.float64)
    if out_dim > X.shape[1] or out_dim < 1:
        raise ConfigError(f"projection rank {out_dim} must lie in [1, {X.shape[1]}]")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / max(len(X) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")[:out_dim]
    P = vecs[:, order]
    # fix the sign of each column so the result is reproducible
    P *= np.where(P[np.abs(P).argmax(axis=0), range(out_dim)] < 0, -1.0, 1.0)
    return ProjectionMatrix(Tensor(P, requires_grad=requires_grad), "pca")


def random_projection(in_dim: int, out_dim: int, rng: np.random.Generator,
                      requires_grad: bool = False) -> ProjectionMatrix:
    if out_dim > in_dim or out_dim < 1:
        raise ConfigError(f"projection rank {out_dim} must lie in [1, {in_dim}]")
    q, _ = np.linalg.qr(rng.standard_normal((in_dim, out_dim)))
    return ProjectionMatrix(Tensor(q, requires_grad=requires_grad), "random")


def project_one_feature(F: Tensor, P: ProjectionMatrix) -> Tensor:
    """Project one stream's location features ``(..., L, d) -> (..., L, r)``."""
    if F.shape[-1] != P.in_dim:
        raise ShapeError(f"project_one_feature: feature dim {F.shape[-1]} != {P.in_dim}")
    lead = F.shape[:-1]
    out = T.matmul(T.reshape(F, (-1, P.in_dim)), P.P)
    return T.reshape(out, lead + (P.out_dim,))


def project_full(vec, P) -> np.ndarray:
    """Project a full descriptor ``vec^T P``."""
    vec = np.asarray(vec.data if isinstance(vec, Tensor) else vec, dtype=np.float64)
    Pm = P.P.data if isinstance(P, ProjectionMatrix) else np.asarray(P, dtype=np.float64)
    if vec.shape[-1] != Pm.shape[0]:
        raise ShapeError(f"project_full: descriptor dim {vec.shape[-1]} != {Pm.shape[0]}")
    return vec @ Pm


def kronecker_projection(P, n: int) -> np.ndarray:
    """Full-descriptor matrix equivalent to projecting stream A by ``P``.

    For ``X = F^T G`` (d x n) flattened row-major, ``vec((F P)^T G) = vec(X) (P kron I_n)``.
    """
    Pm = P.P.data if isinstance(P, ProjectionMatrix) else np.asarray(P, dtype=np.float64)
    return np.kron(Pm, np.eye(n))


# --- spatial alignment -----------------------------------------------------

def align_spatial(Fa, Fb):
    """Crop the larger of two ``H x W x C`` maps by its last row and/or column."""
    ha, wa = Fa.shape[-3], Fa.shape[-2]
    hb, wb = Fb.shape[-3], Fb.shape[-2]
    if abs(ha - hb) > 1 or abs(wa - wb) > 1:
        raise AlignmentError(f"cannot align {ha}x{wa} with {hb}x{wb}: differ by more than one")
    h, w = min(ha, hb), min(wa, wb)

    def crop(F):
        if F.shape[-3] == h and F.shape[-2] == w:
            return F
        return F[..., :h, :w, :]

    return crop(Fa), crop(Fb)


# --- multi-scale pooling ---------------------------------------------------

def admissible_scales(height: int, width: int, scales: Sequence[float],
                      receptive_field: int, max_pixels: int = 1024 ** 2) -> list:
    out = []
    for s in scales:
        h, w = int(round(height * s)), int(round(width * s))
        if min(h, w) < receptive_field or h * w > max_pixels:
            continue
        out.append((s, h, w))
    return out


def multiscale_pool(image: np.ndarray, scales: Sequence[float],
                    features_fn: Callable[[np.ndarray], Tensor],
                    encode_fn: Callable[[Tensor], Tensor], receptive_field: int,
                    max_pixels: int = 1024 ** 2, merge: bool = True,
                    normalize: bool = True) -> BilinearDescriptor:
    """Pool features extracted from several rescaled copies of ``image``.

    ``features_fn`` maps an ``H x W x 3`` image to location features ``(L, C)``
    and ``encode_fn`` sum-pools location features into a raw descriptor.  With
    ``merge`` the locations of all scales are pooled together once; otherwise
    the per-scale raw descriptors are averaged.  Normalization happens once.
    """
    from .data_io import resize_bilinear

    chosen = admissible_scales(image.shape[0], image.shape[1], scales,
                               receptive_field, max_pixels)
    if not chosen:
        raise ConfigError(f"no admissible scale among {list(scales)} for "
                          f"{image.shape[0]}x{image.shape[1]} image")
    feats = []
    for s, h, w in chosen:
        img = image if (h, w) == image.shape[:2] else resize_bilinear(image, h, w)
        feats.append(features_fn(img))
    if merge:
        raw = encode_fn(T.concat(feats, axis=0))
    else:
        per_scale = [encode_fn(f) for f in feats]
        raw = per_scale[0]
        for r in per_scale[1:]:
            raw = T.add(raw, r)
        raw = T.scale(raw, 1.0 / len(per_scale))
    M, N = (raw.shape[0], raw.shape[1]) if raw.ndim >= 2 else (raw.shape[0], 1)
    vec = T.reshape(raw, (-1,))
    if normalize:
        vec = normalize_descriptor(vec)
    return BilinearDescriptor(M, N, vec.data, normalized=normalize)


# --- codebook initialization -----------------------------------------------

def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d2 = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d2, 0.0)


def kmeans_init(features, k: int, seed: int = 0, iters: int = 100,
                tied: bool = False, requires_grad: bool = False) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding; returns a codebook.

    ``gamma`` is set to ``1 / (2 * mean squared distance to the nearest center)``
    (or 1 when that distance is zero).
    """
    X = np.asarray(features.data if isinstance(features, Tensor) else features,
                   dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if len(X) < k:
        raise ConfigError(f"need at least k={k} samples, got {len(X)}")
    rng = T.make_rng(seed)
    centers = [X[rng.integers(len(X))]]
    d2 = _sq_dists(X, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(len(X)))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, len(X) - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, _sq_dists(X, X[idx][None])[:, 0])
    C = np.array(centers)

    assign = None
    for _ in range(iters):
        D = _sq_dists(X, C)
        new = D.argmin(axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = X[assign == j]
            if len(members):
                C[j] = members.mean(axis=0)
            else:
                far = int(D[np.arange(len(X)), assign].argmax())
                C[j] = X[far]
                assign[far] = j
    nearest = _sq_dists(X, C).min(axis=1).mean()
    gamma = 1.0 / (2.0 * nearest) if nearest > 0 else 1.0
    return Codebook.from_centers(C, gamma, tied=tied, requires_grad=requires_grad)
