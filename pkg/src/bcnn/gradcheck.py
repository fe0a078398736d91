"""Finite-difference gradient checks over every differentiable op.

Each check draws a seeded random point and a fixed random linear read-out
``sum(R * op(x))`` so that vector-valued ops reduce to a scalar.  Points
closer than ``KINK_MARGIN`` to a relu kink, max-pool tie or the origin of
the signed square root are redrawn.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import encoders as E
from . import tensor as T
from .backbone import BackboneConfig, backbone_forward, backbone_init, flatten_locations, kink_distance
from .invert import InversionConfig, LayerClassifierBank, inversion_objective, tv_prior
from .tensor import Tensor
from .train import SoftmaxHead

KINK_MARGIN = 1e-3
TOLERANCE = 1e-5
STEP = 1e-5
POINTS = 10

# (f, x0, nonsmooth-predicate or None)
Case = Tuple[Callable[[Tensor], Tensor], np.ndarray, Optional[Callable[[np.ndarray], bool]]]


def readout(y: Tensor, rng: np.random.Generator) -> Tensor:
    R = rng.standard_normal(y.shape)
    return T.reduce(T.mul(y, Tensor(R)))


def _fixed(rng, shape):
    return Tensor(rng.standard_normal(shape))


def _case_matmul(rng) -> Case:
    B = _fixed(rng, (4, 3))
    R = rng.standard_normal((5, 3))
    return (lambda x: T.reduce(T.mul(T.matmul(x, B), Tensor(R))),
            rng.standard_normal((5, 4)), None)


def _case_relu(rng) -> Case:
    R = rng.standard_normal((4, 5))
    return (lambda x: T.reduce(T.mul(T.relu(x), Tensor(R))), rng.standard_normal((4, 5)),
            lambda x: np.abs(x).min() < KINK_MARGIN)


def _case_softmax(rng) -> Case:
    R = rng.standard_normal((3, 6))
    return lambda x: T.reduce(T.mul(T.softmax(x), Tensor(R))), rng.standard_normal((3, 6)), None


def _case_log_softmax(rng) -> Case:
    R = rng.standard_normal((3, 6))
    return lambda x: T.reduce(T.mul(T.log_softmax(x), Tensor(R))), rng.standard_normal((3, 6)), None


def _case_signed_sqrt(rng) -> Case:
    R = rng.standard_normal(12)
    x0 = rng.choice([-1.0, 1.0], 12) * rng.uniform(0.05, 2.0, 12)
    return (lambda x: T.reduce(T.mul(E.signed_sqrt(x), Tensor(R))), x0,
            lambda x: np.abs(x).min() < KINK_MARGIN)


def _case_l2(rng) -> Case:
    R = rng.standard_normal(10)
    return lambda x: T.reduce(T.mul(E.l2_normalize(x), Tensor(R))), rng.standard_normal(10), None


def _codebook(rng, k=3, d=4, tied=False):
    return E.Codebook.from_centers(rng.standard_normal((k, d)), rng.uniform(0.2, 1.0), tied=tied)


def _case_soft_assign(rng) -> Case:
    cb = _codebook(rng)
    R = rng.standard_normal((5, 3))
    return (lambda x: T.reduce(T.mul(E.soft_assign(x, cb), Tensor(R))),
            rng.standard_normal((5, 4)), None)


def _case_soft_assign_centers(rng) -> Case:
    X = _fixed(rng, (5, 4))
    gamma = rng.uniform(0.2, 1.0)
    R = rng.standard_normal((5, 3))

    def f(mu):
        cb = E.Codebook(mu, gamma, tied=True)
        return T.reduce(T.mul(E.soft_assign(X, cb), Tensor(R)))

    return f, rng.standard_normal((3, 4)), None


def _case_bilinear(rng) -> Case:
    Bm = _fixed(rng, (6, 3))
    R = rng.standard_normal((4, 3))
    return (lambda a: T.reduce(T.mul(E.bilinear_pool(a, Bm), Tensor(R))),
            rng.standard_normal((6, 4)), None)


def _case_bilinear_b(rng) -> Case:
    Am = _fixed(rng, (6, 4))
    R = rng.standard_normal((4, 3))
    return (lambda b: T.reduce(T.mul(E.bilinear_pool(Am, b), Tensor(R))),
            rng.standard_normal((6, 3)), None)


def _case_bilinear_shared(rng) -> Case:
    R = rng.standard_normal((4, 4))
    return (lambda a: T.reduce(T.mul(E.bilinear_pool(a, a), Tensor(R))),
            rng.standard_normal((6, 4)), None)


def _case_encoder(encode, out_shape):
    def build(rng) -> Case:
        cb = _codebook(rng)
        R = rng.standard_normal(out_shape)
        return (lambda F: T.reduce(T.mul(encode(F, cb), Tensor(R))),
                rng.standard_normal((6, 4)), None)
    return build


def _case_netvlad_centers(rng) -> Case:
    F = _fixed(rng, (6, 4))
    gamma = rng.uniform(0.2, 1.0)
    R = rng.standard_normal((3, 4))

    def f(mu):
        return T.reduce(T.mul(E.netvlad_encode(F, E.Codebook(mu, gamma, tied=True)), Tensor(R)))

    return f, rng.standard_normal((3, 4)), None


def _case_netfv_assign_weights(rng) -> Case:
    F = _fixed(rng, (6, 4))
    cb = _codebook(rng)
    R = rng.standard_normal((3, 8))

    def f(w):
        c = E.Codebook(cb.mu, cb.gamma, tied=False, w=w, b=cb.b)
        return T.reduce(T.mul(E.netfv_encode(F, c), Tensor(R)))

    return f, cb.w.data.copy(), None


def _case_projected_bilinear(rng) -> Case:
    F = _fixed(rng, (6, 4))
    R = rng.standard_normal((2, 4))

    def f(P):
        A = E.project_one_feature(F, E.ProjectionMatrix(P))
        return T.reduce(T.mul(E.normalize_descriptor(E.bilinear_pool(A, F)), Tensor(R)))

    return f, rng.standard_normal((4, 2)), None


def _case_normalized_bilinear(rng) -> Case:
    R = rng.standard_normal(16)

    def f(F):
        return T.reduce(T.mul(E.normalize_descriptor(
            E.flatten_pooled(E.bilinear_pool(F, F), False)), Tensor(R)))

    def kink(F):
        return np.abs(F.T @ F).min() < KINK_MARGIN

    return f, rng.standard_normal((6, 4)), kink


TINY = BackboneConfig(channels=(3, 4), pools=(True, False), taps=("t1", "t2"))


def _backbone_readout(params, rng):
    R1 = rng.standard_normal((6, 6, 3))
    R2 = rng.standard_normal((3, 3, 4))

    def out(x, q=None):
        taps = backbone_forward(q or params, x, TINY)
        return T.add(T.reduce(T.mul(taps["t1"].values, Tensor(R1))),
                     T.reduce(T.mul(taps["t2"].values, Tensor(R2))))
    return out


def _backbone_kink(params):
    def near(x):
        rec = []
        backbone_forward(params, Tensor(x), TINY, record=rec)
        return kink_distance(rec) < KINK_MARGIN
    return near


def _case_backbone_input(rng) -> Case:
    params = backbone_init(TINY, int(rng.integers(1 << 30)))
    for p in params.values():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    return _backbone_readout(params, rng), rng.uniform(0, 1, (6, 6, 3)), _backbone_kink(params)


def _case_backbone_weight(name):
    def build(rng) -> Case:
        params = backbone_init(TINY, int(rng.integers(1 << 30)))
        for p in params.values():
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
        image = Tensor(rng.uniform(0, 1, (6, 6, 3)))
        read = _backbone_readout(params, rng)

        def with_w(w):
            q = dict(params)
            q[name] = w if isinstance(w, Tensor) else Tensor(w)
            return q

        def near(w):
            rec = []
            backbone_forward(with_w(w), image, TINY, record=rec)
            return kink_distance(rec) < KINK_MARGIN

        return lambda w: read(image, with_w(w)), params[name].data.copy(), near
    return build


def _case_tv(beta):
    def build(rng) -> Case:
        return (lambda x: tv_prior(x, beta), rng.uniform(0, 1, (5, 4, 3)),
                None if beta >= 2 else (lambda x: _tv_min(x) < KINK_MARGIN))
    return build


def _tv_min(x):
    dh = np.zeros_like(x)
    dv = np.zeros_like(x)
    dh[:, :-1] = x[:, 1:] - x[:, :-1]
    dv[:-1] = x[1:] - x[:-1]
    s = dh ** 2 + dv ** 2
    # the last row/column pixel has zero differences by convention; ignore it
    return float(np.sqrt(s[:-1, :-1].min()))


def _case_inversion(rng) -> Case:
    params = backbone_init(TINY, int(rng.integers(1 << 30)))
    for p in params.values():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    heads = {t: SoftmaxHead(Tensor(rng.standard_normal((TINY.tap_channels(t) ** 2, 3))),
                            Tensor(rng.standard_normal(3)))
             for t in TINY.taps}
    bank = LayerClassifierBank(heads, 3)
    cfg = InversionConfig(gamma=1e-2, beta=2.0, layers=TINY.taps, height=6, width=6)
    target = int(rng.integers(3))

    def f(x):
        return inversion_objective(x, params, TINY, bank, target, cfg)

    def near(x):
        rec = []
        taps = backbone_forward(params, Tensor(x), TINY, record=rec)
        if kink_distance(rec) < KINK_MARGIN:
            return True
        for t in TINY.taps:
            F = flatten_locations(taps[t]).data
            if np.abs(F.T @ F).min() < KINK_MARGIN:
                return True
        return False

    return f, rng.uniform(0, 1, (6, 6, 3)), near


CHECKS: Dict[str, Callable[[np.random.Generator], Case]] = {
    "matmul": _case_matmul,
    "relu": _case_relu,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "signed_sqrt": _case_signed_sqrt,
    "l2_normalize": _case_l2,
    "soft_assign/x": _case_soft_assign,
    "soft_assign/centers": _case_soft_assign_centers,
    "bilinear/A": _case_bilinear,
    "bilinear/B": _case_bilinear_b,
    "bilinear/shared": _case_bilinear_shared,
    "bilinear/normalized": _case_normalized_bilinear,
    "bilinear/projected": _case_projected_bilinear,
    "netvlad/F": _case_encoder(E.netvlad_encode, (3, 4)),
    "netvlad/centers": _case_netvlad_centers,
    "netfv/F": _case_encoder(E.netfv_encode, (3, 8)),
    "netfv/assign": _case_netfv_assign_weights,
    "netbovw/F": _case_encoder(E.netbovw_encode, (3,)),
    "backbone/input": _case_backbone_input,
    "backbone/t1/w": _case_backbone_weight("backbone/t1/w"),
    "backbone/t2/w": _case_backbone_weight("backbone/t2/w"),
    "backbone/t2/b": _case_backbone_weight("backbone/t2/b"),
    "tv_prior/beta2": _case_tv(2.0),
    "tv_prior/beta1.5": _case_tv(1.5),
    "inversion_objective": _case_inversion,
}


@dataclass
class CheckRow:
    name: str
    points: int
    skipped: int
    max_rel_err: float
    passed: bool
    seconds: float

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name}\t{self.points}\t{self.skipped}\t{self.max_rel_err:.3e}\t{status}"


HEADER = "op\tpoints\tskipped\tmax_rel_err\tstatus"


def run_check(name: str, seed: int = 0, points: int = POINTS, max_draws: int = 200) -> CheckRow:
    build = CHECKS[name]
    rng = T.make_rng(seed * 1_000_003 + list(CHECKS).index(name))
    worst, valid, skipped = 0.0, 0, 0
    t0 = time.perf_counter()
    for _ in range(max_draws):
        if valid == points:
            break
        f, x0, kink = build(rng)
        rep = T.finite_diff_check(f, x0, step=STEP, tolerance=TOLERANCE, nonsmooth=kink)
        if rep.skipped:
            skipped += 1
            continue
        valid += 1
        worst = max(worst, rep.max_rel_err)
    ok = valid == points and worst <= TOLERANCE
    return CheckRow(name, valid, skipped, worst, ok, time.perf_counter() - t0)


def run_suite(seed: int = 0, names=None, emit: Optional[Callable[[str], None]] = None) -> List[CheckRow]:
    rows = []
    if emit:
        emit(HEADER)
    for name in names or CHECKS:
        row = run_check(name, seed)
        rows.append(row)
        if emit:
            emit(row.line())
    return rows
