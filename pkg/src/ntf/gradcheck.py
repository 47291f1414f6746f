"""Finite-difference verification of every loss on random 64-bit batches.

Each case draws raw feature matrices, maps them to the unit sphere with
``l2_normalize`` (so the probe stays a smooth function of free
coordinates), evaluates one loss, and compares tape gradients against
central differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import tensor as T
from .tensor import Rng, Tensor

HOM_MARGIN = 1e-3
TOLERANCE = 1e-5


@dataclass
class CheckResult:
    loss: str
    worst: float
    cases: int

    @property
    def ok(self):
        return self.worst <= TOLERANCE


def random_sources(n_sources, rng):
    """Two rows per source, in shuffled row order."""
    ids = np.repeat(np.arange(n_sources), 2)
    return ids[rng.permutation(len(ids))]


def random_labels(source_id, rng, min_per_class=2):
    """Per-source labels with at least ``min_per_class`` views in each class."""
    sources = np.unique(source_id)
    while True:
        lab = rng.integers(0, 2, size=len(sources))
        per_row = lab[np.searchsorted(sources, source_id)]
        if min(np.sum(per_row == 0), np.sum(per_row == 1)) >= min_per_class:
            return per_row


def _raw(shape, rng):
    return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


def _view(V, sid, label=None):
    return L.PairedBatchView(T.l2_normalize(V), sid, label)


def _case(name, rng):
    """Return ``(f, params)`` for one random configuration of loss ``name``."""
    n_src = int(rng.integers(2, 7))
    C = int(rng.integers(2, 9))
    sid = random_sources(n_src, rng)
    rows = len(sid)
    tau = float(rng.uniform(0.1, 1.0))
    if name == "het":
        V = _raw((rows, C), rng)
        return (lambda: L.loss_het(_view(V, sid), tau)), [V]
    if name == "hom":
        while True:
            V = _raw((rows, C), rng)
            if L.hom_argmax_margin(_view(V, sid)) > HOM_MARGIN:
                return (lambda: L.loss_hom(_view(V, sid))), [V]
    if name.startswith("ort"):
        mode = name.split("_", 1)[1]
        A, B = _raw((rows, C), rng), _raw((rows, C), rng)
        if mode == "absolute":  # keep away from the kink at cos = 0
            while np.min(np.abs(np.sum(T.l2_normalize(A).data * T.l2_normalize(B).data, 1))) < 1e-3:
                B = _raw((rows, C), rng)
        return (lambda: L.loss_ort(T.l2_normalize(A), T.l2_normalize(B), mode)), [A, B]
    if name == "tra":
        cfg = L.LossConfig(tau=tau, lam=float(rng.uniform(0, 1)))
        while True:
            A, B = _raw((rows, C), rng), _raw((rows, C), rng)
            if L.hom_argmax_margin(_view(A, sid)) > HOM_MARGIN:
                break
        return (lambda: L.loss_tra(_view(A, sid), _view(B, sid), cfg)[0]), [A, B]
    if name.startswith("ext"):
        label = random_labels(sid, rng)
        V = _raw((rows, C), rng)
        use_aux = "aux" in name
        aux = T.l2_normalize(Tensor(rng.normal(size=(int(np.sum(label == L.REAL)), C)))).data if use_aux else None
        use_log = "nolog" not in name
        return (lambda: L.loss_ext(_view(V, sid, label), aux, tau, use_log)), [V]
    if name == "ce":
        z = _raw((rows, 1), rng)
        y = rng.integers(0, 2, size=rows)
        return (lambda: L.loss_ce(z, y)), [z]
    if name == "d":
        label = random_labels(sid, rng)
        V = _raw((rows, C), rng)
        W = _raw((C, 1), rng)
        aux = T.l2_normalize(Tensor(rng.normal(size=(int(np.sum(label == L.REAL)), C)))).data
        cfg = L.LossConfig(tau=tau, gamma=float(rng.uniform(0, 2)))

        def f():
            view = _view(V, sid, label)
            return L.loss_d(view, aux, T.matmul(view.Z, W), label, cfg)[0]

        return f, [V, W]
    raise ValueError(f"unknown loss {name!r}")


LOSSES = ("het", "hom", "ort_signed", "ort_absolute", "ort_squared", "tra",
          "ext", "ext_aux", "ext_aux_nolog", "ce", "d")


def check_loss(name, seed=0, n_configs=10, h=1e-6):
    rng = Rng(seed, (LOSSES.index(name),))
    worst = 0.0
    for i in range(n_configs):
        f, params = _case(name, rng.substream(i))
        worst = max(worst, T.finite_diff_check(f, params, h))
    return CheckResult(name, worst, n_configs)


def run_all(seed=0, n_configs=10):
    return [check_loss(name, seed, n_configs) for name in LOSSES]
