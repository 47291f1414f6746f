"""Contrastive, homogeneity, orthogonality and classification losses.

Each loss is a single differentiable op: the forward value is computed in
numpy and the backward pass is written out by hand. All contrastive terms
are *sums* over anchors, matching the summed objectives used for
optimization; divide by the row count for a per-anchor figure.

Label convention everywhere: 0 = real, 1 = fake.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

REAL, FAKE = 0, 1
ORT_MODES = ("signed", "absolute", "squared")
AUX_MODES = ("per_image", "prototype")


@dataclass
class LossConfig:
    tau: float = 0.07
    lam: float = 0.1
    gamma: float = 0.5
    ort_mode: str = "signed"
    enable_het: bool = True
    enable_ort: bool = True
    ext_use_aux: bool = True
    ext_log: bool = True  # False gives the ratio-without-log variant
    ext_weight: float = 1.0  # 0 with gamma=1 and no aux is plain BCE
    aux_mode: str = "per_image"
    hom_smooth: float = 0.0  # >0 replaces the hard max by a logsumexp at this temperature

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        if self.lam < 0 or self.gamma < 0 or self.ext_weight < 0:
            raise ContractError("lambda, gamma and ext_weight must be non-negative")
        if self.ort_mode not in ORT_MODES:
            raise ContractError(f"ort_mode must be one of {ORT_MODES}")
        if self.aux_mode not in AUX_MODES:
            raise ContractError(f"aux_mode must be one of {AUX_MODES}")
        if self.hom_smooth < 0:
            raise ContractError("hom_smooth must be >= 0")


def pairing_from_sources(source_id):
    """Map each row to the other row sharing its source id."""
    source_id = np.asarray(source_id)
    pairing = np.full(len(source_id), -1, dtype=np.int64)
    first = {}
    for row, sid in enumerate(source_id.tolist()):
        if sid in first:
            other = first[sid]
            if pairing[other] != -1:
                raise ContractError(f"source id {sid} appears more than twice")
            pairing[row], pairing[other] = other, row
        else:
            first[sid] = row
    if np.any(pairing < 0):
        lonely = [int(source_id[i]) for i in np.flatnonzero(pairing < 0)]
        raise ContractError(f"source ids appear only once: {lonely[:5]}")
    return pairing


@dataclass
class PairedBatchView:
    """2N projected rows, two views per source image."""

    Z: Tensor
    source_id: np.ndarray
    label: np.ndarray | None = None
    check_norm: bool = True

    def __post_init__(self):
        if self.Z.ndim != 2:
            raise DimensionError(f"Z must be 2-d, got {self.Z.shape}")
        self.source_id = np.asarray(self.source_id)
        if len(self.source_id) != self.Z.shape[0]:
            raise DimensionError("source_id length must match row count")
        if self.Z.shape[0] < 2:
            raise ContractError("batch needs at least one source (two views)")
        self.pairing = pairing_from_sources(self.source_id)
        if self.label is not None:
            self.label = np.asarray(self.label, dtype=np.int64)
            if len(self.label) != self.Z.shape[0]:
                raise DimensionError("label length must match row count")
        if self.check_norm:
            norms = np.linalg.norm(self.Z.data, axis=1)
            tol = 1e-4 if self.Z.dtype == np.float32 else 1e-8
            if np.any(np.abs(norms - 1) > tol):
                raise ContractError("rows must be unit-norm")

    @property
    def n_rows(self):
        return self.Z.shape[0]


def _row_lse(S, mask):
    """Log-sum-exp of each row over entries where ``mask`` is True."""
    masked = np.where(mask, S, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0.0)
    tot = e.sum(axis=1, keepdims=True)
    return (m + np.log(tot))[:, 0], e / tot


# ------------------------------------------------------------------ L_het


def loss_het(batch, tau=0.07):
    """Instance-discrimination (NT-Xent) loss summed over all 2N anchors."""
    Z = batch.Z
    z = Z.data
    n = z.shape[0]
    S = (z @ z.T) / tau
    off_diag = ~np.eye(n, dtype=bool)
    lse, soft = _row_lse(S, off_diag)
    rows = np.arange(n)
    p = batch.pairing
    value = np.sum(lse - S[rows, p])

    def back(g):
        dS = soft.copy()
        dS[rows, p] -= 1.0
        dz = ((dS + dS.T) @ z) / tau
        return (g * dz.astype(z.dtype),)

    return T.make_op(np.asarray(value, dtype=z.dtype), (Z,), back, "loss_het")


# ------------------------------------------------------------------ L_hom


def cross_source_mask(source_id):
    sid = np.asarray(source_id)
    return sid[:, None] != sid[None, :]


def loss_hom(batch, smooth=0.0):
    """Largest squared distance between rows of different source images.

    Only the maximizing pair receives gradient; ties resolve to the first
    (i, k) in row-major order. ``smooth > 0`` swaps the max for
    ``smooth * logsumexp(D / smooth)`` over the same pairs.
    """
    Z = batch.Z
    z = Z.data
    valid = cross_source_mask(batch.source_id)
    if not valid.any():
        raise ContractError("homogeneous loss needs at least two distinct sources")
    diff = z[None, :, :] - z[:, None, :]  # diff[i, k] = z_k - z_i
    D = np.sum(diff * diff, axis=2)

    if smooth > 0:
        masked = np.where(valid, D / smooth, -np.inf)
        m = masked.max()
        w = np.where(valid, np.exp(masked - m), 0.0)
        tot = w.sum()
        value = smooth * (m + np.log(tot))
        w = w / tot

        def back_smooth(g):
            dz = 2.0 * ((w.sum(axis=0) + w.sum(axis=1))[:, None] * z - w.T @ z - w @ z)
            return (g * dz.astype(z.dtype),)

        return T.make_op(np.asarray(value, dtype=z.dtype), (Z,), back_smooth, "loss_hom")

    flat = np.where(valid, D, -np.inf).reshape(-1)
    i, k = divmod(int(np.argmax(flat)), z.shape[0])
    d = z[k] - z[i]
    value = np.sum(d * d)

    def back(g):
        dz = np.zeros_like(z)
        dz[k] += 2.0 * d
        dz[i] -= 2.0 * d
        return (g * dz,)

    out = T.make_op(np.asarray(value, dtype=z.dtype), (Z,), back, "loss_hom")
    return out


def hom_argmax_margin(batch):
    """Gap between the largest and second-largest distinct cross-source distance.

    The pair (i, k) and (k, i) share a value, so the comparison uses i < k.
    """
    z = batch.Z.data
    valid = cross_source_mask(batch.source_id) & np.triu(np.ones((len(z), len(z)), dtype=bool), 1)
    diff = z[None, :, :] - z[:, None, :]
    D = np.sort(np.sum(diff * diff, axis=2)[valid])
    return float(D[-1] - D[-2]) if len(D) > 1 else float("inf")


# ------------------------------------------------------------------ L_ort


def loss_ort(Z_hom, Z_het, mode="signed", eps=1e-12):
    """Sum over rows of m(cos(hom_i, het_i)); m is identity, abs, or square."""
    if Z_hom.shape != Z_het.shape:
        raise DimensionError(f"row mismatch: {Z_hom.shape} vs {Z_het.shape}")
    if mode not in ORT_MODES:
        raise ContractError(f"unknown ort mode {mode!r}")
    a, b = Z_hom.data, Z_het.data
    na = np.maximum(np.linalg.norm(a, axis=1), eps)
    nb = np.maximum(np.linalg.norm(b, axis=1), eps)
    cos = np.sum(a * b, axis=1) / (na * nb)
    if mode == "signed":
        value, dm = cos.sum(), np.ones_like(cos)
    elif mode == "absolute":
        value, dm = np.abs(cos).sum(), np.sign(cos)
    else:
        value, dm = np.sum(cos * cos), 2.0 * cos

    def back(g):
        s = (g * dm)[:, None]
        da = s * (b / (na * nb)[:, None] - cos[:, None] * a / (na * na)[:, None])
        db = s * (a / (na * nb)[:, None] - cos[:, None] * b / (nb * nb)[:, None])
        return da.astype(a.dtype), db.astype(b.dtype)

    return T.make_op(np.asarray(value, dtype=a.dtype), (Z_hom, Z_het), back, "loss_ort")


# ------------------------------------------------------------------ L_tra


def combine_tra(l_hom, l_het, l_ort, cfg):
    total = l_hom
    if cfg.enable_het:
        total = T.add(total, l_het)
    if cfg.enable_ort:
        total = T.add(total, T.scale(l_ort, cfg.lam))
    return total


def loss_tra(hom_view, het_view, cfg):
    """Stage-1 objective; returns ``(total, {"hom", "het", "ort"})`` with float parts."""
    if not np.array_equal(hom_view.source_id, het_view.source_id):
        raise ContractError("hom and het views must share source ids")
    l_hom = loss_hom(hom_view, cfg.hom_smooth)
    l_het = loss_het(het_view, cfg.tau)
    l_ort = loss_ort(hom_view.Z, het_view.Z, cfg.ort_mode)
    total = combine_tra(l_hom, l_het, l_ort, cfg)
    return total, {"hom": l_hom.item(), "het": l_het.item(), "ort": l_ort.item()}


# ------------------------------------------------------------------ L_ext


def ext_masks(labels, n_aux):
    """Candidate and positive masks over the columns [batch rows | aux rows].

    Aux rows are positives for real anchors and plain negatives for fake
    anchors; they are never anchors themselves.
    """
    labels = np.asarray(labels)
    n = len(labels)
    cand = np.ones((n, n + n_aux), dtype=bool)
    cand[np.arange(n), np.arange(n)] = False
    pos = np.zeros((n, n + n_aux), dtype=bool)
    pos[:, :n] = (labels[:, None] == labels[None, :]) & cand[:, :n]
    pos[:, n:] = (labels == REAL)[:, None]
    return cand, pos


def loss_ext(batch, aux=None, tau=0.07, use_log=True):
    """Supervised contrastive loss over batch rows, with frozen aux rows.

    ``aux`` (M×C) receives no gradient. With ``aux=None`` this is the
    standard supervised contrastive loss.
    """
    if batch.label is None:
        raise ContractError("extended contrastive loss needs labels")
    Z = batch.Z
    z = Z.data
    n = z.shape[0]
    if aux is None:
        aux_arr = np.zeros((0, z.shape[1]), dtype=z.dtype)
    else:
        aux_arr = np.asarray(aux.data if isinstance(aux, Tensor) else aux, dtype=z.dtype)
        if aux_arr.ndim != 2 or aux_arr.shape[1] != z.shape[1]:
            raise DimensionError(f"aux must be M×{z.shape[1]}, got {aux_arr.shape}")
    A = np.concatenate([z, aux_arr], axis=0)
    cand, pos = ext_masks(batch.label, len(aux_arr))
    n_pos = pos.sum(axis=1)
    if np.any(n_pos == 0):
        bad = int(np.flatnonzero(n_pos == 0)[0])
        raise ContractError(f"anchor {bad} has no positives")
    S = (z @ A.T) / tau
    lse, soft = _row_lse(S, cand)
    inv = 1.0 / n_pos
    if use_log:
        logp = S - lse[:, None]
        value = -np.sum(inv * np.sum(np.where(pos, logp, 0.0), axis=1))
        dS = soft - pos * inv[:, None]
    else:
        r = soft
        pr = np.sum(np.where(pos, r, 0.0), axis=1)
        value = -np.sum(inv * pr)
        dS = -inv[:, None] * (pos * r - r * pr[:, None])

    def back(g):
        dz = (dS @ A + dS[:, :n].T @ z) / tau
        return (g * dz.astype(z.dtype),)

    return T.make_op(np.asarray(value, dtype=z.dtype), (Z,), back, "loss_ext")


# ------------------------------------------------------------------- L_ce

_P_MIN = 1e-7
_P_MAX = 1.0 - 1e-7


def _softplus(x):
    return np.logaddexp(0.0, x)


def loss_ce(logits, labels):
    """Mean binary cross-entropy from logits; probabilities clamped to [1e-7, 1-1e-7]."""
    x = logits.data.astype(np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(x) != len(y):
        raise DimensionError(f"{len(x)} logits vs {len(y)} labels")
    n = len(x)
    p = T.sigmoid(Tensor._wrap(x)).data
    inside = (p >= _P_MIN) & (p <= _P_MAX)
    pc = np.clip(p, _P_MIN, _P_MAX)
    log_p = np.where(inside, -_softplus(-x), np.log(pc))
    log_q = np.where(inside, -_softplus(x), np.log1p(-pc))
    value = -np.sum(y * log_p + (1 - y) * log_q) / n
    shape, dtype = logits.shape, logits.dtype

    def back(g):
        dx = np.where(inside, (p - y) / n, 0.0)
        return ((g * dx).reshape(shape).astype(dtype),)

    return T.make_op(np.asarray(value, dtype=dtype), (logits,), back, "loss_ce")


# -------------------------------------------------------------------- L_d


def combine_d(l_ext, l_ce, cfg):
    total = T.scale(l_ce, cfg.gamma)
    if cfg.ext_weight:
        total = T.add(T.scale(l_ext, cfg.ext_weight), total)
    return total


def loss_d(batch, aux, logits, labels, cfg):
    """Stage-2 objective; returns ``(total, {"ext", "ce"})``."""
    if cfg.ext_weight:
        l_ext = loss_ext(batch, aux if cfg.ext_use_aux else None, cfg.tau, cfg.ext_log)
        ext_val = l_ext.item()
    else:
        l_ext, ext_val = None, 0.0
    l_ce = loss_ce(logits, labels)
    return combine_d(l_ext, l_ce, cfg), {"ext": ext_val, "ce": l_ce.item()}
