"""Two-stage training: natural-trace pretraining, then the detector heads."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentConfig, ImageSet, Manifest, make_stage1_batch, make_stage2_batch
from .errors import ContractError, DataError, NumericError
from .losses import LossConfig, PairedBatchView
from .model import EncoderConfig, ModelBundle
from .tensor import GradTape, Rng, Tensor

log = logging.getLogger(__name__)

STAGE1_EPOCHS = {"desk": 30, "long": 200}
STAGE2_EPOCHS = {"desk": 10, "long": 10}


@dataclass
class OptimizerState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.001
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ContractError("lr must be >= 0")


def sgd_step(params, grads, state, lr=None):
    """SGD with momentum and L2 decay: v <- mu v + g + wd theta; theta <- theta - lr v.

    ``params`` is an iterable of ``(name, Tensor)``; only those are touched.
    """
    lr = state.lr if lr is None else lr
    for name, p in params:
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g + state.weight_decay * p.data
        state.velocity[name] = v.astype(p.dtype, copy=False)
        p.data -= (lr * state.velocity[name]).astype(p.dtype, copy=False)


@dataclass
class StageConfig:
    epochs: int = 30
    batch_n: int = 64  # stage 1: sources per batch
    batch_real: int = 32  # stage 2
    batch_fake: int = 32
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.001
    lr_schedule: str = "constant"  # or "linear" (decays to 0 over the run)
    reduction: str = "mean"  # "sum" optimizes the raw summed contrastive terms
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.lr_schedule not in ("constant", "linear"):
            raise ContractError("lr_schedule must be 'constant' or 'linear'")
        if self.reduction not in ("mean", "sum"):
            raise ContractError("reduction must be 'mean' or 'sum'")

    def optimizer(self):
        return OptimizerState(self.lr, self.momentum, self.weight_decay)

    def lr_at(self, step, total):
        if self.lr_schedule == "linear":
            return self.lr * (1.0 - step / total)
        return self.lr


def _as_images(source, split="train"):
    if isinstance(source, ImageSet):
        return source
    if isinstance(source, Manifest):
        return ImageSet.load(source.select(split=split))
    raise TypeError(f"expected Manifest or ImageSet, got {type(source).__name__}")


class LossLog:
    """Per-step rows plus per-epoch means; written as TSV."""

    def __init__(self, columns):
        self.columns = list(columns)
        self.steps = []
        self.epochs = []

    def add_step(self, epoch, step, values):
        self.steps.append({"epoch": epoch, "step": step, **values})

    def close_epoch(self, epoch):
        rows = [r for r in self.steps if r["epoch"] == epoch]
        summary = {"epoch": epoch, "steps": len(rows)}
        for c in self.columns:
            summary[c] = float(np.mean([r[c] for r in rows]))
        self.epochs.append(summary)
        return summary

    def __len__(self):
        return len(self.epochs)

    def write_tsv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(["epoch", "step", *self.columns]) + "\n")
            for r in self.steps:
                vals = [str(r["epoch"]), str(r["step"])] + [repr(float(r[c])) for c in self.columns]
                fh.write("\t".join(vals) + "\n")
        return path


def _maybe_checkpoint(model, cfg, stage, epoch):
    if cfg.checkpoint_every and cfg.checkpoint_dir and epoch % cfg.checkpoint_every == 0:
        os.makedirs(cfg.checkpoint_dir, exist_ok=True)
        path = os.path.join(cfg.checkpoint_dir, f"stage{stage}_epoch{epoch:03d}.ntf")
        save_checkpoint(model, path, meta={"stage": stage, "epoch": epoch, "seed": cfg.seed})


def _stage1_objective(hom, het, cfg):
    if cfg.reduction == "sum":
        return L.loss_tra(hom, het, cfg.loss)
    # per-anchor means for the summed terms; the max term is already per-pair
    inv = 1.0 / hom.n_rows
    l_hom = L.loss_hom(hom, cfg.loss.hom_smooth)
    l_het = L.loss_het(het, cfg.loss.tau)
    l_ort = L.loss_ort(hom.Z, het.Z, cfg.loss.ort_mode)
    total = L.combine_tra(l_hom, T.scale(l_het, inv), T.scale(l_ort, inv), cfg.loss)
    return total, {"hom": l_hom.item(), "het": l_het.item(), "ort": l_ort.item()}


def _stage2_objective(view, aux, logits, labels, cfg):
    lc = cfg.loss
    if cfg.reduction == "sum" or not lc.ext_weight:
        return L.loss_d(view, aux, logits, labels, lc)
    l_ext = L.loss_ext(view, aux if lc.ext_use_aux else None, lc.tau, lc.ext_log)
    l_ce = L.loss_ce(logits, labels)
    total = L.combine_d(T.scale(l_ext, 1.0 / view.n_rows), l_ce, lc)
    return total, {"ext": l_ext.item(), "ce": l_ce.item()}


def train_stage1(source, model=None, cfg=None, encoder_config=None, log_path=None):
    """Learn homogeneous/heterogeneous projections from real training images.

    Returns ``(model, loss_log)``; ``loss_log.epochs`` has one entry per epoch.
    """
    cfg = cfg or StageConfig(epochs=STAGE1_EPOCHS["desk"])
    images = _as_images(source)
    if model is None:
        model = ModelBundle.initialize(encoder_config, Rng(cfg.seed, (0,)))
    model.configure_stage(1)
    pool = np.asarray(images.indices(label=L.REAL))
    N = cfg.batch_n
    if len(pool) < N:
        raise DataError(f"stage 1 needs at least {N} real training images, found {len(pool)}")
    steps_per_epoch = len(pool) // N
    total = steps_per_epoch * cfg.epochs
    state = cfg.optimizer()
    trainable = model.trainable_parameters()
    lossy = LossLog(["loss", "hom", "het", "ort"])
    params = [t for _, t in trainable]
    step_no = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = Rng(cfg.seed, (1, epoch)).permutation(len(pool))
        for step in range(steps_per_epoch):
            idx = pool[perm[step * N : (step + 1) * N]].tolist()
            try:
                batch = make_stage1_batch(images, N, cfg.augment, Rng(cfg.seed, (2, epoch, step)), indices=idx)
                x = batch.x.astype(model.dtype, copy=False)
                with GradTape() as tape:
                    e = model.encode(x)
                    hom = PairedBatchView(model.project_hom(e), batch.source_id)
                    het = PairedBatchView(model.project_het(e), batch.source_id)
                    total_loss, parts = _stage1_objective(hom, het, cfg)
                grads = tape.backward(total_loss, params)
                sgd_step(trainable, {n: grads[t] for n, t in trainable}, state, cfg.lr_at(step_no, total))
            except NumericError as exc:
                raise NumericError(f"stage 1, epoch {epoch}, step {step}: {exc}") from exc
            step_no += 1
            rows = len(batch.source_id)
            het_m, ort_m = parts["het"] / rows, parts["ort"] / rows
            logged = parts["hom"]
            if cfg.loss.enable_het:
                logged += het_m
            if cfg.loss.enable_ort:
                logged += cfg.loss.lam * ort_m
            lossy.add_step(epoch, step, {"loss": logged, "hom": parts["hom"], "het": het_m, "ort": ort_m})
        summary = lossy.close_epoch(epoch)
        log.info("stage1 epoch %d: loss=%.4f hom=%.4f het=%.4f ort=%.4f", epoch,
                 summary["loss"], summary["hom"], summary["het"], summary["ort"])
        _maybe_checkpoint(model, cfg, 1, epoch)
    if log_path:
        lossy.write_tsv(log_path)
    return model, lossy


def hom_prototype(model, images, batch_size=256):
    """Mean frozen homogeneous feature over all real training images, unit-normalized."""
    reals = images.indices(label=L.REAL)
    x = images.stack(reals, size=model.config.input_size).astype(model.dtype)
    feats = []
    for s in range(0, len(x), batch_size):
        feats.append(model.project_hom(model.encode(x[s : s + batch_size])).data)
    proto = np.concatenate(feats).mean(axis=0, keepdims=True)
    return proto / np.linalg.norm(proto)


def train_stage2(source, stage1, cfg=None, log_path=None):
    """Train the auxiliary head and classifier on real+fake data, encoder frozen.

    ``stage1`` is a checkpoint path or a ``ModelBundle`` (copied, not mutated).
    Returns ``(model, loss_log)``.
    """
    cfg = cfg or StageConfig(epochs=STAGE2_EPOCHS["desk"])
    images = _as_images(source)
    if isinstance(stage1, ModelBundle):
        model = ModelBundle(stage1.config, {n: Tensor(t.data, requires_grad=True, name=n) for n, t in stage1.params.items()}, dict(stage1.frozen))
    else:
        model = load_checkpoint(stage1)
    model.configure_stage(2)
    lc = cfg.loss
    reals, fakes = images.indices(label=L.REAL), images.indices(label=L.FAKE)
    if not reals or not fakes:
        raise DataError("stage 2 needs both real and fake training images")
    Nr, Nf = cfg.batch_real, cfg.batch_fake
    steps_per_epoch = max(len(reals) // Nr, len(fakes) // Nf, 1)
    total = steps_per_epoch * cfg.epochs
    prototype = None
    if lc.ext_weight and lc.ext_use_aux and lc.aux_mode == "prototype":
        prototype = hom_prototype(model, images)
    state = cfg.optimizer()
    trainable = model.trainable_parameters()
    params = [t for _, t in trainable]
    lossy = LossLog(["loss", "ext", "ce", "acc"])
    step_no = 0
    for epoch in range(1, cfg.epochs + 1):
        for step in range(steps_per_epoch):
            try:
                batch = make_stage2_batch(images, Nr, Nf, cfg.augment, Rng(cfg.seed, (4, epoch, step)))
                x = batch.x.astype(model.dtype, copy=False)
                e = model.encode(x)  # frozen: computed off-tape
                aux = None
                if lc.ext_weight and lc.ext_use_aux:
                    if prototype is not None:
                        aux = prototype
                    else:
                        aux = model.project_hom(Tensor._wrap(e.data[batch.label == L.REAL])).data
                with GradTape() as tape:
                    z = model.project_aux(e) if lc.ext_weight else None
                    logits = model.classify(e)
                    view = PairedBatchView(z, batch.source_id, batch.label) if z is not None else None
                    total_loss, parts = _stage2_objective(view, aux, logits, batch.label, cfg)
                grads = tape.backward(total_loss, params)
                sgd_step(trainable, {n: grads[t] for n, t in trainable}, state, cfg.lr_at(step_no, total))
            except NumericError as exc:
                raise NumericError(f"stage 2, epoch {epoch}, step {step}: {exc}") from exc
            step_no += 1
            rows = len(batch.label)
            acc = float(np.mean((logits.data[:, 0] >= 0) == (batch.label == L.FAKE)))
            ext_m = parts["ext"] / rows
            lossy.add_step(epoch, step, {"loss": ext_m + lc.gamma * parts["ce"], "ext": ext_m, "ce": parts["ce"], "acc": acc})
        summary = lossy.close_epoch(epoch)
        log.info("stage2 epoch %d: loss=%.4f ext=%.4f ce=%.4f acc=%.3f", epoch,
                 summary["loss"], summary["ext"], summary["ce"], summary["acc"])
        _maybe_checkpoint(model, cfg, 2, epoch)
    if log_path:
        lossy.write_tsv(log_path)
    return model, lossy


def frozen_delta(before, model):
    """Sum of |delta| over parameters of frozen components since ``before`` (a snapshot)."""
    total = 0.0
    for name, t in model.params.items():
        if model.frozen[name.split(".", 1)[0]]:
            total += float(np.abs(t.data.astype(np.float64) - before[name]).sum())
    return total
