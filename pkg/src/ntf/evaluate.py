"""Scoring, detection metrics, and the perturbation robustness sweep.

The positive class is *fake*: a score at or above the threshold is a
fake verdict, so FPR counts real images wrongly flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import perturb
from .data import ImageSet, Manifest, center_crop, read_image
from .errors import MetricError
from .losses import FAKE, REAL
from .tensor import Rng

ALL = "all"

SEVERITY_GRID = {
    "blur": (0.0, 0.5, 1.0, 2.0),
    "jpeg": (100, 90, 70, 50, 30),
    "noise": (0.0, 0.02, 0.05, 0.1),
    "scale": (1.0, 0.75, 0.5, 0.2),
}
IDENTITY_SEVERITY = {"blur": 0.0, "noise": 0.0, "scale": 1.0}


@dataclass
class ScoredExample:
    score: float
    label: int
    family: str = ""


@dataclass
class Metrics:
    ap: float
    acc: float
    fpr: float
    fnr: float
    n_real: int
    n_fake: int
    threshold: float = 0.5

    def as_row(self):
        return {"n_real": self.n_real, "n_fake": self.n_fake, "threshold": self.threshold,
                "ap": self.ap, "acc": self.acc, "fpr": self.fpr, "fnr": self.fnr}


def average_precision(scores, labels):
    """Step-wise AP: sum over ranks of (recall gain) × precision, descending score.

    Ties keep input order (stable sort).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == FAKE))
    if n_pos == 0:
        raise MetricError("average precision needs at least one fake example")
    order = np.argsort(-scores, kind="stable")
    hits = (labels[order] == FAKE).astype(np.float64)
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    return float(np.sum(precision * hits) / n_pos)


def compute_metrics(scores, labels=None, threshold=0.5, metrics=("ap", "acc", "fpr", "fnr")):
    """AP, ACC, FPR, FNR for one set of scores.

    FPR needs a real example and FNR/AP need a fake one. Requesting a metric
    whose class is absent raises; unrequested undefined metrics are NaN.
    """
    if len(scores) and isinstance(scores[0], ScoredExample):
        labels = [s.label for s in scores]
        scores = [s.score for s in scores]
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.size == 0:
        raise MetricError("no examples to score")
    if not np.all(np.isfinite(s)) or np.any((s < 0) | (s > 1)):
        raise MetricError("scores must be finite and within [0, 1]")
    real, fake = y == REAL, y == FAKE
    if "fpr" in metrics and not real.any():
        raise MetricError("FPR needs at least one real example")
    if ("fnr" in metrics or "ap" in metrics) and not fake.any():
        raise MetricError("FNR and AP need at least one fake example")
    flagged = s >= threshold
    n_real, n_fake = int(real.sum()), int(fake.sum())
    fpr = float(np.sum(flagged & real) / n_real) if n_real else float("nan")
    fnr = float(np.sum(~flagged & fake) / n_fake) if n_fake else float("nan")
    acc = float(np.mean(flagged == fake))
    ap = average_precision(s, y) if n_fake else float("nan")
    return Metrics(ap, acc, fpr, fnr, n_real, n_fake, threshold)


def detect(model, image, threshold=0.5):
    """Score one image (center-cropped to the encoder size); returns (score, label)."""
    img = center_crop(np.asarray(image), model.config.input_size)
    score = float(model.score(img[None])[0])
    return score, ("fake" if score >= threshold else "real")


def score_images(model, images):
    """Probability-of-fake for every image in an ``ImageSet`` (center crop)."""
    x = images.stack(size=model.config.input_size).astype(model.dtype)
    return model.score(x)


def family_metrics(scores, images, threshold=0.5):
    """One metrics entry per family plus an aggregate ``all`` entry.

    A fake family is scored against every real test image; a real family
    reports its own false-positive statistics.
    """
    labels = images.labels
    fams = np.asarray(images.families)
    real_mask = labels == REAL
    out = {}
    for fam in dict.fromkeys(images.families):
        fmask = fams == fam
        if np.all(labels[fmask] == REAL):
            out[fam] = compute_metrics(list(scores[fmask]), list(labels[fmask]), threshold, ("acc", "fpr"))
        else:
            sel = fmask | real_mask
            out[fam] = compute_metrics(list(scores[sel]), list(labels[sel]), threshold)
    out[ALL] = compute_metrics(list(scores), list(labels), threshold)
    return out


def perturb_image(img, transform, severity, rng=None):
    if transform == "none":
        return img
    if transform == "blur":
        return perturb.gaussian_blur(img, severity)
    if transform == "jpeg":
        return perturb.jpeg_roundtrip(img, int(severity))
    if transform == "noise":
        return perturb.add_gaussian_noise(img, severity, rng)
    if transform == "scale":
        return perturb.rescale(img, severity)
    raise ValueError(f"unknown transform {transform!r}")


@dataclass
class EvalReport:
    """Per-family rows for every (transform, severity) cell plus per-cell aggregates.

    ``rows`` holds one dict per family and cell; the pooled ``all`` metrics
    live in ``aggregate`` so the TSV has exactly one row per family.
    """

    rows: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)  # (transform, severity) -> row dict
    pixel_error: dict = field(default_factory=dict)  # (transform, severity) -> mean abs error

    def add(self, transform, severity, per_family):
        for fam, m in per_family.items():
            row = {"family": fam, "transform": transform, "severity": severity, **m.as_row()}
            if fam == ALL:
                self.aggregate[(transform, severity)] = row
            else:
                self.rows.append(row)

    def select(self, transform=None, severity=None, family=None):
        return [
            r
            for r in self.rows
            if (transform is None or r["transform"] == transform)
            and (severity is None or r["severity"] == severity)
            and (family is None or r["family"] == family)
        ]

    def curve(self, transform, family, metric="ap"):
        if family == ALL:
            rows = [r for (t, _), r in self.aggregate.items() if t == transform]
        else:
            rows = self.select(transform=transform, family=family)
        return [r["severity"] for r in rows], [r[metric] for r in rows]

    COLUMNS = ("family", "transform", "severity", "n_real", "n_fake", "threshold", "ap", "acc", "fpr", "fnr")

    def to_tsv(self):
        lines = ["\t".join(self.COLUMNS)]
        for r in self.rows:
            lines.append("\t".join(_fmt(r[c]) for c in self.COLUMNS))
        return "\n".join(lines) + "\n"

    def write_tsv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_tsv())
        return path

    def summary(self):
        lines = []
        for r in self.rows + list(self.aggregate.values()):
            sev = "" if r["transform"] == "none" else f" {r['transform']}={_fmt(r['severity'])}"
            lines.append(
                f"{r['family']:>10}{sev}: AP={r['ap']:.4f} ACC={r['acc']:.4f} "
                f"FPR={r['fpr']:.4f} FNR={r['fnr']:.4f}"
            )
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else repr(v)
    return str(v)


def _test_images(source):
    if isinstance(source, ImageSet):
        return source
    if isinstance(source, Manifest):
        return ImageSet.load(source.select(split="test"))
    raise TypeError(f"expected Manifest or ImageSet, got {type(source).__name__}")


def evaluate(model, source, threshold=0.5):
    """Clean per-family evaluation on the test split."""
    images = _test_images(source)
    report = EvalReport()
    report.add("none", 0, family_metrics(score_images(model, images), images, threshold))
    return report


def robustness_sweep(model, source, grid=None, threshold=0.5, seed=0):
    """Metrics for every (transform, severity) cell of ``grid``.

    Noise draws come from a per-image substream so a cell is reproducible.
    """
    images = _test_images(source)
    grid = SEVERITY_GRID if grid is None else grid
    report = EvalReport()
    clean = [center_crop(img, model.config.input_size) for img in images.images]
    for t_id, (transform, severities) in enumerate(grid.items()):
        for s_id, sev in enumerate(severities):
            pert = [
                perturb_image(img, transform, sev, Rng(seed, (5, t_id, s_id, i)))
                for i, img in enumerate(clean)
            ]
            x = np.stack(pert).astype(model.dtype)
            scores = model.score(x)
            report.add(transform, sev, family_metrics(scores, ImageSet(images.records, pert), threshold))
            report.pixel_error[(transform, sev)] = float(
                np.mean([np.abs(p.astype(np.float64) - c).mean() for p, c in zip(pert, clean)])
            )
    return report


def detect_paths(model, paths, threshold=0.5):
    """Yield ``(path, score, label)`` or ``(path, exception, None)`` per file."""
    for path in paths:
        try:
            img = read_image(path)
            score, label = detect(model, img, threshold)
            yield path, score, label
        except Exception as exc:  # reported per file by the caller
            yield path, exc, None
