"""Multi-seed desk experiment: train the variants, evaluate, summarize.

For every seed this trains three stage-1 variants (full objective, no
orthogonality term, homogeneity only), a full stage 2 on each, and a plain
BCE stage 2 on the full stage-1 encoder. The full model is also run through
the robustness sweep.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import save_checkpoint
from .data import ImageSet, gen_synthetic_corpus, load_manifest
from .evaluate import ALL, evaluate, robustness_sweep
from .losses import LossConfig
from .tensor import Rng
from .train import StageConfig, train_stage1, train_stage2

log = logging.getLogger(__name__)

STAGE1_VARIANTS = {
    "full": {},
    "no_ort": {"enable_ort": False},
    "no_het_no_ort": {"enable_het": False, "enable_ort": False},
}
BCE = "bce"
BCE_LOSS = {"ext_weight": 0.0, "ext_use_aux": False, "gamma": 1.0}
HEADLINE_CELLS = (("blur", 2.0), ("jpeg", 30), ("noise", 0.1), ("scale", 0.2))


@dataclass
class DeskResult:
    """Per-seed measurements; ``rows`` feed the TSV, the rest feed the checks."""

    rows: list = field(default_factory=list)  # seed, variant, family, ap, acc, fpr, fnr
    stage1_logs: dict = field(default_factory=dict)  # (seed, variant) -> LossLog
    stage2_logs: dict = field(default_factory=dict)  # (seed, variant) -> LossLog
    robustness: dict = field(default_factory=dict)  # seed -> EvalReport
    clean: dict = field(default_factory=dict)  # (seed, variant) -> EvalReport
    checkpoints: dict = field(default_factory=dict)  # (seed, variant, stage) -> path
    timings: dict = field(default_factory=dict)

    @property
    def seeds(self):
        return sorted({r["seed"] for r in self.rows})

    def ap(self, variant, family):
        return [r["ap"] for r in self.rows if r["variant"] == variant and r["family"] == family]

    def median_ap(self, variant, family):
        return float(np.median(self.ap(variant, family)))

    def median_cell_ap(self, transform, severity, family=ALL):
        vals = []
        for rep in self.robustness.values():
            if family == ALL:
                vals.append(rep.aggregate[(transform, severity)]["ap"])
            else:
                vals.extend(r["ap"] for r in rep.select(transform, severity, family))
        return float(np.median(vals))

    def to_tsv(self):
        cols = ("seed", "variant", "family", "ap", "acc", "fpr", "fnr")
        lines = ["\t".join(cols)]
        for r in self.rows:
            lines.append("\t".join(str(r[c]) if not isinstance(r[c], float) else repr(r[c]) for c in cols))
        return "\n".join(lines) + "\n"

    def median_table(self):
        variants = list(dict.fromkeys(r["variant"] for r in self.rows))
        families = list(dict.fromkeys(r["family"] for r in self.rows))
        lines = ["variant\t" + "\t".join(families)]
        for v in variants:
            cells = []
            for f in families:
                vals = [r["ap"] for r in self.rows if r["variant"] == v and r["family"] == f]
                cells.append("nan" if not vals or np.all(np.isnan(vals)) else f"{np.nanmedian(vals):.4f}")
            lines.append(v + "\t" + "\t".join(cells))
        return "\n".join(lines) + "\n"


def ensure_corpus(corpus_dir, n_per_family=500, size=32, seed=0):
    """Generate the standard desk corpus unless a manifest already exists."""
    path = os.path.join(corpus_dir, "manifest.tsv")
    if not os.path.exists(path):
        gen_synthetic_corpus(corpus_dir, n_per_family, size, Rng(seed))
    return path


def _record(result, seed, variant, report):
    result.clean[(seed, variant)] = report
    for r in report.rows + [report.aggregate[("none", 0)]]:
        result.rows.append({"seed": seed, "variant": variant, "family": r["family"],
                            "ap": r["ap"], "acc": r["acc"], "fpr": r["fpr"], "fnr": r["fnr"]})


def run_desk_experiment(manifest_path, seeds=(0, 1, 2, 3, 4), stage1_epochs=30, stage2_epochs=10,
                        variants=tuple(STAGE1_VARIANTS), with_bce=True, with_robustness=True,
                        workdir=None):
    """Train and evaluate every variant for every seed on one corpus."""
    man = load_manifest(manifest_path)
    train = ImageSet.load(man.select(split="train"))
    test = ImageSet.load(man.select(split="test"))
    result = DeskResult()
    for seed in seeds:
        for variant in variants:
            t0 = time.perf_counter()
            lc = LossConfig(**STAGE1_VARIANTS[variant])
            m1, log1 = train_stage1(train, cfg=StageConfig(epochs=stage1_epochs, seed=seed, loss=lc))
            result.stage1_logs[(seed, variant)] = log1
            stage2_runs = [(variant, LossConfig(**STAGE1_VARIANTS[variant]))]
            if with_bce and variant == "full":
                stage2_runs.append((BCE, LossConfig(**BCE_LOSS)))
            for name, lc2 in stage2_runs:
                m2, log2 = train_stage2(train, m1, StageConfig(epochs=stage2_epochs, seed=seed, loss=lc2))
                result.stage2_logs[(seed, name)] = log2
                _record(result, seed, name, evaluate(m2, test))
                if workdir:
                    os.makedirs(workdir, exist_ok=True)
                    p = os.path.join(workdir, f"seed{seed}_{name}_stage2.ntf")
                    save_checkpoint(m2, p, meta={"seed": seed, "variant": name, "stage": 2})
                    result.checkpoints[(seed, name, 2)] = p
                if with_robustness and name == "full":
                    result.robustness[seed] = robustness_sweep(m2, test, seed=seed)
            result.timings[(seed, variant)] = time.perf_counter() - t0
            log.info("seed %d variant %s done in %.1fs", seed, variant, result.timings[(seed, variant)])
    return result
