"""``ntf`` command line: corpus generation, both training stages, evaluation.

Machine-readable output goes to stdout; progress and diagnostics go to
stderr. Exit codes: 0 ok, 2 usage, 3 I/O, 4 numeric, 5 partial failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys

from .errors import (
    ArgumentError,
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    ImageDecodeError,
    ManifestError,
    NumericError,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4, 5

log = logging.getLogger("ntf")


class UsageError(Exception):
    """Bad flags or flag values detected after argparse."""


def _threads(value):
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("--threads must be >= 1")
    return n


def _default_threads():
    env = os.environ.get("NTF_THREADS")
    if env is None:
        return 1
    try:
        return _threads(env)
    except (ValueError, argparse.ArgumentTypeError):
        raise UsageError(f"NTF_THREADS must be a positive integer, got {env!r}") from None


def _require_file(path, flag):
    if not os.path.isfile(path):
        raise UsageError(f"{flag}: no such file: {path}")


def _run_config(args):
    from .config import RunConfig, load_config, parse_overrides

    file_values = {}
    if getattr(args, "config", None):
        _require_file(args.config, "--config")
        file_values = load_config(args.config)
    flags = parse_overrides(getattr(args, "set", None))
    for key in ("epochs", "seed"):
        if getattr(args, key, None) is not None:
            flags[key] = getattr(args, key)
    return RunConfig.merge(file_values, flags)


def _load_split(manifest_path, split, workers):
    from .data import ImageSet, load_manifest

    _require_file(manifest_path, "--manifest")
    man = load_manifest(manifest_path)
    records = man.select(split=split)
    if not records:
        raise DataError(f"manifest has no {split} records")
    return ImageSet.load(records, workers=workers)


def _sidecar(path, suffix):
    root, _ = os.path.splitext(path)
    return root + suffix


# ------------------------------------------------------------------ commands


def cmd_gen_data(args):
    from .data import gen_synthetic_corpus
    from .tensor import Rng

    if args.size < 32 or args.size & (args.size - 1):
        raise UsageError(f"--size must be a power of two >= 32, got {args.size}")
    if args.n_per_family < 1:
        raise UsageError("--n-per-family must be >= 1")
    gen_synthetic_corpus(args.out, args.n_per_family, args.size, Rng(args.seed),
                         n_train_real=args.n_train_real, n_train_fake=args.n_train_fake)
    print(os.path.join(args.out, "manifest.tsv"))
    return EXIT_OK


def _finish_training(model, loss_log, args, meta):
    from .checkpoint import save_checkpoint
    from .plotting import plot_loss_log

    save_checkpoint(model, args.out_checkpoint, meta=meta)
    log_path = args.loss_log or _sidecar(args.out_checkpoint, ".loss.tsv")
    loss_log.write_tsv(log_path)
    plot_loss_log(loss_log, _sidecar(log_path, ".png"))
    final = loss_log.epochs[-1]
    print("\t".join(f"{c}={final[c]:.6g}" for c in loss_log.columns), file=sys.stderr)
    print(args.out_checkpoint)
    return EXIT_OK


def cmd_train_stage1(args):
    from .train import train_stage1

    rc = _run_config(args)
    cfg = rc.stage_config(1)
    images = _load_split(args.manifest, "train", args.threads)
    model, loss_log = train_stage1(images, cfg=cfg, encoder_config=rc.encoder_config())
    return _finish_training(model, loss_log, args, {"stage": 1, "seed": cfg.seed, "epochs": cfg.epochs})


def cmd_train_stage2(args):
    from .checkpoint import load_checkpoint
    from .train import train_stage2

    _require_file(args.stage1, "--stage1")
    rc = _run_config(args)
    cfg = rc.stage_config(2)
    stage1 = load_checkpoint(args.stage1)
    images = _load_split(args.manifest, "train", args.threads)
    model, loss_log = train_stage2(images, stage1, cfg=cfg)
    return _finish_training(model, loss_log, args, {"stage": 2, "seed": cfg.seed, "epochs": cfg.epochs})


def _load_model(path):
    from .checkpoint import load_checkpoint

    _require_file(path, "--checkpoint")
    return load_checkpoint(path)


def _emit_report(report, path, figure):
    if path:
        report.write_tsv(path)
        figure(report, _sidecar(path, ".png"))
        print(path)
    else:
        sys.stdout.write(report.to_tsv())
    print(report.summary(), file=sys.stderr)


def cmd_eval(args):
    from .evaluate import evaluate
    from .plotting import plot_family_bars

    model = _load_model(args.checkpoint)
    images = _load_split(args.manifest, "test", args.threads)
    _emit_report(evaluate(model, images, args.threshold), args.report, plot_family_bars)
    return EXIT_OK


def cmd_robustness(args):
    from .evaluate import robustness_sweep
    from .plotting import plot_robustness

    model = _load_model(args.checkpoint)
    images = _load_split(args.manifest, "test", args.threads)
    report = robustness_sweep(model, images, threshold=args.threshold, seed=args.seed)
    _emit_report(report, args.report, plot_robustness)
    for (t, s), err in report.pixel_error.items():
        print(f"pixel_error {t}={s}: {err:.6f}", file=sys.stderr)
    return EXIT_OK


def cmd_detect(args):
    from .evaluate import detect_paths

    model = _load_model(args.checkpoint)
    failed = 0
    for path, score, label in detect_paths(model, args.paths, args.threshold):
        if label is None:
            failed += 1
            print(f"{path}: {score}", file=sys.stderr)
            continue
        print(f"{path}\t{score:.6f}\t{label}")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_grad_check(args):
    from .gradcheck import TOLERANCE, run_all

    results = run_all(args.seed, args.configs)
    for r in results:
        print(f"{r.loss}\t{r.worst:.3e}\t{'ok' if r.ok else 'FAIL'}")
    bad = [r.loss for r in results if not r.ok]
    if bad:
        print(f"gradient check failed (tolerance {TOLERANCE:g}): {', '.join(bad)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_desk_experiment(args):
    from .experiment import HEADLINE_CELLS, ensure_corpus, run_desk_experiment
    from .plotting import plot_robustness

    os.makedirs(args.out, exist_ok=True)
    manifest = args.manifest or ensure_corpus(os.path.join(args.out, "corpus"), seed=args.corpus_seed)
    result = run_desk_experiment(manifest, seeds=tuple(range(args.seeds)),
                                 stage1_epochs=args.stage1_epochs, stage2_epochs=args.stage2_epochs,
                                 workdir=os.path.join(args.out, "checkpoints"))
    rows_path = os.path.join(args.out, "desk_results.tsv")
    with open(rows_path, "w", encoding="utf-8") as fh:
        fh.write(result.to_tsv())
    with open(os.path.join(args.out, "desk_medians.tsv"), "w", encoding="utf-8") as fh:
        fh.write(result.median_table())
    for seed, rep in result.robustness.items():
        rep.write_tsv(os.path.join(args.out, f"robustness_seed{seed}.tsv"))
        plot_robustness(rep, os.path.join(args.out, f"robustness_seed{seed}.png"))
    sys.stdout.write(result.median_table())
    for t, s in HEADLINE_CELLS:
        print(f"median AP {t}={s}: {result.median_cell_ap(t, s):.4f}", file=sys.stderr)
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="ntf", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=_threads, default=None,
                   help="worker and BLAS thread cap (default: $NTF_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic four-family corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n-per-family", type=int, default=500)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-train-real", type=int, default=None)
    g.add_argument("--n-train-fake", type=int, default=None)
    g.set_defaults(func=cmd_gen_data)

    def training(name, func, stage2=False):
        t = sub.add_parser(name, help=f"run training stage {2 if stage2 else 1}")
        t.add_argument("--manifest", required=True)
        if stage2:
            t.add_argument("--stage1", required=True, help="stage-1 checkpoint")
        t.add_argument("--config", help="key=value config file")
        t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        t.add_argument("--epochs", type=int)
        t.add_argument("--seed", type=int)
        t.add_argument("--out-checkpoint", required=True)
        t.add_argument("--loss-log", help="loss TSV path (default: next to the checkpoint)")
        t.set_defaults(func=func)

    training("train-stage1", cmd_train_stage1)
    training("train-stage2", cmd_train_stage2, stage2=True)

    for name, func, help_text in (("eval", cmd_eval, "clean per-family evaluation"),
                                  ("robustness", cmd_robustness, "perturbation sweep")):
        e = sub.add_parser(name, help=help_text)
        e.add_argument("--manifest", required=True)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--report", help="TSV path; a PNG figure is written next to it")
        e.add_argument("--threshold", type=float, default=0.5)
        if name == "robustness":
            e.add_argument("--seed", type=int, default=0, help="noise seed")
        e.set_defaults(func=func)

    d = sub.add_parser("detect", help="score image files")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--threshold", type=float, default=0.5)
    d.add_argument("paths", nargs="+")
    d.set_defaults(func=cmd_detect)

    c = sub.add_parser("grad-check", help="finite-difference check of every loss")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--configs", type=int, default=10)
    c.set_defaults(func=cmd_grad_check)

    x = sub.add_parser("desk-experiment", help="multi-seed variant comparison")
    x.add_argument("--out", required=True)
    x.add_argument("--manifest", help="existing corpus (default: generate under --out)")
    x.add_argument("--corpus-seed", type=int, default=0)
    x.add_argument("--seeds", type=int, default=5)
    x.add_argument("--stage1-epochs", type=int, default=30)
    x.add_argument("--stage2-epochs", type=int, default=10)
    x.set_defaults(func=cmd_desk_experiment)
    return p


def _thread_limit(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.threads is None:
            args.threads = _default_threads()
        with _thread_limit(args.threads):
            return args.func(args)
    except (UsageError, ConfigError, ArgumentError, ContractError, DimensionError) as exc:
        print(f"ntf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"ntf: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ManifestError, ImageDecodeError, CheckpointError, DataError) as exc:
        print(f"ntf: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
