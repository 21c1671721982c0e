"""Command-line front end: ``make-data``, ``train``, ``eval`` and ``ablate``.

Every command writes into a temporary sibling directory and renames it into
place only after all files are complete, so a failed run never leaves a
half-written output directory behind. Errors print one line to stderr and
exit with status 2.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import ARMS, RunRecord, canonical_arm, run_arm, shape_for_model, split_path
from .config import OUTPUT_ENV, ConfigError, RunConfig, load_config
from .data import (
    DataFormatError,
    compute_imbalance_factor,
    export,
    holdout_dev,
    ingest,
    literal_retained_counts,
    make_long_tailed,
    synth_benchmark_splits,
)
from .evaluation import confusion, per_class_accuracy, top_k_error
from .models import forward, load_checkpoint, save_checkpoint
from .seeding import derive_seed

log = logging.getLogger("ltreweight")

FORMATS = ("csv", "cifar_binary", "idx_images")
EXIT_ERROR = 2


@contextmanager
def atomic_dir(target: Path):
    """Yield a scratch directory that replaces ``target`` on clean exit."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.tmp-", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialize {type(v).__name__}")


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _resolve_out(arg: str | None, cfg: RunConfig | None, default: str) -> Path:
    if arg:
        return Path(arg)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ENV) or default)


# ---------------------------------------------------------------- make-data


def cmd_make_data(args) -> int:
    if args.synth:
        if args.source:
            raise ValueError("pass either --synth or --source, not both")
        if args.literal_mu is not None:
            raise ValueError("--literal-mu applies to --source data only")
        train, dev, test = synth_benchmark_splits(
            args.num_classes,
            args.dims,
            args.imbalance_factor,
            args.base_count,
            args.class_separation,
            args.dev_per_class,
            args.test_per_class,
            derive_seed(args.seed, "data"),
        )
        source = {"kind": "synthetic", "num_classes": args.num_classes, "dims": args.dims,
                  "base_count": args.base_count, "class_separation": args.class_separation,
                  "test_per_class": args.test_per_class}
    else:
        if not args.source or not args.test_source:
            raise ValueError("make-data needs --synth, or both --source and --test-source")
        for p in (args.source, args.test_source):
            if not Path(p).exists():
                raise FileNotFoundError(f"{p} does not exist")
        full = ingest(args.source, args.source_format)
        test = ingest(args.test_source, args.source_format, full.num_classes)
        counts = None
        if args.literal_mu is not None:
            counts = literal_retained_counts(full.num_classes, int(full.class_counts.min()), args.literal_mu)
        lt = make_long_tailed(full, args.imbalance_factor, derive_seed(args.seed, "data"), counts=counts)
        train, dev = holdout_dev(lt, args.dev_per_class, derive_seed(args.seed, "dev_split"))
        source = {"kind": "file", "format": args.source_format,
                  "source": sha256_file(Path(args.source)), "test_source": sha256_file(Path(args.test_source)),
                  "literal_mu": args.literal_mu}

    out = _resolve_out(args.out, None, "data")
    with atomic_dir(out) as tmp:
        files = {}
        for name, ds in zip(("train", "dev", "test"), (train, dev, test)):
            path = split_path(tmp, name, args.format)
            export(ds, path, args.format)
            files[path.name] = sha256_file(path)
            if args.format == "idx_images":
                lab = path.with_name(path.name.replace("images", "labels"))
                files[lab.name] = sha256_file(lab)
        manifest = {
            "format": args.format,
            "seed": args.seed,
            "source": source,
            "imbalance_factor_requested": args.imbalance_factor,
            "imbalance_factor_achieved": compute_imbalance_factor(train),
            "dev_per_class": args.dev_per_class,
            "counts": {"train": train.class_counts, "dev": dev.class_counts, "test": test.class_counts},
            "files": files,
        }
        write_json(tmp / "manifest.json", manifest)
    print(f"wrote {out} (train {len(train)}, dev {len(dev)}, test {len(test)}; "
          f"IF {manifest['imbalance_factor_achieved']:g})")
    return 0


# ---------------------------------------------------------------- train


def _eps_rows(record: RunRecord, config_hash: str):
    """``(epoch, class, mean_eps, min_total_weight, config_hash)`` rows."""
    history = record.result.state.min_total_weight.history if record.result else []
    per_epoch_min: dict[int, float] = {}
    for epoch, m in history:
        per_epoch_min[epoch] = min(per_epoch_min.get(epoch, float("inf")), m)
    for epoch, means in record.eps_by_epoch.items():
        for c, m in enumerate(means):
            yield epoch, c, float(m), per_epoch_min.get(epoch, float("nan")), config_hash


def write_run(out: Path, cfg: RunConfig, record: RunRecord) -> None:
    """All per-run files; ``out`` must already exist."""
    h = cfg.config_hash
    k = record.confusion.shape[0]
    if record.result is not None and record.spec is not None:
        save_checkpoint(out / "model.ckpt", record.spec, record.result.theta,
                        {"config_hash": h, "seed": record.seed, "arm": record.arm})
    metric_keys = list(record.metrics[0]) if record.metrics else []
    write_csv(out / "metrics.csv", ["config_hash", "arm", "seed", *metric_keys],
              ([h, record.arm, record.seed, *(row[c] for c in metric_keys)] for row in record.metrics))
    write_csv(out / "confusion.csv", ["config_hash", "true_class", *(f"pred_{j}" for j in range(k))],
              ([h, i, *record.confusion[i]] for i in range(k)))
    acc = per_class_accuracy(record.confusion)
    write_csv(out / "per_class_accuracy.csv", ["config_hash", "class", "train_count", "accuracy"],
              ([h, c, record.train_counts[c], acc[c]] for c in range(k)))
    write_csv(out / "epsilon_summary.csv", ["epoch", "class", "mean_eps", "min_total_weight", "config_hash"],
              _eps_rows(record, h))
    if record.weight_sums:
        write_csv(out / "l2rw_weight_sums.csv", ["config_hash", "batch", "weight_sum"],
                  ([h, i, s] for i, s in enumerate(record.weight_sums)))
    write_json(out / "metadata.json", {
        "config_hash": h,
        "seed": record.seed,
        "arm": record.arm,
        "imbalance_factor": record.imbalance_factor,
        "top1_error": record.top1,
        "top3_error": record.top3,
        "top5_error": record.top5,
        "min_total_weight": record.min_total_weight,
        "train_counts": record.train_counts,
        "version": __version__,
        "config": cfg.text,
    })


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.train.seed
    arm = canonical_arm(args.arm) if args.arm else _mode_arm(cfg)
    out = _resolve_out(args.out, cfg, "runs/train")
    record = run_arm(cfg, arm, seed)
    with atomic_dir(out) as tmp:
        write_run(tmp, cfg, record)
    print(f"{record.arm} seed {seed}: top-1 {record.top1:.4f} top-3 {record.top3:.4f} "
          f"top-5 {record.top5:.4f} -> {out}")
    return 0


def _mode_arm(cfg: RunConfig) -> str:
    """Arm name matching the ``[train]`` section's mode and l2rw flags."""
    t = cfg.train
    if t.mode != "l2rw":
        return t.mode
    if t.l2rw_two_component and not t.l2rw_pretrain:
        raise ConfigError("l2rw_two_component requires l2rw_pretrain = true")
    if t.l2rw_two_component:
        return "l2rw+pretrain+two_component"
    return "l2rw+pretrain" if t.l2rw_pretrain else "l2rw"


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    spec, theta, extra = load_checkpoint(args.checkpoint)
    test = ingest(args.test, args.format, spec.num_classes, as_images=spec.kind == "small_cnn")
    test = shape_for_model(test, spec.kind)
    logits, _ = forward(spec, theta, test.features, track=False)
    k = spec.num_classes
    result = {f"top{j}_error": top_k_error(logits.data, test.labels, min(j, k)) for j in (1, 3, 5)}
    result["num_test"] = len(test)
    result["config_hash"] = extra.get("config_hash", "")
    cm = confusion(logits.data, test.labels, k)
    if args.out:
        with atomic_dir(Path(args.out)) as tmp:
            h = result["config_hash"]
            write_csv(tmp / "confusion.csv", ["config_hash", "true_class", *(f"pred_{j}" for j in range(k))],
                      ([h, i, *cm[i]] for i in range(k)))
            write_json(tmp / "metadata.json", {**result, "checkpoint": str(args.checkpoint),
                                               "checkpoint_sha256": sha256_file(Path(args.checkpoint)),
                                               "seed": extra.get("seed")})
    print(json.dumps(result, sort_keys=True))
    return 0


# ---------------------------------------------------------------- ablate


def _if_label(v: float) -> str:
    return f"{v:g}"


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    arms = [canonical_arm(a) for a in (args.arms.split(",") if args.arms else cfg.ablate.arms)]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.ablate.seeds)
    if args.imbalance_factors:
        factors = [float(v) for v in args.imbalance_factors.split(",")]
    else:
        factors = list(cfg.ablate.imbalance_factors) or [None]
    if not arms or not seeds:
        raise ValueError("ablate needs at least one arm and one seed")
    out = _resolve_out(args.out, cfg, "runs/ablate")
    records = run_ablation(cfg, arms, seeds, factors, log_progress=not args.quiet)
    with atomic_dir(out) as tmp:
        write_ablation(tmp, cfg, records, arms, factors)
    print(f"wrote {out} ({len(records)} runs)")
    return 0


def run_ablation(cfg: RunConfig, arms, seeds, factors, log_progress: bool = False) -> list[RunRecord]:
    """Run every ``(factor, arm, seed)`` triple sequentially."""
    records = []
    for f in factors:
        for arm in arms:
            for seed in seeds:
                rec = run_arm(cfg, arm, seed, f)
                if log_progress:
                    print(f"  {arm:<28} IF={_if_label(rec.requested_if):<6} seed={seed}  top-1 {rec.top1:.4f}",
                          file=sys.stderr)
                records.append(rec)
    return records


def write_ablation(root: Path, cfg: RunConfig, records: list[RunRecord], arms, factors) -> None:
    """Per-run directories plus the summary, details and figure-data CSVs."""
    h = cfg.config_hash
    labels = [_if_label(f if f is not None else cfg.data.imbalance_factor) for f in factors]
    for rec in records:
        d = root / "runs" / rec.arm / f"if_{_if_label(rec.requested_if)}" / f"seed_{rec.seed}"
        d.mkdir(parents=True)
        write_run(d, cfg, rec)

    write_csv(root / "runs.csv",
              ["config_hash", "arm", "imbalance_factor", "achieved_if", "seed", "top1_error", "top3_error",
               "top5_error", "min_total_weight", "max_weight_sum_deviation"],
              ([h, r.arm, _if_label(r.requested_if), r.imbalance_factor, r.seed, r.top1, r.top3, r.top5,
                r.min_total_weight, _sum_deviation(r)] for r in records))

    header = ["config_hash", "arm", *(f"top1_if_{lab}" for lab in labels), "min_total_weight"]
    rows = []
    for arm in arms:
        row = [h, arm]
        mine = [r for r in records if r.arm == arm]
        for lab in labels:
            vals = [r.top1 for r in mine if _if_label(r.requested_if) == lab]
            row.append(float(np.median(vals)))
        mins = [r.min_total_weight for r in mine if np.isfinite(r.min_total_weight)]
        row.append(min(mins) if mins else float("nan"))
        rows.append(row)
    write_csv(root / "summary.csv", header, rows)

    # figure data: confusion matrices summed over seeds, eps trajectories averaged over seeds
    for arm in arms:
        for lab in labels:
            group = [r for r in records if r.arm == arm and _if_label(r.requested_if) == lab]
            cm = sum(r.confusion for r in group)
            k = cm.shape[0]
            write_csv(root / f"confusion_{arm}_if_{lab}.csv",
                      ["config_hash", "true_class", *(f"pred_{j}" for j in range(k))],
                      ([h, i, *cm[i]] for i in range(k)))
            epochs = sorted({e for r in group for e in r.eps_by_epoch})
            if not epochs:
                continue
            eps_rows = []
            for e in epochs:
                stack = np.array([r.eps_by_epoch[e] for r in group if e in r.eps_by_epoch])
                with np.errstate(invalid="ignore"), _quiet_nan_warnings():
                    means = np.nanmean(stack, axis=0)
                eps_rows += [[h, e, c, means[c], group[0].train_counts[c]] for c in range(k)]
            write_csv(root / f"epsilon_{arm}_if_{lab}.csv",
                      ["config_hash", "epoch", "class", "mean_eps", "train_count"], eps_rows)

    write_json(root / "metadata.json", {
        "config_hash": h,
        "arms": list(arms),
        "seeds": sorted({r.seed for r in records}),
        "imbalance_factors": labels,
        "version": __version__,
        "config": cfg.text,
    })


@contextmanager
def _quiet_nan_warnings():
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


def _sum_deviation(r: RunRecord) -> float:
    """Largest ``|sum - 1|`` over non-degenerate l2rw batches (NaN for other arms)."""
    sums = [s for s in r.weight_sums if s != 0.0]
    if not r.weight_sums:
        return float("nan")
    return max((abs(s - 1.0) for s in sums), default=0.0)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ltreweight", description="Long-tailed example weighting experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("make-data", help="build long-tailed train/dev splits and a balanced test split")
    m.add_argument("--synth", action="store_true", help="sample Gaussian class clusters")
    m.add_argument("--source", help="balanced training file to subsample")
    m.add_argument("--test-source", help="balanced test file (copied unchanged)")
    m.add_argument("--source-format", choices=FORMATS, default="csv")
    m.add_argument("--format", choices=FORMATS, default="csv", help="export format (default: csv)")
    m.add_argument("--num-classes", type=int, default=10)
    m.add_argument("--dims", type=int, default=20)
    m.add_argument("--base-count", type=int, default=500, help="head-class count before the dev holdout")
    m.add_argument("--class-separation", type=float, default=4.0)
    m.add_argument("--test-per-class", type=int, default=100)
    m.add_argument("--imbalance-factor", type=float, default=100.0)
    m.add_argument("--dev-per-class", type=int, default=10)
    m.add_argument("--literal-mu", type=float, help="drop n*mu**y examples from class y instead of the geometric profile")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./data)")
    m.set_defaults(func=cmd_make_data)

    t = sub.add_parser("train", help="train one arm from a config file")
    t.add_argument("config")
    t.add_argument("--seed", type=int, help="overrides [train] seed")
    t.add_argument("--arm", choices=list(ARMS), help="overrides the mode in [train]")
    t.add_argument("--out", help="output directory (default: [output] dir, then ./runs/train)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    e.add_argument("checkpoint")
    e.add_argument("test")
    e.add_argument("--format", choices=FORMATS, default="csv")
    e.add_argument("--out", help="optional directory for confusion.csv and metadata.json")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run arms x seeds x imbalance factors")
    a.add_argument("config")
    a.add_argument("--arms", help=f"comma separated, from {', '.join(ARMS)} (default: [ablate] arms)")
    a.add_argument("--seeds", help="comma separated (default: [ablate] seeds)")
    a.add_argument("--imbalance-factors", help="comma separated; synthetic data only")
    a.add_argument("--out", help="output directory (default: [output] dir, then ./runs/ablate)")
    a.add_argument("-q", "--quiet", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, ValueError, FileNotFoundError, FloatingPointError, KeyError) as e:
        msg = str(e) if not isinstance(e, FileNotFoundError) or e.filename is None else f"no such file: {e.filename}"
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
