"""Command-line harness tying preprocessing, training, experiments and
reporting into reproducible runs.

Subcommands: preprocess, synth, train, experiment, report, selftest,
bench.  Flat ``key = value`` config files are supported everywhere via
``--config``; precedence is CLI > file > defaults, and every run writes
its resolved configuration next to its results so a run can be
reconstructed from its output directory alone.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audio import (decode_wav, pad_or_segment, resample_audio, save_cache_entry,
                    stft_magnitude)
from .datasets import DatasetManifest, SynthConfig, build_folds, synth_generate
from .errors import DataError
from .interp import ScaleSet
from .stats import improvement_summary, wilcoxon_signed_rank
from .trainer import (DEFAULT_SCALE_SETS, TrainConfig, run_experiment, run_fold,
                      timing_ratio)

RESULTS_VERSION = 1


def read_config_file(path):
    """Flat ``key = value`` lines; '#' starts a comment."""
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"config line {raw!r} is not 'key = value'")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def resolve_option(args, file_values, name, default, cast=str):
    cli = getattr(args, name, None)
    if cli is not None:
        return cli
    if name in file_values:
        return cast(file_values[name])
    return default


def write_resolved_config(out_dir, resolved):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# mtsconv {__version__}"]
    lines += [f"{k} = {v}" for k, v in sorted(resolved.items())]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def _append_results(out_dir, records):
    path = Path(out_dir) / "results.jsonl"
    with open(path, "a") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def _result_records(dataset, seed, results, config_echo):
    records = []
    for res in results:
        for fold in res.folds:
            records.append({
                "version": RESULTS_VERSION,
                "code_version": __version__,
                "dataset": dataset,
                "arch": res.arch,
                "type": res.variant,
                "fold": fold.fold,
                "seed": seed,
                "l2": res.l2,
                "scales": str(res.scales) if res.scales else None,
                "val_accuracy": fold.val_accuracy,
                "test_accuracy": fold.test_accuracy,
                "epochs": fold.epochs_run,
                "seconds_per_epoch": fold.seconds_per_epoch,
                "usage": fold.usage,
                "config": config_echo,
            })
    return records


# -- subcommands ----------------------------------------------------------------


def cmd_preprocess(args):
    file_values = read_config_file(args.config) if args.config else {}
    manifest = DatasetManifest.read_csv(args.manifest)
    out_dir = Path(args.out)
    mode = resolve_option(args, file_values, "mode", "pad")
    root = Path(args.manifest).parent
    specs = {}
    for entry in manifest.entries:
        clip = resample_audio(decode_wav(root / entry.path))
        specs[entry.uid] = stft_magnitude(clip)
    target = None
    if mode == "pad":
        target = args.pad_frames or max(s.num_frames for s in specs.values())
    count = 0
    for entry in manifest.entries:
        pieces = pad_or_segment(specs[entry.uid], mode, target_frames=target)
        for i, piece in enumerate(pieces):
            uid = entry.uid if len(pieces) == 1 and mode == "pad" else f"{entry.uid}.seg{i:02d}"
            save_cache_entry(out_dir / "cache", uid, piece.frames, {
                "label": entry.label, "speaker": entry.speaker, "utterance": entry.uid,
            })
            count += 1
    manifest.write_csv(out_dir / "manifest.csv")
    write_resolved_config(out_dir, {
        "subcommand": "preprocess", "manifest": str(args.manifest),
        "mode": mode, "pad_frames": target, "entries": len(manifest.entries),
        "cache_files": count,
    })
    print(f"preprocessed {len(manifest.entries)} utterances -> {count} cache files in {out_dir}")
    return 0


def cmd_synth(args):
    file_values = read_config_file(args.config) if args.config else {}
    cfg = SynthConfig(
        classes=resolve_option(args, file_values, "classes", 4, int),
        samples_per_class=resolve_option(args, file_values, "samples_per_class", 200, int),
        factors=tuple(ScaleSet.parse(
            resolve_option(args, file_values, "factors", "0.5,1,2"))),
        noise=resolve_option(args, file_values, "noise", SynthConfig.noise, float),
        seed=resolve_option(args, file_values, "seed", 0, int),
        speakers=resolve_option(args, file_values, "speakers", 12, int),
    )
    out_dir = Path(args.out)
    manifest, cache_dir = synth_generate(cfg, out_dir)
    write_resolved_config(out_dir, {
        "subcommand": "synth", "classes": cfg.classes,
        "samples_per_class": cfg.samples_per_class, "factors": cfg.factors,
        "noise": cfg.noise, "seed": cfg.seed, "speakers": cfg.speakers,
        "frames": cfg.frames, "bins": cfg.bins,
    })
    print(f"generated {len(manifest.entries)} samples in {out_dir}")
    return 0


def _train_config(args, file_values):
    return TrainConfig(
        max_epochs=resolve_option(args, file_values, "epochs", 500, int),
        patience=resolve_option(args, file_values, "patience", 10, int),
        batch_size=resolve_option(args, file_values, "batch_size", 32, int),
        learning_rate=resolve_option(args, file_values, "learning_rate", 1e-3, float),
        l2=resolve_option(args, file_values, "l2", 1e-4, float),
        seed=resolve_option(args, file_values, "seed", 0, int),
    )


def cmd_train(args):
    file_values = read_config_file(args.config) if args.config else {}
    manifest = DatasetManifest.read_csv(args.manifest)
    cache_dir = Path(args.data) if args.data else Path(args.manifest).parent / "cache"
    config = _train_config(args, file_values)
    scales = ScaleSet.parse(args.scales) if args.mts else None
    plan = build_folds(manifest, seed=config.seed)
    record, model = run_fold(manifest, plan, args.fold, cache_dir, args.arch,
                             scales, config, return_model=True)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save(out_dir / f"{args.arch}_{'mts' if args.mts else 'standard'}_fold{args.fold}.ckpt")
    variant = "mts" if args.mts else "standard"
    records = [{
        "version": RESULTS_VERSION, "code_version": __version__,
        "dataset": str(args.manifest), "arch": args.arch, "type": variant,
        "fold": args.fold, "seed": config.seed, "l2": config.l2,
        "scales": args.scales if args.mts else None,
        "val_accuracy": record.val_accuracy, "test_accuracy": record.test_accuracy,
        "epochs": record.epochs_run, "seconds_per_epoch": record.seconds_per_epoch,
        "usage": record.usage,
        "config": {"batch_size": config.batch_size, "learning_rate": config.learning_rate,
                   "max_epochs": config.max_epochs, "patience": config.patience},
    }]
    _append_results(out_dir, records)
    write_resolved_config(out_dir, {
        "subcommand": "train", "arch": args.arch, "mts": args.mts,
        "scales": args.scales if args.mts else None, "fold": args.fold,
        "seed": config.seed, "l2": config.l2, "batch_size": config.batch_size,
        "learning_rate": config.learning_rate, "epochs": config.max_epochs,
        "patience": config.patience, "manifest": str(args.manifest),
    })
    print(f"{args.arch} {variant} fold {args.fold}: "
          f"val {record.val_accuracy:.4f} test {record.test_accuracy:.4f} "
          f"({record.epochs_run} epochs, {record.seconds_per_epoch:.2f}s/epoch)")
    return 0


def cmd_experiment(args):
    file_values = read_config_file(args.config) if args.config else {}
    config = _train_config(args, file_values)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.dataset == "synth":
        synth_cfg = SynthConfig(seed=config.seed,
                                noise=resolve_option(args, file_values, "noise",
                                                     SynthConfig.noise, float))
        manifest, cache_dir = synth_generate(synth_cfg, out_dir / "synth")
        dataset_name = "synth"
    else:
        manifest = DatasetManifest.read_csv(args.dataset)
        cache_dir = Path(args.data) if args.data else Path(args.dataset).parent / "cache"
        dataset_name = str(args.dataset)
    archs = [a.strip() for a in args.archs.split(",") if a.strip()]
    scale_sets = ([ScaleSet.parse(args.scales)] if args.scales
                  else list(DEFAULT_SCALE_SETS))
    l2_grid = [float(tok) for tok in args.l2_grid.split(",")] if args.l2_grid else [config.l2]
    plan = build_folds(manifest, seed=config.seed)
    results = run_experiment(manifest, plan, cache_dir, archs, config,
                             l2_grid=l2_grid, scale_sets=scale_sets,
                             workers=args.workers)
    config_echo = {
        "batch_size": config.batch_size, "learning_rate": config.learning_rate,
        "max_epochs": config.max_epochs, "patience": config.patience,
        "l2_grid": l2_grid, "scale_sets": [str(s) for s in scale_sets],
    }
    _append_results(out_dir, _result_records(dataset_name, config.seed, results, config_echo))
    write_resolved_config(out_dir, {
        "subcommand": "experiment", "dataset": dataset_name, "archs": ",".join(archs),
        "seed": config.seed, "l2_grid": l2_grid,
        "scale_sets": ";".join(str(s) for s in scale_sets),
        "batch_size": config.batch_size, "learning_rate": config.learning_rate,
        "epochs": config.max_epochs, "patience": config.patience,
        "workers": args.workers,
    })
    print(render_experiment_table(results, dataset_name))
    ratio = timing_ratio(results)
    if ratio is not None:
        print(f"\nseconds/epoch ratio (multi-scale / standard): {ratio:.2f}")
    return 0


def render_experiment_table(results, dataset_name):
    """Rows standard/MTS x architecture columns, plus the winning scale
    factors and branch-usage fractions of the multi-scale row."""
    archs = sorted({r.arch for r in results})
    by = {(r.arch, r.variant): r for r in results}
    lines = []
    header = ["Dataset", "Type"] + archs + ["Best scale factors", "Use of parallel branches"]
    widths = None
    rows = []
    for variant, label in (("standard", "Standard"), ("mts", "MTS")):
        row = [dataset_name, label]
        for arch in archs:
            res = by.get((arch, variant))
            row.append(f"{100 * res.mean_test_accuracy:.2f}" if res else "-")
        if variant == "mts":
            best = max((by[(a, "mts")] for a in archs if (a, "mts") in by),
                       default=None, key=lambda r: r.mean_test_accuracy)
            row.append(str(best.scales) if best else "n/a")
            usage = best.mean_usage() if best else None
            row.append(", ".join(f"{u:.2f}" for u in usage) if usage else "n/a")
        else:
            row.extend(["n/a", "n/a"])
        rows.append(row)
    widths = [max(len(str(header[i])), *(len(str(r[i])) for r in rows))
              for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines.append(fmt.format(*header))
    for row in rows:
        lines.append(fmt.format(*row))
    return "\n".join(lines)


def _load_records(results_dir):
    path = Path(results_dir)
    files = [path] if path.is_file() else sorted(path.glob("**/results.jsonl"))
    records = []
    for file in files:
        for line in file.read_text().splitlines():
            if line.strip():
                records.append(json.loads(line))
    if not records:
        raise DataError(f"no results records under {results_dir}")
    return records


def aggregate_records(records):
    """Mean test accuracy per (dataset, arch, type, seed) cell."""
    cells = {}
    for rec in records:
        key = (rec["dataset"], rec["arch"], rec["type"], rec.get("seed", 0))
        cells.setdefault(key, []).append(rec["test_accuracy"])
    return {key: float(np.mean(vals)) for key, vals in cells.items()}


def paired_cells(records, level="cell"):
    """(standard, mts) accuracy pairs, cell-level or fold-level."""
    if level == "fold":
        cells = {}
        for rec in records:
            key = (rec["dataset"], rec["arch"], rec["type"], rec.get("seed", 0), rec["fold"])
            cells[key] = rec["test_accuracy"]
        pairs = []
        labels = []
        for key in sorted(cells):
            if key[2] != "standard":
                continue
            twin = (key[0], key[1], "mts", key[3], key[4])
            if twin in cells:
                pairs.append((cells[key], cells[twin]))
                labels.append(key[0])
        return pairs, labels
    cells = aggregate_records(records)
    pairs = []
    labels = []
    for key in sorted(cells):
        dataset, arch, typ, seed = key
        if typ != "standard":
            continue
        twin = (dataset, arch, "mts", seed)
        if twin in cells:
            pairs.append((cells[key], cells[twin]))
            labels.append(dataset)
    return pairs, labels


def cmd_report(args):
    records = _load_records(args.results)
    pairs, labels = paired_cells(records, level=args.pairing)
    if not pairs:
        raise DataError("results hold no matched standard/mts pairs")
    pct_pairs = [(100 * a, 100 * b) for a, b in pairs]
    summary = improvement_summary(pct_pairs, labels)
    wilcoxon = wilcoxon_signed_rank(pct_pairs)
    if args.format == "json":
        out = {
            "cells": [
                {"dataset": d, "standard": a, "mts": b}
                for (a, b), d in zip(pct_pairs, labels)
            ],
            "mean_delta_pp": summary.mean_delta,
            "std_delta_pp": summary.std_delta,
            "max_delta_pp": summary.max_delta,
            "per_dataset_means": summary.per_dataset_means,
            "wilcoxon_w": wilcoxon.statistic,
            "wilcoxon_p": wilcoxon.p_value,
            "pairing": args.pairing,
        }
        print(json.dumps(out, indent=1, sort_keys=True))
        return 0
    if args.format == "csv":
        print("dataset,standard,mts,delta_pp")
        for (a, b), d in zip(pct_pairs, labels):
            print(f"{d},{a:.2f},{b:.2f},{b - a:+.2f}")
        print(f"# mean {summary.mean_delta:+.2f} std {summary.std_delta:.2f} "
              f"max {summary.max_delta:+.2f}")
        print(f"# wilcoxon W={wilcoxon.statistic} p={wilcoxon.p_value:.6g} ({args.pairing} pairing)")
        return 0
    print(f"{'dataset':20s} {'standard':>9s} {'mts':>9s} {'delta':>7s}")
    for (a, b), d in zip(pct_pairs, labels):
        print(f"{d:20s} {a:9.2f} {b:9.2f} {b - a:+7.2f}")
    print(f"\nimprovement: mean {summary.mean_delta:+.2f} pp, "
          f"std {summary.std_delta:.2f}, max {summary.max_delta:+.2f}")
    print(f"two-sided Wilcoxon signed-rank ({args.pairing} pairing, n={wilcoxon.n}): "
          f"W={wilcoxon.statistic}, p={wilcoxon.p_value:.6g}")
    return 0


def cmd_selftest(args):
    from .selfcheck import (REL_TOL, degenerate_equivalence_check,
                            gradient_check_suite, stretch_detection_check)

    failures = 0
    results = gradient_check_suite(seeds=range(args.seeds))
    worst = max(err for _, err in results)
    ok = worst < REL_TOL
    failures += not ok
    print(f"gradient checks ({args.seeds} seeds, {len(results)} cases): "
          f"worst rel err {worst:.2e} -> {'PASS' if ok else 'FAIL'}")

    ok = degenerate_equivalence_check()
    failures += not ok
    print(f"degenerate equivalence (scale set {{1}} vs standard): "
          f"{'PASS' if ok else 'FAIL'}")

    report = stretch_detection_check()
    ok = all(
        case["winning_branch_factor"] == factor
        and case["mts_ratio"] >= 0.9 and case["std_ratio"] < 0.7
        for factor, case in report["cases"].items()
    )
    failures += not ok
    print(f"stretch detection (factors {sorted(report['cases'])}): "
          f"{'PASS' if ok else 'FAIL'}")
    return 1 if failures else 0


def cmd_bench(args):
    import timeit

    from .kernels import BACKEND, numpy_backend

    try:
        from .kernels import _convcore
    except ImportError:
        _convcore = None

    rng = np.random.default_rng(0)
    cases = {
        "A2-like [32,1,44,20] k[10,5]": ((32, 1, 44, 20), (10, 1, 10, 5)),
        "stretched branch k[20,5]": ((32, 1, 44, 20), (10, 1, 20, 5)),
        "deep [32,10,19,10] k[10,5]": ((32, 10, 19, 10), (10, 10, 10, 5)),
    }
    backends = [("numpy", numpy_backend)]
    if _convcore is not None:
        backends.append(("cython", _convcore))
    print(f"active backend: {BACKEND}")
    for label, (xs, ks) in cases.items():
        x = rng.normal(size=xs)
        k = rng.normal(size=ks)
        gy = rng.normal(size=numpy_backend.conv2d_forward(x, k).shape)
        print(f"\n{label}")
        for name, mod in backends:
            fwd = min(timeit.repeat(lambda: mod.conv2d_forward(x, k),
                                    number=args.reps, repeat=3)) / args.reps
            gk = min(timeit.repeat(lambda: mod.conv2d_grad_kernels(gy, x),
                                   number=args.reps, repeat=3)) / args.reps
            gi = min(timeit.repeat(lambda: mod.conv2d_grad_input(gy, k),
                                   number=args.reps, repeat=3)) / args.reps
            print(f"  {name:7s} forward {1e3 * fwd:7.2f} ms   "
                  f"grad_kernels {1e3 * gk:7.2f} ms   grad_input {1e3 * gi:7.2f} ms")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mtsconv",
        description="multi-time-scale convolution experiments on spectrogram data",
    )
    parser.add_argument("--version", action="version", version=f"mtsconv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="WAV manifest -> spectrogram cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["pad", "segment"], default=None)
    p.add_argument("--pad-frames", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a synthetic stretched-pattern corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--samples-per-class", dest="samples_per_class", type=int, default=None)
    p.add_argument("--factors", default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--speakers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one architecture on one fold")
    p.add_argument("--arch", required=True, choices=["A1", "A2", "A3", "A4"])
    p.add_argument("--mts", action="store_true")
    p.add_argument("--scales", default="0.5,1,2")
    p.add_argument("--manifest", required=True)
    p.add_argument("--data", default=None, help="cache directory (default: next to manifest)")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", default="runs")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--l2", type=float, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", help="standard-vs-MTS comparison over architectures")
    p.add_argument("--dataset", required=True, help="'synth' or a manifest path")
    p.add_argument("--data", default=None)
    p.add_argument("--archs", default="A1,A2")
    p.add_argument("--scales", default=None,
                   help="one scale set; default searches the built-in combinations")
    p.add_argument("--l2-grid", dest="l2_grid", default=None)
    p.add_argument("--out", default="runs")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--l2", type=float, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="render comparison table + significance")
    p.add_argument("--in", dest="results", required=True)
    p.add_argument("--format", choices=["table", "csv", "json"], default="table")
    p.add_argument("--pairing", choices=["cell", "fold"], default="cell")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="gradient + equivalence + stretch checks")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("bench", help="compare compiled and numpy convolution kernels")
    p.add_argument("--reps", type=int, default=10)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
