"""Command-line entry point: gen-data, train, attribute, evaluate, compare.

Exit codes: 0 success, 2 missing or unreadable inputs, 3 inconsistent inputs,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import classifier as clf
from . import evaluate as ev
from . import iba as iba_mod
from . import synth
from . import tensor as T
from .detect import DEFAULT_MIN_AREA, DEFAULT_TAU, detection_report
from .gradcam import gradcam_heatmap
from .heatmap import HeatmapFormatError, load_heatmap

log = logging.getLogger("deskiba")

EXIT_OK, EXIT_MISSING, EXIT_INCONSISTENT, EXIT_INTERNAL = 0, 2, 3, 4
JOBS_ENV = "DESKIBA_JOBS"
RUN_CONFIG = "run_config.json"
DIAGNOSTICS = "diagnostics.json"
MAX_LISTED_MISMATCHES = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers


def _dump(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as err:
        raise CliError(EXIT_MISSING, f"cannot write {path}: {err}") from err


def _make_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise CliError(EXIT_MISSING, f"cannot create output directory {path}: {err}") from err
    if not os.access(path, os.W_OK):
        raise CliError(EXIT_MISSING, f"output directory {path} is not writable")
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _parse_counts(text: str) -> dict:
    counts = {}
    for item in text.split(","):
        key, sep, value = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected CLASS=N, got {item!r}")
        try:
            name = synth.SEVERITIES[synth.parse_severity(key.strip())]
            n = int(value)
        except ValueError as err:
            raise argparse.ArgumentTypeError(str(err)) from None
        if n < 0:
            raise argparse.ArgumentTypeError(f"negative count for {name}")
        counts[name] = n
    return counts


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _default_jobs() -> int:
    raw = os.environ.get(JOBS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError(EXIT_INCONSISTENT, f"{JOBS_ENV}={raw!r} is not an integer") from None


def _load_data(path: Path) -> synth.Dataset:
    if not path.is_dir():
        raise CliError(EXIT_MISSING, f"dataset directory not found: {path}")
    try:
        return synth.load_dataset(path)
    except synth.DatasetMissingError as err:
        raise CliError(EXIT_MISSING, str(err)) from err
    except synth.DatasetFormatError as err:
        raise CliError(EXIT_INCONSISTENT, str(err)) from err


def _load_model(path: Path, arch: str | None = None) -> clf.Model:
    if not path.is_file():
        raise CliError(EXIT_MISSING, f"model file not found: {path}")
    try:
        return clf.load_checkpoint(path, arch)
    except clf.ArchitectureMismatch as err:
        raise CliError(EXIT_INCONSISTENT, str(err)) from err
    except (clf.CheckpointError, OSError) as err:
        raise CliError(EXIT_MISSING, str(err)) from err


def _stats(model: clf.Model, dataset: synth.Dataset) -> clf.FeatureStats:
    return clf.estimate_stats(model, clf.default_stats_images(dataset))


def _bottleneck(args) -> iba_mod.BottleneckConfig:
    try:
        return iba_mod.BottleneckConfig(
            beta=args.beta,
            steps=args.steps,
            learning_rate=args.iba_lr,
            samples=args.samples,
            alpha_init=args.alpha_init,
            smoothing_sigma=args.smoothing_sigma,
            seed=args.seed,
            readout=args.readout,
        )
    except ValueError as err:
        raise CliError(EXIT_INCONSISTENT, str(err)) from err


def _side_path(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    out = _make_dir(Path(args.out))
    t0 = time.perf_counter()
    try:
        dataset = synth.generate_dataset(args.counts, args.seed)
    except synth.GenerationError as err:
        raise CliError(EXIT_INTERNAL, str(err)) from err
    try:
        synth.save_dataset(dataset, out)
    except OSError as err:
        raise CliError(EXIT_MISSING, f"cannot write dataset to {out}: {err}") from err
    config = {"subcommand": "gen-data", "seed": args.seed, "counts": dataset.counts}
    _write_text(out / RUN_CONFIG, _dump(config))
    log.info(
        "gen-data: %d samples (%d train / %d test) in %.1fs",
        len(dataset.samples), len(dataset.train), len(dataset.test), time.perf_counter() - t0,
    )
    return EXIT_OK


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    dataset = _load_data(Path(args.data))
    out = Path(args.out)
    _make_dir(out.parent if str(out.parent) else Path("."))
    try:
        config = clf.TrainConfig(
            epochs=args.epochs,
            batch_size=args.batch_size,
            learning_rate=args.lr,
            seed=args.seed,
            precision=args.precision,
        )
        model = clf.build_model(args.arch, args.seed)
        t0 = time.perf_counter()
        history = clf.train(model, dataset, config)
    except clf.ConfigurationError as err:
        raise CliError(EXIT_INCONSISTENT, str(err)) from err
    if not all(np.isfinite(history.loss)):
        raise CliError(EXIT_INTERNAL, "training loss became non-finite")
    try:
        clf.save_checkpoint(model, out)
    except OSError as err:
        raise CliError(EXIT_MISSING, f"cannot write {out}: {err}") from err
    _write_text(_side_path(out, ".history.json"), _dump(asdict(history)))
    echo = {
        "subcommand": "train",
        "arch": model.arch,
        "parameters": model.parameter_count(),
        "train": asdict(config),
        "dataset_manifest_sha256": _sha256(Path(args.data) / synth.MANIFEST),
    }
    _write_text(_side_path(out, ".config.json"), _dump(echo))
    final = history.test_accuracy[-1] if history.test_accuracy else float("nan")
    log.info("train: %s, %d epochs, test accuracy %.3f in %.1fs", model.arch, config.epochs, final, time.perf_counter() - t0)
    return EXIT_OK


# ---------------------------------------------------------------- attribute

_worker: dict = {}


def _init_worker(model, stats, method, config, use_roi):
    _worker.update(model=model, stats=stats, method=method, config=config, use_roi=use_roi)


def _attribute_one(sample: synth.Sample):
    w = _worker
    roi = sample.lung_mask if w["use_roi"] else None
    if w["method"] == "gradcam":
        heat = gradcam_heatmap(w["model"], sample.image[None], roi)
        return sample.id, heat, None
    cfg = ev.sample_config(w["config"], sample.id)
    heat, _, _, diag = iba_mod.attribute(w["model"], sample.image[None], w["stats"], cfg, roi)
    return sample.id, heat, asdict(diag)


def cmd_attribute(args) -> int:
    model = _load_model(Path(args.model), args.arch)
    dataset = _load_data(Path(args.data))
    out = _make_dir(Path(args.out))
    config = _bottleneck(args)
    jobs = args.jobs if args.jobs is not None else _default_jobs()
    stats = _stats(model, dataset) if args.method == "iba" else None
    samples = dataset.test
    use_roi = not args.no_roi

    t0 = time.perf_counter()
    init = (model, stats, args.method, config, use_roi)
    if jobs > 1 and len(samples) > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=init) as pool:
            results = list(pool.map(_attribute_one, samples, chunksize=max(1, len(samples) // (4 * jobs))))
    else:
        _init_worker(*init)
        results = [_attribute_one(s) for s in samples]

    diagnostics = {}
    for sid, heat, diag in results:
        if not np.all(np.isfinite(heat.values)) or np.any(heat.values < 0):
            raise CliError(EXIT_INTERNAL, f"{sid}: heatmap has negative or non-finite values")
        try:
            heat.save(out, sid)
        except OSError as err:
            raise CliError(EXIT_MISSING, f"cannot write heatmap for {sid}: {err}") from err
        if diag is not None:
            diagnostics[sid] = diag
    if diagnostics:
        _write_text(out / DIAGNOSTICS, _dump(diagnostics))
    echo = {
        "subcommand": "attribute",
        "method": args.method,
        "arch": model.arch,
        "roi": use_roi,
        "split": "test",
        "model_sha256": _sha256(Path(args.model)),
        "dataset_manifest_sha256": _sha256(Path(args.data) / synth.MANIFEST),
    }
    if args.method == "iba":
        echo["iba"] = config.to_dict()
        echo["per_image_seed"] = "derived from seed and sample id"
    _write_text(out / RUN_CONFIG, _dump(echo))
    log.info("attribute: %s on %d images with %d job(s) in %.1fs", args.method, len(samples), jobs, time.perf_counter() - t0)
    return EXIT_OK


# ---------------------------------------------------------------- evaluate / compare


def _load_heatmap_dir(path: Path) -> dict:
    if not path.is_dir():
        raise CliError(EXIT_MISSING, f"heatmap directory not found: {path}")
    maps = {}
    for file in sorted(path.glob("*.json")):
        if file.name in (RUN_CONFIG, DIAGNOSTICS):
            continue
        try:
            sid, heat = load_heatmap(file)
        except HeatmapFormatError as err:
            raise CliError(EXIT_MISSING, str(err)) from err
        maps[sid] = heat
    if not maps:
        raise CliError(EXIT_INCONSISTENT, f"no heatmaps in {path}")
    return maps


def _check_ids(maps: dict, samples) -> None:
    expected = {s.id for s in samples}
    found = set(maps)
    if expected == found:
        return
    missing = sorted(expected - found)
    extra = sorted(found - expected)
    listed = [f"missing {i}" for i in missing] + [f"unexpected {i}" for i in extra]
    shown = ", ".join(listed[:MAX_LISTED_MISMATCHES])
    more = f" (+{len(listed) - MAX_LISTED_MISMATCHES} more)" if len(listed) > MAX_LISTED_MISMATCHES else ""
    raise CliError(EXIT_INCONSISTENT, f"heatmap ids do not match the test split: {shown}{more}")


def _write_report(report: ev.MetricsReport, out: Path, echo: dict) -> None:
    _make_dir(out.parent if str(out.parent) else Path("."))
    _write_text(out, _dump(report.to_dict()))
    summary = report.summary()
    _write_text(_side_path(out, ".txt"), summary)
    _write_text(_side_path(out, ".config.json"), _dump(echo))
    sys.stdout.write(summary)


def cmd_evaluate(args) -> int:
    model = _load_model(Path(args.model), args.arch)
    dataset = _load_data(Path(args.data))
    maps = _load_heatmap_dir(Path(args.heatmaps))
    samples = dataset.test
    _check_ids(maps, samples)
    methods = sorted({h.method for h in maps.values()})
    if len(methods) != 1:
        raise CliError(EXIT_INCONSISTENT, f"heatmap directory mixes methods {methods}")
    for sid, heat in maps.items():
        if heat.shape != (synth.SIZE, synth.SIZE):
            raise CliError(EXIT_INCONSISTENT, f"{sid}: heatmap shape {heat.shape}")
    method = methods[0]
    report = ev.evaluate_heatmaps(model, samples, {method: maps}, args.tau, severity_method=method)
    out = Path(args.out)
    det_dir = _make_dir(out.with_name(out.stem + "_detections"))
    _, predicted = ev.classify(model, samples)
    for s, label in zip(samples, predicted):
        doc = detection_report(maps[s.id], s.lung_mask, int(label), args.tau, args.min_area, method)
        doc["id"] = s.id
        _write_text(det_dir / f"{s.id}.json", _dump(doc))
    echo = {
        "subcommand": "evaluate",
        "tau": args.tau,
        "min_area": args.min_area,
        "method": method,
        "arch": model.arch,
        "model_sha256": _sha256(Path(args.model)),
        "dataset_manifest_sha256": _sha256(Path(args.data) / synth.MANIFEST),
    }
    _write_report(report, out, echo)
    log.info("evaluate: %s heatmaps for %d images", method, len(samples))
    return EXIT_OK


def cmd_compare(args) -> int:
    model = _load_model(Path(args.model), args.arch)
    model_b = _load_model(Path(args.model_b)) if args.model_b else None
    dataset = _load_data(Path(args.data))
    config = _bottleneck(args)
    t0 = time.perf_counter()
    stats = _stats(model, dataset)
    stats_b = _stats(model_b, dataset) if model_b is not None else None
    report = ev.compare_methods(
        model, dataset.test, stats, config, args.tau, model_b, stats_b, eps_bits=args.eps_bits, delta=args.delta
    )
    echo = {
        "subcommand": "compare",
        "tau": args.tau,
        "iba": config.to_dict(),
        "eps_bits": args.eps_bits,
        "delta": args.delta,
        "arch": model.arch,
        "model_sha256": _sha256(Path(args.model)),
        "dataset_manifest_sha256": _sha256(Path(args.data) / synth.MANIFEST),
    }
    if model_b is not None:
        echo["arch_b"] = model_b.arch
        echo["model_b_sha256"] = _sha256(Path(args.model_b))
    _write_report(report, Path(args.out), echo)
    log.info("compare: done in %.1fs", time.perf_counter() - t0)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_iba_flags(p: argparse.ArgumentParser) -> None:
    d = iba_mod.BottleneckConfig()
    p.add_argument("--beta", type=float, default=d.beta)
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--iba-lr", type=float, default=d.learning_rate, help="Adam learning rate for the mask")
    p.add_argument("--samples", type=int, default=d.samples, help="noise draws per step")
    p.add_argument("--alpha-init", type=float, default=d.alpha_init)
    p.add_argument("--smoothing-sigma", type=float, default=d.smoothing_sigma)
    p.add_argument("--readout", choices=("capacity", "mask"), default=d.readout)
    p.add_argument("--seed", type=int, default=d.seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deskiba", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress per-stage log lines")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--counts", type=_parse_counts, default=None, help="e.g. CT0=400,CT1=250")
    p.set_defaults(func=cmd_gen_data)

    t = clf.TrainConfig()
    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--arch", default="A", choices=("A", "B", "DeskNet-A", "DeskNet-B"))
    p.add_argument("--seed", type=int, default=t.seed)
    p.add_argument("--epochs", type=int, default=t.epochs)
    p.add_argument("--batch-size", type=int, default=t.batch_size)
    p.add_argument("--lr", type=float, default=t.learning_rate)
    p.add_argument("--precision", choices=("float32", "float64"), default=t.precision)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attribute", help="write heatmaps for the test split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("iba", "gradcam"), default="iba")
    p.add_argument("--out", required=True)
    p.add_argument("--arch", default=None, help="expected checkpoint architecture")
    p.add_argument("--no-roi", action="store_true", help="do not restrict heatmaps to the lungs")
    p.add_argument("--jobs", type=_positive_int, default=None, help=f"worker processes (default ${JOBS_ENV} or 1)")
    _add_iba_flags(p)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("evaluate", help="score a heatmap directory")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--heatmaps", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--arch", default=None)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--min-area", type=int, default=DEFAULT_MIN_AREA)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="run and score IBA against Grad-CAM")
    p.add_argument("--model", required=True)
    p.add_argument("--model-b", default=None, help="second architecture for consistency")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--arch", default=None)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--eps-bits", type=float, default=0.01)
    p.add_argument("--delta", type=float, default=0.05)
    _add_iba_flags(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr
    )
    try:
        return args.func(args)
    except CliError as err:
        sys.stderr.write(f"deskiba {args.subcommand}: {err}\n")
        return err.code
    except (T.ShapeError, T.TapeError, AssertionError, FloatingPointError) as err:
        sys.stderr.write(f"deskiba {args.subcommand}: internal error: {err}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
