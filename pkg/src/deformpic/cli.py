"""``deformpic`` command line: gen-data, train, eval, compare, analyze.

Configuration precedence is flags > ``--config`` JSON file > defaults. Every
command writes its resolved configuration (``config.json``) next to its
outputs; wall-clock information goes only to ``run.meta``.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 numeric abort, 5 mismatch.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4, 5
VARIANT_FLAGS = ("deformpic", "mpm-baseline", "mpm-consistent", "static-den")
SPLITS = ("val", "train", "all")

log = logging.getLogger("deformpic")


class UsageError(Exception):
    pass


class MismatchError(Exception):
    pass


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in str(text).split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


# (flag, dest, type, default, help) -- also the schema for --config files
_COMMON = [
    ("--threads", "threads", int, None, "BLAS threads (fallback: $DEFORMPIC_THREADS; default: library choice)"),
]
_OPTIONS = {
    "gen-data": [
        ("--out", "out", str, None, "output dataset directory (required)"),
        ("--samples-per-cell", "samples_per_cell", int, 2, "records per (task, level)"),
        ("--n-points", "n_points", int, 1024, "points per target cloud"),
        ("--seed", "seed", int, 0, "global dataset seed"),
        ("--m", "m", int, 16, "patch count recorded in the manifest"),
        ("--k", "k", int, 8, "points per patch recorded in the manifest"),
        ("--tasks", "tasks", _csv_list(str), "reconstruction,denoising,registration", "comma-separated tasks"),
        ("--levels", "levels", _csv_list(int), "1,2,3,4,5", "comma-separated levels"),
    ],
    "train": [
        ("--data", "data", str, None, "dataset directory (required)"),
        ("--out", "out", str, None, "run directory (required)"),
        ("--variant", "variant", str, "deformpic", "one of " + ", ".join(VARIANT_FLAGS)),
        ("--preset", "preset", str, "desk", "model/optimizer preset: desk or paper"),
        ("--limit", "limit", int, 0, "use only the first N records (0 = all)"),
        ("--seed", "seed", int, 0, "model init and shuffling seed"),
        ("--epochs", "epochs", int, None, "override preset epochs"),
        ("--batch-size", "batch_size", int, None, "override preset batch size"),
        ("--lr-peak", "lr_peak", float, None, "override preset peak learning rate"),
        ("--lr-init", "lr_init", float, None, "override preset initial learning rate"),
        ("--warmup-epochs", "warmup_epochs", int, None, "override preset warmup epochs"),
        ("--weight-decay", "weight_decay", float, None, "override preset weight decay"),
        ("--dim", "dim", int, None, "override preset model width"),
        ("--heads", "heads", int, None, "override preset attention heads"),
        ("--den-blocks", "den_blocks", int, None, "override preset DEN depth"),
        ("--dtn-blocks", "dtn_blocks", int, None, "override preset DTN depth"),
        ("--drop-path", "drop_path_rate", float, None, "override preset drop-path rate"),
        ("--resume", "resume", str, None, "checkpoint directory to continue from (e.g. RUN/last)"),
    ],
    "eval": [
        ("--data", "data", str, None, "dataset directory (required)"),
        ("--out", "out", str, None, "report directory (required)"),
        ("--checkpoint", "checkpoint", str, None, "checkpoint directory (e.g. RUN/best)"),
        ("--model", "model", str, None, "stub model instead of a checkpoint: oracle or identity"),
        ("--split", "split", str, "val", "records to score: val, train or all"),
        ("--taus", "taus", _csv_list(float), "0.01,0.001", "F-score thresholds"),
        ("--seed", "seed", int, 0, "EMD subsampling seed"),
    ],
    "compare": [
        ("--a", "a", str, None, "first report (directory or report.json; required)"),
        ("--b", "b", str, None, "second report (directory or report.json; required)"),
        ("--out", "out", str, None, "output directory (required)"),
    ],
    "analyze": [
        ("--data", "data", str, None, "dataset directory (required)"),
        ("--checkpoint", "checkpoint", str, None, "checkpoint directory (required)"),
        ("--out", "out", str, None, "output directory (required)"),
        ("--split", "split", str, "val", "records to analyze: val, train or all"),
        ("--untrained", "untrained", bool, False, "use the checkpoint's config at initialization (control)"),
        ("--seed", "seed", int, 0, "k-means seed"),
    ],
}
_REQUIRED = {
    "gen-data": ("out",), "train": ("data", "out"), "eval": ("data", "out"),
    "compare": ("a", "b", "out"), "analyze": ("data", "checkpoint", "out"),
}
_HELP = {
    "gen-data": "generate a synthetic in-context dataset",
    "train": "train a model variant",
    "eval": "score a checkpoint (or stub model) per task and level",
    "compare": "per-cell deltas between two reports",
    "analyze": "task-feature dump, PCA projection and cluster purity",
}


def _add_option(parser, flag, dest, kind, default, help_text, suppress):
    dflt = argparse.SUPPRESS if suppress else default
    if kind is bool:
        parser.add_argument(flag, dest=dest, action="store_true", default=dflt, help=help_text)
    else:
        parser.add_argument(flag, dest=dest, type=kind, default=dflt, help=help_text)


def build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    """``suppress=True`` yields a parser whose namespace holds only explicit flags."""
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="deformpic", description=__doc__.splitlines()[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in _OPTIONS.items():
        p = sub.add_parser(name, help=_HELP[name], description=_HELP[name], formatter_class=fmt)
        p.add_argument("--config", dest="config", default=argparse.SUPPRESS if suppress else None,
                       help="JSON file of option values (keys as in config.json)")
        for spec in _COMMON + opts:
            _add_option(p, *spec, suppress=suppress)
    return parser


def resolve_config(argv) -> dict:
    """Merge defaults, config file and explicit flags; unknown keys are errors."""
    full = build_parser().parse_args(argv)
    explicit = vars(build_parser(suppress=True).parse_args(argv))
    command = full.command
    schema = {dest: (kind, default) for _, dest, kind, default, _ in _COMMON + _OPTIONS[command]}
    cfg = {dest: default for dest, (_, default) in schema.items()}
    for dest, (kind, default) in schema.items():
        if isinstance(kind, type) or default is None:
            continue
        cfg[dest] = kind(default)  # list-valued defaults
    if full.config:
        try:
            loaded = json.loads(Path(full.config).read_text())
        except OSError as exc:
            raise OSError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(schema) - {"command"})
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update({k: v for k, v in loaded.items() if k != "command"})
    explicit.pop("command", None)
    explicit.pop("config", None)
    cfg.update(explicit)
    missing = [k for k in _REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{command}: missing required option(s) " + ", ".join("--" + m.replace("_", "-") for m in missing))
    cfg["command"] = command
    return cfg


def _write_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    meta = {"started": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "argv": sys.argv[1:], "pid": os.getpid()}
    (out / "run.meta").write_text(json.dumps(meta, indent=1) + "\n")


def _thread_limit(cfg: dict):
    from threadpoolctl import threadpool_limits

    n = cfg.get("threads")
    if n is None and os.environ.get("DEFORMPIC_THREADS"):
        try:
            n = int(os.environ["DEFORMPIC_THREADS"])
        except ValueError as exc:
            raise UsageError("DEFORMPIC_THREADS must be an integer") from exc
    if n is not None and n < 1:
        raise UsageError("--threads must be positive")
    return threadpool_limits(limits=n)


def _split_index(n: int, split: str) -> np.ndarray:
    from .dataset import split_indices

    if split not in SPLITS:
        raise UsageError(f"--split must be one of {', '.join(SPLITS)}")
    train_idx, val_idx = split_indices(n)
    return {"val": val_idx, "train": train_idx, "all": np.arange(n)}[split]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> int:
    from .dataset import DatasetConfig, build_dataset

    dcfg = DatasetConfig(samples_per_cell=cfg["samples_per_cell"], n_points=cfg["n_points"], seed=cfg["seed"],
                         m=cfg["m"], k=cfg["k"], tasks=tuple(cfg["tasks"]), levels=tuple(cfg["levels"]))
    try:
        dcfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(cfg["out"])
    manifest = build_dataset(out, dcfg)
    _write_config(out, cfg)
    print(f"wrote {len(manifest['records'])} records to {out}")
    return EXIT_OK


def _model_and_train_cfg(cfg: dict, patch: dict):
    from .model import ModelConfig
    from .train import TrainConfig

    if cfg["variant"] not in VARIANT_FLAGS:
        raise UsageError(f"unknown variant {cfg['variant']!r}; choose from {', '.join(VARIANT_FLAGS)}")
    if cfg["preset"] not in ("desk", "paper"):
        raise UsageError("--preset must be desk or paper")
    model_keys = ("dim", "heads", "den_blocks", "dtn_blocks", "drop_path_rate")
    train_keys = ("epochs", "batch_size", "lr_peak", "lr_init", "warmup_epochs", "weight_decay")
    try:
        mcfg = ModelConfig.preset(cfg["preset"], variant=cfg["variant"].replace("-", "_"), m=patch["m"],
                                  k=patch["k"], **{k: cfg[k] for k in model_keys if cfg[k] is not None})
        tcfg = TrainConfig.preset(cfg["preset"], seed=cfg["seed"],
                                  **{k: cfg[k] for k in train_keys if cfg[k] is not None})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return mcfg, tcfg


def cmd_train(cfg: dict) -> int:
    from .dataset import Dataset, load_dataset
    from .plots import plot_training
    from .train import train

    ds = load_dataset(cfg["data"])
    if cfg["limit"] < 0:
        raise UsageError("--limit must be non-negative")
    if cfg["limit"]:
        ds = Dataset(ds.manifest, ds.samples[:cfg["limit"]], ds.fingerprint)
    mcfg, tcfg = _model_and_train_cfg(cfg, ds.manifest["patch"])
    out = Path(cfg["out"])
    _write_config(out, cfg)
    result = train(ds, mcfg, tcfg, out_dir=out, resume=cfg["resume"])
    with open(out / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    plot_training(rows, out / "training.png")
    print(f"trained {mcfg.variant} for {len(result.history)} epoch(s); best held-out CD {result.best_val:.6g}")
    return EXIT_OK


def _load_model(checkpoint: str, manifest: dict, untrained: bool = False):
    from .model import build_model
    from .train import load_checkpoint

    model, _, doc = load_checkpoint(checkpoint)
    patch = manifest["patch"]
    if (model.cfg.m, model.cfg.k) != (patch["m"], patch["k"]):
        raise MismatchError(f"checkpoint patch config (m={model.cfg.m}, k={model.cfg.k}) does not match "
                            f"dataset (m={patch['m']}, k={patch['k']})")
    if untrained:
        model = build_model(model.cfg, doc["model_seed"])
    return model, doc


def cmd_eval(cfg: dict) -> int:
    from .dataset import load_dataset, patchify
    from .evaluation import IdentityModel, OracleModel, evaluate
    from .plots import plot_report

    if (cfg["checkpoint"] is None) == (cfg["model"] is None):
        raise UsageError("eval needs exactly one of --checkpoint or --model")
    ds = load_dataset(cfg["data"])
    if cfg["model"] is not None:
        stubs = {"oracle": OracleModel, "identity": IdentityModel}
        if cfg["model"] not in stubs:
            raise UsageError(f"--model must be one of {', '.join(stubs)}")
        model = stubs[cfg["model"]]()
    else:
        model, _ = _load_model(cfg["checkpoint"], ds.manifest)
    index = _split_index(len(ds), cfg["split"])
    if len(index) == 0:
        raise UsageError(f"split {cfg['split']!r} is empty for this dataset")
    patch = ds.manifest["patch"]
    bank = patchify(ds.samples, patch["m"], patch["k"])
    report = evaluate(model, bank, index, taus=tuple(cfg["taus"]), seed=cfg["seed"],
                      dataset_fingerprint=ds.fingerprint)
    report.fingerprints["split"] = cfg["split"]
    out = Path(cfg["out"])
    _write_config(out, cfg)
    report.write(out)
    plot_report(report, out / "cd_by_level.png")
    for t in report.tasks():
        print(f"{t:15s} CD x1000 {report.task_average(t) * 1000:.4f}")
    return EXIT_OK


def cmd_compare(cfg: dict) -> int:
    from .evaluation import FingerprintMismatch, compare, load_report

    try:
        result = compare(load_report(cfg["a"]), load_report(cfg["b"]))
    except FingerprintMismatch as exc:
        raise MismatchError(str(exc)) from exc
    out = Path(cfg["out"])
    _write_config(out, cfg)
    (out / "comparison.json").write_text(json.dumps(result, indent=1) + "\n")
    for t, deltas in result["task_average_deltas"].items():
        print(f"{t:15s} dCD x1000 (b - a) {deltas['cd'] * 1000:+.4f}")
    return EXIT_OK


def cmd_analyze(cfg: dict) -> int:
    from .dataset import TASKS, load_dataset, patchify
    from .evaluation import cluster_purity, extract_task_features, pca
    from .plots import plot_projection

    ds = load_dataset(cfg["data"])
    model, _ = _load_model(cfg["checkpoint"], ds.manifest, cfg["untrained"])
    index = _split_index(len(ds), cfg["split"])
    patch = ds.manifest["patch"]
    bank = patchify(ds.samples, patch["m"], patch["k"])
    try:
        feats = extract_task_features(model, bank, index)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    n_tasks = len(np.unique(feats.tasks))
    if len(feats) < max(3, n_tasks):
        raise UsageError("too few records to analyze")
    proj = pca(feats.features, 2)
    purity = cluster_purity(feats.features, feats.tasks, k=max(2, n_tasks), seed=cfg["seed"])
    out = Path(cfg["out"])
    _write_config(out, cfg)
    d = feats.features.shape[1]
    with open(out / "features.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "level"] + [f"f{i}" for i in range(d)])
        for t, lv, row in zip(feats.tasks, feats.levels, feats.features):
            w.writerow([TASKS[t], lv] + [f"{x:.9g}" for x in row])
    with open(out / "projection.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "level", "x", "y"])
        for t, lv, (x, y) in zip(feats.tasks, feats.levels, proj.projection):
            w.writerow([TASKS[t], lv, f"{x:.9g}", f"{y:.9g}"])
    summary = {"variant": model.cfg.variant, "rows": len(feats), "distinct_rows": feats.n_distinct(),
               "purity": purity, "k": max(2, n_tasks),
               "explained_variance_ratio": [float(v) for v in proj.explained_variance_ratio],
               "dataset": ds.fingerprint, "untrained": cfg["untrained"]}
    (out / "analysis.json").write_text(json.dumps(summary, indent=1) + "\n")
    plot_projection(proj.projection, feats.tasks, out / "projection.png", proj.explained_variance_ratio)
    print(f"purity {purity:.4f} over {len(feats)} rows ({feats.n_distinct()} distinct feature vectors)")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "compare": cmd_compare, "analyze": cmd_analyze}


def main(argv=None) -> int:
    from .dataset import DatasetError
    from .train import TrainingAborted

    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        with _thread_limit(cfg):
            return COMMANDS[cfg["command"]](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (OSError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
