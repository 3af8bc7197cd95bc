"""Benchmark reports, report comparison and task-feature analysis."""
from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import TASKS, collate
from .geometry import chamfer_l2, emd, fscore

DEFAULT_TAUS = (0.01, 0.001)
EMD_POINTS = 256


class FingerprintMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# stand-in predictors
# ---------------------------------------------------------------------------

class OracleModel:
    """Returns the ground-truth query target patches."""

    name = "oracle"
    cfg = None

    def predict(self, batch):
        return batch["qt"]


class IdentityModel:
    """Returns the query input patches unchanged."""

    name = "identity"
    cfg = None

    def predict(self, batch):
        return batch["qi"]


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    cells: dict                      # (task, level) -> metric dict
    taus: tuple
    fingerprints: dict = field(default_factory=dict)

    def task_average(self, task: str, key: str = "cd") -> float:
        vals = [c[key] for (t, _), c in self.cells.items() if t == task]
        return float(np.mean(vals)) if vals else float("nan")

    def tasks(self):
        return [t for t in TASKS if any(k[0] == t for k in self.cells)]

    def metric_keys(self):
        return ["cd", "emd"] + [f"fscore@{tau:g}" for tau in self.taus]

    def to_dict(self) -> dict:
        cells = [{"task": t, "level": lv, **vals} for (t, lv), vals in sorted(
            self.cells.items(), key=lambda kv: (TASKS.index(kv[0][0]), kv[0][1]))]
        averages = {t: {k: self.task_average(t, k) for k in self.metric_keys()} for t in self.tasks()}
        return {"taus": list(self.taus), "fingerprints": self.fingerprints, "cells": cells,
                "task_averages": averages}

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        cells = {}
        for c in doc["cells"]:
            c = dict(c)
            cells[(c.pop("task"), int(c.pop("level")))] = c
        return cls(cells=cells, taus=tuple(doc["taus"]), fingerprints=doc.get("fingerprints", {}))

    def csv_rows(self):
        keys = self.metric_keys()
        header = ["task", "level", "count", "cd_x1000", "emd_x1000"] + [f"fscore@{t:g}" for t in self.taus]
        rows = [header]
        scale = {"cd": 1000.0, "emd": 1000.0}
        for t in self.tasks():
            levels = sorted(lv for (tt, lv) in self.cells if tt == t)
            for lv in levels:
                c = self.cells[(t, lv)]
                rows.append([t, lv, c["count"]] + [f"{c[k] * scale.get(k, 1.0):.6f}" for k in keys])
            rows.append([t, "avg", sum(self.cells[(t, lv)]["count"] for lv in levels)]
                        + [f"{self.task_average(t, k) * scale.get(k, 1.0):.6f}" for k in keys])
        return rows

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.csv_rows())
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def load_report(path) -> MetricsReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return MetricsReport.from_dict(json.loads(path.read_text()))


def config_fingerprint(cfg) -> str:
    if cfg is None:
        return "none"
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def emd_subsample(pred: np.ndarray, gt: np.ndarray, record_index: int, seed: int = 0,
                  max_points: int = EMD_POINTS):
    """Uniform subsample of both clouds to a common size, keyed on the record index."""
    size = min(max_points, pred.shape[0], gt.shape[0])
    rng = np.random.default_rng([seed, record_index])
    idx_p = np.sort(rng.choice(pred.shape[0], size=size, replace=False))
    idx_g = idx_p if gt.shape[0] == pred.shape[0] else np.sort(rng.choice(gt.shape[0], size=size, replace=False))
    return pred[idx_p], gt[idx_g]


def sample_metrics(pred: np.ndarray, gt: np.ndarray, record_index: int, taus, seed: int = 0) -> dict:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    out = {"cd": chamfer_l2(pred, gt), "emd": emd(*emd_subsample(pred, gt, record_index, seed))}
    for tau in taus:
        out[f"fscore@{tau:g}"] = fscore(pred, gt, tau)[2]
    return out


def evaluate(model, bank: dict, index=None, taus=DEFAULT_TAUS, seed: int = 0, batch_size: int = 64,
             dataset_fingerprint: str = "") -> MetricsReport:
    """Score ``model.predict`` against ground-truth query target patches.

    ``bank`` comes from :func:`deformpic.dataset.patchify`; ``index`` selects
    records (default: all). Metrics are averaged per (task, level).
    """
    n = bank["task"].shape[0]
    index = np.arange(n) if index is None else np.asarray(index)
    cfg = getattr(model, "cfg", None)
    if cfg is not None and (cfg.m, cfg.k) != bank["qt"].shape[1:3]:
        raise FingerprintMismatch(
            f"model patch config (m={cfg.m}, k={cfg.k}) does not match data {bank['qt'].shape[1:3]}")
    sums: dict = {}
    for start in range(0, len(index), batch_size):
        chunk = index[start:start + batch_size]
        batch = collate(bank, chunk)
        preds = np.asarray(model.predict(batch))
        for j, rec in enumerate(chunk):
            key = (TASKS[int(bank["task"][rec])], int(bank["level"][rec]))
            metrics = sample_metrics(preds[j], batch["qt"][j], int(rec), taus, seed)
            cell = sums.setdefault(key, {"count": 0, **{k: 0.0 for k in metrics}})
            cell["count"] += 1
            for k, v in metrics.items():
                cell[k] += v
    cells = {key: {"count": c["count"], **{k: v / c["count"] for k, v in c.items() if k != "count"}}
             for key, c in sums.items()}
    fp = {"dataset": dataset_fingerprint, "model": getattr(model, "name", None) or config_fingerprint(cfg),
          "config": config_fingerprint(cfg), "seed": seed}
    return MetricsReport(cells=cells, taus=tuple(taus), fingerprints=fp)


def compare(report_a: MetricsReport, report_b: MetricsReport) -> dict:
    """Per-cell ``b - a`` deltas and a sign summary (lower CD/EMD, higher F-score wins)."""
    fa, fb = report_a.fingerprints.get("dataset"), report_b.fingerprints.get("dataset")
    if fa != fb:
        raise FingerprintMismatch(f"reports come from different datasets ({fa} vs {fb})")
    keys = [k for k in report_a.metric_keys() if k in report_b.metric_keys()]
    cells, wins = [], {k: {"a": 0, "b": 0, "tie": 0} for k in keys}
    for key in sorted(set(report_a.cells) & set(report_b.cells), key=lambda kv: (TASKS.index(kv[0]), kv[1])):
        a, b = report_a.cells[key], report_b.cells[key]
        row = {"task": key[0], "level": key[1]}
        for k in keys:
            delta = b[k] - a[k]
            row[k] = delta
            better_b = delta > 0 if k.startswith("fscore") else delta < 0
            wins[k]["tie" if delta == 0 else ("b" if better_b else "a")] += 1
        cells.append(row)
    averages = {}
    for t in sorted({c["task"] for c in cells}, key=TASKS.index):
        averages[t] = {k: report_b.task_average(t, k) - report_a.task_average(t, k) for k in keys}
    return {"dataset": fa, "a": report_a.fingerprints, "b": report_b.fingerprints,
            "cells": cells, "task_average_deltas": averages, "wins": wins}


# ---------------------------------------------------------------------------
# task features
# ---------------------------------------------------------------------------

@dataclass
class TaskFeatureSet:
    tasks: np.ndarray      # (n,) task ids
    levels: np.ndarray     # (n,)
    features: np.ndarray   # (n, d)

    def __len__(self) -> int:
        return self.features.shape[0]

    def n_distinct(self) -> int:
        return int(np.unique(self.features, axis=0).shape[0])


def extract_task_features(model, bank: dict, index=None, batch_size: int = 64) -> TaskFeatureSet:
    from . import tensor as T

    if not hasattr(model, "task_features"):
        raise ValueError("model has no deformation-extraction stage (MPM variants carry no task token)")
    n = bank["task"].shape[0]
    index = np.arange(n) if index is None else np.asarray(index)
    feats = []
    with T.no_grad():
        for start in range(0, len(index), batch_size):
            feats.append(model.task_features(collate(bank, index[start:start + batch_size])).data)
    d = model.cfg.dim
    features = np.concatenate(feats).astype(np.float64) if feats else np.zeros((0, d))
    return TaskFeatureSet(bank["task"][index].copy(), bank["level"][index].copy(), features)


@dataclass
class PCAResult:
    mean: np.ndarray
    components: np.ndarray          # (n_components, d), rows are unit loadings
    explained_variance_ratio: np.ndarray
    projection: np.ndarray          # (n, n_components)


def pca(features, n_components: int = 2) -> PCAResult:
    """Principal components from the covariance eigendecomposition.

    Each component's sign is fixed so its largest-magnitude loading is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("PCA needs a 2-D array with at least 3 rows")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order].T
    for i, v in enumerate(vecs):
        if v[np.argmax(np.abs(v))] < 0:
            vecs[i] = -v
    total = np.clip(np.linalg.eigvalsh(cov), 0.0, None).sum()
    if total <= 0.0:
        zeros = np.zeros((x.shape[0], n_components))
        return PCAResult(mean, vecs, np.zeros(n_components), zeros)
    # pad when d < n_components
    proj = xc @ vecs.T
    ratio = vals / total
    if proj.shape[1] < n_components:
        pad = n_components - proj.shape[1]
        proj = np.pad(proj, ((0, 0), (0, pad)))
        ratio = np.pad(ratio, (0, pad))
    return PCAResult(mean, vecs, ratio, proj)


def pca_project(features):
    """Top-2 projection and explained-variance ratios."""
    res = pca(features, 2)
    return res.projection, res.explained_variance_ratio


def cluster_purity(features, labels, k: int, seed: int = 0, n_init: int = 10) -> float:
    """k-means over the rows (best inertia of ``n_init`` restarts), then the
    mean over clusters of each cluster's majority-label fraction."""
    from sklearn.cluster import KMeans
    from sklearn.exceptions import ConvergenceWarning

    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("k must be at least 2")
    if x.shape[0] < k:
        raise ValueError(f"need at least k={k} rows, got {x.shape[0]}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        assign = KMeans(n_clusters=k, n_init=n_init, random_state=seed).fit_predict(x)
    fractions = []
    for c in np.unique(assign):
        _, counts = np.unique(labels[assign == c], return_counts=True)
        fractions.append(counts.max() / counts.sum())
    return float(np.mean(fractions))
