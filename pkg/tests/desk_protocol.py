"""Desk-scale comparison protocol shared by the acceptance suite.

Trains deformpic, mpm_baseline and mpm_consistent (desk preset) on 600
samples per task for three seeds, then records held-out Chamfer per task and
task-feature purity. Each run's result is cached as JSON under a key derived
from the package source and the protocol constants, so an unchanged tree never
retrains; any source edit invalidates the cache.
"""
from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np

import deformpic
from deformpic.dataset import DatasetConfig, build_dataset, load_dataset, patchify, split_indices
from deformpic.evaluation import cluster_purity, extract_task_features
from deformpic.model import ModelConfig, build_model
from deformpic.train import TrainConfig, train, validation_cd

PROTOCOL = {
    "samples_per_cell": 120,  # 5 levels x 120 = 600 samples per task
    "n_points": 1024,
    "dataset_seed": 0,
    "seeds": [0, 1, 2],
    "variants": ["deformpic", "mpm_baseline", "mpm_consistent"],
    "preset": "desk",
}


def source_key() -> str:
    h = hashlib.sha256(json.dumps(PROTOCOL, sort_keys=True).encode())
    for path in sorted(Path(deformpic.__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _run_one(ds, bank, val, variant: str, seed: int) -> dict:
    mcfg = ModelConfig.preset(PROTOCOL["preset"], variant=variant)
    tcfg = TrainConfig.preset(PROTOCOL["preset"], seed=seed)
    t0 = time.time()
    model = train(ds, mcfg, tcfg, bank=bank).model
    out = {"variant": variant, "seed": seed, "cd": validation_cd(model, bank, val), "seconds": time.time() - t0}
    if variant == "deformpic":
        feats = extract_task_features(model, bank, val)
        out["purity"] = cluster_purity(feats.features, feats.tasks, 3)
        control = extract_task_features(build_model(mcfg, seed), bank, val)
        out["untrained_purity"] = cluster_purity(control.features, control.tasks, 3)
    return out


def run_protocol(cache_dir, log=print) -> dict:
    """Results keyed ``"variant:seed"``; trains only runs missing from the cache."""
    root = Path(cache_dir) / source_key()
    root.mkdir(parents=True, exist_ok=True)
    data = root / "data"
    if not (data / "manifest.json").exists():
        build_dataset(data, DatasetConfig(samples_per_cell=PROTOCOL["samples_per_cell"],
                                          n_points=PROTOCOL["n_points"], seed=PROTOCOL["dataset_seed"]))
    ds, bank = None, None
    results = {}
    for seed in PROTOCOL["seeds"]:
        for variant in PROTOCOL["variants"]:
            path = root / f"{variant}_{seed}.json"
            if path.exists():
                results[f"{variant}:{seed}"] = json.loads(path.read_text())
                continue
            if ds is None:
                ds = load_dataset(data)
                patch = ModelConfig.preset(PROTOCOL["preset"])
                bank = patchify(ds.samples, patch.m, patch.k)
            _, val = split_indices(len(ds))
            res = _run_one(ds, bank, val, variant, seed)
            path.write_text(json.dumps(res, indent=1))
            log(f"trained {variant} seed {seed} in {res['seconds']:.0f}s: {res['cd']}")
            results[f"{variant}:{seed}"] = res
    return results


def task_mean(cd: dict) -> float:
    return float(np.mean([cd["reconstruction"], cd["denoising"], cd["registration"]]))


if __name__ == "__main__":
    import sys

    print(json.dumps(run_protocol(sys.argv[1] if len(sys.argv) > 1 else ".desk_cache"), indent=1))
