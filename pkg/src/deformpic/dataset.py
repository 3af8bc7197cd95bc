"""In-context task datasets: pair construction, on-disk format, patching.

On disk a dataset is a directory holding

* ``manifest.json`` -- ``{version, n_points, tasks, levels, counts, seed, patch, records}``
  where each record entry is ``{offset, len, crc32, task, level}``;
* ``records.bin`` -- concatenated records, each four clouds (prompt input,
  prompt target, query input, query target), each cloud a little-endian
  ``u32`` point count followed by ``count * 3`` little-endian ``f32``;
* ``provenance.json`` -- per-record shape specs, pair seeds and perturbation
  parameters, enough to regenerate every input from its target.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import joint_sample, random_rotation
from .shapes import KINDS, MIN_POINTS, generate_shape, random_spec

FORMAT_VERSION = 1
TASKS = ("reconstruction", "denoising", "registration")
LEVELS = (1, 2, 3, 4, 5)
REFERENCE_POINTS = 1024


class DatasetError(Exception):
    pass


class VersionMismatch(DatasetError):
    pass


class ChecksumError(DatasetError):
    def __init__(self, index: int):
        super().__init__(f"checksum mismatch in record {index}")
        self.index = index


class TruncatedError(DatasetError):
    pass


@dataclass
class InContextSample:
    task: str
    level: int
    prompt_input: np.ndarray
    prompt_target: np.ndarray
    query_input: np.ndarray
    query_target: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def clouds(self):
        return (self.prompt_input, self.prompt_target, self.query_input, self.query_target)


@dataclass
class DatasetConfig:
    samples_per_cell: int = 2
    n_points: int = REFERENCE_POINTS
    seed: int = 0
    m: int = 16
    k: int = 8
    tasks: tuple = TASKS
    levels: tuple = LEVELS

    def validate(self) -> None:
        if self.n_points < MIN_POINTS:
            raise ValueError(f"n_points must be >= {MIN_POINTS}, got {self.n_points}")
        if self.samples_per_cell < 0:
            raise ValueError("samples_per_cell must be non-negative")
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")
        if not set(self.levels) <= set(LEVELS) or not self.levels:
            raise ValueError(f"levels must be a non-empty subset of {LEVELS}")
        if not 1 <= self.m <= self.n_points or not 1 <= self.k <= self.n_points:
            raise ValueError(f"patch config m={self.m}, k={self.k} invalid for {self.n_points} points")


# ---------------------------------------------------------------------------
# task pairs
# ---------------------------------------------------------------------------

def _check_level(level: int) -> None:
    if level not in LEVELS:
        raise ValueError(f"level must be in 1..5, got {level}")


def reconstruction_size(n_points: int, level: int) -> int:
    """512, 256, 128, 64, 32 at 1024 points; same ratios (ceil) otherwise."""
    _check_level(level)
    return -(-n_points // (2 ** level))


def denoising_count(n_points: int, level: int) -> int:
    """100 * level replaced points at 1024 points; same ratio (ceil) otherwise."""
    _check_level(level)
    return -(-n_points * level * 100 // REFERENCE_POINTS)


def registration_angle(level: int) -> float:
    _check_level(level)
    return 20.0 * level


def make_reconstruction_pair(c: np.ndarray, level: int, rng: np.random.Generator):
    keep = rng.choice(c.shape[0], size=reconstruction_size(c.shape[0], level), replace=False)
    return c[np.sort(keep)], c, {"n_input": int(keep.size)}


def make_denoising_pair(c: np.ndarray, level: int, rng: np.random.Generator):
    count = denoising_count(c.shape[0], level)
    idx = rng.choice(c.shape[0], size=count, replace=False)
    noisy = c.copy()
    noisy[idx] = rng.standard_normal(size=(count, 3))
    return noisy, c, {"n_replaced": int(count), "indices": sorted(int(i) for i in idx)}


def make_registration_pair(c: np.ndarray, level: int, rng: np.random.Generator):
    rotated, rot = random_rotation(c, registration_angle(level), rng)
    return rotated, c, {"angles_deg": [float(a) for a in rot.angles_deg]}


PAIR_MAKERS = {
    "reconstruction": make_reconstruction_pair,
    "denoising": make_denoising_pair,
    "registration": make_registration_pair,
}


def make_pair(task: str, c: np.ndarray, level: int, pair_seed: int):
    """Perturb a normalized cloud; returns ``(input, target, record)``."""
    return PAIR_MAKERS[task](c, level, np.random.default_rng(pair_seed))


# ---------------------------------------------------------------------------
# building
# ---------------------------------------------------------------------------

def record_plan(cfg: DatasetConfig):
    """(task, level) of each record, in index order."""
    return [(t, lv) for t in cfg.tasks for lv in cfg.levels for _ in range(cfg.samples_per_cell)]


def make_record(cfg: DatasetConfig, index: int, task: str, level: int) -> InContextSample:
    rng = np.random.default_rng([cfg.seed, index])
    seeds = rng.choice(2 ** 31, size=2, replace=False)
    clouds, prov = [], {}
    for role, shape_seed in zip(("prompt", "query"), seeds):
        kind = KINDS[int(rng.integers(len(KINDS)))]
        spec = random_spec(kind, cfg.n_points, int(shape_seed), rng)
        pair_seed = int(rng.integers(2 ** 31))
        target = generate_shape(spec)
        inp, tgt, pert = make_pair(task, target, level, pair_seed)
        clouds += [inp, tgt]
        prov[role] = {"kind": kind, "shape_seed": int(shape_seed), "params": spec.params,
                      "pair_seed": pair_seed, "perturbation": pert}
    return InContextSample(task, level, *[c.astype(np.float32) for c in clouds], provenance=prov)


def encode_record(sample: InContextSample) -> bytes:
    parts = []
    for c in sample.clouds:
        c = np.ascontiguousarray(c, dtype="<f4")
        parts.append(struct.pack("<I", c.shape[0]))
        parts.append(c.tobytes())
    return b"".join(parts)


def decode_record(buf: bytes) -> list[np.ndarray]:
    clouds, pos = [], 0
    for _ in range(4):
        if pos + 4 > len(buf):
            raise TruncatedError("record ends inside a cloud header")
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        size = n * 12
        if pos + size > len(buf):
            raise TruncatedError("record ends inside cloud data")
        clouds.append(np.frombuffer(buf, dtype="<f4", count=n * 3, offset=pos).reshape(n, 3).astype(np.float32))
        pos += size
    return clouds


def write_dataset(path, samples, cfg: DatasetConfig) -> dict:
    """Serialize samples; returns the manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset, counts = [], 0, {t: [0] * len(LEVELS) for t in cfg.tasks}
    with open(path / "records.bin", "wb") as fh:
        for s in samples:
            buf = encode_record(s)
            fh.write(buf)
            entries.append({"offset": offset, "len": len(buf), "crc32": zlib.crc32(buf),
                            "task": s.task, "level": s.level})
            counts[s.task][s.level - 1] += 1
            offset += len(buf)
    manifest = {
        "version": FORMAT_VERSION,
        "n_points": cfg.n_points,
        "tasks": list(cfg.tasks),
        "levels": list(cfg.levels),
        "counts": counts,
        "seed": cfg.seed,
        "patch": {"m": cfg.m, "k": cfg.k},
        "records": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    (path / "provenance.json").write_text(json.dumps([s.provenance for s in samples]) + "\n")
    return manifest


def build_dataset(path, cfg: DatasetConfig) -> dict:
    """Generate all records deterministically from ``cfg.seed`` and write them."""
    cfg.validate()
    samples = [make_record(cfg, i, t, lv) for i, (t, lv) in enumerate(record_plan(cfg))]
    return write_dataset(path, samples, cfg)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

class Dataset:
    def __init__(self, manifest: dict, samples: list[InContextSample], fingerprint: str):
        self.manifest = manifest
        self.samples = samples
        self.fingerprint = fingerprint

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def is_empty(self) -> bool:
        return not self.samples

    @property
    def config(self) -> DatasetConfig:
        mf = self.manifest
        return DatasetConfig(n_points=mf["n_points"], seed=mf["seed"], m=mf["patch"]["m"],
                             k=mf["patch"]["k"], tasks=tuple(mf["tasks"]), levels=tuple(mf["levels"]))


def manifest_fingerprint(path) -> str:
    import hashlib

    return hashlib.sha256((Path(path) / "manifest.json").read_bytes()).hexdigest()[:16]


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"no manifest.json in {path}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"unsupported dataset version {manifest.get('version')!r}")
    data = (path / "records.bin").read_bytes()
    prov_file = path / "provenance.json"
    provenance = json.loads(prov_file.read_text()) if prov_file.exists() else []
    samples = []
    for i, rec in enumerate(manifest["records"]):
        end = rec["offset"] + rec["len"]
        if end > len(data):
            raise TruncatedError(f"records.bin truncated at record {i}")
        buf = data[rec["offset"]:end]
        if zlib.crc32(buf) != rec["crc32"]:
            raise ChecksumError(i)
        clouds = decode_record(buf)
        prov = provenance[i] if i < len(provenance) else {}
        samples.append(InContextSample(rec["task"], rec["level"], *clouds, provenance=prov))
    return Dataset(manifest, samples, manifest_fingerprint(path))


def regenerate_input(target: np.ndarray, task: str, level: int, pair_seed: int) -> np.ndarray:
    """Rebuild a stored input from its target (float64 math, cast like storage)."""
    inp, _, _ = make_pair(task, np.asarray(target, dtype=np.float64), level, pair_seed)
    return inp.astype(np.float32)


# ---------------------------------------------------------------------------
# patching and batching
# ---------------------------------------------------------------------------

TASK_IDS = {t: i for i, t in enumerate(TASKS)}
STREAMS = ("pi", "pt", "qi", "qt")


def patch_sample(sample: InContextSample, m: int, k: int, seed_index: int = 0):
    return joint_sample(*sample.clouds, task=sample.task, m=m, k=k, seed_index=seed_index)


def patchify(samples, m: int, k: int, seed_index: int = 0) -> dict:
    """Joint-sample every record once; returns stacked float32 arrays."""
    n = len(samples)
    bank = {s: np.zeros((n, m, k, 3), np.float32) for s in STREAMS}
    bank.update({f"{s}_c": np.zeros((n, m, 3), np.float32) for s in STREAMS})
    bank["task"] = np.zeros(n, np.int64)
    bank["level"] = np.zeros(n, np.int64)
    for i, sample in enumerate(samples):
        for s, pc in zip(STREAMS, patch_sample(sample, m, k, seed_index)):
            bank[s][i] = pc.patches
            bank[f"{s}_c"][i] = pc.centers
        bank["task"][i] = TASK_IDS[sample.task]
        bank["level"][i] = sample.level
    return bank


def collate(bank: dict, index) -> dict:
    index = np.asarray(index)
    return {key: val[index] for key, val in bank.items()}


def split_indices(n: int, val_every: int = 10):
    """Deterministic ~10% held-out split keyed on a hash of the record index."""
    is_val = np.array([zlib.crc32(str(i).encode()) % val_every == 0 for i in range(n)], dtype=bool)
    return np.nonzero(~is_val)[0], np.nonzero(is_val)[0]
