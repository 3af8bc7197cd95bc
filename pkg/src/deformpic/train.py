"""Optimization harness: schedule, AdamW, checkpoints and the training loop."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataset import TASKS, TASK_IDS, Dataset, collate, patchify, split_indices
from .geometry import chamfer_kernel
from .model import ModelConfig, build_model, deformation_loss, masked_patch_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
LOG_COLUMNS = ["epoch", "step", "lr", "train_loss", "val_cd_rec", "val_cd_den", "val_cd_reg"]
NO_DECAY_NAMES = ("task_token", "mask_token", "task_table")


class TrainingAborted(RuntimeError):
    """Loss or gradient became non-finite."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr_peak: float = 1e-3
    lr_init: float = 1e-5
    warmup_epochs: int = 5
    weight_decay: float = 0.05
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0

    def __post_init__(self):
        if not self.lr_init < self.lr_peak:
            raise ValueError("lr_init must be below lr_peak")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        base = {
            "paper": cls(epochs=300, batch_size=128, lr_peak=1e-4, lr_init=1e-6, warmup_epochs=10),
            "desk": cls(),
        }[name]
        return replace(base, **overrides)


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_init: float, lr_peak: float) -> float:
    """Linear warmup from ``lr_init`` to ``lr_peak``, then cosine decay to zero."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return lr_init + (lr_peak - lr_init) * step / warmup_steps
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def decays(name: str, p: T.Tensor) -> bool:
    return p.ndim >= 2 and not any(key in name for key in NO_DECAY_NAMES)


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, named_params: dict, cfg: TrainConfig):
        self.params = named_params
        self.cfg = cfg
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in named_params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in named_params.items()}

    def step(self, lr: float) -> None:
        cfg = self.cfg
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
            grads[name] = g
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            if cfg.weight_decay and decays(name, p):
                p.data *= 1.0 - lr * cfg.weight_decay
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            p.data -= (lr * update).astype(p.data.dtype)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if total > max_norm:
        factor = max_norm / (total + 1e-6)
        for g in grads:
            g *= factor
    return total


def compute_loss(model, batch, training: bool = True, step: int = 0) -> T.Tensor:
    """Training objective of ``model`` on a collated batch (see model module)."""
    return model.loss(batch, training=training, step=step)



# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model, opt: AdamW | None, meta: dict) -> None:
    """Write ``checkpoint.json`` plus a flat little-endian f32 blob ``params.bin``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = [(n, p.data) for n, p in model.named_parameters().items()]
    if opt is not None:
        tensors += [(f"adam.m/{n}", a) for n, a in opt.m.items()]
        tensors += [(f"adam.v/{n}", a) for n, a in opt.v.items()]
    index, offset, blob = [], 0, io.BytesIO()
    for name, arr in tensors:
        flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
        blob.write(flat.tobytes())
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(flat.size)})
        offset += flat.size * 4
    doc = {
        "format": CHECKPOINT_FORMAT,
        "model": model.cfg.to_dict(),
        "model_seed": model.seed,
        "optimizer_step": opt.step_count if opt is not None else 0,
        **meta,
        "tensors": index,
    }
    (path / "params.bin").write_bytes(blob.getvalue())
    (path / "checkpoint.json").write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path, train_cfg: TrainConfig | None = None):
    """Returns ``(model, optimizer_or_None, meta)``."""
    path = Path(path)
    doc = json.loads((path / "checkpoint.json").read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    blob = (path / "params.bin").read_bytes()
    arrays = {}
    for t in doc["tensors"]:
        arr = np.frombuffer(blob, dtype="<f4", count=t["count"], offset=t["offset"])
        arrays[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
    model = build_model(ModelConfig(**doc["model"]), doc["model_seed"])
    named = model.named_parameters()
    for name, p in named.items():
        p.data = arrays[name].astype(p.data.dtype)
    opt = None
    if train_cfg is not None and any(k.startswith("adam.") for k in arrays):
        opt = AdamW(named, train_cfg)
        opt.step_count = doc["optimizer_step"]
        for name in named:
            opt.m[name] = arrays[f"adam.m/{name}"].copy()
            opt.v[name] = arrays[f"adam.v/{name}"].copy()
    return model, opt, doc


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def batch_chamfer(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-sample Chamfer-L2 of flattened patch sets, float64."""
    b = pred.shape[0]
    return chamfer_kernel(pred.reshape(b, -1, 3).astype(np.float64), gt.reshape(b, -1, 3).astype(np.float64))[0]


def predict_bank(model, bank: dict, index, batch_size: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(index), batch_size):
        out.append(model.predict(collate(bank, index[start:start + batch_size])))
    return np.concatenate(out) if out else np.zeros((0,))


def validation_cd(model, bank: dict, index) -> dict:
    """Mean held-out Chamfer-L2 per task (NaN for tasks absent from ``index``)."""
    if len(index) == 0:
        return {t: float("nan") for t in TASKS}
    cd = batch_chamfer(predict_bank(model, bank, index), bank["qt"][index])
    tasks = bank["task"][index]
    return {t: float(cd[tasks == TASK_IDS[t]].mean()) if np.any(tasks == TASK_IDS[t]) else float("nan")
            for t in TASKS}


@dataclass
class TrainResult:
    model: object
    optimizer: AdamW
    history: list = field(default_factory=list)
    best_val: float = float("inf")


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.9g}"


def train(dataset: Dataset, model_cfg: ModelConfig, cfg: TrainConfig, out_dir=None, resume=None,
          bank: dict | None = None, on_epoch=None) -> TrainResult:
    """Train ``model_cfg`` on ``dataset``; deterministic given ``cfg.seed``.

    Writes ``metrics.csv`` and checkpoints ``last/`` and ``best/`` under
    ``out_dir`` when given. ``resume`` is a checkpoint directory written by a
    previous call with the same configuration.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if bank is None:
        bank = patchify(dataset.samples, model_cfg.m, model_cfg.k)
    train_idx, val_idx = split_indices(len(dataset))
    if len(train_idx) == 0:
        train_idx = val_idx
    if len(val_idx) == 0:
        val_idx = train_idx  # tiny datasets: report on the training records
    steps_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch

    start_epoch, best = 0, float("inf")
    if resume is not None:
        model, opt, doc = load_checkpoint(resume, cfg)
        if model.cfg != model_cfg:
            raise ValueError("resume checkpoint was trained with a different model config")
        start_epoch, best = doc["epoch"] + 1, doc.get("best_val", float("inf"))
    else:
        model = build_model(model_cfg, cfg.seed)
        opt = AdamW(model.named_parameters(), cfg)
    params = list(opt.params.values())
    result = TrainResult(model, opt, best_val=best)

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "a" if resume is not None else "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if resume is None:
            writer.writerow(LOG_COLUMNS)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(train_idx)
            losses = []
            for b in range(steps_per_epoch):
                step = epoch * steps_per_epoch + b
                batch = collate(bank, order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
                lr = lr_at(step, total, warmup, cfg.lr_init, cfg.lr_peak)
                try:
                    loss = model.loss(batch, training=True, step=step)
                    T.backward(loss)
                    clip_grad_norm(params, cfg.clip_norm)
                    opt.step(lr)
                except FloatingPointError as exc:
                    raise TrainingAborted(str(exc), step) from exc
                model.zero_grad()
                losses.append(loss.item())
            try:
                val = validation_cd(model, bank, val_idx)
            except FloatingPointError as exc:
                raise TrainingAborted(f"validation: {exc}", step + 1) from exc
            score = float(np.nanmean([val[t] for t in TASKS]))
            row = {"epoch": epoch, "step": step + 1, "lr": lr, "train_loss": float(np.mean(losses)),
                   "val_cd_rec": val["reconstruction"], "val_cd_den": val["denoising"],
                   "val_cd_reg": val["registration"]}
            result.history.append(row)
            if writer is not None:
                writer.writerow([row["epoch"], row["step"]] + [_fmt(row[c]) for c in LOG_COLUMNS[2:]])
                fh.flush()
            meta = {"epoch": epoch, "step": step + 1, "train": asdict(cfg), "val": val,
                    "rng": {"scheme": "keyed", "seed": cfg.seed, "next_epoch": epoch + 1},
                    "dataset_fingerprint": dataset.fingerprint}
            if score < result.best_val:
                result.best_val = score
                if out is not None:
                    save_checkpoint(out / "best", model, None, {**meta, "best_val": score})
            if out is not None:
                save_checkpoint(out / "last", model, opt, {**meta, "best_val": result.best_val})
            log.info("epoch %d loss %.5f val %s", epoch, row["train_loss"], val)
            if on_epoch is not None:
                on_epoch(row)
    finally:
        if writer is not None:
            fh.close()
    return result
