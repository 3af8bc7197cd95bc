"""DeformPIC network, the masked-point-modeling baseline and ablation variants.

All forward passes take a *batch*: a dict of float arrays produced by
:func:`deformpic.dataset.collate` with keys ``pi``, ``pt``, ``qi``, ``qt``
(patches, ``(B, m, k, 3)``), ``pi_c`` ... ``qt_c`` (centers, ``(B, m, 3)``)
and ``task`` (``(B,)`` task ids).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .nn import AdaLNZeroBlock, Block, LayerNorm, Linear, MLP, Module, parameter
from .tensor import Tensor

VARIANTS = ("deformpic", "mpm_baseline", "mpm_consistent", "static_den")
TASKS = ("reconstruction", "denoising", "registration")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 4
    den_blocks: int = 2
    dtn_blocks: int = 4
    m: int = 16
    k: int = 8
    drop_path_rate: float = 0.0
    variant: str = "deformpic"
    mask_ratio: float = 0.7
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 2:
            raise ValueError("dim must be even")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in [0, 1]")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        base = {
            "paper": cls(dim=384, heads=6, den_blocks=4, dtn_blocks=8, m=64, k=32, drop_path_rate=0.1),
            "desk": cls(),
        }[name]
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


def mpm_depth(cfg: ModelConfig) -> int:
    """Depth of the plain baseline transformer, matched to DeformPIC's parameter count.

    An AdaLN-Zero block carries 6*d^2 modulation weights on top of the
    (4 + 2*mlp_ratio)*d^2 of a plain block; the baseline gets extra plain
    blocks to cover them.
    """
    extra = round(cfg.dtn_blocks * 6 / (4 + 2 * cfg.mlp_ratio))
    return cfg.den_blocks + cfg.dtn_blocks + extra


def _relative(patches: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return patches - centers[..., None, :]


class PointEncoder(Module):
    """Mini-PointNet: shared per-point MLP, max-pool, plus a center position embedding."""

    def __init__(self, dim: int, rng):
        self.point_mlp = MLP(3, dim // 2, dim, rng)
        self.pos_mlp = MLP(3, dim, dim, rng)

    def features(self, rel_patches: np.ndarray) -> Tensor:
        return T.max_pool_axis(self.point_mlp(Tensor(rel_patches)), axis=-2)

    def position(self, centers: np.ndarray) -> Tensor:
        return self.pos_mlp(Tensor(centers))

    def __call__(self, patches: np.ndarray, centers: np.ndarray) -> Tensor:
        """``(B, m, k, 3)`` absolute patches, ``(B, m, 3)`` centers -> ``(B, m, d)`` tokens."""
        return self.features(_relative(patches, centers)) + self.position(centers)


HEAD_INIT_STD = 0.05


class PatchHead(Module):
    """Token -> k points, expressed relative to the token's center then made absolute.

    The output layer starts small but not at zero: with all k slots of a patch
    at one location, Chamfer nearest-neighbour ties always resolve to the same
    slot and the remaining slots receive identical gradients forever.
    """

    def __init__(self, dim: int, k: int, rng, init_std: float = HEAD_INIT_STD):
        self.k = k
        self.mlp = MLP(dim, dim, 3 * k, rng, zero_out=True)
        if init_std > 0:
            self.mlp.fc2.weight.data[...] = rng.normal(0.0, init_std, size=self.mlp.fc2.weight.shape)

    def __call__(self, tokens: Tensor, centers: np.ndarray) -> Tensor:
        lead = tokens.shape[:-1]
        offsets = self.mlp(tokens).reshape(*lead, self.k, 3)
        return offsets + Tensor(centers[..., None, :])


def _block_rng(seed: int, step: int, layer: int, training: bool, rate: float):
    if not training or rate <= 0.0:
        return None
    return np.random.default_rng([seed, step, layer])


class DeformPIC(Module):
    """Prompt pair -> task token (DEN); task token conditions the query deformation (DTN)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.seed = seed
        d = cfg.dim
        self.prompt_encoder = PointEncoder(d, rng)
        self.query_encoder = PointEncoder(d, rng)
        if cfg.variant == "static_den":
            self.task_table = parameter(rng.normal(0.0, 0.02, size=(len(TASKS), d)))
        else:
            self.task_token = parameter(rng.normal(0.0, 0.02, size=(1, 1, d)))
            # zero-initialised residual branches: untrained task tokens do not depend on the prompt
            self.den = [Block(d, cfg.heads, rng, cfg.mlp_ratio, zero_out=True) for _ in range(cfg.den_blocks)]
        self.dtn = [AdaLNZeroBlock(d, cfg.heads, rng, cfg.mlp_ratio) for _ in range(cfg.dtn_blocks)]
        self.dtn_norm = LayerNorm(d)
        self.head = PatchHead(d, cfg.k, rng)

    # -- stages -----------------------------------------------------------
    def encode_prompt(self, batch) -> tuple[Tensor, Tensor]:
        return (self.prompt_encoder(batch["pi"], batch["pi_c"]),
                self.prompt_encoder(batch["pt"], batch["pt_c"]))

    def encode_query(self, batch) -> Tensor:
        return self.query_encoder(batch["qi"], batch["qi_c"])

    def den_forward(self, t_prompt_in: Tensor, t_prompt_tgt: Tensor) -> Tensor:
        if t_prompt_in.shape != t_prompt_tgt.shape:
            raise ValueError(f"prompt token shapes differ: {t_prompt_in.shape} vs {t_prompt_tgt.shape}")
        b, _, d = t_prompt_in.shape
        token = T.broadcast_to(self.task_token, (b, 1, d))
        x = T.concat([token, t_prompt_in, t_prompt_tgt], axis=1)
        for blk in self.den:
            x = blk(x)
        # affine-free final norm: pre-norm residual stream otherwise reaches the DTN unnormalised
        return T.layer_norm(T.take(x, 0, axis=1))

    def task_features(self, batch) -> Tensor:
        if self.cfg.variant == "static_den":
            return T.take(self.task_table, np.asarray(batch["task"]), axis=0)
        return self.den_forward(*self.encode_prompt(batch))

    def dtn_forward(self, h: Tensor, task: Tensor, training: bool = False, step: int = 0,
                    final_norm: bool = True) -> Tensor:
        rate = self.cfg.drop_path_rate
        for i, blk in enumerate(self.dtn):
            h = blk(h, task, rate, _block_rng(self.seed, step, i, training, rate), training)
        return self.dtn_norm(h) if final_norm else h

    def forward(self, batch, training: bool = False, step: int = 0):
        """Returns ``(pred_patches (B, m, k, 3), task_features (B, d))``."""
        task = self.task_features(batch)
        h = self.dtn_forward(self.encode_query(batch), task, training, step)
        return self.head(h, batch["qi_c"]), task

    def loss(self, batch, training: bool = True, step: int = 0) -> Tensor:
        pred, _ = self.forward(batch, training, step)
        return deformation_loss(pred, batch["qt"])

    def predict(self, batch) -> np.ndarray:
        with T.no_grad():
            pred, _ = self.forward(batch, training=False)
        return pred.data


class MPMBaseline(Module):
    """Masked point modeling over ``[prompt_in | prompt_tgt | query_in | query_tgt]``.

    Masked target positions are a shared learnable mask token plus the
    position embedding of the corresponding input center.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.seed = seed
        d = cfg.dim
        self.encoder = PointEncoder(d, rng)
        self.mask_token = parameter(rng.normal(0.0, 0.02, size=(1, 1, d)))
        self.blocks = [Block(d, cfg.heads, rng, cfg.mlp_ratio) for _ in range(mpm_depth(cfg))]
        self.norm = LayerNorm(d)
        self.head = PatchHead(d, cfg.k, rng)

    def _target_tokens(self, patches, centers, in_centers, mask: np.ndarray) -> Tensor:
        feat = self.encoder.features(_relative(patches, centers))
        visible = feat + self.encoder.position(centers)
        hidden = self.mask_token + self.encoder.position(in_centers)
        w = Tensor(mask[..., None].astype(T.default_dtype()))
        return visible * (1.0 - w) + hidden * w

    def forward(self, batch, mask_plan: np.ndarray, training: bool = False, step: int = 0):
        """``mask_plan``: bool ``(B, 2, m)`` over (prompt target, query target).

        Returns predicted patches ``(B, 2, m, k, 3)`` for both target streams.
        """
        m = self.cfg.m
        enc = self.encoder
        seq = T.concat([
            enc(batch["pi"], batch["pi_c"]),
            self._target_tokens(batch["pt"], batch["pt_c"], batch["pi_c"], mask_plan[:, 0]),
            enc(batch["qi"], batch["qi_c"]),
            self._target_tokens(batch["qt"], batch["qt_c"], batch["qi_c"], mask_plan[:, 1]),
        ], axis=1)
        rate = self.cfg.drop_path_rate
        for i, blk in enumerate(self.blocks):
            seq = blk(seq, rate, _block_rng(self.seed, step, i, training, rate), training)
        seq = self.norm(seq)
        tgt = T.take(seq, np.r_[m:2 * m, 3 * m:4 * m], axis=1)
        b = tgt.shape[0]
        tgt = tgt.reshape(b, 2, m, self.cfg.dim)
        centers = np.stack([batch["pi_c"], batch["qi_c"]], axis=1)
        return self.head(tgt, centers)

    def mask_plan(self, batch_size: int, training: bool, rng: np.random.Generator | None = None):
        return make_mask_plan(self.cfg, batch_size, training, rng)

    def loss(self, batch, training: bool = True, step: int = 0) -> Tensor:
        rng = np.random.default_rng([self.seed, step, 1_000_003])
        plan = self.mask_plan(batch["qi"].shape[0], training, rng)
        pred = self.forward(batch, plan, training, step)
        gt = np.stack([batch["pt"], batch["qt"]], axis=1)
        return masked_patch_loss(pred, gt, plan)

    def predict(self, batch) -> np.ndarray:
        plan = self.mask_plan(batch["qi"].shape[0], training=False)
        with T.no_grad():
            pred = self.forward(batch, plan, training=False)
        return pred.data[:, 1]


def make_mask_plan(cfg: ModelConfig, batch_size: int, training: bool, rng=None) -> np.ndarray:
    """Boolean ``(B, 2, m)`` mask over (prompt target, query target) positions.

    Inference and ``mpm_consistent`` training: query target fully masked,
    prompt target visible. ``mpm_baseline`` training: ``round(ratio * m)``
    random positions masked in each target stream.
    """
    m = cfg.m
    plan = np.zeros((batch_size, 2, m), dtype=bool)
    if not training or cfg.variant == "mpm_consistent":
        plan[:, 1] = True
        return plan
    n_mask = int(round(cfg.mask_ratio * m))
    for b in range(batch_size):
        for s in range(2):
            plan[b, s, rng.permutation(m)[:n_mask]] = True
    return plan


def deformation_loss(pred: Tensor, gt_patches: np.ndarray) -> Tensor:
    """Mean over the batch of Chamfer-L2 between flattened predicted and target patches."""
    b = pred.shape[0]
    flat_pred = pred.reshape(b, -1, 3)
    flat_gt = Tensor(np.asarray(gt_patches).reshape(b, -1, 3))
    return T.mean_axis(T.chamfer_l2(flat_pred, flat_gt))


def masked_patch_loss(pred: Tensor, gt_patches: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean per-patch Chamfer-L2 over masked positions; zero when nothing is masked."""
    count = int(mask.sum())
    if count == 0:
        return T.scale(T.sum_axis(pred), 0.0)
    per_patch = T.chamfer_l2(pred, Tensor(gt_patches))
    w = Tensor(mask.astype(T.default_dtype()))
    return T.scale(T.sum_axis(per_patch * w), 1.0 / count)


def build_model(cfg: ModelConfig, seed: int = 0):
    if cfg.variant in ("mpm_baseline", "mpm_consistent"):
        return MPMBaseline(cfg, seed)
    return DeformPIC(cfg, seed)
