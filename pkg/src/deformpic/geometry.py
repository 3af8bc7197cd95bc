"""Geometric kernels on ``(N, 3)`` point arrays.

All functions are deterministic given their inputs (plus an explicit RNG
where randomness is involved). Ties are always broken toward the lowest index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assignment import linear_sum_assignment

EMD_MAX_POINTS = 512


@dataclass
class PatchedCloud:
    """Patch centers and their k-nearest-neighbour groups (absolute coordinates)."""

    centers: np.ndarray         # (m, 3)
    center_indices: np.ndarray  # (m,)
    patches: np.ndarray         # (m, k, 3)

    @property
    def m(self) -> int:
        return self.centers.shape[0]

    @property
    def k(self) -> int:
        return self.patches.shape[1]


@dataclass
class Rotation:
    angles_deg: np.ndarray  # per-axis (x, y, z)
    matrix: np.ndarray      # (3, 3), output = points @ matrix.T


def _as_cloud(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) point array, got shape {c.shape}")
    if c.shape[0] == 0:
        raise ValueError("empty point cloud")
    return c


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances from explicit differences (no expansion trick)."""
    d = a[..., :, None, :] - b[..., None, :, :]
    return np.einsum("...k,...k->...", d, d)


def normalize_unit_sphere(c) -> np.ndarray:
    """Center at the centroid and scale so the furthest point has norm 1."""
    c = _as_cloud(c)
    centered = c - c.mean(axis=0)
    radius = np.sqrt((centered ** 2).sum(axis=1)).max()
    if radius == 0.0:
        return np.zeros_like(c)
    return centered / radius


def farthest_point_sampling(c, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min subset of ``m`` indices, starting from ``seed_index``."""
    c = _as_cloud(c)
    n = c.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} points from a cloud of {n}")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index {seed_index} out of range for {n} points")
    picked = np.empty(m, dtype=np.int64)
    picked[0] = seed_index
    min_d = ((c - c[seed_index]) ** 2).sum(axis=1)
    min_d[seed_index] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(min_d))  # first maximum -> lowest index
        picked[i] = nxt
        d = ((c - c[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d, d, out=min_d)
        min_d[picked[: i + 1]] = -1.0
    return picked


def knn_indices(c, centers, k: int) -> np.ndarray:
    c = _as_cloud(c)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if not 1 <= k <= c.shape[0]:
        raise ValueError(f"k={k} invalid for a cloud of {c.shape[0]} points")
    d = pairwise_sq_dists(centers, c)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def knn_group(c, centers, k: int, center_indices=None) -> PatchedCloud:
    """Group the ``k`` nearest cloud points around each center, nearest first."""
    c = _as_cloud(c)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    idx = knn_indices(c, centers, k)
    if center_indices is None:
        center_indices = idx[:, 0]
    return PatchedCloud(centers=centers, center_indices=np.asarray(center_indices), patches=c[idx])


def pad_cloud(c, n: int) -> np.ndarray:
    """Cyclically repeat points so the cloud has at least ``n`` points."""
    c = np.asarray(c)
    if c.shape[0] >= n:
        return c
    return c[np.arange(n) % c.shape[0]]


def joint_sample(prompt_input, prompt_target, query_input, query_target, task: str,
                 m: int, k: int, seed_index: int = 0):
    """Patch all four clouds of an in-context sample with aligned centers.

    FPS runs on each input cloud. Targets reuse the same center indices when
    points correspond one-to-one (denoising, registration); for
    reconstruction each input center is snapped to its nearest target point.
    Input clouds with fewer than ``max(m, k)`` points are padded cyclically.

    Returns ``(prompt_in, prompt_tgt, query_in, query_tgt)`` PatchedClouds.
    """
    out = []
    for inp, tgt in ((prompt_input, prompt_target), (query_input, query_target)):
        inp = pad_cloud(_as_cloud(inp), max(m, k))
        tgt = _as_cloud(tgt)
        idx = farthest_point_sampling(inp, m, seed_index)
        in_patch = knn_group(inp, inp[idx], k, idx)
        if task == "reconstruction" or inp.shape[0] != tgt.shape[0]:
            t_idx = np.argmin(pairwise_sq_dists(inp[idx], tgt), axis=1)
        else:
            t_idx = idx
        tgt_patch = knn_group(tgt, tgt[t_idx], k, t_idx)
        out.extend([in_patch, tgt_patch])
    return tuple(out)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def chamfer_kernel(a: np.ndarray, b: np.ndarray):
    """Batched Chamfer-L2 kernel shared by the metric and the autodiff op.

    Returns ``(value, nn_ab, nn_ba, diff)`` where ``diff[..., i, j] = a_i - b_j``.
    """
    diff = a[..., :, None, :] - b[..., None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    nn_ab = np.argmin(d2, axis=-1)
    nn_ba = np.argmin(d2, axis=-2)
    ab = np.take_along_axis(d2, nn_ab[..., None], axis=-1)[..., 0]
    ba = np.take_along_axis(d2, nn_ba[..., None, :], axis=-2)[..., 0, :]
    value = ab.mean(axis=-1) + ba.mean(axis=-1)
    return value, nn_ab, nn_ba, diff


def chamfer_l2(a, b) -> float:
    """Symmetric mean of squared nearest-neighbour distances."""
    a, b = _as_cloud(a), _as_cloud(b)
    return float(chamfer_kernel(a, b)[0])


def emd(a, b) -> float:
    """Exact Earth Mover's distance: mean Euclidean cost of the optimal bijection."""
    a, b = _as_cloud(a), _as_cloud(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"EMD needs equal sizes, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[0] > EMD_MAX_POINTS:
        raise ValueError(f"EMD limited to {EMD_MAX_POINTS} points, got {a.shape[0]}")
    cost = np.sqrt(pairwise_sq_dists(a, b))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def fscore(pred, gt, tau: float):
    """Precision, recall and F-score at Euclidean threshold ``tau`` (strict <)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    pred, gt = _as_cloud(pred), _as_cloud(gt)
    d = np.sqrt(pairwise_sq_dists(pred, gt))
    precision = float((d.min(axis=1) < tau).mean())
    recall = float((d.min(axis=0) < tau).mean())
    if precision + recall == 0.0:
        return precision, recall, 0.0
    return precision, recall, 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# rotation
# ---------------------------------------------------------------------------

def rotation_matrix(angles_deg) -> np.ndarray:
    """Intrinsic X->Y->Z Euler rotation: ``Rx @ Ry @ Rz``."""
    ax, ay, az = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def random_rotation(c, max_angle_deg: float, rng: np.random.Generator):
    """Rotate about the origin by per-axis angles uniform in ``[-max, +max]``."""
    if not 0 < max_angle_deg <= 180:
        raise ValueError("max_angle_deg must lie in (0, 180]")
    c = _as_cloud(c)
    angles = rng.uniform(-max_angle_deg, max_angle_deg, size=3)
    rot = Rotation(angles_deg=angles, matrix=rotation_matrix(angles))
    return c @ rot.matrix.T, rot
