"""Prototype-pose dictionaries learned by K-means over normalized pose
vectors, plus set merging for mixed-camera models.

Clustering happens in normalized pose space (the space the training loss
is computed in). K-means uses k-means++ seeding and Lloyd iterations;
distance computations avoid BLAS so results are bitwise reproducible at
any thread count.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import Normalizer, Skeleton

DUPLICATE_TOL = 1e-9

# suggested dictionary sizes: 100 (UBC3V-style), 70 (ITOP-style), 140 merged
K_PRESETS = {"ubc3v": 100, "itop": 70, "mixed": 140}


@dataclass(frozen=True)
class PrototypeSet:
    """Matrix of prototype poses: column i is prototype i, in normalized
    pose space (3J rows). Columns are pairwise distinct; K may be 0 only
    for the empty set (merge identity)."""

    matrix: np.ndarray
    skeleton: Skeleton
    normalizer: Normalizer

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("prototype matrix must be 2-D (3J x K)")
        if m.shape[0] != 3 * self.skeleton.joint_count:
            raise ValueError(f"matrix has {m.shape[0]} rows, expected {3 * self.skeleton.joint_count}")
        if m.shape[0] != self.normalizer.dim:
            raise ValueError("matrix rows must match normalizer dim")
        if not np.all(np.isfinite(m)):
            raise ValueError("prototypes must be finite")
        for i in range(m.shape[1]):
            d = np.linalg.norm(m[:, i + 1:] - m[:, i:i + 1], axis=0)
            if np.any(d <= DUPLICATE_TOL):
                raise ValueError("duplicate prototype columns")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def k(self) -> int:
        return self.matrix.shape[1]


def _pairwise_sq_dists(x: np.ndarray, centers: np.ndarray, block: int = 512) -> np.ndarray:
    # ufunc-only (no BLAS) so the reduction order is fixed
    n = x.shape[0]
    out = np.empty((n, centers.shape[0]))
    for s in range(0, n, block):
        diff = x[s:s + block, None, :] - centers[None, :, :]
        out[s:s + block] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def kmeans(vectors, k: int, seed: int = 0, max_iters: int = 300, tol: float = 1e-6,
           debug: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centroids (k, d), labels (n,)). Deterministic given `seed`.
    Empty clusters are re-seeded to the point currently farthest from its
    centroid. Terminates when the max centroid displacement drops below
    `tol` or after `max_iters` iterations. With debug=True the
    within-cluster sum of squares is asserted non-increasing.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("vectors must be a nonempty 2-D array")
    if not np.all(np.isfinite(x)):
        raise ValueError("vectors must be finite")
    n = x.shape[0]
    if k <= 0:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds number of vectors n={n}")

    rng = np.random.default_rng(seed)

    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.einsum("nd,nd->n", x - centers[0], x - centers[0])
    for i in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[i] = x[idx]
        diff = x - centers[i]
        np.minimum(d2, np.einsum("nd,nd->n", diff, diff), out=d2)

    prev_inertia = np.inf
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iters):
        dists = _pairwise_sq_dists(x, centers)
        labels = dists.argmin(axis=1)
        point_d2 = dists[np.arange(n), labels]
        inertia = point_d2.sum()
        if debug and inertia > prev_inertia + 1e-9 * max(1.0, prev_inertia):
            raise AssertionError("k-means objective increased")
        prev_inertia = inertia

        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=k)
        new_centers = centers.copy()
        nonempty = counts > 0
        new_centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            # re-seed each empty cluster to the point farthest from its centroid
            far = point_d2.copy()
            for ci in np.flatnonzero(~nonempty):
                j = int(far.argmax())
                new_centers[ci] = x[j]
                far[j] = -np.inf

        shift = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers
        if shift < tol:
            break

    labels = _pairwise_sq_dists(x, centers).argmin(axis=1)
    return centers, labels


def build_prototypes(vectors, k: int, skeleton: Skeleton, normalizer: Normalizer,
                     seed: int = 0, max_iters: int = 300, tol: float = 1e-6) -> PrototypeSet:
    """Cluster normalized pose vectors into a K-column prototype set."""
    centers, _ = kmeans(vectors, k, seed=seed, max_iters=max_iters, tol=tol)
    return PrototypeSet(centers.T, skeleton, normalizer)


def merge_prototypes(a: PrototypeSet, b: PrototypeSet) -> PrototypeSet:
    """Column-wise union of two prototype sets sharing skeleton/normalizer.

    Duplicate columns (L2 distance <= 1e-9 to an earlier kept column) are
    dropped with a warning.
    """
    if a.skeleton.joints != b.skeleton.joints:
        raise ValueError("cannot merge prototype sets with different skeletons")
    if not (np.array_equal(a.normalizer.mean, b.normalizer.mean)
            and np.array_equal(a.normalizer.std, b.normalizer.std)):
        raise ValueError("cannot merge prototype sets with different normalizers")

    kept: list[np.ndarray] = [a.matrix[:, i] for i in range(a.k)]
    dropped = 0
    for i in range(b.k):
        col = b.matrix[:, i]
        if any(np.linalg.norm(col - c) <= DUPLICATE_TOL for c in kept):
            dropped += 1
        else:
            kept.append(col)
    if dropped:
        warnings.warn(f"merge_prototypes: dropped {dropped} duplicate column(s)", RuntimeWarning)
    matrix = np.stack(kept, axis=1) if kept else np.zeros((a.matrix.shape[0], 0))
    return PrototypeSet(matrix, a.skeleton, a.normalizer)
