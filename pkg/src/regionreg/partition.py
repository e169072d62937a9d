"""Region partition: per-point region scores, hard labels, the region feature
sequence and the inside/outside occupancy read-out.

The n branch MLPs h_k: (d+3) -> 32 -> 1 are stored side by side. The first
layers are concatenated column-wise into one (d+3) x 32n matrix; the second
layers form a block-diagonal 32n x n matrix whose off-block entries are masked
out in every forward pass, so the branches never share weights.
"""

from __future__ import annotations

import functools

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .layers import ParamBundle, glorot, leaf

BRANCH_HIDDEN = 32


@functools.lru_cache(maxsize=None)
def _block_mask(n: int) -> np.ndarray:
    mask = np.kron(np.eye(n), np.ones((BRANCH_HIDDEN, 1)))
    mask.setflags(write=False)
    return mask


@dataclass
class PartitionParams(ParamBundle):
    w1: dc.Tensor  # (d+3) x 32n
    b1: dc.Tensor  # 32n
    w2: dc.Tensor  # 32n x n, block diagonal
    b2: dc.Tensor  # n

    @property
    def n_regions(self) -> int:
        return self.b2.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w1.shape[0] - 3

    @classmethod
    def init(cls, rng: np.random.Generator, embed_dim: int, n_regions: int) -> PartitionParams:
        fan_in = embed_dim + 3
        w1 = np.concatenate([glorot(rng, fan_in, BRANCH_HIDDEN) for _ in range(n_regions)], axis=1)
        w2 = np.zeros((BRANCH_HIDDEN * n_regions, n_regions))
        for k in range(n_regions):
            w2[k * BRANCH_HIDDEN:(k + 1) * BRANCH_HIDDEN, k] = glorot(rng, BRANCH_HIDDEN, 1, shape=BRANCH_HIDDEN)
        return cls(
            w1=leaf(w1), b1=leaf(np.zeros(BRANCH_HIDDEN * n_regions)),
            w2=leaf(w2), b2=leaf(np.zeros(n_regions)),
        )


@dataclass
class RegionState:
    scores: np.ndarray  # N x n
    labels: np.ndarray  # N
    counts: np.ndarray  # n
    centroids: list  # n entries, 3-vector or None
    rfs: dc.Tensor  # n x d
    occupied: np.ndarray  # n

    def centroid_matrix(self) -> np.ndarray:
        return np.array([c if c is not None else np.zeros(3) for c in self.centroids])


def branch_logits_many(points, embeddings: dc.Tensor, counts, params: PartitionParams) -> dc.Tensor:
    """Branch logits for rows of several shapes at once.

    ``points`` stacks the query rows of K shapes in order, ``counts[k]`` rows
    for shape k, and ``embeddings`` holds the K shape embeddings.
    """
    x = dc.as_tensor(points)
    counts = np.asarray(counts, dtype=np.intp)
    if embeddings.ndim != 2 or embeddings.shape[1] != params.embed_dim:
        raise dc.ShapeError(
            f"partition: embedding shape {embeddings.shape} does not match params expecting "
            f"(K, {params.embed_dim})")
    if counts.shape != (embeddings.shape[0],) or counts.sum() != x.shape[0]:
        raise dc.ShapeError(f"partition: row counts {counts.tolist()} do not cover {x.shape[0]} rows")
    # [x, e] @ W1 split as x @ W1[:3] + e @ W1[3:]: the embedding term is shared by a shape's rows
    shared = dc.linear(embeddings, params.w1[3:], params.b1)
    hidden = dc.linear_segments(x, params.w1[:3], shared, counts, relu=True)
    w2 = dc.mul(params.w2, dc.Tensor(_block_mask(params.n_regions)))
    return dc.linear(hidden, w2, params.b2)


def branch_logits(points, embedding: dc.Tensor, params: PartitionParams) -> dc.Tensor:
    """h_k([x, e]) for every point and branch, an M x n tensor of logits."""
    x = dc.as_tensor(points)
    if embedding.shape != (params.embed_dim,):
        raise dc.ShapeError(
            f"partition: embedding shape {embedding.shape} does not match params expecting ({params.embed_dim},)")
    return branch_logits_many(x, dc.reshape(embedding, (1, params.embed_dim)), [x.shape[0]], params)


def score_points(points, embedding: dc.Tensor, params: PartitionParams) -> dc.Tensor:
    return dc.softmax(branch_logits(points, embedding, params), axis=1)


def assign_regions(scores, n_regions: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    s = scores.data if isinstance(scores, dc.Tensor) else np.asarray(scores)
    n = s.shape[1] if n_regions is None else n_regions
    labels = np.argmax(s, axis=1)
    return labels, np.bincount(labels, minlength=n)


def region_feature_sequence(point_features: dc.Tensor, labels, n_regions: int) -> tuple[dc.Tensor, np.ndarray]:
    return dc.segment_max(point_features, labels, n_regions)


def occupancy(points, embedding: dc.Tensor, params: PartitionParams) -> dc.Tensor:
    """Inside probability per point: the max over branches of sigmoid(h_k)."""
    probs = dc.sigmoid(branch_logits(points, embedding, params))
    values, _ = dc.max_reduce(probs, axis=1)
    return values


def occupancy_bce(logits: dc.Tensor, labels) -> dc.Tensor:
    """Mean binary cross-entropy of the union occupancy against boolean labels.

    Uses max_k sigmoid(l_k) = sigmoid(max_k l_k) and the softplus form of BCE.
    """
    z, _ = dc.max_reduce(logits, axis=1)
    y = dc.Tensor(np.asarray(labels, dtype=np.float64))
    return dc.mean(dc.sub(dc.softplus(z), dc.mul(y, z)))


@dataclass
class RegionBatch:
    """Region states of K shapes whose point rows are stacked in order.

    Per-region arrays have K*n rows, shape k owning rows k*n .. k*n + n - 1.
    """
    sizes: np.ndarray  # K point counts
    scores: np.ndarray  # sum(sizes) x n
    labels: np.ndarray  # sum(sizes)
    counts: np.ndarray  # K x n
    centroids: np.ndarray  # K*n x 3, zero rows for empty regions
    rfs: dc.Tensor  # K*n x d
    occupied: np.ndarray  # K*n

    @property
    def n_regions(self) -> int:
        return self.counts.shape[1]

    def state(self, k: int) -> RegionState:
        n = self.n_regions
        start = int(self.sizes[:k].sum())
        rows = slice(start, start + int(self.sizes[k]))
        regions = slice(k * n, (k + 1) * n)
        occupied = self.occupied[regions]
        cents = [self.centroids[k * n + r] if occupied[r] else None for r in range(n)]
        rfs = self.rfs if len(self.sizes) == 1 else dc.getitem(self.rfs, regions)
        return RegionState(scores=self.scores[rows], labels=self.labels[rows], counts=self.counts[k],
                           centroids=cents, rfs=rfs, occupied=occupied)


def build_regions(sizes, points: np.ndarray, point_features: dc.Tensor, logits: dc.Tensor,
                  n_regions: int) -> RegionBatch:
    """Hard-assign every point of K stacked shapes and pool its region features."""
    sizes = np.asarray(sizes, dtype=np.intp)
    k_shapes = len(sizes)
    scores = dc.softmax(logits.detach(), axis=1).data
    labels, _ = assign_regions(scores, n_regions)
    slot = np.repeat(np.arange(k_shapes), sizes) * n_regions + labels
    rfs, occupied = region_feature_sequence(point_features, slot, n_regions * k_shapes)
    flat_counts = np.bincount(slot, minlength=n_regions * k_shapes)
    sums = np.stack([np.bincount(slot, weights=points[:, c], minlength=n_regions * k_shapes)
                     for c in range(3)], axis=1)
    centroids = sums / np.maximum(flat_counts, 1)[:, None]
    return RegionBatch(sizes=sizes, scores=scores, labels=labels,
                       counts=flat_counts.reshape(k_shapes, n_regions), centroids=centroids,
                       rfs=rfs, occupied=occupied)


def build_region_state(points: np.ndarray, point_features: dc.Tensor, logits: dc.Tensor,
                       n_regions: int) -> RegionState:
    points = np.asarray(points, dtype=np.float64)
    return build_regions([len(points)], points, point_features, logits, n_regions).state(0)
