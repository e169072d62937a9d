"""Per-region transform heads and point-count weighted fusion.

Each head g_k: 2d -> 64 -> 7 emits (qw, qx, qy, qz, tx, ty, tz). Like the
partition branches, the heads are stored side by side: one 2d x 64n first
layer, and a 64n x 7 second layer stacked head by head. Row k of the hidden
activations is masked to block k before the second layer, which routes region
k through its own head only.
"""

from __future__ import annotations

import functools

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .layers import ParamBundle, glorot, leaf
from .rigid import RigidTransform

HEAD_HIDDEN = 64
OUT_DIM = 7
IDENTITY_BIAS = np.array([1.0, 0, 0, 0, 0, 0, 0])
_FUSION_EPS = 1e-8
_ZERO_QUAT_EPS = 1e-12


class DegeneratePartition(ValueError):
    pass


class FusionSingularity(ValueError):
    pass


@dataclass
class DecoderParams(ParamBundle):
    w1: dc.Tensor  # 2d x 64n
    b1: dc.Tensor  # 64n
    w2: dc.Tensor  # 64n x 7
    b2: dc.Tensor  # n x 7

    @property
    def n_regions(self) -> int:
        return self.b2.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, embed_dim: int, n_regions: int) -> DecoderParams:
        w1 = np.concatenate([glorot(rng, 2 * embed_dim, HEAD_HIDDEN) for _ in range(n_regions)], axis=1)
        return cls(
            w1=leaf(w1), b1=leaf(np.zeros(HEAD_HIDDEN * n_regions)),
            w2=leaf(np.zeros((HEAD_HIDDEN * n_regions, OUT_DIM))),
            b2=leaf(np.tile(IDENTITY_BIAS, (n_regions, 1))),
        )


@dataclass
class RegionTransforms:
    quats: dc.Tensor  # n x 4, unit rows with w >= 0
    trans: dc.Tensor  # n x 3
    weights: np.ndarray  # n, zero for unusable regions
    usable: np.ndarray  # n

    def per_region(self) -> list[RigidTransform]:
        return [RigidTransform(self.quats.data[k], self.trans.data[k]) for k in range(len(self.weights))]


@functools.lru_cache(maxsize=None)
def _head_mask(n: int) -> np.ndarray:
    mask = np.kron(np.eye(n), np.ones((1, HEAD_HIDDEN)))
    mask.setflags(write=False)
    return mask


def raw_heads(rtfs_source: dc.Tensor, rtfs_target: dc.Tensor, params: DecoderParams) -> dc.Tensor:
    """Raw 7-vectors for P stacked pairs: row p*n + k is head k applied to pair p."""
    n = params.n_regions
    if rtfs_source.shape != rtfs_target.shape or rtfs_source.ndim != 2 or rtfs_source.shape[0] % n:
        raise dc.ShapeError(
            f"decode: RTFS shapes {rtfs_source.shape} / {rtfs_target.shape} vs {n} heads")
    pairs = rtfs_source.shape[0] // n
    x = dc.concat([rtfs_source, rtfs_target], axis=1)
    hidden = dc.linear(x, params.w1, params.b1, relu=True)
    hidden = dc.mul(hidden, dc.Tensor(np.tile(_head_mask(n), (pairs, 1))))
    bias = params.b2 if pairs == 1 else dc.gather_rows(params.b2, np.tile(np.arange(n), pairs))
    return dc.add(dc.matmul(hidden, params.w2), bias)


def decode_regions(rtfs_source: dc.Tensor, rtfs_target: dc.Tensor, counts_source, counts_target,
                   params: DecoderParams) -> RegionTransforms:
    """Per-region transforms for one pair, or P pairs stacked row-wise.

    Counts are n-vectors for a single pair or P x n arrays. Weights are
    normalized within each pair.
    """
    n = params.n_regions
    counts_source = np.asarray(counts_source).reshape(-1)
    counts_target = np.asarray(counts_target).reshape(-1)
    usable = (counts_source > 0) & (counts_target > 0)
    per_pair = usable.reshape(-1, n).any(axis=1)
    if not per_pair.all():
        bad = np.flatnonzero(~per_pair).tolist()
        raise DegeneratePartition(f"degenerate partition: no region is occupied in both shapes (pairs {bad})")
    rows = len(usable)
    raw = raw_heads(rtfs_source, rtfs_target, params)
    q_raw = raw[:, 0:4]
    norms = np.linalg.norm(q_raw.data, axis=1)
    # unusable heads and zero quaternions collapse to the identity, without gradient
    keep = usable & (norms >= _ZERO_QUAT_EPS)
    ident = np.tile(IDENTITY_BIAS[:4], (rows, 1))
    safe_raw = dc.add(dc.mul(q_raw, dc.Tensor(np.repeat(keep[:, None], 4, axis=1).astype(float))),
                      dc.Tensor(ident * (~keep)[:, None]))
    norm = dc.sqrt(dc.sum(dc.mul(safe_raw, safe_raw), axis=1))
    signs = np.where(safe_raw.data[:, 0] < 0, -1.0, 1.0)
    quats = dc.scale_rows(safe_raw, dc.div(dc.Tensor(signs), norm))
    trans = dc.mul(raw[:, 4:7], dc.Tensor(np.repeat(usable[:, None], 3, axis=1).astype(float)))
    pooled = np.where(usable, counts_source + counts_target, 0).astype(np.float64).reshape(-1, n)
    weights = (pooled / pooled.sum(axis=1, keepdims=True)).reshape(-1)
    return RegionTransforms(quats=quats, trans=trans, weights=weights, usable=usable)


def fuse_many(rt: RegionTransforms, n_regions: int) -> tuple[dc.Tensor, dc.Tensor]:
    """Fuse P stacked pairs of n regions each into P x 4 quaternions and P x 3 translations."""
    w = np.asarray(rt.weights, dtype=np.float64).reshape(-1, n_regions)
    total = w.sum(axis=1, keepdims=True)
    if (total <= 0).any():
        raise ValueError("fusion weights sum to zero")
    w = w / total
    pairs = w.shape[0]
    q = rt.quats.data.reshape(pairs, n_regions, 4)
    ref = q[np.arange(pairs), np.argmax(w, axis=1)]
    align = np.where(np.einsum("pkc,pc->pk", q, ref) < 0, -1.0, 1.0)
    blocks = np.zeros((pairs, pairs * n_regions))
    aligned = np.zeros_like(blocks)
    for p in range(pairs):
        blocks[p, p * n_regions:(p + 1) * n_regions] = w[p]
        aligned[p, p * n_regions:(p + 1) * n_regions] = w[p] * align[p]
    qsum = dc.matmul(dc.Tensor(aligned), rt.quats)
    qnorm = np.linalg.norm(qsum.data, axis=1)
    if (qnorm < _FUSION_EPS).any():
        raise FusionSingularity(f"fusion singularity: quaternion sum norm {qnorm.min():.3g}")
    norm = dc.sqrt(dc.sum(dc.mul(qsum, qsum), axis=1))
    sign = np.where(qsum.data[:, 0] < 0, -1.0, 1.0)
    fused_q = dc.scale_rows(qsum, dc.div(dc.Tensor(sign), norm))
    fused_t = dc.matmul(dc.Tensor(blocks), rt.trans)
    return fused_q, fused_t


def fuse_transforms(rt: RegionTransforms) -> tuple[dc.Tensor, dc.Tensor]:
    """Weighted fusion into a single (unit quaternion, translation) pair.

    Translations are averaged linearly; quaternions are sign-aligned to the
    heaviest region, averaged with the same weights and renormalized.
    """
    q, t = fuse_many(rt, len(rt.weights))
    return dc.reshape(q, (4,)), dc.reshape(t, (3,))
