"""PointNet-style shared per-point MLP with a max-pooled shape embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .layers import ParamBundle, glorot, leaf

HIDDEN = (64, 128)


@dataclass
class EncoderParams(ParamBundle):
    w1: dc.Tensor
    b1: dc.Tensor
    w2: dc.Tensor
    b2: dc.Tensor
    w3: dc.Tensor
    b3: dc.Tensor

    @property
    def embed_dim(self) -> int:
        return self.w3.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, embed_dim: int) -> EncoderParams:
        h1, h2 = HIDDEN
        return cls(
            w1=leaf(glorot(rng, 3, h1)), b1=leaf(np.zeros(h1)),
            w2=leaf(glorot(rng, h1, h2)), b2=leaf(np.zeros(h2)),
            w3=leaf(glorot(rng, h2, embed_dim)), b3=leaf(np.zeros(embed_dim)),
        )


def _as_points(points) -> np.ndarray:
    x = np.asarray(points.points if hasattr(points, "points") else points, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or x.shape[0] < 1:
        raise dc.ShapeError(f"encode: expected nonempty N x 3 points, got {x.shape}")
    if not np.isfinite(x).all():
        raise FloatingPointError("encode: non-finite input points")
    return x


def encode_many(clouds, params: EncoderParams) -> tuple[dc.Tensor, dc.Tensor]:
    """Encode K clouds in one pass.

    Returns (per-point features for all clouds stacked in order, K x d
    embeddings). Row k of the embeddings is the column-wise max over the
    points of cloud k.
    """
    pts = [_as_points(c) for c in clouds]
    if not pts:
        raise dc.ShapeError("encode: no clouds")
    x = dc.Tensor(np.concatenate(pts, axis=0))
    owner = np.repeat(np.arange(len(pts)), [len(p) for p in pts])
    h = dc.linear(x, params.w1, params.b1, relu=True)
    h = dc.linear(h, params.w2, params.b2, relu=True)
    feats = dc.linear(h, params.w3, params.b3, relu=True)
    embeddings, _ = dc.segment_max(feats, owner, len(pts))
    return feats, embeddings


def encode(points, params: EncoderParams) -> tuple[dc.Tensor, dc.Tensor]:
    """Return (per-point features N x d, shape embedding d).

    The embedding is the column-wise max over points, so it does not depend
    on point order or multiplicity.
    """
    feats, embeddings = encode_many([points], params)
    return feats, dc.reshape(embeddings, (params.embed_dim,))
