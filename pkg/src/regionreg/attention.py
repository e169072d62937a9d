"""Centroid position encoding and single-head self-attention over regions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .layers import ParamBundle, glorot, leaf

PE_HIDDEN = 32
_MASKED_LOGIT = -1e30


@dataclass
class AttentionParams(ParamBundle):
    pe_w1: dc.Tensor
    pe_b1: dc.Tensor
    pe_w2: dc.Tensor
    pe_b2: dc.Tensor
    layers: list  # one {"phi", "psi", "alpha"} dict of d x d tensors per layer

    @property
    def embed_dim(self) -> int:
        return self.pe_w2.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, embed_dim: int, n_layers: int) -> AttentionParams:
        d = embed_dim
        layers = [{k: leaf(glorot(rng, d, d)) for k in ("phi", "psi", "alpha")} for _ in range(n_layers)]
        return cls(
            pe_w1=leaf(glorot(rng, 3, PE_HIDDEN)), pe_b1=leaf(np.zeros(PE_HIDDEN)),
            pe_w2=leaf(glorot(rng, PE_HIDDEN, d)), pe_b2=leaf(np.zeros(d)),
            layers=layers,
        )


def _row_mask(mask: np.ndarray, width: int) -> dc.Tensor:
    return dc.Tensor(np.repeat(np.asarray(mask, dtype=np.float64)[:, None], width, axis=1))


def position_encode(centroids, occupied, params: AttentionParams) -> dc.Tensor:
    """delta(centroid_k) for occupied regions, zero rows elsewhere."""
    occupied = np.asarray(occupied, dtype=bool)
    rows = []
    for k, c in enumerate(centroids):
        if occupied[k]:
            if c is None:
                raise ValueError(f"region {k} is occupied but has no centroid")
            rows.append(np.asarray(c, dtype=np.float64))
        else:
            rows.append(np.zeros(3))
    c = dc.Tensor(np.array(rows))
    h = dc.linear(c, params.pe_w1, params.pe_b1, relu=True)
    p = dc.linear(h, params.pe_w2, params.pe_b2)
    return dc.mul(p, _row_mask(occupied, params.embed_dim))


def self_attend(f: dc.Tensor, mask, params: AttentionParams, layer: int,
                mode: str = "standard", logit_scaling: bool = False,
                groups=None) -> tuple[dc.Tensor, np.ndarray]:
    """One attention layer with residual; returns (output, attention weights).

    Masked regions are excluded from every softmax and produce zero rows.
    ``groups`` (one id per row) stacks independent sequences: a row only
    attends to rows of its own group.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("self_attend: every region is masked")
    n, d = f.shape
    allowed = np.broadcast_to(mask[None, :], (n, n))
    if groups is not None:
        groups = np.asarray(groups)
        allowed = allowed & (groups[:, None] == groups[None, :])
    proj = params.layers[layer]
    q = dc.matmul(f, proj["phi"])
    k = dc.matmul(f, proj["psi"])
    v = dc.matmul(f, proj["alpha"])
    logits = dc.matmul(q, dc.transpose(k))
    if logit_scaling:
        logits = dc.scale(logits, 1.0 / np.sqrt(d))
    weights = dc.softmax(dc.add(logits, dc.Tensor(np.where(allowed, 0.0, _MASKED_LOGIT))), axis=1)
    if mode == "standard":
        mixed = dc.matmul(weights, v)
    elif mode == "as_printed":
        # sum_j w_ij * alpha(f_i)
        mixed = dc.scale_rows(v, dc.sum(weights, axis=1))
    else:
        raise ValueError(f"unknown attention mode {mode!r}")
    out = dc.mul(dc.add(mixed, f), _row_mask(mask, d))
    return out, weights.data


def attend_stack(f: dc.Tensor, mask, params: AttentionParams, mode: str = "standard",
                 logit_scaling: bool = False, groups=None) -> dc.Tensor:
    a = dc.mul(f, _row_mask(mask, f.shape[1]))
    for layer in range(len(params.layers)):
        a, _ = self_attend(a, mask, params, layer, mode=mode, logit_scaling=logit_scaling, groups=groups)
    return a
