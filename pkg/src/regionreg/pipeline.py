"""End-to-end registration network, its two-term loss, training and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .attention import AttentionParams, attend_stack, position_encode
from .cloud import PointCloud, chamfer
from .config import ModelConfig, TrainConfig
from .decoder import DecoderParams, DegeneratePartition, RegionTransforms, decode_regions, fuse_many
from .encoder import EncoderParams, encode_many
from .partition import PartitionParams, RegionBatch, RegionState, branch_logits_many, build_regions
from .rigid import RigidTransform, apply_tensor, random_transform

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"REGIONREG-CKPT\n"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class NetworkParams:
    config: ModelConfig
    encoder: EncoderParams
    partition: PartitionParams
    attention: AttentionParams
    decoder: DecoderParams

    @classmethod
    def init(cls, config: ModelConfig) -> NetworkParams:
        rng = np.random.default_rng(config.seed)
        d, n = config.embed_dim, config.n_regions
        return cls(
            config=config,
            encoder=EncoderParams.init(rng, d),
            partition=PartitionParams.init(rng, d, n),
            attention=AttentionParams.init(rng, d, config.attn_layers),
            decoder=DecoderParams.init(rng, d, n),
        )

    def bundles(self) -> dict:
        return {"encoder": self.encoder, "partition": self.partition,
                "attention": self.attention, "decoder": self.decoder}

    def named(self) -> dict[str, dc.Tensor]:
        out = {}
        for prefix, bundle in self.bundles().items():
            for name, t in bundle.named().items():
                out[f"{prefix}.{name}"] = t
        return out

    def zero_grad(self) -> None:
        for t in self.named().values():
            t.grad = None

    def copy(self) -> NetworkParams:
        clone = NetworkParams.init(self.config)
        src = self.named()
        for name, t in clone.named().items():
            t.data = src[name].data.copy()
        return clone

    def substitute(self, name: str, tensor: dc.Tensor) -> NetworkParams:
        """Shallow copy with one named leaf replaced (used by gradient checks)."""
        bundles = {}
        prefix, rest = name.split(".", 1)
        for key, bundle in self.bundles().items():
            if key != prefix:
                bundles[key] = bundle
                continue
            fields = dict(vars(bundle))
            if rest.startswith("layers."):
                _, i, k = rest.split(".")
                layers = [dict(layer) for layer in fields["layers"]]
                layers[int(i)][k] = tensor
                fields["layers"] = layers
            else:
                fields[rest] = tensor
            bundles[key] = type(bundle)(**fields)
        return NetworkParams(config=self.config, **bundles)


# ---------------------------------------------------------------- forward
#
# Everything runs on stacks of shapes: a batch of P pairs is 2P shapes, the
# source of pair p at position 2p and its target at 2p + 1. Per-point layers
# see all points at once, attention groups keep the shapes apart, and the
# decoder and fusion handle the P pairs row-wise.

@dataclass
class ShapePass:
    regions: RegionState
    rtfs: dc.Tensor
    sample_logits: dc.Tensor | None


@dataclass
class PairPass:
    q: dc.Tensor
    t: dc.Tensor
    source: ShapePass
    target: ShapePass
    region_transforms: RegionTransforms

    @property
    def transform(self) -> RigidTransform:
        return RigidTransform(self.q.data, self.t.data)


@dataclass
class Registration:
    transform: RigidTransform
    regions_source: RegionState
    regions_target: RegionState
    region_transforms: RegionTransforms


@dataclass
class StackPass:
    """Encoder, partition and attention outputs for K stacked shapes."""
    regions: RegionBatch
    rtfs: dc.Tensor  # K*n x d
    sample_logits: dc.Tensor | None  # sample rows of all shapes, in shape order
    sample_sizes: np.ndarray | None


def _points(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)


def stack_pass(clouds: Sequence[np.ndarray], params: NetworkParams,
               samples: Sequence[np.ndarray] | None = None) -> StackPass:
    cfg = params.config
    n = cfg.n_regions
    clouds = [_points(c) for c in clouds]
    sizes = np.array([len(c) for c in clouds])
    feats, embeddings = encode_many(clouds, params.encoder)
    surface = np.concatenate(clouds, axis=0)
    logits = branch_logits_many(surface, embeddings, sizes, params.partition)
    sample_logits = sample_sizes = None
    if samples is not None:
        samples = [_points(s) for s in samples]
        sample_sizes = np.array([len(s) for s in samples])
        sample_logits = branch_logits_many(np.concatenate(samples, axis=0), embeddings, sample_sizes,
                                           params.partition)
    regions = build_regions(sizes, surface, feats, logits, n)
    f = regions.rfs
    if cfg.position_encoding:
        cents = [c if occ else None for c, occ in zip(regions.centroids, regions.occupied)]
        f = dc.add(f, position_encode(cents, regions.occupied, params.attention))
    rtfs = attend_stack(f, regions.occupied, params.attention, mode=cfg.attention_mode,
                        logit_scaling=cfg.logit_scaling, groups=np.repeat(np.arange(len(clouds)), n))
    return StackPass(regions=regions, rtfs=rtfs, sample_logits=sample_logits, sample_sizes=sample_sizes)


def shape_pass(points: np.ndarray, params: NetworkParams, samples: np.ndarray | None = None) -> ShapePass:
    sp = stack_pass([points], params, None if samples is None else [samples])
    return ShapePass(regions=sp.regions.state(0), rtfs=sp.rtfs, sample_logits=sp.sample_logits)


def _pair_rows(pairs: Sequence[int], n: int) -> tuple[np.ndarray, np.ndarray]:
    """RTFS row indices of the sources and targets of the given pairs."""
    pairs = np.asarray(pairs, dtype=np.intp)
    regions = np.arange(n)
    src = (2 * pairs[:, None] * n + regions).reshape(-1)
    return src, src + n


def decode_pairs(sp: StackPass, pairs: Sequence[int], params: NetworkParams
                 ) -> tuple[dc.Tensor, dc.Tensor, RegionTransforms]:
    """Fused (P x 4 quaternions, P x 3 translations) for the selected pairs of a stack."""
    n = params.config.n_regions
    src, tgt = _pair_rows(pairs, n)
    counts = sp.regions.counts
    pairs = np.asarray(pairs, dtype=np.intp)
    rt = decode_regions(dc.gather_rows(sp.rtfs, src), dc.gather_rows(sp.rtfs, tgt),
                        counts[2 * pairs], counts[2 * pairs + 1], params.decoder)
    q, t = fuse_many(rt, n)
    return q, t, rt


def forward_pair(source, target, params: NetworkParams, samples_source=None, samples_target=None) -> PairPass:
    with_samples = samples_source is not None and samples_target is not None
    sp = stack_pass([source, target], params, [samples_source, samples_target] if with_samples else None)
    q, t, rt = decode_pairs(sp, [0], params)

    def shape(k):
        logits = None
        if with_samples:
            m = int(sp.sample_sizes[0])
            logits = sp.sample_logits[:m] if k == 0 else sp.sample_logits[m:]
        n = params.config.n_regions
        return ShapePass(regions=sp.regions.state(k), rtfs=dc.getitem(sp.rtfs, slice(k * n, (k + 1) * n)),
                         sample_logits=logits)

    return PairPass(q=dc.reshape(q, (4,)), t=dc.reshape(t, (3,)), source=shape(0), target=shape(1),
                    region_transforms=rt)


def register(source, target, params: NetworkParams) -> Registration:
    """Predict the rigid transform moving ``source`` onto ``target``."""
    sp = stack_pass([source, target], params)
    q, t, rt = decode_pairs(sp, [0], params)
    return Registration(transform=RigidTransform(q.data[0], t.data[0]), regions_source=sp.regions.state(0),
                        regions_target=sp.regions.state(1), region_transforms=rt)


# ---------------------------------------------------------------- loss

@dataclass(frozen=True)
class TrainItem:
    """One unsupervised training example. Deliberately carries no ground truth."""
    source: PointCloud
    target: PointCloud
    sampled_source: PointCloud
    sampled_target: PointCloud


@dataclass
class LossParts:
    total: dc.Tensor
    chamfer: float
    recon: float


@dataclass
class BatchLoss:
    """Mean loss over the usable pairs of a batch, with per-pair terms for the trace."""
    total: dc.Tensor | None
    chamfer: list[float]
    recon: list[float]
    pair_totals: list[float]
    skipped: list[int]


def batch_loss(items: Sequence[TrainItem], params: NetworkParams, recon_weight: float) -> BatchLoss:
    """Average of chamfer(T_p(S_p), G_p) + recon_weight * (BCE_S + BCE_G) over the batch.

    Pairs whose partition shares no occupied region are left out and listed
    in ``skipped``; ``total`` is None when every pair is skipped.
    """
    use_recon = recon_weight > 0 and all(
        it.sampled_source is not None and it.sampled_target is not None for it in items)
    clouds, samples = [], []
    for it in items:
        clouds += [_points(it.source), _points(it.target)]
        if use_recon:
            samples += [it.sampled_source, it.sampled_target]
    sp = stack_pass(clouds, params, samples if use_recon else None)
    usable = (sp.regions.counts[0::2] > 0) & (sp.regions.counts[1::2] > 0)
    good = np.flatnonzero(usable.any(axis=1))
    skipped = np.flatnonzero(~usable.any(axis=1)).tolist()
    if len(good) == 0:
        return BatchLoss(None, [], [], [], skipped)
    q, t, _ = decode_pairs(sp, good, params)
    chamfers = []
    for row, p in enumerate(good):
        moved = apply_tensor(clouds[2 * p], dc.getitem(q, row), dc.getitem(t, row))
        chamfers.append(dc.reshape(chamfer(moved, clouds[2 * p + 1]), (1,)))
    align = dc.concat(chamfers, axis=0) if len(chamfers) > 1 else chamfers[0]
    per_pair = align
    recon_vals = [0.0] * len(good)
    if use_recon:
        labels = np.concatenate([s.occupancy for s in samples]).astype(np.float64)
        z, _ = dc.max_reduce(sp.sample_logits, axis=1)
        bce = dc.sub(dc.softplus(z), dc.mul(dc.Tensor(labels), z))
        # row p of the pooling matrix averages the samples of both shapes of pair p
        starts = np.concatenate([[0], np.cumsum(sp.sample_sizes)])
        pool = np.zeros((len(good), len(labels)))
        for row, p in enumerate(good):
            for k in (2 * p, 2 * p + 1):
                pool[row, starts[k]:starts[k + 1]] = 1.0 / sp.sample_sizes[k]
        recon = dc.matmul(dc.Tensor(pool), bce)
        recon_vals = recon.data.tolist()
        per_pair = dc.add(align, dc.scale(recon, recon_weight))
    total = dc.scale(dc.sum(per_pair), 1.0 / len(good))
    return BatchLoss(total, align.data.tolist(), recon_vals, per_pair.data.tolist(), skipped)


def loss_parts(source, target, sampled_source: PointCloud | None, sampled_target: PointCloud | None,
               params: NetworkParams, recon_weight: float) -> LossParts:
    item = TrainItem(source=PointCloud(_points(source)), target=PointCloud(_points(target)),
                     sampled_source=sampled_source, sampled_target=sampled_target)
    out = batch_loss([item], params, recon_weight)
    if out.total is None:
        raise DegeneratePartition("degenerate partition: no region is occupied in both shapes")
    return LossParts(total=out.total, chamfer=out.chamfer[0], recon=out.recon[0])


def loss_fn(source, target, sampled_source, sampled_target, params: NetworkParams,
            recon_weight: float) -> dc.Tensor:
    """chamfer(T(S), G) + recon_weight * (BCE_S + BCE_G)."""
    return loss_parts(source, target, sampled_source, sampled_target, params, recon_weight).total


# ---------------------------------------------------------------- training

class Adam:
    def __init__(self, tensors: Sequence[dc.Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.tensors = list(tensors)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.steps = 0

    def step(self) -> None:
        self.steps += 1
        c1 = 1.0 - self.beta1 ** self.steps
        c2 = 1.0 - self.beta2 ** self.steps
        for t, m, v in zip(self.tensors, self.m, self.v):
            if t.grad is None:
                g = np.zeros_like(t.data)
            else:
                g = t.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data = t.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def repose_item(item: TrainItem, rng: np.random.Generator, max_angle_deg: float = 45.0,
                max_translation: float = 0.5) -> TrainItem:
    """Replace the target with a new random rigid motion of the source.

    Occupancy labels are invariant under rigid motion, so the source samples
    moved along with it label the new target. The drawn motion is discarded.
    """
    T = random_transform(rng, max_angle_deg, max_translation)
    src = _points(item.source)
    target = PointCloud(T.apply(src)[rng.permutation(len(src))])
    sampled = item.sampled_source
    moved = None if sampled is None else PointCloud(T.apply(sampled.points), sampled.occupancy)
    return TrainItem(item.source, target, sampled, moved)


@dataclass
class TrainResult:
    """``params`` are the returned weights: the running average when
    ``weight_average`` is set, else the last iterate (always in ``last``)."""
    params: NetworkParams
    trace: list[dict] = field(default_factory=list)
    last: NetworkParams | None = None


def train(dataset: Iterable[TrainItem], config: TrainConfig, params: NetworkParams | None = None,
          model_config: ModelConfig | None = None, progress=None) -> TrainResult:
    """Adam over shuffled mini-batches of independent pairs (loss averaged per batch).

    The trace holds one row per epoch: mean total loss, mean Chamfer term,
    mean reconstruction term, and the count of pairs skipped because their
    partition left no region shared by both shapes. With ``config.repose``
    every target is redrawn from its source at the start of each epoch.
    With ``config.weight_average = b`` the returned weights follow
    avg <- b * avg + (1 - b) * current after every epoch.
    """
    items = list(dataset)
    if not items:
        raise ValueError("train: empty dataset")
    for it in items:
        if not isinstance(it, TrainItem):
            raise TypeError(f"train expects TrainItem entries, got {type(it).__name__}")
    if params is None:
        params = NetworkParams.init(model_config or ModelConfig())
    named = params.named()
    opt = Adam(list(named.values()), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    pose_rng = np.random.default_rng([config.seed, 1])
    result = TrainResult(params=params, last=params)
    average = None
    for epoch in range(config.epochs):
        order = rng.permutation(len(items))
        epoch_items = items
        if config.repose:
            epoch_items = [repose_item(it, pose_rng, config.repose_max_angle_deg, config.repose_max_translation)
                           for it in items]
        totals, chamfers, recons, skipped = [], [], [], 0
        for b, start in enumerate(range(0, len(items), config.batch_size)):
            batch = [epoch_items[i] for i in order[start:start + config.batch_size]]
            params.zero_grad()
            try:
                out = batch_loss(batch, params, config.recon_weight)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}: {exc}") from exc
            skipped += len(out.skipped)
            if out.total is None:
                continue
            if not np.isfinite(out.total.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            out.total.backward()
            opt.step()
            totals += out.pair_totals
            chamfers += out.chamfer
            recons += out.recon
        row = {
            "epoch": epoch,
            "loss": float(np.mean(totals)) if totals else float("nan"),
            "chamfer": float(np.mean(chamfers)) if chamfers else float("nan"),
            "recon": float(np.mean(recons)) if recons else float("nan"),
            "skipped": skipped,
        }
        result.trace.append(row)
        if config.weight_average > 0:
            b = config.weight_average
            if average is None:
                average = {k: t.data.copy() for k, t in named.items()}
            else:
                for k, t in named.items():
                    average[k] = b * average[k] + (1.0 - b) * t.data
        if progress is not None:
            progress(row)
        log.debug("epoch %d loss %.6g chamfer %.6g", epoch, row["loss"], row["chamfer"])
    if average is not None:
        result.params = params.copy()
        for k, t in result.params.named().items():
            t.data = average[k]
    return result


def write_trace_csv(path, trace: list[dict]) -> None:
    lines = ["epoch,loss,chamfer,recon,skipped"]
    for r in trace:
        lines.append(f"{r['epoch']},{r['loss']:.17g},{r['chamfer']:.17g},{r['recon']:.17g},{r['skipped']}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- checkpoints
#
# Layout:
#   b"REGIONREG-CKPT\n"
#   b"version <int>\n"
#   b"<header byte length>\n"
#   <header: UTF-8 JSON {"config": {...}, "tensors": [{"name", "shape", "offset"}], "sha256": payload hex}>
#   <payload: concatenated little-endian float64 arrays in header order>

def save_checkpoint(path, params: NetworkParams) -> None:
    named = params.named()
    entries, chunks, offset = [], [], 0
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    payload = b"".join(chunks)
    header = json.dumps({"config": asdict(params.config), "tensors": entries,
                         "sha256": hashlib.sha256(payload).hexdigest()}, sort_keys=True).encode()
    blob = CHECKPOINT_MAGIC + f"version {CHECKPOINT_VERSION}\n{len(header)}\n".encode() + header + payload
    Path(path).write_bytes(blob)


def load_checkpoint(path, expect: ModelConfig | None = None) -> NetworkParams:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a regionreg checkpoint (bad magic)")
    rest = blob[len(CHECKPOINT_MAGIC):]
    try:
        version_line, length_line, rest = rest.split(b"\n", 2)
        version = int(version_line.decode().split()[1])
        header_len = int(length_line)
    except (ValueError, IndexError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint preamble") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}")
    if len(rest) < header_len:
        raise CheckpointError(f"{path}: corrupt checkpoint (truncated header)")
    try:
        header = json.loads(rest[:header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header") from exc
    payload = rest[header_len:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: corrupt checkpoint (payload checksum mismatch or truncated)")
    config = ModelConfig(**header["config"])
    if expect is not None and expect != config:
        raise CheckpointError(f"{path}: checkpoint config {config} does not match expected {expect}")
    params = NetworkParams.init(config)
    named = params.named()
    stored = {e["name"]: e for e in header["tensors"]}
    if set(stored) != set(named):
        raise CheckpointError(f"{path}: tensor names do not match the configured network")
    for name, t in named.items():
        e = stored[name]
        shape = tuple(e["shape"])
        if shape != t.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {shape}, network expects {t.shape}")
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        t.data = arr.astype(np.float64).reshape(shape)
    return params
