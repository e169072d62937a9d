"""Synthetic solids with exact inside/outside tests, occupancy sampling,
random-transform pair generation and the three noise injectors.

Every solid is normalized so its analytic bounding box is centred at the
origin with largest half-extent 0.5, i.e. it fits the unit cube.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .cloud import KdTree, PointCloud, nearest_k
from .config import DataConfig, NoiseConfig
from .pipeline import TrainItem
from .rigid import RigidTransform, random_transform

KINDS = ("sphere", "box", "cylinder", "torus", "union")
NOISE_KINDS = ("clean", "DI", "PD", "DO")

Oracle = Callable[[np.ndarray], np.ndarray]


class OneClassSample(RuntimeError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    """A primitive solid.

    size: sphere (radius,), box (x, y, z extents), cylinder (radius, height),
    torus (major radius, minor radius). A union combines ``parts``.
    """
    kind: str
    size: tuple = ()
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    n_points: int = 256
    parts: tuple = ()


@dataclass(frozen=True)
class Shape:
    cloud: PointCloud
    oracle: Oracle
    spec: ShapeSpec


# ---------------------------------------------------------------- primitives (native frame)

class _Solid:
    def __init__(self, spec: ShapeSpec):
        self.spec = spec
        self.pose = spec.pose
        self._inv = spec.pose.inverse()

    def contains(self, x: np.ndarray) -> np.ndarray:
        return self._contains_local(self._inv.apply(x))

    def area(self) -> float:
        raise NotImplementedError

    def sample_surface(self, rng, n: int) -> np.ndarray:
        return self.pose.apply(self._sample_local(rng, n))

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        corners = np.array(np.meshgrid(*[[-1, 1]] * 3)).T.reshape(-1, 3) * self._half_extent_local()
        world = self.pose.apply(corners)
        return world.min(axis=0), world.max(axis=0)


class _Sphere(_Solid):
    def __init__(self, spec):
        super().__init__(spec)
        (self.r,) = spec.size
        if not self.r > 0:
            raise ValueError(f"degenerate sphere {spec.size}")

    def _contains_local(self, x):
        return np.einsum("ij,ij->i", x, x) <= self.r ** 2

    def area(self):
        return 4 * np.pi * self.r ** 2

    def _sample_local(self, rng, n):
        v = rng.normal(size=(n, 3))
        return self.r * v / np.linalg.norm(v, axis=1, keepdims=True)

    def _half_extent_local(self):
        return np.full(3, self.r)

    def bbox(self):
        c = self.pose.t
        return c - self.r, c + self.r


class _Box(_Solid):
    def __init__(self, spec):
        super().__init__(spec)
        self.half = np.asarray(spec.size, dtype=np.float64) / 2
        if self.half.shape != (3,) or not (self.half > 0).all():
            raise ValueError(f"degenerate box {spec.size}")

    def _contains_local(self, x):
        return np.all(np.abs(x) <= self.half, axis=1)

    def area(self):
        a, b, c = 2 * self.half
        return 2 * (a * b + b * c + a * c)

    def _sample_local(self, rng, n):
        a, b, c = 2 * self.half
        face_areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        pts = rng.uniform(-self.half, self.half, size=(n, 3))
        axis = faces // 2
        side = np.where(faces % 2 == 0, -1.0, 1.0)
        pts[np.arange(n), axis] = side * self.half[axis]
        return pts

    def _half_extent_local(self):
        return self.half


class _Cylinder(_Solid):
    def __init__(self, spec):
        super().__init__(spec)
        self.r, self.h = spec.size
        if not (self.r > 0 and self.h > 0):
            raise ValueError(f"degenerate cylinder {spec.size}")

    def _contains_local(self, x):
        return (x[:, 0] ** 2 + x[:, 1] ** 2 <= self.r ** 2) & (np.abs(x[:, 2]) <= self.h / 2)

    def area(self):
        return 2 * np.pi * self.r * self.h + 2 * np.pi * self.r ** 2

    def _sample_local(self, rng, n):
        side = 2 * np.pi * self.r * self.h
        cap = np.pi * self.r ** 2
        which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0, 2 * np.pi, size=n)
        rad = np.where(which == 0, self.r, self.r * np.sqrt(rng.uniform(size=n)))
        z = np.where(which == 0, rng.uniform(-self.h / 2, self.h / 2, size=n),
                     np.where(which == 1, -self.h / 2, self.h / 2))
        return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)

    def _half_extent_local(self):
        return np.array([self.r, self.r, self.h / 2])


class _Torus(_Solid):
    def __init__(self, spec):
        super().__init__(spec)
        self.R, self.r = spec.size
        if not (self.R > self.r > 0):
            raise ValueError(f"degenerate torus {spec.size}")

    def _contains_local(self, x):
        ring = np.sqrt(x[:, 0] ** 2 + x[:, 1] ** 2) - self.R
        return ring ** 2 + x[:, 2] ** 2 <= self.r ** 2

    def area(self):
        return 4 * np.pi ** 2 * self.R * self.r

    def _sample_local(self, rng, n):
        out = []
        while sum(len(o) for o in out) < n:
            u = rng.uniform(0, 2 * np.pi, size=2 * n)
            v = rng.uniform(0, 2 * np.pi, size=2 * n)
            keep = rng.uniform(size=2 * n) < (self.R + self.r * np.cos(v)) / (self.R + self.r)
            u, v = u[keep], v[keep]
            w = self.R + self.r * np.cos(v)
            out.append(np.stack([w * np.cos(u), w * np.sin(u), self.r * np.sin(v)], axis=1))
        return np.concatenate(out)[:n]

    def _half_extent_local(self):
        return np.array([self.R + self.r, self.R + self.r, self.r])


_SOLIDS = {"sphere": _Sphere, "box": _Box, "cylinder": _Cylinder, "torus": _Torus}


def _build(spec: ShapeSpec) -> list[_Solid]:
    if spec.kind == "union":
        if len(spec.parts) != 2:
            raise ValueError("union needs exactly two parts")
        solids = []
        for part in spec.parts:
            if part.kind == "union":
                raise ValueError("nested unions are not supported")
            placed = replace(part, pose=spec.pose.compose(part.pose))
            solids += _build(placed)
        return solids
    if spec.kind not in _SOLIDS:
        raise ValueError(f"unknown primitive kind {spec.kind!r}")
    return [_SOLIDS[spec.kind](spec)]


def generate_shape(spec: ShapeSpec, seed: int) -> Shape:
    """Sample ``spec.n_points`` surface points and return them with an exact containment test."""
    if spec.n_points < 1:
        raise ValueError("n_points must be positive")
    solids = _build(spec)
    lo = np.min([s.bbox()[0] for s in solids], axis=0)
    hi = np.max([s.bbox()[1] for s in solids], axis=0)
    center = (lo + hi) / 2
    half = float(np.max(hi - lo)) / 2
    if not half > 0:
        raise ValueError("degenerate shape extent")
    factor = 0.5 / half
    rng = np.random.default_rng(seed)

    areas = np.array([s.area() for s in solids])
    pts = []
    need = spec.n_points
    for _ in range(1000):
        which = rng.choice(len(solids), size=2 * need, p=areas / areas.sum())
        for i, s in enumerate(solids):
            cand = s.sample_surface(rng, int(np.sum(which == i)))
            for j, other in enumerate(solids):
                if j != i and len(cand):
                    cand = cand[~other.contains(cand)]
            pts.append(cand)
        need = spec.n_points - sum(len(p) for p in pts)
        if need <= 0:
            break
    else:
        raise ValueError("could not sample the shape surface (parts fully overlap?)")
    native = np.concatenate(pts)[:spec.n_points]
    native = native[rng.permutation(len(native))]

    def oracle(x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        local = x / factor + center
        inside = np.zeros(len(x), dtype=bool)
        for s in solids:
            inside |= s.contains(local)
        return inside

    return Shape(cloud=PointCloud((native - center) * factor), oracle=oracle, spec=spec)


def random_spec(rng: np.random.Generator, kind: str, n_points: int) -> ShapeSpec:
    """Random sizes for ``kind``; unions attach a sphere or cylinder off-centre to a box."""
    if kind == "sphere":
        return ShapeSpec("sphere", (rng.uniform(0.3, 1.0),), n_points=n_points)
    if kind == "box":
        # distinct extents, longest along x: canonically oriented like an aligned shape corpus
        dims = np.sort(rng.uniform(0.3, 1.0, size=3))[::-1] * np.array([1.7, 1.3, 1.0])
        return ShapeSpec("box", tuple(dims), n_points=n_points)
    if kind == "cylinder":
        return ShapeSpec("cylinder", (rng.uniform(0.2, 0.5), rng.uniform(0.5, 1.5)), n_points=n_points)
    if kind == "torus":
        r = rng.uniform(0.1, 0.25)
        return ShapeSpec("torus", (rng.uniform(r + 0.15, 0.7), r), n_points=n_points)
    if kind == "union":
        body = ShapeSpec("box", tuple(rng.uniform([0.6, 0.35, 0.2], [1.0, 0.6, 0.4])))
        off = rng.uniform([0.25, 0.1, 0.0], [0.5, 0.3, 0.2]) * rng.choice([-1, 1], size=3)
        if rng.uniform() < 0.5:
            knob = ShapeSpec("sphere", (rng.uniform(0.15, 0.3),), pose=RigidTransform.identity().compose(
                RigidTransform(np.array([1.0, 0, 0, 0]), off)))
        else:
            knob = ShapeSpec("cylinder", (rng.uniform(0.1, 0.2), rng.uniform(0.4, 0.8)),
                             pose=RigidTransform(np.array([1.0, 0, 0, 0]), off))
        return ShapeSpec("union", parts=(body, knob), n_points=n_points)
    raise ValueError(f"unknown primitive kind {kind!r}")


# ---------------------------------------------------------------- occupancy samples

def sample_occupancy_points(oracle: Oracle, surface: PointCloud, count: int, seed: int,
                            sigma: float = 0.05, max_retries: int = 20) -> PointCloud:
    """Half near-surface jitter, half uniform in a unit cube around the shape; labelled by ``oracle``."""
    if count < 2:
        raise ValueError("count must be at least 2")
    rng = np.random.default_rng(seed)
    pts = surface.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2
    n_near = count // 2
    for _ in range(max_retries):
        near = pts[rng.integers(0, len(pts), size=n_near)] + rng.normal(scale=sigma, size=(n_near, 3))
        far = center + rng.uniform(-0.5, 0.5, size=(count - n_near, 3))
        probe = np.concatenate([near, far])
        labels = oracle(probe)
        minority = min(labels.mean(), 1 - labels.mean())
        if minority >= 0.1:
            return PointCloud(probe, occupancy=labels)
    raise OneClassSample("oracle produced one-class sample")


# ---------------------------------------------------------------- pairs

@dataclass(frozen=True)
class PairSample:
    source: PointCloud
    target: PointCloud
    gt: RigidTransform
    sampled_source: PointCloud | None
    sampled_target: PointCloud | None
    noise: str = "clean"

    def training_view(self) -> TrainItem:
        if self.sampled_source is None or self.sampled_target is None:
            raise ValueError("pair has no occupancy samples; it cannot feed the reconstruction loss")
        return TrainItem(self.source, self.target, self.sampled_source, self.sampled_target)


def make_pair(shape, seed: int, transform: RigidTransform | None = None, negatives: int = 128,
              max_angle_deg: float = 45.0, max_translation: float = 0.5) -> PairSample:
    """Source = the shape, target = a random rigid motion of it with shuffled point order.

    ``shape`` is a :class:`Shape` (occupancy samples are drawn) or a bare
    :class:`PointCloud` (no samples).
    """
    rng = np.random.default_rng(seed)
    cloud = shape.cloud if isinstance(shape, Shape) else shape
    T = transform if transform is not None else random_transform(rng, max_angle_deg, max_translation)
    perm = rng.permutation(len(cloud))
    target = PointCloud(T.apply(cloud.points)[perm])
    samp_s = samp_g = None
    if isinstance(shape, Shape):
        inv = T.inverse()
        samp_s = sample_occupancy_points(shape.oracle, cloud, negatives, int(rng.integers(2 ** 31)))
        samp_g = sample_occupancy_points(lambda x: shape.oracle(inv.apply(np.atleast_2d(x))), target,
                                         negatives, int(rng.integers(2 ** 31)))
    return PairSample(source=cloud, target=target, gt=T, sampled_source=samp_s, sampled_target=samp_g)


def make_dataset(n_pairs: int, cfg: DataConfig, seed: int | None = None, negatives: int = 128) -> list[PairSample]:
    base = cfg.seed if seed is None else seed
    children = np.random.SeedSequence(base).spawn(n_pairs)
    out = []
    for child in children:
        rng = np.random.default_rng(child)
        kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
        spec = random_spec(rng, kind, cfg.n_points)
        shape = generate_shape(spec, int(rng.integers(2 ** 31)))
        out.append(make_pair(shape, int(rng.integers(2 ** 31)), negatives=negatives,
                             max_angle_deg=cfg.max_angle_deg, max_translation=cfg.max_translation))
    return out


# ---------------------------------------------------------------- noise

def _incomplete(cloud: PointCloud, rng, keep_ratio: float) -> PointCloud:
    pts = cloud.points
    k = int(round(keep_ratio * len(pts)))
    center = (pts.min(axis=0) + pts.max(axis=0)) / 2
    anchor = center + rng.uniform(-0.5, 0.5, size=3)
    idx = np.sort(nearest_k(KdTree(pts), anchor, k))
    return PointCloud(pts[idx])


def _outliers(cloud: PointCloud, rng, fraction: float, sigma: float) -> PointCloud:
    pts = cloud.points
    m = int(round(fraction * len(pts)))
    keep = np.sort(rng.permutation(len(pts))[m:])
    return PointCloud(np.concatenate([pts[keep], rng.normal(scale=sigma, size=(m, 3))]))


def drift_offsets(rng: np.random.Generator, n: int, sigma: float, clip: float) -> np.ndarray:
    """Per-coordinate point-drift offsets: N(0, sigma^2) clipped to [-clip, clip]."""
    return np.clip(rng.normal(scale=sigma, size=(n, 3)), -clip, clip)


def inject_noise(sample: PairSample, kind: str, seed: int, cfg: NoiseConfig = NoiseConfig()) -> PairSample:
    """D.I. and D.O. hit source and target independently; P.D. perturbs the source only."""
    rng = np.random.default_rng(seed)
    if kind == "clean":
        return sample
    if kind == "DI":
        src = _incomplete(sample.source, rng, cfg.di_keep_ratio)
        tgt = _incomplete(sample.target, rng, cfg.di_keep_ratio)
    elif kind == "PD":
        jitter = drift_offsets(rng, len(sample.source), cfg.pd_sigma, cfg.pd_clip)
        src, tgt = PointCloud(sample.source.points + jitter), sample.target
    elif kind == "DO":
        src = _outliers(sample.source, rng, cfg.do_fraction, cfg.do_sigma)
        tgt = _outliers(sample.target, rng, cfg.do_fraction, cfg.do_sigma)
    else:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    return replace(sample, source=src, target=tgt, noise=kind)


def build_datasets(cfg: DataConfig, negatives: int = 128) -> tuple[list[PairSample], list[PairSample]]:
    """Disjoint train / held-out pair sets derived from ``cfg.seed``."""
    train_set = make_dataset(cfg.n_train, cfg, seed=1000 * cfg.seed + 1, negatives=negatives)
    test_set = make_dataset(cfg.n_eval, cfg, seed=1000 * cfg.seed + 2, negatives=negatives)
    return train_set, test_set
