"""Point clouds, nearest-neighbour search, Chamfer distance and ASCII file I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import diffcore as dc

BRUTE_FORCE_BELOW = 64


class CloudFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    occupancy: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"PointCloud needs a nonempty N x 3 array, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("PointCloud coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.occupancy is not None:
            occ = np.array(self.occupancy, dtype=bool)
            if occ.shape != (pts.shape[0],):
                raise ValueError(f"occupancy labels have shape {occ.shape}, expected ({pts.shape[0]},)")
            occ.setflags(write=False)
            object.__setattr__(self, "occupancy", occ)

    def __len__(self) -> int:
        return self.points.shape[0]


def _as_points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    if isinstance(x, dc.Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def centroid(cloud) -> np.ndarray:
    pts = _as_points(cloud)
    if pts.size == 0 or pts.shape[0] == 0:
        raise ValueError("centroid of an empty cloud")
    return pts.mean(axis=0)


class KdTree:
    """Exact nearest-neighbour index over a snapshot of a cloud.

    Below ``BRUTE_FORCE_BELOW`` points every query is a dense scan.
    """

    def __init__(self, cloud):
        pts = np.array(_as_points(cloud), dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("KdTree needs a nonempty cloud")
        pts.setflags(write=False)
        self.points = pts
        self._tree = None if len(pts) < BRUTE_FORCE_BELOW else cKDTree(pts, balanced_tree=True)

    def __len__(self) -> int:
        return self.points.shape[0]

    def nearest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest index and squared distance for each query row."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if self._tree is None:
            d2 = _sq_dists(q, self.points)
            idx = np.argmin(d2, axis=1)
            return idx, d2[np.arange(len(q)), idx]
        _, idx = self._tree.query(q, k=1)
        diff = q - self.points[idx]
        return idx, np.einsum("ij,ij->i", diff, diff)

    def nearest_k(self, p, k: int) -> np.ndarray:
        return nearest_k(self, p, k)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def nearest_k(tree: KdTree, p, k: int) -> np.ndarray:
    """Indices of the k closest points, ascending by distance, ties to lower index."""
    n = len(tree)
    if k > n:
        raise ValueError(f"k={k} exceeds cloud size {n}")
    if k <= 0:
        return np.zeros(0, dtype=np.intp)
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if tree._tree is None or k == n:
        cand = np.arange(n)
    else:
        dist, _ = tree._tree.query(p, k=k)
        radius = float(np.atleast_1d(dist)[-1])
        cand = np.asarray(tree._tree.query_ball_point(p, radius * (1 + 1e-9) + 1e-12), dtype=np.intp)
    diff = tree.points[cand] - p
    d2 = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((cand, d2))
    return cand[order[:k]].astype(np.intp)


def chamfer(a, b) -> dc.Tensor:
    """Symmetric mean squared nearest-neighbour distance.

    Gradients flow into whichever of ``a`` / ``b`` is a tensor requiring grad;
    the nearest-neighbour assignment is held fixed during backward.
    """
    ta = a if isinstance(a, dc.Tensor) else dc.Tensor(_as_points(a))
    tb = b if isinstance(b, dc.Tensor) else dc.Tensor(_as_points(b))
    if ta.shape[0] == 0 or tb.shape[0] == 0:
        raise ValueError("chamfer of an empty cloud")
    if ta.ndim != 2 or tb.ndim != 2 or ta.shape[1] != 3 or tb.shape[1] != 3:
        raise dc.ShapeError(f"chamfer: expected N x 3 clouds, got {ta.shape} and {tb.shape}")
    idx_ab, _ = KdTree(tb.data).nearest(ta.data)
    idx_ba, _ = KdTree(ta.data).nearest(tb.data)
    d_ab = dc.sub(ta, dc.gather_rows(tb, idx_ab))
    d_ba = dc.sub(tb, dc.gather_rows(ta, idx_ba))
    term_ab = dc.scale(dc.sum(dc.mul(d_ab, d_ab)), 1.0 / ta.shape[0])
    term_ba = dc.scale(dc.sum(dc.mul(d_ba, d_ba)), 1.0 / tb.shape[0])
    return dc.add(term_ab, term_ba)


# ---------------------------------------------------------------- file I/O

def save_cloud(path, cloud, fmt: str | None = None, regions=None) -> None:
    """Write xyz-ascii or ply-ascii with 9 significant digits.

    ``regions`` adds an integer label column (ply: ``property int region``).
    """
    path = Path(path)
    fmt = fmt or _format_from_suffix(path)
    pts = _as_points(cloud)
    if regions is not None:
        regions = np.asarray(regions, dtype=np.int64)
        if regions.shape != (pts.shape[0],):
            raise ValueError(f"region labels have shape {regions.shape}, expected ({pts.shape[0]},)")
    lines = []
    if fmt == "ply":
        lines += ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
                  "property float x", "property float y", "property float z"]
        if regions is not None:
            lines.append("property int region")
        lines.append("end_header")
    elif fmt != "xyz":
        raise ValueError(f"unknown cloud format {fmt!r}")
    for i, p in enumerate(pts):
        row = f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
        if regions is not None:
            row += f" {regions[i]}"
        lines.append(row)
    path.write_text("\n".join(lines) + "\n")


def load_cloud(path, fmt: str | None = None, with_regions: bool = False):
    """Read a cloud; with ``with_regions`` also return the label column (or None)."""
    path = Path(path)
    fmt = fmt or _format_from_suffix(path)
    text = path.read_text().splitlines()
    if fmt == "xyz":
        pts, regions = _parse_xyz(text, path)
    elif fmt == "ply":
        pts, regions = _parse_ply(text, path)
    else:
        raise ValueError(f"unknown cloud format {fmt!r}")
    if not pts:
        raise CloudFormatError(f"{path}: no points")
    cloud = PointCloud(np.array(pts))
    if with_regions:
        return cloud, (np.array(regions, dtype=np.int64) if regions else None)
    return cloud


def _format_from_suffix(path: Path) -> str:
    suffix = path.suffix.lower().lstrip(".")
    if suffix in ("xyz", "txt"):
        return "xyz"
    if suffix == "ply":
        return "ply"
    raise ValueError(f"cannot infer cloud format from {path.name!r}; use .xyz or .ply")


def _parse_floats(tokens, path, lineno) -> list[float]:
    try:
        vals = [float(t) for t in tokens]
    except ValueError as exc:
        raise CloudFormatError(f"{path}:{lineno}: non-numeric value ({exc})") from None
    if not all(np.isfinite(vals)):
        raise CloudFormatError(f"{path}:{lineno}: non-finite coordinate")
    return vals


def _parse_xyz(lines, path):
    pts, regions = [], []
    for lineno, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        if len(tokens) not in (3, 4):
            raise CloudFormatError(f"{path}:{lineno}: expected 3 or 4 columns, got {len(tokens)}")
        pts.append(_parse_floats(tokens[:3], path, lineno))
        if len(tokens) == 4:
            regions.append(int(tokens[3]))
    if regions and len(regions) != len(pts):
        raise CloudFormatError(f"{path}: region column present on only some lines")
    return pts, regions


def _parse_ply(lines, path):
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError(f"{path}:1: missing 'ply' magic")
    n_vertex = None
    props: list[str] = []
    current = None
    other_counts: list[int] = []
    header_end = None
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens:
            continue
        key = tokens[0]
        if key == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise CloudFormatError(f"{path}:{lineno}: only ascii ply is supported")
        elif key in ("comment", "obj_info"):
            continue
        elif key == "element":
            if len(tokens) != 3:
                raise CloudFormatError(f"{path}:{lineno}: malformed element line")
            current = tokens[1]
            if current == "vertex":
                n_vertex = int(tokens[2])
            else:
                other_counts.append(int(tokens[2]))
        elif key == "property":
            if current == "vertex":
                props.append(tokens[-1])
        elif key == "end_header":
            header_end = lineno
            break
        else:
            raise CloudFormatError(f"{path}:{lineno}: unexpected header line {line!r}")
    if header_end is None:
        raise CloudFormatError(f"{path}: missing end_header")
    if n_vertex is None:
        raise CloudFormatError(f"{path}: no vertex element")
    try:
        ix, iy, iz = props.index("x"), props.index("y"), props.index("z")
    except ValueError:
        raise CloudFormatError(f"{path}: vertex element lacks x/y/z properties") from None
    ir = props.index("region") if "region" in props else None
    body = [(n, l) for n, l in enumerate(lines[header_end:], start=header_end + 1) if l.strip()]
    if len(body) < n_vertex:
        bad = body[-1][0] + 1 if body else header_end + 1
        raise CloudFormatError(f"{path}:{bad}: header declares {n_vertex} vertices, found {len(body)}")
    pts, regions = [], []
    for lineno, line in body[:n_vertex]:
        tokens = line.split()
        if len(tokens) != len(props):
            raise CloudFormatError(f"{path}:{lineno}: expected {len(props)} values, got {len(tokens)}")
        vals = _parse_floats(tokens, path, lineno)
        pts.append([vals[ix], vals[iy], vals[iz]])
        if ir is not None:
            regions.append(int(vals[ir]))
    # trailing face/other element lines are accepted and discarded
    extra = body[n_vertex:]
    if len(extra) > sum(other_counts):
        lineno = extra[sum(other_counts)][0]
        raise CloudFormatError(f"{path}:{lineno}: header declares {n_vertex} vertices, found more data lines")
    return pts, regions
