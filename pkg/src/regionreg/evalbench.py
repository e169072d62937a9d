"""Registration metrics, the point-to-point ICP baseline, and the noise,
benchmark and ablation harnesses with CSV / aligned-table reports."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, fields, replace
from typing import Callable, Sequence

import numpy as np

from .cloud import KdTree, PointCloud, chamfer
from .config import NoiseConfig, RunConfig
from .data import PairSample, inject_noise
from .decoder import DegeneratePartition
from .pipeline import NetworkParams, register, train
from .rigid import RigidTransform, rotation_errors

log = logging.getLogger(__name__)

CSV_HEADER = ("model,noise,mse_r,rmse_r,mae_r,mse_t,rmse_t,mae_t,"
              "geodesic_deg,chamfer,pairs,seed")
NOISE_ORDER = ("clean", "DI", "PD", "DO")
NOISE_LABELS = {"clean": "clean", "DI": "D.I.", "PD": "P.D.", "DO": "D.O."}
_CLI_NOISE = {"clean": "clean", "di": "DI", "pd": "PD", "do": "DO"}

Predictor = Callable[[PointCloud, PointCloud], RigidTransform]


@dataclass(frozen=True)
class ReportRow:
    model: str
    noise: str
    mse_r: float
    rmse_r: float
    mae_r: float
    mse_t: float
    rmse_t: float
    mae_t: float
    geodesic_deg: float
    chamfer: float
    pairs: int
    seed: int


@dataclass
class EvalReport:
    rows: list[ReportRow]

    def row(self, model: str, noise: str = "clean") -> ReportRow:
        for r in self.rows:
            if r.model == model and r.noise == noise:
                return r
        raise KeyError(f"no row for model={model!r} noise={noise!r}")

    def to_csv(self) -> str:
        out = [CSV_HEADER]
        for r in self.rows:
            vals = [r.model, r.noise] + [f"{getattr(r, f.name):.9g}" for f in fields(r)[2:10]]
            out.append(",".join(vals + [str(r.pairs), str(r.seed)]))
        return "\n".join(out) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> EvalReport:
        lines = text.splitlines()
        if not lines or lines[0].strip() != CSV_HEADER:
            raise ValueError(f"unexpected report header {lines[0] if lines else ''!r}")
        rows = []
        for rec in csv.reader(io.StringIO("\n".join(lines[1:]))):
            if not rec:
                continue
            nums = [float(x) for x in rec[2:10]]
            rows.append(ReportRow(rec[0], rec[1], *nums, pairs=int(rec[10]), seed=int(rec[11])))
        return cls(rows)

    def to_table(self) -> str:
        """Aligned text table; columns follow MSE(R) MAE(R) MSE(t) MAE(t) then extras."""
        head = ["Model", "Noise", "MSE(R)", "MAE(R)", "MSE(t)", "MAE(t)",
                "RMSE(R)", "RMSE(t)", "Geo(deg)", "Chamfer", "Pairs"]
        body = [[r.model, NOISE_LABELS.get(r.noise, r.noise),
                 f"{r.mse_r:.6g}", f"{r.mae_r:.6g}", f"{r.mse_t:.6g}", f"{r.mae_t:.6g}",
                 f"{r.rmse_r:.6g}", f"{r.rmse_t:.6g}", f"{r.geodesic_deg:.6g}",
                 f"{r.chamfer:.6g}", str(r.pairs)] for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
        rule = "-" * len(fmt(head))
        return "\n".join([fmt(head), rule] + [fmt(b) for b in body]) + "\n"


def parse_noise_kinds(names: Sequence[str]) -> list[str]:
    kinds = []
    for name in names:
        key = name.strip().lower().replace(".", "")
        if key not in _CLI_NOISE:
            raise ValueError(f"unknown noise kind {name!r}; expected clean, di, pd or do")
        kinds.append(_CLI_NOISE[key])
    return [k for k in NOISE_ORDER if k in kinds]


# ---------------------------------------------------------------- metrics

def aggregate(model: str, noise: str, preds: Sequence[RigidTransform], gts: Sequence[RigidTransform],
              chamfers: Sequence[float], seed: int) -> ReportRow:
    if not preds:
        raise ValueError("cannot aggregate an empty set of pairs")
    errs = [rotation_errors(p, g) for p, g in zip(preds, gts)]
    mse_r = float(np.mean([e.mse_euler_deg for e in errs]))
    mse_t = float(np.mean([e.mse_t for e in errs]))
    return ReportRow(
        model=model, noise=noise,
        mse_r=mse_r, rmse_r=float(np.sqrt(mse_r)), mae_r=float(np.mean([e.mae_euler_deg for e in errs])),
        mse_t=mse_t, rmse_t=float(np.sqrt(mse_t)), mae_t=float(np.mean([e.mae_t for e in errs])),
        geodesic_deg=float(np.mean([e.geodesic_deg for e in errs])),
        chamfer=float(np.mean(chamfers)), pairs=len(preds), seed=seed,
    )


def model_predictor(params: NetworkParams) -> Predictor:
    def predict(source: PointCloud, target: PointCloud) -> RigidTransform:
        try:
            return register(source, target, params).transform
        except DegeneratePartition:
            log.warning("degenerate partition during evaluation; predicting identity")
            return RigidTransform.identity()
    return predict


def noisy_pairs(dataset: Sequence[PairSample], kind: str, seed: int,
                noise_cfg: NoiseConfig = NoiseConfig()) -> list[PairSample]:
    children = np.random.SeedSequence([seed, NOISE_ORDER.index(kind)]).spawn(len(dataset))
    return [inject_noise(p, kind, int(np.random.default_rng(c).integers(2 ** 31)), noise_cfg)
            for p, c in zip(dataset, children)]


def evaluate_predictor(predict: Predictor, dataset: Sequence[PairSample], noise_kinds: Sequence[str],
                       seed: int, model: str, noise_cfg: NoiseConfig = NoiseConfig()) -> EvalReport:
    if not dataset:
        raise ValueError("evaluate: empty dataset")
    rows = []
    for kind in [k for k in NOISE_ORDER if k in noise_kinds]:
        pairs = noisy_pairs(dataset, kind, seed, noise_cfg)
        preds, chams = [], []
        for p in pairs:
            T = predict(p.source, p.target)
            preds.append(T)
            chams.append(chamfer(T.apply(p.source.points), p.target.points).item())
        rows.append(aggregate(model, kind, preds, [p.gt for p in pairs], chams, seed))
    return EvalReport(rows)


def evaluate(params: NetworkParams, dataset: Sequence[PairSample], noise_kinds: Sequence[str] = ("clean",),
             seed: int = 0, model: str = "Ours", noise_cfg: NoiseConfig = NoiseConfig()) -> EvalReport:
    return evaluate_predictor(model_predictor(params), dataset, noise_kinds, seed, model, noise_cfg)


# ---------------------------------------------------------------- ICP

@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    iterations: int
    residuals: tuple[float, ...]
    converged: bool
    # converged by tolerance but the residual stayed large: likely a wrong basin
    stalled: bool

    @property
    def flagged(self) -> bool:
        return self.stalled or not self.converged


def best_fit_transform(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid map src -> dst (orthogonal Procrustes with reflection guard)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform.from_matrix(R, cd - R @ cs)


def icp(source, target, max_iter: int = 50, tol: float = 1e-6, stall_residual: float = 1e-4) -> IcpResult:
    """Point-to-point ICP from the identity.

    Each iteration matches every moved source point to its nearest target
    point, refits the full transform in closed form, and stops once the mean
    squared correspondence distance changes by less than ``tol``.
    """
    src = source.points if isinstance(source, PointCloud) else np.asarray(source, dtype=np.float64)
    dst = target.points if isinstance(target, PointCloud) else np.asarray(target, dtype=np.float64)
    tree = KdTree(dst)
    T = RigidTransform.identity()
    residuals: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        idx, d2 = tree.nearest(T.apply(src))
        residuals.append(float(d2.mean()))
        if len(residuals) > 1 and abs(residuals[-2] - residuals[-1]) < tol:
            converged = True
            break
        T = best_fit_transform(src, dst[idx])
        if residuals[-1] == 0.0:
            converged = True
            break
    stalled = converged and residuals[-1] > stall_residual
    return IcpResult(T, it, tuple(residuals), converged, stalled)


def icp_baseline(source, target, max_iter: int = 50, tol: float = 1e-6) -> RigidTransform:
    return icp(source, target, max_iter, tol).transform


def icp_predictor(max_iter: int = 50, tol: float = 1e-6) -> Predictor:
    return lambda s, g: icp_baseline(s, g, max_iter, tol)


# ---------------------------------------------------------------- harnesses

def bench(params: NetworkParams, dataset: Sequence[PairSample], noise_kinds: Sequence[str] = NOISE_ORDER[1:],
          seed: int = 0, noise_cfg: NoiseConfig = NoiseConfig(), include_icp: bool = True) -> EvalReport:
    """Model and ICP rows per noise section, grouped in D.I., P.D., D.O. order."""
    ours = evaluate(params, dataset, noise_kinds, seed, "Ours", noise_cfg)
    rows = list(ours.rows)
    if include_icp:
        base = evaluate_predictor(icp_predictor(), dataset, noise_kinds, seed, "ICP", noise_cfg)
        rows = []
        for kind in [k for k in NOISE_ORDER if k in noise_kinds]:
            rows += [r for r in base.rows if r.noise == kind] + [r for r in ours.rows if r.noise == kind]
    return EvalReport(rows)


ABLATION_MODELS = ("ModelA", "ModelB", "ModelC")


def ablation_configs(base: RunConfig) -> dict[str, RunConfig]:
    """Model A: one region and no position encoding (a single shape-conditioned decoder).
    Model B: regions + attention, no position encoding. Model C: the full network."""
    m = base.model
    return {
        "ModelA": replace(base, model=replace(m, n_regions=1, position_encoding=False)),
        "ModelB": replace(base, model=replace(m, position_encoding=False)),
        "ModelC": replace(base, model=replace(m, position_encoding=True)),
    }


def ablate(train_set: Sequence[PairSample], test_set: Sequence[PairSample], base: RunConfig,
           trained: dict[str, NetworkParams] | None = None, progress=None) -> tuple[EvalReport, dict]:
    """Train the three variants on identical data and seeds, evaluate each on ``test_set``.

    ``trained`` may supply already-trained variants (keyed by model name) to skip retraining.
    """
    items = [p.training_view() for p in train_set]
    rows, models = [], {}
    for name, cfg in ablation_configs(base).items():
        params = (trained or {}).get(name)
        if params is None:
            params = train(items, cfg.train, NetworkParams.init(cfg.model), progress=progress).params
        models[name] = params
        rows += evaluate(params, test_set, ("clean",), cfg.train.seed, name, base.noise).rows
    return EvalReport(rows), models
