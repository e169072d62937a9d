"""Desk-scale experiment drivers shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from .config import DataConfig, RunConfig
from .data import PairSample, build_datasets
from .evalbench import EvalReport, ablate, bench, evaluate
from .pipeline import NetworkParams, train

SEEDS = (1, 2, 3)


def desk_config(seed: int, base: RunConfig | None = None) -> RunConfig:
    """200 training box pairs of 256 points, 300 epochs, 64 held-out pairs."""
    base = base or RunConfig(data=DataConfig(n_points=256, n_train=200, n_eval=64, kinds=("box",)))
    return base.with_seed(seed)


@dataclass
class DeskRun:
    config: RunConfig
    params: NetworkParams
    trace: list
    train_set: list[PairSample]
    test_set: list[PairSample]
    untrained: EvalReport
    trained: EvalReport
    seconds: float
    extras: dict = field(default_factory=dict)

    @property
    def clean(self):
        return self.trained.row("Ours", "clean")

    @property
    def baseline(self):
        return self.untrained.row("Untrained", "clean")


def run_desk(config: RunConfig, progress: Callable | None = None) -> DeskRun:
    """Build data, train from scratch, and evaluate before and after on the held-out set."""
    start = time.perf_counter()
    train_set, test_set = build_datasets(config.data, config.train.negatives_per_shape)
    init = NetworkParams.init(config.model)
    untrained = evaluate(init, test_set, ("clean",), config.data.seed, "Untrained", config.noise)
    result = train([p.training_view() for p in train_set], config.train, init.copy(), progress=progress)
    trained = evaluate(result.params, test_set, ("clean",), config.data.seed, "Ours", config.noise)
    return DeskRun(config, result.params, result.trace, train_set, test_set, untrained, trained,
                   time.perf_counter() - start)


def noise_bench(run: DeskRun, kinds: Sequence[str] = ("DI", "PD", "DO")) -> EvalReport:
    return bench(run.params, run.test_set, kinds, run.config.data.seed, run.config.noise)


def run_ablation(run: DeskRun, progress: Callable | None = None) -> EvalReport:
    """Models A, B, C on the run's data; the run's own network stands in for Model C."""
    report, _ = ablate(run.train_set, run.test_set, run.config, trained={"ModelC": run.params},
                       progress=progress)
    return report


def scaled(config: RunConfig, epochs: int | None = None, n_train: int | None = None) -> RunConfig:
    """Shrink a config for quick looks."""
    train_cfg = config.train if epochs is None else replace(config.train, epochs=epochs)
    data_cfg = config.data if n_train is None else replace(config.data, n_train=n_train)
    return replace(config, train=train_cfg, data=data_cfg)
