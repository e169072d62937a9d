"""Parameter-bundle plumbing shared by the network modules."""

from __future__ import annotations

from dataclasses import fields

import numpy as np

from .diffcore import Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class ParamBundle:
    """Mixin for dataclasses whose fields are leaf tensors (or lists of them)."""

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                out[f.name] = value
            elif isinstance(value, (list, tuple)):
                for i, layer in enumerate(value):
                    for k, t in layer.items():
                        out[f"{f.name}.{i}.{k}"] = t
        return out

    def check_finite(self) -> None:
        for name, t in self.named().items():
            if not np.isfinite(t.data).all():
                raise FloatingPointError(f"non-finite parameter {name}")


def leaf(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)
