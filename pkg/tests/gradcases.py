"""Randomized gradient-check fixtures, one per diffcore primitive."""

import numpy as np

from regionreg import diffcore as dc
from regionreg.diffcore import Tensor


def primitive_cases(rng):
    """name -> (input array, scalar function of a Tensor) for every differentiable primitive."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    v = rng.normal(size=4)
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    labels = rng.integers(0, 3, size=3)
    idx = rng.integers(0, 3, size=5)
    c = rng.normal(size=(3, 8))
    counts = np.array([2, 0, 3])
    rows = rng.normal(size=(5, 4))
    out5 = rng.normal(size=(5, 2))
    return {
        "add": (a, lambda x: dc.sum(dc.mul(dc.add(x, Tensor(b)), dc.add(x, Tensor(b))))),
        "sub": (a, lambda x: dc.sum(dc.mul(dc.sub(x, Tensor(b)), Tensor(b)))),
        "mul": (a, lambda x: dc.sum(dc.mul(x, dc.mul(x, Tensor(b))))),
        "div": (pos, lambda x: dc.sum(dc.div(Tensor(b), x))),
        "matmul": (a, lambda x: dc.sum(dc.mul(dc.matmul(x, Tensor(w)), dc.matmul(x, Tensor(w))))),
        "matmul_vec": (a, lambda x: dc.sum(dc.mul(dc.matmul(x, Tensor(v)), dc.matmul(x, Tensor(v))))),
        "linear": (w, lambda x: dc.sum(dc.sigmoid(dc.linear(Tensor(a), x, Tensor(np.ones(2)))))),
        "linear_relu": (a, lambda x: dc.sum(dc.mul(dc.linear(x, Tensor(w), Tensor(np.ones(2) * 0.1), relu=True),
                                                   Tensor(out5[:3])))),
        "linear_segments_relu": (rows, lambda x: dc.sum(dc.mul(dc.linear_segments(x, Tensor(w), Tensor(out5[:3]), counts,
                                                                                  relu=True), Tensor(out5)))),
        "concat": (a, lambda x: dc.sum(dc.mul(dc.concat([x, dc.sigmoid(x)], axis=1), Tensor(c)))),
        "relu": (a, lambda x: dc.sum(dc.mul(dc.relu(x), Tensor(b)))),
        "softmax": (a, lambda x: dc.sum(dc.mul(dc.softmax(x, axis=1), Tensor(b)))),
        "softmax_axis0": (a, lambda x: dc.sum(dc.mul(dc.softmax(x, axis=0), Tensor(b)))),
        "max_reduce": (a, lambda x: dc.sum(dc.mul(dc.max_reduce(x, axis=1)[0], Tensor(v[:3])))),
        "sum_axis": (a, lambda x: dc.sum(dc.mul(dc.sum(x, axis=0), Tensor(v)))),
        "mean": (a, lambda x: dc.mean(dc.mul(x, x))),
        "sigmoid": (a, lambda x: dc.sum(dc.mul(dc.sigmoid(x), Tensor(b)))),
        "softplus": (a, lambda x: dc.sum(dc.mul(dc.softplus(x), Tensor(b)))),
        "log": (pos, lambda x: dc.sum(dc.mul(dc.log(x), Tensor(b)))),
        "sqrt": (pos, lambda x: dc.sum(dc.mul(dc.sqrt(x), Tensor(b)))),
        "scale": (a, lambda x: dc.sum(dc.mul(dc.scale(x, -1.7), x))),
        "scale_by": (v, lambda x: dc.sum(dc.mul(dc.scale_by(x, dc.sum(x)), Tensor(v)))),
        "scale_rows": (a, lambda x: dc.sum(dc.mul(dc.scale_rows(x, dc.sum(x, axis=1)), Tensor(b)))),
        "add_row": (v, lambda x: dc.sum(dc.mul(dc.add_row(Tensor(a), x), Tensor(b)))),
        "transpose": (a, lambda x: dc.sum(dc.mul(dc.matmul(x, dc.transpose(x)), Tensor(np.eye(3) + 1)))),
        "reshape": (a, lambda x: dc.sum(dc.mul(dc.reshape(x, (4, 3)), Tensor(b.reshape(4, 3))))),
        "repeat_rows": (v, lambda x: dc.sum(dc.mul(dc.repeat_rows(x, 3), Tensor(b)))),
        "getitem": (a, lambda x: dc.sum(dc.mul(x[1:, :2], x[1:, 2:]))),
        "gather_rows": (a, lambda x: dc.sum(dc.mul(dc.gather_rows(x, idx), dc.gather_rows(x, idx)))),
        "repeat_segments": (a, lambda x: dc.sum(dc.mul(dc.repeat_segments(x, counts), Tensor(rows)))),
        "linear_segments_x": (rows, lambda x: dc.sum(dc.mul(dc.sigmoid(dc.linear_segments(x, Tensor(w), Tensor(out5[:3]), counts)), Tensor(out5)))),
        "linear_segments_w": (w, lambda x: dc.sum(dc.mul(dc.sigmoid(dc.linear_segments(Tensor(rows), x, Tensor(out5[:3]), counts)), Tensor(out5)))),
        "linear_segments_b": (out5[:3], lambda x: dc.sum(dc.mul(dc.sigmoid(dc.linear_segments(Tensor(rows), Tensor(w), x, counts)), Tensor(out5)))),
        "segment_max": (a, lambda x: dc.sum(dc.mul(dc.segment_max(x, labels, 3)[0], Tensor(b)))),
    }
