"""Rigid transforms on SO(3) x R^3 and the error metrics used by the benchmarks.

Quaternions are stored as (w, x, y, z) with the canonical sign w >= 0.
Euler angles follow the intrinsic Z-Y-X convention, R = Rz(yaw) Ry(pitch) Rx(roll).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

_GIMBAL_TOL_DEG = 1e-6


def canonical_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or norm == 0.0:
        raise ValueError(f"invalid quaternion {q}")
    q = q / norm
    if q[0] < 0:
        q = -q
    return q


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    """Shepperd's method; picks the numerically largest pivot."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    diag = np.diag(R)
    i = int(np.argmax(np.r_[tr, diag]))
    if i == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return canonical_quat(q)


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def axis_angle_quat(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return canonical_quat(np.r_[np.cos(angle_rad / 2), np.sin(angle_rad / 2) * axis])


def euler_zyx_to_matrix(yaw_deg: float, pitch_deg: float, roll_deg: float) -> np.ndarray:
    cz, sz = np.cos(np.radians(yaw_deg)), np.sin(np.radians(yaw_deg))
    cy, sy = np.cos(np.radians(pitch_deg)), np.sin(np.radians(pitch_deg))
    cx, sx = np.cos(np.radians(roll_deg)), np.sin(np.radians(roll_deg))
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return Rz @ Ry @ Rx


def matrix_to_euler_zyx(R) -> tuple[np.ndarray, bool]:
    """Return ((yaw, pitch, roll) in degrees, gimbal_lock flag)."""
    R = np.asarray(R, dtype=np.float64)
    sp = float(np.clip(-R[2, 0], -1.0, 1.0))
    pitch = np.degrees(np.arcsin(sp))
    gimbal = abs(abs(pitch) - 90.0) <= _GIMBAL_TOL_DEG
    if gimbal:
        # yaw and roll are coupled; put everything in yaw
        roll = 0.0
        yaw = np.degrees(np.arctan2(-R[0, 1], R[1, 1]))
    else:
        yaw = np.degrees(np.arctan2(R[1, 0], R[0, 0]))
        roll = np.degrees(np.arctan2(R[2, 1], R[2, 2]))
    return np.array([yaw, pitch, roll]), gimbal


@dataclass(frozen=True)
class RigidTransform:
    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        if q.shape != (4,) or t.shape != (3,):
            raise ValueError(f"RigidTransform expects q:(4,) t:(3,), got {q.shape} {t.shape}")
        if not (np.isfinite(q).all() and np.isfinite(t).all()):
            raise ValueError("non-finite rigid transform")
        object.__setattr__(self, "q", canonical_quat(q))
        object.__setattr__(self, "t", t.copy())

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R, t) -> RigidTransform:
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_params(cls, params) -> RigidTransform:
        """From a 7-vector (qw, qx, qy, qz, tx, ty, tz)."""
        p = np.asarray(params, dtype=np.float64)
        return cls(p[:4], p[4:])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def params(self) -> np.ndarray:
        return np.r_[self.q, self.t]

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValueError(f"apply expects a nonempty N x 3 array, got {pts.shape}")
        return pts @ self.R.T + self.t

    def compose(self, other: RigidTransform) -> RigidTransform:
        """self after other: x -> self(other(x))."""
        return RigidTransform(quat_multiply(self.q, other.q), self.R @ other.t + self.t)

    def inverse(self) -> RigidTransform:
        qi = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return RigidTransform(qi, -(quat_to_matrix(qi) @ self.t))

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        same_q = np.allclose(self.q, other.q, atol=atol) or np.allclose(self.q, -other.q, atol=atol)
        return bool(same_q and np.allclose(self.t, other.t, atol=atol))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def inverse(a: RigidTransform) -> RigidTransform:
    return a.inverse()


def apply(T: RigidTransform, points) -> np.ndarray:
    return T.apply(points)


def geodesic_deg(R_a, R_b) -> float:
    """Angle of R_a R_b^T in degrees, arccos((tr - 1) / 2).

    Evaluated as atan2(sin, cos) so that tiny angles are not swamped by the
    rounding of arccos near 1.
    """
    M = np.asarray(R_a) @ np.asarray(R_b).T
    c = (np.trace(M) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))


@dataclass(frozen=True)
class PairErrors:
    mse_euler_deg: float
    rmse_euler_deg: float
    mae_euler_deg: float
    geodesic_deg: float
    mse_t: float
    rmse_t: float
    mae_t: float
    gimbal_lock: bool


def rotation_errors(pred: RigidTransform, gt: RigidTransform) -> PairErrors:
    """Per-pair errors; Euler and translation terms are averaged over the three axes.

    Euler differences are wrapped into [-180, 180).
    """
    e_pred, lock_p = matrix_to_euler_zyx(pred.R)
    e_gt, lock_g = matrix_to_euler_zyx(gt.R)
    d = (e_pred - e_gt + 180.0) % 360.0 - 180.0
    mse_r = float(np.mean(d ** 2))
    dt = pred.t - gt.t
    mse_t = float(np.mean(dt ** 2))
    return PairErrors(
        mse_euler_deg=mse_r,
        rmse_euler_deg=float(np.sqrt(mse_r)),
        mae_euler_deg=float(np.mean(np.abs(d))),
        geodesic_deg=geodesic_deg(pred.R, gt.R),
        mse_t=mse_t,
        rmse_t=float(np.sqrt(mse_t)),
        mae_t=float(np.mean(np.abs(dt))),
        gimbal_lock=bool(lock_p or lock_g),
    )


# ---------------------------------------------------------------- differentiable pieces

def _quat_matrix_jacobian(q: np.ndarray) -> np.ndarray:
    """dR[i, j] / dq[k] for the (unnormalized) quadratic form, shape 3x3x4."""
    w, x, y, z = q
    J = np.zeros((3, 3, 4))
    J[0, 0] = [0, 0, -4 * y, -4 * z]
    J[0, 1] = [-2 * z, 2 * y, 2 * x, -2 * w]
    J[0, 2] = [2 * y, 2 * z, 2 * w, 2 * x]
    J[1, 0] = [2 * z, 2 * y, 2 * x, 2 * w]
    J[1, 1] = [0, -4 * x, 0, -4 * z]
    J[1, 2] = [-2 * x, -2 * w, 2 * z, 2 * y]
    J[2, 0] = [-2 * y, 2 * z, -2 * w, 2 * x]
    J[2, 1] = [2 * x, 2 * w, 2 * z, 2 * y]
    J[2, 2] = [0, -4 * x, -4 * y, 0]
    return J


def quat_matrix_tensor(q: dc.Tensor) -> dc.Tensor:
    """Rotation matrix of a unit quaternion tensor (w, x, y, z) as a 3x3 tensor."""
    q = dc.as_tensor(q)
    if q.shape != (4,):
        raise dc.ShapeError(f"quat_matrix_tensor: expected shape (4,), got {q.shape}")
    qd = q.data.copy()
    J = _quat_matrix_jacobian(qd)
    return dc.make_node(quat_to_matrix(qd), (q,), lambda g: (np.einsum("ij,ijk->k", g, J),), "quat_matrix")


def apply_tensor(points, q: dc.Tensor, t: dc.Tensor) -> dc.Tensor:
    """Differentiable p -> R(q) p + t over the rows of ``points``."""
    pts = dc.as_tensor(points)
    R = quat_matrix_tensor(q)
    return dc.add_row(dc.matmul(pts, dc.transpose(R)), t)


def random_transform(rng: np.random.Generator, max_angle_deg: float = 45.0,
                     max_translation: float = 0.5) -> RigidTransform:
    yaw, pitch, roll = rng.uniform(0.0, max_angle_deg, size=3)
    t = rng.uniform(-max_translation, max_translation, size=3)
    return RigidTransform.from_matrix(euler_zyx_to_matrix(yaw, pitch, roll), t)
