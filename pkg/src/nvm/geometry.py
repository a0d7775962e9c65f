"""Rigid transforms: axis-angle poses, Rodrigues exponential, composition.

Two layers live here. ``Pose6D`` / ``SE3Transform`` are float64 value types
used by the simulator and tests. ``exp_map_op`` and ``canonicalize_op`` are
tape ops on batched pose tensors ``[M, 6]`` (rotation vector then
translation) so the pose encoder can learn through the warp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _emit

_SMALL = 1e-4


def skew(v: np.ndarray) -> np.ndarray:
    """[..., 3] -> [..., 3, 3] cross-product matrices."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _coefficients(theta: np.ndarray):
    """sin(t)/t, (1-cos t)/t^2 and their derivatives divided by t."""
    small = theta < _SMALL
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - np.cos(t)) / (t * t))
    da = np.where(small, -1 / 3 + t2 / 30 - t2 * t2 / 840, (t * np.cos(t) - np.sin(t)) / t**3)
    db = np.where(small, -1 / 12 + t2 / 180 - t2 * t2 / 6720, (t * np.sin(t) - 2 * (1 - np.cos(t))) / t**4)
    return a, b, da, db


def rodrigues(rotvec: np.ndarray) -> np.ndarray:
    """Rotation matrices for axis-angle vectors [..., 3] -> [..., 3, 3]."""
    r = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1)
    a, b, _, _ = _coefficients(theta)
    k = skew(r)
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rodrigues_jacobian(rotvec: np.ndarray) -> np.ndarray:
    """dR/dr as [..., 3 (component i), 3, 3]."""
    r = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1)
    a, b, da, db = _coefficients(theta)
    k = skew(r)
    k2 = k @ k
    basis = skew(np.eye(3))  # [3, 3, 3]: basis[i] = [e_i]x
    a, b, da, db = (c[..., None, None, None] for c in (a, b, da, db))
    ri = r[..., :, None, None]
    kb = k[..., None, :, :]
    return (
        da * ri * kb
        + a * basis
        + db * ri * k2[..., None, :, :]
        + b * (basis @ kb + kb @ basis)
    )


def canonicalize_rotvec(rotvec: np.ndarray) -> np.ndarray:
    """Wrap rotation vectors so that |r| <= pi, preserving the rotation."""
    r = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1, keepdims=True)
    wrapped = theta - 2 * np.pi * np.round(theta / (2 * np.pi))
    factor = np.where(theta > np.pi, wrapped / np.where(theta > 0, theta, 1.0), 1.0)
    return r * factor


@dataclass(frozen=True)
class Pose6D:
    """Axis-angle rotation (radians) and translation."""

    rot: np.ndarray
    trans: np.ndarray

    @classmethod
    def from_array(cls, v) -> "Pose6D":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(v[:3].copy(), v[3:].copy())

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.rot, self.trans])

    def canonicalize(self) -> "Pose6D":
        return Pose6D(canonicalize_rotvec(self.rot), np.asarray(self.trans, dtype=np.float64))


@dataclass(frozen=True)
class SE3Transform:
    """``p -> R p + t``."""

    R: np.ndarray
    t: np.ndarray

    @classmethod
    def identity(cls) -> "SE3Transform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "SE3Transform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3], m[:3, 3] = self.R, self.t
        return m

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform points [..., 3]."""
        return np.asarray(p, dtype=np.float64) @ self.R.T + self.t

    def compose(self, other: "SE3Transform") -> "SE3Transform":
        """``self ∘ other``: apply ``other`` first."""
        return SE3Transform(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "SE3Transform":
        rt = self.R.T
        return SE3Transform(rt, -(rt @ self.t))

    def to_pose(self) -> Pose6D:
        return Pose6D(log_rotation(self.R), self.t.copy())


def exp_map(p: Pose6D) -> SE3Transform:
    """Rodrigues rotation from the axis-angle part; translation copied."""
    return SE3Transform(rodrigues(p.rot), np.asarray(p.trans, dtype=np.float64).copy())


def log_rotation(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (|r| <= pi)."""
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)
    theta = np.arccos(cos)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL:
        return w / 2
    if np.pi - theta < 1e-6:
        # axis from the symmetric part near a half turn
        m = (R + np.eye(3)) / 2
        axis = m[np.argmax(np.diag(m))]
        axis = axis / np.linalg.norm(axis)
        return axis * theta
    return w * theta / (2 * np.sin(theta))


def compose(a: SE3Transform, b: SE3Transform) -> SE3Transform:
    return a.compose(b)


def inverse(T: SE3Transform) -> SE3Transform:
    return T.inverse()


def apply_point(T: SE3Transform, p: np.ndarray) -> np.ndarray:
    return T.apply(p)


def relative_pose(world_a: SE3Transform, world_b: SE3Transform) -> SE3Transform:
    """Map frame-a coordinates into frame-b: ``inverse(world_b) ∘ world_a``."""
    rbt = world_b.R.T
    return SE3Transform(rbt @ world_a.R, rbt @ (world_a.t - world_b.t))


# ---------------------------------------------------------------------------
# tape ops on [M, 6] pose tensors


def exp_map_op(pose: Tensor) -> Tensor:
    """Batched exponential map: [M, 6] -> [M, 3, 4] rows ``[R | t]``."""
    if pose.ndim != 2 or pose.shape[1] != 6:
        raise ShapeError(f"exp_map: expected [M, 6] poses, got {pose.shape}")
    rot = pose.data[:, :3].astype(np.float64)
    out = np.empty((pose.shape[0], 3, 4))
    out[:, :, :3] = rodrigues(rot)
    out[:, :, 3] = pose.data[:, 3:]

    def vjp(g):
        jac = rodrigues_jacobian(rot)  # [M, 3, 3, 3]
        grot = np.einsum("mjk,mijk->mi", g[:, :, :3], jac)
        return (np.concatenate([grot, g[:, :, 3]], axis=1).astype(pose.dtype),)

    return _emit("exp_map", (pose,), out.astype(pose.dtype), vjp)


def canonicalize_op(pose: Tensor) -> Tensor:
    """Wrap the rotation part of [M, 6] poses into the |r| <= pi ball."""
    if pose.ndim != 2 or pose.shape[1] != 6:
        raise ShapeError(f"canonicalize: expected [M, 6] poses, got {pose.shape}")
    rot = pose.data[:, :3].astype(np.float64)
    theta = np.linalg.norm(rot, axis=1)
    wrap = theta > np.pi
    out = pose.data.copy()
    if not wrap.any():
        return _emit("canonicalize", (pose,), out, lambda g: (g,))
    out[:, :3] = canonicalize_rotvec(rot)

    def vjp(g):
        gout = g.astype(np.float64).copy()
        for m in np.flatnonzero(wrap):
            r, th = rot[m], theta[m]
            k = np.round(th / (2 * np.pi))
            c = 2 * np.pi * k
            jac = (1 - c / th) * np.eye(3) + c * np.outer(r, r) / th**3
            gout[m, :3] = jac.T @ gout[m, :3]
        return (gout.astype(pose.dtype),)

    return _emit("canonicalize", (pose,), out, vjp)
