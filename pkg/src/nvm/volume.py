"""Feature volumes and the kernels that move them between camera frames.

A feature volume is a Tensor whose trailing axes are ``(C, D, H, W)``; an
optional leading batch axis is allowed everywhere. Axis D points along the
camera's optical axis, H down the image rows and W across the image columns.

Warping is inverse: each output voxel centre ``x`` (normalised coordinates in
[-1, 1]^3, ordered (d, h, w)) reads the input at ``R^T (x - t)`` by trilinear
interpolation, with zeros outside the grid. Content at ``p`` in the input
therefore lands at ``R p + t`` in the output.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .geometry import SE3Transform
from .tensor import ShapeError, Tensor, _emit, reshape

# camera frame (x forward, y left, z up) -> volume axes (d forward, h down, w right)
CAMERA_TO_VOLUME = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, -1.0, 0.0]])


@dataclass(frozen=True)
class GridSpec:
    """Voxel index <-> normalised coordinate mapping, plus metric extent.

    Index 0 on each axis sits at -1 and index ``size - 1`` at +1. ``scale``
    is metres per normalised unit; the cube is centred ``center_forward``
    metres ahead of the camera (defaults to ``scale``, i.e. the cube starts at
    the lens).
    """

    dims: tuple[int, int, int] = (12, 6, 6)
    scale: float = 0.5
    center_forward: float | None = None

    @property
    def pitch(self) -> np.ndarray:
        return np.array([2.0 / (n - 1) for n in self.dims])

    @property
    def center(self) -> np.ndarray:
        fwd = self.scale if self.center_forward is None else self.center_forward
        return np.array([fwd, 0.0, 0.0])

    def index_to_norm(self, idx) -> np.ndarray:
        return np.asarray(idx, dtype=np.float64) * self.pitch - 1.0

    def norm_to_index(self, u) -> np.ndarray:
        return (np.asarray(u, dtype=np.float64) + 1.0) / self.pitch

    def from_camera(self, T: SE3Transform) -> SE3Transform:
        """Express a camera-frame motion as a motion of normalised volume coordinates."""
        P, c = CAMERA_TO_VOLUME, self.center
        R = P @ T.R @ P.T
        t = P @ (T.R @ c + T.t - c) / self.scale
        return SE3Transform(R, t)


def channels_to_depth(fmap: Tensor, depth: int) -> Tensor:
    """[(N,) C, H, W] -> [(N,) C/D, D, H, W] with out[c', d] = in[c'·D + d]."""
    if fmap.ndim not in (3, 4):
        raise ShapeError(f"channels_to_depth: expected [(N,) C, H, W], got {fmap.shape}")
    c, h, w = fmap.shape[-3:]
    if depth < 1 or c % depth:
        raise ShapeError(f"channels_to_depth: {c} channels not divisible by D={depth}")
    return reshape(fmap, fmap.shape[:-3] + (c // depth, depth, h, w))


def depth_to_channels(vol: Tensor) -> Tensor:
    """Inverse relabelling of :func:`channels_to_depth`."""
    if vol.ndim not in (4, 5):
        raise ShapeError(f"depth_to_channels: expected [(N,) C, D, H, W], got {vol.shape}")
    c, d, h, w = vol.shape[-4:]
    return reshape(vol, vol.shape[:-4] + (c * d, h, w))


# ---------------------------------------------------------------------------
# trilinear warp kernels


@numba.njit(cache=True)
def _warp_forward(vol, M, c, out):
    N, C, D, H, W = vol.shape
    flat = vol.reshape(N, C, D * H * W)
    oflat = out.reshape(N, C, D * H * W)
    wk = np.empty(8)
    ik = np.empty(8, dtype=np.int64)
    for n in range(N):
        o = 0
        for d in range(D):
            for h in range(H):
                for w in range(W):
                    sd = M[n, 0, 0] * d + M[n, 0, 1] * h + M[n, 0, 2] * w + c[n, 0]
                    sh = M[n, 1, 0] * d + M[n, 1, 1] * h + M[n, 1, 2] * w + c[n, 1]
                    sw = M[n, 2, 0] * d + M[n, 2, 1] * h + M[n, 2, 2] * w + c[n, 2]
                    d0 = math.floor(sd)
                    h0 = math.floor(sh)
                    w0 = math.floor(sw)
                    fd = sd - d0
                    fh = sh - h0
                    fw = sw - w0
                    m = 0
                    for k in range(8):
                        dd = d0 + (k >> 2)
                        hh = h0 + ((k >> 1) & 1)
                        ww = w0 + (k & 1)
                        if dd < 0 or dd >= D or hh < 0 or hh >= H or ww < 0 or ww >= W:
                            continue
                        wgt = (fd if k >> 2 else 1.0 - fd) * (fh if (k >> 1) & 1 else 1.0 - fh) * (
                            fw if k & 1 else 1.0 - fw
                        )
                        if wgt == 0.0:
                            continue
                        wk[m] = wgt
                        ik[m] = (dd * H + hh) * W + ww
                        m += 1
                    for ch in range(C):
                        acc = 0.0
                        for j in range(m):
                            acc += wk[j] * flat[n, ch, ik[j]]
                        oflat[n, ch, o] = acc
                    o += 1


@numba.njit(cache=True)
def _warp_backward(vol, M, c, g, gvol, gM, gc, need_vol, need_pose):
    N, C, D, H, W = vol.shape
    for n in range(N):
        for d in range(D):
            for h in range(H):
                for w in range(W):
                    sd = M[n, 0, 0] * d + M[n, 0, 1] * h + M[n, 0, 2] * w + c[n, 0]
                    sh = M[n, 1, 0] * d + M[n, 1, 1] * h + M[n, 1, 2] * w + c[n, 1]
                    sw = M[n, 2, 0] * d + M[n, 2, 1] * h + M[n, 2, 2] * w + c[n, 2]
                    d0 = math.floor(sd)
                    h0 = math.floor(sh)
                    w0 = math.floor(sw)
                    fd = sd - d0
                    fh = sh - h0
                    fw = sw - w0
                    gsd = 0.0
                    gsh = 0.0
                    gsw = 0.0
                    for k in range(8):
                        bd = k >> 2
                        bh = (k >> 1) & 1
                        bw = k & 1
                        dd = d0 + bd
                        hh = h0 + bh
                        ww = w0 + bw
                        if dd < 0 or dd >= D or hh < 0 or hh >= H or ww < 0 or ww >= W:
                            continue
                        ad = fd if bd else 1.0 - fd
                        ah = fh if bh else 1.0 - fh
                        aw = fw if bw else 1.0 - fw
                        sgd = 1.0 if bd else -1.0
                        sgh = 1.0 if bh else -1.0
                        sgw = 1.0 if bw else -1.0
                        wgt = ad * ah * aw
                        acc = 0.0
                        for ch in range(C):
                            gv = g[n, ch, d, h, w]
                            if need_vol:
                                gvol[n, ch, dd, hh, ww] += wgt * gv
                            acc += gv * vol[n, ch, dd, hh, ww]
                        gsd += acc * sgd * ah * aw
                        gsh += acc * ad * sgh * aw
                        gsw += acc * ad * ah * sgw
                    if need_pose:
                        gM[n, 0, 0] += gsd * d
                        gM[n, 0, 1] += gsd * h
                        gM[n, 0, 2] += gsd * w
                        gM[n, 1, 0] += gsh * d
                        gM[n, 1, 1] += gsh * h
                        gM[n, 1, 2] += gsh * w
                        gM[n, 2, 0] += gsw * d
                        gM[n, 2, 1] += gsw * h
                        gM[n, 2, 2] += gsw * w
                        gc[n, 0] += gsd
                        gc[n, 1] += gsh
                        gc[n, 2] += gsw


def _index_space(Rt: np.ndarray, pitch: np.ndarray):
    """Affine map from output voxel index to input sample index.

    ``src = diag(1/s) R^T (s*idx - 1 - t) + 1/s``; written so identity
    transforms give exactly ``src = idx``.
    """
    R, t = Rt[:, :, :3], Rt[:, :, 3]
    ratio = pitch[None, :] / pitch[:, None]  # s_j / s_i
    M = np.swapaxes(R, 1, 2) * ratio
    c = (1.0 - np.einsum("nki,nk->ni", R, 1.0 + t)) / pitch
    return M, c


def warp(vol: Tensor, transform: Tensor | SE3Transform | Sequence[SE3Transform]) -> Tensor:
    """Rigidly resample feature volumes.

    ``vol`` is [(N,) C, D, H, W]; ``transform`` is an [(N,) 3, 4] ``[R | t]``
    tensor in normalised volume coordinates (see :func:`exp_map_op`), or
    plain :class:`SE3Transform` values. Differentiable in both arguments.
    """
    if not isinstance(transform, Tensor):
        items = [transform] if isinstance(transform, SE3Transform) else list(transform)
        arr = np.stack([np.concatenate([T.R, T.t[:, None]], axis=1) for T in items])
        transform = Tensor(arr if vol.ndim == 5 else arr[0], dtype=np.float64)
    batched = vol.ndim == 5
    if vol.ndim not in (4, 5) or transform.shape != ((vol.shape[0],) if batched else ()) + (3, 4):
        raise ShapeError(f"warp: volume {vol.shape} incompatible with transform {transform.shape}")
    if any(n < 2 for n in vol.shape[-3:]):
        raise ShapeError(f"warp: every spatial axis needs >= 2 voxels, got {vol.shape[-3:]}")
    v = vol.data if batched else vol.data[None]
    Rt = (transform.data if batched else transform.data[None]).astype(np.float64)
    pitch = np.array([2.0 / (n - 1) for n in v.shape[2:]])
    M, c = _index_space(Rt, pitch)
    v = np.ascontiguousarray(v)
    out = np.zeros_like(v)
    _warp_forward(v, M, c, out)

    def vjp(g):
        gd = np.ascontiguousarray(g if batched else g[None]).astype(v.dtype, copy=False)
        need_vol, need_pose = vol.requires_grad, transform.requires_grad
        gvol = np.zeros_like(v)
        gM = np.zeros_like(M)
        gc = np.zeros_like(c)
        _warp_backward(v, M, c, gd, gvol, gM, gc, need_vol, need_pose)
        gT = None
        if need_pose:
            R, t = Rt[:, :, :3], Rt[:, :, 3]
            ratio = pitch[None, :] / pitch[:, None]
            gR = np.swapaxes(gM * ratio, 1, 2)
            gcs = gc / pitch  # dL/d(sum_k R_ki (1 + t_k)) = -gcs_i
            gR -= np.einsum("ni,nk->nki", gcs, 1.0 + t)
            gt = -np.einsum("ni,nki->nk", gcs, R)
            gT = np.concatenate([gR, gt[:, :, None]], axis=2).astype(transform.dtype)
            if not batched:
                gT = gT[0]
        gv = None
        if need_vol:
            gv = gvol if batched else gvol[0]
        return gv, gT

    return _emit("warp", (vol, transform), out if batched else out[0], vjp)


def fuse_mean(vols: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of equally shaped volumes."""
    if not vols:
        raise ShapeError("fuse_mean: no volumes")
    shape = vols[0].shape
    for v in vols:
        if v.shape != shape:
            raise ShapeError(f"fuse_mean: shape mismatch {shape} vs {v.shape}")
    n = len(vols)
    out = np.mean(np.stack([v.data for v in vols]), axis=0).astype(vols[0].dtype)
    return _emit("fuse_mean", tuple(vols), out, lambda g: tuple(g / n for _ in range(n)))


# ---------------------------------------------------------------------------
# volume file: b"NVMV", u32 ndim, u32 dims..., f32 LE data

VOLUME_MAGIC = b"NVMV"


def save_volume(vol: Tensor | np.ndarray, path: str | Path) -> None:
    data = np.ascontiguousarray(vol.data if isinstance(vol, Tensor) else vol, dtype="<f4")
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape))
        f.write(data.tobytes())


def load_volume(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != VOLUME_MAGIC:
        raise ValueError(f"{path}: not an NVMV volume")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{ndim}I", buf, 8)
    return np.frombuffer(buf, dtype="<f4", offset=8 + 4 * ndim).reshape(shape).astype(np.float32)
