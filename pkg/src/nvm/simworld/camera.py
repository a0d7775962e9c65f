"""Pinhole depth camera over a heightfield, plus depth noise and PGM export.

Camera frame: x along the optical axis, y left, z up. Pixel (row v, col u)
looks along ``(1, -(u + 0.5 - cx) / f, -(v + 0.5 - cy) / f)``. Reported depth
is the z-depth, i.e. the hit point's coordinate along the optical axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from ..geometry import SE3Transform
from .terrain import VOID_HEIGHT, Heightfield

MAX_DEPTH = 3.0
NOISE_PIXELS = 40  # floor(1% of 64 * 64)
MARCH_STEP = 0.02


@dataclass(frozen=True)
class Intrinsics:
    width: int = 64
    height: int = 64
    fov_deg: float = 90.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or not 0.0 < self.fov_deg < 180.0:
            raise ValueError(f"degenerate intrinsics {self}")

    @property
    def focal(self) -> float:
        return (self.height / 2) / math.tan(math.radians(self.fov_deg) / 2)

    def rays(self) -> np.ndarray:
        """[H, W, 3] camera-frame directions with unit x component."""
        f = self.focal
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        d = np.empty((self.height, self.width, 3))
        d[..., 0] = 1.0
        d[..., 1] = -(u + 0.5 - self.width / 2) / f
        d[..., 2] = -(v + 0.5 - self.height / 2) / f
        return d


@dataclass
class DepthFrame:
    """Normalised depth in [0, 1] (metres / max_depth) with optional salt-noise pixels."""

    values: np.ndarray
    max_depth: float = MAX_DEPTH
    noise_idx: np.ndarray | None = None

    def noisy(self) -> np.ndarray:
        return apply_noise_indices(self.values, self.noise_idx)


@numba.njit(cache=True)
def _lookup(heights, cell, x, y):
    ix = math.floor(x / cell)
    iy = math.floor(y / cell)
    if ix < 0 or iy < 0 or ix >= heights.shape[0] or iy >= heights.shape[1]:
        return -1.0e9
    return heights[ix, iy]


@numba.njit(cache=True)
def _raymarch(heights, cell, R, pos, rays, max_depth, step, out):
    H, W = out.shape
    for v in range(H):
        for u in range(W):
            dx = R[0, 0] * rays[v, u, 0] + R[0, 1] * rays[v, u, 1] + R[0, 2] * rays[v, u, 2]
            dy = R[1, 0] * rays[v, u, 0] + R[1, 1] * rays[v, u, 1] + R[1, 2] * rays[v, u, 2]
            dz = R[2, 0] * rays[v, u, 0] + R[2, 1] * rays[v, u, 1] + R[2, 2] * rays[v, u, 2]
            norm = math.sqrt(dx * dx + dy * dy + dz * dz)
            ds = step / norm
            s_prev = 0.0
            hit = -1.0
            s = ds
            while s <= max_depth + ds:
                px = pos[0] + s * dx
                py = pos[1] + s * dy
                pz = pos[2] + s * dz
                if pz <= _lookup(heights, cell, px, py):
                    lo, hi = s_prev, s
                    for _ in range(20):
                        mid = 0.5 * (lo + hi)
                        if pos[2] + mid * dz <= _lookup(heights, cell, pos[0] + mid * dx, pos[1] + mid * dy):
                            hi = mid
                        else:
                            lo = mid
                    hit = hi
                    break
                s_prev = s
                s += ds
            if hit < 0.0 or hit > max_depth:
                out[v, u] = max_depth
            else:
                out[v, u] = hit


def render_depth_metres(hf: Heightfield, cam_world: SE3Transform, intr: Intrinsics = Intrinsics(),
                        max_depth: float = MAX_DEPTH) -> np.ndarray:
    """Z-depth image in metres, clipped at ``max_depth``; rays that miss read ``max_depth``."""
    local = np.asarray(cam_world.t, dtype=np.float64).copy()
    local[0] -= hf.origin[0]
    local[1] -= hf.origin[1]
    if local[2] <= hf.height_local(local[:2]):
        raise ValueError("camera is below the terrain surface")
    out = np.empty((intr.height, intr.width))
    _raymarch(hf.heights.astype(np.float64), float(hf.cell), np.ascontiguousarray(cam_world.R, dtype=np.float64),
              local, intr.rays(), float(max_depth), MARCH_STEP, out)
    return out


def render_depth(hf: Heightfield, cam_world: SE3Transform, intr: Intrinsics = Intrinsics(),
                 max_depth: float = MAX_DEPTH) -> DepthFrame:
    metres = render_depth_metres(hf, cam_world, intr, max_depth)
    return DepthFrame((metres / max_depth).astype(np.float32), max_depth)


def noise_indices(seed, count: int = NOISE_PIXELS, size: int = 64 * 64) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(size, count, replace=False)).astype(np.int32)


def apply_noise_indices(img: np.ndarray, idx: np.ndarray | None) -> np.ndarray:
    out = np.array(img, dtype=np.float32, copy=True)
    if idx is not None:
        out.reshape(-1)[np.asarray(idx)] = 1.0
    return out


def apply_depth_noise(img: np.ndarray, seed, enabled: bool = True, count: int = NOISE_PIXELS) -> np.ndarray:
    """Set ``count`` distinct pixels to the normalised maximum reading."""
    if not enabled:
        return np.array(img, dtype=np.float32, copy=True)
    return apply_noise_indices(img, noise_indices(seed, count, np.size(img)))


def write_pgm(img: np.ndarray, path: str | Path) -> None:
    """16-bit binary PGM; input in [0, 1] scaled to 0..65535."""
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    raw = np.round(a * 65535).astype(">u2")
    h, w = raw.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(raw.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos])
    pos += 1  # single whitespace byte before the raster
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(x) for x in fields[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval


__all__ = [
    "Intrinsics", "DepthFrame", "MAX_DEPTH", "NOISE_PIXELS", "render_depth", "render_depth_metres",
    "apply_depth_noise", "apply_noise_indices", "noise_indices", "write_pgm", "read_pgm", "VOID_HEIGHT",
]
