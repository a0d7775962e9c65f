"""Procedural heightfields for the four course types plus a flat control.

Heights are metres on a square lattice with a dyadic cell size, so shifting a
field by whole cells is exact in floating point. Axis 0 runs along the course
(world x), axis 1 across it (world y). Gaps and the space under stepping
stones sit at ``VOID_HEIGHT``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("stages", "stairs", "stones", "obstacles", "flat")
VOID_HEIGHT = -1.0
CELL = 1.0 / 32
REAL_STAIR_HEIGHTS = (0.03, 0.06, 0.10)

COURSE_START = 0.0
COURSE_GOAL = 8.0
DEFAULT_ORIGIN = (-1.0, -1.5)
FIELD_LENGTH = 10.5
FIELD_WIDTH = 3.0

# the robot starts on a flat pad and the course proper begins here
_PAD_END = 1.0


@dataclass
class Heightfield:
    heights: np.ndarray  # [nx, ny] metres
    cell: float = CELL
    kind: str = "flat"
    origin: tuple[float, float] = DEFAULT_ORIGIN
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.heights = np.ascontiguousarray(self.heights, dtype=np.float32)
        if self.cell <= 0:
            raise ValueError(f"cell size must be positive, got {self.cell}")
        if not np.all(np.isfinite(self.heights)):
            raise ValueError("heightfield contains non-finite heights")

    @property
    def nx(self) -> int:
        return self.heights.shape[0]

    @property
    def ny(self) -> int:
        return self.heights.shape[1]

    def to_local(self, xy) -> np.ndarray:
        return np.asarray(xy, dtype=np.float64) - np.asarray(self.origin)

    def height_at(self, xy) -> np.ndarray:
        """Nearest-cell height at world points [..., 2]; outside the field is void."""
        return self.height_local(self.to_local(xy))

    def height_local(self, local) -> np.ndarray:
        local = np.asarray(local, dtype=np.float64)
        ix = np.floor(local[..., 0] / self.cell).astype(np.int64)
        iy = np.floor(local[..., 1] / self.cell).astype(np.int64)
        inside = (ix >= 0) & (ix < self.nx) & (iy >= 0) & (iy < self.ny)
        out = np.full(ix.shape, VOID_HEIGHT)
        out[inside] = self.heights[ix[inside], iy[inside]]
        return out

    def shifted(self, cells: tuple[int, int]) -> "Heightfield":
        """Same surface with the origin moved by whole cells."""
        ox, oy = self.origin
        return Heightfield(self.heights.copy(), self.cell, self.kind,
                           (ox + cells[0] * self.cell, oy + cells[1] * self.cell), dict(self.meta))


def _grid(cell: float):
    nx = int(round(FIELD_LENGTH / cell))
    ny = int(round(FIELD_WIDTH / cell))
    x0, y0 = DEFAULT_ORIGIN
    xs = x0 + (np.arange(nx) + 0.5) * cell
    ys = y0 + (np.arange(ny) + 0.5) * cell
    return xs, ys


def _stages(rng, xs, ys, difficulty):
    h = np.zeros((xs.size, ys.size))
    x = _PAD_END + rng.uniform(0.3, 0.6)
    gaps = []
    while x < COURSE_GOAL - 0.3:
        width = rng.uniform(0.05, 0.08 + 0.22 * difficulty)
        h[(xs >= x) & (xs < x + width)] = VOID_HEIGHT
        gaps.append((round(x, 4), round(width, 4)))
        x += width + rng.uniform(0.8, 1.6 - 0.6 * difficulty)
    return h, {"gaps": gaps}


def stair_heights(rng, count: int, difficulty: float, preset: str | None = None) -> list[float]:
    if preset == "real":
        return [REAL_STAIR_HEIGHTS[i % 3] for i in range(count)]
    lo, hi = 0.02, 0.04 + 0.08 * difficulty
    # quantised to 1/256 m so heights stay exact in 32-bit storage
    return [float(np.round(rng.uniform(lo, hi) * 256) / 256) for _ in range(count)]


def _stairs(rng, xs, ys, difficulty, preset=None):
    h = np.zeros((xs.size, ys.size))
    x = _PAD_END + rng.uniform(0.2, 0.5)
    level = 0.0
    risers = []
    flights = 0
    while x < COURSE_GOAL - 0.5:
        steps = int(rng.integers(3, 6))
        rises = stair_heights(rng, steps, difficulty, preset)
        sign = 1.0 if flights % 2 == 0 else -1.0
        for rise in rises:
            tread = rng.uniform(0.35, 0.55 - 0.1 * difficulty)
            if sign < 0 and level - rise < -1e-9:
                break
            level += sign * rise
            h[xs >= x] = level
            risers.append(round(sign * rise, 6))
            x += tread
            if x >= COURSE_GOAL - 0.5:
                break
        flights += 1
        x += rng.uniform(0.4, 0.8)
    return h, {"risers": risers}


def _stones(rng, xs, ys, difficulty):
    h = np.full((xs.size, ys.size), VOID_HEIGHT)
    h[xs < _PAD_END] = 0.0
    h[xs >= COURSE_GOAL] = 0.0
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    spacing = 0.2 + 0.08 * difficulty
    stones = 0
    for cx in np.arange(_PAD_END, COURSE_GOAL, spacing):
        for cy in np.arange(-1.2, 1.2 + 1e-9, spacing):
            px = cx + rng.uniform(-0.3, 0.3) * spacing
            py = cy + rng.uniform(-0.3, 0.3) * spacing
            r = rng.uniform(0.11, 0.17 - 0.04 * difficulty)
            top = float(np.round(rng.uniform(-0.02, 0.02) * difficulty * 256) / 256)
            h[(X - px) ** 2 + (Y - py) ** 2 <= r * r] = top
            stones += 1
    return h, {"stones": stones}


def _obstacles(rng, xs, ys, difficulty):
    h = np.zeros((xs.size, ys.size))
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    count = int(round(4 + 6 * difficulty))
    boxes = []
    for _ in range(count):
        cx = rng.uniform(_PAD_END + 0.8, COURSE_GOAL - 0.5)
        cy = rng.uniform(-1.0, 1.0)
        sx, sy = rng.uniform(0.1, 0.25, size=2)
        top = float(np.round(rng.uniform(0.5, 0.8) * 32) / 32)
        h[(np.abs(X - cx) <= sx) & (np.abs(Y - cy) <= sy)] = top
        boxes.append((round(cx, 3), round(cy, 3), round(sx, 3), round(sy, 3), top))
    return h, {"boxes": boxes}


def gen_terrain(kind: str, seed: int = 0, difficulty: float = 0.5, preset: str | None = None,
                cell: float = CELL) -> Heightfield:
    """Deterministic heightfield for ``(kind, seed, difficulty)``."""
    if kind not in KINDS:
        raise ValueError(f"unknown terrain kind {kind!r}; expected one of {KINDS}")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must lie in [0, 1], got {difficulty}")
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    xs, ys = _grid(cell)
    if kind == "flat":
        h, meta = np.zeros((xs.size, ys.size)), {}
    elif kind == "stages":
        h, meta = _stages(rng, xs, ys, difficulty)
    elif kind == "stairs":
        h, meta = _stairs(rng, xs, ys, difficulty, preset)
    elif kind == "stones":
        h, meta = _stones(rng, xs, ys, difficulty)
    else:
        h, meta = _obstacles(rng, xs, ys, difficulty)
    meta.update(seed=seed, difficulty=difficulty, preset=preset)
    return Heightfield(h, cell, kind, DEFAULT_ORIGIN, meta)


# ---------------------------------------------------------------------------
# terrain file: b"NVMT", u32 nx, u32 ny, f32 cell, f32 LE heights (row-major, x major)

TERRAIN_MAGIC = b"NVMT"


def save_terrain(hf: Heightfield, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(TERRAIN_MAGIC)
        f.write(struct.pack("<IIf", hf.nx, hf.ny, hf.cell))
        f.write(np.ascontiguousarray(hf.heights, dtype="<f4").tobytes())


def load_terrain(path: str | Path, kind: str = "unknown") -> Heightfield:
    """Read an NVMT file. The format carries no origin, so the default one is used."""
    buf = Path(path).read_bytes()
    if buf[:4] != TERRAIN_MAGIC:
        raise ValueError(f"{path}: not an NVMT terrain")
    nx, ny, cell = struct.unpack_from("<IIf", buf, 4)
    heights = np.frombuffer(buf, dtype="<f4", count=nx * ny, offset=16).reshape(nx, ny)
    return Heightfield(heights.astype(np.float32), float(cell), kind, DEFAULT_ORIGIN)
