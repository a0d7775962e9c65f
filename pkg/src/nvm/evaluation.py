"""Closed-loop rollouts of trained drivers and the comparison / ablation tables."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .memory import build_memory
from .networks import NetConfig, baseline_framestack_forward, policy_forward
from .simworld.episodes import Observation, collect_episode
from .simworld.terrain import gen_terrain
from .tensor import ParamStore, Tensor
from .training import teacher_oracle

EVAL_KINDS = ("stages", "stairs", "stones", "obstacles")
METHODS = ("nvm", "baseline_framestack", "teacher_oracle")

# label, NetConfig overrides; the default row comes first
ABLATION_ROWS = (
    ("NVM", {}),
    ("NVM(D=3)", {"D": 3}),
    ("NVM(D=6)", {"D": 6}),
    ("NVM(H=W=4)", {"H": 4, "W": 4}),
    ("NVM(H=W=8)", {"H": 8, "W": 8}),
    ("NVM(n=3)", {"n": 3}),
    ("NVM(n=9)", {"n": 9}),
)


class HistoryDriver:
    """Keeps the last ``n`` sensor frames; the first frame fills the window at start."""

    def __init__(self, n: int):
        self.n = n
        self.frames: deque = deque(maxlen=n)

    def push(self, obs: Observation) -> np.ndarray:
        if obs.depth is None:
            raise ValueError("visual driver needs observations carrying a depth frame")
        frame = np.asarray(obs.depth, dtype=np.float32)
        if not self.frames:
            self.frames.extend([frame] * self.n)
        else:
            self.frames.append(frame)
        return np.stack(self.frames)

    def __call__(self, obs: Observation) -> np.ndarray:
        raise NotImplementedError


class NVMDriver(HistoryDriver):
    def __init__(self, params: ParamStore, cfg: NetConfig):
        super().__init__(cfg.n)
        self.params, self.cfg = params, cfg

    def __call__(self, obs: Observation) -> np.ndarray:
        hist = Tensor(self.push(obs))
        mem = build_memory(self.params, hist, self.cfg)
        return policy_forward(self.params, mem, Tensor(np.asarray(obs.proprio, np.float32)), self.cfg).data


class BaselineDriver(HistoryDriver):
    def __init__(self, params: ParamStore, cfg: NetConfig):
        super().__init__(cfg.n)
        self.params, self.cfg = params, cfg

    def __call__(self, obs: Observation) -> np.ndarray:
        hist = Tensor(self.push(obs))
        proprio = Tensor(np.asarray(obs.proprio, np.float32))
        return baseline_framestack_forward(self.params, hist, proprio, self.cfg).data


@dataclass
class EpisodeResult:
    method: str
    kind: str
    seed: int
    rate: float
    success: bool
    steps: int
    fall_reason: str | None


def rollout(driver_factory, kind: str, seed: int, difficulty: float = 0.5, steps: int = 300,
            method: str = "") -> EpisodeResult:
    """One noiseless-actuation episode on a fresh terrain; ``driver_factory()`` builds a new driver."""
    hf = gen_terrain(kind, seed, difficulty)
    rec = collect_episode(hf, driver_factory(), seed, steps=steps, jitter=0.0)
    rate, success = rec.metrics()
    return EpisodeResult(method, kind, seed, rate, success, len(rec), rec.meta["fall_reason"])


def driver_factories(cfg: NetConfig, nvm_params: ParamStore | None, baseline_params: ParamStore | None) -> dict:
    out = {"teacher_oracle": lambda: teacher_oracle}
    if nvm_params is not None:
        out["nvm"] = lambda: NVMDriver(nvm_params, cfg)
    if baseline_params is not None:
        out["baseline_framestack"] = lambda: BaselineDriver(baseline_params, cfg)
    return {m: out[m] for m in METHODS if m in out}


def evaluate_methods(factories: dict, kinds=EVAL_KINDS, episodes: int = 8, seed: int = 0,
                     difficulty: float = 0.5, steps: int = 300) -> list[EpisodeResult]:
    """Every method sees the same terrains: seed ``seed + 1000 + e`` for episode ``e``."""
    results = []
    for method, factory in factories.items():
        for kind in kinds:
            for e in range(episodes):
                results.append(rollout(factory, kind, seed + 1000 + e, difficulty, steps, method))
    return results


def summarize(results: list[EpisodeResult]) -> list[dict]:
    """Mean and population std in percent, one row per (method, kind)."""
    groups: dict = {}
    for r in results:
        groups.setdefault((r.method, r.kind), []).append(r)
    rows = []
    for (method, kind), rs in groups.items():
        rate = 100 * np.array([r.rate for r in rs])
        succ = 100 * np.array([float(r.success) for r in rs])
        rows.append({"method": method, "terrain": kind, "episodes": len(rs),
                     "traversing_mean": float(rate.mean()), "traversing_std": float(rate.std()),
                     "success_mean": float(succ.mean()), "success_std": float(succ.std())})
    return rows


SUMMARY_COLUMNS = ("method", "terrain", "episodes", "traversing_mean", "traversing_std",
                   "success_mean", "success_std")


def write_summary_csv(rows: list[dict], path, columns=SUMMARY_COLUMNS) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{row[k]:.2f}" if isinstance(row[k], float) else row[k]) for k in columns})


def format_table(rows: list[dict], kinds=EVAL_KINDS, key: str = "method") -> str:
    """Text table: traversing rates then success rates, one line per method."""
    order = list(dict.fromkeys(r[key] for r in rows))
    cell = {(r[key], r["terrain"]): r for r in rows}
    width = max([len("Scenarios")] + [len(m) for m in order]) + 2

    def fmt(r, metric):
        return "-" if r is None else f"{r[metric + '_mean']:.1f}±{r[metric + '_std']:.1f}"

    col = max(13, -(-22 // max(len(kinds), 1)))
    span = col * len(kinds)
    head = "Scenarios".ljust(width) + "".join(k.capitalize().rjust(col) for k in kinds) * 2
    banner = " " * width + "Traversing Rate (%)".center(span) + "Success Rate (%)".center(span)
    lines = [banner.rstrip(), head]
    for m in order:
        parts = [fmt(cell.get((m, k)), "traversing").rjust(col) for k in kinds]
        parts += [fmt(cell.get((m, k)), "success").rjust(col) for k in kinds]
        lines.append(m.ljust(width) + "".join(parts))
    return "\n".join(lines)


def ablation_configs(base: NetConfig) -> list[tuple[str, NetConfig]]:
    return [(label, replace(base, **over)) for label, over in ABLATION_ROWS]


def write_report(rows: list[dict], out_dir, stem: str, kinds=EVAL_KINDS, key: str = "method") -> str:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns = (key,) + SUMMARY_COLUMNS[1:]
    write_summary_csv(rows, out / f"{stem}.csv", columns)
    text = format_table(rows, kinds, key)
    (out / f"{stem}.txt").write_text(text + "\n")
    return text
