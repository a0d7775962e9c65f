"""Episode datasets on disk: seeded collection plans, parallel collection, loading."""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .simworld.episodes import EpisodeRecord, collect_episode
from .simworld.terrain import Heightfield, gen_terrain
from .training import teacher_oracle

DATASET_VERSION = 1


@dataclass(frozen=True)
class EpisodePlan:
    index: int
    kind: str
    seed: int
    difficulty: float
    steps: int
    preset: str | None = None
    jitter: float = 0.03
    corrected_forward: bool = False


def plan_episodes(kinds, episodes: int, seed: int, difficulty: float = 0.5, steps: int = 200,
                  preset: str | None = None, jitter: float = 0.03,
                  corrected_forward: bool = False) -> list[EpisodePlan]:
    """Kinds round-robin; episode ``i`` uses seed ``seed * 100003 + i`` for both terrain and rollout."""
    kinds = list(kinds)
    if not kinds:
        raise ValueError("no terrain kinds to collect")
    return [EpisodePlan(i, kinds[i % len(kinds)], seed * 100003 + i, difficulty, steps, preset, jitter,
                        corrected_forward) for i in range(episodes)]


def terrain_for(plan: EpisodePlan) -> Heightfield:
    return gen_terrain(plan.kind, plan.seed, plan.difficulty, plan.preset)


def run_plan(plan: EpisodePlan) -> EpisodeRecord:
    rec = collect_episode(terrain_for(plan), teacher_oracle, plan.seed, plan.steps, plan.jitter,
                          corrected_forward=plan.corrected_forward)
    rec.meta["index"] = plan.index
    return rec


def worker_count(requested: int | None = None) -> int:
    cap = int(os.environ.get("NVM_THREADS", "0") or 0) or (os.cpu_count() or 1)
    return max(1, min(cap, requested or cap))


def episode_dir(root, index: int) -> Path:
    return Path(root) / f"ep_{index:04d}"


def _collect_to(args) -> dict:
    plan, root = args
    rec = run_plan(plan)
    rec.write(episode_dir(root, plan.index))
    return {"index": plan.index, "dir": episode_dir(root, plan.index).name, "kind": plan.kind,
            "seed": plan.seed, "steps": len(rec), "fell": rec.meta["fell"]}


def collect_dataset(plans: list[EpisodePlan], out_dir, workers: int = 1) -> dict:
    """Write every planned episode and a ``dataset.json`` manifest sorted by index."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    jobs = [(p, root) for p in plans]
    if workers > 1 and len(plans) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_collect_to, jobs))
    else:
        entries = [_collect_to(j) for j in jobs]
    entries.sort(key=lambda e: e["index"])
    manifest = {"version": DATASET_VERSION, "episodes": entries}
    (root / "dataset.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_dataset(root, limit: int | None = None) -> list[EpisodeRecord]:
    root = Path(root)
    manifest = root / "dataset.json"
    if manifest.exists():
        dirs = [root / e["dir"] for e in json.loads(manifest.read_text())["episodes"]]
    else:
        dirs = sorted(p for p in root.glob("ep_*") if p.is_dir())
    if not dirs:
        raise ValueError(f"{root}: no episodes found")
    return [EpisodeRecord.read(d) for d in dirs[:limit]]


def teacher_mismatches(rec: EpisodeRecord) -> list[int]:
    """Steps whose stored teacher action differs (bitwise) from the oracle recomputed from stored inputs."""
    bad = []
    for t in range(len(rec)):
        again = teacher_oracle(rec.observation(t))
        if again.tobytes() != np.asarray(rec.teacher_action[t], dtype=np.float32).tobytes():
            bad.append(t)
    return bad
