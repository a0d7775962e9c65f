"""Dataset collection plans and the closed-loop evaluation harness."""

import csv
import json

import numpy as np
import pytest

from nvm.dataset import collect_dataset, load_dataset, plan_episodes, teacher_mismatches, worker_count
from nvm.evaluation import (
    ABLATION_ROWS,
    METHODS,
    HistoryDriver,
    EpisodeResult,
    ablation_configs,
    driver_factories,
    evaluate_methods,
    format_table,
    rollout,
    summarize,
    write_report,
)
from nvm.networks import NetConfig, init_params
from nvm.simworld.episodes import Observation


class TestPlans:
    def test_round_robin_and_seeds(self):
        plans = plan_episodes(["stairs", "stones"], 5, seed=2, steps=10)
        assert [p.kind for p in plans] == ["stairs", "stones", "stairs", "stones", "stairs"]
        assert [p.seed for p in plans] == [200006 + i for i in range(5)]
        with pytest.raises(ValueError):
            plan_episodes([], 3, 0)

    def test_worker_cap(self, monkeypatch):
        monkeypatch.setenv("NVM_THREADS", "2")
        assert worker_count(8) == 2 and worker_count(1) == 1 and worker_count(None) == 2


class TestDataset:
    def test_manifest_and_load(self, small_dataset):
        root, eps = small_dataset
        manifest = json.loads((root / "dataset.json").read_text())
        assert [e["index"] for e in manifest["episodes"]] == list(range(6))
        assert len(eps) == 6 and [ep.meta["index"] for ep in eps] == list(range(6))
        assert len(load_dataset(root, limit=2)) == 2

    def test_teacher_consistency(self, small_dataset):
        _, eps = small_dataset
        assert all(teacher_mismatches(ep) == [] for ep in eps)

    def test_detects_tampering(self, small_dataset):
        _, eps = small_dataset
        ep = eps[0]
        streams = dict(ep.streams)
        streams["teacher_action"] = ep.teacher_action.copy()
        streams["teacher_action"][3, 0] += 1e-3
        assert teacher_mismatches(type(ep)(streams, ep.meta)) == [3]

    def test_parallel_matches_serial(self, tmp_path):
        plans = plan_episodes(["stages"], 2, seed=5, steps=6)
        collect_dataset(plans, tmp_path / "a", workers=1)
        collect_dataset(plans, tmp_path / "b", workers=2)
        for a, b in zip(load_dataset(tmp_path / "a"), load_dataset(tmp_path / "b")):
            for name in a.streams:
                np.testing.assert_array_equal(a.streams[name], b.streams[name])

    def test_empty_directory(self, tmp_path):
        with pytest.raises(ValueError):
            load_dataset(tmp_path)


def result(method, kind, rate, success):
    return EpisodeResult(method, kind, 0, rate, success, 10, None)


class TestEvaluation:
    def test_history_driver_fills_with_first_frame(self):
        d = HistoryDriver(3)
        obs = lambda v: Observation(None, None, None, None, np.full((2, 2), v, np.float32))
        np.testing.assert_array_equal(d.push(obs(1))[:, 0, 0], [1, 1, 1])
        np.testing.assert_array_equal(d.push(obs(2))[:, 0, 0], [1, 1, 2])
        np.testing.assert_array_equal(d.push(obs(3))[:, 0, 0], [1, 2, 3])
        with pytest.raises(ValueError):
            d.push(Observation(None, None, None, None))

    def test_teacher_rollout(self):
        r = rollout(driver_factories(NetConfig(), None, None)["teacher_oracle"], "stairs", 1, steps=40,
                    method="teacher_oracle")
        assert r.steps == 40 and 0.1 < r.rate < 0.3 and not r.success and r.fall_reason == ""

    def test_factories_order(self):
        net = NetConfig(enc_widths=(4, 8, 8), vol_channels=2, pose_width=8, dec_widths=(8, 4, 4, 4),
                        policy_conv=4, policy_feat=8, policy_hidden=16)
        f = driver_factories(net, init_params(net, 0), init_params(net, 0, ("baseline",)))
        assert tuple(f) == METHODS
        res = evaluate_methods(f, ["stones"], episodes=1, steps=3)
        assert [(r.method, r.seed) for r in res] == [(m, 1000) for m in METHODS]
        assert all(r.steps <= 3 for r in res)

    def test_summary_statistics(self):
        rows = summarize([result("a", "stairs", 1.0, True), result("a", "stairs", 0.5, False)])
        assert rows == [{"method": "a", "terrain": "stairs", "episodes": 2, "traversing_mean": 75.0,
                         "traversing_std": 25.0, "success_mean": 50.0, "success_std": 50.0}]

    def test_table_and_report(self, tmp_path):
        rows = summarize([result("nvm", "stairs", 1.0, True), result("teacher_oracle", "stones", 0.25, False)])
        text = format_table(rows, ["stairs", "stones"])
        lines = text.splitlines()
        assert "Traversing Rate (%)" in lines[0] and "Success Rate (%)" in lines[0]
        assert lines[2].split() == ["nvm", "100.0±0.0", "-", "100.0±0.0", "-"]
        assert lines[3].split() == ["teacher_oracle", "-", "25.0±0.0", "-", "0.0±0.0"]
        write_report(rows, tmp_path, "eval", ["stairs", "stones"])
        with open(tmp_path / "eval.csv") as f:
            table = list(csv.DictReader(f))
        assert table[0]["traversing_mean"] == "100.00" and (tmp_path / "eval.txt").read_text() == text + "\n"

    def test_ablation_grid(self):
        configs = ablation_configs(NetConfig())
        assert [label for label, _ in configs] == [label for label, _ in ABLATION_ROWS]
        assert [(c.D, c.H, c.W, c.n) for _, c in configs] == [
            (12, 6, 6, 5), (3, 6, 6, 5), (6, 6, 6, 5), (12, 4, 4, 5), (12, 8, 8, 5), (12, 6, 6, 3), (12, 6, 6, 9)]
