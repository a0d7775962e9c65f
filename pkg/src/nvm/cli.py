"""``nvm`` command line: data generation, training, evaluation, diagnostics."""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_TESTS = 0, 2, 3, 4


def _cap_threads() -> None:
    # must run before numpy/numba spin up their pools
    cap = os.environ.get("NVM_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _load_run_config(args):
    from .config import load_config

    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train = replace(cfg.train, seed=args.seed)
    return cfg


def _config_beside(checkpoint: Path, explicit):
    from .config import load_config

    if explicit:
        return load_config(explicit)
    sidecar = checkpoint.parent / "config.json"
    return load_config(sidecar if sidecar.exists() else None)


# ---------------------------------------------------------------------------
# commands


def cmd_config(args) -> int:
    from .config import RunConfig

    cfg = RunConfig() if args.dump_defaults else _load_run_config(args)
    print(cfg.dumps())
    return EXIT_OK


def cmd_gen_terrain(args) -> int:
    from .simworld.terrain import gen_terrain, save_terrain

    hf = gen_terrain(args.kind, args.seed, args.difficulty, args.preset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_terrain(hf, out)
    print(f"wrote {out} ({hf.kind}, {hf.nx}x{hf.ny} cells)")
    return EXIT_OK


def cmd_collect(args) -> int:
    from .dataset import collect_dataset, load_dataset, plan_episodes, teacher_mismatches, worker_count

    cfg = _load_run_config(args)
    d = cfg.data
    kinds = _csv_list(args.kinds) if args.kinds else d.kinds
    plans = plan_episodes(kinds, args.episodes if args.episodes is not None else d.episodes, cfg.seed,
                          d.difficulty, args.steps or d.steps, d.preset, d.jitter, d.corrected_forward)
    t0 = time.perf_counter()
    manifest = collect_dataset(plans, args.out, worker_count(args.workers))
    print(f"collected {len(manifest['episodes'])} episodes into {args.out} in {time.perf_counter() - t0:.1f}s")
    if args.check_teacher:
        bad = {i: teacher_mismatches(r) for i, r in enumerate(load_dataset(args.out))}
        bad = {i: b for i, b in bad.items() if b}
        if bad:
            print(f"teacher consistency FAILED for episodes {sorted(bad)}")
            return EXIT_TESTS
        print("teacher consistency: all stored actions match the oracle bitwise")
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataset import load_dataset
    from .training import AugmentConfig, train

    if args.ssl_only and args.bc_only:
        print("--ssl-only and --bc-only are exclusive", file=sys.stderr)
        return EXIT_CONFIG
    cfg = _load_run_config(args)
    tc = cfg.train
    if args.steps is not None:
        tc = replace(tc, steps=args.steps)
    if args.ssl_only:
        tc = replace(tc, lam_bc=0.0)
    if args.bc_only:
        tc = replace(tc, lam_rec=0.0)
    if args.baseline_steps is not None:
        tc = replace(tc, baseline_steps=args.baseline_steps)
    cfg.train = tc
    out = Path(args.out or cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())
    episodes = load_dataset(args.data or cfg.paths.data)
    aug = cfg.augment if not args.no_augment else AugmentConfig.off()

    def log(row):
        print(" ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()), flush=True)

    train(cfg.net, tc, episodes, out, aug, log=log)
    if tc.baseline_steps:
        train(cfg.net, tc, episodes, out, aug, log=log, model="baseline", steps=tc.baseline_steps)
    print(f"checkpoints and metrics in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import driver_factories, evaluate_methods, summarize, write_report
    from .networks import init_params
    from .tensor import load_checkpoint

    ckpt = Path(args.checkpoint)
    cfg = _config_beside(ckpt, args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    nvm = load_checkpoint(ckpt)
    base_path = Path(args.baseline) if args.baseline else ckpt.parent / "baseline.nvmc"
    if base_path.exists():
        baseline = load_checkpoint(base_path)
    else:
        print(f"note: {base_path} not found; baseline_framestack row uses untrained weights")
        baseline = init_params(cfg.net, cfg.seed, ("baseline",))
    kinds = _csv_list(args.terrains) if args.terrains else cfg.eval.terrains
    episodes = args.episodes if args.episodes is not None else cfg.eval.episodes
    results = evaluate_methods(driver_factories(cfg.net, nvm, baseline), kinds, episodes, cfg.seed,
                               cfg.eval.difficulty, args.steps or cfg.eval.steps)
    text = write_report(summarize(results), args.out, "eval", kinds)
    print(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .dataset import load_dataset
    from .evaluation import ablation_configs, driver_factories, evaluate_methods, summarize, write_report
    from .training import train

    if args.grid != "default":
        print(f"unknown grid {args.grid!r}; only 'default' is defined", file=sys.stderr)
        return EXIT_CONFIG
    cfg = _load_run_config(args)
    tc = cfg.train if args.steps is None else replace(cfg.train, steps=args.steps)
    episodes = load_dataset(args.data or cfg.paths.data)
    kinds = _csv_list(args.terrains) if args.terrains else cfg.eval.terrains
    n_eval = args.episodes if args.episodes is not None else cfg.eval.episodes
    out = Path(args.out)
    rows, training_rows = [], []
    for label, net in ablation_configs(cfg.net):
        run_dir = out / label.replace("=", "").replace("(", "_").replace(")", "")
        params, metrics = train(net, tc, episodes, run_dir, cfg.augment)
        final = metrics[-1]
        training_rows.append({"scenario": label, "D": net.D, "H": net.H, "W": net.W, "n": net.n,
                              "heldout_L_rec": final["heldout_L_rec"], "bc_err": final["bc_err"]})
        res = evaluate_methods({"nvm": driver_factories(net, params, None)["nvm"]}, kinds, n_eval, cfg.seed,
                               cfg.eval.difficulty, cfg.eval.steps)
        for r in summarize(res):
            r["scenario"] = label
            rows.append(r)
        print(f"{label}: heldout_L_rec={final['heldout_L_rec']:.4f} bc_err={final['bc_err']:.4f}", flush=True)
    text = write_report(rows, out, "ablation", kinds, key="scenario")
    with open(out / "ablation_training.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(training_rows[0]))
        writer.writeheader()
        writer.writerows(training_rows)
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import CHECKS, run_check

    names = _csv_list(args.op) if args.op else list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        print(f"unknown ops {unknown}; available: {', '.join(CHECKS)}", file=sys.stderr)
        return EXIT_CONFIG
    t0, failed = time.perf_counter(), []
    for name in names:
        r = run_check(name, seeds=args.seeds, base_seed=args.seed or 0)
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {name:18s} max_rel_err={r.max_rel_err:.2e} coords={r.checked} "
              f"kinks_skipped={r.skipped} {r.seconds:.1f}s", flush=True)
        if not r.passed:
            failed.append(name)
    print(f"{len(names) - len(failed)}/{len(names)} passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_TESTS if failed else EXIT_OK


def cmd_render_recon(args) -> int:
    from .simworld.camera import write_pgm
    from .simworld.episodes import EpisodeRecord
    from .simworld.terrain import VOID_HEIGHT, gen_terrain
    from .tensor import Tensor, load_checkpoint
    from .training import augment, ssl_predictions

    ckpt = Path(args.checkpoint)
    cfg = _config_beside(ckpt, args.config)
    net = cfg.net
    params = load_checkpoint(ckpt)
    rec = EpisodeRecord.read(args.episode)
    t = args.step
    if not net.n - 1 <= t < len(rec):
        print(f"--step must lie in [{net.n - 1}, {len(rec) - 1}] for history length {net.n}", file=sys.stderr)
        return EXIT_CONFIG
    idx = range(t - net.n + 1, t + 1)
    seed = args.seed if args.seed is not None else cfg.seed
    rng = np.random.default_rng(seed)
    inputs = np.stack([augment(rec.noisy_depth(i), rng.integers(2**32), cfg.augment)[0] for i in idx])
    pred = ssl_predictions(params, Tensor(inputs[None]), net, cam_poses=[rec.camera_poses(idx)]).data[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = rec.meta
    hf = gen_terrain(m["kind"], m["terrain_seed"], m["difficulty"], m.get("preset"))
    h = hf.heights.astype(np.float64)
    solid = h > VOID_HEIGHT
    lo, hi = (h[solid].min(), h[solid].max()) if solid.any() else (0.0, 1.0)
    top = np.where(solid, (h - lo) / max(hi - lo, 1e-6), 0.0)
    write_pgm(top[::-1].T, out / "0_scene_topdown.pgm")
    write_pgm(inputs[0], out / "1_input.pgm")
    write_pgm(pred[-1], out / "2_synthesized.pgm")
    write_pgm(rec.depth[t], out / "3_ground_truth.pgm")
    err = float(np.mean(np.abs(pred[-1] - rec.depth[t])))
    print(f"wrote 4 images to {out}; present-frame L1 = {err:.4f}")
    return EXIT_OK


def _parse_shape(text: str) -> tuple[int, ...]:
    dims = tuple(int(v) for v in text.lower().split("x"))
    if len(dims) != 5 or min(dims) < 1:
        raise ValueError(f"shape {text!r} must be BxCxDxHxW")
    return dims


def bench_warp(shape: tuple[int, ...], iters: int, seed: int = 0) -> dict:
    """Output-voxel samples per second for the forward warp and its backward pass."""
    from .geometry import rodrigues
    from .tensor import Tape, Tensor, backward, mean_all
    from .volume import warp

    rng = np.random.default_rng(seed)
    b = shape[0]
    vol = Tensor(rng.standard_normal(shape).astype(np.float32), requires_grad=True)
    tf = np.zeros((b, 3, 4))
    tf[:, :, :3] = rodrigues(rng.normal(0, 0.1, (b, 3)))
    tf[:, :, 3] = rng.normal(0, 1.0, (b, 3))
    pose = Tensor(tf.astype(np.float32), requires_grad=True)
    warp(vol, pose)  # compile
    voxels = int(np.prod(shape))
    t0 = time.perf_counter()
    for _ in range(iters):
        warp(vol, pose)
    fwd = time.perf_counter() - t0
    with Tape() as tape:
        loss = mean_all(warp(vol, pose))
    backward(tape, loss)
    t0 = time.perf_counter()
    for _ in range(iters):
        backward(tape, loss)
    bwd = time.perf_counter() - t0
    return {"shape": "x".join(map(str, shape)), "iters": iters, "voxels": voxels,
            "forward_voxels_per_s": voxels * iters / fwd, "backward_voxels_per_s": voxels * iters / bwd}


BENCH_COLUMNS = ("timestamp", "shape", "iters", "voxels", "forward_voxels_per_s", "backward_voxels_per_s")


def cmd_bench_warp(args) -> int:
    try:
        shapes = [_parse_shape(s) for s in _csv_list(args.sizes)]
    except ValueError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    rows = []
    for shape in shapes:
        row = bench_warp(shape, args.iters, args.seed or 0)
        row["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        rows.append(row)
        print(f"{row['shape']}: forward {row['forward_voxels_per_s']:.3e} voxels/s, "
              f"backward {row['backward_voxels_per_s']:.3e} voxels/s")
    if args.csv:
        path = Path(args.csv)
        new = not path.exists()
        with open(path, "a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=BENCH_COLUMNS)
            if new:
                writer.writeheader()
            for row in rows:
                writer.writerow({k: row[k] for k in BENCH_COLUMNS})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    from .simworld.terrain import KINDS

    parser = argparse.ArgumentParser(prog="nvm", description="Neural volumetric memory toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.set_defaults(fn=fn)
        return p

    p = add("config", cmd_config, "Print the effective run configuration as JSON.")
    p.add_argument("--config", help="JSON run config to load")
    p.add_argument("--dump-defaults", action="store_true", help="print built-in defaults and ignore --config")

    p = add("gen-terrain", cmd_gen_terrain, "Generate one heightfield and write it as an NVMT file.")
    p.add_argument("--kind", required=True, choices=KINDS, help="terrain kind")
    p.add_argument("--difficulty", type=float, default=0.5, help="difficulty in [0, 1]")
    p.add_argument("--preset", default=None, help="optional preset (stairs: 'real')")
    p.add_argument("--out", required=True, help="output .nvmt path")
    p.set_defaults(seed=0)

    p = add("collect", cmd_collect, "Roll out the teacher oracle and write an episode dataset.")
    p.add_argument("--config", help="JSON run config (data section)")
    p.add_argument("--episodes", type=int, default=None, help="number of episodes (default from config)")
    p.add_argument("--steps", type=int, default=None, help="max steps per episode (default from config)")
    p.add_argument("--kinds", default=None, help="comma-separated terrain kinds (default from config)")
    p.add_argument("--workers", type=int, default=None, help="worker processes (capped by NVM_THREADS)")
    p.add_argument("--check-teacher", action="store_true",
                   help="re-run the oracle on stored observations and require bitwise equality")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = add("train", cmd_train, "Train the memory and policy on a dataset.")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--data", default=None, help="dataset directory (default paths.data)")
    p.add_argument("--out", default=None, help="run directory (default paths.out)")
    p.add_argument("--steps", type=int, default=None, help="override train.steps")
    p.add_argument("--ssl-only", action="store_true", help="reconstruction objective only (lam_bc = 0)")
    p.add_argument("--bc-only", action="store_true", help="behaviour cloning only (lam_rec = 0)")
    p.add_argument("--baseline-steps", type=int, default=None,
                   help="afterwards fit the frame-stacking baseline for this many steps")
    p.add_argument("--no-augment", action="store_true", help="disable input augmentation")

    p = add("eval", cmd_eval, "Closed-loop evaluation: nvm vs baseline_framestack vs teacher_oracle.")
    p.add_argument("--checkpoint", required=True, help="NVMC checkpoint of the memory + policy")
    p.add_argument("--baseline", default=None, help="baseline checkpoint (default: baseline.nvmc beside it)")
    p.add_argument("--config", default=None, help="run config (default: config.json beside the checkpoint)")
    p.add_argument("--terrains", default=None, help="comma-separated terrain kinds")
    p.add_argument("--episodes", type=int, default=None, help="episodes per terrain")
    p.add_argument("--steps", type=int, default=None, help="step limit per episode")
    p.add_argument("--out", default="eval_out", help="directory for eval.csv and eval.txt")

    p = add("ablate", cmd_ablate, "Train and evaluate the seven grid / history ablation rows.")
    p.add_argument("--grid", default="default", help="ablation grid name (only 'default')")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--steps", type=int, default=None, help="training steps per row")
    p.add_argument("--terrains", default=None, help="comma-separated terrain kinds")
    p.add_argument("--episodes", type=int, default=None, help="evaluation episodes per terrain")
    p.add_argument("--out", default="ablate_out", help="output directory")

    p = add("gradcheck", cmd_gradcheck, "Finite-difference gradient checks; exit 4 on any failure.")
    p.add_argument("--op", default=None, help="comma-separated check names (default: all)")
    p.add_argument("--seeds", type=int, default=20, help="random instances per check")

    p = add("render-recon", cmd_render_recon, "Write input / synthesized / ground-truth / top-down PGMs.")
    p.add_argument("--checkpoint", required=True, help="NVMC checkpoint")
    p.add_argument("--config", default=None, help="run config (default: config.json beside the checkpoint)")
    p.add_argument("--episode", required=True, help="episode directory")
    p.add_argument("--step", type=int, required=True, help="present step t; the window is t-n+1..t")
    p.add_argument("--out", required=True, help="output directory")

    p = add("bench-warp", cmd_bench_warp, "Throughput of the volume warp, forward and backward.")
    p.add_argument("--sizes", default="1x8x12x6x6,5x8x12x6x6,80x8x12x6x6",
                   help="comma-separated BxCxDxHxW shapes; the first is one default memory volume")
    p.add_argument("--iters", type=int, default=20, help="timed iterations per shape")
    p.add_argument("--csv", default=None, help="append results to this CSV")
    return parser


def main(argv=None) -> int:
    _cap_threads()
    from .config import ConfigError
    from .tensor import NumericError

    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
