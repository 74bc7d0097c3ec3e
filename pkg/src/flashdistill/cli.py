"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .diffusion import sample_many
from .geom import NoiseStream
from .oracle import run_bridge_checks
from .schedule import BaseSchedule, low_noise_fraction, make_grid, write_grid_csv
from .toymol import ToyChemSpec, compute_metrics, generate_dataset, load_dataset, metrics_json, save_dataset
from .trainer import ConfigError, NumericAbort, TrainConfig, distill, evaluate, load_config, load_net, train_teacher

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


@dataclass
class RunManifest:
    command: str
    config: dict
    input_hash: str
    seed: int
    started: float
    finished: float | None = None
    outputs: list[str] = field(default_factory=list)
    status: str = "running"

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def content_hash(*items) -> str:
    h = hashlib.sha256()
    for item in items:
        if isinstance(item, Path):
            h.update(item.read_bytes() if item.exists() else str(item).encode())
        else:
            h.update(json.dumps(item, sort_keys=True).encode())
        h.update(b"\x00")
    return h.hexdigest()


def _set_threads() -> None:
    n = os.environ.get("FLASHDISTILL_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError as e:
            raise ConfigError(f"FLASHDISTILL_THREADS must be an integer, got {n!r}") from e


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    group = p.add_argument_group("config overrides")
    for f in dataclasses.fields(TrainConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, default=None, metavar="V")


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, "cfg_" + f.name, None)
        if v is not None:
            out[f.name] = v
    return out


def _dataset(cfg: TrainConfig):
    path = Path(cfg.dataset_path)
    if not cfg.dataset_path or not path.exists():
        raise ConfigError(f"dataset file not found: {cfg.dataset_path!r}")
    return load_dataset(path)


def cmd_schedule(args) -> int:
    base = BaseSchedule(T=args.t)
    grid = make_grid(args.kind, args.n, base, args.rho)
    if args.out:
        write_grid_csv(grid, args.out)
    else:
        write_grid_csv(grid, sys.stdout)
    print(f"fraction t/T < 1e-3: {low_noise_fraction(grid, base.T):.4f}", file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_dataset(args) -> int:
    points = generate_dataset(ToyChemSpec(), args.n, (args.size_min, args.size_max), args.seed)
    save_dataset(points, args.out)
    print(metrics_json(compute_metrics(points)))
    return EXIT_OK


def _run_training(args, kind: str) -> int:
    cfg = load_config(args.config, _overrides(args))
    dataset = _dataset(cfg)
    out_dir = Path(cfg.out_dir)
    inputs = [cfg.to_dict(), Path(cfg.dataset_path)]
    if kind == "distill":
        if not args.teacher or not Path(args.teacher).exists():
            raise ConfigError(f"teacher checkpoint not found: {args.teacher!r}")
        inputs.append(Path(args.teacher))
    manifest = RunManifest(kind, cfg.to_dict(), content_hash(*inputs), cfg.seed, time.time())
    manifest.write(out_dir / "manifest.json")
    try:
        if kind == "teacher-train":
            log_path = out_dir / "teacher_log.jsonl"
            log_path.write_text("")

            def log(rec):
                with log_path.open("a") as fh:
                    fh.write(json.dumps(rec) + "\n")

            res = train_teacher(cfg, dataset, out_dir / "teacher.ckpt", log=log)
            manifest.outputs = [res.path, str(log_path)]
        else:
            teacher = load_net(args.teacher)
            grid = cfg.grid()

            def eval_fn(net, it):
                return evaluate(net, grid, cfg.k_target, cfg.eval_samples, dataset, seed=cfg.seed)

            res = distill(cfg, teacher, dataset, out_dir, eval_fn=eval_fn)
            manifest.outputs = [res.path, str(out_dir / "metrics.jsonl")]
            print(json.dumps({"skipped": res.skipped, "iters": cfg.max_iters}))
    except (NumericAbort, FloatingPointError):
        manifest.status, manifest.finished = "numeric_abort", time.time()
        manifest.write(out_dir / "manifest.json")
        raise
    manifest.status, manifest.finished = "ok", time.time()
    manifest.write(out_dir / "manifest.json")
    return EXIT_OK


def cmd_sample(args) -> int:
    net = load_net(args.ckpt)
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    grid = make_grid(args.grid, args.steps or args.k, net.base, args.rho)
    rng = NoiseStream(args.seed)
    if args.dataset:
        ds = load_dataset(args.dataset)
        counts = [ds[i].node_count for i in rng.choice(len(ds), args.n)]
    else:
        counts = [args.nodes] * args.n
    cond = None if args.cond is None else float(args.cond)
    if net.spec.cond_dim and cond is None:
        raise ConfigError("conditional checkpoint needs --cond")
    samples = sample_many(net, grid, len(grid) if args.method == "ddim" else args.k, counts, rng, args.method, cond)
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = load_dataset(args.dataset)
    if args.ckpt is None:
        rec = {**compute_metrics(dataset).to_dict(), "nfe": 0}
    else:
        net = load_net(args.ckpt)
        grid = make_grid(args.grid, args.k, net.base, args.rho)
        rec = evaluate(net, grid, args.k, args.n, dataset, seed=args.seed, method=args.method)
    print(json.dumps(rec, sort_keys=True))
    return EXIT_OK


def cmd_oracle(args) -> int:
    results = run_bridge_checks(iters=args.iters)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.value:.3e}  (tol {r.tolerance:.0e})")
    return EXIT_OK if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flashdistill", description="Few-step distillation of equivariant point-cloud diffusion.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", help="write a timestep grid as CSV")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--rho", type=float, default=2.25)
    p.add_argument("--t", type=int, default=1000)
    p.add_argument("--kind", choices=["respaced", "uniform"], default="respaced")
    p.add_argument("--out")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("dataset", help="generate a toy-molecule dataset file")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--size-min", type=int, default=3)
    p.add_argument("--size-max", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("teacher-train", help="train the multi-step teacher")
    _add_config_flags(p)
    p.set_defaults(func=lambda a: _run_training(a, "teacher-train"))

    p = sub.add_parser("distill", help="distil a teacher checkpoint into a few-step student")
    _add_config_flags(p)
    p.add_argument("--teacher", required=True)
    p.set_defaults(func=lambda a: _run_training(a, "distill"))

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--steps", type=int, default=0, help="grid length (defaults to --k)")
    p.add_argument("--grid", choices=["respaced", "uniform"], default="respaced")
    p.add_argument("--rho", type=float, default=2.25)
    p.add_argument("--method", choices=["consistency", "ddim"], default="consistency")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--nodes", type=int, default=5)
    p.add_argument("--dataset", help="draw node counts from this dataset")
    p.add_argument("--cond", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a checkpoint (or the dataset itself) with the toy metrics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--grid", choices=["respaced", "uniform"], default="respaced")
    p.add_argument("--rho", type=float, default=2.25)
    p.add_argument("--method", choices=["consistency", "ddim"], default="consistency")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="run the analytic bridge checks")
    p.add_argument("--iters", type=int, default=5000)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _set_threads()
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericAbort, FloatingPointError) as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
