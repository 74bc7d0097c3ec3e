"""Directional experiments on the toy molecule task.

Datasets, teachers, students and evaluation records are cached under an
artifact directory, keyed by a hash of the settings that produced them, so
finished runs are re-read instead of recomputed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .egnn import EpsNet
from .geom import NoiseStream
from .netgrad import load_checkpoint
from .schedule import make_grid
from .toymol import ToyChemSpec, generate_dataset, load_dataset, radius_of_gyration, save_dataset
from .trainer import DistillHooks, TrainConfig, distill, evaluate, load_net, molecule_cond, train_teacher

ARTIFACT_ENV = "FLASHDISTILL_ARTIFACTS"


def default_artifact_dir() -> Path:
    env = os.environ.get(ARTIFACT_ENV)
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "artifacts"


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    dataset_size: int = 2000
    dataset_seed: int = 0
    eval_samples: int = 300
    # networks and teacher
    t_total: int = 200
    layers: int = 4
    hidden: int = 32
    rbf_count: int = 16
    parametrization: str = "x0"
    attn_dim: int = 16
    batch_size: int = 64
    teacher_iters: int = 30000
    teacher_lr: float = 1e-3
    teacher_lr_min: float = 2e-5
    # distillation
    distill_iters: int = 300
    aux_steps: int = 5
    lr_scale: float = 100.0
    norm_scope: str = "sample"
    ema_decay: float = 0.99
    warmup_frac: float = 0.05
    # uniqueness/stability checkpoints along each run (10 evenly spaced)
    eval_every: int = 30
    trajectory_samples: int = 400

    def train_config(self, **overrides) -> TrainConfig:
        cfg = TrainConfig(
            t_total=self.t_total, layers=self.layers, hidden=self.hidden, rbf_count=self.rbf_count,
            parametrization=self.parametrization, attn_dim=self.attn_dim, batch_size=self.batch_size,
            teacher_iters=self.teacher_iters, teacher_lr=self.teacher_lr, teacher_lr_min=self.teacher_lr_min,
            max_iters=self.distill_iters, aux_steps=self.aux_steps, lr_scale=self.lr_scale,
            norm_scope=self.norm_scope, ema_decay=self.ema_decay, warmup_frac=self.warmup_frac,
            eval_every=self.eval_every,
            eval_samples=self.trajectory_samples, dataset_size=self.dataset_size,
        )
        return dataclasses.replace(cfg, **overrides)


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    detail: str
    values: dict = field(default_factory=dict)
    seconds: float = 0.0


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:12]


class ArtifactCache:
    """JSON records and checkpoints under one directory."""

    def __init__(self, root: str | Path | None = None, log: Callable[[str], None] | None = None):
        self.root = Path(root) if root is not None else default_artifact_dir()
        self.root.mkdir(parents=True, exist_ok=True)
        self.log = log or (lambda msg: None)

    def path(self, name: str) -> Path:
        return self.root / name

    def record(self, name: str, key: str, compute: Callable[[], dict]) -> dict:
        p = self.path(f"{name}-{key}.json")
        if p.exists():
            return json.loads(p.read_text())
        self.log(f"computing {name}")
        out = compute()
        p.write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
        return out


# --------------------------------------------------------------------------
# cached products


def dataset(cfg: ExperimentConfig, cache: ArtifactCache):
    p = cache.path(f"dataset-{_key(cfg.dataset_size, cfg.dataset_seed)}.xyz")
    if not p.exists():
        save_dataset(generate_dataset(ToyChemSpec(), cfg.dataset_size, (3, 7), cfg.dataset_seed), p)
    return load_dataset(p)


def _teacher_cfg(cfg: ExperimentConfig, conditional: bool) -> TrainConfig:
    return cfg.train_config(conditional=conditional, seed=1000)


def _teacher_key(cfg: ExperimentConfig, conditional: bool = False) -> str:
    keyed = {k: v for k, v in _teacher_cfg(cfg, conditional).to_dict().items() if k.startswith("teacher_") or k in
             ("layers", "hidden", "rbf_count", "parametrization", "batch_size", "conditional", "seed",
              "t_total", "dataset_size")}
    return _key(keyed, cfg.dataset_seed)


def _sampler_key(cfg: ExperimentConfig) -> str:
    """Key for evaluations of the untrained teacher: teacher plus sampling settings."""
    return _key(_teacher_key(cfg), list(cfg.seeds), cfg.eval_samples)


def teacher(cfg: ExperimentConfig, cache: ArtifactCache, conditional: bool = False) -> EpsNet:
    tcfg = _teacher_cfg(cfg, conditional)
    p = cache.path(f"teacher{'-cond' if conditional else ''}-{_teacher_key(cfg, conditional)}.ckpt")
    if not p.exists():
        cache.log(f"training {'conditional ' if conditional else ''}teacher -> {p.name}")
        t0 = time.time()
        train_teacher(tcfg, dataset(cfg, cache), p, log=lambda r: cache.log(f"  teacher {r}"), log_every=2000)
        cache.log(f"  teacher done in {time.time() - t0:.0f}s")
    return load_net(p)


def student(cfg: ExperimentConfig, cache: ArtifactCache, seed: int, lambda_js: float,
            conditional: bool = False, iters: int | None = None) -> tuple[EpsNet, list[dict]]:
    """Distilled EMA generator plus its per-iteration records."""
    dcfg = _teacher_cfg(cfg, conditional)
    dcfg = dataclasses.replace(dcfg, seed=seed, lambda_js=lambda_js, max_iters=iters or cfg.distill_iters)
    trained = {k: v for k, v in asdict(cfg).items() if k not in ("seeds", "eval_samples")}
    tag = _key(trained, seed, lambda_js, conditional, iters)
    out_dir = cache.path(f"student{'-cond' if conditional else ''}-{tag}")
    ckpt = out_dir / "student.ckpt"
    metrics = out_dir / "metrics.jsonl"
    if not (ckpt.exists() and metrics.exists() and load_checkpoint(ckpt)[0]["iter"] == dcfg.max_iters):
        tnet = teacher(cfg, cache, conditional)
        data = dataset(cfg, cache)
        grid = dcfg.grid()
        cache.log(f"distilling seed={seed} lambda_js={lambda_js} conditional={conditional} -> {out_dir.name}")
        t0 = time.time()

        def eval_fn(net, it):
            return evaluate(net, grid, dcfg.k_target, cfg.trajectory_samples, data, seed=10_000 + seed)

        def on_metrics(rec):
            if "eval" in rec:
                e = rec["eval"]
                cache.log(f"  it {rec['iter'] + 1}: mol_stab {e['mol_stab']:.3f} uniq {e['uniqueness']:.3f} "
                          f"({time.time() - t0:.0f}s)")

        distill(dcfg, tnet, data, out_dir, hooks=DistillHooks(on_metrics=on_metrics), eval_fn=eval_fn)
    records = [json.loads(line) for line in metrics.read_text().splitlines() if line.strip()]
    return load_net(ckpt), records


def stability(net: EpsNet, kind: str, n_steps: int, method: str, seed: int, cfg: ExperimentConfig,
              cache: ArtifactCache, rho: float = 2.25, K: int | None = None) -> dict:
    grid = make_grid(kind, n_steps, net.base, rho)
    return evaluate(net, grid, K or n_steps, cfg.eval_samples, dataset(cfg, cache), seed=seed, method=method)


def _mean(xs) -> float:
    return float(np.mean(xs))


# --------------------------------------------------------------------------
# criteria


def respacing_rescue(cfg: ExperimentConfig, cache: ArtifactCache) -> CriterionResult:
    """Untrained 4-step respaced consistency sampling against 4-step uniform DDIM."""
    def compute():
        net = teacher(cfg, cache)
        rows = []
        for s in cfg.seeds:
            rows.append({
                "seed": s,
                "teacher_ddim64": stability(net, "uniform", 64, "ddim", s, cfg, cache)["mol_stab"],
                "respaced4": stability(net, "respaced", 4, "consistency", s, cfg, cache)["mol_stab"],
                "uniform_ddim4": stability(net, "uniform", 4, "ddim", s, cfg, cache)["mol_stab"],
            })
        return {"rows": rows}

    rows = cache.record("respacing", _sampler_key(cfg), compute)["rows"]
    t64 = _mean([r["teacher_ddim64"] for r in rows])
    r4 = _mean([r["respaced4"] for r in rows])
    u4 = _mean([r["uniform_ddim4"] for r in rows])
    ok = t64 >= 0.90 and r4 - u4 >= 0.15
    detail = f"teacher 64-step {t64:.3f}, respaced 4-step {r4:.3f} vs uniform DDIM 4-step {u4:.3f} (gap {100 * (r4 - u4):.1f} pts)"
    return CriterionResult(7, "respacing rescues few-step sampling", ok, detail,
                           {"teacher64": t64, "respaced4": r4, "uniform4": u4, "rows": rows})


def distillation_lift(cfg: ExperimentConfig, cache: ArtifactCache) -> CriterionResult:
    """Distilled 4-step students against the untrained respaced baseline and the teacher."""
    base_rows = respacing_rescue(cfg, cache).values["rows"]

    def compute():
        rows = []
        for s in cfg.seeds:
            net, _ = student(cfg, cache, s, 0.1)
            rows.append({"seed": s, **stability(net, "respaced", 4, "consistency", s, cfg, cache)})
        return {"rows": rows}

    rows = cache.record("distill", _key(asdict(cfg)), compute)["rows"]
    st = _mean([r["mol_stab"] for r in rows])
    r4 = _mean([r["respaced4"] for r in base_rows])
    t64 = _mean([r["teacher_ddim64"] for r in base_rows])
    ok = st >= r4 + 0.20 and st >= t64 - 0.10
    detail = f"student 4-step {st:.3f}, untrained respaced 4-step {r4:.3f}, teacher 64-step {t64:.3f}"
    return CriterionResult(8, "distillation lifts few-step quality", ok, detail,
                           {"student4": st, "respaced4": r4, "teacher64": t64, "rows": rows})


def _violations(values: list[float], tol: float = 1e-12) -> int:
    return sum(1 for a, b in zip(values, values[1:]) if b > a + tol)


def js_diversity(cfg: ExperimentConfig, cache: ArtifactCache) -> CriterionResult:
    """lambda_js = 0.1 against pure reverse KL at the final iteration."""
    def compute():
        rows = []
        for s in cfg.seeds:
            row = {"seed": s}
            for lam, tag in ((0.1, "js"), (0.0, "dmd")):
                net, recs = student(cfg, cache, s, lam)
                m = stability(net, "respaced", 4, "consistency", s, cfg, cache)
                row[tag] = {"mol_stab": m["mol_stab"], "valid_unique": m["valid_unique"], "uniqueness": m["uniqueness"]}
                warm = int(np.ceil(cfg.warmup_frac * cfg.distill_iters))
                traj = [r["eval"]["uniqueness"] for r in recs if "eval" in r and r["iter"] >= warm]
                row[tag]["uniqueness_trajectory"] = traj
            rows.append(row)
        return {"rows": rows}

    rows = cache.record("js", _key(asdict(cfg)), compute)["rows"]
    vu_js = _mean([r["js"]["valid_unique"] for r in rows])
    vu_dmd = _mean([r["dmd"]["valid_unique"] for r in rows])
    st_js = _mean([r["js"]["mol_stab"] for r in rows])
    st_dmd = _mean([r["dmd"]["mol_stab"] for r in rows])
    viol = [_violations(r["dmd"]["uniqueness_trajectory"]) for r in rows]
    ok = vu_js >= vu_dmd and abs(st_js - st_dmd) <= 0.03 and max(viol) <= 1
    detail = (f"V&U js {vu_js:.4f} vs dmd {vu_dmd:.4f}, stability js {st_js:.3f} vs dmd {st_dmd:.3f}, "
              f"dmd uniqueness increases per run {viol}")
    return CriterionResult(9, "JS regularisation and diversity", ok, detail,
                           {"vu_js": vu_js, "vu_dmd": vu_dmd, "stab_js": st_js, "stab_dmd": st_dmd,
                            "violations": viol, "rows": rows})


def rho_sensitivity(cfg: ExperimentConfig, cache: ArtifactCache) -> CriterionResult:
    def compute():
        net = teacher(cfg, cache)
        rows = []
        for s in cfg.seeds:
            rows.append({
                "seed": s,
                "rho2.25": stability(net, "respaced", 8, "consistency", s, cfg, cache, rho=2.25)["mol_stab"],
                "rho5": stability(net, "respaced", 8, "consistency", s, cfg, cache, rho=5.0)["mol_stab"],
            })
        return {"rows": rows}

    rows = cache.record("rho", _sampler_key(cfg), compute)["rows"]
    a = _mean([r["rho2.25"] for r in rows])
    b = _mean([r["rho5"] for r in rows])
    ok = a - b >= 0.10
    detail = f"untrained 8-step stability rho=2.25 {a:.3f} vs rho=5 {b:.3f} (gap {100 * (a - b):.1f} pts)"
    return CriterionResult(10, "rho sensitivity", ok, detail, {"rho2.25": a, "rho5": b, "rows": rows})


def conditional_mae(net: EpsNet, targets: np.ndarray, counts: list[int], seed: int, cond: bool) -> float:
    from .diffusion import sample_many

    grid = make_grid("respaced", 4, net.base)
    samples = sample_many(net, grid, 4, counts, NoiseStream(seed), "consistency", targets if cond else None)
    rg = np.array([radius_of_gyration(p) for p in samples])
    return float(np.abs(rg - targets).mean())


def conditional_plumbing(cfg: ExperimentConfig, cache: ArtifactCache) -> CriterionResult:
    """Radius-of-gyration conditioned student against the unconditional one on the same targets."""
    def compute():
        # targets from a held-out draw of the same generator
        held = generate_dataset(ToyChemSpec(), cfg.eval_samples, (3, 7), 4242)
        targets = molecule_cond(held)
        counts = [p.node_count for p in held]
        cond_net, _ = student(cfg, cache, cfg.seeds[0], 0.1, conditional=True)
        plain_net, _ = student(cfg, cache, cfg.seeds[0], 0.1)
        return {
            "cond_mae": conditional_mae(cond_net, targets, counts, 5, True),
            "uncond_mae": conditional_mae(plain_net, targets, counts, 5, False),
            "n": len(targets),
        }

    rec = cache.record("conditional", _key(asdict(cfg)), compute)
    ok = rec["cond_mae"] < rec["uncond_mae"]
    detail = f"Rg MAE conditional {rec['cond_mae']:.3f} vs unconditional {rec['uncond_mae']:.3f} over {rec['n']} targets"
    return CriterionResult(11, "conditional plumbing", ok, detail, rec)


CRITERIA: dict[int, Callable[[ExperimentConfig, ArtifactCache], CriterionResult]] = {
    7: respacing_rescue,
    8: distillation_lift,
    9: js_diversity,
    10: rho_sensitivity,
    11: conditional_plumbing,
}


def run_criterion(number: int, cfg: ExperimentConfig | None = None, cache: ArtifactCache | None = None) -> CriterionResult:
    cfg = cfg or ExperimentConfig()
    cache = cache or ArtifactCache()
    t0 = time.time()
    res = CRITERIA[number](cfg, cache)
    res.seconds = time.time() - t0
    return res
