"""Teacher training, the distillation loop, and evaluation.

One distillation iteration runs, in order: a student rollout on the target
grid, ``aux_steps`` updates of the fake-score net and the discriminator, one
generator update from the distribution-matching gradient, and an EMA update
of the generator.  During the warmup fraction only the auxiliary networks
train.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .diffusion import consistency_sample_batch, corrupt_batch, eps_loss_tensor, sample_many, sample_train_t
from .disc import DiscSpec, Discriminator, gan_losses, init_disc_params
from .distill import DivergenceSpec, dmd_step
from .egnn import EpsNet, NetSpec, init_params
from .geom import Batch, NoiseStream, PointSet, split_seed
from .netgrad import ParamVector, load_checkpoint, save_checkpoint
from .schedule import BaseSchedule, NoiseGrid, make_grid
from .toymol import ToyChemSpec, compute_metrics, radius_of_gyration

BASE_LRS = (8e-7, 3.2e-6, 1.6e-4)
MAX_CONSECUTIVE_SKIPS = 10


class ConfigError(ValueError):
    pass


class NumericAbort(FloatingPointError):
    def __init__(self, message: str, last_good: str | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    seed: int = 0
    t_total: int = 1000
    grid_kind: str = "respaced"
    rho: float = 2.25
    k_target: int = 4
    k_curriculum: tuple[int, ...] = (1, 2, 3, 4)
    rollout_floor: int = 1
    lr_scale: float = 1.0
    lambda_js: float = 0.1
    divergence: str = "reverse_kl"
    batch_size: int = 64
    max_iters: int = 1000
    aux_steps: int = 5
    ema_decay: float = 0.9999
    r1_weight: float = 1e-3
    r1_sigma: float = 0.01
    gan_coeff: float = 0.2
    dataset_path: str = ""
    out_dir: str = "runs/default"
    # networks
    layers: int = 4
    hidden: int = 32
    attn_dim: int = 16
    conditional: bool = False
    parametrization: str = "x0"
    rbf_count: int = 16
    # teacher
    teacher_iters: int = 20000
    teacher_lr: float = 1e-3
    teacher_lr_min: float = 2e-5
    teacher_ema: float = 0.999
    # loop details
    warmup_frac: float = 0.05
    normalize: bool = True
    norm_scope: str = "batch"
    weighting: str = "x0"
    ckpt_every: int = 0
    eval_every: int = 0
    eval_samples: int = 200
    dataset_size: int = 2000
    size_min: int = 3
    size_max: int = 7

    def __post_init__(self):
        self.k_curriculum = tuple(int(k) for k in self.k_curriculum)
        if self.lr_scale <= 0 or self.teacher_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.teacher_lr_min <= self.teacher_lr:
            raise ConfigError("teacher_lr_min must lie in [0, teacher_lr]")
        if not 0 < self.ema_decay < 1 or not 0 < self.teacher_ema < 1:
            raise ConfigError("EMA decays must lie in (0, 1)")
        if not self.k_curriculum:
            raise ConfigError("k_curriculum must be non-empty")
        if min(self.k_curriculum) < 1 or max(self.k_curriculum) > self.k_target:
            raise ConfigError(f"k_curriculum must lie in [1, k_target={self.k_target}]")
        if not any(k >= self.rollout_floor for k in self.k_curriculum):
            raise ConfigError("rollout_floor excludes every curriculum entry")
        if self.batch_size < 1 or self.max_iters < 0 or self.aux_steps < 0:
            raise ConfigError("batch_size, max_iters and aux_steps must be non-negative (batch >= 1)")
        if self.grid_kind not in ("respaced", "uniform"):
            raise ConfigError(f"unknown grid_kind {self.grid_kind!r}")
        if self.parametrization not in ("x0", "v", "eps") or self.rbf_count < 0:
            raise ConfigError("parametrization must be x0/v/eps and rbf_count >= 0")
        if self.norm_scope not in ("batch", "sample"):
            raise ConfigError(f"unknown norm_scope {self.norm_scope!r}")
        if self.weighting not in ("x0", "score"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")
        try:
            self.divergence_spec()
            self.disc_spec()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @property
    def lrs(self) -> tuple[float, float, float]:
        """(generator, fake score, discriminator) learning rates."""
        return tuple(self.lr_scale * lr for lr in BASE_LRS)

    def divergence_spec(self) -> DivergenceSpec:
        return DivergenceSpec(kind=self.divergence, lambda_js=self.lambda_js)

    def disc_spec(self) -> DiscSpec:
        taps = tuple(range(1, self.layers))[-3:] if self.layers >= 4 else (0, 1, 2)
        return DiscSpec(tap_layers=taps, attn_dim=self.attn_dim, r1_weight=self.r1_weight,
                        r1_sigma=self.r1_sigma, gan_backbone_coeff=self.gan_coeff)

    def net_spec(self) -> NetSpec:
        return NetSpec(layers=self.layers, hidden=self.hidden, feat_dim=ToyChemSpec().feat_dim,
                       cond_dim=1 if self.conditional else 0, parametrization=self.parametrization,
                       rbf_count=self.rbf_count)

    def base(self) -> BaseSchedule:
        return BaseSchedule(T=self.t_total)

    def grid(self) -> NoiseGrid:
        return make_grid(self.grid_kind, self.k_target, self.base(), self.rho)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_curriculum"] = list(self.k_curriculum)
        return d


REQUIRED_KEYS = (
    "seed", "t_total", "grid_kind", "rho", "k_target", "k_curriculum", "lr_scale", "lambda_js",
    "divergence", "batch_size", "max_iters", "aux_steps", "ema_decay", "r1_weight", "r1_sigma",
    "gan_coeff", "dataset_path", "out_dir",
)


def _parse_ints(text: str) -> tuple[int, ...]:
    text = text.strip().strip("{}[]()")
    if ".." in text:
        lo, hi = text.split("..")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(p) for p in text.replace(" ", "").split(",") if p)


def _coerce(name: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    if name not in fields:
        raise ConfigError(f"unknown config key {name!r}")
    kind = fields[name].type
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return _parse_ints(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {raw!r}") from e


def parse_config(text: str, overrides: dict | None = None, require_all: bool = False) -> TrainConfig:
    """Flat ``key = value`` text (``#`` comments) plus string overrides."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, raw)
    if require_all:
        missing = [k for k in REQUIRED_KEYS if k not in values]
        if missing:
            raise ConfigError(f"missing required keys: {', '.join(missing)}")
    for key, raw in (overrides or {}).items():
        values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    return TrainConfig(**values)


def load_config(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, overrides, require_all=True)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# helpers


def molecule_cond(points: Sequence[PointSet]) -> np.ndarray:
    """Per-molecule conditioning value: radius of gyration."""
    return np.array([radius_of_gyration(p) for p in points])


@dataclass
class _Adam:
    """Adam on one flat tensor; the tensor is updated in place."""

    values: torch.Tensor
    lr: float

    def __post_init__(self):
        self.leaf = self.values.detach().clone().requires_grad_(True)
        self.values = self.leaf.detach()
        self.opt = torch.optim.Adam([self.leaf], lr=self.lr, betas=(0.9, 0.999))

    def set_lr(self, lr: float) -> None:
        for group in self.opt.param_groups:
            group["lr"] = lr

    def step(self, grad: torch.Tensor) -> None:
        self.leaf.grad = grad.detach().clone()
        self.opt.step()
        self.opt.zero_grad(set_to_none=True)


def cosine_lr(it: int, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay from lr_max at it=0 to lr_min at it=total."""
    if total <= 1:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * it / (total - 1)))


def _ema_update(ema: torch.Tensor, values: torch.Tensor, decay: float) -> None:
    ema.mul_(decay).add_(values, alpha=1.0 - decay)


def _sample_batch(data: Sequence[PointSet], conds: np.ndarray | None, size: int, rng: NoiseStream):
    idx = rng.choice(len(data), size)
    batch = Batch.from_pointsets([data[i] for i in idx])
    return batch, None if conds is None else conds[idx]


# --------------------------------------------------------------------------
# teacher


@dataclass
class TeacherResult:
    spec: NetSpec
    params: ParamVector
    losses: list[float]
    path: str | None = None


def train_teacher(
    cfg: TrainConfig,
    dataset: Sequence[PointSet],
    out_path: str | Path | None = None,
    log: Callable[[dict], None] | None = None,
    log_every: int = 500,
) -> TeacherResult:
    """Adam with cosine learning-rate decay on the epsilon loss; the saved parameters are the EMA weights."""
    if not dataset:
        raise ValueError("empty dataset")
    seeds = split_seed(cfg.seed, ["data", "corruption", "init"])
    spec = cfg.net_spec()
    base = cfg.base()
    params = init_params(spec, seeds["init"])
    opt = _Adam(params.values, cfg.teacher_lr)
    ema = opt.values.clone()
    data_rng, noise_rng = NoiseStream(seeds["data"]), NoiseStream(seeds["corruption"])
    conds = molecule_cond(dataset) if spec.cond_dim else None
    losses: list[float] = []
    last_good: str | None = None
    header = {"kind": "teacher", "spec": spec.to_dict(), "config": cfg.to_dict()}
    for it in range(cfg.teacher_iters):
        batch, c = _sample_batch(dataset, conds, cfg.batch_size, data_rng)
        noisy = corrupt_batch(batch, sample_train_t(batch.size, base, noise_rng), base, noise_rng)
        v = opt.leaf
        loss = eps_loss_tensor(spec, v, params, batch, base, noisy, None if c is None else torch.as_tensor(c))
        if not torch.isfinite(loss):
            raise NumericAbort(f"non-finite teacher loss at iteration {it}", last_good)
        (g,) = torch.autograd.grad(loss, v)
        opt.set_lr(cosine_lr(it, cfg.teacher_iters, cfg.teacher_lr, cfg.teacher_lr_min))
        opt.step(g)
        _ema_update(ema, opt.values, cfg.teacher_ema)
        losses.append(float(loss.detach()))
        if log is not None and (it % log_every == 0 or it == cfg.teacher_iters - 1):
            log({"iter": it, "loss": losses[-1]})
        if out_path is not None and cfg.ckpt_every and (it + 1) % cfg.ckpt_every == 0:
            save_checkpoint(out_path, {**header, "iter": it + 1}, {"params": params.with_values(ema), "raw": params.with_values(opt.values)})
            last_good = str(out_path)
    final = params.with_values(ema)
    if out_path is not None:
        save_checkpoint(out_path, {**header, "iter": cfg.teacher_iters}, {"params": final, "raw": params.with_values(opt.values)})
    return TeacherResult(spec, final, losses, None if out_path is None else str(out_path))


def load_net(path: str | Path, key: str = "params", base: BaseSchedule | None = None) -> EpsNet:
    header, vectors = load_checkpoint(path)
    spec = NetSpec(**header["spec"])
    base = base or BaseSchedule(T=header["config"]["t_total"])
    return EpsNet(spec, vectors[key], base)


# --------------------------------------------------------------------------
# distillation


@dataclass
class DistillResult:
    spec: NetSpec
    ema_gen: ParamVector
    gen: ParamVector
    metrics: list[dict]
    skipped: int
    path: str | None = None


@dataclass
class DistillHooks:
    """Optional callbacks; ``on_event(name, iteration)`` sees "aux" and "gen" updates in order."""

    on_event: Callable[[str, int], None] | None = None
    on_metrics: Callable[[dict], None] | None = None


def _node_counts(dataset, conds, n, rng):
    idx = rng.choice(len(dataset), n)
    counts = [dataset[i].node_count for i in idx]
    return counts, None if conds is None else conds[idx]


def distill(
    cfg: TrainConfig,
    teacher: EpsNet,
    dataset: Sequence[PointSet],
    out_dir: str | Path | None = None,
    hooks: DistillHooks | None = None,
    eval_fn: Callable[[EpsNet, int], dict] | None = None,
) -> DistillResult:
    """Distil ``teacher`` into a few-step generator; student and fake-score nets start as copies."""
    if not dataset:
        raise ValueError("empty dataset")
    hooks = hooks or DistillHooks()
    seeds = split_seed(cfg.seed, ["data", "rollout", "corruption", "init"])
    data_rng = NoiseStream(seeds["data"])
    roll_rng = NoiseStream(seeds["rollout"])
    noise_rng = NoiseStream(seeds["corruption"])
    base = teacher.base
    spec = teacher.spec
    grid = make_grid(cfg.grid_kind, cfg.k_target, base, cfg.rho)
    dspec = cfg.disc_spec()
    dspec.check_backbone(spec.layers)
    div = cfg.divergence_spec()
    lr_gen, lr_fake, lr_disc = cfg.lrs
    conds = molecule_cond(dataset) if spec.cond_dim else None

    gen_opt = _Adam(teacher.params.values, lr_gen)
    fake_opt = _Adam(teacher.params.values, lr_fake)
    disc_opt = _Adam(init_disc_params(dspec, spec.hidden, seeds["init"]).values, lr_disc)
    layout = teacher.params
    disc_layout = init_disc_params(dspec, spec.hidden, 0)
    gen = EpsNet(spec, layout.with_values(gen_opt.values), base)
    gen.params.values = gen_opt.values
    mu_fake = EpsNet(spec, layout.with_values(fake_opt.values), base)
    mu_fake.params.values = fake_opt.values
    disc = Discriminator(dspec, disc_layout.with_values(disc_opt.values))
    disc.params.values = disc_opt.values
    ema = gen_opt.values.clone()

    choices = [k for k in cfg.k_curriculum if k >= cfg.rollout_floor]
    warmup = int(math.ceil(cfg.warmup_frac * cfg.max_iters))
    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("")
    header = {"kind": "student", "spec": spec.to_dict(), "config": cfg.to_dict(), "disc": asdict(dspec)}

    def save(it):
        if out_dir is None:
            return
        save_checkpoint(out_dir / "student.ckpt", {**header, "iter": it}, {
            "params": layout.with_values(ema), "gen": layout.with_values(gen_opt.values),
            "mu_fake": layout.with_values(fake_opt.values), "disc": disc_layout.with_values(disc_opt.values),
        })

    records: list[dict] = []
    skipped = consecutive = 0
    for it in range(cfg.max_iters):
        K = int(choices[int(data_rng.integers(0, len(choices) - 1, 1)[0])])
        counts, c_fake = _node_counts(dataset, conds, cfg.batch_size, data_rng)
        fake_batch = consistency_sample_batch(gen, grid, K, counts, roll_rng, c_fake)

        fake_losses, disc_losses, r1s, p_reals, p_fakes = [], [], [], [], []
        for _ in range(cfg.aux_steps):
            noisy = corrupt_batch(fake_batch, sample_train_t(fake_batch.size, base, noise_rng), base, noise_rng)
            v = fake_opt.leaf
            c_t = None if c_fake is None else torch.as_tensor(c_fake)
            loss = eps_loss_tensor(spec, v, layout, fake_batch, base, noisy, c_t)
            (g_fake,) = torch.autograd.grad(loss, v)
            real_batch, c_real = _sample_batch(dataset, conds, fake_batch.size, data_rng)
            gan = gan_losses(disc, mu_fake, real_batch, fake_batch, base, noise_rng, c_real, c_fake)
            fake_opt.step(g_fake + gan.backbone_grad.grad)
            disc_opt.step(gan.disc_grad.grad)
            fake_losses.append(float(loss.detach()))
            disc_losses.append(gan.disc_loss)
            r1s.append(gan.r1)
            p_reals.append(gan.p_real_mean)
            p_fakes.append(gan.p_fake_mean)
            if hooks.on_event:
                hooks.on_event("aux", it)

        rec = {"iter": it, "k_sampled": K, "fake_loss": float(np.mean(fake_losses)) if fake_losses else None,
               "disc_loss": float(np.mean(disc_losses)) if disc_losses else None,
               "r1": float(np.mean(r1s)) if r1s else None,
               "p_real_mean": float(np.mean(p_reals)) if p_reals else None,
               "p_fake_mean": float(np.mean(p_fakes)) if p_fakes else None,
               "dmd_grad_norm": None, "mean_weight": None, "mean_score_gap": None, "t_mean": None,
               "warmup": it < warmup, "skipped": False}
        if it >= warmup:
            z_counts, c_gen = _node_counts(dataset, conds, cfg.batch_size, data_rng)
            z = roll_rng.prior(z_counts, spec.feat_dim)
            try:
                res = dmd_step(gen, teacher, mu_fake, disc, div, z, grid, K, base, noise_rng,
                               cond=c_gen, normalize=cfg.normalize, weighting=cfg.weighting,
                               norm_scope=cfg.norm_scope)
                grad = res.gen_grad.grad
                if not torch.isfinite(grad).all():
                    raise FloatingPointError("non-finite generator gradient")
            except FloatingPointError:
                skipped += 1
                consecutive += 1
                rec["skipped"] = True
                if consecutive >= MAX_CONSECUTIVE_SKIPS:
                    save(it)
                    raise NumericAbort(f"{consecutive} consecutive non-finite generator gradients at iteration {it}",
                                       None if out_dir is None else str(out_dir / "student.ckpt"))
            else:
                consecutive = 0
                gen_opt.step(grad)
                rec.update(dmd_grad_norm=float(grad.norm()), mean_weight=res.diagnostics["mean_weight"],
                           mean_score_gap=res.diagnostics["mean_score_gap"], t_mean=res.diagnostics["t_mean"])
                if hooks.on_event:
                    hooks.on_event("gen", it)
        _ema_update(ema, gen_opt.values, cfg.ema_decay)

        if eval_fn is not None and cfg.eval_every and ((it + 1) % cfg.eval_every == 0 or it + 1 == cfg.max_iters):
            rec["eval"] = eval_fn(EpsNet(spec, layout.with_values(ema), base), it)
        records.append(rec)
        if metrics_path is not None:
            with metrics_path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if hooks.on_metrics:
            hooks.on_metrics(rec)
        if cfg.ckpt_every and (it + 1) % cfg.ckpt_every == 0:
            save(it + 1)
    save(cfg.max_iters)
    return DistillResult(spec, layout.with_values(ema), layout.with_values(gen_opt.values), records, skipped,
                         None if out_dir is None else str(out_dir / "student.ckpt"))


# --------------------------------------------------------------------------
# evaluation


def evaluate(
    net: EpsNet,
    grid: NoiseGrid,
    K: int,
    n_samples: int,
    dataset: Sequence[PointSet],
    seed: int = 0,
    method: str = "consistency",
    chem: ToyChemSpec | None = None,
    cond=None,
) -> dict:
    """Sample ``n_samples`` molecules (sizes drawn from the dataset) and score them."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = NoiseStream(seed)
    idx = rng.choice(len(dataset), n_samples)
    counts = [dataset[i].node_count for i in idx]
    if cond is None and net.spec.cond_dim:
        cond = molecule_cond([dataset[i] for i in idx])
    samples = sample_many(net, grid, K, counts, rng, method, cond)
    m = compute_metrics(samples, chem)
    return {**m.to_dict(), "nfe": K}
