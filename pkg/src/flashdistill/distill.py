"""Distribution-matching gradients for the few-step generator.

The generator gradient is realised through a surrogate loss

    0.5 * || x - stopgrad(x - eta * w * (s_fake - s_real)) ||^2

whose parameter gradient is ``eta * w * (s_fake - s_real) . dx/dtheta``.
``w`` is the per-sample f-divergence weight f''(r) r^2 (1 for reverse KL),
optionally mixed with a Jensen-Shannon term.

Models are duck-typed so analytic oracles can stand in for networks:

* generator: ``.params`` (ParamVector) and ``.x0(z, t, cond, values)``
* score models: ``.eps(batch, t, cond)`` returning an EpsOut
* discriminator: ``.prob(noisy, t, fake_out, cond)`` returning (B,) probabilities
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .egnn import eps_to_score
from .geom import DTYPE, Batch, NoiseStream, project_batch
from .netgrad import GradReport
from .schedule import BaseSchedule, NoiseGrid

KINDS = ("reverse_kl", "forward_kl", "js")
PROB_CLAMP = 1e-4


@dataclass(frozen=True)
class DivergenceSpec:
    kind: str = "reverse_kl"
    lambda_js: float = 0.1
    ratio_clamp: tuple[float, float] = (1e-3, 1e3)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown divergence {self.kind!r}")
        lo, hi = self.ratio_clamp
        if not 0 < lo < hi:
            raise ValueError("ratio clamp must satisfy 0 < r_min < r_max")
        if not (np.isfinite(self.lambda_js) and self.lambda_js >= 0):
            raise ValueError("lambda_js must be finite and >= 0")

    @property
    def needs_disc(self) -> bool:
        return self.kind != "reverse_kl" or self.lambda_js > 0


def fdiv_weight(kind: str, r):
    """h(r) = f''(r) r^2 for the supported f-divergences."""
    if kind == "reverse_kl":
        return r * 0 + 1 if isinstance(r, (np.ndarray, torch.Tensor)) else 1.0
    if kind == "forward_kl":
        return r
    if kind == "js":
        return r / (r + 1)
    raise ValueError(f"unknown divergence {kind!r}")


def ratio_from_disc(p, ratio_clamp: tuple[float, float] = (1e-3, 1e3)):
    """Density ratio p_real/p_fake estimated as D / (1 - D), both sides clamped."""
    lo, hi = ratio_clamp
    if isinstance(p, torch.Tensor):
        p = p.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
        return (p / (1 - p)).clamp(lo, hi)
    p = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    r = np.clip(p / (1 - p), lo, hi)
    return float(r) if np.ndim(r) == 0 else r


@dataclass
class SurrogateRecord:
    """Everything needed to re-evaluate the surrogate loss with the target frozen."""

    z_final: Batch
    t_final: int
    target: Batch
    cond: torch.Tensor | None


@dataclass
class DistillGrad:
    gen_grad: GradReport
    diagnostics: dict = field(default_factory=dict)
    surrogate: SurrogateRecord | None = None


def surrogate_loss(gen, values: torch.Tensor, rec: SurrogateRecord) -> torch.Tensor:
    x = gen.x0(rec.z_final, rec.t_final, rec.cond, values)
    diff = (x.x - rec.target.x) ** 2
    diffh = (x.h - rec.target.h) ** 2
    return 0.5 * (diff.sum((1, 2)) + diffh.sum((1, 2))).mean()


def _cond(cond, size):
    if cond is None:
        return None
    return torch.as_tensor(np.broadcast_to(np.asarray(cond, dtype=np.float64), (size,)).copy(), dtype=DTYPE)


def rollout(gen, grid: NoiseGrid, K: int, z: Batch, rng: NoiseStream, cond=None) -> tuple[Batch, int]:
    """Run the first K-1 consistency steps without gradient.

    Returns the re-noised state fed to the final generator application and
    the grid timestep of that application.
    """
    if K < 1 or K > len(grid):
        raise ValueError(f"K={K} must lie in [1, {len(grid)}]")
    with torch.no_grad():
        for k in range(K - 1):
            x = gen.x0(z, grid[k].t, cond)
            nxt = grid[k + 1]
            z = project_batch(x.scale(nxt.alpha) + rng.normal_like(x).scale(nxt.sigma))
    return z, grid[K - 1].t


def dmd_step(
    gen,
    mu_real,
    mu_fake,
    disc,
    spec: DivergenceSpec,
    batch_z: Batch,
    grid: NoiseGrid,
    K: int,
    base: BaseSchedule,
    rng: NoiseStream,
    *,
    cond=None,
    t=None,
    t_range: tuple[float, float] = (0.02, 0.98),
    normalize: bool = True,
    weighting: str = "x0",
    norm_scope: str = "batch",
) -> DistillGrad:
    """One generator gradient.

    ``weighting="x0"`` multiplies the score gap by sigma_t^2 / alpha_t, i.e.
    works with the difference of x0 estimates; ``"score"`` uses the raw
    score gap.  ``normalize`` divides by the batch RMS distance between the
    generated x and the teacher's x0 estimate (RMS rather than mean-abs so
    the scale is rotation invariant); ``norm_scope="sample"`` takes that RMS
    per sample instead, so high-noise samples do not set the step size of
    low-noise ones.  ``t`` pins the noise step
    (scalar or per-sample) instead of sampling it.
    """
    if spec.needs_disc and disc is None:
        raise ValueError(f"divergence {spec.kind!r} with lambda_js={spec.lambda_js} needs a discriminator")
    if weighting not in ("x0", "score"):
        raise ValueError(f"unknown weighting {weighting!r}")
    if norm_scope not in ("batch", "sample"):
        raise ValueError(f"unknown norm_scope {norm_scope!r}")
    B = batch_z.size
    c = _cond(cond, B)
    z_final, t_final = rollout(gen, grid, K, batch_z, rng, c)

    values = gen.params.values.detach().clone().requires_grad_(True)
    x = gen.x0(z_final, t_final, c, values)
    xd = x.detach()

    if t is None:
        lo = int(np.floor(t_range[0] * base.T + 0.5))
        hi = int(np.floor(t_range[1] * base.T + 0.5))
        t_arr = rng.integers(lo, hi, B)
    else:
        t_arr = np.broadcast_to(np.asarray(t), (B,)).copy()
    alpha, sigma = base.alpha_sigma_torch(t_arr)
    t_tensor = torch.as_tensor(t_arr)
    noisy = project_batch(xd.scale(alpha) + rng.normal_like(xd).scale(sigma))

    with torch.no_grad():
        out_real = mu_real.eps(noisy, t_tensor, c)
        out_fake = mu_fake.eps(noisy, t_tensor, c)
        s_real = eps_to_score(out_real, sigma)
        s_fake = eps_to_score(out_fake, sigma)
        gap = (s_fake - s_real) * noisy.mask.unsqueeze(-1)
        if not torch.isfinite(gap).all():
            bad = sorted({int(t_arr[b]) for b in range(B) if not torch.isfinite(gap[b]).all()})
            raise FloatingPointError(f"non-finite score difference at t={bad}")

        if spec.kind == "reverse_kl":
            w = torch.ones(B, dtype=DTYPE)
        if spec.needs_disc:
            p = disc.prob(noisy, t_tensor, out_fake, c).detach()
            r = ratio_from_disc(p, spec.ratio_clamp)
            if spec.kind == "reverse_kl":
                w = w + spec.lambda_js * fdiv_weight("js", r)
            else:
                w = fdiv_weight(spec.kind, r)

        if weighting == "x0":
            gap = gap * (sigma ** 2 / alpha).view(B, 1, 1)
        if normalize:
            x_real = (noisy.flat() - sigma.view(B, 1, 1) * torch.cat([out_real.eps_x, out_real.eps_h], -1)) / alpha.view(B, 1, 1)
            resid = (xd.flat() - x_real) * noisy.mask.unsqueeze(-1)
            width = xd.flat().shape[-1]
            if norm_scope == "batch":
                rms = torch.sqrt((resid ** 2).sum() / (noisy.node_counts.sum() * width))
                eta = torch.full((B,), 1.0 / float(rms.clamp(min=1e-12)), dtype=DTYPE)
            else:
                rms = torch.sqrt((resid ** 2).sum((1, 2)) / (noisy.node_counts * width))
                eta = 1.0 / rms.clamp(min=1e-12)
        else:
            eta = torch.ones(B, dtype=DTYPE)
        step = gap * (eta * w).view(B, 1, 1)
        d = xd.x.shape[-1]
        target = Batch(xd.x - step[..., :d], xd.h - step[..., d:], xd.mask)

    rec = SurrogateRecord(z_final, t_final, target, c)
    loss = surrogate_loss(gen, values, rec)
    (grad,) = torch.autograd.grad(loss, values, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(values)
    diagnostics = {
        "mean_score_gap": float((s_real - s_fake).flatten(1).norm(dim=1).mean()),
        "mean_weight": float(w.mean()),
        "t_mean": float(np.mean(t_arr)),
        "t_values": t_arr.tolist(),
        "eta": float(eta.mean()),
    }
    return DistillGrad(GradReport(float(loss.detach()), grad.detach(), dict(gen.params.layout)), diagnostics, rec)
