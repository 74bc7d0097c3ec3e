"""Forward corruption, epsilon loss, DDIM teacher sampling, consistency sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .egnn import EpsNet, NetSpec, forward_batch
from .geom import DTYPE, Batch, NoiseStream, PointSet, project_batch
from .netgrad import GradReport, ParamVector, value_and_grad
from .schedule import BaseSchedule, NoiseGrid

StepHook = Callable[[int, Batch], None]


@dataclass
class CorruptedSample:
    noisy: Batch
    eps: Batch
    t: torch.Tensor
    alpha: torch.Tensor
    sigma: torch.Tensor


def corrupt_batch(batch: Batch, t, base: BaseSchedule, rng: NoiseStream) -> CorruptedSample:
    """z_t = alpha_t x + sigma_t eps with zero-COM coordinate noise."""
    t = np.broadcast_to(np.asarray(t), (batch.size,)).copy()
    if t.min() < 0 or t.max() > base.T:
        raise ValueError("t outside [0, T]")
    alpha, sigma = base.alpha_sigma_torch(t)
    eps = rng.normal_like(batch)
    noisy = project_batch(batch.scale(alpha) + eps.scale(sigma))
    return CorruptedSample(noisy, eps, torch.as_tensor(t), alpha, sigma)


def corrupt(p: PointSet, t: int, base: BaseSchedule, rng: NoiseStream) -> CorruptedSample:
    return corrupt_batch(Batch.from_pointsets([p]), t, base, rng)


def sample_train_t(n: int, base: BaseSchedule, rng: NoiseStream, t_min_frac: float = 0.02) -> np.ndarray:
    lo = int(np.floor(t_min_frac * base.T + 0.5))
    return rng.integers(lo, base.T, n)


def eps_loss_tensor(
    spec: NetSpec,
    values: torch.Tensor,
    layout: ParamVector,
    batch: Batch,
    base: BaseSchedule,
    noisy: CorruptedSample,
    cond=None,
) -> torch.Tensor:
    """Per-node squared error on both blocks, averaged over the batch."""
    out = forward_batch(spec, values, layout, noisy.noisy, noisy.t, base, cond)
    err = ((out.eps_x - noisy.eps.x) ** 2).sum((1, 2)) + ((out.eps_h - noisy.eps.h) ** 2).sum((1, 2))
    return (err / batch.node_counts).mean()


def eps_loss(
    spec: NetSpec,
    params: ParamVector,
    batch: Batch | Sequence[PointSet],
    base: BaseSchedule,
    rng: NoiseStream,
    t_min_frac: float = 0.02,
    cond=None,
) -> GradReport:
    if not isinstance(batch, Batch):
        if len(batch) == 0:
            raise ValueError("empty batch")
        batch = Batch.from_pointsets(batch)
    if batch.size == 0:
        raise ValueError("empty batch")
    t = sample_train_t(batch.size, base, rng, t_min_frac)
    noisy = corrupt_batch(batch, t, base, rng)
    return value_and_grad(lambda v: eps_loss_tensor(spec, v, params, batch, base, noisy, cond), params)


def _cond_tensor(cond, size):
    if cond is None:
        return None
    return torch.as_tensor(np.broadcast_to(np.asarray(cond, dtype=np.float64), (size,)).copy(), dtype=DTYPE)


def _counts(n_nodes) -> list[int]:
    return [int(n_nodes)] if np.isscalar(n_nodes) else [int(n) for n in n_nodes]


@torch.no_grad()
def ddim_sample_batch(
    net: EpsNet,
    grid: NoiseGrid,
    n_nodes: int | Sequence[int],
    rng: NoiseStream,
    cond=None,
    hook: StepHook | None = None,
    z: Batch | None = None,
) -> Batch:
    """Deterministic DDIM over every grid entry; returns the last x0 estimate."""
    base = net.base
    counts = _counts(n_nodes)
    z = rng.prior(counts, net.spec.feat_dim) if z is None else z
    c = _cond_tensor(cond, z.size)
    x0 = z
    for k, e in enumerate(grid.entries):
        if e.alpha < base.precision:
            raise ValueError(f"alpha at t={e.t} below precision; x0 estimate degenerate")
        out = net.eps(z, torch.full((z.size,), e.t), c)
        eps = Batch(out.eps_x, out.eps_h, z.mask)
        x0 = project_batch((z + eps.scale(-e.sigma)).scale(1.0 / e.alpha))
        if k + 1 < len(grid):
            nxt = grid[k + 1]
            z = project_batch(x0.scale(nxt.alpha) + eps.scale(nxt.sigma))
        if hook is not None:
            hook(k, z if k + 1 < len(grid) else x0)
    return x0


@torch.no_grad()
def consistency_sample_batch(
    gen: EpsNet,
    grid: NoiseGrid,
    K: int,
    n_nodes: int | Sequence[int],
    rng: NoiseStream,
    cond=None,
    hook: StepHook | None = None,
    z: Batch | None = None,
) -> Batch:
    """K generator applications along the first K grid entries with fresh re-noising."""
    if K < 1 or K > len(grid):
        raise ValueError(f"K={K} must lie in [1, {len(grid)}]")
    counts = _counts(n_nodes)
    z = rng.prior(counts, gen.spec.feat_dim) if z is None else z
    c = _cond_tensor(cond, z.size)
    x = z
    for k in range(K):
        x = gen.x0(z, grid[k].t, c)
        if k + 1 < K:
            nxt = grid[k + 1]
            z = project_batch(x.scale(nxt.alpha) + rng.normal_like(x).scale(nxt.sigma))
        if hook is not None:
            hook(k, z if k + 1 < K else x)
    return x


def ddim_sample(net: EpsNet, grid: NoiseGrid, n_nodes: int, rng: NoiseStream, cond=None) -> PointSet:
    return ddim_sample_batch(net, grid, n_nodes, rng, cond).to_pointsets()[0]


def consistency_sample(gen: EpsNet, grid: NoiseGrid, K: int, n_nodes: int, rng: NoiseStream, cond=None) -> PointSet:
    return consistency_sample_batch(gen, grid, K, n_nodes, rng, cond).to_pointsets()[0]


def sample_many(
    net: EpsNet,
    grid: NoiseGrid,
    K: int,
    node_counts: Sequence[int],
    rng: NoiseStream,
    method: str = "consistency",
    cond=None,
    chunk: int = 256,
) -> list[PointSet]:
    """Chunked sampling of many molecules with either sampler."""
    out: list[PointSet] = []
    counts = list(node_counts)
    conds = None if cond is None else np.broadcast_to(np.asarray(cond, dtype=np.float64), (len(counts),))
    for s in range(0, len(counts), chunk):
        part = counts[s:s + chunk]
        c = None if conds is None else conds[s:s + chunk]
        if method == "consistency":
            b = consistency_sample_batch(net, grid, K, part, rng, c)
        elif method == "ddim":
            b = ddim_sample_batch(net, grid, part, rng, c)
        else:
            raise ValueError(f"unknown sampler {method!r}")
        out.extend(b.to_pointsets())
    return out
