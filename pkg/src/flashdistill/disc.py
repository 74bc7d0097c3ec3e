"""Discriminator head on the fake-score backbone's intermediate features.

Each tapped layer is pooled by a single learnable query attending over the
nodes, mapped by a small MLP to two class logits, and turned into a
real-class probability; the tap probabilities are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import corrupt_batch
from .egnn import EpsNet
from .geom import Batch, NoiseStream, project_batch
from .netgrad import GradReport, ParamVector
from .schedule import BaseSchedule

PROB_EPS = 1e-7


@dataclass(frozen=True)
class DiscSpec:
    tap_layers: tuple[int, ...] = (1, 2, 3)
    attn_dim: int = 32
    r1_weight: float = 1e-3
    r1_sigma: float = 0.01
    gan_backbone_coeff: float = 0.2

    def __post_init__(self):
        if len(self.tap_layers) != 3 or len(set(self.tap_layers)) != 3:
            raise ValueError("need three distinct tap layers")
        if min(self.tap_layers) < 0:
            raise ValueError("tap layers must be non-negative")
        if self.attn_dim < 1 or self.r1_weight < 0 or self.r1_sigma <= 0:
            raise ValueError("invalid discriminator spec")

    def check_backbone(self, layers: int) -> None:
        if max(self.tap_layers) >= layers:
            raise ValueError(f"tap layers {self.tap_layers} exceed backbone depth {layers}")


def disc_param_shapes(spec: DiscSpec, hidden: int) -> dict[str, tuple[int, ...]]:
    A = spec.attn_dim
    shapes = {}
    for k in range(len(spec.tap_layers)):
        p = f"tap{k}."
        shapes.update({
            p + "query": (A,), p + "key": (hidden, A), p + "value": (hidden, A),
            p + "w0": (A, A), p + "b0": (A,), p + "w1": (A, 2), p + "b1": (2,),
        })
    return shapes


def init_disc_params(spec: DiscSpec, hidden: int, seed: int | np.random.Generator = 0, scale: float = 1.0) -> ParamVector:
    """Xavier-style random init; ``scale=0`` gives the all-zero (indifferent) head."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def init(name, shape):
        if name.endswith(("b0", "b1")):
            return np.zeros(shape)
        fan = shape[0]
        return scale * rng.standard_normal(shape) / np.sqrt(fan)

    return ParamVector.from_shapes(disc_param_shapes(spec, hidden), init)


def disc_forward(values: torch.Tensor, layout: ParamVector, layer_feats, mask: torch.Tensor, spec: DiscSpec) -> torch.Tensor:
    """Real-class probability per sample, shape (B,)."""
    P = layout.views(values)
    scale = 1.0 / np.sqrt(spec.attn_dim)
    probs = []
    for k, layer in enumerate(spec.tap_layers):
        h = layer_feats[layer]
        p = f"tap{k}."
        keys = h @ P[p + "key"]
        vals = h @ P[p + "value"]
        scores = (keys @ P[p + "query"]) * scale
        scores = scores.masked_fill(mask <= 0, float("-inf"))
        attn = torch.softmax(scores, dim=1)
        pooled = (attn.unsqueeze(-1) * vals).sum(1)
        logits = F.silu(pooled @ P[p + "w0"] + P[p + "b0"]) @ P[p + "w1"] + P[p + "b1"]
        probs.append(torch.softmax(logits, dim=-1)[:, 0])
    return torch.stack(probs).mean(0)


class Discriminator:
    """Discriminator parameters bound to a spec; reads features from a backbone output."""

    def __init__(self, spec: DiscSpec, params: ParamVector):
        self.spec = spec
        self.params = params

    def prob(self, noisy: Batch, t, fake_out, cond=None, values=None) -> torch.Tensor:
        v = self.params.values if values is None else values
        return disc_forward(v, self.params, fake_out.layer_feats, noisy.mask, self.spec)


@dataclass
class GanResult:
    disc_loss: float
    r1: float
    disc_grad: GradReport
    backbone_grad: GradReport
    p_real_mean: float
    p_fake_mean: float


def _pad(b: Batch, n: int) -> Batch:
    extra = n - b.n_max
    if extra == 0:
        return b
    return Batch(F.pad(b.x, (0, 0, 0, extra)), F.pad(b.h, (0, 0, 0, extra)), F.pad(b.mask, (0, extra)))


def cat_batches(batches) -> Batch:
    n = max(b.n_max for b in batches)
    padded = [_pad(b, n) for b in batches]
    return Batch(torch.cat([b.x for b in padded]), torch.cat([b.h for b in padded]), torch.cat([b.mask for b in padded]))


def gan_losses(
    disc: Discriminator,
    mu_fake: EpsNet,
    real_batch: Batch,
    fake_batch: Batch,
    base: BaseSchedule,
    rng: NoiseStream,
    cond_real=None,
    cond_fake=None,
    t=None,
) -> GanResult:
    """BCE discriminator loss with a perturbation R1 penalty.

    Real and fake samples share one noise level per index.  The backbone
    gradient is the BCE gradient scaled by ``gan_backbone_coeff``.
    """
    spec = disc.spec
    spec.check_backbone(mu_fake.spec.layers)
    B = real_batch.size
    if B == 0 or fake_batch.size != B:
        raise ValueError("real and fake batches must be non-empty and equally sized")
    if t is None:
        lo = int(np.floor(0.02 * base.T + 0.5))
        t = rng.integers(lo, base.T, B)
    t = np.broadcast_to(np.asarray(t), (B,)).copy()
    real = corrupt_batch(real_batch, t, base, rng).noisy
    fake = corrupt_batch(fake_batch, t, base, rng).noisy
    pert = project_batch(real + rng.normal_like(real).scale(spec.r1_sigma))

    joint = cat_batches([real, fake])
    t_all = torch.as_tensor(np.concatenate([t, t]))
    cond = cond_pert = None
    if mu_fake.spec.cond_dim:
        cr = torch.as_tensor(np.broadcast_to(np.asarray(cond_real, dtype=np.float64), (B,)).copy())
        cf = torch.as_tensor(np.broadcast_to(np.asarray(cond_fake, dtype=np.float64), (B,)).copy())
        cond, cond_pert = torch.cat([cr, cf]), cr

    psi = disc.params.values.detach().clone().requires_grad_(True)
    phi = mu_fake.params.values.detach().clone().requires_grad_(spec.gan_backbone_coeff != 0)
    out = mu_fake.eps(joint, t_all, cond, phi)
    p = disc_forward(psi, disc.params, out.layer_feats, joint.mask, spec).clamp(PROB_EPS, 1 - PROB_EPS)
    p_real, p_fake = p[:B], p[B:]
    bce = -(torch.log(p_real).mean() + torch.log1p(-p_fake).mean())

    # R1 only trains the discriminator, so the backbone features enter it detached
    with torch.no_grad():
        pert_feats = mu_fake.eps(pert, torch.as_tensor(t), cond_pert).layer_feats
    real_feats = [f[:B, :real.n_max].detach() for f in out.layer_feats]
    p_real_r1 = disc_forward(psi, disc.params, real_feats, real.mask, spec).clamp(PROB_EPS, 1 - PROB_EPS)
    p_pert = disc_forward(psi, disc.params, pert_feats, pert.mask, spec).clamp(PROB_EPS, 1 - PROB_EPS)
    r1 = spec.r1_weight * ((p_real_r1 - p_pert) ** 2).mean() / spec.r1_sigma ** 2
    if not (torch.isfinite(bce) and torch.isfinite(r1)):
        raise FloatingPointError("non-finite GAN loss")

    if spec.gan_backbone_coeff != 0:
        g_psi, g_phi = torch.autograd.grad(bce + r1, [psi, phi])
        g_phi = spec.gan_backbone_coeff * g_phi
    else:
        (g_psi,) = torch.autograd.grad(bce + r1, [psi])
        g_phi = torch.zeros_like(phi)
    return GanResult(
        disc_loss=float(bce.detach()),
        r1=float(r1.detach()),
        disc_grad=GradReport(float((bce + r1).detach()), g_psi.detach(), dict(disc.params.layout)),
        backbone_grad=GradReport(float(bce.detach()) * spec.gan_backbone_coeff, g_phi.detach(), dict(mu_fake.params.layout)),
        p_real_mean=float(p_real.mean().detach()),
        p_fake_mean=float(p_fake.mean().detach()),
    )


def gan_loss_tensor(disc: Discriminator, mu_fake: EpsNet, psi: torch.Tensor, real: Batch, fake: Batch, t) -> torch.Tensor:
    """BCE on already-noised batches as a function of the disc parameters (for gradient checks)."""
    B = real.size
    joint = cat_batches([real, fake])
    t_all = torch.as_tensor(np.concatenate([t, t]))
    out = mu_fake.eps(joint, t_all)
    p = disc_forward(psi, disc.params, out.layer_feats, joint.mask, disc.spec).clamp(PROB_EPS, 1 - PROB_EPS)
    return -(torch.log(p[:B]).mean() + torch.log1p(-p[B:]).mean())
