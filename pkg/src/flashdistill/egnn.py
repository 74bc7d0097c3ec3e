"""E(n)-equivariant epsilon-predictor over padded point-cloud batches.

Layer update on the fully connected graph (padding masked out):

    m_ij = phi_e(h_i, h_j, |x_i - x_j|^2)
    x_i <- x_i + c/(N-1) * sum_j (x_i - x_j)/(|x_i - x_j| + 1) tanh(phi_x(m_ij))
    h_i <- h_i + phi_h(h_i, sum_j m_ij)

The raw outputs r_x (zero-COM coordinate residual) and r_h (linear head on
the final features) are converted to an epsilon estimate in one of three ways:

    "x0"   eps = sigma_t z - (alpha_t / sigma_t) r,   i.e. x0 = alpha_t z + r
    "v"    eps = sigma_t z + alpha_t r,               i.e. x0 = alpha_t z - sigma_t r
    "eps"  eps = r

The first two keep x0 bounded where alpha_t ~ 3e-3 and give eps = sigma_t z
for a zero head.  "x0" lets r be a plain geometric correction, so the net
never has to learn the 1/sigma gain that eps needs at low noise; it is the
default.
The normalised difference and the tanh gate (scale c = ``coord_range``)
bound each coordinate step, so depth cannot compound distances.  All MLPs
use SiLU.  Weights are plain tensors carved out of a flat
ParamVector so the same code serves teacher, student and fake-score nets.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
import numpy as np
import torch
import torch.nn.functional as F

from .geom import DTYPE, Batch, PointSet, remove_com
from .netgrad import ParamVector
from .schedule import BaseSchedule


@dataclass(frozen=True)
class NetSpec:
    layers: int = 4
    hidden: int = 64
    feat_dim: int = 2
    cond_dim: int = 0
    parametrization: str = "x0"
    coord_range: float = 3.0
    # Gaussian radial basis on |x_i - x_j| fed to the edge MLP (0 disables)
    rbf_count: int = 0
    rbf_max: float = 8.0

    def __post_init__(self):
        if self.rbf_count < 0 or not self.rbf_max > 0:
            raise ValueError("rbf_count must be >= 0 and rbf_max > 0")
        if not self.coord_range > 0:
            raise ValueError("coord_range must be positive")
        if self.parametrization not in ("v", "eps", "x0"):
            raise ValueError("parametrization must be 'v', 'eps' or 'x0'")
        if self.layers < 2:
            raise ValueError("need at least 2 layers so intermediate features exist")
        if self.hidden < 4:
            raise ValueError("hidden width must be >= 4")
        if self.cond_dim not in (0, 1):
            raise ValueError("cond_dim must be 0 or 1")

    @property
    def in_dim(self) -> int:
        return self.feat_dim + 1 + self.cond_dim

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpsOut:
    eps_x: torch.Tensor
    eps_h: torch.Tensor
    layer_feats: list[torch.Tensor]


# zero-initialised output heads: the fresh net predicts eps = 0 exactly
def _is_output_head(name: str) -> bool:
    return name.startswith("head.") or name.endswith("coord.w2")


def param_shapes(spec: NetSpec) -> dict[str, tuple[int, ...]]:
    H = spec.hidden
    shapes: dict[str, tuple[int, ...]] = {"embed.w": (spec.in_dim, H), "embed.b": (H,)}
    for l in range(spec.layers):
        p = f"l{l}."
        shapes.update({
            p + "edge.w0": (2 * H + 1 + spec.rbf_count, H), p + "edge.b0": (H,),
            p + "edge.w1": (H, H), p + "edge.b1": (H,),
            p + "coord.w0": (H, H), p + "coord.b0": (H,),
            p + "coord.w1": (H, H), p + "coord.b1": (H,),
            p + "coord.w2": (H, 1),
            p + "node.w0": (2 * H, H), p + "node.b0": (H,),
            p + "node.w1": (H, H), p + "node.b1": (H,),
        })
    shapes.update({"head.w": (H, spec.feat_dim), "head.b": (spec.feat_dim,)})
    return shapes


def init_params(spec: NetSpec, seed: int | np.random.Generator = 0, head_scale: float = 0.0) -> ParamVector:
    """He-normal hidden weights, zero biases, zero output heads.

    ``head_scale > 0`` gives the heads small random weights instead (used by
    gradient checks so every path carries signal).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def init(name, shape):
        if len(shape) == 1:
            return np.zeros(shape)
        if _is_output_head(name):
            return head_scale * rng.standard_normal(shape) / np.sqrt(shape[0])
        return rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])

    return ParamVector.from_shapes(param_shapes(spec), init)


def _rbf(d2: torch.Tensor, count: int, top: float) -> torch.Tensor:
    centers = torch.linspace(0.0, top, count, dtype=DTYPE)
    width = top / (count - 1) if count > 1 else top
    d = torch.sqrt(d2 + 1e-12)
    return torch.exp(-0.5 * ((d - centers) / width) ** 2)


def _mlp2(z, w0, b0, w1, b1):
    return F.silu(F.silu(z @ w0 + b0) @ w1 + b1)


def forward_batch(
    spec: NetSpec,
    values: torch.Tensor,
    layout: ParamVector,
    batch: Batch,
    t: torch.Tensor,
    base: BaseSchedule,
    cond: torch.Tensor | None = None,
) -> EpsOut:
    """Batched forward; ``values`` is the flat parameter tensor (may require grad)."""
    if (cond is None) != (spec.cond_dim == 0):
        raise ValueError("cond must be given iff spec.cond_dim == 1")
    P = layout.views(values)
    mask = batch.mask
    B, N = mask.shape
    node_mask = mask.unsqueeze(-1)
    eye = torch.eye(N, dtype=DTYPE)
    edge_mask = (mask.unsqueeze(2) * mask.unsqueeze(1) * (1.0 - eye)).unsqueeze(-1)
    norm = (mask.sum(1) - 1.0).clamp(min=1.0).view(B, 1, 1)

    t = torch.as_tensor(t, dtype=DTYPE).reshape(-1).expand(B)
    extras = [(t / base.T).view(B, 1, 1).expand(B, N, 1)]
    if cond is not None:
        extras.append(torch.as_tensor(cond, dtype=DTYPE).reshape(-1).expand(B).view(B, 1, 1).expand(B, N, 1))
    h = torch.cat([batch.h] + extras, dim=-1)
    h = (h @ P["embed.w"] + P["embed.b"]) * node_mask

    x0 = batch.x
    x = x0
    feats = []
    for l in range(spec.layers):
        p = f"l{l}."
        diff = x.unsqueeze(2) - x.unsqueeze(1)
        d2 = (diff ** 2).sum(-1, keepdim=True)
        hi = h.unsqueeze(2).expand(B, N, N, spec.hidden)
        hj = h.unsqueeze(1).expand(B, N, N, spec.hidden)
        edge_in = [hi, hj, d2]
        if spec.rbf_count:
            edge_in.append(_rbf(d2, spec.rbf_count, spec.rbf_max))
        m = _mlp2(torch.cat(edge_in, dim=-1), P[p + "edge.w0"], P[p + "edge.b0"], P[p + "edge.w1"], P[p + "edge.b1"])
        m = m * edge_mask
        phi = _mlp2(m, P[p + "coord.w0"], P[p + "coord.b0"], P[p + "coord.w1"], P[p + "coord.b1"]) @ P[p + "coord.w2"]
        unit = diff / (torch.sqrt(d2 + 1e-12) + 1.0)
        x = x + spec.coord_range * (unit * torch.tanh(phi) * edge_mask).sum(2) / norm
        agg = m.sum(2)
        dh = F.silu(torch.cat([h, agg], dim=-1) @ P[p + "node.w0"] + P[p + "node.b0"]) @ P[p + "node.w1"] + P[p + "node.b1"]
        h = (h + dh) * node_mask
        feats.append(h)

    r_x = remove_com(x - x0, mask)
    r_h = (h @ P["head.w"] + P["head.b"]) * node_mask
    if spec.parametrization == "eps":
        return EpsOut(r_x, r_h, feats)
    alpha, sigma = base.alpha_sigma_torch(t.detach().numpy())
    a, s = alpha.view(B, 1, 1), sigma.view(B, 1, 1)
    z_x = remove_com(x0, mask)
    if spec.parametrization == "x0":
        g = a / s
        return EpsOut(s * z_x - g * r_x, (s * batch.h - g * r_h) * node_mask, feats)
    return EpsOut(s * z_x + a * r_x, (s * batch.h + a * r_h) * node_mask, feats)


class EpsNet:
    """An EGNN epsilon-predictor bound to its spec, parameters and schedule.

    ``values`` arguments override the bound parameters (pass a grad-tracking
    flat tensor to differentiate).  Also exposes the x0-prediction view used
    by the few-step generator.
    """

    def __init__(self, spec: NetSpec, params: ParamVector, base: BaseSchedule):
        self.spec = spec
        self.params = params
        self.base = base

    def eps(self, batch: Batch, t, cond=None, values=None) -> EpsOut:
        v = self.params.values if values is None else values
        return forward_batch(self.spec, v, self.params, batch, torch.as_tensor(t), self.base, cond)

    def x0(self, z: Batch, t, cond=None, values=None) -> Batch:
        """Generator view: x = (z - sigma * eps_hat) / alpha at step t."""
        t_arr = np.broadcast_to(np.asarray(t), (z.size,)).copy()
        alpha, sigma = self.base.alpha_sigma_torch(t_arr)
        out = self.eps(z, torch.as_tensor(t_arr), cond, values)
        a = alpha.view(-1, 1, 1)
        s = sigma.view(-1, 1, 1)
        x = remove_com((z.x - s * out.eps_x) / a, z.mask)
        h = (z.h - s * out.eps_h) / a * z.mask.unsqueeze(-1)
        return Batch(x, h, z.mask)


def forward(spec: NetSpec, params: ParamVector, p: PointSet, t: int, base: BaseSchedule, cond: float | None = None) -> EpsOut:
    """Single point-cloud forward; returns unbatched (N, .) tensors."""
    if not 0 <= t <= base.T:
        raise ValueError(f"t={t} outside [0, {base.T}]")
    batch = Batch.from_pointsets([p])
    c = None if cond is None else torch.tensor([cond], dtype=DTYPE)
    out = forward_batch(spec, params.values, params, batch, torch.tensor([t]), base, c)
    return EpsOut(out.eps_x[0], out.eps_h[0], [f[0] for f in out.layer_feats])


SCORE_MIN_SIGMA = 1e-6


def eps_to_score(eps: EpsOut | torch.Tensor, sigma) -> torch.Tensor:
    """score = -eps / sigma on the concatenated (coords | feats) block.

    Accepts an EpsOut (batched or not) or a raw tensor; ``sigma`` may be a
    scalar or a per-sample (B,) tensor.
    """
    flat = torch.cat([eps.eps_x, eps.eps_h], dim=-1) if isinstance(eps, EpsOut) else eps
    sig = torch.as_tensor(sigma, dtype=DTYPE)
    if (sig <= SCORE_MIN_SIGMA).any():
        raise ValueError("score undefined at near-zero noise (sigma <= 1e-6)")
    if sig.ndim == 1:
        sig = sig.view(-1, *([1] * (flat.ndim - 1)))
    return -flat / sig


def copy_net(net: EpsNet) -> EpsNet:
    return EpsNet(net.spec, net.params.copy(), net.base)

