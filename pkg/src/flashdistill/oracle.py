"""Analytic Gaussian teachers and a linear-Gaussian generator.

Everything here is closed form (or deterministic quadrature), so it can
serve as ground truth for the neural distribution-matching gradient.  The
oracle models live in the feature block of single-node point sets, where the
zero-COM coordinate block vanishes identically.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
import torch
from numpy.polynomial.hermite_e import hermegauss

from .distill import DivergenceSpec, PROB_CLAMP, dmd_step, fdiv_weight
from .egnn import EpsOut
from .geom import DTYPE, Batch, NoiseStream
from .netgrad import ParamVector
from .schedule import BaseSchedule, make_grid


@dataclass(frozen=True)
class GaussianTeacher:
    mu_star: np.ndarray
    var_star: float

    def __post_init__(self):
        object.__setattr__(self, "mu_star", np.asarray(self.mu_star, dtype=np.float64).reshape(-1))
        if not self.var_star > 0:
            raise ValueError("var_star must be positive")

    @property
    def dim(self) -> int:
        return self.mu_star.size

    def marginal(self, alpha, sigma):
        """Mean and isotropic variance of the noised marginal."""
        return alpha * self.mu_star, alpha ** 2 * self.var_star + sigma ** 2


@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic mixture; used for multimodal score checks only."""

    weights: np.ndarray
    means: np.ndarray
    var: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if (w <= 0).any() or abs(w.sum() - 1) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", np.atleast_2d(np.asarray(self.means, dtype=np.float64)))
        if not self.var > 0:
            raise ValueError("var must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _alpha_sigma(t, base: BaseSchedule):
    """alpha, sigma with a trailing axis so ``t`` broadcasts against x[..., :]."""
    t = np.asarray(t, dtype=np.float64)
    return base.alpha(t)[..., None], base.sigma(t)[..., None]


def diffused_log_density(model, x, t, base: BaseSchedule) -> np.ndarray:
    """log p_t(x); ``t`` may be an array broadcasting with x's leading axes."""
    x = np.asarray(x, dtype=np.float64)
    a, s = _alpha_sigma(t, base)
    D = model.dim
    if isinstance(model, GaussianTeacher):
        m, v = model.marginal(a, s)
        return (-0.5 * ((x - m) ** 2).sum(-1, keepdims=True) / v - 0.5 * D * np.log(2 * np.pi * v))[..., 0]
    v = (a ** 2 * model.var + s ** 2)[..., None]
    diff = x[..., None, :] - a[..., None] * model.means
    logc = np.log(model.weights) - 0.5 * (diff ** 2).sum(-1) / v[..., 0] - 0.5 * D * np.log(2 * np.pi * v[..., 0])
    top = logc.max(-1, keepdims=True)
    return (top + np.log(np.exp(logc - top).sum(-1, keepdims=True)))[..., 0]


def diffused_score(model, x, t, base: BaseSchedule) -> np.ndarray:
    """grad_x log p_t(x) for a Gaussian teacher or a Gaussian mixture."""
    x = np.asarray(x, dtype=np.float64)
    a, s = _alpha_sigma(t, base)
    if isinstance(model, GaussianTeacher):
        m, v = model.marginal(a, s)
        return -(x - m) / v
    v = (a ** 2 * model.var + s ** 2)[..., None]
    diff = x[..., None, :] - a[..., None] * model.means
    logc = np.log(model.weights) - 0.5 * (diff ** 2).sum(-1) / v[..., 0]
    resp = np.exp(logc - logc.max(-1, keepdims=True))
    resp /= resp.sum(-1, keepdims=True)
    return -(resp[..., None] * diff).sum(-2) / v


# --------------------------------------------------------------------------
# linear generator


@dataclass
class LinearGenerator:
    """x = scale_g * z + mu_g, exposed through the generator interface."""

    params: ParamVector

    @classmethod
    def create(cls, mu_g, scale_g: float) -> "LinearGenerator":
        mu = np.asarray(mu_g, dtype=np.float64).reshape(-1)
        if not scale_g > 0:
            raise ValueError("scale_g must be positive")
        init = {"mu_g": mu, "scale_g": np.array([float(scale_g)])}
        return cls(ParamVector.from_shapes({"mu_g": mu.shape, "scale_g": (1,)}, lambda n, s: init[n]))

    @property
    def mu_g(self) -> np.ndarray:
        return self.params.segment("mu_g").numpy().copy()

    @property
    def scale_g(self) -> float:
        return float(self.params.segment("scale_g")[0])

    @property
    def dim(self) -> int:
        return self.params.layout["mu_g"][1][0]

    def pushforward(self) -> GaussianTeacher:
        return GaussianTeacher(self.mu_g, self.scale_g ** 2)

    def x0(self, z: Batch, t=None, cond=None, values=None) -> Batch:
        P = self.params.views(values)
        h = (P["scale_g"] * z.h + P["mu_g"]) * z.mask.unsqueeze(-1)
        return Batch(torch.zeros_like(z.x), h, z.mask)


@dataclass(frozen=True)
class _Spec:
    feat_dim: int


class GaussianScoreModel:
    """Exact epsilon predictor for a Gaussian (or mixture) data law."""

    def __init__(self, model, base: BaseSchedule):
        self.model = model
        self.base = base
        self.spec = _Spec(model.dim)

    def eps(self, batch: Batch, t, cond=None, values=None) -> EpsOut:
        t_arr = np.broadcast_to(np.asarray(t), (batch.size,))
        sigma = self.base.sigma(t_arr)
        h = batch.h.detach().numpy()
        score = np.stack([diffused_score(self.model, h[b], t_arr[b], self.base) for b in range(batch.size)])
        eps_h = torch.tensor(-sigma[:, None, None] * score, dtype=DTYPE) * batch.mask.unsqueeze(-1)
        return EpsOut(torch.zeros_like(batch.x), eps_h, [batch.h])


class ExactRatioDisc:
    """Discriminator that returns the exact p_real / (p_real + p_fake)."""

    def __init__(self, real, fake, base: BaseSchedule):
        self.real, self.fake, self.base = real, fake, base

    def prob(self, noisy: Batch, t, fake_out=None, cond=None) -> torch.Tensor:
        t_arr = np.broadcast_to(np.asarray(t), (noisy.size,))
        h = noisy.h[:, 0, :].detach().numpy()
        lr = np.array([diffused_log_density(self.real, h[b], t_arr[b], self.base) for b in range(noisy.size)])
        lf = np.array([diffused_log_density(self.fake, h[b], t_arr[b], self.base) for b in range(noisy.size)])
        return torch.tensor(1.0 / (1.0 + np.exp(lf - lr)), dtype=DTYPE)


def _exact_ratio(teacher, fake: GaussianTeacher, x, t, base, clamp):
    lr = diffused_log_density(teacher, x, t, base)
    lf = diffused_log_density(fake, x, t, base)
    p = np.clip(1.0 / (1.0 + np.exp(lf - lr)), PROB_CLAMP, 1 - PROB_CLAMP)
    return np.clip(p / (1 - p), *clamp)


# --------------------------------------------------------------------------
# analytic gradients


def analytic_dmd_grad(teacher: GaussianTeacher, gen: LinearGenerator, t, base: BaseSchedule) -> np.ndarray:
    """Closed-form reverse-KL gradient over (mu_g, scale_g) at a single t."""
    a, s = float(base.alpha(t)), float(base.sigma(t))
    m, sc = gen.mu_g, gen.scale_g
    v_real = a ** 2 * teacher.var_star + s ** 2
    v_fake = a ** 2 * sc ** 2 + s ** 2
    g_mu = a * (m - teacher.mu_star) / v_real
    g_scale = gen.dim * a * sc * (1.0 / v_real - 1.0 / v_fake)
    return np.concatenate([g_mu, [g_scale]])


def quadrature_dmd_grad(
    teacher,
    gen: LinearGenerator,
    t,
    base: BaseSchedule,
    spec: DivergenceSpec | None = None,
    nodes: int = 40,
) -> np.ndarray:
    """Weighted gradient by tensor Gauss-Hermite quadrature over x_t.

    Uses x_t ~ N(alpha mu_g, V_f I) and E[z | x_t] = alpha s (x_t - alpha mu_g) / V_f.
    Works for any teacher with a diffused score (mixtures included) and any
    divergence kind; weights use the exact clamped density ratio.  A 1-D
    ``t`` returns one gradient row per entry.
    """
    spec = spec or DivergenceSpec(lambda_js=0.0)
    scalar = np.ndim(t) == 0
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))[:, None]
    a, s = _alpha_sigma(ts, base)
    m, sc, D = gen.mu_g, gen.scale_g, gen.dim
    v_fake = a ** 2 * sc ** 2 + s ** 2
    u, w1 = hermegauss(nodes)
    w1 = w1 / w1.sum()
    pts = np.array(list(product(u, repeat=D)))
    wts = np.prod(np.array(list(product(w1, repeat=D))), axis=1)
    xt = a * m + np.sqrt(v_fake) * pts
    fake = gen.pushforward()
    gap = diffused_score(fake, xt, ts, base) - diffused_score(teacher, xt, ts, base)
    if spec.kind == "reverse_kl" and spec.lambda_js == 0:
        weight = np.ones(xt.shape[:-1])
    else:
        r = _exact_ratio(teacher, fake, xt, ts, base, spec.ratio_clamp)
        if spec.kind == "reverse_kl":
            weight = 1.0 + spec.lambda_js * fdiv_weight("js", r)
        else:
            weight = fdiv_weight(spec.kind, r)
    ez = a * sc * (xt - a * m) / v_fake
    ww = (wts * weight)[..., None]
    g_mu = (ww * gap).sum(1)
    g_scale = (ww[..., 0] * (gap * ez).sum(-1)).sum(1)
    out = np.concatenate([g_mu, g_scale[:, None]], axis=1)
    return out[0] if scalar else out


def mc_dmd_grad(teacher: GaussianTeacher, gen: LinearGenerator, t, base: BaseSchedule, n: int, seed: int = 0, chunk: int = 200_000):
    """Brute-force sampling estimate of the reverse-KL gradient: (mean, standard error)."""
    rng = np.random.default_rng(seed)
    a, s = float(base.alpha(t)), float(base.sigma(t))
    D = gen.dim
    fake = gen.pushforward()
    total = np.zeros(D + 1)
    sq = np.zeros(D + 1)
    done = 0
    while done < n:
        k = min(chunk, n - done)
        z = rng.standard_normal((k, D))
        eps = rng.standard_normal((k, D))
        x = gen.scale_g * z + gen.mu_g
        xt = a * x + s * eps
        gap = diffused_score(fake, xt, t, base) - diffused_score(teacher, xt, t, base)
        g = np.concatenate([gap, (gap * z).sum(1, keepdims=True)], axis=1)
        total += g.sum(0)
        sq += (g ** 2).sum(0)
        done += k
    mean = total / n
    var = sq / n - mean ** 2
    return mean, np.sqrt(np.maximum(var, 0) / n)


def default_t_nodes(base: BaseSchedule, count: int = 16, t_range=(0.02, 0.98)) -> np.ndarray:
    """Fixed midpoint nodes for the average over t."""
    lo, hi = t_range[0] * base.T, t_range[1] * base.T
    return lo + (hi - lo) * (np.arange(count) + 0.5) / count


def oracle_convergence(
    teacher,
    gen_init: LinearGenerator,
    iters: int = 5000,
    lr: float = 1e-2,
    base: BaseSchedule | None = None,
    spec: DivergenceSpec | None = None,
    t_nodes=None,
    nodes: int = 12,
) -> LinearGenerator:
    """Gradient descent on the t-averaged analytic gradient."""
    base = base or BaseSchedule()
    spec = spec or DivergenceSpec(lambda_js=0.0)
    ts = default_t_nodes(base) if t_nodes is None else np.asarray(t_nodes, dtype=np.float64)
    closed = isinstance(teacher, GaussianTeacher) and spec.kind == "reverse_kl" and spec.lambda_js == 0
    theta = gen_init.params.values.detach().numpy().copy()
    layout = dict(gen_init.params.layout)
    for it in range(iters):
        gen = LinearGenerator(ParamVector(torch.tensor(theta), layout))
        if closed:
            g = np.mean([analytic_dmd_grad(teacher, gen, t, base) for t in ts], axis=0)
        else:
            g = quadrature_dmd_grad(teacher, gen, ts, base, spec, nodes).mean(0)
        theta = theta - lr * g
        if not np.isfinite(theta).all() or np.abs(theta[:-1]).max() > 1e6:
            raise FloatingPointError(f"oracle descent diverged at iteration {it}")
        if theta[-1] <= 0:
            raise FloatingPointError(f"scale_g left the positive half-line at iteration {it}")
    return LinearGenerator(ParamVector(torch.tensor(theta), layout))


# --------------------------------------------------------------------------
# bridge to the neural gradient path


def cubature_noise(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Degree-3 symmetric cubature over the joint (z, eps) Gaussian.

    Points +-sqrt(2 dim) e_k in 2*dim dimensions have exact mean 0 and
    identity covariance, so batch means of quadratic integrands are exact.
    """
    n = 2 * dim
    pts = np.concatenate([np.eye(n), -np.eye(n)]) * np.sqrt(n)
    return pts[:, :dim], pts[:, dim:]


class ScriptedNoise(NoiseStream):
    """NoiseStream that replays a fixed list of feature-block draws."""

    def __init__(self, feature_draws):
        super().__init__(0)
        self._queue = [np.asarray(d, dtype=np.float64) for d in feature_draws]

    def normal_h(self, mask, feat_dim):
        if not self._queue:
            raise RuntimeError("scripted noise exhausted")
        d = torch.tensor(self._queue.pop(0), dtype=DTYPE).view(mask.shape[0], mask.shape[1], feat_dim)
        return d * mask.unsqueeze(-1)


def single_node_batch(h: np.ndarray) -> Batch:
    h = np.asarray(h, dtype=np.float64)
    B, D = h.shape
    return Batch(torch.zeros(B, 1, 3, dtype=DTYPE), torch.tensor(h, dtype=DTYPE).view(B, 1, D), torch.ones(B, 1, dtype=DTYPE))


def bridge_grad(teacher: GaussianTeacher, gen: LinearGenerator, t: int, base: BaseSchedule) -> np.ndarray:
    """Reverse-KL gradient computed by the neural dmd_step with analytic scores plugged in."""
    z, eps = cubature_noise(gen.dim)
    grid = make_grid("respaced", 2, base)
    res = dmd_step(
        gen,
        GaussianScoreModel(teacher, base),
        GaussianScoreModel(gen.pushforward(), base),
        None,
        DivergenceSpec(lambda_js=0.0),
        single_node_batch(z),
        grid,
        1,
        base,
        ScriptedNoise([eps]),
        t=t,
        normalize=False,
        weighting="score",
    )
    return res.gen_grad.grad.numpy()


@dataclass
class BridgeResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tolerance)


def _rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def run_bridge_checks(base: BaseSchedule | None = None, iters: int = 5000) -> list[BridgeResult]:
    """The oracle gate: neural-vs-analytic gradients and convergence of each variant."""
    base = base or BaseSchedule()
    teacher = GaussianTeacher(np.array([1.0, -2.0]), 1.0)
    out = []
    worst = 0.0
    for mu, sc, t in [((0.0, 0.0), 1.0, 300), ((0.5, 0.3), 0.7, 50), ((-1.0, 2.0), 1.6, 900)]:
        gen = LinearGenerator.create(mu, sc)
        worst = max(worst, _rel(bridge_grad(teacher, gen, t, base), analytic_dmd_grad(teacher, gen, t, base)))
    out.append(BridgeResult("dmd_step vs closed form (rel err)", worst, 1e-6))
    gen = LinearGenerator.create((0.3, -0.4), 1.3)
    worst = max(_rel(quadrature_dmd_grad(teacher, gen, t, base), analytic_dmd_grad(teacher, gen, t, base)) for t in (20, 500, 980))
    out.append(BridgeResult("quadrature vs closed form (rel err)", worst, 1e-9))
    for name, spec, tol in [
        ("reverse_kl", DivergenceSpec(lambda_js=0.0), 1e-2),
        ("js", DivergenceSpec(kind="js", lambda_js=0.0), 1e-2),
        ("reverse_kl + 0.1 js", DivergenceSpec(lambda_js=0.1), 1e-2),
        ("forward_kl", DivergenceSpec(kind="forward_kl", lambda_js=0.0), 5e-2),
    ]:
        final = oracle_convergence(teacher, LinearGenerator.create((0.0, 0.0), 1.0), iters, 1e-2, base, spec)
        out.append(BridgeResult(f"convergence {name}: |mu_g - mu*|", float(np.linalg.norm(final.mu_g - teacher.mu_star)), tol))
    return out
