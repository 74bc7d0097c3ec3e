"""Variance-preserving base schedule, EDM sigma ladder and timestep respacing.

Grids are always emitted high-noise first; samplers walk them front to back.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

import numpy as np
import torch

from .geom import DTYPE


@dataclass(frozen=True)
class BaseSchedule:
    """alpha_t = 1 - (t/T)^2 with sigma_t = sqrt(1 - alpha_t^2).

    The noise precision is applied to alpha^2 as an affine squeeze
    ``alpha^2 <- (1 - 2p) alpha^2 + p`` so alpha stays strictly monotone and
    bounded away from 0 and 1.
    """

    T: int = 1000
    precision: float = 1e-5

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be positive")
        if not 0.0 < self.precision < 0.5:
            raise ValueError("precision must be in (0, 0.5)")

    def _alpha2_sigma2(self, t):
        u = np.asarray(t, dtype=np.float64) / self.T
        p = self.precision
        a = 1.0 - u ** 2
        # 1 - a^2 written as u^2 (2 - u^2) avoids cancellation near t = 0
        alpha2 = (1.0 - 2.0 * p) * a ** 2 + p
        sigma2 = (1.0 - 2.0 * p) * u ** 2 * (2.0 - u ** 2) + p
        return alpha2, sigma2

    def alpha(self, t):
        return np.sqrt(self._alpha2_sigma2(t)[0])

    def sigma(self, t):
        return np.sqrt(self._alpha2_sigma2(t)[1])

    def alpha_sigma_torch(self, t) -> tuple[torch.Tensor, torch.Tensor]:
        a2, s2 = self._alpha2_sigma2(np.asarray(t))
        return torch.tensor(np.sqrt(a2), dtype=DTYPE), torch.tensor(np.sqrt(s2), dtype=DTYPE)


@dataclass(frozen=True)
class GridEntry:
    t: int
    alpha: float
    sigma: float


@dataclass(frozen=True)
class NoiseGrid:
    entries: tuple[GridEntry, ...]
    spacing_kind: str
    rho: float = float("nan")
    # continuous t/T before rounding, same order as entries (respaced only)
    t_frac: tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if len(self.entries) < 1:
            raise ValueError("empty grid")
        sig = [e.sigma for e in self.entries]
        if any(b >= a for a, b in zip(sig, sig[1:])):
            raise ValueError("grid sigmas must be strictly decreasing")

    @property
    def K(self) -> int:
        return len(self.entries)

    @property
    def timesteps(self) -> list[int]:
        return [e.t for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, k: int) -> GridEntry:
        return self.entries[k]


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def edm_sigmas(n: int, sigma_min: float, sigma_max: float, rho: float) -> np.ndarray:
    if n < 2:
        raise ValueError("edm_sigmas needs n >= 2 (i/(n-1) is undefined for n = 1)")
    if not 0.0 < sigma_min < sigma_max or rho <= 0:
        raise ValueError("need 0 < sigma_min < sigma_max and rho > 0")
    ramp = np.arange(n) / (n - 1)
    lo, hi = sigma_min ** (1.0 / rho), sigma_max ** (1.0 / rho)
    out = (hi + ramp * (lo - hi)) ** rho
    out[0], out[-1] = sigma_max, sigma_min
    return out


def respace_fractions(n: int, rho: float) -> np.ndarray:
    """Continuous t/T for i = 0..n-1 (ascending; i = 0 is the clean end)."""
    if n < 2:
        raise ValueError("respacing needs n >= 2")
    if rho <= 0:
        raise ValueError("rho must be positive")
    u = np.arange(n) / (n - 1)
    inner = 1.0 - np.sqrt(1.0 - u ** (2.0 * rho))
    return np.sqrt(np.clip(inner, 0.0, 1.0))


def _dedup_ascending(t: np.ndarray, T: int) -> np.ndarray:
    t = t.copy()
    for k in range(1, len(t)):
        if t[k] <= t[k - 1]:
            t[k] = t[k - 1] + 1
    # upward nudges can only overflow when the top is crowded; pull back from T
    if t[-1] > T:
        t[-1] = T
        for k in range(len(t) - 2, -1, -1):
            if t[k] >= t[k + 1]:
                t[k] = t[k + 1] - 1
    return t


def _make_grid(t_asc: np.ndarray, base: BaseSchedule, kind: str, rho: float, frac_asc=None) -> NoiseGrid:
    t_desc = t_asc[::-1]
    entries = tuple(GridEntry(int(t), float(base.alpha(t)), float(base.sigma(t))) for t in t_desc)
    frac = tuple(float(f) for f in frac_asc[::-1]) if frac_asc is not None else ()
    return NoiseGrid(entries, kind, rho, frac)


def respace(n: int, rho: float, base: BaseSchedule) -> NoiseGrid:
    """Respaced grid: EDM-ladder noise levels mapped back onto integer steps."""
    if n > base.T + 1:
        raise ValueError(f"cannot place {n} distinct steps in [0, {base.T}]")
    frac = respace_fractions(n, rho)
    t = _dedup_ascending(round_half_away(frac * base.T), base.T)
    return _make_grid(t, base, "respaced", float(rho), frac)


def uniform_grid(n: int, base: BaseSchedule) -> NoiseGrid:
    if n < 2 or n > base.T + 1:
        raise ValueError("uniform grid needs 2 <= n <= T + 1")
    t = round_half_away(np.arange(n) * base.T / (n - 1))
    return _make_grid(t, base, "uniform", float("nan"))


def make_grid(kind: str, n: int, base: BaseSchedule, rho: float = 2.25) -> NoiseGrid:
    if kind == "respaced":
        return respace(n, rho, base)
    if kind == "uniform":
        return uniform_grid(n, base)
    raise ValueError(f"unknown grid kind {kind!r}")


def low_noise_fraction(grid: NoiseGrid, T: int, threshold: float = 1e-3) -> float:
    """Share of entries with t/T below ``threshold``.

    Uses the continuous pre-rounding t/T when available, since rounding and
    de-duplication spread the collapsed steps over 0, 1, 2, ...
    """
    if grid.t_frac:
        vals = np.asarray(grid.t_frac)
    else:
        vals = np.asarray(grid.timesteps) / T
    return float(np.mean(vals < threshold))


def write_grid_csv(grid: NoiseGrid, dest: str | Path | TextIO) -> None:
    def _emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "t", "alpha", "sigma"])
        for i, e in enumerate(grid.entries):
            w.writerow([i, e.t, f"{e.alpha:.12g}", f"{e.sigma:.12g}"])

    if isinstance(dest, (str, Path)):
        Path(dest).parent.mkdir(parents=True, exist_ok=True)
        with open(dest, "w", newline="") as fh:
            _emit(fh)
    else:
        _emit(dest)


def read_grid_csv(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [{"i": int(r["i"]), "t": int(r["t"]), "alpha": float(r["alpha"]), "sigma": float(r["sigma"])}
                for r in csv.DictReader(fh)]
