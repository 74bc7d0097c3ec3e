"""Point clouds, zero-COM projection, rotations and noise streams.

Coordinates use the row-vector convention: a rotation acts as ``coords @ R``.
Every module that can drift the coordinate mean re-projects afterwards.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np
import torch
from scipy.spatial.transform import Rotation as _ScipyRotation

ZERO_COM_TOL = 1e-8
DTYPE = torch.float64


@dataclass(frozen=True, eq=False)
class PointSet:
    """A molecule-like point cloud: ``coords`` (N, 3) and invariant ``feats`` (N, d)."""

    coords: np.ndarray
    feats: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64, copy=True)
        feats = np.array(self.feats, dtype=np.float64, copy=True)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"coords must be (N, 3), got {coords.shape}")
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise ValueError(f"feats must be (N, d) with N={coords.shape[0]}, got {feats.shape}")
        if coords.shape[0] < 1 or feats.shape[1] < 1:
            raise ValueError("PointSet needs N >= 1 and d >= 1")
        if not (np.isfinite(coords).all() and np.isfinite(feats).all()):
            raise ValueError("PointSet entries must be finite")
        coords.setflags(write=False)
        feats.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "feats", feats)

    @property
    def node_count(self) -> int:
        return self.coords.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.feats.shape[1]

    def com(self) -> np.ndarray:
        return self.coords.mean(axis=0)


@dataclass(frozen=True, eq=False)
class Rotation:
    mat: np.ndarray

    def __post_init__(self):
        mat = np.array(self.mat, dtype=np.float64, copy=True)
        if mat.shape != (3, 3):
            raise ValueError("rotation matrix must be 3x3")
        if np.abs(mat @ mat.T - np.eye(3)).max() > 1e-10 or abs(np.linalg.det(mat) - 1.0) > 1e-10:
            raise ValueError("matrix is not in SO(3)")
        mat.setflags(write=False)
        object.__setattr__(self, "mat", mat)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def about_axis(cls, axis: Sequence[float], angle: float) -> "Rotation":
        vec = np.asarray(axis, dtype=np.float64)
        vec = vec / np.linalg.norm(vec) * angle
        # scipy returns the column-vector matrix; transpose for x @ R
        return cls(_ScipyRotation.from_rotvec(vec).as_matrix().T)

    def block(self, feat_dim: int) -> np.ndarray:
        """diag(R, I_d), the extension that leaves features untouched."""
        out = np.eye(3 + feat_dim)
        out[:3, :3] = self.mat
        return out


def project_zero_com(p: PointSet) -> PointSet:
    return PointSet(p.coords - p.coords.mean(axis=0, keepdims=True), p.feats)


def apply_rotation(p: PointSet, r: Rotation) -> PointSet:
    return PointSet(p.coords @ r.mat, p.feats)


def translate(p: PointSet, shift: Sequence[float]) -> PointSet:
    return PointSet(p.coords + np.asarray(shift, dtype=np.float64), p.feats)


def random_rotation(rng: np.random.Generator | int | None) -> Rotation:
    """Haar-uniform rotation."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    mat = _ScipyRotation.random(random_state=rng).as_matrix()
    # re-orthonormalise to push RR^T - I down to round-off
    u, _, vt = np.linalg.svd(mat)
    mat = u @ vt
    if np.linalg.det(mat) < 0:
        mat[:, 0] *= -1
    return Rotation(mat)


def pairwise_distances(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


# --------------------------------------------------------------------------
# padded torch batches


@dataclass
class Batch:
    """Padded batch of point clouds.

    x: (B, N, 3), h: (B, N, d), mask: (B, N) with 1.0 on real nodes.
    Padded rows of ``x`` and ``h`` are kept at zero.
    """

    x: torch.Tensor
    h: torch.Tensor
    mask: torch.Tensor

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def n_max(self) -> int:
        return self.x.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.h.shape[2]

    @property
    def node_counts(self) -> torch.Tensor:
        return self.mask.sum(1)

    def replace(self, x=None, h=None) -> "Batch":
        return Batch(self.x if x is None else x, self.h if h is None else h, self.mask)

    def detach(self) -> "Batch":
        return Batch(self.x.detach(), self.h.detach(), self.mask)

    def flat(self) -> torch.Tensor:
        """(B, N, 3 + d) concatenation of coordinate and feature blocks."""
        return torch.cat([self.x, self.h], dim=-1)

    def __add__(self, other: "Batch") -> "Batch":
        return Batch(self.x + other.x, self.h + other.h, self.mask)

    def scale(self, a) -> "Batch":
        a = _per_sample(a, self.x)
        return Batch(self.x * a, self.h * a, self.mask)

    def index(self, idx) -> "Batch":
        return Batch(self.x[idx], self.h[idx], self.mask[idx])

    @classmethod
    def from_pointsets(cls, points: Sequence[PointSet]) -> "Batch":
        if not points:
            raise ValueError("empty batch")
        n_max = max(p.node_count for p in points)
        d = points[0].feat_dim
        x = np.zeros((len(points), n_max, 3))
        h = np.zeros((len(points), n_max, d))
        mask = np.zeros((len(points), n_max))
        for b, p in enumerate(points):
            n = p.node_count
            x[b, :n] = p.coords
            h[b, :n] = p.feats
            mask[b, :n] = 1.0
        return cls(torch.tensor(x, dtype=DTYPE), torch.tensor(h, dtype=DTYPE), torch.tensor(mask, dtype=DTYPE))

    def to_pointsets(self) -> list[PointSet]:
        x = self.x.detach().numpy()
        h = self.h.detach().numpy()
        out = []
        for b, n in enumerate(self.mask.sum(1).round().long().tolist()):
            out.append(PointSet(x[b, :n], h[b, :n]))
        return out


def _per_sample(a, like: torch.Tensor):
    if isinstance(a, torch.Tensor) and a.ndim == 1:
        return a.view(-1, *([1] * (like.ndim - 1)))
    return a


def masked_mean_x(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    n = mask.sum(1).clamp(min=1.0).view(-1, 1, 1)
    return (x * mask.unsqueeze(-1)).sum(1, keepdim=True) / n


def remove_com(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked zero-COM projection of (B, N, 3) coordinates."""
    return (x - masked_mean_x(x, mask)) * mask.unsqueeze(-1)


def project_batch(batch: Batch) -> Batch:
    return Batch(remove_com(batch.x, batch.mask), batch.h * batch.mask.unsqueeze(-1), batch.mask)


def max_com(batch: Batch) -> float:
    return float(masked_mean_x(batch.x, batch.mask).abs().max())


def rotate_batch(batch: Batch, r: Rotation) -> Batch:
    return batch.replace(x=batch.x @ torch.tensor(r.mat, dtype=DTYPE))


def empty_batch(node_counts: Sequence[int], feat_dim: int) -> Batch:
    counts = [int(n) for n in node_counts]
    if not counts or min(counts) < 1:
        raise ValueError("node counts must be positive")
    n_max = max(counts)
    mask = torch.zeros(len(counts), n_max, dtype=DTYPE)
    for b, n in enumerate(counts):
        mask[b, :n] = 1.0
    return Batch(torch.zeros(len(counts), n_max, 3, dtype=DTYPE), torch.zeros(len(counts), n_max, feat_dim, dtype=DTYPE), mask)


# --------------------------------------------------------------------------
# noise streams


class NoiseStream:
    """Seeded source of Gaussian and integer draws.

    If ``rotation`` is set, every coordinate draw is right-multiplied by it,
    so two streams with the same seed produce noise related by R.
    """

    def __init__(self, seed: int | np.random.SeedSequence, rotation: Rotation | None = None):
        self.rng = np.random.default_rng(seed)
        self.rotation = rotation

    def normal_x(self, mask: torch.Tensor) -> torch.Tensor:
        b, n = mask.shape
        eps = torch.tensor(self.rng.standard_normal((b, n, 3)), dtype=DTYPE)
        eps = remove_com(eps * mask.unsqueeze(-1), mask)
        if self.rotation is not None:
            eps = eps @ torch.tensor(self.rotation.mat, dtype=DTYPE)
        return eps

    def normal_h(self, mask: torch.Tensor, feat_dim: int) -> torch.Tensor:
        b, n = mask.shape
        eps = torch.tensor(self.rng.standard_normal((b, n, feat_dim)), dtype=DTYPE)
        return eps * mask.unsqueeze(-1)

    def normal_like(self, batch: Batch) -> Batch:
        return Batch(self.normal_x(batch.mask), self.normal_h(batch.mask, batch.feat_dim), batch.mask)

    def prior(self, node_counts: Sequence[int], feat_dim: int) -> Batch:
        """Standard Gaussian with zero-COM coordinates for the given node counts."""
        return self.normal_like(empty_batch(node_counts, feat_dim))

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        """Uniform integers in the closed interval [low, high]."""
        return self.rng.integers(low, high + 1, size=size)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self.rng.choice(n, size=size, replace=replace)

    def standard_normal(self, shape) -> np.ndarray:
        return self.rng.standard_normal(shape)

    def spawn(self) -> "NoiseStream":
        return NoiseStream(int(self.rng.integers(2 ** 63 - 1)), self.rotation)


def split_seed(seed: int, names: Iterable[str]) -> dict[str, int]:
    """Independent child seeds for named streams."""
    names = list(names)
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: int(child.generate_state(1, dtype=np.uint64)[0] >> 1) for name, child in zip(names, children)}


# --------------------------------------------------------------------------
# XYZ-style text records


def format_xyz(p: PointSet, comment: str = "", types: Sequence[int] | None = None) -> str:
    if types is None:
        types = np.argmax(p.feats, axis=1)
    lines = [str(p.node_count), comment.replace("\n", " ")]
    for k in range(p.node_count):
        vals = list(p.coords[k]) + list(p.feats[k])
        lines.append(f"{int(types[k])} " + " ".join(f"{v:.9g}" for v in vals))
    return "\n".join(lines) + "\n"


def write_xyz(points: Iterable[PointSet], dest: str | Path | TextIO, comments: Sequence[str] | None = None) -> None:
    records = []
    for k, p in enumerate(points):
        records.append(format_xyz(p, comments[k] if comments else f"sample {k}"))
    text = "\n".join(records)
    if isinstance(dest, (str, Path)):
        Path(dest).parent.mkdir(parents=True, exist_ok=True)
        Path(dest).write_text(text)
    else:
        dest.write(text)


def read_xyz(src: str | Path | TextIO) -> list[PointSet]:
    """Parse concatenated records; blank lines between records are ignored."""
    if isinstance(src, (str, Path)):
        text = Path(src).read_text()
    else:
        text = src.read()
    lines = io.StringIO(text).read().splitlines()
    out: list[PointSet] = []
    k = 0
    while k < len(lines):
        if not lines[k].strip():
            k += 1
            continue
        n = int(lines[k].strip())
        rows = [lines[k + 2 + j].split() for j in range(n)]
        vals = np.array([[float(v) for v in row[1:]] for row in rows])
        out.append(PointSet(vals[:, :3], vals[:, 3:]))
        k += 2 + n
    return out
