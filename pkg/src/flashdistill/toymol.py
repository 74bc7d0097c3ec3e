"""Procedural toy molecules and the stability / validity / uniqueness metrics.

Two atom types, A (valence 1) and B (valence 2), one-hot in the features.
Bonds are read off a distance lookup table with disjoint intervals, so only
paths A-B...B-A (or A-A) and B rings are chemically valid.  Templates place
every bond at its interval midpoint; chains are planar all-trans zigzags.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import networkx as nx
import numpy as np

from .geom import PointSet, pairwise_distances, project_zero_com, random_rotation, read_xyz, write_xyz

TYPE_NAMES = ("A", "B")


@dataclass(frozen=True)
class ToyChemSpec:
    valence: tuple[int, int] = (1, 2)
    # unordered type pair -> closed distance interval
    bond_table: dict = field(default_factory=lambda: {
        (0, 0): (0.90, 1.10),
        (0, 1): (1.30, 1.50),
        (1, 1): (1.70, 1.90),
    })
    jitter_sigma: float = 0.01
    bond_angle_deg: float = 120.0

    def __post_init__(self):
        spans = sorted(self.bond_table.values())
        if any(lo2 <= hi1 for (_, hi1), (lo2, _) in zip(spans, spans[1:])):
            raise ValueError("bond intervals must be pairwise disjoint")
        if min(self.valence) < 1:
            raise ValueError("valences must be positive")

    @property
    def feat_dim(self) -> int:
        return len(self.valence)

    def interval(self, a: int, b: int) -> tuple[float, float]:
        return self.bond_table[(min(a, b), max(a, b))]

    def midpoint(self, a: int, b: int) -> float:
        lo, hi = self.interval(a, b)
        return 0.5 * (lo + hi)


@dataclass(frozen=True)
class MolMetrics:
    atom_stab: float
    mol_stab: float
    valid: float
    valid_unique: float
    n_samples: int
    # distinct valid graphs per valid molecule (0 when nothing is valid)
    uniqueness: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# templates


def chain_template(n: int, spec: ToyChemSpec) -> tuple[np.ndarray, np.ndarray]:
    """A-B...B-A (n >= 2; n == 2 is the A-A dimer) as a planar zigzag."""
    if n < 2:
        raise ValueError("chains need at least 2 atoms")
    types = np.array([0] + [1] * (n - 2) + [0])
    half = np.deg2rad(spec.bond_angle_deg) / 2.0
    coords = np.zeros((n, 3))
    for k in range(1, n):
        bond = spec.midpoint(types[k - 1], types[k])
        side = 1.0 if k % 2 else -1.0
        coords[k] = coords[k - 1] + bond * np.array([np.sin(half), side * np.cos(half), 0.0])
    return types, coords


def ring_template(n: int, spec: ToyChemSpec) -> tuple[np.ndarray, np.ndarray]:
    """Regular n-gon of B atoms (n >= 3)."""
    if n < 3:
        raise ValueError("rings need at least 3 atoms")
    side = spec.midpoint(1, 1)
    radius = side / (2.0 * np.sin(np.pi / n))
    ang = 2.0 * np.pi * np.arange(n) / n
    coords = np.stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(n)], axis=1)
    return np.ones(n, dtype=int), coords


def templates_for_size(n: int, spec: ToyChemSpec) -> list[tuple[str, np.ndarray, np.ndarray]]:
    out = [("chain", *chain_template(n, spec))]
    if n >= 3:
        out.append(("ring", *ring_template(n, spec)))
    return out


def one_hot(types: Sequence[int], d: int) -> np.ndarray:
    out = np.zeros((len(types), d))
    out[np.arange(len(types)), np.asarray(types)] = 1.0
    return out


# --------------------------------------------------------------------------
# bonds and metrics


def decode_types(p: PointSet) -> np.ndarray:
    return np.argmax(p.feats, axis=1)


def bond_matrix(p: PointSet, spec: ToyChemSpec) -> np.ndarray:
    types = decode_types(p)
    dist = pairwise_distances(p.coords)
    n = p.node_count
    bonded = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            lo, hi = spec.interval(types[i], types[j])
            if lo <= dist[i, j] <= hi:
                bonded[i, j] = bonded[j, i] = True
    return bonded


def analyse(p: PointSet, spec: ToyChemSpec) -> dict:
    types = decode_types(p)
    bonded = bond_matrix(p, spec)
    degree = bonded.sum(1)
    valence = np.asarray(spec.valence)[types]
    stable_atoms = degree == valence
    mol_stable = bool(stable_atoms.all())
    graph = nx.from_numpy_array(bonded.astype(int))
    connected = nx.is_connected(graph) if p.node_count > 0 else False
    pairs = Counter()
    for i, j in zip(*np.nonzero(np.triu(bonded))):
        pairs[tuple(sorted((int(types[i]), int(types[j]))))] += 1
    key = (tuple(sorted(pairs.items())), tuple(np.bincount(types, minlength=spec.feat_dim).tolist()))
    return {
        "n_stable_atoms": int(stable_atoms.sum()),
        "n_atoms": p.node_count,
        "mol_stable": mol_stable,
        "valid": mol_stable and connected,
        "key": key,
    }


def compute_metrics(samples: Sequence[PointSet], spec: ToyChemSpec | None = None) -> MolMetrics:
    spec = spec or ToyChemSpec()
    if not samples:
        raise ValueError("no samples")
    infos = [analyse(p, spec) for p in samples]
    n = len(infos)
    atoms = sum(i["n_atoms"] for i in infos)
    keys = {i["key"] for i in infos if i["valid"]}
    n_valid = sum(i["valid"] for i in infos)
    return MolMetrics(
        atom_stab=sum(i["n_stable_atoms"] for i in infos) / atoms,
        mol_stab=sum(i["mol_stable"] for i in infos) / n,
        valid=n_valid / n,
        valid_unique=len(keys) / n,
        n_samples=n,
        uniqueness=len(keys) / n_valid if n_valid else 0.0,
    )


def radius_of_gyration(p: PointSet) -> float:
    c = p.coords - p.coords.mean(0)
    return float(np.sqrt((c ** 2).sum(1).mean()))


# --------------------------------------------------------------------------
# dataset


def generate_dataset(
    spec: ToyChemSpec,
    n: int,
    size_range: tuple[int, int],
    rng: np.random.Generator | int,
    max_tries: int = 100,
) -> list[PointSet]:
    """Jittered, randomly posed template molecules; every sample is valid."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    lo, hi = size_range
    if not 2 <= lo <= hi <= 9:
        raise ValueError("size range must satisfy 2 <= n_min <= n_max <= 9")
    out = []
    for _ in range(n):
        size = int(rng.integers(lo, hi + 1))
        choices = templates_for_size(size, spec)
        _, types, coords = choices[int(rng.integers(len(choices)))]
        for _attempt in range(max_tries):
            rot = random_rotation(rng)
            pos = coords @ rot.mat + spec.jitter_sigma * rng.standard_normal(coords.shape)
            p = project_zero_com(PointSet(pos, one_hot(types, spec.feat_dim)))
            if analyse(p, spec)["valid"]:
                out.append(p)
                break
        else:
            raise RuntimeError(f"could not realise a valid molecule of size {size}")
    return out


def size_histogram(points: Sequence[PointSet]) -> dict[int, int]:
    return dict(sorted(Counter(p.node_count for p in points).items()))


def save_dataset(points: Sequence[PointSet], path: str | Path) -> None:
    write_xyz(points, path, [f"mol {k}" for k in range(len(points))])


def load_dataset(path: str | Path) -> list[PointSet]:
    return read_xyz(path)


def metrics_json(m: MolMetrics) -> str:
    return json.dumps(m.to_dict(), sort_keys=True)
