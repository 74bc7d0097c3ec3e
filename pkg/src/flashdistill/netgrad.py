"""Flat parameter vectors, gradient reports, finite-difference checks, checkpoints.

Gradients are taken with torch autograd in float64; ``grad_check`` is the
independent central-difference route that gates every gradient path.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from .geom import DTYPE

SCHEMA_VERSION = 1
_MAGIC = b"FDCKPT\x00\x01"


@dataclass
class ParamVector:
    """A flat float64 vector with a named-segment layout.

    ``layout`` maps segment name -> (offset, shape); segments are disjoint
    and tile the whole vector in insertion order.
    """

    values: torch.Tensor
    layout: dict[str, tuple[int, tuple[int, ...]]]

    def __post_init__(self):
        self.values = torch.as_tensor(self.values, dtype=DTYPE).reshape(-1)
        end = 0
        for name, (off, shape) in self.layout.items():
            if off != end:
                raise ValueError(f"segment {name!r} does not start at {end}")
            end = off + math.prod(shape)
        if end != self.values.numel():
            raise ValueError(f"layout covers {end} entries, vector has {self.values.numel()}")

    @classmethod
    def from_shapes(cls, shapes: Mapping[str, tuple[int, ...]], init: Callable[[str, tuple], np.ndarray]) -> "ParamVector":
        layout, chunks, off = {}, [], 0
        for name, shape in shapes.items():
            shape = tuple(int(s) for s in shape)
            layout[name] = (off, shape)
            chunk = np.asarray(init(name, shape), dtype=np.float64).reshape(-1)
            chunks.append(chunk)
            off += chunk.size
        return cls(torch.tensor(np.concatenate(chunks) if chunks else np.zeros(0), dtype=DTYPE), layout)

    def __len__(self) -> int:
        return self.values.numel()

    def views(self, values: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        """Reshaped segment views of ``values`` (defaults to our own); autograd flows through."""
        v = self.values if values is None else values
        return {name: v[off:off + math.prod(shape)].view(shape) for name, (off, shape) in self.layout.items()}

    def segment(self, name: str) -> torch.Tensor:
        return self.views()[name]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.detach().clone(), dict(self.layout))

    def with_values(self, values: torch.Tensor) -> "ParamVector":
        return ParamVector(values.detach().clone(), dict(self.layout))

    def split(self, flat: torch.Tensor) -> dict[str, torch.Tensor]:
        return {k: t.detach().clone() for k, t in self.views(flat).items()}


@dataclass
class GradReport:
    loss: float
    grad: torch.Tensor
    layout: dict[str, tuple[int, tuple[int, ...]]]

    @property
    def segments(self) -> dict[str, torch.Tensor]:
        return {name: self.grad[off:off + math.prod(shape)].view(shape) for name, (off, shape) in self.layout.items()}

    def norm(self) -> float:
        return float(self.grad.norm())

    def __add__(self, other: "GradReport") -> "GradReport":
        return GradReport(self.loss + other.loss, self.grad + other.grad, self.layout)

    def scaled(self, a: float) -> "GradReport":
        return GradReport(a * self.loss, a * self.grad, self.layout)


def value_and_grad(loss_fn: Callable[[torch.Tensor], torch.Tensor], params: ParamVector) -> GradReport:
    """Evaluate a torch scalar ``loss_fn(values)`` and its gradient w.r.t. the flat vector."""
    values = params.values.detach().clone().requires_grad_(True)
    loss = loss_fn(values)
    (grad,) = torch.autograd.grad(loss, values, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(values)
    return GradReport(float(loss.detach()), grad.detach(), dict(params.layout))


class NonFiniteProbe(ArithmeticError):
    pass


def grad_check(
    loss_fn: Callable[[torch.Tensor], float],
    grad_fn: Callable[[torch.Tensor], torch.Tensor],
    params: ParamVector,
    directions: int = 100,
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference directional derivatives.

    ``loss_fn`` must be deterministic in its argument (fix any sampling noise
    inside it).  Relative error is ``|a - b| / max(|a|, |b|, 1e-12)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    rng = np.random.default_rng(seed)
    base = params.values.detach().clone()
    g = torch.as_tensor(grad_fn(base.clone()), dtype=DTYPE).reshape(-1)
    worst = 0.0
    for k in range(directions):
        u = torch.tensor(rng.standard_normal(base.numel()), dtype=DTYPE)
        u /= u.norm()
        plus = float(loss_fn(base + eps * u))
        minus = float(loss_fn(base - eps * u))
        if not (math.isfinite(plus) and math.isfinite(minus)):
            raise NonFiniteProbe(f"non-finite loss at probe {k} (+: {plus}, -: {minus})")
        numeric = (plus - minus) / (2.0 * eps)
        analytic = float(g @ u)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, rel)
    return worst


def autograd_pair(builder: Callable[[torch.Tensor], torch.Tensor]):
    """(loss_fn, grad_fn) for grad_check from a torch scalar builder."""

    def loss_fn(values):
        with torch.no_grad():
            return float(builder(values))

    def grad_fn(values):
        v = values.detach().clone().requires_grad_(True)
        (g,) = torch.autograd.grad(builder(v), v, allow_unused=True)
        return torch.zeros_like(v) if g is None else g

    return loss_fn, grad_fn


# --------------------------------------------------------------------------
# checkpoints
#
# layout: magic | u32 schema | u32 header_len | header json |
#         u32 n_segments | per segment: u16 name_len | name | u64 length | <f8 * length


def save_checkpoint(path: str | Path, header: dict, vectors: Mapping[str, ParamVector]) -> None:
    layouts = {k: {name: [off, list(shape)] for name, (off, shape) in pv.layout.items()} for k, pv in vectors.items()}
    head = json.dumps({**header, "layouts": layouts}, sort_keys=True).encode()
    segs = []
    for key, pv in vectors.items():
        for name, tensor in pv.views().items():
            segs.append((f"{key}/{name}", tensor.detach().reshape(-1).numpy().astype("<f8")))
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<II", SCHEMA_VERSION, len(head))
    buf += head
    buf += struct.pack("<I", len(segs))
    for name, arr in segs:
        raw = name.encode()
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<Q", arr.size) + arr.tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, ParamVector]]:
    data = Path(path).read_bytes()
    if data[:len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    pos = len(_MAGIC)
    schema, head_len = struct.unpack_from("<II", data, pos)
    if schema != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {schema}")
    pos += 8
    header = json.loads(data[pos:pos + head_len].decode())
    pos += head_len
    (n_segs,) = struct.unpack_from("<I", data, pos)
    pos += 4
    flat: dict[str, np.ndarray] = {}
    for _ in range(n_segs):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (length,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        flat[name] = np.frombuffer(data, dtype="<f8", count=length, offset=pos).copy()
        pos += 8 * length
    layouts = header.pop("layouts")
    vectors = {}
    for key, lay in layouts.items():
        ordered = sorted(lay.items(), key=lambda kv: kv[1][0])
        layout = {name: (int(off), tuple(shape)) for name, (off, shape) in ordered}
        chunks = [flat[f"{key}/{name}"] for name in layout]
        vectors[key] = ParamVector(torch.tensor(np.concatenate(chunks), dtype=DTYPE), layout)
    return header, vectors
