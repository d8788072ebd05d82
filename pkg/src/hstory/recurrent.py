"""LSTM cell with an extra visual-context input.

    i = sigmoid(W_xi x + W_hi h + W_zi z + b_i)
    f = sigmoid(W_xf x + W_hf h + W_zf z + b_f)
    o = sigmoid(W_xo x + W_ho h + W_zo z + b_o)
    q = tanh   (W_xq x + W_hq h + W_zq z + b_q)
    c' = f * c + i * q
    h' = o * tanh(c')

The four gates are stored stacked along the last axis in the order i, f, o, q.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .numerics import Tensor

GATES = "ifoq"


class CellState(NamedTuple):
    h: Tensor
    c: Tensor


@dataclass
class LstmParams:
    W_x: Tensor  # (D_in, 4D)
    W_h: Tensor  # (D, 4D)
    W_z: Tensor  # (D, 4D)
    b: Tensor    # (4D,)

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, dim: int, prefix: str,
             forget_bias: float = 1.0):
        bound = 1.0 / np.sqrt(dim)

        def u(*shape):
            return rng.uniform(-bound, bound, size=shape)

        b = u(4 * dim)
        b[dim:2 * dim] = forget_bias
        return cls(
            W_x=Tensor(u(d_in, 4 * dim), requires_grad=True, name=f"{prefix}.W_x"),
            W_h=Tensor(u(dim, 4 * dim), requires_grad=True, name=f"{prefix}.W_h"),
            W_z=Tensor(u(dim, 4 * dim), requires_grad=True, name=f"{prefix}.W_z"),
            b=Tensor(b, requires_grad=True, name=f"{prefix}.b"),
        )

    @property
    def dim(self) -> int:
        return self.W_h.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.W_x, self.W_h, self.W_z, self.b]

    def gate(self, g: str) -> dict[str, np.ndarray]:
        """Per-gate views ``{"W_x", "W_h", "W_z", "b"}`` of gate ``g`` in ``"ifoq"``."""
        d = self.dim
        sl = slice(GATES.index(g) * d, (GATES.index(g) + 1) * d)
        return {"W_x": self.W_x.data[:, sl], "W_h": self.W_h.data[:, sl],
                "W_z": self.W_z.data[:, sl], "b": self.b.data[sl]}


def zero_state(dim: int, batch_shape=()) -> CellState:
    return CellState(Tensor(np.zeros(batch_shape + (dim,))), Tensor(np.zeros(batch_shape + (dim,))))


def step(x, z, prev: CellState, params: LstmParams) -> CellState:
    x, z = nx.tensor(x), nx.tensor(z)
    d = params.dim
    if (x.shape[-1] != params.W_x.shape[0] or z.shape[-1] != params.W_z.shape[0]
            or prev.h.shape[-1] != d or prev.c.shape[-1] != d):
        raise nx.ShapeError(
            f"lstm step: x {x.shape}, z {z.shape}, h {prev.h.shape}, c {prev.c.shape} "
            f"vs W_x {params.W_x.shape}, W_z {params.W_z.shape}, hidden {d}")
    pre = (nx.matmul(x, params.W_x) + nx.matmul(prev.h, params.W_h)
           + nx.matmul(z, params.W_z) + params.b)
    gates = nx.sigmoid(pre[..., :3 * d])
    q = nx.tanh(pre[..., 3 * d:])
    i, f, o = gates[..., :d], gates[..., d:2 * d], gates[..., 2 * d:]
    c = f * prev.c + i * q
    h = o * nx.tanh(c)
    return CellState(h, c)
