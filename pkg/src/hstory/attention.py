"""Additive soft attention over the spatial locations of one image."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass
class AttentionParams:
    W_h: Tensor      # (D, A) hidden-state projection
    W_x: Tensor      # (D, A) location projection
    w_score: Tensor  # (A,)
    b: Tensor        # (A,)

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, attn_dim: int, prefix: str = "attn"):
        bound = 1.0 / np.sqrt(dim)

        def u(*shape):
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            W_h=Tensor(u(dim, attn_dim), requires_grad=True, name=f"{prefix}.W_h"),
            W_x=Tensor(u(dim, attn_dim), requires_grad=True, name=f"{prefix}.W_x"),
            w_score=Tensor(u(attn_dim), requires_grad=True, name=f"{prefix}.w_score"),
            b=Tensor(u(attn_dim), requires_grad=True, name=f"{prefix}.b"),
        )

    def tensors(self) -> list[Tensor]:
        return [self.W_h, self.W_x, self.w_score, self.b]


def project_keys(locations, params: AttentionParams) -> Tensor:
    """``locations @ W_x``; independent of the decoder state, so computed once per image."""
    return nx.ordered_matmul(locations, params.W_x)


def attend(h_prev, locations, params: AttentionParams, keys: Tensor | None = None):
    """Attention weights over locations and the weighted context vector.

    ``h_prev`` is ``(..., D)`` and ``locations`` ``(..., M, D)`` with matching
    leading dims.  Returns ``alpha`` of shape ``(..., M)`` and ``z`` of shape
    ``(..., D)`` where::

        score_j = w_score . tanh(W_h^T h_prev + W_x^T x_j + b)
        alpha   = softmax(score)
        z       = sum_j alpha_j x_j
    """
    h_prev, locations = nx.tensor(h_prev), nx.tensor(locations)
    if locations.ndim < 2 or locations.shape[-2] == 0:
        raise ValueError(f"attention needs at least one location, got shape {locations.shape}")
    if h_prev.shape[-1] != locations.shape[-1] or h_prev.shape[-1] != params.W_h.shape[0]:
        raise nx.ShapeError(
            f"attend: hidden {h_prev.shape}, locations {locations.shape}, W_h {params.W_h.shape}")
    if keys is None:
        keys = project_keys(locations, params)
    query = nx.matmul(h_prev, params.W_h)
    query = nx.reshape(query, query.shape[:-1] + (1, query.shape[-1]))
    hidden = nx.tanh(keys + query + params.b)
    # order-free reductions: permuting locations permutes alpha and leaves z bit-identical
    alpha = nx.softmax(nx.ordered_matmul(hidden, params.w_score), axis=-1, order_free=True)
    weights = nx.reshape(alpha, alpha.shape + (1,))
    z = nx.sorted_sum(weights * locations, axis=-2)
    return alpha, z
