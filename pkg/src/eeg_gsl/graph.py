"""Multi-head graph structure learning and Chebyshev graph convolution.

Each attention head h learns its own adjacency over electrodes:

    Q_h = X W_qh,  K_h = X W_kh,  A_h = row_softmax(Q_h K_h^T / sqrt(d_K))

with X the (C, d_m) per-electrode embeddings. Every head's graph drives
its own single Chebyshev layer (per-head feature weights); head outputs
are concatenated, projected back to d_m, residually added to X, mean
pooled over electrodes, and classified by a linear layer.

The learned A is row-stochastic but not symmetric, so the Laplacian is
built from the symmetrized adjacency; lambda_max is pinned at 2 (the
upper bound for normalized Laplacians) instead of a per-sample eigensolve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from eeg_gsl import autodiff as ad
from eeg_gsl.autodiff import Tensor


@dataclass
class GSLConfig:
    heads: int = 2
    d_k: int | None = None          # default d_m // heads
    cheb_k: int = 5
    dropout: float = 0.2

    def __post_init__(self):
        if self.heads < 1 or self.cheb_k < 1:
            raise ValueError("heads and cheb_k must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def resolved_d_k(self, d_m: int) -> int:
        return self.d_k if self.d_k is not None else max(1, d_m // self.heads)

    @classmethod
    def from_dict(cls, d: dict) -> "GSLConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return {"heads": self.heads, "d_k": self.d_k, "cheb_k": self.cheb_k, "dropout": self.dropout}


@dataclass
class HeadGraphs:
    """Per-head attention intermediates; adjacency rows sum to 1."""

    queries: list[Tensor]           # each (B, C, d_K)
    keys: list[Tensor]              # each (B, C, d_K)
    adjacency: list[Tensor]         # each (B, C, C)


def mhgsl(embeddings: Tensor, w_q: list[Tensor], w_k: list[Tensor]) -> HeadGraphs:
    """Learned adjacency per head from per-electrode embeddings (B, C, d_m)."""
    queries, keys, adjacency = [], [], []
    for wq, wk in zip(w_q, w_k):
        d_k = wq.shape[-1]
        q = ad.matmul(embeddings, wq)
        k = ad.matmul(embeddings, wk)
        logits = ad.scalar_mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_k))
        queries.append(q)
        keys.append(k)
        adjacency.append(ad.row_softmax(logits))
    return HeadGraphs(queries, keys, adjacency)


def scaled_laplacian(adj: Tensor, lambda_max: float = 2.0) -> Tensor:
    """Chebyshev-ready Laplacian from a (batched) row-stochastic adjacency.

    A_sym = (A + A^T) / 2; L = I - D^{-1/2} A_sym D^{-1/2};
    returns (2 / lambda_max) L - I, symmetric with spectrum in [-1, 1].
    """
    C = adj.shape[-1]
    if adj.shape[-2] != C:
        raise ad.ShapeError(f"scaled_laplacian: adjacency must be square, got {adj.shape}")
    a_sym = ad.scalar_mul(ad.add(adj, ad.transpose(adj)), 0.5)
    deg = ad.tsum(a_sym, axis=-1)
    if np.any(deg.data <= 0.0):
        raise ValueError("scaled_laplacian: zero row sum in symmetrized adjacency")
    r = ad.pow_scalar(deg, -0.5)
    rows = ad.reshape(r, r.shape + (1,))
    cols = ad.reshape(r, r.shape[:-1] + (1, r.shape[-1]))
    norm_adj = ad.mul(ad.mul(rows, a_sym), cols)
    eye = Tensor(np.broadcast_to(np.eye(C, dtype=np.float32), adj.shape).copy())
    lap = ad.sub(eye, norm_adj)
    return ad.sub(ad.scalar_mul(lap, 2.0 / lambda_max), eye)


def cheb_conv(
    x: Tensor,
    lap: Tensor,
    thetas: list[Tensor],
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> Tensor:
    """Sum_k T_k(L) X Theta_k with the Chebyshev recurrence applied to X.

    x: (B, C, d_m), lap: (B, C, C), thetas: K weight matrices (d_m, d_m).
    """
    if not thetas:
        raise ValueError("cheb_conv: need K >= 1 theta matrices")
    z_prev = x
    out = ad.matmul(z_prev, thetas[0])
    if len(thetas) > 1:
        z_cur = ad.matmul(lap, x)
        out = ad.add(out, ad.matmul(z_cur, thetas[1]))
        for theta in thetas[2:]:
            z_next = ad.sub(ad.scalar_mul(ad.matmul(lap, z_cur), 2.0), z_prev)
            out = ad.add(out, ad.matmul(z_next, theta))
            z_prev, z_cur = z_cur, z_next
    if train and dropout > 0.0:
        if rng is None:
            raise ValueError("cheb_conv: dropout in train mode needs an rng")
        out = ad.dropout(out, dropout, rng, train=True)
    return out


def fuse_and_classify(
    embeddings: Tensor,
    head_outputs: list[Tensor],
    w_fuse: Tensor,
    b_fuse: Tensor,
    w_cls: Tensor,
    b_cls: Tensor,
) -> tuple[Tensor, Tensor]:
    """Concat heads, project to d_m, add residual, pool electrodes, classify.

    Returns (pooled (B, d_m), logits (B, 2)).
    """
    cat = head_outputs[0] if len(head_outputs) == 1 else ad.concat(head_outputs, axis=-1)
    proj = ad.add(ad.matmul(cat, w_fuse), b_fuse)
    fused = ad.add(proj, embeddings)
    pooled = ad.tmean(fused, axis=1)
    logits = ad.add(ad.matmul(pooled, w_cls), b_cls)
    return pooled, logits
