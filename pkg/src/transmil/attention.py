"""Multi-head self-attention, exact and Nystrom-approximated."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    layer_norm,
    pinv_newton_schulz,
    reshape,
    segment_mean,
    softmax,
    transpose,
)

MODES = ("exact", "nystrom")


@dataclass(frozen=True)
class MSAConfig:
    dim: int
    heads: int = 8
    landmarks: int = 64
    pinv_iters: int = 6

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide dim ({self.dim})")
        if self.landmarks < 1:
            raise ValueError(f"landmarks must be >= 1, got {self.landmarks}")
        if self.pinv_iters < 1:
            raise ValueError(f"pinv_iters must be >= 1, got {self.pinv_iters}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class MSAWeights:
    """Pre-norm parameters plus packed per-head projections (columns grouped by head)."""

    ln_gamma: Tensor
    ln_beta: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    FIELDS = ("ln_gamma", "ln_beta", "w_q", "w_k", "w_v", "w_o")

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "MSAWeights":
        std = 1.0 / math.sqrt(dim)
        return cls(
            Tensor(np.ones(dim), True),
            Tensor(np.zeros(dim), True),
            *(Tensor(rng.normal(0.0, std, (dim, dim)), True) for _ in range(4)),
        )

    @classmethod
    def zeros(cls, dim: int) -> "MSAWeights":
        return cls(
            Tensor(np.ones(dim), True),
            Tensor(np.zeros(dim), True),
            *(Tensor(np.zeros((dim, dim)), True) for _ in range(4)),
        )

    def parameters(self) -> list[Tensor]:
        return [getattr(self, f) for f in self.FIELDS]


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} are inconsistent")


def exact_self_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d_q)) V over the last two axes; returns (context, attn)."""
    _check_qkv(q, k, v)
    attn = softmax(q @ transpose(k) * (1.0 / math.sqrt(q.shape[-1])))
    return attn @ v, attn


def select_landmarks(x: Tensor, count: int) -> Tensor:
    """Segment means of the rows of ``x``; ``count`` is clamped to the row count."""
    if count < 1:
        raise ValueError(f"landmark count must be >= 1, got {count}")
    return segment_mean(x, min(count, x.shape[-2]))


def nystrom_factors(q: Tensor, k: Tensor, landmarks: int, pinv_iters: int):
    """The three kernels of the Nystrom reconstruction and the middle pseudoinverse.

    Returns (left, pinv, right) with shapes s x m, m x m, m x s per head.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    q_l = select_landmarks(q, landmarks)
    k_l = select_landmarks(k, landmarks)
    left = softmax(q @ transpose(k_l) * scale)
    middle = softmax(q_l @ transpose(k_l) * scale)
    right = softmax(q_l @ transpose(k) * scale)
    return left, pinv_newton_schulz(middle, pinv_iters), right


def nystrom_attention(
    q: Tensor, k: Tensor, v: Tensor, landmarks: int = 64, pinv_iters: int = 6
) -> Tensor:
    """Linear-cost approximation of exact attention context.

    The product is associated as (left @ pinv) @ (right @ v); the largest
    intermediate is s x max(m, d_q).
    """
    _check_qkv(q, k, v)
    left, pinv, right = nystrom_factors(q, k, landmarks, pinv_iters)
    return (left @ pinv) @ (right @ v)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    s, d = x.shape
    return transpose(reshape(x, (s, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, s, dh = x.shape
    return reshape(transpose(x, (1, 0, 2)), (s, h * dh))


def msa_block(
    x: Tensor,
    weights: MSAWeights,
    cfg: MSAConfig,
    mode: str = "nystrom",
    return_class_attention: bool = False,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
):
    """Pre-norm residual multi-head self-attention: x + MSA(LN(x)).

    With ``return_class_attention`` also returns row 0 of the (possibly
    reconstructed) attention matrix averaged over heads, as a numpy vector
    over all s tokens. Nystrom mode computes only that row, never s x s.
    Inverted dropout at ``dropout`` hits the attention output before the
    residual add, and only when ``rng`` is given (training).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if x.ndim != 2 or x.shape[1] != cfg.dim:
        raise ShapeError(f"msa_block expects s x {cfg.dim} input, got {x.shape}")
    y = layer_norm(x, weights.ln_gamma, weights.ln_beta)
    q = _split_heads(y @ weights.w_q, cfg.heads)
    k = _split_heads(y @ weights.w_k, cfg.heads)
    v = _split_heads(y @ weights.w_v, cfg.heads)
    if mode == "exact":
        ctx, attn = exact_self_attention(q, k, v)
        cls_row = attn.data[:, 0, :] if return_class_attention else None
    else:
        left, pinv, right = nystrom_factors(q, k, cfg.landmarks, cfg.pinv_iters)
        ctx = (left @ pinv) @ (right @ v)
        cls_row = None
        if return_class_attention:
            cls_row = ((left.data[:, :1, :] @ pinv.data) @ right.data)[:, 0, :]
    update = _merge_heads(ctx) @ weights.w_o
    if dropout > 0.0 and rng is not None:
        keep = rng.random(update.shape) >= dropout
        update = update * (keep / (1.0 - dropout))
    out = x + update
    if return_class_attention:
        return out, cls_row.mean(axis=0)
    return out
