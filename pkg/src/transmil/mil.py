"""Correlated multiple-instance learning: label rule, pooling operators, the
generic f/h/P/g pipeline, and entropy of discrete joint distributions."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attention import _split_heads, exact_self_attention, msa_block
from .errors import EmptyBagError, ParameterError
from .model import TransMILModel, _head, feature_reduce, square_sequence
from .ppeg import ppeg_forward
from .tensor import ShapeError, Tensor, matmul, reshape

POOLING_KINDS = ("max", "mean", "bypass_attention", "self_attention")


@dataclass
class Bag:
    """n x d instance embeddings with a bag-level class index."""

    instances: np.ndarray
    label: int
    id: str = ""
    patient_id: str = ""

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise EmptyBagError(f"bag {self.id!r} needs a non-empty n x d matrix")
        if not self.patient_id:
            self.patient_id = self.id

    @property
    def n(self) -> int:
        return self.instances.shape[0]

    @property
    def dim(self) -> int:
        return self.instances.shape[1]


def bag_label_rule(instance_labels: Sequence[int]) -> int:
    """0 iff every instance is negative."""
    labels = list(instance_labels)
    if not labels:
        raise EmptyBagError("a bag needs at least one instance label")
    return int(any(labels))


# ---------------------------------------------------------------------------
# pooling matrices


@dataclass
class PoolingMatrix:
    kind: str
    matrix: np.ndarray


def build_pooling_matrix(kind: str, n: int, scores=None, features=None) -> PoolingMatrix:
    """n x n aggregation matrix for the classic operators and self-attention.

    ``max`` puts a single 1 at the argmax of ``scores``; ``bypass_attention``
    softmax-normalizes ``scores`` onto the diagonal; ``self_attention`` is the
    attention matrix of ``features`` attending to themselves.
    """
    if kind not in POOLING_KINDS:
        raise ParameterError(f"unknown pooling kind {kind!r}")
    if n < 1:
        raise EmptyBagError("pooling over zero instances")
    if kind in ("max", "bypass_attention"):
        if scores is None:
            raise ParameterError(f"{kind} pooling needs per-instance scores")
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (n,):
            raise ParameterError(f"expected {n} scores, got shape {scores.shape}")
    if kind == "mean":
        return PoolingMatrix(kind, np.eye(n) / n)
    if kind == "max":
        mat = np.zeros((n, n))
        j = int(np.argmax(scores))
        mat[j, j] = 1.0
        return PoolingMatrix(kind, mat)
    if kind == "bypass_attention":
        w = np.exp(scores - scores.max())
        return PoolingMatrix(kind, np.diag(w / w.sum()))
    if features is None:
        raise ParameterError("self_attention pooling needs instance features")
    x = Tensor(features)
    if x.shape[0] != n:
        raise ParameterError(f"features have {x.shape[0]} rows, expected {n}")
    _, attn = exact_self_attention(x, x, x)
    return PoolingMatrix(kind, attn.data)


def check_pooling_matrix(p: PoolingMatrix, atol: float = 1e-12) -> bool:
    m = p.matrix
    off = m - np.diag(np.diag(m))
    diag = np.diag(m)
    if p.kind == "max":
        return np.count_nonzero(m) == 1 and np.count_nonzero(diag == 1.0) == 1
    if p.kind == "mean":
        return bool(np.all(off == 0) and np.allclose(diag, 1.0 / m.shape[0], rtol=0, atol=atol))
    if p.kind == "bypass_attention":
        return bool(np.all(off == 0) and np.all(diag >= 0) and abs(diag.sum() - 1) <= atol)
    return bool(np.all(m >= 0) and np.allclose(m.sum(axis=1), 1.0, rtol=0, atol=atol))


# ---------------------------------------------------------------------------
# generic three-step pipeline


def generic_three_step(bag, f: Callable, h: Callable, pooling: Callable, g: Callable):
    """X_fh = f(X) + h(X); X_P = P X_fh; return g(X_P).

    ``pooling`` maps X_fh to P: an n x n matrix, a PoolingMatrix, or a stack
    k x n x n of matrices (one aggregation per stack entry, giving k x n x d).
    """
    x = bag.instances if isinstance(bag, Bag) else bag
    x = x if isinstance(x, Tensor) else Tensor(x)
    x_f, x_h = f(x), h(x)
    if x_f.shape != x_h.shape:
        raise ShapeError(f"f and h disagree: {x_f.shape} vs {x_h.shape}")
    x_fh = x_f + x_h
    p = pooling(x_fh)
    if isinstance(p, PoolingMatrix):
        p = p.matrix
    p = p if isinstance(p, Tensor) else Tensor(p)
    if p.shape[-1] != x_fh.shape[0]:
        raise ShapeError(f"pooling matrix {p.shape} cannot aggregate {x_fh.shape[0]} rows")
    return g(matmul(p, x_fh))


def pooled_row(x_p: Tensor) -> Tensor:
    """Collapse P X to one bag vector by summing rows (diagonal P makes this the pool)."""
    return x_p.sum(axis=0, keepdims=True)


def zero_h(x: Tensor) -> Tensor:
    return Tensor(np.zeros(x.shape))


def identity_f(x: Tensor) -> Tensor:
    return x


class MeanPoolMIL:
    """i.i.d. baseline: affine instance embedding, mean pooling, linear classifier."""

    def __init__(self, in_dim: int, dim: int = 64, classes: int = 2, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.in_dim = in_dim
        self.classes = classes
        self.embed_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(in_dim), (in_dim, dim)), True)
        self.embed_b = Tensor(np.zeros(dim), True)
        self.head_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(dim), (dim, classes)), True)
        self.head_b = Tensor(np.zeros(classes), True)

    def parameters(self) -> list[Tensor]:
        return [self.embed_w, self.embed_b, self.head_w, self.head_b]

    def logits(self, instances, mode: str = "exact", rng=None) -> Tensor:
        x = instances if isinstance(instances, Tensor) else Tensor(instances)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"bag of shape {x.shape} does not match input width {self.in_dim}")
        n = x.shape[0]
        return generic_three_step(
            x,
            lambda t: t @ self.embed_w + self.embed_b,
            lambda t: Tensor(np.zeros((n, self.embed_b.shape[0]))),
            lambda t: build_pooling_matrix("mean", n),
            lambda xp: reshape(pooled_row(xp) @ self.head_w, (self.classes,)) + self.head_b,
        )


def transmil_components(model: TransMILModel, mode: str = "exact"):
    """(f, h, pooling, g) such that the three-step pipeline reproduces the model.

    f: reduce, square, first MSA layer (morphology, instance correlation).
    h: the PPEG convolution increment (spatial context; zero on the class row).
    pooling: the second layer's aggregation, as a stack [I, A_1 S, ..., A_h S]
        where A_k is head k's attention matrix and S = diag(1/sigma) the
        layer-norm row scale, so each entry is a genuine n x n pooling matrix.
    g: the per-head value/output maps, residual, layer norm and linear head,
        applied to the class row.
    Inputs to f and h are the raw instances; the class row is index 0.
    """
    cfg = model.cfg
    w2 = model.layer2
    eps = 1e-5

    def f(x: Tensor) -> Tensor:
        seq = square_sequence(feature_reduce(x, model), model.class_token)
        return msa_block(seq.tokens, model.layer1, cfg, mode)

    def h(x: Tensor) -> Tensor:
        base = f(x)
        return ppeg_forward(base, model.ppeg) - base

    def pooling(x_fh: Tensor) -> Tensor:
        xd = x_fh.data
        mu = xd.mean(axis=1, keepdims=True)
        inv_sigma = 1.0 / np.sqrt(((xd - mu) ** 2).mean(axis=1) + eps)
        y = Tensor((xd - mu) * inv_sigma[:, None] * w2.ln_gamma.data + w2.ln_beta.data)
        q = _split_heads(y @ w2.w_q, cfg.heads)
        k = _split_heads(y @ w2.w_k, cfg.heads)
        _, attn = exact_self_attention(q, k, q)
        stack = [np.eye(xd.shape[0])] + [a * inv_sigma[None, :] for a in attn.data]
        return Tensor(np.stack(stack))

    def g(x_p: Tensor) -> Tensor:
        d = cfg.dim
        dh = cfg.head_dim
        centre = np.eye(d) - 1.0 / d
        out = x_p[0, 0:1, :]
        for head in range(cfg.heads):
            cols = slice(head * dh, (head + 1) * dh)
            normed = (x_p[head + 1, 0:1, :] @ centre) * w2.ln_gamma + w2.ln_beta
            ctx = normed @ w2.w_v[:, cols]
            out = out + ctx @ w2.w_o[cols, :]
        return _head(model, out)

    return f, h, pooling, g


# ---------------------------------------------------------------------------
# entropy of binary joint distributions


@dataclass
class DiscreteJoint:
    """Joint pmf over n binary variables; axis t of ``table`` is variable t."""

    table: np.ndarray
    n: int = field(init=False)

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim == 1:
            k = int(round(math.log2(t.size))) if t.size else -1
            if k < 1 or 2**k != t.size:
                raise ParameterError(f"table of size {t.size} is not 2^n")
            t = t.reshape((2,) * k)
        if t.shape != (2,) * t.ndim or not 1 <= t.ndim <= 12:
            raise ParameterError(f"table shape {t.shape} is not (2,)*n with n <= 12")
        if np.any(t < 0) or abs(t.sum() - 1.0) > 1e-12:
            raise ParameterError("probabilities must be nonnegative and sum to 1")
        self.table = t
        self.n = t.ndim


def _entropy_bits(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def joint_entropy(joint: DiscreteJoint) -> float:
    return _entropy_bits(joint.table.reshape(-1))


def marginal(joint: DiscreteJoint, keep: Sequence[int]) -> np.ndarray:
    drop = tuple(i for i in range(joint.n) if i not in keep)
    return joint.table.sum(axis=drop)


def marginal_entropy_sum(joint: DiscreteJoint) -> float:
    return sum(_entropy_bits(marginal(joint, (t,))) for t in range(joint.n))


def conditional_chain_entropy(joint: DiscreteJoint) -> float:
    """H(T1) + sum_t H(T_t | T_1..T_{t-1}) from explicit conditional tables."""
    total = _entropy_bits(marginal(joint, (0,)))
    for t in range(1, joint.n):
        prefix = marginal(joint, tuple(range(t + 1)))
        given = prefix.sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            cond = np.where(given > 0, prefix / given, 0.0)
        mask = prefix > 0
        total -= float((prefix[mask] * np.log2(cond[mask])).sum())
    return total


def random_joint(n: int, rng: np.random.Generator) -> DiscreteJoint:
    """Draw from the flat Dirichlet over the 2^n outcomes."""
    p = rng.dirichlet(np.ones(2**n))
    return DiscreteJoint(p / p.sum())


def product_joint(probs: Sequence[float]) -> DiscreteJoint:
    """Independent Bernoulli(p_t) variables."""
    table = np.ones(())
    for p in probs:
        table = np.multiply.outer(table, np.array([1.0 - p, p]))
    return DiscreteJoint(table)


@dataclass
class EntropySweep:
    trials: int
    sizes: tuple[int, ...]
    violations: list[tuple[str, int, np.ndarray, float]] = field(default_factory=list)
    worst_chain_gap: float = 0.0
    worst_product_gap: float = 0.0
    max_slack: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations


def entropy_sweep(trials: int = 1000, sizes=(2, 3, 4), seed: int = 0, tol: float = 1e-9) -> EntropySweep:
    """Check H(joint) <= sum H(marginals) and the chain rule on random tables.

    Product distributions (one per trial, random Bernoulli parameters) must
    meet the inequality with equality.
    """
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    report = EntropySweep(trials, tuple(sizes))
    for n, _ in itertools.product(sizes, range(trials)):
        j = random_joint(n, rng)
        hj, hm, hc = joint_entropy(j), marginal_entropy_sum(j), conditional_chain_entropy(j)
        report.max_slack = max(report.max_slack, hm - hj)
        report.worst_chain_gap = max(report.worst_chain_gap, abs(hc - hj))
        if hj > hm + tol:
            report.violations.append(("inequality", n, j.table, hj - hm))
        if abs(hc - hj) > tol:
            report.violations.append(("chain_rule", n, j.table, abs(hc - hj)))
        prod = product_joint(rng.uniform(0.0, 1.0, n))
        gap = abs(joint_entropy(prod) - marginal_entropy_sum(prod))
        report.worst_product_gap = max(report.worst_product_gap, gap)
        if gap > tol:
            report.violations.append(("product_equality", n, prod.table, gap))
    return report
