"""The TransMIL forward pipeline: reduce, square, MSA -> PPEG -> MSA, class-token head.

Checkpoint layout (all integers u32 little-endian)::

    b"TMIL" | version | d_in | d | heads | landmarks | classes
    then, for every parameter in ``TransMILModel.PARAM_ORDER``:
    rank | extent * rank | f64 little-endian payload (row-major)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import MSAConfig, MSAWeights, msa_block
from .errors import EmptyBagError, FormatError, ParameterError
from .ppeg import PPEGWeights, ppeg_forward, sinusoidal_encoding
from .tensor import ShapeError, Tensor, concat_rows, layer_norm, reshape, slice_rows

CHECKPOINT_MAGIC = b"TMIL"
CHECKPOINT_VERSION = 1
POSITION_ENCODINGS = ("ppeg", "sinusoidal", "none")


@dataclass
class SquaredSequence:
    """Class token, the n embeddings, then copies of the first M embeddings."""

    tokens: Tensor
    original_n: int
    N: int
    M: int

    @property
    def side(self) -> int:
        return math.isqrt(self.N)


@dataclass
class HeatmapRecord:
    scores: np.ndarray  # min-max normalized, one per instance
    raw: np.ndarray  # folded scores before normalization
    rows: np.ndarray
    cols: np.ndarray
    side: int


class TransMILModel:
    PARAM_ORDER = (
        "reducer.weight",
        "reducer.bias",
        "class_token",
        *(f"layer1.{f}" for f in MSAWeights.FIELDS),
        "ppeg.k3",
        "ppeg.k5",
        "ppeg.k7",
        *(f"layer2.{f}" for f in MSAWeights.FIELDS),
        "head.ln_gamma",
        "head.ln_beta",
        "head.weight",
        "head.bias",
    )

    def __init__(
        self,
        in_dim: int,
        dim: int = 512,
        heads: int = 8,
        landmarks: int = 64,
        classes: int = 2,
        pinv_iters: int = 6,
        seed: int = 0,
        pos_encoding: str = "ppeg",
        dropout: float = 0.0,
    ):
        if in_dim < 1 or classes < 2:
            raise ParameterError(f"need in_dim >= 1 and classes >= 2, got {in_dim}, {classes}")
        if pos_encoding not in POSITION_ENCODINGS:
            raise ParameterError(f"pos_encoding must be one of {POSITION_ENCODINGS}")
        if not 0.0 <= dropout < 1.0:
            raise ParameterError(f"dropout must be in [0, 1), got {dropout}")
        self.in_dim = in_dim
        self.classes = classes
        self.cfg = MSAConfig(dim, heads, landmarks, pinv_iters)
        self.pos_encoding = pos_encoding
        self.dropout = dropout
        rng = np.random.default_rng(seed)
        self.reducer_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(in_dim), (in_dim, dim)), True)
        self.reducer_b = Tensor(np.zeros(dim), True)
        self.class_token = Tensor(np.zeros((1, dim)), True)
        self.layer1 = MSAWeights.init(dim, rng)
        self.ppeg = PPEGWeights.zeros(dim)
        self.layer2 = MSAWeights.init(dim, rng)
        self.head_ln_gamma = Tensor(np.ones(dim), True)
        self.head_ln_beta = Tensor(np.zeros(dim), True)
        self.head_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(dim), (dim, classes)), True)
        self.head_b = Tensor(np.zeros(classes), True)

    @property
    def dim(self) -> int:
        return self.cfg.dim

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(zip(self.PARAM_ORDER, self.parameters()))

    def parameters(self) -> list[Tensor]:
        return [
            self.reducer_w,
            self.reducer_b,
            self.class_token,
            *self.layer1.parameters(),
            *self.ppeg.parameters(),
            *self.layer2.parameters(),
            self.head_ln_gamma,
            self.head_ln_beta,
            self.head_w,
            self.head_b,
        ]

    def forward(self, instances, mode: str = "nystrom") -> tuple[Tensor, np.ndarray]:
        return tpt_forward(instances, self, mode)

    def logits(self, instances, mode: str = "nystrom", rng: np.random.Generator | None = None) -> Tensor:
        """Bag logits; passing ``rng`` switches dropout on (training)."""
        return tpt_forward(instances, self, mode, with_attention=False, rng=rng)[0]


def feature_reduce(raw_bag, model: TransMILModel) -> Tensor:
    raw = raw_bag if isinstance(raw_bag, Tensor) else Tensor(raw_bag)
    if raw.ndim != 2 or raw.shape[1] != model.in_dim:
        raise ShapeError(f"bag of shape {raw.shape} does not match input width {model.in_dim}")
    return raw @ model.reducer_w + model.reducer_b


def square_sequence(h: Tensor, class_token: Tensor) -> SquaredSequence:
    """Prepend the class token and pad to a square count by repeating leading rows."""
    n = h.shape[0]
    if n == 0:
        raise EmptyBagError("cannot square an empty bag")
    side = math.isqrt(n - 1) + 1
    N = side * side
    M = N - n
    parts = [class_token, h]
    if M:
        parts.append(slice_rows(h, 0, M))
    return SquaredSequence(concat_rows(parts), n, N, M)


def _head(model: TransMILModel, cls_row: Tensor) -> Tensor:
    y = layer_norm(cls_row, model.head_ln_gamma, model.head_ln_beta)
    return reshape(y @ model.head_w, (model.classes,)) + model.head_b


def tpt_forward(
    raw_bag,
    model: TransMILModel,
    mode: str = "nystrom",
    with_attention: bool = True,
    rng: np.random.Generator | None = None,
):
    """Bag logits and the layer-2 class-token attention over the N patch tokens."""
    raw = raw_bag if isinstance(raw_bag, Tensor) else Tensor(raw_bag)
    if raw.ndim != 2 or raw.shape[0] == 0:
        raise EmptyBagError(f"bag must be a non-empty n x d matrix, got shape {raw.shape}")
    seq = square_sequence(feature_reduce(raw, model), model.class_token)
    x = seq.tokens
    if model.pos_encoding == "sinusoidal":
        x = sinusoidal_encoding(x)
    drop = {"dropout": model.dropout, "rng": rng}
    x = msa_block(x, model.layer1, model.cfg, mode, **drop)
    if model.pos_encoding == "ppeg":
        x = ppeg_forward(x, model.ppeg)
    if with_attention:
        x, cls_attn = msa_block(x, model.layer2, model.cfg, mode, return_class_attention=True, **drop)
        cls_attn = cls_attn[1:]
    else:
        x = msa_block(x, model.layer2, model.cfg, mode, **drop)
        cls_attn = None
    return _head(model, slice_rows(x, 0, 1)), cls_attn


def export_heatmap(class_attention: np.ndarray, original_n: int, side: int) -> HeatmapRecord:
    """Fold padding-token scores onto their source instances and min-max normalize.

    A constant score vector normalizes to 0.5 everywhere.
    """
    att = np.asarray(class_attention, dtype=np.float64)
    N = att.shape[0]
    if N < original_n or original_n < 1:
        raise ParameterError(f"{N} attention scores cannot cover {original_n} instances")
    raw = att[:original_n].copy()
    M = N - original_n
    raw[:M] += att[original_n:]
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        scores = np.full(original_n, 0.5)
    else:
        scores = (raw - lo) / (hi - lo)
    rows, cols = np.divmod(np.arange(original_n), side)
    return HeatmapRecord(scores, raw, rows, cols, side)


def save_checkpoint(model: TransMILModel, path) -> None:
    cfg = model.cfg
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<6I", CHECKPOINT_VERSION, model.in_dim, cfg.dim, cfg.heads, cfg.landmarks, model.classes),
    ]
    for p in model.parameters():
        chunks.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, pinv_iters: int = 6) -> TransMILModel:
    buf = Path(path).read_bytes()
    pos = 0

    def take(nbytes: int, what: str) -> bytes:
        nonlocal pos
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        out = buf[pos : pos + nbytes]
        pos += nbytes
        return out

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not a TMIL checkpoint", 0)
    version, d_in, d, h, m, c = struct.unpack("<6I", take(24, "header"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    try:
        model = TransMILModel(d_in, d, h, m, c, pinv_iters=pinv_iters)
    except ValueError as exc:
        raise FormatError(f"invalid config block: {exc}", 8) from None
    for name, p in model.named_parameters():
        start = pos
        (rank,) = struct.unpack("<I", take(4, name))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, name))
        if shape != p.shape:
            raise FormatError(f"{name}: expected shape {p.shape}, found {shape}", start)
        payload = take(8 * p.size, name)
        p.data[...] = np.frombuffer(payload, dtype="<f8").reshape(shape)
    if pos != len(buf):
        raise FormatError("trailing bytes after last parameter", pos)
    return model
