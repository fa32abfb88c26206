"""Cross-entropy training with Lookahead over AdamW, and bag-level metrics."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .attention import MODES
from .errors import ParameterError
from .mil import Bag
from .tensor import GradTape, Tensor, backward, cross_entropy

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "train_loss", "val_auc", "val_acc", "seconds")


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given labels (a class is missing)."""


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 1e-5
    epochs: int = 50
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    mode: str = "nystrom"
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.lookahead_alpha <= 1:
            raise ParameterError(f"lookahead_alpha must be in (0, 1], got {self.lookahead_alpha}")
        if self.lookahead_k < 1:
            raise ParameterError(f"lookahead_k must be >= 1, got {self.lookahead_k}")
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")


def cross_entropy_loss(logits: Tensor, label: int) -> Tensor:
    if logits.ndim != 1 or not 0 <= label < logits.shape[0]:
        raise ParameterError(f"label {label} out of range for logits of shape {logits.shape}")
    return cross_entropy(logits, label)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class LookaheadState:
    slow: list[np.ndarray]
    counter: int = 0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class Lookahead:
    """k fast AdamW steps, then slow += alpha * (fast - slow) and fast <- slow.

    The inner moment buffers persist across synchronizations.
    """

    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = LookaheadState(
            slow=[p.data.copy() for p in self.params],
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def _inner_step(self) -> None:
        cfg, st = self.cfg, self.state
        b1, b2 = cfg.betas
        st.step += 1
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for p, m, v in zip(self.params, st.m, st.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if cfg.weight_decay:
                p.data *= 1.0 - cfg.learning_rate * cfg.weight_decay
            p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)

    def step(self) -> None:
        self._inner_step()
        st = self.state
        st.counter += 1
        if st.counter < self.cfg.lookahead_k:
            return
        st.counter = 0
        alpha = self.cfg.lookahead_alpha
        for p, slow in zip(self.params, st.slow):
            if alpha == 1.0:
                slow[...] = p.data
            else:
                slow += alpha * (p.data - slow)
            p.data[...] = slow


def lookahead_step(optimizer: Lookahead) -> LookaheadState:
    optimizer.step()
    return optimizer.state


# ---------------------------------------------------------------------------
# metrics


def auc_binary(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_macro_ovr(score_matrix, labels, classes: int | None = None) -> float:
    return float(np.mean(auc_per_class(score_matrix, labels, classes)))


def auc_per_class(score_matrix, labels, classes: int | None = None) -> list[float]:
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(labels)
    classes = classes or score_matrix.shape[1]
    missing = [c for c in range(classes) if not np.any(labels == c)]
    if missing:
        raise UndefinedMetricError(f"classes {missing} have no samples")
    return [auc_binary(score_matrix[:, c], labels == c) for c in range(classes)]


def accuracy(probs, labels, threshold: float = 0.5) -> float:
    """Binary: positive iff P(class 1) > threshold (a tie is negative). Multi-class: argmax."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim == 1:
        pred = (probs > threshold).astype(int)
    elif probs.shape[1] == 2:
        pred = (probs[:, 1] > threshold).astype(int)
    else:
        pred = probs.argmax(axis=1)
    return float(np.mean(pred == labels))


def bag_auc(probs: np.ndarray, labels) -> tuple[float, list[float]]:
    """Binary AUC on the positive-class column, macro one-vs-rest otherwise."""
    if probs.shape[1] == 2:
        a = auc_binary(probs[:, 1], np.asarray(labels) == 1)
        return a, [a, a]
    per = auc_per_class(probs, labels)
    return float(np.mean(per)), per


# ---------------------------------------------------------------------------
# training


@dataclass
class EvalReport:
    accuracy: float
    auc: float
    per_class_auc: list[float]
    loss_curve: list[float]
    val_auc_curve: list[float]
    best_epoch: int
    best_val_auc: float


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def predict_proba(model, bags: Sequence[Bag], mode: str = "nystrom", workers: int = 1) -> np.ndarray:
    """Softmax class probabilities per bag; frozen weights, no tape."""

    def one(bag: Bag) -> np.ndarray:
        return _softmax(model.logits(bag.instances, mode=mode).data)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, bags))
    else:
        rows = [one(b) for b in bags]
    return np.vstack(rows)


def evaluate(model, bags: Sequence[Bag], mode: str = "nystrom", workers: int = 1) -> dict:
    probs = predict_proba(model, bags, mode, workers)
    labels = np.array([b.label for b in bags])
    auc, per = bag_auc(probs, labels)
    return {"accuracy": accuracy(probs, labels), "auc": auc, "per_class_auc": per, "probs": probs}


def _mean_loss(model, bags: Sequence[Bag], mode: str) -> float:
    return float(np.mean([cross_entropy_loss(model.logits(b.instances, mode=mode), b.label).item() for b in bags]))


def train_loop(
    train_bags: Sequence[Bag],
    val_bags: Sequence[Bag],
    model,
    cfg: TrainConfig,
    log_path=None,
):
    """One bag per step; returns the best-validation-AUC model and its report.

    Epoch 0 records the untrained model. The log CSV has one row per epoch.
    """
    if not train_bags or not val_bags:
        raise ParameterError("training needs non-empty train and val splits")
    for b in (*train_bags, *val_bags):
        if b.dim != model.in_dim:
            raise ParameterError(f"bag {b.id!r} has width {b.dim}, model expects {model.in_dim}")
        if not 0 <= b.label < model.classes:
            raise ParameterError(f"bag {b.id!r} label {b.label} outside {model.classes} classes")
    params = model.parameters()
    opt = Lookahead(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng([cfg.seed, 1])
    rows = []

    def validate(epoch: int, train_loss: float, started: float):
        res = evaluate(model, val_bags, cfg.mode)
        rows.append((epoch, train_loss, res["auc"], res["accuracy"], time.perf_counter() - started))
        log.info("epoch %d loss %.4f val_auc %.4f val_acc %.4f", *rows[-1][:4])
        return res

    t0 = time.perf_counter()
    best = validate(0, _mean_loss(model, train_bags, cfg.mode), t0)
    best_auc, best_epoch = best["auc"], 0
    best_params = [p.data.copy() for p in params]
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for i in rng.permutation(len(train_bags)):
            bag = train_bags[i]
            opt.zero_grad()
            with GradTape() as tape:
                loss = cross_entropy_loss(model.logits(bag.instances, mode=cfg.mode, rng=drop_rng), bag.label)
            backward(loss, tape)
            opt.step()
            losses.append(loss.item())
        res = validate(epoch, float(np.mean(losses)), t0)
        if res["auc"] > best_auc:
            best, best_auc, best_epoch = res, res["auc"], epoch
            best_params = [p.data.copy() for p in params]
    for p, saved in zip(params, best_params):
        p.data[...] = saved
    if log_path is not None:
        write_log(rows, log_path)
    report = EvalReport(
        accuracy=best["accuracy"],
        auc=best_auc,
        per_class_auc=best["per_class_auc"],
        loss_curve=[r[1] for r in rows],
        val_auc_curve=[r[2] for r in rows],
        best_epoch=best_epoch,
        best_val_auc=best_auc,
    )
    return model, report


def write_log(rows, path) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for epoch, loss, auc, acc, secs in rows:
            w.writerow((epoch, repr(loss), repr(auc), repr(acc), f"{secs:.3f}"))
