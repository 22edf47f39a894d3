"""Cross-entropy, probabilistically-compact (PC) loss and the logit constraint.

All batch losses are means over the batch. Functions accept either raw numpy
arrays (evaluated untracked) or :class:`~pcrobust.numerics.Tensor` objects,
in which case the result is differentiable wrt the input logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


@dataclass(frozen=True)
class PCLossConfig:
    """Margin ``xi`` on probabilities, penalty weight ``lam`` and logit threshold ``c_prime``."""

    xi: float = 0.995
    lam: float = 0.05
    c_prime: float = 0.0

    def __post_init__(self):
        if not 0 < self.xi <= 1:
            raise ValueError(f"xi must lie in (0, 1], got {self.xi}")
        if self.lam < 0:
            raise ValueError(f"lam must be nonnegative, got {self.lam}")
        if self.c_prime < 0:
            raise ValueError(f"c_prime must be nonnegative, got {self.c_prime}")


def _labels(labels, n: int, k: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return y


def _as_2d(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.data.ndim == 1:
        t = nx.reshape(t, (1, -1))
    if t.data.ndim != 2:
        raise ShapeError(f"expected (N, K) scores, got {t.shape}")
    return t


def _finish(out: Tensor, tracked: bool):
    return out if tracked else out.item()


def softmax(logits):
    """Stable softmax along the last axis; a 1-D input gives a 1-D output."""
    tracked = isinstance(logits, Tensor)
    arr = logits.data if tracked else np.asarray(logits, dtype=np.float64)
    if np.isnan(arr).any():
        raise ValueError("softmax: NaN in logits")
    if tracked:
        return nx.softmax(logits)
    shifted = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def ce_from_logits(logits, labels):
    """Mean of -log softmax(a)_y computed through log-sum-exp (never infinite)."""
    tracked = isinstance(logits, Tensor)
    a = _as_2d(logits)
    y = _labels(labels, a.shape[0], a.shape[1])
    out = nx.mul(nx.mean(nx.pick(nx.log_softmax(a), y)), -1.0)
    return _finish(out, tracked)


def ce_loss(probs, labels):
    """Mean negative log-probability of the true class.

    Takes probabilities; use :func:`ce_from_logits` for training so the
    log-sum-exp path avoids log(0).
    """
    tracked = isinstance(probs, Tensor)
    p = _as_2d(probs)
    y = _labels(labels, p.shape[0], p.shape[1])
    py = p.data[np.arange(p.shape[0]), y]
    if np.any(py <= 0):
        raise ValueError("ce_loss: true-class probability is 0; use ce_from_logits")
    if not tracked:
        return float(-np.mean(np.log(py)))
    sel = nx.pick(p, y)
    logp = nx._node(np.log(sel.data), (sel,), lambda g: (g / sel.data,), "log")
    return nx.mul(nx.mean(logp), -1.0)


def _false_class_mask(n: int, k: int, y: np.ndarray, dtype) -> np.ndarray:
    mask = np.ones((n, k), dtype=dtype)
    mask[np.arange(n), y] = 0
    return mask


def pc_loss(probs, labels, xi: float = 0.995):
    """(1/N) sum_i sum_{k != y_i} max(0, f_k + xi - f_{y_i}).

    Hinge subgradient at the kink is 0.
    """
    if not 0 < xi <= 1:
        raise ValueError(f"xi must lie in (0, 1], got {xi}")
    tracked = isinstance(probs, Tensor)
    p = _as_2d(probs)
    n, k = p.shape
    y = _labels(labels, n, k)
    viol = nx.add(nx.sub_column(p, nx.pick(p, y)), xi)
    hinge = nx.relu(viol)
    masked = nx.mul(hinge, Tensor(_false_class_mask(n, k, y, p.dtype)))
    out = nx.mul(nx.sum(masked), 1.0 / n)
    return _finish(out, tracked)


def pc_loss_grad_logit_y(f_y: float, f_other: float) -> float:
    """d(f_other + xi - f_y)/d a_y for one active hinge term, through the softmax."""
    return -f_y * (1.0 - f_y + f_other)


def runner_up(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Index of the largest false-class logit per row (first index on ties)."""
    a = np.array(logits, dtype=np.float64, copy=True)
    a[np.arange(len(a)), labels] = -np.inf
    return a.argmax(axis=1)


def logit_penalty(logits, labels, lam: float = 0.05, c_prime: float = 0.0):
    """(lam/N) sum_x (d_yj - c_prime) with d_yj = max(0, a_y - a_j).

    ``j`` is the current runner-up false class of each sample. The ``c_prime``
    term only shifts the value; it has no gradient.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    tracked = isinstance(logits, Tensor)
    a = _as_2d(logits)
    n, k = a.shape
    if k < 2:
        raise ValueError("logit_penalty needs at least 2 classes")
    y = _labels(labels, n, k)
    j = runner_up(a.data, y)
    d = nx.relu(nx.sub(nx.pick(a, y), nx.pick(a, j)))
    out = nx.mul(nx.add(nx.mean(d), -c_prime), lam)
    return _finish(out, tracked)


def combined_objective(logits, labels, config: PCLossConfig = PCLossConfig()):
    """PC loss on softmax(logits) plus the logit penalty."""
    tracked = isinstance(logits, Tensor)
    a = _as_2d(logits)
    pc = pc_loss(nx.softmax(a), labels, config.xi)
    out = nx.add(pc, logit_penalty(a, labels, config.lam, config.c_prime))
    return _finish(out, tracked)


def margins(logits: np.ndarray, labels) -> np.ndarray:
    """a_y - max_{j != y} a_j per sample."""
    logits = np.asarray(logits)
    y = np.asarray(labels)
    j = runner_up(logits, y)
    rows = np.arange(len(y))
    return logits[rows, y] - logits[rows, j]


def margin_loss(logits, labels):
    """Sum over the batch of a_y - max_{j != y} a_j (tracked)."""
    a = _as_2d(logits)
    y = _labels(labels, a.shape[0], a.shape[1])
    j = runner_up(a.data, y)
    return nx.sum(nx.sub(nx.pick(a, y), nx.pick(a, j)))


def probability_gaps(probs: np.ndarray, labels) -> np.ndarray:
    """f_y - max_{k != y} f_k per sample."""
    return margins(probs, labels)
