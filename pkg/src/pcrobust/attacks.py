"""Untargeted L-inf and L2 adversarial attacks against a :class:`Network`.

Gradient attacks (FGSM, BIM, PGD, MIM) ascend the cross-entropy of the
attacked model. C&W and SPSA work on the logit margin a_y - max_{j!=y} a_j.
Every attack takes images in [0, 1] with shape (N, C, H, W) and returns an
:class:`AttackResult`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses
from . import numerics as nx
from .models import Network, predict
from .numerics import ShapeError

METHODS = ("fgsm", "bim", "pgd", "mim", "cw", "spsa")
BUDGETED = ("fgsm", "bim", "pgd", "mim", "spsa")

DEFAULT_ITERATIONS = {"fgsm": 1, "bim": 10, "pgd": 40, "mim": 40, "spsa": 40, "cw": 1}


@dataclass
class AttackConfig:
    method: str = "fgsm"
    epsilon: float = 0.3
    step_size: float = 0.01
    iterations: int | None = None
    cw_confidence: float = 0.0
    cw_lr: float = 0.001
    cw_max_steps: int = 100
    cw_binary_search_steps: int = 5
    cw_initial_const: float = 1e-2
    mim_decay: float = 1.0
    spsa_delta: float = 0.01
    spsa_lr: float = 0.01
    spsa_samples: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack {self.method!r}; expected one of {METHODS}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if self.iterations is None:
            self.iterations = DEFAULT_ITERATIONS[self.method]
        if self.iterations < 0 or (self.iterations == 0 and self.method in ("bim", "pgd", "mim")):
            raise ValueError(f"{self.method} needs iterations >= 1")
        for name in ("step_size", "cw_lr", "spsa_delta", "spsa_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.mim_decay < 0:
            raise ValueError("mim_decay must be nonnegative")
        if self.spsa_samples < 1 or self.cw_max_steps < 1 or self.cw_binary_search_steps < 1:
            raise ValueError("sample and step counts must be positive")

    def label(self) -> str:
        return f"{self.method}@{self.epsilon:g}" if self.method != "cw" else f"cw@{self.cw_confidence:g}"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray
    linf: np.ndarray
    l2: np.ndarray
    config: AttackConfig
    grad_calls: int = 0
    queries: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def success(self) -> np.ndarray:
        return self.predictions != self.labels

    @property
    def accuracy(self) -> float:
        return float(np.mean(~self.success)) if len(self.labels) else float("nan")

    @property
    def success_rate(self) -> float:
        return 1.0 - self.accuracy

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "n": int(len(self.labels)),
            "accuracy": self.accuracy,
            "success_rate": self.success_rate,
            "success": self.success.astype(int).tolist(),
            "linf": [float(v) for v in self.linf],
            "l2": [float(v) for v in self.l2],
            "grad_calls": int(self.grad_calls),
            "queries": int(self.queries),
            **self.extra,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _prepare(net: Network, x, y):
    x = np.asarray(x, dtype=net.dtype)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(net.input_shape):
        raise ShapeError(f"attack batch {x.shape} does not match network input {net.input_shape}")
    if len(x) != len(y):
        raise ShapeError(f"{len(x)} images vs {len(y)} labels")
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("attack inputs must lie in [0, 1]")
    return x, y


def _result(net, x, y, x_adv, cfg, grad_calls=0, queries=0, extra=None) -> AttackResult:
    d = (x_adv - x).reshape(len(x), -1).astype(np.float64)
    return AttackResult(
        x_adv=x_adv,
        labels=y,
        predictions=predict(net, x_adv),
        linf=np.abs(d).max(axis=1, initial=0.0),
        l2=np.sqrt((d * d).sum(axis=1)),
        config=cfg,
        grad_calls=grad_calls,
        queries=queries,
        extra=extra or {},
    )


def _ce_sum(logits, y):
    return nx.mul(losses.ce_from_logits(logits, y), float(len(y)))


def _ce_grad(net, x, y):
    return nx.input_gradient(net, _ce_sum, x, y)


def _project(x_adv, x, eps):
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def fgsm(net: Network, x, y, cfg: AttackConfig) -> AttackResult:
    """x + eps * sign(grad CE), clipped to [0, 1]; one gradient call."""
    x, y = _prepare(net, x, y)
    eps = np.asarray(cfg.epsilon, dtype=x.dtype)
    g = _ce_grad(net, x, y)
    x_adv = np.clip(x + eps * np.sign(g), 0.0, 1.0)
    return _result(net, x, y, x_adv, cfg, grad_calls=1)


def _iterate(net, x, y, cfg, x0, decay=None):
    eps = np.asarray(cfg.epsilon, dtype=x.dtype)
    alpha = np.asarray(cfg.step_size, dtype=x.dtype)
    x_adv = x0
    momentum = np.zeros_like(x)
    calls = 0
    for _ in range(cfg.iterations):
        g = _ce_grad(net, x_adv, y)
        calls += 1
        if decay is not None:
            l1 = np.abs(g).reshape(len(g), -1).sum(axis=1)
            l1 = np.maximum(l1, np.finfo(x.dtype).tiny).reshape((-1,) + (1,) * (x.ndim - 1))
            momentum = decay * momentum + g / l1
            g = momentum
        x_adv = _project(x_adv + alpha * np.sign(g), x, eps)
    return x_adv, calls


def bim(net: Network, x, y, cfg: AttackConfig) -> AttackResult:
    """Iterated FGSM steps of ``step_size``, each projected to the eps-ball and [0, 1]."""
    x, y = _prepare(net, x, y)
    x_adv, calls = _iterate(net, x, y, cfg, x.copy())
    return _result(net, x, y, x_adv, cfg, grad_calls=calls)


def pgd(net: Network, x, y, cfg: AttackConfig) -> AttackResult:
    """BIM from a uniform random start inside the eps-ball (seeded)."""
    x, y = _prepare(net, x, y)
    rng = np.random.default_rng(cfg.seed)
    start = x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(x.dtype)
    x_adv, calls = _iterate(net, x, y, cfg, _project(start, x, np.asarray(cfg.epsilon, x.dtype)))
    return _result(net, x, y, x_adv, cfg, grad_calls=calls)


def mim(net: Network, x, y, cfg: AttackConfig) -> AttackResult:
    """Momentum iterative method: accumulate L1-normalized gradients with decay ``mim_decay``."""
    x, y = _prepare(net, x, y)
    x_adv, calls = _iterate(net, x, y, cfg, x.copy(), decay=cfg.mim_decay)
    return _result(net, x, y, x_adv, cfg, grad_calls=calls)


# ---------------------------------------------------------------------------
# Carlini & Wagner L2


def _margin_and_grad(net, x_adv, y, weights):
    """Per-sample logit margins and the gradient of sum_i w_i * margin_i wrt x_adv."""
    box = {}

    def loss(logits, yy):
        m = nx.sub(nx.pick(logits, yy), nx.pick(logits, losses.runner_up(logits.data, yy)))
        box.setdefault("m", []).append(m.data.copy())
        box.setdefault("pred", []).append(logits.data.argmax(axis=1))
        start = sum(len(v) for v in box["m"][:-1])
        w = weights[start : start + len(yy)]
        return nx.sum(nx.mul(m, nx.Tensor(w.astype(logits.dtype))))

    g = nx.input_gradient(net, loss, x_adv, y)
    return np.concatenate(box["m"]), np.concatenate(box["pred"]), g


def cw_l2(net: Network, x, y, cfg: AttackConfig) -> AttackResult:
    """C&W L2 attack in tanh space with a binary search over the trade-off constant.

    Minimizes ||x' - x||^2 + c * max(margin(x'), -confidence) with Adam. The
    smallest-L2 misclassified iterate is returned; samples never fooled keep
    their clean input.
    """
    x, y = _prepare(net, x, y)
    n = len(x)
    dt = np.float64
    xf = x.astype(dt)
    shape = (-1,) + (1,) * (x.ndim - 1)
    w0 = np.arctanh(np.clip(xf * 2 - 1, -1 + 1e-6, 1 - 1e-6))

    clean_pred = predict(net, x)
    best_adv = xf.copy()
    best_l2 = np.where(clean_pred != y, 0.0, np.inf)
    lower = np.zeros(n)
    upper = np.full(n, np.inf)
    const = np.full(n, cfg.cw_initial_const)
    calls = 0
    kappa = cfg.cw_confidence
    b1, b2, adam_eps = 0.9, 0.999, 1e-8

    for _ in range(cfg.cw_binary_search_steps):
        active = best_l2 > 0  # already-misclassified clean inputs need no search
        if not active.any():
            break
        w = w0.copy()
        m1 = np.zeros_like(w)
        m2 = np.zeros_like(w)
        found = np.zeros(n, dtype=bool)
        for t in range(1, cfg.cw_max_steps + 1):
            x_adv = (np.tanh(w) + 1) / 2
            weights = const * active
            margin, pred, g_margin = _margin_and_grad(net, x_adv.astype(x.dtype), y, weights)
            calls += 1
            diff = x_adv - xf
            l2 = np.sqrt((diff * diff).reshape(n, -1).sum(axis=1))
            fooled = (pred != y) & (margin <= -kappa) & active
            improve = fooled & (l2 < best_l2)
            best_l2[improve] = l2[improve]
            best_adv[improve] = x_adv[improve]
            found |= fooled
            hinge_on = (margin > -kappa).reshape(shape)
            g_x = 2 * diff * active.reshape(shape) + g_margin.astype(dt) * hinge_on
            g_w = g_x * (1 - np.tanh(w) ** 2) / 2
            m1 = b1 * m1 + (1 - b1) * g_w
            m2 = b2 * m2 + (1 - b2) * g_w * g_w
            w = w - cfg.cw_lr * (m1 / (1 - b1**t)) / (np.sqrt(m2 / (1 - b2**t)) + adam_eps)
        upper = np.where(found & active, np.minimum(upper, const), upper)
        lower = np.where(~found & active, np.maximum(lower, const), lower)
        bounded = np.isfinite(upper)
        const = np.where(active, np.where(bounded, (lower + upper) / 2, const * 10), const)

    x_out = np.clip(best_adv, 0.0, 1.0).astype(x.dtype)
    return _result(net, x, y, x_out, cfg, grad_calls=calls)


# ---------------------------------------------------------------------------
# SPSA (gradient-free)


def _margins(net, xb, yb):
    return losses.margins(net.logits(xb), yb)


def spsa(net: Network, x, y, cfg: AttackConfig, early_stop: bool = True) -> AttackResult:
    """Gradient-free attack: SPSA estimates of the margin gradient driving Adam.

    Each iteration draws ``spsa_samples`` Rademacher directions v per image
    and averages (L(x+dv) - L(x-dv)) / (2d) * v. The model is only queried
    through forward passes.
    """
    x, y = _prepare(net, x, y)
    n = len(x)
    rng = np.random.default_rng(cfg.seed)
    dt = x.dtype
    delta = cfg.spsa_delta
    eps = np.asarray(cfg.epsilon, dtype=dt)
    x_adv = x.copy()
    m1 = np.zeros(x.shape, dtype=np.float64)
    m2 = np.zeros(x.shape, dtype=np.float64)
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    queries = 0
    calls_before = net.grad_calls
    alive = np.ones(n, dtype=bool)
    s = cfg.spsa_samples
    for t in range(1, cfg.iterations + 1):
        if early_stop:
            alive &= _margins(net, x_adv, y) >= 0
            queries += n
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        for i in idx:
            g = spsa_gradient(net, x_adv[i], y[i], delta, s, rng)
            queries += 2 * s
            m1[i] = b1 * m1[i] + (1 - b1) * g
            m2[i] = b2 * m2[i] + (1 - b2) * g * g
            step = cfg.spsa_lr * (m1[i] / (1 - b1**t)) / (np.sqrt(m2[i] / (1 - b2**t)) + adam_eps)
            x_adv[i] = _project(x_adv[i] - step.astype(dt), x[i], eps)
    assert net.grad_calls == calls_before
    return _result(net, x, y, x_adv, cfg, grad_calls=0, queries=queries)


def spsa_gradient(net: Network, xi: np.ndarray, yi: int, delta: float, samples: int, rng) -> np.ndarray:
    """SPSA estimate of d margin / d x at a single image ``xi``."""
    v = rng.choice(np.array([-1.0, 1.0]), size=(samples,) + xi.shape)
    probes = np.concatenate([xi + delta * v, xi - delta * v]).astype(net.dtype)
    m = _margins(net, probes, np.full(2 * samples, yi))
    diff = (m[:samples] - m[samples:]).astype(np.float64) / (2 * delta)
    return (diff.reshape((-1,) + (1,) * xi.ndim) * v).mean(axis=0)


# ---------------------------------------------------------------------------

ATTACKS = {"fgsm": fgsm, "bim": bim, "pgd": pgd, "mim": mim, "cw": cw_l2, "spsa": spsa}


def run_attack(net: Network, x, y, cfg: AttackConfig) -> AttackResult:
    return ATTACKS[cfg.method](net, x, y, cfg)


def transfer_attack(source: Network, target: Network, x, y, cfg: AttackConfig) -> AttackResult:
    """Craft on ``source``; report success and norms as seen by ``target``."""
    if tuple(source.input_shape) != tuple(target.input_shape) or source.num_classes != target.num_classes:
        raise ShapeError(
            f"source {source.input_shape}/{source.num_classes} and target "
            f"{target.input_shape}/{target.num_classes} disagree"
        )
    crafted = run_attack(source, x, y, cfg)
    x_t, y_t = _prepare(target, x, y)
    res = _result(target, x_t, y_t, crafted.x_adv.astype(target.dtype), cfg,
                  grad_calls=crafted.grad_calls, queries=crafted.queries)
    res.extra["transfer"] = True
    return res


def with_epsilon(cfg: AttackConfig, eps: float) -> AttackConfig:
    return replace(cfg, epsilon=eps)
