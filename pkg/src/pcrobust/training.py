"""Two-phase training: cross-entropy warm-up followed by PC loss + logit constraint."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses
from . import numerics as nx
from .attacks import AttackConfig, fgsm, pgd
from .data import LabeledDataset, batches
from .models import Network, accuracy, save_params
from .numerics import ShapeError, Tensor

log = logging.getLogger(__name__)

LOSS_MODES = ("ce", "pc_lc")


class DivergenceError(RuntimeError):
    """Training loss became NaN or infinite."""


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def adam_step(params, grads, state: AdamState, lr=0.01, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update, in place on ``params`` (arrays or Tensors).

    Returns the updated parameter arrays; ``state`` is modified in place.
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("adam_step: params, grads and state lengths differ")
    b1, b2 = betas
    state.t += 1
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        arr = p.data if isinstance(p, Tensor) else p
        g = np.zeros_like(arr) if g is None else np.asarray(g)
        if g.shape != arr.shape or state.m[i].shape != arr.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {arr.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        new = arr - (lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)).astype(arr.dtype)
        if isinstance(p, Tensor):
            p.data = new
        else:
            p[...] = new
        out.append(new)
    return out


# ---------------------------------------------------------------------------
# configuration and report


@dataclass
class AdversarialAugmentation:
    """On-the-fly adversarial half-batches: FGSM with eps ~ U[lo, hi] or k-step PGD."""

    method: str = "fgsm"
    eps_range: tuple[float, float] = (0.1, 0.3)
    steps: int = 5
    step_size: float | None = None

    def __post_init__(self):
        if self.method not in ("fgsm", "pgd"):
            raise ValueError("adversarial augmentation supports fgsm or pgd")
        lo, hi = self.eps_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad eps range {self.eps_range}")
        self.eps_range = (float(lo), float(hi))


@dataclass
class TrainConfig:
    loss: str = "ce"
    xi: float = 0.995
    lam: float = 0.05
    c_prime: float = 0.0
    warmup_epochs: int = 10
    total_epochs: int | None = None
    learning_rate: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 256
    seed: int = 0
    adversarial: AdversarialAugmentation | None = None
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}")
        if self.total_epochs is None:
            self.total_epochs = 2 * self.warmup_epochs
        if self.warmup_epochs < 0 or self.total_epochs < self.warmup_epochs:
            raise ValueError("need 0 <= warmup_epochs <= total_epochs")
        if self.learning_rate <= 0 or self.adam_eps <= 0 or self.batch_size < 1:
            raise ValueError("learning rate, adam eps and batch size must be positive")
        if isinstance(self.adversarial, dict):
            self.adversarial = AdversarialAugmentation(**self.adversarial)

    @property
    def pc_config(self) -> losses.PCLossConfig:
        return losses.PCLossConfig(self.xi, self.lam, self.c_prime)

    def loss_for_epoch(self, epoch: int) -> str:
        """Loss evaluated during zero-based ``epoch``."""
        return "pc_lc" if self.loss == "pc_lc" and epoch >= self.warmup_epochs else "ce"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        if self.adversarial is not None:
            d["adversarial"]["eps_range"] = list(self.adversarial.eps_range)
        return d


@dataclass
class EpochRecord:
    epoch: int
    loss_name: str
    loss: float
    train_accuracy: float
    eval_accuracy: float | None
    seconds: float


@dataclass
class TrainReport:
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def to_dict(self, timings: bool = True) -> dict:
        eps = [asdict(e) for e in self.epochs]
        if not timings:
            for e in eps:
                e.pop("seconds")
        return {"config": self.config, "epochs": eps, "checkpoints": self.checkpoints}

    def to_json(self, timings: bool = True, **kw) -> str:
        return json.dumps(self.to_dict(timings), **kw)


# ---------------------------------------------------------------------------
# loops


def batch_objective(logits: Tensor, y: np.ndarray, mode: str, pc: losses.PCLossConfig) -> Tensor:
    if mode == "ce":
        return losses.ce_from_logits(logits, y)
    return losses.combined_objective(logits, y, pc)


def _adversarial_half(net: Network, xb, yb, aug: AdversarialAugmentation, rng) -> np.ndarray:
    eps = float(rng.uniform(*aug.eps_range)) if aug.eps_range[1] > aug.eps_range[0] else aug.eps_range[0]
    if eps == 0:
        return xb.copy()
    if aug.method == "fgsm":
        return fgsm(net, xb, yb, AttackConfig("fgsm", eps)).x_adv
    step = aug.step_size if aug.step_size is not None else 2.5 * eps / aug.steps
    cfg = AttackConfig("pgd", eps, step_size=step, iterations=aug.steps, seed=int(rng.integers(2**31)))
    return pgd(net, xb, yb, cfg).x_adv


def train(
    net: Network,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    eval_set: LabeledDataset | None = None,
    start_epoch: int = 0,
) -> TrainReport:
    """Run epochs ``start_epoch .. total_epochs-1``.

    Epochs before ``warmup_epochs`` use CE; later epochs use the combined PC
    objective when ``cfg.loss == 'pc_lc'``. With ``cfg.adversarial`` set, half
    of every mini-batch is replaced by adversarial versions of itself crafted
    against the current parameters. Shuffling is seeded by (seed, epoch), so
    resuming from a warm-up checkpoint at ``start_epoch`` reproduces the same
    data order as an uninterrupted run.
    """
    if dataset.num_classes != net.num_classes:
        raise ShapeError(f"dataset has {dataset.num_classes} classes, network {net.num_classes}")
    if tuple(dataset.input_shape) != tuple(net.input_shape):
        raise ShapeError(f"dataset images {dataset.input_shape} vs network {net.input_shape}")
    params = net.params()
    state = AdamState.zeros_like(params)
    report = TrainReport(config=cfg.to_dict())
    x_all = dataset.images.astype(net.dtype, copy=False)
    y_all = dataset.labels
    pc = cfg.pc_config
    for epoch in range(start_epoch, cfg.total_epochs):
        t0 = time.perf_counter()
        mode = cfg.loss_for_epoch(epoch)
        rng = np.random.default_rng([cfg.seed, epoch, 7])
        total, count = 0.0, 0
        for idx in batches(dataset, cfg.batch_size, shuffle_seed=int(rng.integers(2**31))):
            xb, yb = x_all[idx], y_all[idx]
            if cfg.adversarial is not None:
                half = len(idx) // 2
                adv = _adversarial_half(net, xb[half:], yb[half:], cfg.adversarial, rng)
                xb = np.concatenate([xb[:half], adv])
            nx.zero_grads(params)
            value = batch_objective(net(Tensor(xb)), yb, mode, pc)
            if not np.isfinite(value.item()):
                raise DivergenceError(f"loss became {value.item()} in epoch {epoch + 1} ({mode})")
            nx.backward(value)
            adam_step(params, [p.grad for p in params], state, cfg.learning_rate, cfg.betas, cfg.adam_eps)
            total += value.item() * len(idx)
            count += len(idx)
        rec = EpochRecord(
            epoch=epoch + 1,
            loss_name=mode,
            loss=total / max(count, 1),
            train_accuracy=accuracy(net, x_all, y_all),
            eval_accuracy=accuracy(net, eval_set.images, eval_set.labels) if eval_set is not None else None,
            seconds=time.perf_counter() - t0,
        )
        report.epochs.append(rec)
        log.info("epoch %d [%s] loss=%.4f acc=%.4f", rec.epoch, mode, rec.loss, rec.train_accuracy)
        if cfg.checkpoint_every and cfg.checkpoint_dir and (epoch + 1) % cfg.checkpoint_every == 0:
            path = Path(cfg.checkpoint_dir) / f"epoch{epoch + 1:03d}.params"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_params(net, path)
            report.checkpoints.append(str(path))
    return report


def train_adversarial(net, dataset, cfg: TrainConfig, eval_set=None, start_epoch: int = 0) -> TrainReport:
    """:func:`train` with mandatory adversarial augmentation (1:1 clean/adversarial)."""
    if cfg.adversarial is None:
        raise ValueError("train_adversarial needs cfg.adversarial")
    return train(net, dataset, cfg, eval_set, start_epoch)


def warm_start_pair(
    net: Network,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    eval_set: LabeledDataset | None = None,
    pc_adversarial: AdversarialAugmentation | None = None,
) -> dict:
    """Shared warm-up protocol.

    Trains ``net`` with CE for ``cfg.warmup_epochs``, snapshots it, then
    continues two copies to ``cfg.total_epochs``: one with CE and one with
    PC+LC. Returns ``{"warmup", "ce", "pc_lc"}`` networks plus reports.
    """
    warm_cfg = replace(cfg, loss="ce", total_epochs=cfg.warmup_epochs, adversarial=None)
    warm_report = train(net, dataset, warm_cfg, eval_set)
    ce_net = net.copy()
    pc_net = net.copy()
    ce_report = train(ce_net, dataset, replace(cfg, loss="ce", adversarial=None), eval_set, cfg.warmup_epochs)
    pc_report = train(pc_net, dataset, replace(cfg, loss="pc_lc", adversarial=pc_adversarial), eval_set,
                      cfg.warmup_epochs)
    return {
        "warmup": net,
        "ce": ce_net,
        "pc_lc": pc_net,
        "reports": {"warmup": warm_report, "ce": ce_report, "pc_lc": pc_report},
    }
