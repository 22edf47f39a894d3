"""Empirical analyses: misclassification-rank histogram, probability gaps,
gradient-masking checklist and accuracy-under-attack tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses
from .attacks import AttackConfig, run_attack, transfer_attack
from .data import LabeledDataset
from .models import Network, predict

RANK_BINS = ("2", "3", "4", "5", "other")


def parse_grid(text: str) -> list[float]:
    """``"start:stop:step"`` (stop inclusive) or a comma list -> floats."""
    if ":" in text:
        start, stop, step = (float(v) for v in text.split(":"))
        if step <= 0:
            raise ValueError("grid step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return [float(v) for v in text.split(",") if v.strip()]


def clean_ranks(probs: np.ndarray) -> np.ndarray:
    """rank[i, k] = 1-based position of class k in sample i's descending order.

    Ties are broken by class index (lower index ranks first).
    """
    order = np.argsort(-probs, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(len(probs))[:, None]
    ranks[rows, order] = np.arange(1, probs.shape[1] + 1)[None, :]
    return ranks


def rank_bin(rank: int) -> str:
    return str(rank) if 2 <= rank <= 5 else "other"


@dataclass
class RankHistogram:
    grid: list[float]
    method: str
    new_success: list[int]
    rank_counts: list[dict[str, int]]
    eligible: int
    first_success: list[int] = field(default_factory=list, repr=False)

    def rank2_share(self) -> list[float | None]:
        return [c["2"] / n if n else None for c, n in zip(self.rank_counts, self.new_success)]

    def long_rows(self) -> list[tuple[float, str, int]]:
        return [(eps, b, c[b]) for eps, c in zip(self.grid, self.rank_counts) for b in RANK_BINS]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epsilon", "rank", "count"])
        for eps, b, c in self.long_rows():
            w.writerow([f"{eps:g}", b, c])
        return buf.getvalue()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rank2_share"] = self.rank2_share()
        return d


def rank_histogram(
    net: Network,
    dataset: LabeledDataset,
    method: str = "fgsm",
    grid=(0.02, 0.04),
    base: AttackConfig | None = None,
) -> RankHistogram:
    """Bin newly successful attacks by the clean-probability rank of the adversarial label.

    The attack runs independently at every grid value. A sample counts as
    newly successful at the first grid value where it is misclassified;
    samples misclassified without perturbation are excluded.
    """
    grid = [float(e) for e in grid]
    if method not in ("fgsm", "mim"):
        raise ValueError("rank histogram supports fgsm or mim")
    if not grid or grid[0] <= 0 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError(f"grid must be strictly increasing and start above 0, got {grid}")
    base = base or AttackConfig(method)
    x, y = dataset.images, dataset.labels
    probs = losses.softmax(net.logits(x))
    ranks = clean_ranks(probs)
    eligible = probs.argmax(axis=1) == y
    first = np.full(len(y), -1)
    adv_label = np.full(len(y), -1)
    for m, eps in enumerate(grid):
        res = run_attack(net, x, y, replace(base, method=method, epsilon=eps))
        new = res.success & eligible & (first < 0)
        first[new] = m
        adv_label[new] = res.predictions[new]
    counts = []
    new_success = []
    for m in range(len(grid)):
        idx = np.flatnonzero(first == m)
        bins = dict.fromkeys(RANK_BINS, 0)
        for i in idx:
            bins[rank_bin(int(ranks[i, adv_label[i]]))] += 1
        counts.append(bins)
        new_success.append(int(idx.size))
    return RankHistogram(grid, method, new_success, counts, int(eligible.sum()), first.tolist())


@dataclass
class GapStats:
    mean: float
    median: float
    std: float
    frac_at_least_xi: float
    xi: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def gap_stats(net: Network, dataset: LabeledDataset, xi: float = 0.995) -> GapStats:
    """Statistics of f_y - max_{k != y} f_k on clean inputs."""
    if len(dataset) == 0:
        raise ValueError("gap_stats needs a nonempty dataset")
    probs = losses.softmax(net.logits(dataset.images))
    gaps = losses.probability_gaps(probs, dataset.labels)
    return GapStats(
        mean=float(gaps.mean()),
        median=float(np.median(gaps)),
        std=float(gaps.std()),
        frac_at_least_xi=float(np.mean(gaps >= xi)),
        xi=float(xi),
        n=len(gaps),
    )


# ---------------------------------------------------------------------------
# gradient masking


def _success(net, x, y, cfg) -> float:
    return run_attack(net, x, y, cfg).success_rate


def gradient_masking_report(
    ce_net: Network,
    pclc_net: Network,
    dataset: LabeledDataset,
    substitute: Network,
    eps_grid=(0.1, 0.2, 0.3),
    iterative=("bim", "pgd", "mim"),
    near_total: float = 0.9,
    slack: float = 0.0,
    seed: int = 0,
) -> dict:
    """Three sanity checks against gradient masking, evaluated on both networks.

    1. every iterative attack succeeds at least as often as FGSM at equal eps;
    2. white-box PGD succeeds at least as often as PGD transferred from ``substitute``;
    3. PGD success is non-decreasing in eps, and on the CE model reaches
       ``near_total`` at the largest eps.

    ``slack`` tolerates that many points of sampling noise in each comparison.
    """
    x, y = dataset.images, dataset.labels
    eps_grid = [float(e) for e in eps_grid]
    report: dict = {"eps_grid": eps_grid, "iterative": list(iterative), "near_total": near_total, "models": {}}
    for name, net in (("ce", ce_net), ("pc_lc", pclc_net)):
        fgsm_rates = {e: _success(net, x, y, AttackConfig("fgsm", e)) for e in eps_grid}
        iter_rates = {
            m: {e: _success(net, x, y, AttackConfig(m, e, seed=seed)) for e in eps_grid} for m in iterative
        }
        transfer = {
            e: transfer_attack(substitute, net, x, y, AttackConfig("pgd", e, seed=seed)).success_rate
            for e in eps_grid
        }
        pgd_rates = iter_rates.get("pgd") or {e: _success(net, x, y, AttackConfig("pgd", e, seed=seed)) for e in eps_grid}
        check1 = all(iter_rates[m][e] + slack >= fgsm_rates[e] for m in iterative for e in eps_grid)
        check2 = all(pgd_rates[e] + slack >= transfer[e] for e in eps_grid)
        rates = [pgd_rates[e] for e in eps_grid]
        monotone = all(b + slack >= a for a, b in zip(rates, rates[1:]))
        check3 = monotone and (name != "ce" or rates[-1] >= near_total)
        report["models"][name] = {
            "fgsm_success": _keyed(fgsm_rates),
            "iterative_success": {m: _keyed(r) for m, r in iter_rates.items()},
            "transfer_success": _keyed(transfer),
            "checks": {
                "iterative_beats_single_step": bool(check1),
                "white_box_beats_black_box": bool(check2),
                "monotone_in_epsilon": bool(check3),
            },
        }
    report["passed"] = all(all(m["checks"].values()) for m in report["models"].values())
    return report


def _keyed(d: dict) -> dict:
    return {f"{k:g}": float(v) for k, v in d.items()}


# ---------------------------------------------------------------------------
# accuracy tables


@dataclass
class AccuracyTable:
    columns: list[str]
    rows: list[dict]  # {"attack": str, "param": str, <column>: accuracy}

    def cell(self, row_label: str, column: str) -> float:
        for r in self.rows:
            if f"{r['attack']}@{r['param']}" == row_label:
                return r[column]
        raise KeyError(row_label)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attack", "param", *self.columns])
        for r in self.rows:
            w.writerow([r["attack"], r["param"], *(f"{100 * r[c]:.1f}" for c in self.columns)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"columns": self.columns, "rows": self.rows}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def dominance(self, better: str, worse: str) -> float:
        """Fraction of attack rows where ``better`` is at least as accurate as ``worse``."""
        attack_rows = [r for r in self.rows if r["attack"] != "clean"]
        if not attack_rows:
            return float("nan")
        return float(np.mean([r[better] >= r[worse] for r in attack_rows]))


def table_report(nets: dict[str, Network], dataset: LabeledDataset, attack_suite) -> AccuracyTable:
    """Accuracy of every model (columns) under every attack config (rows) plus a clean row."""
    x, y = dataset.images, dataset.labels
    cols = list(nets)
    rows = [{"attack": "clean", "param": "-", **{c: float(np.mean(predict(nets[c], x) == y)) for c in cols}}]
    for cfg in attack_suite:
        param = f"{cfg.cw_confidence:g}" if cfg.method == "cw" else f"{cfg.epsilon:g}"
        row = {"attack": cfg.method, "param": param}
        l2 = {}
        for c in cols:
            res = run_attack(nets[c], x, y, cfg)
            row[c] = res.accuracy
            if cfg.method == "cw":
                hit = res.success
                l2[c] = {"success_rate": res.success_rate,
                         "mean_l2": float(res.l2[hit].mean()) if hit.any() else None}
        if l2:
            row["cw"] = l2
        rows.append(row)
    return AccuracyTable(cols, rows)
