"""Command-line entry point: ``pcrobust {train,attack,analyze,reproduce}``.

Every run writes its artifacts plus ``manifest.json`` into ``--out``. Result
files contain no timestamps, so deterministic reruns produce identical bytes;
wall-clock data lives only in the manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, analysis, attacks, data, models, training
from .attacks import AttackConfig
from .data import IDXError, LabeledDataset
from .models import ArchitectureSpec, ParamFileError
from .numerics import ShapeError

log = logging.getLogger("pcrobust")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_INPUT = 4
EXIT_INTERRUPTED = 130

SYNTH_SHAPE = (1, 8, 8)
SYNTH_CLASSES = 10


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run bookkeeping


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class Run:
    """Collects inputs and outputs of one invocation and writes the manifest."""

    def __init__(self, subcommand: str, config: dict, out: Path):
        self.subcommand = subcommand
        self.config = config
        self.out = out
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, dict] = {}
        self.started = time.time()
        out.mkdir(parents=True, exist_ok=True)

    def add_input(self, path) -> None:
        p = Path(path)
        if p.is_file():
            self.inputs[str(p)] = sha256_file(p)

    def write_json(self, name: str, obj) -> Path:
        path = self.out / name
        dump_json(obj, path)
        self._record(name, path)
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text, encoding="utf-8")
        self._record(name, path)
        return path

    def save_model(self, name: str, net) -> Path:
        path = self.out / name
        models.save_params(net, path)
        self._record(name, path)
        return path

    def _record(self, name: str, path: Path) -> None:
        self.outputs[name] = {"path": str(path), "sha256": sha256_file(path)}

    def finish(self, complete: bool, status: str = "ok") -> Path:
        manifest = {
            "subcommand": self.subcommand,
            "config": self.config,
            "seed": self.config.get("seed"),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "started_at": datetime.fromtimestamp(self.started, timezone.utc).isoformat(),
            "wall_time_s": round(time.time() - self.started, 3),
            "complete": complete,
            "status": status,
        }
        path = self.out / "manifest.json"
        dump_json(manifest, path)
        return path


# ---------------------------------------------------------------------------
# data and models


def load_data(cfg: dict) -> tuple[LabeledDataset, LabeledDataset, list[Path]]:
    """Train/test split per ``cfg``; returns the IDX files read (empty for synth)."""
    if cfg["data"] == "synth":
        dim = int(np.prod(SYNTH_SHAPE))
        kw = dict(dim=dim, spread=cfg["synth_spread"], anchor_seed=cfg["data_seed"], image_shape=SYNTH_SHAPE)
        train = data.synth_split(SYNTH_CLASSES, cfg["train_size"] // SYNTH_CLASSES, sample_seed=cfg["data_seed"],
                                 split="train", **kw)
        test = data.synth_split(SYNTH_CLASSES, cfg["test_size"] // SYNTH_CLASSES, sample_seed=cfg["data_seed"] + 1,
                                split="test", **kw)
        return train, test, []
    folder = data.find_mnist(cfg["data_dir"], cfg["dataset"])
    files = [data._resolve(folder, stem) for pair in data.MNIST_FILES.values() for stem in pair]
    train = data.load_mnist("train", cfg["data_dir"], cfg["dataset"])
    test = data.load_mnist("test", cfg["data_dir"], cfg["dataset"])
    if cfg["train_size"] < len(train):
        train = data.subset(train, cfg["train_size"], seed=cfg["data_seed"])
    if cfg["test_size"] < len(test):
        test = data.subset(test, cfg["test_size"], seed=cfg["data_seed"])
    return train, test, [f for f in files if f is not None]


def dtype_of(cfg: dict):
    return np.float32 if cfg["dtype"] == "float32" else np.float64


def arch_name(cfg: dict) -> str:
    return cfg["arch"] or ("mlp" if cfg["data"] == "synth" else "lenet5")


def load_model(run: Run, path, ds: LabeledDataset, dtype) -> models.Network:
    if path is None:
        raise UsageError("a checkpoint is required")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    run.add_input(path)
    net = models.load_params(path, num_classes=ds.num_classes, dtype=dtype)
    if tuple(net.input_shape) != tuple(ds.input_shape):
        raise ParamFileError(f"checkpoint expects inputs {net.input_shape}, data has {ds.input_shape}")
    return net


def train_config(cfg: dict, loss: str | None = None) -> training.TrainConfig:
    if cfg["epochs"] is not None and cfg["epochs"] < cfg["warmup"]:
        raise UsageError(f"--epochs {cfg['epochs']} is shorter than --warmup {cfg['warmup']}")
    aug = None
    if cfg["adv"] != "off":
        lo, hi = (float(v) for v in cfg["adv_eps"].split(":"))
        aug = training.AdversarialAugmentation(cfg["adv"], (lo, hi), steps=cfg["adv_steps"])
    return training.TrainConfig(
        loss=loss or cfg["loss"],
        xi=cfg["xi"],
        lam=cfg["lam"],
        c_prime=cfg["c_prime"],
        warmup_epochs=cfg["warmup"],
        total_epochs=cfg["epochs"],
        learning_rate=cfg["lr"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        adversarial=aug,
        checkpoint_every=cfg["checkpoint_every"],
        checkpoint_dir=str(Path(cfg["out"]) / "checkpoints") if cfg["checkpoint_every"] else None,
    )


def attack_config(cfg: dict, method: str, eps: float) -> AttackConfig:
    lr = cfg.get("attack_lr")
    return AttackConfig(
        method=method,
        epsilon=eps,
        step_size=cfg["step_size"],
        iterations=cfg["steps"],
        cw_confidence=cfg["confidence"],
        cw_lr=lr if lr is not None and method == "cw" else 0.001,
        cw_max_steps=cfg["cw_steps"],
        cw_binary_search_steps=cfg["search_steps"],
        mim_decay=cfg["decay"],
        spsa_delta=cfg["delta"],
        spsa_lr=lr if lr is not None and method == "spsa" else 0.01,
        spsa_samples=cfg["samples"],
        seed=cfg["seed"],
    )


def default_suite(cfg: dict) -> list[AttackConfig]:
    suite = [attack_config({**cfg, "steps": None}, m, e) for m in ("fgsm", "bim", "pgd", "mim")
             for e in (0.1, 0.2, 0.3)]
    suite.append(attack_config({**cfg, "steps": None}, "cw", 0.0))
    return suite


def evaluation_subset(ds: LabeledDataset, n: int | None) -> LabeledDataset:
    return ds if not n or n >= len(ds) else ds.take(np.arange(n))


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: dict, run: Run) -> int:
    train, test, files = load_data(cfg)
    for f in files:
        run.add_input(f)
    if cfg["loss"] == "ce" and cfg["epochs"] is not None and cfg["warmup"] > cfg["epochs"]:
        cfg["warmup"] = cfg["epochs"]  # warm-up length is irrelevant for pure CE
    tcfg = train_config(cfg)
    net = models.build(ArchitectureSpec(arch_name(cfg), train.input_shape, train.num_classes, tuple(cfg["hidden"])),
                       seed=cfg["seed"], dtype=dtype_of(cfg))
    fn = training.train_adversarial if tcfg.adversarial is not None else training.train
    report = fn(net, train.astype(net.dtype), tcfg, eval_set=test.astype(net.dtype))
    for path in report.checkpoints:
        run._record(Path(path).name, Path(path))
    run.save_model("model.params", net)
    run.write_json("train_report.json", report.to_dict(timings=False))
    run.write_json("timings.json", [round(e.seconds, 3) for e in report.epochs])
    last = report.epochs[-1] if report.epochs else None
    if last is not None:
        print(f"epoch {last.epoch} [{last.loss_name}] loss={last.loss:.4f} "
              f"train_acc={last.train_accuracy:.4f} test_acc={last.eval_accuracy:.4f}")
    return EXIT_OK


def cmd_attack(cfg: dict, run: Run) -> int:
    _, test, files = load_data(cfg)
    net = load_model(run, cfg["model"], test, dtype_of(cfg))
    test = evaluation_subset(test, cfg["n"]).astype(net.dtype)
    clean = models.accuracy(net, test.images, test.labels)
    summary = {"clean_accuracy": clean, "n": len(test), "results": []}
    for eps in analysis.parse_grid(cfg["eps"]):
        acfg = attack_config(cfg, cfg["method"], eps)
        res = attacks.run_attack(net, test.images, test.labels, acfg)
        name = f"attack_{acfg.label().replace('@', '_eps')}.json"
        run.write_json(name, res.to_dict())
        summary["results"].append({"config": acfg.to_dict(), "accuracy": res.accuracy,
                                   "success_rate": res.success_rate, "grad_calls": res.grad_calls,
                                   "queries": res.queries, "file": name})
        print(f"{acfg.label()}: accuracy {res.accuracy:.4f} (clean {clean:.4f})")
    run.write_json("attack_summary.json", summary)
    return EXIT_OK


def cmd_analyze(cfg: dict, run: Run) -> int:
    train, test, _ = load_data(cfg)
    test = evaluation_subset(test, cfg["n"])
    dtype = dtype_of(cfg)
    kind = cfg["analysis"]
    if kind == "rank":
        net = load_model(run, cfg["model"], test, dtype)
        hist = analysis.rank_histogram(net, test.astype(net.dtype), cfg["method"], analysis.parse_grid(cfg["grid"]))
        run.write_text("rank_histogram.csv", hist.to_csv())
        run.write_json("rank_histogram.json", hist.to_dict())
    elif kind == "gaps":
        net = load_model(run, cfg["model"], test, dtype)
        stats = analysis.gap_stats(net, test.astype(net.dtype), cfg["xi"])
        run.write_json("gaps.json", stats.to_dict())
        print(json.dumps(stats.to_dict(), sort_keys=True))
    elif kind == "masking":
        ce = load_model(run, cfg["ce"], test, dtype)
        pc = load_model(run, cfg["pclc"], test, dtype)
        sub = substitute_model(cfg, run, train, test, dtype)
        rep = analysis.gradient_masking_report(ce, pc, test.astype(dtype), sub, analysis.parse_grid(cfg["grid"]),
                                               seed=cfg["seed"])
        run.write_json("masking.json", rep)
        print("gradient-masking checks:", "PASS" if rep["passed"] else "FAIL")
    elif kind == "table":
        nets = {}
        for label, key in (("ce", "ce"), ("pc_lc", "pclc")):
            if cfg[key]:
                nets[label] = load_model(run, cfg[key], test, dtype)
        if not nets:
            raise UsageError("table needs --ce and/or --pclc")
        table = analysis.table_report(nets, test.astype(dtype), default_suite(cfg))
        run.write_text("table.csv", table.to_csv())
        run.write_json("table.json", table.to_dict())
        print(table.to_csv(), end="")
    return EXIT_OK


def substitute_model(cfg, run, train, test, dtype) -> models.Network:
    if cfg.get("substitute"):
        return load_model(run, cfg["substitute"], test, dtype)
    sub = models.build(ArchitectureSpec("cnn3", train.input_shape, train.num_classes), seed=cfg["seed"] + 1,
                       dtype=dtype)
    scfg = training.TrainConfig(warmup_epochs=cfg["substitute_epochs"], learning_rate=cfg["lr_train"],
                                batch_size=cfg["batch_size"], seed=cfg["seed"] + 1)
    training.train(sub, train.astype(dtype), scfg)
    run.save_model("substitute.params", sub)
    return sub


def cmd_reproduce(cfg: dict, run: Run) -> int:
    train, test, files = load_data(cfg)
    for f in files:
        run.add_input(f)
    dtype = dtype_of(cfg)
    train, test = train.astype(dtype), test.astype(dtype)
    spec = ArchitectureSpec(arch_name(cfg), train.input_shape, train.num_classes, tuple(cfg["hidden"]))
    tcfg = train_config({**cfg, "adv": "off", "checkpoint_every": 0}, loss="pc_lc")
    pair = training.warm_start_pair(models.build(spec, seed=cfg["seed"], dtype=dtype), train, tcfg, eval_set=test)
    nets = {"ce": pair["ce"], "pc_lc": pair["pc_lc"]}
    for name, net in nets.items():
        run.save_model(f"{name}.params", net)
    results: dict = {"config": cfg_for_results(cfg), "training": {k: r.to_dict(timings=False)
                                                                 for k, r in pair["reports"].items()}}
    evalset = evaluation_subset(test, cfg["n"])
    log.info("attack suite")
    table = analysis.table_report(nets, evalset, default_suite(cfg))
    run.write_text("table.csv", table.to_csv())
    results["table"] = table.to_dict()
    results["dominance_pc_lc_over_ce"] = table.dominance("pc_lc", "ce")

    sub = substitute_model({**cfg, "substitute": None, "lr_train": cfg["lr"]}, run, train, test, dtype)
    spsa_set = evaluation_subset(test, cfg["spsa_size"])
    black_box = {}
    for name, net in nets.items():
        transfer = attacks.transfer_attack(sub, net, evalset.images, evalset.labels,
                                           AttackConfig("pgd", 0.3, seed=cfg["seed"]))
        entry = {"transfer_pgd_0.3": transfer.accuracy}
        if len(spsa_set):
            spsa = attacks.spsa(net, spsa_set.images, spsa_set.labels,
                                AttackConfig("spsa", 0.3, spsa_samples=cfg["samples"], seed=cfg["seed"]))
            entry["spsa_0.3"] = spsa.accuracy
            entry["spsa_queries"] = spsa.queries
        black_box[name] = entry
    results["black_box"] = black_box

    log.info("analyses")
    results["gaps"] = {k: analysis.gap_stats(n, test, cfg["xi"]).to_dict() for k, n in nets.items()}
    hist = analysis.rank_histogram(nets["ce"], evalset, "fgsm", analysis.parse_grid(cfg["grid"]))
    run.write_text("rank_histogram.csv", hist.to_csv())
    results["rank_histogram"] = hist.to_dict()
    results["masking"] = analysis.gradient_masking_report(nets["ce"], nets["pc_lc"], evalset, sub, seed=cfg["seed"])
    run.write_json("results.json", results)
    print(table.to_csv(), end="")
    g = results["gaps"]
    print(f"mean gap: ce {g['ce']['mean']:.4f}  pc_lc {g['pc_lc']['mean']:.4f}")
    return EXIT_OK


def cfg_for_results(cfg: dict) -> dict:
    """Config echo without paths or logging options, so result JSON is portable."""
    return {k: v for k, v in cfg.items() if k not in ("out", "data_dir", "config", "log_level")}


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "analyze": cmd_analyze, "reproduce": cmd_reproduce}


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run control")
    g.add_argument("--seed", type=int, default=0, help="global seed (default: %(default)s)")
    g.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
    g.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP thread cap (default: %(default)s)")
    g.add_argument("--config", default=None, help="JSON file of option values, or a manifest.json to rerun")
    g.add_argument("--out", default="pcrobust-out", help="output directory (default: %(default)s)")
    g.add_argument("--log-level", default="WARNING", help="logging level (default: %(default)s)")
    d = p.add_argument_group("data")
    d.add_argument("--data", choices=("mnist", "synth"), default="mnist", help="dataset (default: %(default)s)")
    d.add_argument("--data-dir", default=None, help=f"dataset root (fallback: ${data.DATA_DIR_ENV}, then ./data)")
    d.add_argument("--dataset", default="mnist", help="IDX folder name under the root (default: %(default)s)")
    d.add_argument("--train-size", type=int, default=10000, help="training subset size (default: %(default)s)")
    d.add_argument("--test-size", type=int, default=2000, help="test subset size (default: %(default)s)")
    d.add_argument("--data-seed", type=int, default=0, help="subset / synthetic data seed (default: %(default)s)")
    d.add_argument("--synth-spread", type=float, default=0.15, help="synthetic cluster spread (default: %(default)s)")
    d.add_argument("--dtype", choices=("float32", "float64"), default="float32",
                   help="compute precision (default: %(default)s)")


def _model_flags(p) -> None:
    g = p.add_argument_group("model and training")
    g.add_argument("--arch", choices=models.ARCHITECTURES, default=None,
                   help="architecture (default: lenet5 for mnist, mlp for synth)")
    g.add_argument("--hidden", type=int, nargs="*", default=[], help="mlp hidden sizes (default: 128 64)")
    g.add_argument("--loss", choices=training.LOSS_MODES, default="ce", help="training loss (default: %(default)s)")
    g.add_argument("--xi", type=float, default=0.995, help="PC probability margin (default: %(default)s)")
    g.add_argument("--lambda", dest="lam", type=float, default=0.05, help="logit-constraint weight (default: %(default)s)")
    g.add_argument("--c-prime", type=float, default=0.0, help="logit-constraint offset C' (default: %(default)s)")
    g.add_argument("--warmup", type=int, default=10, help="CE warm-up epochs T (default: %(default)s)")
    g.add_argument("--epochs", type=int, default=None, help="total epochs (default: 2 x warmup)")
    g.add_argument("--lr", type=float, default=0.01, help="Adam learning rate (default: %(default)s)")
    g.add_argument("--batch-size", type=int, default=256, help="mini-batch size (default: %(default)s)")
    g.add_argument("--adv", choices=("off", "fgsm", "pgd"), default="off",
                   help="adversarial augmentation (default: %(default)s)")
    g.add_argument("--adv-eps", default="0.1:0.3", help="augmentation eps range lo:hi (default: %(default)s)")
    g.add_argument("--adv-steps", type=int, default=5, help="PGD augmentation steps (default: %(default)s)")
    g.add_argument("--checkpoint-every", type=int, default=0, help="checkpoint cadence in epochs (default: off)")


def _attack_flags(p, with_lr: bool = True, n_default: int | None = None) -> None:
    g = p.add_argument_group("attack")
    g.add_argument("--steps", type=int, default=None,
                   help="iterations (default: fgsm 1, bim 10, pgd/mim/spsa 40)")
    g.add_argument("--step-size", type=float, default=0.01, help="per-iteration step (default: %(default)s)")
    if with_lr:
        g.add_argument("--lr", dest="attack_lr", type=float, default=None,
                       help="C&W or SPSA learning rate (default: 0.001 for cw, 0.01 for spsa)")
    g.add_argument("--delta", type=float, default=0.01, help="SPSA probe size (default: %(default)s)")
    g.add_argument("--samples", type=int, default=128, help="SPSA samples per step (default: %(default)s)")
    g.add_argument("--confidence", type=float, default=0.0, help="C&W confidence (default: %(default)s)")
    g.add_argument("--cw-steps", type=int, default=100, help="C&W steps per search round (default: %(default)s)")
    g.add_argument("--search-steps", type=int, default=5, help="C&W binary-search rounds (default: %(default)s)")
    g.add_argument("--decay", type=float, default=1.0, help="MIM momentum decay (default: %(default)s)")
    g.add_argument("--n", type=int, default=n_default,
                   help="evaluate on the first N test samples (default: %s)" % (n_default or "all"))


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="pcrobust", description="PC+LC training, attacks and robustness analyses.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    leaves: dict[str, argparse.ArgumentParser] = {}

    p = sub.add_parser("train", help="train a model (CE or two-phase PC+LC)")
    _common(p)
    _model_flags(p)
    leaves["train"] = p

    p = sub.add_parser("attack", help="attack a checkpoint")
    _common(p)
    p.add_argument("--model", required=False, default=None, help="checkpoint to attack")
    p.add_argument("--method", choices=attacks.METHODS, default="fgsm", help="attack (default: %(default)s)")
    p.add_argument("--eps", default="0.3", help="L-inf budget or grid (default: %(default)s)")
    _attack_flags(p)
    leaves["attack"] = p

    p = sub.add_parser("analyze", help="rank histogram, gap statistics, gradient masking, tables")
    kinds = p.add_subparsers(dest="analysis", required=True)
    for kind, help_ in (("rank", "misclassification-rank histogram"), ("gaps", "probability-gap statistics"),
                        ("masking", "gradient-masking checklist"), ("table", "accuracy-under-attack table")):
        q = kinds.add_parser(kind, help=help_)
        _common(q)
        q.add_argument("--model", default=None, help="checkpoint (rank, gaps)")
        q.add_argument("--ce", default=None, help="CE checkpoint (masking, table)")
        q.add_argument("--pclc", default=None, help="PC+LC checkpoint (masking, table)")
        q.add_argument("--substitute", default=None, help="substitute checkpoint (masking; default: train cnn3)")
        q.add_argument("--substitute-epochs", type=int, default=5, help="substitute training epochs (default: %(default)s)")
        q.add_argument("--lr-train", type=float, default=0.01, help="substitute learning rate (default: %(default)s)")
        q.add_argument("--batch-size", type=int, default=256, help="substitute batch size (default: %(default)s)")
        q.add_argument("--method", choices=("fgsm", "mim"), default="fgsm", help="rank attack (default: %(default)s)")
        q.add_argument("--grid", default="0.02:0.3:0.02" if kind == "rank" else "0.1,0.2,0.3",
                       help="eps grid start:stop:step or list (default: %(default)s)")
        q.add_argument("--xi", type=float, default=0.995, help="gap threshold (default: %(default)s)")
        _attack_flags(q)
        leaves[f"analyze {kind}"] = q

    p = sub.add_parser("reproduce", help="full pipeline: shared warm-up, attack suite, analyses")
    _common(p)
    _model_flags(p)
    _attack_flags(p, with_lr=False, n_default=1000)
    p.add_argument("--scale", choices=("desk",), default="desk", help="experiment scale (default: %(default)s)")
    p.add_argument("--grid", default="0.02:0.3:0.02", help="rank-histogram grid (default: %(default)s)")
    p.add_argument("--substitute-epochs", type=int, default=5, help="substitute training epochs (default: %(default)s)")
    p.add_argument("--spsa-size", type=int, default=100, help="test samples attacked by SPSA (default: %(default)s)")
    leaves["reproduce"] = p
    return parser, leaves


def _leaf_key(args) -> str:
    return f"analyze {args.analysis}" if args.command == "analyze" else args.command


def resolve(argv: list[str]) -> tuple[str, dict]:
    """Parse ``argv`` honoring defaults < --config JSON < explicit flags."""
    parser, leaves = build_parser()
    args = parser.parse_args(argv)
    key = _leaf_key(args)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read --config: {exc}")
        if "subcommand" in loaded and "config" in loaded:  # a manifest
            loaded = loaded["config"]
        valid = {a.dest for a in leaves[key]._actions}
        unknown = sorted(set(loaded) - valid - {"command", "analysis"})
        if unknown:
            parser.error(f"unknown keys in --config: {', '.join(unknown)}")
        leaves[key].set_defaults(**{k: v for k, v in loaded.items() if k in valid and k != "config"})
        args = parser.parse_args(argv)
    cfg = vars(args)
    cfg.pop("command")
    return key, cfg


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    key, cfg = resolve(argv)
    logging.basicConfig(level=cfg["log_level"].upper(), format="%(asctime)s %(name)s %(message)s")
    threads = 1 if cfg["deterministic"] else max(1, cfg["threads"])
    run = Run(key, cfg, Path(cfg["out"]))
    try:
        with threadpool_limits(limits=threads):
            code = COMMANDS[key.split()[0]](cfg, run)
    except KeyboardInterrupt:
        run.finish(False, "interrupted")
        print("interrupted; partial artifacts flagged incomplete in manifest.json", file=sys.stderr)
        return EXIT_INTERRUPTED
    except training.DivergenceError as exc:
        run.finish(False, "diverged")
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except UsageError as exc:
        run.finish(False, "usage")
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParamFileError, IDXError, ShapeError, FileNotFoundError, ValueError) as exc:
        run.finish(False, "error")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    run.finish(True)
    return code


if __name__ == "__main__":
    sys.exit(main())
