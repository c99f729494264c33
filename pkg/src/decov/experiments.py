"""Config-driven experiment runs and the consolidated report.

Layout under ``output_dir``::

    runs/<experiment>/<config hash>/<seed>/metrics.csv
    runs/<experiment>/<config hash>/<seed>/summary.json
    report/<experiment>.csv

The hash covers everything that defines a cell except the seed, so seeds of
one cell share a directory and a changed setting never overwrites old runs.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets as ds
from .config import CellConfig, ExperimentConfig, config_hash
from .models import ARCHITECTURES
from .trainer import (
    ClassificationTask,
    ConfigError,
    OptimConfig,
    ReconstructionTask,
    RegularizerSpec,
    RunRecord,
    Split,
    grid_search,
    train,
)
from .viz import tile_weights, write_pgm, write_png

log = logging.getLogger(__name__)

MSE_CONVENTION = "squared error summed over the 784 pixels (values in [0, 1]), averaged over images"
WEIGHT_DECAY_CELL = "weight-decay"


class NoRunsError(FileNotFoundError):
    """A report was requested for a directory without completed runs."""


@dataclass
class Prepared:
    """Everything an experiment needs to train: task, splits and input shape."""

    task: object
    train: Split
    val: Split | None
    test: Split
    input_shape: tuple
    num_classes: int = 10


def _image_split(images: ds.LabeledImageSet, flat: bool) -> Split:
    x = images.images.reshape(len(images), -1) if flat else images.images[..., None]
    return Split(np.ascontiguousarray(x), images.labels)


def _pair_split(pairs: ds.PairSet) -> Split:
    return Split(pairs.images[..., None], pairs.labels)


def _limit(n_total: int, limit: int | None) -> int:
    return n_total if limit is None else min(n_total, limit)


def prepare(cfg: ExperimentConfig) -> Prepared:
    d = cfg.data
    arch = cfg.model.architecture
    if cfg.experiment == "pairs-mnist":
        if arch != "lenet-dual":
            raise ConfigError("pairs-mnist needs the lenet-dual architecture")
        train_imgs, test_imgs = ds.load_mnist(d.data_dir)
        biased = ds.biased_pair_distribution()
        train_p = ds.generate_pairs(train_imgs, biased, d.train_pairs, ds.Rng(d.data_seed))
        val_p = (ds.generate_pairs(train_imgs, biased, d.val_pairs, ds.Rng(d.data_seed + 1))
                 if d.val_pairs else None)
        test_p = ds.generate_pairs(test_imgs, ds.uniform_pair_distribution(), d.test_pairs,
                                   ds.Rng(d.data_seed + 2))
        return Prepared(ClassificationTask(["left", "right"]), _pair_split(train_p),
                        _pair_split(val_p) if val_p else None, _pair_split(test_p),
                        (ds.DIGIT, ds.PAIR_WIDTH, 1))

    if cfg.experiment == "cifar-quick":
        if arch != "cifar-quick":
            raise ConfigError("cifar-quick needs the cifar-quick architecture")
        root = Path(d.data_dir)
        batches = sorted(root.glob("data_batch_*.bin"))
        if not batches or not (root / "test_batch.bin").exists():
            raise ds.DataError(f"CIFAR-10 binary batches not found in {root} "
                               f"(expected data_batch_*.bin and test_batch.bin)")
        parts = [ds.read_cifar10_batch(p) for p in batches]
        full = ds.LabeledImageSet(np.concatenate([p.images for p in parts]),
                                  np.concatenate([p.labels for p in parts]))
        test = ds.read_cifar10_batch(root / "test_batch.bin")
        test = test.subset(slice(0, _limit(len(test), d.test_limit)))

        def shaped(s):
            return Split(s.images.reshape(len(s), 32, 32, 3), s.labels)

        n_val = d.val_count
        train = full.subset(slice(0, len(full) - n_val))
        train = train.subset(slice(0, _limit(len(train), d.train_limit)))
        val = full.subset(slice(len(full) - n_val, len(full))) if n_val else None
        return Prepared(ClassificationTask(["class"]), shaped(train),
                        shaped(val) if val else None, shaped(test), (32, 32, 3))

    # single MNIST digits
    train_imgs, test_imgs = ds.load_mnist(d.data_dir)
    order = ds.Rng(d.data_seed).permutation(len(train_imgs))
    val_idx = order[:d.val_count]
    train_idx = order[d.val_count:]
    train_idx = train_idx[:_limit(len(train_idx), d.train_limit)]
    test_imgs = test_imgs.subset(slice(0, _limit(len(test_imgs), d.test_limit)))
    if cfg.experiment == "autoencoder-mnist":
        if arch != "autoencoder":
            raise ConfigError("autoencoder-mnist needs the autoencoder architecture")

        def recon(s):
            x = np.ascontiguousarray(s.images.reshape(len(s), -1))
            return Split(x, x)

        return Prepared(ReconstructionTask(), recon(train_imgs.subset(train_idx)),
                        recon(train_imgs.subset(val_idx)) if len(val_idx) else None,
                        recon(test_imgs), (784,))
    if arch not in ("lenet", "mlp"):
        raise ConfigError(f"{cfg.experiment} supports the lenet or mlp architectures, not {arch!r}")
    flat = arch == "mlp"
    return Prepared(ClassificationTask(["digit"]), _image_split(train_imgs.subset(train_idx), flat),
                    _image_split(train_imgs.subset(val_idx), flat) if len(val_idx) else None,
                    _image_split(test_imgs, flat), (28, 28, 1) if not flat else (784,))


def model_factory(cfg: ExperimentConfig, prep: Prepared):
    m = cfg.model
    build = ARCHITECTURES.get(m.architecture)
    if build is None:
        raise ConfigError(f"unknown architecture {m.architecture!r}")
    common = dict(hidden_units=m.hidden_units, init=m.init, init_std=m.init_std)
    if m.architecture == "autoencoder":
        return lambda rng, p: build(rng, n_in=prep.input_shape[0], dropout_p=p, **common)
    if m.architecture == "mlp":
        return lambda rng, p: build(rng, int(np.prod(prep.input_shape)), num_classes=prep.num_classes,
                                    dropout_p=p, **common)
    return lambda rng, p: build(rng, input_shape=prep.input_shape, num_classes=prep.num_classes,
                                dropout_p=p, **common)


def _cell_payload(cfg: ExperimentConfig, cell: CellConfig, optim: OptimConfig, extra: dict) -> dict:
    o = dataclasses.asdict(optim)
    o.pop("seed")
    o["lr_schedule"] = [list(e) for e in o["lr_schedule"]]
    return {
        "experiment": cfg.experiment,
        "data": dataclasses.asdict(cfg.data),
        "model": dataclasses.asdict(cfg.model),
        "optim": o,
        "cell": dataclasses.asdict(cell),
        "eval_every": cfg.eval_every,
        "train_eval_size": cfg.train_eval_size,
        **extra,
    }


@dataclass
class CellRun:
    cell: CellConfig
    seed: int
    record: RunRecord
    run_dir: Path
    extra: dict = field(default_factory=dict)


def run_cell(cfg: ExperimentConfig, prep: Prepared, cell: CellConfig, seed: int,
             weight_decay: float | None = None, train_split: Split | None = None,
             extra: dict | None = None, role: str = "cell") -> CellRun:
    """Train one (cell, seed) combination and write its metrics and summary."""
    extra = dict(extra or {})
    optim = dataclasses.replace(cfg.optim, seed=seed)
    if weight_decay is not None:
        optim = dataclasses.replace(optim, weight_decay=weight_decay)
    reg = RegularizerSpec(cell.decov_weight, cell.dropout_p)
    payload = _cell_payload(cfg, cell, optim, extra)
    h = config_hash(payload)
    run_dir = Path(cfg.output_dir) / "runs" / cfg.experiment / h / str(seed)
    log.info("%s cell=%s seed=%d -> %s", cfg.experiment, cell.name, seed, run_dir)
    model, record = train(model_factory(cfg, prep), train_split or prep.train, prep.test, prep.task,
                          optim, reg, eval_every=cfg.eval_every, train_eval_size=cfg.train_eval_size)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "metrics.csv").write_text(record.to_csv())
    summary = {
        "experiment": cfg.experiment,
        "config_hash": h,
        "seed": seed,
        "role": role,
        "cell": dataclasses.asdict(cell),
        "weight_decay": optim.weight_decay,
        "heads": list(prep.task.head_names),
        "has_accuracy": prep.task.has_accuracy,
        "config": payload,
        "final": record.final,
        **extra,
    }
    if not prep.task.has_accuracy:
        summary["mse_convention"] = MSE_CONVENTION
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if cfg.experiment == "autoencoder-mnist":
        encoder = model.trunk[0].W.value
        img = tile_weights(encoder, (28, 28))
        write_pgm(run_dir / "encoder_weights.pgm", img)
        write_png(run_dir / "encoder_weights.png", img)
    return CellRun(cell, seed, record, run_dir, extra)


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation (0 for a single value)."""
    values = [float(v) for v in values]
    return statistics.fmean(values), statistics.pstdev(values) if len(values) > 1 else 0.0


@dataclass
class CellStats:
    name: str
    decov_weight: float
    dropout_p: float
    weight_decay: float
    runs: list
    role: str = "cell"

    def metric(self, key: str) -> list[float]:
        return [r.record.final[key] for r in self.runs]

    def head_gaps(self, head: str) -> list[float]:
        return [r.record.head_gap(head) if len(r.record.head_names) > 1 else r.record.gap
                for r in self.runs]

    def head_values(self, head: str, split: str) -> list[float]:
        key = f"{split}_accuracy_{head}" if len(self.runs[0].record.head_names) > 1 else f"{split}_accuracy"
        return self.metric(key)


@dataclass
class FactorialResult:
    """{DeCov, Dropout} x {yes, no} cells plus the weight-decay-only row."""

    experiment: str
    heads: list
    cells: list

    def cell(self, name: str) -> CellStats:
        for c in self.cells:
            if c.name == name:
                return c
        raise KeyError(name)

    def median_gap(self, name: str, head: str) -> float:
        return float(np.median(self.cell(name).head_gaps(head)))

    def median_cov_norm(self, name: str) -> float:
        return float(np.median(self.cell(name).metric("offdiag_cov_norm")))

    def table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["cell", "decov", "dropout", "decov_weight", "dropout_p", "weight_decay", "seeds"]
        for h in self.heads:
            for m in ("train", "test", "gap"):
                header += [f"{h}_{m}_mean", f"{h}_{m}_std"]
        header += ["cov_norm_mean", "cov_norm_std"]
        w.writerow(header)
        for c in sorted(self.cells, key=_cell_order):
            row = [c.name, "yes" if c.decov_weight > 0 else "no", "yes" if c.dropout_p > 0 else "no",
                   repr(c.decov_weight), repr(c.dropout_p), repr(c.weight_decay), len(c.runs)]
            for h in self.heads:
                for vals in (c.head_values(h, "train"), c.head_values(h, "eval"), c.head_gaps(h)):
                    row += [repr(v) for v in mean_std(vals)]
            row += [repr(v) for v in mean_std(c.metric("offdiag_cov_norm"))]
            w.writerow(row)
        return buf.getvalue()


def _factorial_rank(decov_weight: float, dropout_p: float, role: str) -> int:
    if role == WEIGHT_DECAY_CELL:
        return 4
    return {(False, False): 0, (False, True): 1, (True, True): 2, (True, False): 3}[
        (decov_weight > 0, dropout_p > 0)]


def _cell_order(c: CellStats):
    return (_factorial_rank(c.decov_weight, c.dropout_p, c.role), c.name)


def select_weight_decay(cfg: ExperimentConfig, prep: Prepared) -> tuple[float, list]:
    """Best L2 coefficient on the validation split, trained with the first seed."""
    if prep.val is None:
        raise ConfigError("weight_decay_grid needs a validation split")
    points = [(dataclasses.replace(cfg.optim, weight_decay=wd, seed=cfg.seeds[0]), RegularizerSpec())
              for wd in cfg.weight_decay_grid]
    best, records = grid_search(points, model_factory(cfg, prep), prep.train, prep.val, prep.task,
                                eval_every=cfg.eval_every, train_eval_size=cfg.train_eval_size)
    return cfg.weight_decay_grid[best], records


def run_factorial(cfg: ExperimentConfig, prep: Prepared | None = None) -> FactorialResult:
    """Every configured cell for every seed, plus the weight-decay row if gridded."""
    prep = prep or prepare(cfg)
    if not cfg.cells:
        raise ConfigError(f"{cfg.experiment} needs at least one cell")
    stats = []
    for cell in cfg.cells:
        runs = [run_cell(cfg, prep, cell, s) for s in cfg.seeds]
        stats.append(CellStats(cell.name, cell.decov_weight, cell.dropout_p,
                               runs[0].record.optim.weight_decay, runs))
    if cfg.weight_decay_grid:
        wd, _ = select_weight_decay(cfg, prep)
        cell = CellConfig(WEIGHT_DECAY_CELL)
        runs = [run_cell(cfg, prep, cell, s, weight_decay=wd, role=WEIGHT_DECAY_CELL,
                         extra={"weight_decay_grid": list(cfg.weight_decay_grid)})
                for s in cfg.seeds]
        stats.append(CellStats(cell.name, 0.0, 0.0, wd, runs, role=WEIGHT_DECAY_CELL))
    result = FactorialResult(cfg.experiment, list(prep.task.head_names), stats)
    out = Path(cfg.output_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{cfg.experiment}_table.csv").write_text(result.table())
    return result


def run_pairs_experiment(cfg: ExperimentConfig) -> FactorialResult:
    """Dual-head LeNet on biased side-by-side digits; returns per-head stats."""
    if cfg.experiment != "pairs-mnist":
        raise ConfigError(f"expected a pairs-mnist config, got {cfg.experiment}")
    return run_factorial(cfg)


@dataclass
class AutoencoderResult:
    cells: list  # CellStats

    def median_test_mse(self, name: str) -> float:
        return float(np.median(self.cell(name).metric("eval_task_loss")))

    def cell(self, name: str) -> CellStats:
        for c in self.cells:
            if c.name == name:
                return c
        raise KeyError(name)

    def table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "decov_weight", "dropout_p", "seeds", "train_mse_mean", "train_mse_std",
                    "test_mse_mean", "test_mse_std", "cov_norm_mean", "cov_norm_std"])
        for c in self.cells:
            row = [c.name, repr(c.decov_weight), repr(c.dropout_p), len(c.runs)]
            for key in ("train_task_loss", "eval_task_loss", "offdiag_cov_norm"):
                row += [repr(v) for v in mean_std(c.metric(key))]
            w.writerow(row)
        w.writerow([f"# mse: {MSE_CONVENTION}"])
        return buf.getvalue()


def run_autoencoder_experiment(cfg: ExperimentConfig) -> AutoencoderResult:
    """784-256-784 ReLU autoencoder per cell; writes tiled encoder weights per run."""
    if cfg.experiment != "autoencoder-mnist":
        raise ConfigError(f"expected an autoencoder-mnist config, got {cfg.experiment}")
    prep = prepare(cfg)
    stats = []
    for cell in cfg.cells:
        runs = [run_cell(cfg, prep, cell, s) for s in cfg.seeds]
        stats.append(CellStats(cell.name, cell.decov_weight, cell.dropout_p,
                               cfg.optim.weight_decay, runs))
    result = AutoencoderResult(stats)
    out = Path(cfg.output_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{cfg.experiment}_table.csv").write_text(result.table())
    return result


COVARIANCE_COLUMNS = ["fraction", "eval_error", "cov_norm", "seed"]


def run_covariance_vs_datasize(cfg: ExperimentConfig) -> dict[str, list[dict]]:
    """Final eval error and off-diagonal covariance norm per training-set fraction.

    Each cell is an arm (typically with and without dropout). Returns
    {arm: rows} and writes ``report/covariance-vs-datasize_<arm>.csv``.
    """
    if cfg.experiment != "covariance-vs-datasize":
        raise ConfigError(f"expected a covariance-vs-datasize config, got {cfg.experiment}")
    if not cfg.fractions:
        raise ConfigError("covariance-vs-datasize needs a non-empty fractions list")
    prep = prepare(cfg)
    n = len(prep.train)
    series = {}
    out = Path(cfg.output_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    for cell in cfg.cells:
        rows = []
        for frac in cfg.fractions:
            k = max(1, int(round(frac * n)))
            for seed in cfg.seeds:
                run = run_cell(cfg, prep, cell, seed, train_split=prep.train.take(slice(0, k)),
                               extra={"fraction": frac})
                final = run.record.final
                rows.append({"fraction": frac, "eval_error": 1.0 - final["eval_accuracy"],
                             "cov_norm": final["offdiag_cov_norm"], "seed": seed})
        series[cell.name] = rows
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COVARIANCE_COLUMNS)
        for r in rows:
            w.writerow([repr(r["fraction"]), repr(r["eval_error"]), repr(r["cov_norm"]), r["seed"]])
        (out / f"{cfg.experiment}_{cell.name}.csv").write_text(buf.getvalue())
    return series


def run_gridsearch(cfg: ExperimentConfig) -> tuple[dict, list]:
    """Product grid over DeCov weight, dropout, weight decay and learning rate.

    Selection uses the validation split and the first seed. Writes
    ``report/<experiment>_gridsearch.csv`` and returns (best point, rows).
    """
    prep = prepare(cfg)
    if prep.val is None:
        raise ConfigError("grid search needs a validation split (val_pairs / val_count > 0)")
    g = cfg.grid
    wds = g.weight_decay or [cfg.optim.weight_decay]
    lrs = g.learning_rate or [cfg.optim.learning_rate]
    points, labels = [], []
    for lam in g.decov_weight:
        for p in g.dropout_p:
            for wd in wds:
                for lr in lrs:
                    o = dataclasses.replace(cfg.optim, weight_decay=wd, learning_rate=lr, seed=cfg.seeds[0])
                    points.append((o, RegularizerSpec(lam, p)))
                    labels.append({"decov_weight": lam, "dropout_p": p, "weight_decay": wd,
                                   "learning_rate": lr})
    best, records = grid_search(points, model_factory(cfg, prep), prep.train, prep.val, prep.task,
                                eval_every=cfg.eval_every, train_eval_size=cfg.train_eval_size)
    rows = []
    for lab, rec in zip(labels, records):
        row = dict(lab)
        row["val_task_loss"] = rec.final["eval_task_loss"]
        if prep.task.has_accuracy:
            row["train_accuracy"] = rec.final["train_accuracy"]
            row["val_accuracy"] = rec.final["eval_accuracy"]
        row["offdiag_cov_norm"] = rec.final["offdiag_cov_norm"]
        rows.append(row)
    out = Path(cfg.output_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(rows[0])
    w.writerow(cols + ["selected"])
    for i, r in enumerate(rows):
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols] + [int(i == best)])
    (out / f"{cfg.experiment}_gridsearch.csv").write_text(buf.getvalue())
    return labels[best], rows


def run_experiment(cfg: ExperimentConfig):
    runners = {
        "pairs-mnist": run_pairs_experiment,
        "autoencoder-mnist": run_autoencoder_experiment,
        "cifar-quick": run_factorial,
        "covariance-vs-datasize": run_covariance_vs_datasize,
    }
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return runners[cfg.experiment](cfg)


# ---------------------------------------------------------------- reporting


def _report_rows(summaries: list[dict]) -> tuple[list[str], list[list]]:
    groups: dict[str, list[dict]] = {}
    for s in summaries:
        groups.setdefault(s["config_hash"], []).append(s)
    first = summaries[0]
    heads = first["heads"]
    has_acc = first["has_accuracy"]
    header = ["cell", "config_hash", "decov_weight", "dropout_p", "weight_decay", "fraction", "seeds"]
    if has_acc:
        multi = len(heads) > 1
        for h in heads:
            for m in ("train", "test", "gap"):
                header += [f"{h}_{m}_mean", f"{h}_{m}_std"]
    else:
        header += ["train_mse_mean", "train_mse_std", "test_mse_mean", "test_mse_std"]
    header += ["cov_norm_mean", "cov_norm_std"]

    keyed = []
    for h, runs in groups.items():
        runs.sort(key=lambda s: s["seed"])
        s0 = runs[0]
        cell = s0["cell"]
        row = [cell["name"], h, repr(cell["decov_weight"]), repr(cell["dropout_p"]),
               repr(s0["weight_decay"]), repr(s0.get("fraction", 1.0)), len(runs)]
        if has_acc:
            for head in heads:
                tk = f"train_accuracy_{head}" if multi else "train_accuracy"
                ek = f"eval_accuracy_{head}" if multi else "eval_accuracy"
                train_v = [r["final"][tk] for r in runs]
                test_v = [r["final"][ek] for r in runs]
                gaps = [a - b for a, b in zip(train_v, test_v)]
                for vals in (train_v, test_v, gaps):
                    row += [repr(v) for v in mean_std(vals)]
        else:
            for key in ("train_task_loss", "eval_task_loss"):
                row += [repr(v) for v in mean_std([r["final"][key] for r in runs])]
        row += [repr(v) for v in mean_std([r["final"]["offdiag_cov_norm"] for r in runs])]
        order = (_factorial_rank(cell["decov_weight"], cell["dropout_p"], s0.get("role", "cell")),
                 s0.get("fraction", 1.0), cell["name"], h)
        keyed.append((order, row))
    keyed.sort(key=lambda t: t[0])
    return header, [r for _, r in keyed]


def emit_report(results_dir) -> dict[str, Path]:
    """Merge every run summary under ``results_dir`` into report/<experiment>.csv.

    Unreadable or incomplete summaries are skipped with a warning and listed
    in a ``# skipped`` footer. Raises NoRunsError when nothing usable exists.
    """
    root = Path(results_dir)
    files = sorted(p for p in root.rglob("summary.json") if "report" not in p.relative_to(root).parts)
    by_exp: dict[str, list[dict]] = {}
    skipped: list[tuple[Path, str]] = []
    required = ("experiment", "config_hash", "seed", "cell", "heads", "has_accuracy", "final")
    for f in files:
        try:
            s = json.loads(f.read_text())
            missing = [k for k in required if k not in s]
            if missing:
                raise ValueError(f"missing keys {missing}")
            if not (f.parent / "metrics.csv").exists():
                raise ValueError("no metrics.csv next to it")
        except (ValueError, OSError) as e:
            log.warning("skipping %s: %s", f, e)
            skipped.append((f, str(e).splitlines()[0]))
            continue
        by_exp.setdefault(s["experiment"], []).append(s)
    if not by_exp:
        raise NoRunsError(f"no runs found under {root}")
    out_dir = root / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for exp in sorted(by_exp):
        header, rows = _report_rows(by_exp[exp])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        for f, why in skipped:
            buf.write(f"# skipped {f.relative_to(root)}: {why}\n")
        path = out_dir / f"{exp}.csv"
        path.write_text(buf.getvalue())
        written[exp] = path
    return written
