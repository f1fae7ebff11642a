"""Services behind the command-line surface: train, eval, gradcheck, inspect, params."""
import copy
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from . import autograd as ag
from .autograd import SGD, GradCheckReport, Node, Parameter, backward, grad_check, no_grad
from .checkpoint import Checkpoint, apply_checkpoint, load_checkpoint, save_checkpoint
from .data import DEFAULT_PMNIST_SEED, Dataset, NormStats, batches, load_mnist, synthetic, to_sequential
from .exporter import channel_sum_map, write_csv, write_json, write_pgm
from .history import MetricHistory
from .hyperzzw import global_hyperzzw_1d, global_hyperzzw_2d, hyper_channel_interaction, hyper_interaction, local_hyperzzw
from .losses import cross_entropy, slow_neural_loss, total_loss
from .model import ForwardResult, ModelConfig, Terminator, count_params
from .settings import ConfigManager, RunConfig
from .slownet import LocalMfn, Mfn, MfnConfig, generate_global, generate_hyperweights, generate_local, make_grid
from .standardize import batch_standardize, g_ibs, instance_standardize, z_score
from .tensor import ShapeError, set_default_dtype

PathLike = Union[str, Path]
GRADCHECK_FIELDS = ["family", "name", "entries", "max_rel_error", "passed"]


class NumericError(Exception):
    """Raised when a loss turns non-finite or a gradient check fails."""


def build_test_set(cfg: RunConfig, stats: NormStats) -> Dataset:
    d = cfg.data
    if d.dataset in ("mnist", "smnist", "pmnist"):
        test = load_mnist(d.root, "test", d.test_size, stats=stats)
        return _sequential(test, d.dataset, d.permutation_seed)
    return synthetic(d.dataset, d.test_size or 100, seed=cfg.seed + 1, size=d.synthetic_size, split="test", stats=stats)


def build_datasets(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    """Train and test splits; the test split is standardized with train statistics."""
    d = cfg.data
    if d.dataset in ("mnist", "smnist", "pmnist"):
        train = _sequential(load_mnist(d.root, "train", d.train_size), d.dataset, d.permutation_seed)
    else:
        train = synthetic(d.dataset, d.train_size or 200, seed=cfg.seed, size=d.synthetic_size)
    test = build_test_set(cfg, train.norm_stats)
    logging.info("Loaded %s: %d train / %d test samples of shape %s", d.dataset, len(train), len(test), train.sample_shape)
    return train, test


def _sequential(ds: Dataset, name: str, permutation_seed: Optional[int]) -> Dataset:
    if name == "smnist":
        return to_sequential(ds)
    if name == "pmnist":
        return to_sequential(ds, DEFAULT_PMNIST_SEED if permutation_seed is None else permutation_seed)
    return ds


def dataset_meta(train: Dataset, test: Dataset) -> Dict[str, Any]:
    return {
        "train_mean": train.meta["mean"],
        "train_std": train.meta["std"],
        "train_size": len(train),
        "test_size": len(test),
        "sample_shape": list(train.sample_shape),
        "permutation_seed": train.meta.get("permutation_seed"),
        "permutation": train.meta.get("permutation"),
    }


def compute_loss(model: Terminator, x: np.ndarray, labels: np.ndarray, cfg: RunConfig, step: int = 0) -> Tuple[Node, Node, Node, ForwardResult]:
    result = model.forward(x, step)
    ce = cross_entropy(result.logits, labels)
    ls = slow_neural_loss(result.trace, cfg.loss.slow_loss_reduction)
    return total_loss(ce, ls, cfg.loss.alpha), ce, ls, result


@dataclass
class EvalReport:
    accuracy: float
    predictions: np.ndarray
    labels: np.ndarray
    num_classes: int

    def confusion(self) -> pd.DataFrame:
        classes = list(range(self.num_classes))
        return pd.crosstab(
            pd.Categorical(self.labels, categories=classes),
            pd.Categorical(self.predictions, categories=classes),
            rownames=["true"],
            colnames=["pred"],
            dropna=False,
        )

    def per_class(self) -> pd.DataFrame:
        frame = pd.DataFrame({"label": self.labels, "correct": self.labels == self.predictions})
        stats = frame.groupby("label")["correct"].agg(["count", "sum"]).reindex(range(self.num_classes), fill_value=0)
        stats = stats.rename(columns={"sum": "correct"}).rename_axis("class").reset_index()
        stats["correct"] = stats["correct"].astype(int)
        stats["accuracy"] = np.where(stats["count"] > 0, stats["correct"] / stats["count"].clip(lower=1), 0.0)
        return stats


def evaluate(model: Terminator, ds: Dataset, batch_size: int) -> EvalReport:
    """Top-1 accuracy over unshuffled batches of `batch_size`."""
    preds: List[np.ndarray] = []
    with no_grad():
        for x, _ in batches(ds, batch_size):
            preds.append(np.argmax(model.forward(x).logits.value.data, axis=1))
    predictions = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    accuracy = float(np.mean(predictions == ds.labels)) if len(ds) else 0.0
    return EvalReport(accuracy=accuracy, predictions=predictions, labels=ds.labels, num_classes=ds.num_classes)


@dataclass
class TrainReport:
    out_dir: Path
    history: MetricHistory
    model: Terminator
    steps: int


def run_train(cfg: RunConfig, out_dir: PathLike) -> TrainReport:
    cfg.apply_precision()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ConfigManager(str(out / "config.json")).save(cfg.raw)
    train, test = build_datasets(cfg)
    meta = dataset_meta(train, test)
    write_json(out / "dataset.json", meta)

    model = Terminator(cfg.model, seed=cfg.seed)
    params = model.parameters()
    opt = SGD(params, cfg.optimizer.lr, cfg.optimizer.momentum, cfg.optimizer.weight_decay)
    history = MetricHistory()
    echo = {"run": cfg.raw, "dataset": meta}
    step = 0
    for epoch in range(1, cfg.optimizer.epochs + 1):
        start = time.perf_counter()
        sums = {"loss": 0.0, "ce": 0.0, "ls": 0.0}
        seen = 0
        for x, y in batches(train, cfg.optimizer.batch_size, shuffle_seed=cfg.data.shuffle_seed + epoch):
            loss, ce, ls, _ = compute_loss(model, x, y, cfg, step)
            if not loss.value.is_finite():
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.step(backward(loss, params))
            n = len(y)
            sums["loss"] += loss.item() * n
            sums["ce"] += ce.item() * n
            sums["ls"] += ls.item() * n
            seen += n
            step += 1
        acc = evaluate(model, test, cfg.optimizer.eval_batch_size).accuracy
        wall = time.perf_counter() - start
        history.add(epoch, sums["loss"] / seen, sums["ce"] / seen, sums["ls"] / seen, acc, wall)
        logging.info(
            "Epoch %d/%d: loss %.4f ce %.4f ls %.4f test_acc %.4f (%.1fs)",
            epoch, cfg.optimizer.epochs, sums["loss"] / seen, sums["ce"] / seen, sums["ls"] / seen, acc, wall,
        )
        history.save_csv(out / "metrics.csv")
        save_checkpoint(out / "checkpoint.tmnt", Checkpoint.from_model(model, echo, step, history.digest()))
    return TrainReport(out_dir=out, history=history, model=model, steps=step)


def restore(ckpt_path: PathLike, dataset: Optional[str] = None) -> Tuple[RunConfig, Terminator, Dataset]:
    """Rebuild config, model and test split from a checkpoint alone."""
    ckpt = load_checkpoint(ckpt_path)
    raw = copy.deepcopy(ckpt.config.get("run", {}))
    if dataset:
        if dataset != raw.get("data", {}).get("dataset"):
            logging.warning("Evaluating on %s with the training split statistics of the checkpoint", dataset)
        raw.setdefault("data", {})["dataset"] = dataset
    cfg = RunConfig.from_dict(raw)
    cfg.apply_precision()
    model = apply_checkpoint(Terminator(cfg.model, seed=cfg.seed), ckpt)
    meta = ckpt.config.get("dataset", {})
    stats = NormStats(mean=meta.get("train_mean", 0.0), std=meta.get("train_std", 1.0))
    test = build_test_set(cfg, stats)
    if test.sample_shape != tuple(cfg.model.input_shape):
        raise ShapeError(f"dataset samples {test.sample_shape} do not match model input {tuple(cfg.model.input_shape)}")
    return cfg, model, test


def run_eval(ckpt_path: PathLike, dataset: Optional[str] = None, out_dir: Optional[PathLike] = None) -> EvalReport:
    cfg, model, test = restore(ckpt_path, dataset)
    report = evaluate(model, test, cfg.optimizer.eval_batch_size)
    out = Path(out_dir) if out_dir else Path(ckpt_path).parent
    write_json(
        out / "eval.json",
        {
            "generated_at": datetime.now().isoformat(timespec="seconds"),
            "checkpoint": str(ckpt_path),
            "dataset": cfg.data.dataset,
            "samples": len(test),
            "accuracy": report.accuracy,
        },
    )
    report.per_class().to_csv(out / "per_class.csv", index=False)
    report.confusion().to_csv(out / "confusion.csv")
    logging.info("Accuracy on %d %s samples: %.4f", len(test), cfg.data.dataset, report.accuracy)
    return report


def _param(name: str, rng: np.random.Generator, shape: Tuple[int, ...], scale: float = 1.0) -> Parameter:
    return Parameter(name, rng.normal(scale=scale, size=shape), component="fast")


def family_checks(seed: int = 0) -> List[Tuple[str, Callable[[], Node], List[Parameter]]]:
    """Small standalone graphs, one per module family, for finite-difference checks."""
    rng = np.random.default_rng(seed)
    checks: List[Tuple[str, Callable[[], Node], List[Parameter]]] = []

    glob = Mfn("slownet.global", 2, 2, MfnConfig(depth=2, width=4, omega=4.0), rng)
    local = LocalMfn("slownet.local", 2, 2, 3, MfnConfig(depth=1, width=3, omega=4.0), rng)
    hyper = Mfn("slownet.hyper", 1, 1, MfnConfig(depth=1, width=3, omega=4.0), rng)
    z = _param("slownet.z", rng, (2, 2, 4, 4))
    w1 = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(2, 1, 3, 3)), rng.normal(size=(2, 1, 1))
    checks.append((
        "slownet",
        lambda: ag.add(
            ag.add(ag.reduce_sum(ag.mul(generate_global(glob, make_grid(4, 4)), w1[0]), keepdims=False),
                   ag.reduce_sum(ag.mul(generate_local(local, z), w1[1]), keepdims=False)),
            ag.reduce_sum(ag.mul(generate_hyperweights(hyper, "channel", 2), w1[2]), keepdims=False),
        ),
        glob.parameters() + local.parameters() + hyper.parameters() + [z],
    ))

    z2, kg2 = _param("hyperzzw.z2d", rng, (2, 2, 3, 3)), _param("hyperzzw.kg2d", rng, (1, 2, 3, 3))
    z1, kg1 = _param("hyperzzw.z1d", rng, (2, 2, 5)), _param("hyperzzw.kg1d", rng, (1, 2, 5))
    kl = _param("hyperzzw.kl", rng, (2, 1, 3, 3))
    wc, ws = _param("hyperzzw.wc", rng, (2, 1, 1)), _param("hyperzzw.ws", rng, (1, 3, 3))
    weights = [rng.normal(size=s) for s in ((2, 2, 3, 3), (2, 2, 3, 3), (2, 2, 5), (2, 2, 3, 3), (2, 2, 3, 3), (2, 2, 3, 3))]

    def hyperzzw_loss() -> Node:
        outs = [
            *global_hyperzzw_2d(z2, kg2),
            global_hyperzzw_1d(z1, kg1)[1],
            local_hyperzzw(z2, kl),
            hyper_channel_interaction(z2, wc),
            hyper_interaction(z2, ag.square(z2), wc, ws),
        ]
        total = ag.constant(0.0)
        for out, p in zip(outs, weights):
            total = ag.add(total, ag.reduce_sum(ag.mul(out, p), keepdims=False))
        return total

    checks.append(("hyperzzw", hyperzzw_loss, [z2, kg2, z1, kg1, kl, wc, ws]))

    xs = _param("standardize.x", rng, (3, 4, 2, 2))
    std_weights = [rng.normal(size=(3, 4, 2, 2)) for _ in range(4)]

    def standardize_loss() -> Node:
        outs = [z_score(xs, (0, 2, 3)), batch_standardize(xs), instance_standardize(xs), g_ibs(xs, 2)]
        total = ag.constant(0.0)
        for out, p in zip(outs, std_weights):
            total = ag.add(total, ag.reduce_sum(ag.mul(out, p), keepdims=False))
        return total

    checks.append(("standardize", standardize_loss, [xs]))

    trace = [_param(f"losses.k{j}", rng, (1, 2 ** j, 2, 2)) for j in range(3)]
    logits = _param("losses.logits", rng, (3, 4))
    checks.append((
        "losses",
        lambda: total_loss(cross_entropy(logits, [0, 3, 1]), slow_neural_loss(trace), 0.5),
        trace + [logits],
    ))
    return checks


@dataclass
class GradCheckSummary:
    rows: List[Dict[str, Any]] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(row["passed"] for row in self.rows)

    @property
    def max_rel_error(self) -> float:
        return max((row["max_rel_error"] for row in self.rows), default=0.0)

    def failures(self) -> List[Dict[str, Any]]:
        return [row for row in self.rows if not row["passed"]]

    def extend(self, family: Union[str, Callable[[str], str]], report: GradCheckReport) -> None:
        for row in report.rows:
            name = family(row.name) if callable(family) else family
            self.rows.append(
                {"family": name, "name": row.name, "entries": row.entries, "max_rel_error": row.max_rel_error, "passed": row.passed}
            )


def run_gradcheck(cfg: RunConfig, out_dir: Optional[PathLike] = None, families: bool = True) -> GradCheckSummary:
    """Finite-difference check of every trainable model tensor plus per-family graphs, at 64-bit."""
    set_default_dtype("float64")
    gc = cfg.gradcheck
    train, _ = build_datasets(cfg)
    x, y = next(batches(train, gc.batch_size))
    model = Terminator(cfg.model, seed=cfg.seed)

    def model_loss() -> Node:
        return compute_loss(model, x, y, cfg)[0]

    summary = GradCheckSummary(tol=gc.tol)
    report = grad_check(model_loss, model.parameters(), step=gc.step, tol=gc.tol, max_entries=gc.max_entries, seed=gc.seed)
    summary.extend(lambda name: "sfne" if name.startswith("block") else "model", report)
    if families:
        for family, f, params in family_checks(gc.seed):
            summary.extend(family, grad_check(f, params, step=gc.step, tol=gc.tol, max_entries=gc.max_entries, seed=gc.seed))
    if out_dir:
        write_csv(Path(out_dir) / "gradcheck.csv", GRADCHECK_FIELDS, summary.rows)
    logging.info("Gradient check: %d tensors, max relative error %.3e, %d failures", len(summary.rows), summary.max_rel_error, len(summary.failures()))
    return summary


@dataclass
class InspectReport:
    files: List[str]
    channel_stats: pd.DataFrame


def inspect_sample(model: Terminator, x: np.ndarray, out_dir: PathLike) -> List[str]:
    """Channel-sum heatmaps of each block's feature map, K_g and K_hat for one sample."""
    out = Path(out_dir)
    x = np.asarray(x)
    if x.ndim == len(model.cfg.input_shape):
        x = x[None]
    with no_grad():
        result = model.forward(x[:1])
    files = []
    for block in model.blocks:
        j = block.index
        files.append(write_pgm(out / f"block{j}_feature.pgm", channel_sum_map(result.taps[f"block{j}"].numpy())))
        files.append(write_pgm(out / f"block{j}_kg.pgm", channel_sum_map(result.trace[j].numpy())))
        files.append(write_pgm(out / f"block{j}_kg_hat.pgm", channel_sum_map(result.contexts[j].value.numpy())))
    return files


def channel_statistics(model: Terminator, ds: Dataset, batch_size: int) -> pd.DataFrame:
    """Mean and variance per channel of the last hidden layer over the whole split."""
    last = f"block{model.blocks[-1].index}" if model.blocks else "stem"
    # per-batch centered moments merged pairwise, accumulated in float64
    mean = m2 = None
    count = 0
    with no_grad():
        for x, _ in batches(ds, batch_size):
            h = model.forward(x).taps[last].value.data.astype(np.float64)
            axes = (0,) + tuple(range(2, h.ndim))
            n = h.size // h.shape[1]
            batch_mean = h.mean(axis=axes)
            batch_m2 = ((h - batch_mean.reshape((1, -1) + (1,) * (h.ndim - 2))) ** 2).sum(axis=axes)
            if mean is None:
                mean, m2 = batch_mean, batch_m2
            else:
                delta = batch_mean - mean
                merged = count + n
                mean = mean + delta * n / merged
                m2 = m2 + batch_m2 + delta * delta * count * n / merged
            count += n
    return pd.DataFrame({"channel": np.arange(mean.size), "mean": mean, "var": m2 / count})


def run_inspect(ckpt_path: PathLike, sample_index: int = 0, out_dir: Optional[PathLike] = None, dataset: Optional[str] = None) -> InspectReport:
    cfg, model, test = restore(ckpt_path, dataset)
    if not 0 <= sample_index < len(test):
        raise ValueError(f"sample index {sample_index} outside [0, {len(test)})")
    out = Path(out_dir) if out_dir else Path(ckpt_path).parent / "inspect"
    out.mkdir(parents=True, exist_ok=True)
    files = inspect_sample(model, test.images[sample_index:sample_index + 1], out)
    stats = channel_statistics(model, test, cfg.optimizer.eval_batch_size)
    stats.to_csv(out / "channel_stats.csv", index=False)
    files.append(str(out / "channel_stats.csv"))
    logging.info("Wrote %d inspection files to %s", len(files), out)
    return InspectReport(files=files, channel_stats=stats)


def params_table(model: Terminator) -> pd.DataFrame:
    counts = count_params(model)
    frame = pd.DataFrame(counts.rows, columns=["part", "slow", "mixers", "bottleneck", "other", "total"])
    totals = frame[["slow", "mixers", "bottleneck", "other", "total"]].sum()
    frame.loc[len(frame)] = ["all", *totals.tolist()]
    frame["share"] = frame["total"] / counts.total
    return frame


def run_params(model_cfg: ModelConfig, seed: int = 0, out_dir: Optional[PathLike] = None) -> pd.DataFrame:
    model = Terminator(model_cfg, seed=seed)
    frame = params_table(model)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out / "params.csv", index=False)
    counts = count_params(model)
    logging.info("Parameters: %d slow (%.1f%%), %d fast", counts.slow, 100 * counts.slow_fraction, counts.fast)
    return frame
