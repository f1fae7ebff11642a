from pathlib import Path

import numpy as np
import pandas as pd

from terminator import tensor as tc
from terminator.autograd import backward, grad_check, no_grad
from terminator.checkpoint import load_checkpoint
from terminator.data import Dataset, batches
from terminator.exporter import read_csv, read_pgm
from terminator.history import MetricHistory
from terminator.model import Terminator, tiny_config
from terminator.runner import (
    EvalReport,
    build_datasets,
    channel_statistics,
    compute_loss,
    evaluate,
    family_checks,
    run_eval,
    run_gradcheck,
    run_inspect,
    run_params,
    run_train,
)
from terminator.settings import RunConfig, load_run_config

RESOURCES = Path(__file__).resolve().parent.parent / "resources"

TINY_MODEL = {
    "stem_channels": 4,
    "num_blocks": 2,
    "kernel_sizes": [3, 5],
    "groups": 2,
    "global_mfn": {"depth": 2, "width": 6, "omega": 8.0},
    "local_mfn": {"depth": 2, "width": 4, "omega": 4.0},
    "hyper_mfn": {"depth": 1, "width": 4, "omega": 4.0},
}


def _tiny_run(**overrides):
    raw = {
        "name": "tiny",
        "seed": 0,
        "model": dict(TINY_MODEL),
        "optimizer": {"lr": 0.05, "epochs": 2, "batch_size": 8, "eval_batch_size": 8},
        "data": {"dataset": "stripes", "train_size": 16, "test_size": 8, "synthetic_size": 6},
    }
    raw.update(overrides)
    return RunConfig.from_dict(raw)


def test_test_split_uses_train_statistics():
    train, test = build_datasets(_tiny_run())
    assert test.norm_stats == train.norm_stats
    assert len(train) == 16 and len(test) == 8
    assert not np.array_equal(train.images[:8], test.images)


def test_train_writes_artifacts_and_checkpoint(tmp_path):
    report = run_train(_tiny_run(), tmp_path)
    assert report.steps == 4
    for name in ("config.json", "dataset.json", "metrics.csv", "checkpoint.tmnt"):
        assert (tmp_path / name).exists()
    history = MetricHistory.load_csv(tmp_path / "metrics.csv")
    assert history.column("epoch") == [1, 2]
    assert all(np.isfinite(history.column("train_loss")))
    ckpt = load_checkpoint(tmp_path / "checkpoint.tmnt")
    assert ckpt.step == 4
    assert ckpt.metrics_digest == history.digest()
    assert ckpt.config["run"]["name"] == "tiny"
    assert set(ckpt.params) == {p.name for p in report.model.parameters()}


def test_training_is_deterministic(tmp_path):
    a = run_train(_tiny_run(), tmp_path / "a")
    b = run_train(_tiny_run(), tmp_path / "b")
    assert a.history.digest() == b.history.digest()
    pa = load_checkpoint(tmp_path / "a" / "checkpoint.tmnt").params
    pb = load_checkpoint(tmp_path / "b" / "checkpoint.tmnt").params
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_zero_alpha_reports_slow_loss_but_ignores_it(tmp_path):
    report = run_train(_tiny_run(loss={"alpha": 0.0}, optimizer={"lr": 0.05, "epochs": 1, "batch_size": 8}), tmp_path)
    row = report.history.last()
    assert np.isclose(row["train_loss"], row["ce"])
    assert row["ls"] > 0.0
    initial = Terminator(report.model.cfg, seed=0).state_dict()
    assert not np.array_equal(initial["block0.slow.global.Wo"], report.model.state_dict()["block0.slow.global.Wo"])


def test_eval_reproduces_final_training_accuracy(tmp_path):
    train_report = run_train(_tiny_run(), tmp_path)
    report = run_eval(tmp_path / "checkpoint.tmnt")
    assert np.isclose(report.accuracy, train_report.history.last()["test_acc"])
    assert (tmp_path / "eval.json").exists()
    confusion = pd.read_csv(tmp_path / "confusion.csv", index_col=0)
    assert confusion.values.sum() == 8
    per_class = read_csv(tmp_path / "per_class.csv")
    assert [row["class"] for row in per_class] == ["0", "1"]


def test_eval_report_tables_include_absent_classes():
    report = EvalReport(accuracy=0.5, predictions=np.array([0, 0]), labels=np.array([0, 2]), num_classes=3)
    confusion = report.confusion()
    assert confusion.shape == (3, 3)
    assert confusion.loc[2, 0] == 1
    per_class = report.per_class()
    assert per_class["count"].tolist() == [1, 0, 1]
    assert per_class["accuracy"].tolist() == [1.0, 0.0, 0.0]


def test_inspect_writes_heatmaps_per_block(tmp_path):
    run_train(_tiny_run(optimizer={"lr": 0.05, "epochs": 1, "batch_size": 8}), tmp_path)
    report = run_inspect(tmp_path / "checkpoint.tmnt", sample_index=1, out_dir=tmp_path / "inspect")
    names = sorted(p.split("/")[-1] for p in report.files)
    assert "block0_kg.pgm" in names and "block1_kg_hat.pgm" in names and "channel_stats.csv" in names
    assert read_pgm(tmp_path / "inspect" / "block1_feature.pgm").shape == (6, 6)
    assert len(report.channel_stats) == 16


def test_params_table_totals(tmp_path):
    frame = run_params(tiny_config(), seed=0, out_dir=tmp_path)
    assert (tmp_path / "params.csv").exists()
    total = frame.loc[frame["part"] == "all", "total"].item()
    parts = frame.loc[frame["part"] != "all", "total"].sum()
    assert total == parts
    assert np.isclose(frame.loc[frame["part"] != "all", "share"].sum(), 1.0)


def test_family_checks_pass():
    for family, f, params in family_checks(seed=0):
        report = grad_check(f, params, max_entries=3)
        assert report.passed, (family, report.failures())


def test_gradcheck_covers_model_and_families(tmp_path):
    raw_model = dict(TINY_MODEL, num_blocks=1, kernel_sizes=[3])
    cfg = _tiny_run(model=raw_model, gradcheck={"max_entries": 2, "batch_size": 2})
    summary = run_gradcheck(cfg, tmp_path)
    assert summary.passed, summary.failures()
    families = {row["family"] for row in summary.rows}
    assert families == {"model", "sfne", "slownet", "hyperzzw", "standardize", "losses"}
    model_rows = [row for row in summary.rows if row["family"] in ("model", "sfne")]
    assert len(model_rows) == len(Terminator(cfg.model, seed=cfg.seed).parameters())
    rows = read_csv(tmp_path / "gradcheck.csv")
    assert len(rows) == len(summary.rows)


def test_float32_training_keeps_params_and_gradients_float32(tmp_path, monkeypatch):
    monkeypatch.setattr(tc, "_default_dtype", tc.default_dtype())
    cfg = _tiny_run(precision="float32", optimizer={"lr": 0.05, "epochs": 1, "batch_size": 8, "eval_batch_size": 8})
    report = run_train(cfg, tmp_path)
    params = report.model.parameters()
    assert {p.value.dtype for p in params} == {np.dtype(np.float32)}
    train, _ = build_datasets(cfg)
    loss, _, _, _ = compute_loss(report.model, train.images[:8], train.labels[:8], cfg)
    assert loss.value.dtype == np.float32
    grads = backward(loss, params)
    assert len(grads) == len(params)
    assert {g.dtype for g in grads.values()} == {np.dtype(np.float32)}


def test_channel_statistics_match_full_split_moments():
    cfg = _tiny_run()
    train, _ = build_datasets(cfg)
    model = Terminator(cfg.model, seed=0)
    stats = channel_statistics(model, train, batch_size=5)
    with no_grad():
        h = np.concatenate([model.forward(x).taps["block1"].value.data for x, _ in batches(train, 5)])
    assert list(stats["channel"]) == list(range(h.shape[1]))
    assert np.allclose(stats["mean"], h.mean(axis=(0, 2, 3)))
    assert np.allclose(stats["var"], h.var(axis=(0, 2, 3)))
    assert (stats["var"] >= 0).all()


def test_stripes_smoke_config_learns_the_task(tmp_path):
    report = run_train(load_run_config(str(RESOURCES / "stripes_smoke.json")), tmp_path)
    accuracy = report.history.column("test_acc")
    assert len(accuracy) == 5
    assert max(accuracy) == 1.0


def test_untrained_model_scores_at_chance_on_ten_classes():
    rng = np.random.default_rng(0)
    ds = Dataset(images=rng.normal(size=(400, 1, 6, 6)), labels=np.arange(400) % 10, split="test", num_classes=10)
    model = Terminator(tiny_config(num_classes=10), seed=0)
    first = evaluate(model, ds, batch_size=50)
    second = evaluate(model, ds, batch_size=50)
    assert abs(first.accuracy - 0.1) <= 0.05
    assert np.array_equal(first.predictions, second.predictions)


def test_inspect_global_kernel_is_shared_while_context_kernel_follows_the_sample(tmp_path):
    run_train(_tiny_run(optimizer={"lr": 0.05, "epochs": 1, "batch_size": 8}), tmp_path)
    a = run_inspect(tmp_path / "checkpoint.tmnt", sample_index=0, out_dir=tmp_path / "a")
    b = run_inspect(tmp_path / "checkpoint.tmnt", sample_index=1, out_dir=tmp_path / "b")
    assert len(a.files) == len(b.files)
    for j in range(2):
        assert np.array_equal(read_pgm(tmp_path / "a" / f"block{j}_kg.pgm"), read_pgm(tmp_path / "b" / f"block{j}_kg.pgm"))
        assert not np.array_equal(read_pgm(tmp_path / "a" / f"block{j}_kg_hat.pgm"), read_pgm(tmp_path / "b" / f"block{j}_kg_hat.pgm"))
