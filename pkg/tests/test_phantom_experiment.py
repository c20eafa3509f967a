"""End-to-end learning checks on synthetic phantoms (slow ones run with `pytest -m slow`)."""

import numpy as np
import pytest

from conftest import SMALL_PREPROCESS
from src.config import PreprocessConfig, TrainConfig
from src.preprocessing.build_graph_dataset import preprocess_volume
from src.preprocessing.synthetic_phantoms import PhantomSpec, generate_phantom
from src.training.metrics import dice_from_regression
from src.training.phantom_benchmark import (
    ACCEPTANCE_BARS,
    acceptance_table,
    phantom_cohort,
    run_phantom_benchmark,
)
from src.training.trainer import build_model, evaluate, model_config_for_graphs, train


def test_acceptance_table_directions():
    metrics = {"f1": 0.9, "roc_auc": 0.94, "mae": 0.05, "r2": float("nan")}
    table = acceptance_table(metrics).set_index("metric")
    assert list(table.index) == list(ACCEPTANCE_BARS)
    assert table.loc["f1", "passed"]
    assert not table.loc["roc_auc", "passed"]
    assert table.loc["mae", "passed"]
    assert not table.loc["r2", "passed"]
    assert not table.loc["dice_mean", "passed"]


def test_acceptance_bar_edges_pass():
    metrics = {name: bar for name, (_, bar) in ACCEPTANCE_BARS.items()}
    assert acceptance_table(metrics)["passed"].all()


def test_small_benchmark_reports_every_metric():
    result = run_phantom_benchmark(
        n_volumes=3, n_train=2, dims=(20, 20, 20), preprocess=SMALL_PREPROCESS,
        max_epochs=1, lesion_radius_range=(2.5, 3.5),
    )
    assert set(result.metrics) == set(ACCEPTANCE_BARS)
    assert list(result.acceptance.columns) == ["metric", "value", "direction", "bar", "passed"]
    assert isinstance(result.passed, bool)
    assert result.n_train_nodes > 0 and result.n_test_nodes > 0
    assert 0.0 <= result.metrics["dice_mean"] <= 1.0


def test_benchmark_needs_both_splits():
    with pytest.raises(ValueError):
        run_phantom_benchmark(n_volumes=3, n_train=3)


@pytest.fixture(scope="module")
def phantom_graphs():
    cfg = PreprocessConfig(n_sv=128, n_patch=4, patch_size=8, k_nn=6, k_pe=4)
    results = []
    for seed in range(4):
        vol = generate_phantom(PhantomSpec(dims=(32, 32, 32), lesion_radius_range=(4.0, 6.0), seed=seed),
                               volume_id=f"phantom_{seed}")
        results.append((vol, preprocess_volume(vol, cfg)))
    return results


@pytest.mark.slow
def test_regression_learns_tumor_fraction(phantom_graphs):
    graphs = [r.graph for _, r in phantom_graphs]
    model_cfg = model_config_for_graphs(graphs, profile="toy", task="regression")
    train_cfg = TrainConfig.from_profile("toy", max_epochs=50, batch_size=1)
    result = train(graphs[:3], build_model(model_cfg), train_cfg)

    losses = result.history["train_loss"].to_numpy()
    assert losses[-1] <= 0.5 * losses[0]

    dice_inputs = {r.graph.graph_id: (r.partition, vol.mask) for vol, r in phantom_graphs[3:]}
    report = evaluate(graphs[3:], result.model, dice_inputs=dice_inputs)
    assert np.isfinite(report["pooled"]["mae"])
    assert 0.0 <= report["pooled"]["dice_mean"] <= 1.0


@pytest.mark.slow
def test_classification_reports_f1_and_auc(phantom_graphs):
    graphs = [r.graph for _, r in phantom_graphs]
    model_cfg = model_config_for_graphs(graphs, profile="toy", task="classification")
    train_cfg = TrainConfig.from_profile("toy", max_epochs=30, batch_size=1)
    result = train(graphs[:3], build_model(model_cfg), train_cfg)
    report = evaluate(graphs[3:], result.model)
    assert 0.0 <= report["pooled"]["f1"] <= 1.0
    assert set(report["pooled"]) == {"f1", "roc_auc"}


@pytest.mark.slow
def test_default_cohort_supports_the_dice_bar():
    cfg = PreprocessConfig(n_sv=64)
    scores = []
    for vol in phantom_cohort(8, seed=100):
        result = preprocess_volume(vol, cfg)
        graph = result.graph
        assert graph.y_cls.sum() >= 1, f"{graph.graph_id} has no tumor node"
        scores.append(dice_from_regression(graph, graph.y_reg, result.partition, vol.mask))
    assert np.mean(scores) >= ACCEPTANCE_BARS["dice_mean"][1]


@pytest.mark.slow
def test_phantom_benchmark_meets_bars():
    result = run_phantom_benchmark()
    failed = result.acceptance.loc[~result.acceptance["passed"]]
    assert result.passed, f"bars missed:\n{failed.to_string(index=False)}"
