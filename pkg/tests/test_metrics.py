import numpy as np
import pandas as pd
import pytest

from src.preprocessing.graph_builder import SupervoxelGraph
from src.preprocessing.slic_supervoxels import SupervoxelPartition, partition_stats
from src.preprocessing.volume_io import MultiModalVolume
from src.training.metrics import (
    dice_from_regression,
    f1,
    mae,
    metric_report,
    r2,
    roc_auc,
    summarize_folds,
    voxel_prediction_map,
)


def test_f1_cases():
    assert f1([1, 0, 1], [1, 0, 1]) == 1.0
    assert f1([0, 1, 0], [1, 0, 1]) == 0.0
    # TP=2, FP=1, FN=1
    assert f1([1, 1, 1, 0], [1, 1, 0, 1]) == pytest.approx(2 / 3)
    assert f1([0, 0], [0, 0]) == 0.0


def test_roc_auc_cases():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_roc_auc_matches_pair_counting():
    rng = np.random.default_rng(0)
    scores = np.round(rng.uniform(size=40), 1)
    labels = rng.integers(0, 2, size=40)
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    assert roc_auc(scores, labels) == pytest.approx(wins / (len(pos) * len(neg)))


def test_roc_auc_single_class_is_nan():
    with pytest.warns(UserWarning, match="one class"):
        assert np.isnan(roc_auc([0.2, 0.7], [1, 1]))


def test_regression_metrics():
    y = np.array([0.1, 0.4, 0.9])
    assert mae(y, y) == 0.0
    assert r2(y, y) == 1.0
    assert r2(np.full(3, y.mean()), y) == pytest.approx(0.0)
    assert mae([0.0, 0.5], [0.0, 1.0]) == pytest.approx(0.25)
    # SS_res = 0.25, SS_tot = 0.5
    assert r2([0.0, 0.5], [0.0, 1.0]) == pytest.approx(0.5)


def _dice_case(labels, mask, node_ids):
    labels = np.asarray(labels).reshape(-1, 1, 1)
    vol = MultiModalVolume(data=np.ones((1,) + labels.shape, dtype=np.float32), modalities=("T1",))
    part = SupervoxelPartition(labels=labels, stats=partition_stats(labels, vol), modalities=("T1",))
    n = len(node_ids)
    graph = SupervoxelGraph(
        node_ids=node_ids, patches=np.zeros((n, 1, 4)), centroids=np.zeros((n, 3)),
        edges=np.zeros((0, 2)), isolated=np.ones(n), lap_pe=np.zeros((n, 1)),
    )
    return graph, part, np.asarray(mask).reshape(-1, 1, 1)


def test_dice_self_agreement_and_empty_prediction():
    graph, part, mask = _dice_case([0, 0, 1, 1, 2, 2], [0, 0, 1, 1, 0, 0], [0, 1, 2])
    assert dice_from_regression(graph, [0.0, 1.0, 0.0], part, mask) == 1.0
    assert dice_from_regression(graph, [0.0, 0.0, 0.0], part, mask) == 0.0
    assert dice_from_regression(graph, [0.0, 0.0, 0.0], part, np.zeros_like(mask)) == 1.0


def test_dice_matches_voxel_counting():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 6, size=60)
    labels[:6] = np.arange(6)
    mask = rng.integers(0, 2, size=60)
    node_ids = np.array([1, 2, 4, 5])
    pred = rng.uniform(0, 0.1, size=4)
    graph, part, mask3 = _dice_case(labels, mask, node_ids)

    voxel_pred = np.zeros(60)
    for node, p in zip(node_ids, pred):
        voxel_pred[labels == node] = p
    x, y = voxel_pred > 0.04, mask > 0
    expected = 2 * np.sum(x & y) / (np.sum(x) + np.sum(y))

    assert dice_from_regression(graph, pred, part, mask3, tau=0.04) == pytest.approx(expected)


def test_voxel_map_rejects_wrong_length():
    graph, part, _ = _dice_case([0, 1], [0, 1], [0, 1])
    with pytest.raises(ValueError):
        voxel_prediction_map(graph, [0.5], part)


def _predictions():
    return pd.DataFrame({
        "graph_id": ["a", "a", "a", "b", "b"],
        "node_id": [0, 1, 2, 0, 1],
        "pred": [0.1, 0.6, 0.3, 0.9, 0.2],
        "y_reg": [0.0, 0.8, 0.1, 1.0, 0.0],
        "y_cls": [0, 1, 0, 1, 0],
    })


def test_metric_report_pooled_and_per_graph():
    frame = _predictions()
    report = metric_report(frame, task="regression", dice={"a": 0.5, "b": 1.0})
    assert report["n_graphs"] == 2 and report["n_nodes"] == 5
    assert report["pooled"]["mae"] == pytest.approx(mae(frame["pred"], frame["y_reg"]))
    assert report["pooled"]["dice_mean"] == pytest.approx(0.75)
    per_graph = {row["graph_id"]: row for row in report["per_graph"]}
    assert per_graph["b"]["mae"] == pytest.approx(0.15)
    assert report["per_graph_mean"]["dice"] == pytest.approx(0.75)


def test_metric_report_classification():
    report = metric_report(_predictions(), task="classification")
    assert report["pooled"]["f1"] == pytest.approx(1.0)
    assert report["pooled"]["roc_auc"] == pytest.approx(1.0)


def test_metric_report_rejects_empty_table():
    with pytest.raises(ValueError):
        metric_report(_predictions().iloc[:0])


def test_summarize_folds():
    reports = [{"pooled": {"mae": 0.1, "r2": 0.5}}, {"pooled": {"mae": 0.3, "r2": 0.7}}]
    table = summarize_folds(reports)
    assert table.loc["mae", "mean"] == pytest.approx(0.2)
    assert table.loc["r2", "std"] == pytest.approx(0.1)
