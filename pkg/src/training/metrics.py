"""
Evaluation Metrics

Node-level F1, ROC-AUC, MAE and R², decoder-free Dice reconstruction,
and pooled / per-graph reports.
"""

import warnings
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata
from sklearn.metrics import f1_score, mean_absolute_error, r2_score

from src.preprocessing.graph_builder import SupervoxelGraph
from src.preprocessing.slic_supervoxels import SupervoxelPartition

F1_THRESHOLD = 0.5
DEFAULT_TAU_DICE = 0.04


def f1(pred_binary, y_cls) -> float:
    """2PR / (P + R); 0.0 when P + R = 0."""
    return float(f1_score(np.asarray(y_cls, dtype=int), np.asarray(pred_binary, dtype=int),
                          zero_division=0))


def roc_auc(scores, y_cls) -> float:
    """
    Rank-based ROC-AUC (Mann-Whitney U / n_pos n_neg), average ranks for ties.

    Returns NaN with a warning when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(y_cls).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        warnings.warn("ROC-AUC undefined: only one class present")
        return float("nan")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mae(pred, y_reg) -> float:
    return float(mean_absolute_error(np.asarray(y_reg, dtype=np.float64), np.asarray(pred, dtype=np.float64)))


def r2(pred, y_reg) -> float:
    """1 - SS_res / SS_tot with the target mean taken over the evaluation pool."""
    return float(r2_score(np.asarray(y_reg, dtype=np.float64), np.asarray(pred, dtype=np.float64)))


def voxel_prediction_map(graph: SupervoxelGraph, pred, partition: SupervoxelPartition) -> np.ndarray:
    """Broadcast node predictions to voxels; pruned supervoxels get 0."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != (graph.n_nodes,):
        raise ValueError(f"expected {graph.n_nodes} predictions, got shape {pred.shape}")
    per_sv = np.zeros(partition.n_sv_actual, dtype=np.float64)
    per_sv[graph.node_ids] = pred
    return per_sv[partition.labels]


def dice_from_regression(
    graph: SupervoxelGraph,
    pred,
    partition: SupervoxelPartition,
    mask: np.ndarray,
    tau: float = DEFAULT_TAU_DICE,
) -> float:
    """
    Dice between thresholded per-voxel predictions and the tumor mask.

    Args:
        graph: Graph the predictions belong to
        pred: (n_nodes,) regression outputs
        partition: Partition the graph was built from
        mask: Voxel labels; tumor = mask > 0
        tau: Predictions strictly above tau count as tumor

    Returns:
        2|X ∩ Y| / (|X| + |Y|), or 1.0 when both sets are empty
    """
    if mask.shape != partition.labels.shape:
        raise ValueError(f"mask shape {mask.shape} != label grid {partition.labels.shape}")
    predicted = voxel_prediction_map(graph, pred, partition) > tau
    truth = mask > 0
    total = int(predicted.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((predicted & truth).sum()) / total


def node_metrics(pred, y_reg=None, y_cls=None, task: str = "regression") -> Dict[str, float]:
    """Metric dict for one pool of nodes."""
    pred = np.asarray(pred, dtype=np.float64)
    if task == "regression":
        return {"mae": mae(pred, y_reg), "r2": r2(pred, y_reg)}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        auc = roc_auc(pred, y_cls)
    return {"f1": f1(pred > F1_THRESHOLD, y_cls), "roc_auc": auc}


def metric_report(predictions: pd.DataFrame, task: str = "regression",
                  dice: Optional[Dict[str, float]] = None) -> Dict[str, object]:
    """
    Pooled and per-graph metrics from a per-node predictions table.

    Args:
        predictions: columns graph_id, node_id, pred, y_reg, y_cls
        task: "regression" or "classification"
        dice: Optional graph_id -> Dice score

    Returns:
        {"task", "n_graphs", "n_nodes", "pooled": {...},
         "per_graph_mean": {...}, "per_graph": [...]}
    """
    if predictions.empty:
        raise ValueError("cannot report metrics for an empty prediction table")

    pooled = node_metrics(predictions["pred"], predictions.get("y_reg"), predictions.get("y_cls"), task)

    rows = []
    for graph_id, group in predictions.groupby("graph_id", sort=False):
        row = {"graph_id": graph_id, "n_nodes": len(group)}
        if len(group) >= 2:
            row.update(node_metrics(group["pred"], group.get("y_reg"), group.get("y_cls"), task))
        if dice is not None and graph_id in dice:
            row["dice"] = dice[graph_id]
        rows.append(row)
    per_graph = pd.DataFrame(rows)

    metric_cols = [c for c in per_graph.columns if c not in ("graph_id", "n_nodes")]
    per_graph_mean = {c: float(per_graph[c].mean()) for c in metric_cols}
    if dice:
        pooled["dice_mean"] = float(np.mean(list(dice.values())))

    return {
        "task": task,
        "n_graphs": int(per_graph.shape[0]),
        "n_nodes": int(len(predictions)),
        "pooled": pooled,
        "per_graph_mean": per_graph_mean,
        "per_graph": per_graph.to_dict(orient="records"),
    }


def summarize_folds(reports: Sequence[Dict[str, object]]) -> pd.DataFrame:
    """Mean and standard deviation of every pooled metric across folds."""
    table = pd.DataFrame([r["pooled"] for r in reports])
    return pd.DataFrame({"mean": table.mean(), "std": table.std(ddof=0)})
