"""
Training and Evaluation Loops

A batch is a set of whole graphs. Node losses are averaged within each
graph, then across the graphs of the batch. Gradients accumulate over
accum_steps batches (the counter runs across epochs) before each
optimizer step; the learning rate follows cosine annealing with warm
restarts, stepped once per epoch.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from src.config import ModelConfig, TrainConfig
from src.models import tensor_ops as ops
from src.models.supervoxel_encoder import SupervoxelGraphEncoder, loss
from src.preprocessing.graph_builder import SupervoxelGraph
from src.training.metrics import DEFAULT_TAU_DICE, dice_from_regression, metric_report


class NonFiniteLossError(FloatingPointError):
    """Training loss became NaN or infinite."""

    def __init__(self, sample_id: str, value: float):
        super().__init__(f"non-finite loss {value} on sample '{sample_id}'")
        self.sample_id = sample_id


@dataclass
class GraphTensors:
    """Torch view of one SupervoxelGraph."""

    graph_id: str
    patches: torch.Tensor
    edges: np.ndarray
    lap_pe: torch.Tensor
    y_reg: Optional[torch.Tensor]
    y_cls: Optional[torch.Tensor]
    node_ids: np.ndarray

    @classmethod
    def from_graph(cls, graph: SupervoxelGraph, dtype=torch.float64, index: int = 0) -> "GraphTensors":
        return cls(
            graph_id=graph.graph_id or f"graph{index}",
            patches=torch.as_tensor(graph.patches, dtype=dtype),
            edges=graph.edges.astype(np.int64),
            lap_pe=torch.as_tensor(graph.lap_pe, dtype=dtype),
            y_reg=torch.as_tensor(graph.y_reg, dtype=dtype) if graph.has_targets else None,
            y_cls=torch.as_tensor(graph.y_cls, dtype=dtype) if graph.has_targets else None,
            node_ids=graph.node_ids,
        )

    def targets(self, task: str) -> torch.Tensor:
        if self.y_reg is None:
            raise ValueError(f"graph '{self.graph_id}' has no targets")
        return self.y_reg if task == "regression" else self.y_cls


@dataclass
class TrainResult:
    model: SupervoxelGraphEncoder
    history: pd.DataFrame
    optimizer_steps: int


def build_model(model_cfg: ModelConfig, seed: int = 42, dtype: str = "float64") -> SupervoxelGraphEncoder:
    """Seeded model initialization in the requested precision."""
    torch.manual_seed(seed)
    return SupervoxelGraphEncoder(model_cfg).to(ops.torch_dtype(dtype))


def model_config_for_graphs(graphs: Sequence[SupervoxelGraph], profile: str = "toy",
                            **overrides) -> ModelConfig:
    """ModelConfig whose patch layout and k_pe match the graphs."""
    g = graphs[0]
    n_mod = len(g.meta.get("modalities", [])) or 4
    rows, width = g.patches.shape[1:]
    return ModelConfig.from_profile(
        profile,
        n_modalities=n_mod,
        n_patch=rows // n_mod,
        patch_size=width - 3,
        k_pe=g.lap_pe.shape[1],
        **overrides,
    )


def _to_tensors(graphs: Sequence[SupervoxelGraph], dtype) -> List[GraphTensors]:
    return [GraphTensors.from_graph(g, dtype=dtype, index=i) for i, g in enumerate(graphs)]


def _write_log(history: List[dict], log_path: Optional[Union[str, Path]]):
    if log_path is None:
        return
    log_path = Path(log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(history).to_json(log_path, orient="records", lines=True)


def train(
    graphs: Sequence[SupervoxelGraph],
    model: SupervoxelGraphEncoder,
    cfg: TrainConfig,
    val_graphs: Optional[Sequence[SupervoxelGraph]] = None,
    log_path: Optional[Union[str, Path]] = None,
    verbose: bool = False,
) -> TrainResult:
    """
    Train `model` in place.

    Args:
        graphs: Training graphs with targets
        model: Encoder, already in the dtype named by cfg.dtype
        cfg: Optimization settings
        val_graphs: Optional graphs evaluated after every epoch
        log_path: JSON-lines metric log, rewritten after every epoch
        verbose: Print one line per epoch

    Returns:
        TrainResult with the per-epoch history

    Raises:
        ValueError: empty training set or graphs without targets
        NonFiniteLossError: a graph produced a NaN/inf loss
    """
    if len(graphs) == 0:
        raise ValueError("training set is empty")

    ops.set_reproducible(cfg.seed, cfg.deterministic)
    dtype = ops.torch_dtype(cfg.dtype)
    model.to(dtype)
    data = _to_tensors(graphs, dtype)
    task = model.cfg.task
    lambda_div = model.cfg.lambda_div

    optimizer = ops.build_optimizer(model.parameters(), cfg.base_lr, cfg.weight_decay)
    scheduler = ops.build_scheduler(optimizer, cfg.T0, cfg.gamma, cfg.schedule_mode)
    rng = np.random.default_rng(cfg.seed)

    history: List[dict] = []
    batches_seen = 0
    optimizer.zero_grad()

    for epoch in range(cfg.max_epochs):
        model.train()
        lr = optimizer.param_groups[0]["lr"]
        order = rng.permutation(len(data))
        totals, task_losses, div_losses = [], [], []

        for start in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[start:start + cfg.batch_size]]
            graph_losses = []
            for sample in batch:
                out = model(sample.patches, sample.edges, sample.lap_pe)
                total, parts = loss(out, sample.targets(task), task, lambda_div)
                if not math.isfinite(float(total)):
                    raise NonFiniteLossError(sample.graph_id, float(total))
                graph_losses.append(total)
                totals.append(float(total))
                task_losses.append(parts["task"])
                div_losses.append(parts["diversity"])

            batch_loss = torch.stack(graph_losses).mean() / cfg.accum_steps
            batch_loss.backward()
            batches_seen += 1
            if batches_seen % cfg.accum_steps == 0:
                optimizer.step()
                optimizer.zero_grad()

        scheduler.step()

        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(totals)),
            "train_task_loss": float(np.mean(task_losses)),
            "train_diversity": float(np.mean(div_losses)),
            "optimizer_steps": optimizer.step_count,
        }
        if val_graphs:
            report = evaluate(val_graphs, model, dtype=cfg.dtype)
            record.update({f"val_{k}": v for k, v in report["pooled"].items()})
        history.append(record)
        _write_log(history, log_path)

        if verbose:
            extras = "  ".join(f"{k}={v:.4f}" for k, v in record.items() if k.startswith("val_"))
            print(f"  epoch {epoch + 1}/{cfg.max_epochs}  lr={lr:.2e}  "
                  f"loss={record['train_loss']:.5f}  {extras}")

    # partial accumulation at the end of training is discarded
    optimizer.zero_grad()
    _write_log(history, log_path)
    return TrainResult(model=model, history=pd.DataFrame(history), optimizer_steps=optimizer.step_count)


@torch.no_grad()
def predict(graphs: Sequence[SupervoxelGraph], model: SupervoxelGraphEncoder,
            dtype: str = "float64") -> pd.DataFrame:
    """
    Per-node predictions in eval mode.

    Returns:
        DataFrame with graph_id, node_id, pred and (when available) y_reg, y_cls
    """
    model.eval()
    frames = []
    for sample in _to_tensors(graphs, ops.torch_dtype(dtype)):
        out = model(sample.patches, sample.edges, sample.lap_pe)
        frame = pd.DataFrame({
            "graph_id": sample.graph_id,
            "node_id": sample.node_ids.astype(np.int64),
            "pred": out["pred"].cpu().numpy().astype(np.float64),
        })
        if sample.y_reg is not None:
            frame["y_reg"] = sample.y_reg.cpu().numpy()
            frame["y_cls"] = sample.y_cls.cpu().numpy().astype(np.int64)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def evaluate(
    graphs: Sequence[SupervoxelGraph],
    model: SupervoxelGraphEncoder,
    dtype: str = "float64",
    dice_inputs: Optional[Dict[str, Tuple[object, np.ndarray]]] = None,
    tau_dice: float = DEFAULT_TAU_DICE,
) -> Dict[str, object]:
    """
    Metric report over all nodes of `graphs`.

    Args:
        graphs: Evaluation graphs with targets
        model: Trained encoder
        dtype: Precision to run in
        dice_inputs: graph_id -> (partition, mask) for Dice reconstruction
            (regression only)
        tau_dice: Dice threshold

    Raises:
        ValueError: empty dataset
    """
    if len(graphs) == 0:
        raise ValueError("evaluation set is empty")

    task = model.cfg.task
    predictions = predict(graphs, model, dtype)

    dice = None
    if dice_inputs and task == "regression":
        dice = {}
        for i, graph in enumerate(graphs):
            gid = graph.graph_id or f"graph{i}"
            if gid not in dice_inputs:
                continue
            partition, mask = dice_inputs[gid]
            pred = predictions.loc[predictions["graph_id"] == gid, "pred"].to_numpy()
            dice[gid] = dice_from_regression(graph, pred, partition, mask, tau=tau_dice)

    report = metric_report(predictions, task=task, dice=dice)
    report["predictions"] = predictions
    return report


def save_model(model: SupervoxelGraphEncoder, path: Union[str, Path],
               train_cfg: Optional[TrainConfig] = None, extra: Optional[dict] = None) -> Path:
    meta = {"model_config": model.cfg.to_dict()}
    if train_cfg is not None:
        meta["train_config"] = train_cfg.to_dict()
    meta.update(extra or {})
    return ops.save_checkpoint(model.state_dict(), path, extra=meta)


def load_model(path: Union[str, Path]) -> Tuple[SupervoxelGraphEncoder, dict]:
    """Rebuild the encoder stored in a checkpoint; returns (model, extra)."""
    state, extra = ops.load_checkpoint(path)
    model_cfg = ModelConfig.from_dict(extra["model_config"])
    model = SupervoxelGraphEncoder(model_cfg)
    dtype = next(iter(state.values())).dtype
    model = model.to(dtype)
    model.load_state_dict(state)
    return model, extra
