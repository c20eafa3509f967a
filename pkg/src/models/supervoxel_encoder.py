"""
Supervoxel Graph Encoder

Decoder-free encoder that predicts one value in [0, 1] per supervoxel:

    NodeEmbedder     patch rows -> linear projection + modality embedding,
                     [CLS] prefix, pre-norm transformer blocks, pooled
                     descriptor projected to d_model
    GraphEncoder     Laplacian PE projection, GATv2 layers over
                     neighbours + self, concat-then-project fusion of all
                     layer outputs
    EnsemblePredictor shared MLP, n_pred_heads linear heads, softmax
                     attention over heads, sigmoid
"""

from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.config import ModelConfig
from src.models import tensor_ops as ops

CORRELATION_EPS = 1e-12


def edge_index_with_self_loops(edges, n_nodes: int, device=None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Directed (src, dst) lists: both directions of every undirected edge,
    then one self-loop per node.
    """
    edges = torch.as_tensor(np.asarray(edges, dtype=np.int64).reshape(-1, 2), device=device)
    loops = torch.arange(n_nodes, device=device)
    src = torch.cat([edges[:, 0], edges[:, 1], loops])
    dst = torch.cat([edges[:, 1], edges[:, 0], loops])
    return src, dst


def scatter_softmax(scores: torch.Tensor, index: torch.Tensor, n_groups: int) -> torch.Tensor:
    """Softmax of scores (E, H) within groups given by index (E,)."""
    shape = (n_groups,) + tuple(scores.shape[1:])
    expanded = index.view(-1, *([1] * (scores.dim() - 1))).expand_as(scores)
    group_max = torch.full(shape, float("-inf"), dtype=scores.dtype, device=scores.device)
    group_max = group_max.scatter_reduce(0, expanded, scores.detach(), reduce="amax", include_self=True)
    exp = torch.exp(scores - group_max[index])
    denom = torch.zeros(shape, dtype=scores.dtype, device=scores.device).index_add(0, index, exp)
    return exp / denom[index]


class AttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention block with a GELU MLP."""

    def __init__(self, d_model: int, n_heads: int, mlp_ratio: int = 4, dropout: float = 0.1):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.dropout = dropout
        self.norm1 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, mlp_ratio * d_model)
        self.fc2 = nn.Linear(mlp_ratio * d_model, d_model)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            x: (B, T, d_model)

        Returns:
            (x, weights) with weights (B, n_heads, T, T), rows summing to 1
        """
        B, T, d = x.shape
        qkv = self.qkv(self.norm1(x)).view(B, T, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        weights = ops.softmax(ops.matmul(q, k.transpose(-2, -1)) / self.head_dim ** 0.5)
        attended = ops.matmul(weights, v).transpose(1, 2).reshape(B, T, d)
        x = x + ops.dropout(self.proj(attended), self.dropout, self.training)

        hidden = ops.gelu(self.fc1(self.norm2(x)))
        x = x + ops.dropout(self.fc2(hidden), self.dropout, self.training)
        return x, weights


class NodeEmbedder(nn.Module):
    """
    Patch transformer producing one embedding per supervoxel.

    The pooled descriptor concatenates the [CLS] output, the mean patch
    output, the mean input patch embedding and the per-modality means of
    the patch outputs, then projects back to d_model.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_modalities = cfg.n_modalities
        self.n_patch = cfg.n_patch
        self.row_width = cfg.row_width

        self.patch_proj = nn.Linear(cfg.row_width, d)
        self.modality_embedding = nn.Parameter(torch.randn(cfg.n_modalities, d) * 0.02)
        self.cls_token = nn.Parameter(torch.randn(d) * 0.02)
        self.blocks = nn.ModuleList(
            AttentionBlock(d, cfg.n_attn_heads, cfg.mlp_ratio, cfg.dropout)
            for _ in range(cfg.n_transformer_layers)
        )
        self.norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear((3 + cfg.n_modalities) * d, d)
        self.register_buffer(
            "row_modality",
            torch.arange(cfg.n_modalities).repeat(cfg.n_patch),
            persistent=False,
        )

    def forward(self, patches: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """
        Args:
            patches: (n_nodes, n_patch * n_modalities, s + 3)

        Returns:
            (embeddings (n_nodes, d_model), attention weights per layer)
        """
        n, rows, width = patches.shape
        if rows != self.n_patch * self.n_modalities or width != self.row_width:
            raise ValueError(
                f"patch tensor rows/width ({rows}, {width}) do not match config "
                f"({self.n_patch * self.n_modalities}, {self.row_width})"
            )

        tokens = self.patch_proj(patches) + ops.embedding(self.row_modality, self.modality_embedding)
        seq = ops.concat([self.cls_token.expand(n, 1, -1), tokens], dim=1)

        weights = []
        for block in self.blocks:
            seq, w = block(seq)
            weights.append(w)
        seq = self.norm(seq)

        cls_out, patch_out = seq[:, 0], seq[:, 1:]
        per_modality = patch_out.reshape(n, self.n_patch, self.n_modalities, -1).mean(dim=1)
        descriptor = ops.concat(
            [cls_out, patch_out.mean(dim=1), tokens.mean(dim=1), per_modality.reshape(n, -1)],
            dim=-1,
        )
        return self.out_proj(descriptor), weights


class GATv2Layer(nn.Module):
    """
    Dynamic graph attention over neighbours plus self.

    score(i <- j) = a . LeakyReLU(W_dst h_i + W_src h_j), per head; the
    heads' aggregated messages are averaged, then residual + LayerNorm.
    """

    def __init__(self, d_model: int, n_heads: int, slope: float = ops.LEAKY_SLOPE):
        super().__init__()
        self.n_heads = n_heads
        self.d_model = d_model
        self.slope = slope
        self.lin_src = nn.Linear(d_model, n_heads * d_model)
        self.lin_dst = nn.Linear(d_model, n_heads * d_model, bias=False)
        self.att = nn.Parameter(torch.randn(n_heads, d_model) / d_model ** 0.5)
        self.bias = nn.Parameter(torch.zeros(d_model))
        self.norm = nn.LayerNorm(d_model)

    def forward(self, h: torch.Tensor, src: torch.Tensor, dst: torch.Tensor):
        """
        Args:
            h: (n_nodes, d_model)
            src, dst: directed edge lists including self-loops

        Returns:
            (h_out (n_nodes, d_model), alpha (E, n_heads))
        """
        n = h.shape[0]
        x_src = self.lin_src(h).view(n, self.n_heads, self.d_model)
        x_dst = self.lin_dst(h).view(n, self.n_heads, self.d_model)

        scores = (ops.leaky_relu(x_dst[dst] + x_src[src], self.slope) * self.att).sum(dim=-1)
        alpha = scatter_softmax(scores, dst, n)

        messages = alpha.unsqueeze(-1) * x_src[src]
        aggregated = torch.zeros_like(x_dst).index_add(0, dst, messages)
        out = aggregated.mean(dim=1) + self.bias
        return self.norm(h + out), alpha


class GraphEncoder(nn.Module):
    """Laplacian PE injection, stacked GATv2 layers and multiscale fusion."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.k_pe = cfg.k_pe
        self.pe_proj = nn.Linear(cfg.k_pe, d) if cfg.k_pe > 0 else None
        self.layers = nn.ModuleList(GATv2Layer(d, cfg.n_gat_heads) for _ in range(cfg.n_gat_layers))
        self.fuse = nn.Linear(cfg.n_gat_layers * d, d)

    def forward(self, h, src, dst, lap_pe: Optional[torch.Tensor] = None):
        if self.pe_proj is not None:
            if lap_pe is None or lap_pe.shape != (h.shape[0], self.k_pe):
                raise ValueError(f"lap_pe must have shape ({h.shape[0]}, {self.k_pe})")
            h = h + self.pe_proj(lap_pe)

        outputs, alphas = [], []
        for layer in self.layers:
            h, alpha = layer(h, src, dst)
            outputs.append(h)
            alphas.append(alpha)
        return self.fuse(ops.concat(outputs, dim=-1)), alphas


class EnsemblePredictor(nn.Module):
    """Shared MLP, parallel linear heads and a softmax attention over the heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        hidden = cfg.head_hidden_dim
        self.fc1 = nn.Linear(cfg.d_model, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.heads = nn.Linear(hidden, cfg.n_pred_heads)
        self.head_attention = nn.Linear(hidden, cfg.n_pred_heads)

    def forward(self, z: torch.Tensor) -> Dict[str, torch.Tensor]:
        shared = ops.gelu(self.fc2(ops.gelu(self.fc1(z))))
        head_logits = self.heads(shared)
        head_weights = ops.softmax(self.head_attention(shared), dim=-1)
        logit = (head_weights * head_logits).sum(dim=-1)
        return {
            "pred": ops.sigmoid(logit),
            "logit": logit,
            "head_logits": head_logits,
            "head_weights": head_weights,
        }


class SupervoxelGraphEncoder(nn.Module):
    """Full encoder: node embedding, graph encoding, ensemble prediction."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embedder = NodeEmbedder(cfg)
        self.graph_encoder = GraphEncoder(cfg)
        self.predictor = EnsemblePredictor(cfg)

    def forward(self, patches, edges, lap_pe=None) -> Dict[str, torch.Tensor]:
        """
        Args:
            patches: (n_nodes, n_patch * n_modalities, s + 3)
            edges: (E, 2) undirected edge list
            lap_pe: (n_nodes, k_pe)

        Returns:
            dict with pred, logit, head_logits, head_weights, node_embeddings,
            context, patch_attention, graph_attention, src, dst
        """
        n = patches.shape[0]
        src, dst = edge_index_with_self_loops(edges, n, device=patches.device)
        node_embeddings, patch_attention = self.embedder(patches)
        context, graph_attention = self.graph_encoder(node_embeddings, src, dst, lap_pe)
        out = self.predictor(context)
        out.update(
            node_embeddings=node_embeddings,
            context=context,
            patch_attention=patch_attention,
            graph_attention=graph_attention,
            src=src,
            dst=dst,
        )
        return out


def diversity_penalty(head_logits: torch.Tensor) -> torch.Tensor:
    """
    Mean squared Pearson correlation between every pair of heads' logits
    over the nodes of a batch. Zero for fewer than 2 nodes or heads.
    """
    n, n_heads = head_logits.shape
    if n < 2 or n_heads < 2:
        return head_logits.sum() * 0.0
    centered = head_logits - head_logits.mean(dim=0, keepdim=True)
    cov = centered.T @ centered
    var = torch.diagonal(cov)
    denom = torch.sqrt(torch.clamp(var[:, None] * var[None, :], min=CORRELATION_EPS))
    corr = cov / denom
    i, j = torch.triu_indices(n_heads, n_heads, offset=1)
    return (corr[i, j] ** 2).mean()


def loss(out: Dict[str, torch.Tensor], targets: torch.Tensor, task: str,
         lambda_div: float = 0.01) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    Task loss plus weighted head-diversity penalty.

    regression: MSE of pred against y_reg; classification: BCE of the
    ensemble logit against y_cls.

    Returns:
        (total, {"task": ..., "diversity": ...})
    """
    targets = targets.to(out["pred"].dtype)
    if targets.shape != out["pred"].shape:
        raise ValueError(f"targets shape {tuple(targets.shape)} != predictions {tuple(out['pred'].shape)}")
    if task == "regression":
        task_loss = F.mse_loss(out["pred"], targets)
    elif task == "classification":
        task_loss = F.binary_cross_entropy_with_logits(out["logit"], targets)
    else:
        raise ValueError(f"unknown task '{task}'")

    div = diversity_penalty(out["head_logits"])
    total = task_loss + lambda_div * div
    return total, {"task": float(task_loss), "diversity": float(div)}


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def count_parameters_analytic(cfg: ModelConfig) -> Dict[str, int]:
    """Parameter counts per component, from the config alone."""
    d, r = cfg.d_model, cfg.mlp_ratio
    block = (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (2 * d) + (d * r * d + r * d) + (r * d * d + d)
    embedder = (
        cfg.row_width * d + d
        + cfg.n_modalities * d
        + d
        + cfg.n_transformer_layers * block
        + 2 * d
        + (3 + cfg.n_modalities) * d * d + d
    )

    H = cfg.n_gat_heads
    gat = (d * H * d + H * d) + (d * H * d) + H * d + d + 2 * d
    graph_encoder = (
        (cfg.k_pe * d + d if cfg.k_pe > 0 else 0)
        + cfg.n_gat_layers * gat
        + cfg.n_gat_layers * d * d + d
    )

    h, k = cfg.head_hidden_dim, cfg.n_pred_heads
    predictor = (d * h + h) + (h * h + h) + 2 * (h * k + k)

    return {
        "embedder": embedder,
        "graph_encoder": graph_encoder,
        "predictor": predictor,
        "total": embedder + graph_encoder + predictor,
    }
