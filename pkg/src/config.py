"""
Pipeline Configuration

Dataclass configs for preprocessing, the encoder and training, each
serializable to JSON. Named profiles:
    toy    small model sized for CPU tests and phantom experiments
    paper  full-size model (expressible, not expected to run on a desk)
"""

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Union

DEFAULT_SEED = 42
PROFILES = ("toy", "paper")
TASKS = ("regression", "classification")
TASK_ALIASES = {"reg": "regression", "cls": "classification"}
SCHEDULE_MODES = ("amplitude", "period")


def resolve_task(task: str) -> str:
    task = TASK_ALIASES.get(task, task)
    if task not in TASKS:
        raise ValueError(f"unknown task '{task}', expected one of {TASKS} or {sorted(TASK_ALIASES)}")
    return task


class JsonConfig:
    """Shared JSON round trip for config dataclasses."""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown {cls.__name__} field(s): {unknown}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})

    def updated(self, **overrides):
        """Copy with every non-None override applied."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PreprocessConfig(JsonConfig):
    """Volume -> graph parameters."""

    n_sv: int = 1000
    reference_modality: str = "T1"
    compactness: float = 0.1
    max_iters: int = 10
    n_patch: int = 16
    patch_size: int = 24
    k_nn: int = 8
    k_pe: int = 8
    knn_rule: str = "mutual"
    tau_cls: float = 0.15
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        for name in ("n_sv", "max_iters", "n_patch", "patch_size", "k_nn"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.k_pe < 0:
            raise ValueError(f"k_pe must be >= 0, got {self.k_pe}")
        if self.compactness < 0:
            raise ValueError(f"compactness must be >= 0, got {self.compactness}")
        if not 0.0 <= self.tau_cls <= 1.0:
            raise ValueError(f"tau_cls must lie in [0, 1], got {self.tau_cls}")
        if self.knn_rule not in ("mutual", "or"):
            raise ValueError(f"knn_rule must be 'mutual' or 'or', got '{self.knn_rule}'")


@dataclass(frozen=True)
class ModelConfig(JsonConfig):
    """
    Encoder architecture.

    Args:
        d_model: embedding width shared by every stage
        n_transformer_layers: patch transformer depth
        n_attn_heads: self-attention heads; must divide d_model
        n_gat_layers: graph attention depth
        n_gat_heads: graph attention heads, averaged per layer
        k_pe: Laplacian positional encoding width
        n_pred_heads: ensemble size of the predictor
        head_hidden_dim: width of the predictor's shared MLP
        mlp_ratio: transformer MLP hidden width / d_model
        dropout: dropout inside transformer blocks
        n_modalities: channels per patch
        n_patch: patches per node
        patch_size: voxels per patch (s)
        task: "regression" or "classification"
        lambda_div: weight of the head diversity penalty
        profile: name of the profile this config started from
    """

    d_model: int = 32
    n_transformer_layers: int = 2
    n_attn_heads: int = 2
    n_gat_layers: int = 2
    n_gat_heads: int = 2
    k_pe: int = 8
    n_pred_heads: int = 4
    head_hidden_dim: int = 32
    mlp_ratio: int = 4
    dropout: float = 0.1
    n_modalities: int = 4
    n_patch: int = 16
    patch_size: int = 24
    task: str = "regression"
    lambda_div: float = 0.01
    profile: str = "toy"

    def __post_init__(self):
        counts = (
            "d_model", "n_transformer_layers", "n_attn_heads", "n_gat_layers",
            "n_gat_heads", "n_pred_heads", "head_hidden_dim", "mlp_ratio",
            "n_modalities", "n_patch", "patch_size",
        )
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.k_pe < 0:
            raise ValueError(f"k_pe must be >= 0, got {self.k_pe}")
        if self.d_model % self.n_attn_heads:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by n_attn_heads={self.n_attn_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.lambda_div < 0:
            raise ValueError(f"lambda_div must be >= 0, got {self.lambda_div}")
        object.__setattr__(self, "task", resolve_task(self.task))

    @property
    def row_width(self) -> int:
        return self.patch_size + 3

    @property
    def patch_rows(self) -> int:
        return self.n_patch * self.n_modalities

    @classmethod
    def from_profile(cls, profile: str = "toy", **overrides) -> "ModelConfig":
        if profile == "toy":
            base = cls()
        elif profile == "paper":
            base = cls(
                d_model=256,
                n_transformer_layers=5,
                n_attn_heads=8,
                n_gat_layers=5,
                n_gat_heads=4,
                n_pred_heads=8,
                head_hidden_dim=1024,
                profile="paper",
            )
        else:
            raise ValueError(f"unknown profile '{profile}', expected one of {PROFILES}")
        return base.updated(**overrides)


@dataclass(frozen=True)
class TrainConfig(JsonConfig):
    """
    Optimization and schedule.

    gamma scales the peak lr of every restart ("amplitude") or stretches
    every cycle ("period"); see cosine_restart_lr.
    """

    base_lr: float = 1e-3
    weight_decay: float = 0.01
    T0: int = 100
    gamma: float = 0.5
    schedule_mode: str = "amplitude"
    batch_size: int = 2
    accum_steps: int = 1
    max_epochs: int = 100
    seed: int = DEFAULT_SEED
    task: str = "regression"
    profile: str = "toy"
    deterministic: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.accum_steps < 1:
            raise ValueError(f"accum_steps must be >= 1, got {self.accum_steps}")
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ValueError("base_lr and weight_decay must be >= 0")
        if self.T0 < 1:
            raise ValueError(f"T0 must be >= 1, got {self.T0}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.schedule_mode not in SCHEDULE_MODES:
            raise ValueError(f"schedule_mode must be one of {SCHEDULE_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        object.__setattr__(self, "task", resolve_task(self.task))

    @classmethod
    def from_profile(cls, profile: str = "toy", **overrides) -> "TrainConfig":
        if profile == "toy":
            base = cls()
        elif profile == "paper":
            base = cls(base_lr=3e-5, accum_steps=8, max_epochs=300, profile="paper")
        else:
            raise ValueError(f"unknown profile '{profile}', expected one of {PROFILES}")
        return base.updated(**overrides)
