"""
Tensor Operations, Optimizer and Schedule

Numerical substrate for the encoder, built on torch autograd:
    - the primitive set the encoder blocks are composed of
    - central finite-difference gradient checking
    - reproducibility and anomaly (debug) switches
    - AdamW with decoupled weight decay
    - cosine annealing with warm restarts
    - a manifest + raw payload parameter checkpoint
"""

import json
import math
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch.optim.lr_scheduler import LambdaLR

LEAKY_SLOPE = 0.2
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
FD_STEP = 1e-5

CHECKPOINT_MAGIC = b"SVGCKPT1"
CHECKPOINT_VERSION = 1

_DEBUG = False


class NonFiniteError(FloatingPointError):
    """A forward value became NaN or infinite while debug mode was on."""


# -- debug / reproducibility -------------------------------------------------

@contextmanager
def debug_mode():
    """Raise on NaN/inf produced by any primitive and enable autograd anomaly detection."""
    global _DEBUG
    previous = _DEBUG
    _DEBUG = True
    try:
        with torch.autograd.detect_anomaly():
            yield
    finally:
        _DEBUG = previous


def _checked(name: str, out: torch.Tensor) -> torch.Tensor:
    if _DEBUG and not torch.isfinite(out).all():
        raise NonFiniteError(f"non-finite value produced by {name}")
    return out


def set_reproducible(seed: int = 42, deterministic: bool = True) -> torch.Generator:
    """
    Seed every RNG; in deterministic mode also force single-threaded,
    deterministic kernels.

    Returns:
        A torch.Generator seeded with `seed`, for dropout masks
    """
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


# -- primitives ---------------------------------------------------------------

def matmul(a, b):
    return _checked("matmul", a @ b)


def add(a, b):
    return _checked("add", a + b)


def mul(a, b):
    return _checked("mul", a * b)


def concat(tensors: Sequence[torch.Tensor], dim: int = -1):
    return _checked("concat", torch.cat(list(tensors), dim=dim))


def slice_rows(x, start: int, stop: int):
    return x[start:stop]


def softmax(x, dim: int = -1):
    return _checked("softmax", torch.softmax(x, dim=dim))


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5):
    return _checked("layer_norm", F.layer_norm(x, x.shape[-1:], weight, bias, eps))


def gelu(x):
    return _checked("gelu", F.gelu(x))


def leaky_relu(x, slope: float = LEAKY_SLOPE):
    return _checked("leaky_relu", F.leaky_relu(x, slope))


def sigmoid(x):
    return _checked("sigmoid", torch.sigmoid(x))


def mean(x, dim=None):
    return x.mean() if dim is None else x.mean(dim=dim)


def sum_(x, dim=None):
    return x.sum() if dim is None else x.sum(dim=dim)


def embedding(indices, table):
    return F.embedding(indices, table)


def dropout(x, p: float, training: bool, generator: Optional[torch.Generator] = None):
    """Inverted dropout with an explicit Bernoulli keep-mask."""
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


# name -> (function, number of tensor inputs); used by the gradient checks
PRIMITIVES: Dict[str, Tuple[Callable, int]] = {
    "matmul": (lambda a, b: matmul(a, b.T), 2),
    "add": (add, 2),
    "mul": (mul, 2),
    "concat": (lambda a, b: concat([a, b], dim=-1), 2),
    "slice": (lambda a: slice_rows(a, 1, 3), 1),
    "softmax": (softmax, 1),
    "layer_norm": (layer_norm, 1),
    "gelu": (gelu, 1),
    "leaky_relu": (leaky_relu, 1),
    "sigmoid": (sigmoid, 1),
    "mean": (lambda a: mean(a, dim=0), 1),
    "sum": (lambda a: sum_(a, dim=-1), 1),
    "embedding": (lambda table: embedding(torch.tensor([0, 2, 1, 2]), table), 1),
}


# -- gradient checking --------------------------------------------------------

def finite_difference_grads(fn: Callable, inputs: Sequence[torch.Tensor], h: float = FD_STEP):
    """Central differences of scalar fn(*inputs) w.r.t. every input entry."""
    grads = []
    with torch.no_grad():
        for x in inputs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(fn(*inputs))
                flat[i] = orig - h
                down = float(fn(*inputs))
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * h)
            grads.append(g)
    return grads


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale


def gradient_check(fn: Callable, inputs: Sequence[torch.Tensor], h: float = FD_STEP) -> float:
    """
    Largest relative error between autograd and central differences.

    Args:
        fn: Scalar-valued function of `inputs`
        inputs: Double-precision leaf tensors with requires_grad=True
        h: Finite-difference step

    Returns:
        max over inputs of ||g_autograd - g_fd|| / max(||g_autograd||, ||g_fd||)
    """
    for x in inputs:
        if x.grad is not None:
            x.grad = None
    out = fn(*inputs)
    analytic = torch.autograd.grad(out, list(inputs), allow_unused=True)
    numeric = finite_difference_grads(fn, inputs, h)
    errors = [
        relative_error(a if a is not None else torch.zeros_like(n), n)
        for a, n in zip(analytic, numeric)
    ]
    return max(errors)


def parameter_gradient_check(model: torch.nn.Module, loss_fn: Callable[[], torch.Tensor],
                             h: float = FD_STEP) -> Dict[str, float]:
    """Relative error per named parameter of `loss_fn()` (closure over `model`)."""
    model.zero_grad()
    loss_fn().backward()
    report = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.clone() if p.grad is not None else torch.zeros_like(p)
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                nflat[i] = (up - down) / (2.0 * h)
            report[name] = relative_error(analytic, numeric)
    return report


# -- optimizer and schedule ---------------------------------------------------

class AdamW(torch.optim.Optimizer):
    """
    Adam with decoupled weight decay.

    The decay is applied to the parameter before the moment-based update:
        p <- p * (1 - lr * wd)
        p <- p - lr * m_hat / (sqrt(v_hat) + eps)
    """

    def __init__(self, params, lr=1e-3, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0):
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)
        self.step_count = 0

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        self.step_count += 1
        for group in self.param_groups:
            lr = group["lr"]
            beta1, beta2 = group["betas"]
            eps = group["eps"]
            weight_decay = group["weight_decay"]

            for p in group["params"]:
                if p.grad is None:
                    continue

                state = self.state[p]
                if len(state) == 0:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)

                state["step"] += 1
                t = state["step"]
                exp_avg, exp_avg_sq = state["exp_avg"], state["exp_avg_sq"]

                if weight_decay != 0:
                    p.mul_(1 - lr * weight_decay)

                exp_avg.mul_(beta1).add_(p.grad, alpha=1 - beta1)
                exp_avg_sq.mul_(beta2).addcmul_(p.grad, p.grad, value=1 - beta2)

                m_hat = exp_avg / (1 - beta1 ** t)
                v_hat = exp_avg_sq / (1 - beta2 ** t)
                p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)

        return loss


def cosine_restart_lr(epoch: int, base_lr: float, T0: int, gamma: float,
                      mode: str = "amplitude") -> float:
    """
    Cosine annealing with warm restarts.

    amplitude: every cycle lasts T0 epochs; cycle c peaks at gamma**c * base_lr.
    period:    every cycle peaks at base_lr; cycle c lasts T0 / gamma**c epochs.

    Args:
        epoch: epoch counter, >= 0
        base_lr: peak learning rate of the first cycle
        T0: first cycle length in epochs
        gamma: restart factor
        mode: "amplitude" or "period"
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")

    if mode == "amplitude":
        cycle, t = divmod(epoch, T0)
        return (gamma ** cycle) * base_lr * 0.5 * (1.0 + math.cos(math.pi * t / T0))

    if mode == "period":
        length, t = float(T0), float(epoch)
        while t >= length:
            t -= length
            length /= gamma
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / length))

    raise ValueError(f"unknown schedule mode '{mode}'")


def build_optimizer(params, base_lr: float, weight_decay: float) -> AdamW:
    return AdamW(params, lr=base_lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=weight_decay)


def build_scheduler(optimizer: torch.optim.Optimizer, T0: int, gamma: float,
                    mode: str = "amplitude") -> LambdaLR:
    """Per-epoch scheduler: lr(epoch) = cosine_restart_lr(epoch, base_lr, ...)."""
    return LambdaLR(optimizer, lambda epoch: cosine_restart_lr(epoch, 1.0, T0, gamma, mode))


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(state: Dict[str, torch.Tensor], path: Union[str, Path],
                    extra: Optional[dict] = None) -> Path:
    """
    Write named tensors as a JSON manifest followed by a raw little-endian payload.

    Args:
        state: name -> tensor (e.g. a module state_dict)
        path: Output path
        extra: JSON-serializable metadata stored in the manifest
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    arrays = []
    entries = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        dtype = arr.dtype.newbyteorder("<")
        arrays.append(np.ascontiguousarray(arr, dtype=dtype))
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype.str})

    manifest = {"version": CHECKPOINT_VERSION, "tensors": entries, "extra": extra or {}}
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + b"\n")
        f.write(json.dumps(manifest).encode("utf-8") + b"\n")
        for arr in arrays:
            f.write(arr.tobytes())
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, torch.Tensor], dict]:
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        (state, extra)

    Raises:
        ValueError: bad magic, version or payload size
    """
    with open(path, "rb") as f:
        magic = f.readline().rstrip(b"\n")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint (magic {magic!r})")
        manifest = json.loads(f.readline().decode("utf-8"))
        payload = f.read()

    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version mismatch: {manifest.get('version')!r}")

    state = {}
    offset = 0
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"]))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(payload):
            raise ValueError(f"checkpoint payload truncated at tensor '{entry['name']}'")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).astype(dtype.newbyteorder("=")))
        offset += nbytes

    if offset != len(payload):
        raise ValueError(f"checkpoint payload size mismatch: {len(payload) - offset} trailing bytes")
    return state, manifest.get("extra", {})
