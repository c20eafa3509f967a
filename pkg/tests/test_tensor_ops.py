import math

import pytest
import torch

from src.models.tensor_ops import (
    PRIMITIVES,
    AdamW,
    NonFiniteError,
    add,
    build_optimizer,
    build_scheduler,
    cosine_restart_lr,
    debug_mode,
    dropout,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    sigmoid,
    softmax,
)


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    fn, n_inputs = PRIMITIVES[name]
    gen = torch.Generator().manual_seed(len(name))
    inputs = [torch.randn(3, 4, dtype=torch.float64, generator=gen, requires_grad=True)
              for _ in range(n_inputs)]
    out_shape = fn(*inputs).shape
    weights = torch.randn(out_shape, dtype=torch.float64, generator=gen)

    def loss(*xs):
        return (fn(*xs) * weights).sum()

    assert gradient_check(loss, inputs) < 1e-6


@pytest.mark.parametrize("name", ["softmax", "layer_norm", "gelu", "matmul"])
def test_primitives_pass_torch_gradcheck(name):
    fn, n_inputs = PRIMITIVES[name]
    gen = torch.Generator().manual_seed(7)
    inputs = tuple(torch.randn(3, 4, dtype=torch.float64, generator=gen, requires_grad=True)
                   for _ in range(n_inputs))
    assert torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-6)


def test_sigmoid_slope_at_zero():
    x = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    sigmoid(x).sum().backward()
    assert x.grad.item() == pytest.approx(0.25, abs=1e-15)


def test_softmax_rows_sum_to_one():
    x = torch.randn(5, 7, dtype=torch.float64) * 10
    assert torch.allclose(softmax(x).sum(dim=-1), torch.ones(5, dtype=torch.float64), atol=1e-12)


def test_debug_mode_raises_on_non_finite():
    a = torch.tensor([math.inf])
    b = torch.tensor([-math.inf])
    assert torch.isnan(add(a, b)).all()
    with debug_mode():
        with pytest.raises(NonFiniteError, match="add"):
            add(a, b)


def test_dropout_mask_is_reproducible():
    x = torch.ones(100, dtype=torch.float64)
    assert dropout(x, 0.5, training=False) is x
    a = dropout(x, 0.5, training=True, generator=torch.Generator().manual_seed(3))
    b = dropout(x, 0.5, training=True, generator=torch.Generator().manual_seed(3))
    assert torch.equal(a, b)
    assert set(a.unique().tolist()) <= {0.0, 2.0}


def _scalar_param(value=1.0):
    return torch.nn.Parameter(torch.tensor([value], dtype=torch.float64))


def test_adamw_zero_gradient_is_fixed_point():
    p = _scalar_param(0.7)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad = torch.zeros_like(p)
    opt.step()
    assert p.item() == 0.7


def test_adamw_first_step_moves_by_lr():
    p = _scalar_param(1.0)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad = torch.ones_like(p)
    opt.step()
    assert p.item() == pytest.approx(0.9, abs=1e-8)
    assert opt.step_count == 1


def test_adamw_decay_only_path():
    p = _scalar_param(2.0)
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    for _ in range(3):
        p.grad = torch.zeros_like(p)
        opt.step()
    assert p.item() == pytest.approx(2.0 * (1 - 0.1 * 0.01) ** 3, rel=1e-12)


def test_adamw_matches_torch_reference():
    gen = torch.Generator().manual_seed(0)
    start = torch.randn(4, 3, dtype=torch.float64, generator=gen)
    ours = torch.nn.Parameter(start.clone())
    ref = torch.nn.Parameter(start.clone())
    opt_ours = build_optimizer([ours], base_lr=1e-2, weight_decay=0.01)
    opt_ref = torch.optim.AdamW([ref], lr=1e-2, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    for _ in range(6):
        grad = torch.randn(4, 3, dtype=torch.float64, generator=gen)
        ours.grad, ref.grad = grad.clone(), grad.clone()
        opt_ours.step()
        opt_ref.step()
    assert torch.allclose(ours, ref, rtol=1e-10, atol=1e-12)


def test_adamw_rejects_negative_lr():
    with pytest.raises(ValueError):
        AdamW([_scalar_param()], lr=-1.0)


@pytest.mark.parametrize("epoch, expected", [(0, 1.0), (50, 0.5), (100, 0.5), (150, 0.25), (200, 0.25)])
def test_amplitude_schedule(epoch, expected):
    assert cosine_restart_lr(epoch, 1.0, T0=100, gamma=0.5) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("epoch, expected", [(0, 1.0), (50, 0.5), (100, 1.0), (200, 0.5), (300, 1.0)])
def test_period_schedule(epoch, expected):
    assert cosine_restart_lr(epoch, 1.0, T0=100, gamma=0.5, mode="period") == pytest.approx(expected, abs=1e-12)


def test_schedule_rejects_bad_input():
    with pytest.raises(ValueError):
        cosine_restart_lr(-1, 1.0, 100, 0.5)
    with pytest.raises(ValueError):
        cosine_restart_lr(0, 1.0, 100, 0.5, mode="linear")


def test_scheduler_drives_optimizer_lr():
    p = _scalar_param()
    opt = build_optimizer([p], base_lr=3e-5, weight_decay=0.01)
    sched = build_scheduler(opt, T0=10, gamma=0.5)
    assert opt.param_groups[0]["lr"] == pytest.approx(3e-5)
    for _ in range(10):
        p.grad = torch.zeros_like(p)
        opt.step()
        sched.step()
    assert opt.param_groups[0]["lr"] == pytest.approx(1.5e-5)


def test_checkpoint_round_trip(tmp_path):
    state = {"w": torch.randn(3, 2, dtype=torch.float64), "b": torch.arange(4, dtype=torch.float32),
             "idx": torch.tensor([1, 2], dtype=torch.int64)}
    path = save_checkpoint(state, tmp_path / "m.ckpt", extra={"epoch": 3})
    back, extra = load_checkpoint(path)
    assert extra == {"epoch": 3}
    assert list(back) == ["w", "b", "idx"]
    for name, tensor in state.items():
        assert torch.equal(back[name], tensor)
        assert back[name].dtype == tensor.dtype


def test_checkpoint_rejects_damaged_files(tmp_path):
    path = save_checkpoint({"w": torch.ones(4)}, tmp_path / "m.ckpt")
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(raw + b"\x00")
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)
