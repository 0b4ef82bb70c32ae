"""Layers, parameter registration, the optimizer, and checkpoint round-trips."""

import numpy as np
import pytest

from srrnet import tensor as T
from srrnet.nn import (
    AdamW,
    Conv2d,
    LayerNorm,
    Linear,
    Mlp,
    Module,
    Parameter,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from srrnet.tensor import ConfigurationError, Tensor

from conftest import assert_grad_matches


class TinyNet(Module):
    def __init__(self, rng):
        self.fc = Linear(4, 3, rng)
        self.norm = LayerNorm(3)
        self.blocks = [Mlp(3, 6, rng), Mlp(3, 6, rng)]

    def __call__(self, x):
        y = self.norm(self.fc(x))
        for b in self.blocks:
            y = y + b(y)
        return y


def test_named_parameters_are_deterministic_and_hierarchical(rng):
    net = TinyNet(rng)
    names = [n for n, _ in net.named_parameters()]
    assert names == [
        "fc.weight", "fc.bias",
        "norm.gamma", "norm.beta",
        "blocks.0.fc1.weight", "blocks.0.fc1.bias",
        "blocks.0.fc2.weight", "blocks.0.fc2.bias",
        "blocks.1.fc1.weight", "blocks.1.fc1.bias",
        "blocks.1.fc2.weight", "blocks.1.fc2.bias",
    ]
    # fc 15, norm 6, each mlp (3*6+6) + (6*3+3) = 45
    assert count_parameters(net) == 15 + 6 + 2 * 45


def test_linear_matches_manual(rng):
    lin = Linear(4, 3, rng)
    x = rng.normal(size=(2, 4))
    np.testing.assert_allclose(lin(Tensor(x)).data,
                               x @ lin.weight.data + lin.bias.data, atol=1e-14)


def test_linear_no_bias(rng):
    lin = Linear(4, 3, rng, bias=False)
    assert lin.bias is None
    assert [n for n, _ in lin.named_parameters()] == ["weight"]


def test_trunc_normal_init_is_clipped(rng):
    lin = Linear(64, 64, rng)
    assert np.abs(lin.weight.data).max() <= 0.04 + 1e-12
    assert np.all(lin.bias.data == 0.0)


def test_module_grads_match_fd(rng):
    net = TinyNet(rng)
    x = Tensor(rng.normal(size=(2, 4)))
    w = rng.normal(size=(2, 3))
    loss = lambda: T.tensor_sum(net(x) * Tensor(w))
    for _, p in net.named_parameters():
        assert_grad_matches(loss, p, rtol=1e-4, atol=1e-6)


def test_conv2d_module_matches_primitive(rng):
    conv = Conv2d(2, 3, 3, rng, stride=2, padding=1)
    x = rng.normal(size=(1, 2, 8, 8))
    expected = T.conv2d(Tensor(x), conv.weight, conv.bias, stride=2, padding=1).data
    np.testing.assert_array_equal(conv(Tensor(x)).data, expected)


def test_zero_grad_clears_everything(rng):
    net = TinyNet(rng)
    T.backward(T.tensor_sum(net(Tensor(rng.normal(size=(1, 4))))))
    assert any(p.grad is not None for p in net.parameters())
    net.zero_grad()
    assert all(p.grad is None for p in net.parameters())


# ---------------------------------------------------------------------------
# optimizer


def test_adamw_first_step_matches_hand_computation():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, -0.25])
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    opt.step()
    # With bias correction the first step moves by lr * g / (|g| + eps).
    expected = np.array([1.0, -2.0]) - 0.1 * np.array([0.5, -0.25]) / (
        np.abs([0.5, -0.25]) + 1e-8)
    np.testing.assert_allclose(p.data, expected, atol=1e-9)


def test_adamw_weight_decay_is_decoupled():
    p = Parameter(np.array([2.0]))
    p.grad = np.array([0.0])
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    opt.step()
    # Zero gradient: only the decay term moves the weight.
    np.testing.assert_allclose(p.data, 2.0 - 0.1 * 0.01 * 2.0, atol=1e-12)


def test_adamw_skips_frozen_parameters():
    p = Parameter(np.array([1.0]))
    p.freeze()
    p.grad = np.array([10.0])
    AdamW([p], lr=0.1).step()
    np.testing.assert_array_equal(p.data, [1.0])
    p.unfreeze()
    assert not p.frozen


def test_adamw_reduces_quadratic_loss(rng):
    p = Parameter(rng.normal(size=5))
    opt = AdamW([p], lr=0.05, weight_decay=0.0)
    first = float((p.data ** 2).sum())
    for _ in range(200):
        loss = T.tensor_sum(p * p)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
    assert float((p.data ** 2).sum()) < first * 1e-2


def test_adamw_rejects_negative_lr():
    with pytest.raises(ConfigurationError):
        AdamW([Parameter(np.zeros(1))], lr=-1.0)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    net = TinyNet(rng)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, net)
    other = TinyNet(np.random.default_rng(999))
    assert not np.array_equal(other.fc.weight.data, net.fc.weight.data)
    load_checkpoint(path, other)
    for (_, a), (_, b) in zip(net.named_parameters(), other.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_checkpoint_rejects_mismatched_model(tmp_path, rng):
    net = TinyNet(rng)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, net)
    with pytest.raises(ValueError, match="mismatch"):
        load_checkpoint(path, Linear(4, 3, rng))


def test_checkpoint_rejects_unknown_version(tmp_path, rng):
    net = TinyNet(rng)
    arrays = {"__format_version__": np.asarray([99], dtype="<i8")}
    for name, p in net.named_parameters():
        arrays[name] = p.data
    path = tmp_path / "bad.npz"
    np.savez(path, **arrays)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path, net)


def test_checkpoint_stores_little_endian_float64(tmp_path, rng):
    net = TinyNet(rng)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, net)
    with np.load(path) as blob:
        assert int(blob["__format_version__"][0]) == 1
        assert blob["fc.weight"].dtype == np.dtype("<f8")
