"""Central finite-difference checks of every differentiable component at float64.

Each check compares the autograd directional derivative along a random unit
direction with ``(f(x + h v) - f(x - h v)) / 2h`` and requires a relative error
below 1e-4, over 20 random trials per component.
"""
import numpy as np
import pytest
import torch

from octcoherent.losses import (
    loss_ce_surface,
    loss_dice_ce,
    loss_local_ncc,
    loss_smooth_align,
    loss_smooth_l1,
    loss_smooth_surface,
)
from octcoherent.model import soft_argmax, stm_apply, topology_guarantee

TRIALS = 20
H = 1e-6
TOL = 1e-4
D = torch.float64


def fd_relative_error(fn, inputs, gen) -> float:
    """Worst relative error over all ``inputs`` for scalar ``fn(*inputs)``."""
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    worst = 0.0
    for i, (x, g) in enumerate(zip(inputs, grads)):
        g = torch.zeros_like(x) if g is None else g
        v = torch.randn(x.shape, generator=gen, dtype=D)
        v /= v.norm()
        with torch.no_grad():
            plus = [y.detach() + (H * v if j == i else 0) for j, y in enumerate(inputs)]
            minus = [y.detach() - (H * v if j == i else 0) for j, y in enumerate(inputs)]
            numeric = (fn(*plus) - fn(*minus)).item() / (2 * H)
        analytic = (g * v).sum().item()
        scale = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst


def _weights(shape, gen):
    return torch.randn(shape, generator=gen, dtype=D)


def _check(make, fn):
    gen = torch.Generator().manual_seed(2024)
    errors = [fd_relative_error(fn, make(gen), gen) for _ in range(TRIALS)]
    assert max(errors) < TOL, f"max relative error {max(errors):.3g}"


def test_grad_stm_apply():
    w = _weights((2, 2, 3, 11, 4), torch.Generator().manual_seed(0))

    def make(g):
        return [torch.randn(2, 2, 3, 11, 4, generator=g, dtype=D), torch.randn(2, 3, generator=g, dtype=D) * 3]

    for level in (0, 1):
        _check(make, lambda f, d: (w * stm_apply(f, d, level)).sum())


def test_grad_soft_argmax():
    w = _weights((3, 4), torch.Generator().manual_seed(1))

    def make(g):
        return [torch.randn(3, 4, 9, generator=g, dtype=D)]

    _check(make, lambda z: (w * soft_argmax(torch.softmax(z, -1))).sum())


def test_grad_topology_guarantee():
    w = _weights((4, 3, 5), torch.Generator().manual_seed(2))

    def make(g):
        return [torch.randn(4, 3, 5, generator=g, dtype=D) * 5]

    _check(make, lambda raw: (w * topology_guarantee(raw)).sum())


def test_grad_local_ncc():
    def make(g):
        return [torch.rand(1, 1, 3, 12, 10, generator=g, dtype=D), torch.randn(1, 3, generator=g, dtype=D) * 2]

    _check(make, lambda x, d: loss_local_ncc(x, d, window=5))


@pytest.mark.parametrize("reduction", ["sum", "mean"])
def test_grad_smooth_align(reduction):
    mask = torch.from_numpy(np.random.default_rng(3).random((2, 3, 4, 5)) > 0.2)

    def make(g):
        return [torch.rand(2, 3, 4, 5, generator=g, dtype=D) * 20, torch.randn(2, 4, generator=g, dtype=D)]

    _check(make, lambda t, d: loss_smooth_align(t, d, mask, reduction))


def test_grad_ce_surface():
    truth = torch.from_numpy(np.random.default_rng(4).uniform(1, 9, size=(1, 2, 3, 4)))

    def make(g):
        return [torch.randn(1, 2, 3, 4, 9, generator=g, dtype=D)]

    _check(make, lambda z: loss_ce_surface(torch.softmax(z, -1), truth))


def test_grad_smooth_l1():
    def make(g):
        return [torch.randn(2, 3, 4, 5, generator=g, dtype=D) * 2, torch.randn(2, 3, 4, 5, generator=g, dtype=D)]

    _check(make, lambda p, t: loss_smooth_l1(p, t))


def test_grad_smooth_surface():
    w = _weights((3,), torch.Generator().manual_seed(5))

    def make(g):
        return [torch.randn(2, 3, 4, 5, generator=g, dtype=D) * 3]

    _check(make, lambda s: (w * loss_smooth_surface(s)).sum())


def test_grad_dice_ce():
    labels = torch.from_numpy(np.random.default_rng(6).integers(0, 4, size=(2, 3, 4, 6)))

    def make(g):
        return [torch.randn(2, 4, 3, 4, 6, generator=g, dtype=D)]

    _check(make, lambda z: loss_dice_ce(z, labels))
