import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from octcoherent.core import SurfaceDistribution, SurfaceSet
from octcoherent.model import (
    Encoder,
    HybridNet,
    ModelConfig,
    load_checkpoint,
    read_checkpoint_meta,
    save_checkpoint,
    set_deterministic,
    soft_argmax,
    stm_apply,
    topology_guarantee,
)

TINY = ModelConfig(levels=3, base_channels=2, k=3)


def _net(cfg=TINY, seed=0):
    torch.manual_seed(seed)
    return HybridNet(cfg).double().eval()


def _x(n_b=4, rows=16, cols=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, 1, n_b, rows, cols, generator=g, dtype=torch.float64)


# -- soft-argmax and topology -----------------------------------------------------


def test_soft_argmax_examples():
    onehot = torch.zeros(10, dtype=torch.float64)
    onehot[6] = 1
    assert soft_argmax(onehot).item() == 7.0
    assert soft_argmax(torch.full((512,), 1 / 512, dtype=torch.float64)).item() == 256.5
    q = torch.zeros(5, dtype=torch.float64)
    q[1], q[3] = 0.25, 0.75
    assert soft_argmax(q).item() == 3.5


def test_soft_argmax_rejects_unnormalised():
    with pytest.raises(ValueError, match="normalised"):
        soft_argmax(torch.full((4,), 0.3))
    soft_argmax(torch.full((4,), 0.25 + 2e-5))


def test_soft_argmax_on_surface_distribution():
    p = np.zeros((2, 1, 1, 6))
    p[0, 0, 0, 1] = 1
    p[1, 0, 0, 4] = 1
    s = soft_argmax(SurfaceDistribution(p))
    assert isinstance(s, SurfaceSet)
    assert s.positions.ravel().tolist() == [2.0, 5.0]


@given(st.integers(2, 40), st.integers(0, 2**31 - 1))
def test_soft_argmax_in_range(n, seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.softmax(torch.randn(7, n, generator=g, dtype=torch.float64) * 5, dim=-1)
    r = soft_argmax(q)
    assert torch.all(r >= 1) and torch.all(r <= n)


@pytest.mark.parametrize(
    "raw, expect", [((3, 5, 9), (3, 5, 9)), ((5, 4, 9), (5, 5, 9)), ((5, 4, 3), (5, 5, 5))]
)
def test_topology_examples(raw, expect):
    out = topology_guarantee(torch.tensor(raw, dtype=torch.float64))
    assert out.tolist() == list(expect)


def test_topology_single_surface_identity_and_surfaceset():
    t = torch.tensor([[4.0, 1.0]])
    assert torch.equal(topology_guarantee(t), t)
    s = topology_guarantee(SurfaceSet(np.array([5.0, 4.0, 3.0]).reshape(3, 1, 1), ("A", "B", "C")))
    assert s.positions.ravel().tolist() == [5.0, 5.0, 5.0] and s.names == ("A", "B", "C")


@given(st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_topology_ordered_and_idempotent(k, seed):
    g = torch.Generator().manual_seed(seed)
    raw = torch.randn(k, 3, 4, generator=g, dtype=torch.float64) * 10
    out = topology_guarantee(raw)
    assert torch.all(out[1:] >= out[:-1])
    assert torch.equal(topology_guarantee(out), out)
    assert torch.equal(out[0], raw[0])


# -- STM ----------------------------------------------------------------------------


def test_stm_zero_is_exact_identity():
    f = torch.randn(2, 3, 4, 10, 5, dtype=torch.float64)
    assert torch.equal(stm_apply(f, torch.zeros(2, 4, dtype=torch.float64), 0), f)
    assert torch.equal(stm_apply(f, torch.zeros(2, 4, dtype=torch.float64), 2), f)


def test_stm_integer_shift_replicates_edges():
    col = torch.arange(10, dtype=torch.float64)
    f = col.view(1, 1, 1, 10, 1).repeat(1, 1, 2, 1, 3)
    d = torch.tensor([[2.0, -2.0]], dtype=torch.float64)
    out = stm_apply(f, d, 0)
    assert out[0, 0, 0, :, 0].tolist() == [2, 3, 4, 5, 6, 7, 8, 9, 9, 9]
    assert out[0, 0, 1, :, 0].tolist() == [0, 0, 0, 1, 2, 3, 4, 5, 6, 7]


def test_stm_half_shift_on_ramp():
    f = torch.arange(12, dtype=torch.float64).view(1, 1, 1, 12, 1)
    out = stm_apply(f, torch.tensor([[0.5]], dtype=torch.float64), 0)
    assert torch.allclose(out[0, 0, 0, :-1, 0], f[0, 0, 0, :-1, 0] + 0.5, atol=0, rtol=0)


def test_stm_level_scaling():
    f = torch.arange(12, dtype=torch.float64).view(1, 1, 1, 12, 1)
    d = torch.tensor([[4.0]], dtype=torch.float64)
    assert torch.equal(stm_apply(f, d, 2), stm_apply(f, d / 4, 0))


def test_stm_linear_in_features():
    g = torch.Generator().manual_seed(3)
    f1, f2 = (torch.randn(1, 2, 3, 9, 4, generator=g, dtype=torch.float64) for _ in range(2))
    d = torch.randn(1, 3, generator=g, dtype=torch.float64) * 2
    lhs = stm_apply(2.0 * f1 - 3.0 * f2, d, 1)
    rhs = 2.0 * stm_apply(f1, d, 1) - 3.0 * stm_apply(f2, d, 1)
    assert torch.allclose(lhs, rhs, atol=1e-12)


# -- encoder and network --------------------------------------------------------------


def test_encoder_pyramid_shapes():
    cfg = ModelConfig(levels=4, base_channels=2)
    enc = Encoder(cfg).eval()
    feats = enc(torch.rand(1, 1, 12, 96, 128))
    assert [tuple(f.shape[2:]) for f in feats] == [(12, 96, 128), (12, 48, 64), (12, 24, 32), (12, 12, 16)]
    assert [f.shape[1] for f in feats] == [2, 4, 8, 16]


def test_encoder_bscan_permutation_equivariance():
    enc = Encoder(ModelConfig(levels=3, base_channels=3)).double().eval()
    x = _x(n_b=6, rows=16, cols=12, seed=4)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    plain = enc(x)
    permuted = enc(x[:, :, perm])
    for a, b in zip(plain, permuted):
        assert torch.equal(a[:, :, perm], b)


def test_forward_shapes_and_invariants():
    net = _net()
    out = net(_x())
    assert out.displacement.shape == (1, 4)
    assert out.surface_logits.shape == (1, 3, 4, 8, 16)
    assert out.semantic_logits.shape == (1, 4, 8, 4, 16)
    assert abs(out.displacement.mean().item()) < 1e-5
    assert torch.allclose(out.probs.sum(-1), torch.ones(1, 3, 4, 8, dtype=torch.float64), atol=1e-5)
    assert torch.all(out.surfaces_seg[:, 1:] >= out.surfaces_seg[:, :-1])
    assert torch.all(out.surfaces[:, 1:] >= out.surfaces[:, :-1])
    assert torch.allclose(out.surfaces, out.surfaces_aligned + out.displacement[:, None, :, None])
    for t in (out.surface_logits, out.semantic_logits, out.displacement):
        assert torch.isfinite(t).all()


def test_full3d_same_shapes_no_stm():
    h = _net()(_x())
    f = _net(ModelConfig(levels=3, base_channels=2, k=3, mode="full-3d"))(_x())
    assert not f.stm_applied and h.stm_applied
    for name in ("displacement", "surface_logits", "semantic_logits", "surfaces"):
        assert getattr(h, name).shape == getattr(f, name).shape


def test_no_align_gives_zero_displacement():
    out = _net()(_x(), align=False)
    assert torch.all(out.displacement == 0) and not out.stm_applied


def test_forward_rejects_bad_shape():
    with pytest.raises(ValueError, match="divisible"):
        _net()(_x(rows=18))


def test_deterministic_repeatability():
    set_deterministic(0)
    a = _net(seed=1)(_x(seed=2))
    b = _net(seed=1)(_x(seed=2))
    assert torch.equal(a.surface_logits, b.surface_logits)
    assert torch.equal(a.displacement, b.displacement)


def test_loss_gradient_reaches_displacement_through_stm():
    net = _net()
    x = _x(seed=5)
    d = torch.tensor([[0.3, -1.2, 0.7, 0.2]], dtype=torch.float64, requires_grad=True)
    out = net(x, displacement=d)
    out.surfaces_seg.sum().backward()
    assert d.grad is not None and d.grad.abs().sum() > 0

    def f(dv):
        with torch.no_grad():
            return net(x, displacement=dv).surfaces_seg.sum().item()

    e = torch.zeros_like(d)
    e[0, 1] = 1e-6
    fd = (f(d.detach() + e) - f(d.detach() - e)) / 2e-6
    assert fd != 0
    assert abs(fd - d.grad[0, 1].item()) <= 1e-4 * max(abs(fd), 1.0)


def test_alignment_branch_receives_gradient():
    net = _net().train()
    out = net(_x(seed=6))
    (out.displacement * torch.arange(4.0, dtype=torch.float64)).sum().backward()
    assert net.align_head.scale.grad is not None and net.align_head.scale.grad != 0


# -- checkpoints ----------------------------------------------------------------------


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    net = HybridNet(TINY)
    net.train()
    net(torch.rand(2, 1, 4, 16, 8))  # move BN running stats away from defaults
    net.eval()
    x = torch.rand(1, 1, 4, 16, 8)
    save_checkpoint(net, tmp_path / "ck", extra={"epoch": 3})
    assert (tmp_path / "ck" / "config.json").exists() and (tmp_path / "ck" / "weights.npz").exists()
    assert read_checkpoint_meta(tmp_path / "ck")["epoch"] == 3
    back = load_checkpoint(tmp_path / "ck", expected=TINY)
    with torch.no_grad():
        a, b = net(x), back(x)
    assert torch.equal(a.surface_logits, b.surface_logits)
    assert torch.equal(a.displacement, b.displacement)
    # overwriting in place keeps a valid checkpoint
    save_checkpoint(net, tmp_path / "ck")
    load_checkpoint(tmp_path / "ck")


def test_checkpoint_config_mismatch(tmp_path):
    save_checkpoint(HybridNet(TINY), tmp_path / "ck")
    with pytest.raises(ValueError, match="base_channels"):
        load_checkpoint(tmp_path / "ck", expected=ModelConfig(levels=3, base_channels=4, k=3))


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(levels=1)
    with pytest.raises(ValueError):
        ModelConfig(k=0)
    with pytest.raises(ValueError):
        ModelConfig(mode="2d")
