import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from octcoherent.core import OctVolume, SurfaceSet
from octcoherent.preprocess import (
    FlattenRecord,
    estimate_bm,
    extract_patches,
    flatten_surface,
    flatten_volume,
    normalize_intensity,
    unflatten_surface,
)
from octcoherent.synth import PhantomSpec, generate_phantom


def _flat_layers(bm_row, n_rows=96):
    """Flat three-layer volume whose deepest bright-to-dark edge starts at ``bm_row``."""
    ascan = np.full(n_rows, 0.05)
    ascan[29:59] = 0.45
    ascan[59:bm_row - 1] = 0.9
    ascan[bm_row - 1:] = 0.3
    return OctVolume(np.broadcast_to(ascan, (24, 4, n_rows)).copy())


def test_bm_on_flat_phantom():
    vol = _flat_layers(70)
    bm, flagged = estimate_bm(vol)
    assert not flagged.any()
    assert np.all(np.abs(bm - 70) <= 1)


def test_bm_tracks_curved_phantom():
    vol, truth, _ = generate_phantom(PhantomSpec(seed=4, noise_sigma=0.0, shift_range=0, drusen_count=(0, 0)))
    bm, _ = estimate_bm(vol)
    assert np.max(np.abs(bm - truth.positions[-1].T)) <= 1.0


def test_bm_constant_volume_is_flagged():
    vol = OctVolume(np.full((6, 3, 32), 0.4))
    bm, flagged = estimate_bm(vol)
    assert flagged.all()
    assert np.all(bm == 16)


def test_bm_invariant_to_offset():
    vol, _, _ = generate_phantom(PhantomSpec(seed=1, noise_sigma=0.05))
    bm1, _ = estimate_bm(vol)
    bm2, _ = estimate_bm(vol.replace(vol.intensities + 0.25))
    assert np.array_equal(bm1, bm2)


def test_bm_fills_flagged_from_neighbours():
    vol = _flat_layers(70)
    x = np.array(vol.intensities)
    x[5, 2, :] = 0.5  # no edge in this A-scan
    bm, flagged = estimate_bm(vol.replace(x))
    assert flagged[5, 2] and flagged.sum() == 1
    assert abs(bm[5, 2] - 70) <= 1


def test_bm_needs_rows():
    with pytest.raises(ValueError):
        estimate_bm(OctVolume(np.zeros((2, 2, 6))))


def test_flatten_identity_when_bm_at_target():
    vol, _, _ = generate_phantom(PhantomSpec(seed=2))
    flat, rec = flatten_volume(vol, np.full((128, 12), 72.0), 72)
    assert np.all(rec.shifts == 0)
    assert np.array_equal(flat.intensities, vol.intensities)


def test_flatten_uniform_shift():
    vol, _, _ = generate_phantom(PhantomSpec(seed=2))
    flat, rec = flatten_volume(vol, np.full((128, 12), 69.0), 72)
    assert np.all(rec.shifts == 3)
    np.testing.assert_array_equal(flat.intensities[:, :, 3:], vol.intensities[:, :, :-3])
    np.testing.assert_array_equal(flat.intensities[:, :, :3], np.repeat(vol.intensities[:, :, :1], 3, axis=2))


def test_flatten_target_precondition():
    vol = OctVolume(np.zeros((2, 2, 40)))
    with pytest.raises(ValueError):
        flatten_volume(vol, np.zeros((2, 2)), 10)
    with pytest.raises(ValueError):
        flatten_volume(vol, np.zeros((2, 2)), 38)


def test_flatten_then_unflatten_bm_roundtrip(rng):
    vol, _, _ = generate_phantom(PhantomSpec(seed=5))
    bm, _ = estimate_bm(vol)
    bm = bm + rng.uniform(-0.5, 0.5, size=bm.shape)
    _, rec = flatten_volume(vol, bm, 72)
    flat_bm = SurfaceSet((bm + rec.shifts).T[None])
    # in the flattened frame BM sits at the target row within rounding
    assert np.all(np.abs(flat_bm.positions - 72) <= 0.5)
    back = unflatten_surface(flat_bm, rec)
    np.testing.assert_allclose(back.positions[0], bm.T, atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_flatten_surface_roundtrip(seed):
    r = np.random.default_rng(seed)
    rec = FlattenRecord(r.integers(-10, 11, size=(7, 3)), 40)
    s = SurfaceSet(np.sort(r.uniform(1, 60, size=(2, 3, 7)), axis=0))
    np.testing.assert_allclose(unflatten_surface(flatten_surface(s, rec), rec).positions, s.positions, atol=1e-12)


def test_unflatten_identity_and_uniform():
    s = SurfaceSet(np.full((1, 2, 3), 20.0))
    assert np.array_equal(unflatten_surface(s, FlattenRecord(np.zeros((3, 2)), 50)).positions, s.positions)
    assert np.all(unflatten_surface(s, FlattenRecord(np.full((3, 2), 3), 50)).positions == 17.0)


def test_flatten_record_file_roundtrip(tmp_path, rng):
    rec = FlattenRecord(rng.integers(-5, 6, size=(4, 3)), 30)
    rec.save(tmp_path / "c.flat")
    back = FlattenRecord.load(tmp_path / "c.flat")
    assert np.array_equal(back.shifts, rec.shifts) and back.target_row == 30


def test_normalize_intensity():
    v = OctVolume(np.linspace(2, 5, 4 * 2 * 3).reshape(4, 2, 3))
    n = normalize_intensity(v).intensities
    assert n.min() == 0 and n.max() == 1
    assert np.all(normalize_intensity(OctVolume(np.full((2, 2, 3), 7.0))).intensities == 0.5)


def test_patch_equal_to_volume():
    vol, truth, _ = generate_phantom(PhantomSpec(seed=0))
    patches = list(extract_patches(vol, truth, (96, 128, 12)))
    assert len(patches) == 1
    assert np.array_equal(patches[0].volume, vol.intensities)
    assert np.array_equal(patches[0].truth, truth.positions)
    assert patches[0].mask.all()


def test_tiling_full_rows():
    vol, truth, _ = generate_phantom(PhantomSpec(seed=0))
    patches = list(extract_patches(vol, truth, (96, 64, 12)))
    assert [p.offset for p in patches] == [(0, 0, 0), (64, 0, 0)]
    patches = list(extract_patches(vol, truth, (96, 48, 12)))
    assert [p.offset[0] for p in patches] == [0, 48, 80]


def test_random_patches_bounds_and_masks():
    vol, truth, _ = generate_phantom(PhantomSpec(seed=0))
    rng = np.random.default_rng(0)
    shape = (48, 40, 5)
    for p in extract_patches(vol, truth, shape, mode="random", rng=rng, n=100):
        a0, b0, r0 = p.offset
        assert p.volume.shape == (40, 5, 48)
        assert 0 <= a0 <= 128 - 40 and 0 <= b0 <= 12 - 5 and 0 <= r0 <= 96 - 48
        np.testing.assert_array_equal(p.volume, vol.intensities[a0:a0 + 40, b0:b0 + 5, r0:r0 + 48])
        rel = truth.positions[:, b0:b0 + 5, a0:a0 + 40] - r0
        np.testing.assert_array_equal(p.mask, (rel >= 1) & (rel <= 48))
        np.testing.assert_allclose(p.truth[p.mask], rel[p.mask])
        assert np.all((p.truth >= 1) & (p.truth <= 48))


def test_patch_larger_than_volume_rejected():
    vol, truth, _ = generate_phantom(PhantomSpec(seed=0))
    with pytest.raises(ValueError, match="larger"):
        next(extract_patches(vol, truth, (97, 64, 12)))
