"""Intensity normalisation, flattening to Bruch's membrane, and patch extraction."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.ndimage import median_filter

from .core import DisplacementVector, OctVolume, SurfaceSet, round_half_up
from .io import FormatError, write_json


def normalize_intensity(v: OctVolume) -> OctVolume:
    """Min-max scale to [0, 1]; a constant volume maps to 0.5 everywhere."""
    x = v.intensities.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return v.replace(np.full(x.shape, 0.5))
    return v.replace((x - lo) / (hi - lo))


def estimate_bm(v: OctVolume, gradient_floor: float = 1e-3, window=(5, 3)):
    """Bruch's membrane row per (a, b), from the strongest bright-to-dark step.

    Only the lower half of each A-scan is searched. The returned row is the
    first row below the step, matching the surface convention in ``core``.
    A-scans whose steepest drop is weaker than ``gradient_floor`` are flagged
    and filled from valid neighbours (``R / 2`` if none are valid). The result
    is median filtered over a ``window`` of (A-scans, B-scans).

    Returns ``(bm, flagged)`` with shapes ``(N_A, N_B)``.
    """
    x = v.intensities.astype(np.float64)
    n_rows = x.shape[2]
    if n_rows < 8:
        raise ValueError(f"need at least 8 rows to estimate BM, got {n_rows}")
    grad = np.diff(x, axis=2)  # grad[..., i] = I[i+1] - I[i] (0-based)
    start = n_rows // 2
    lower = grad[..., start - 1 :]
    idx = np.argmin(lower, axis=2)
    strength = -np.take_along_axis(lower, idx[..., None], axis=2)[..., 0]
    # 0-based gradient index j describes the step into 0-based row j+1, i.e. 1-based row j+2
    bm = (idx + start - 1 + 2).astype(np.float64)
    flagged = strength < gradient_floor

    if flagged.all():
        bm[:] = n_rows / 2
    elif flagged.any():
        bm = _fill_from_neighbours(bm, flagged)
    bm = median_filter(bm, size=window, mode="nearest")
    return bm, flagged


def _fill_from_neighbours(values: np.ndarray, bad: np.ndarray) -> np.ndarray:
    """Replace flagged entries by the value of the nearest unflagged entry."""
    from scipy.ndimage import distance_transform_edt

    _, (ia, ib) = distance_transform_edt(bad, return_indices=True)
    return values[ia, ib]


@dataclass(frozen=True)
class FlattenRecord:
    """Integer axial shift applied to every A-scan; content moved ``shift`` rows deeper."""

    shifts: np.ndarray  # (N_A, N_B) int
    target_row: int

    def __post_init__(self):
        s = np.asarray(self.shifts)
        if s.ndim != 2:
            raise ValueError("shifts must be (N_A, N_B)")
        s = s.astype(np.int64, copy=True)
        s.setflags(write=False)
        object.__setattr__(self, "shifts", s)

    def save(self, path) -> Path:
        """JSON header ``<path>.json`` plus little-endian int32 payload ``<path>.raw``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        raw = path.with_name(path.name + ".raw")
        self.shifts.astype("<i4").tofile(raw)
        return write_json(
            path.with_name(path.name + ".json"),
            {"format": "FLAT1", "shape": list(self.shifts.shape), "dtype": "i32",
             "order": "a,b", "target_row": int(self.target_row), "payload": raw.name},
        )

    @classmethod
    def load(cls, path) -> "FlattenRecord":
        path = Path(path)
        header_path = path if path.suffix == ".json" else path.with_name(path.name + ".json")
        try:
            header = json.loads(header_path.read_text())
            shifts = np.fromfile(header_path.parent / header["payload"], dtype="<i4")
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise FormatError(f"{header_path}: cannot read flatten record ({exc})") from exc
        return cls(shifts.reshape(header["shape"]), int(header["target_row"]))


def shift_ascans(x: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """out[a, b, r] = x[a, b, clip(r - shifts[a, b])] along the last axis."""
    n_rows = x.shape[-1]
    src = np.arange(n_rows)[None, None, :] - shifts[..., None]
    return np.take_along_axis(x, np.clip(src, 0, n_rows - 1), axis=-1)


def flatten_volume(v: OctVolume, bm, target_row: int) -> tuple[OctVolume, FlattenRecord]:
    n_rows = v.n_rows
    if not n_rows / 2 <= target_row <= n_rows - 4:
        raise ValueError(f"target_row must lie in [R/2, R-4] = [{n_rows / 2}, {n_rows - 4}]")
    shifts = round_half_up(target_row - np.asarray(bm, dtype=np.float64)).astype(np.int64)
    shifts = np.clip(shifts, -n_rows, n_rows)
    flat = shift_ascans(v.intensities, shifts)
    return v.replace(flat), FlattenRecord(shifts, target_row)


def flatten_surface(s: SurfaceSet, rec: FlattenRecord) -> SurfaceSet:
    return s.replace(s.positions + rec.shifts.T[None])


def unflatten_surface(s: SurfaceSet, rec: FlattenRecord) -> SurfaceSet:
    if rec.shifts.T.shape != s.shape[1:]:
        raise ValueError(f"record shape {rec.shifts.shape} does not match surfaces {s.shape}")
    return s.replace(s.positions - rec.shifts.T[None])


@dataclass(frozen=True)
class Patch:
    volume: np.ndarray  # (a, b, rows)
    truth: np.ndarray  # (K, b, a), row positions relative to the patch
    mask: np.ndarray  # (K, b, a) bool: surface inside the row window
    offset: tuple[int, int, int]  # (a0, b0, r0), 0-based
    displacement: np.ndarray | None = None  # (b,)


def _crop(v: OctVolume, s: SurfaceSet, offset, patch_shape, d):
    rows, n_a, n_b = patch_shape
    a0, b0, r0 = offset
    vol = v.intensities[a0 : a0 + n_a, b0 : b0 + n_b, r0 : r0 + rows]
    pos = s.positions[:, b0 : b0 + n_b, a0 : a0 + n_a] - r0
    mask = np.isfinite(pos) & (pos >= 1) & (pos <= rows)
    truth = np.clip(np.nan_to_num(pos, nan=1.0), 1, rows)
    disp = None if d is None else d.d[b0 : b0 + n_b].copy()
    return Patch(vol, truth, mask, (a0, b0, r0), disp)


def _tile_starts(total: int, size: int) -> list[int]:
    starts = list(range(0, total - size + 1, size))
    if starts[-1] + size < total:
        starts.append(total - size)
    return starts


def extract_patches(
    v: OctVolume,
    s: SurfaceSet,
    patch_shape: tuple[int, int, int],
    mode: str = "tile",
    rng: np.random.Generator | None = None,
    n: int | None = None,
    d: DisplacementVector | None = None,
) -> Iterator[Patch]:
    """Crop ``(rows, A-scans, B-scans)`` patches with consistently cropped truth.

    ``mode="random"`` draws ``n`` uniform offsets from ``rng`` (endless when ``n``
    is None); ``mode="tile"`` covers the volume deterministically, with the last
    tile on each axis flush against the volume edge.
    """
    rows, n_a, n_b = patch_shape
    if rows > v.n_rows or n_a > v.n_ascans or n_b > v.n_bscans:
        raise ValueError(f"patch {patch_shape} larger than volume (rows, a, b) = "
                         f"({v.n_rows}, {v.n_ascans}, {v.n_bscans})")
    if s.shape[1:] != (v.n_bscans, v.n_ascans):
        raise ValueError(f"surfaces {s.shape} do not match volume {v.shape}")
    if mode == "tile":
        for r0 in _tile_starts(v.n_rows, rows):
            for b0 in _tile_starts(v.n_bscans, n_b):
                for a0 in _tile_starts(v.n_ascans, n_a):
                    yield _crop(v, s, (a0, b0, r0), patch_shape, d)
    elif mode == "random":
        rng = rng if rng is not None else np.random.default_rng()
        count = 0
        while n is None or count < n:
            offset = (
                int(rng.integers(0, v.n_ascans - n_a + 1)),
                int(rng.integers(0, v.n_bscans - n_b + 1)),
                int(rng.integers(0, v.n_rows - rows + 1)),
            )
            yield _crop(v, s, offset, patch_shape, d)
            count += 1
    else:
        raise ValueError(f"unknown patch mode {mode!r}")
