"""Shared data model for OCT volumes, layer surfaces and B-scan displacements.

Axis conventions used throughout the package:

* ``OctVolume.intensities`` has shape ``(N_A, N_B, R)``: A-scan column, B-scan
  index, axial row.
* ``SurfaceSet.positions`` has shape ``(K, N_B, N_A)`` and stores 1-based,
  possibly fractional, row positions. ``NaN`` marks a missing annotation.
* A surface at position ``s`` is the boundary between pixel rows: every row
  ``r >= round_half_up(s)`` lies below it.
* ``DisplacementVector.d`` has one axial shift per B-scan. A positive ``d_b``
  means the content of B-scan ``b`` sits ``d_b`` rows deeper than in the
  aligned frame, so aligned positions are ``r - d_b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_SPACING_UM = (3.24, 6.7, 67.0)
DEFAULT_SURFACE_NAMES = ("ILM", "IRPE", "OBM")


def round_half_up(x):
    """Round to the nearest integer with ties going up (2.5 -> 3, -2.5 -> -2)."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def default_surface_names(k: int) -> tuple[str, ...]:
    if k == len(DEFAULT_SURFACE_NAMES):
        return DEFAULT_SURFACE_NAMES
    return tuple(f"S{i}" for i in range(k))


@dataclass(frozen=True)
class OctVolume:
    intensities: np.ndarray
    spacing: tuple[float, float, float] = DEFAULT_SPACING_UM
    id: str = ""

    def __post_init__(self):
        arr = np.asarray(self.intensities)
        if arr.ndim != 3:
            raise ValueError(f"intensities must be 3D (N_A, N_B, R), got shape {arr.shape}")
        n_a, n_b, r = arr.shape
        if n_a < 1 or n_b < 2 or r < 2:
            raise ValueError(f"need N_A >= 1, N_B >= 2, R >= 2; got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("intensities contain non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        arr = arr.astype(np.float32, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "intensities", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.intensities.shape

    @property
    def n_ascans(self) -> int:
        return self.intensities.shape[0]

    @property
    def n_bscans(self) -> int:
        return self.intensities.shape[1]

    @property
    def n_rows(self) -> int:
        return self.intensities.shape[2]

    def bscan(self, b: int) -> np.ndarray:
        """B-scan image ``b`` as a ``(R, N_A)`` array (rows x columns)."""
        return self.intensities[:, b, :].T

    def replace(self, intensities=None, id=None) -> "OctVolume":
        return OctVolume(
            self.intensities if intensities is None else intensities,
            self.spacing,
            self.id if id is None else id,
        )


@dataclass(frozen=True)
class SurfaceSet:
    positions: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 3:
            raise ValueError(f"positions must be 3D (K, N_B, N_A), got shape {pos.shape}")
        if np.any(np.isinf(pos)):
            raise ValueError("positions contain infinite values")
        names = tuple(self.names) if self.names else default_surface_names(pos.shape[0])
        if len(names) != pos.shape[0]:
            raise ValueError(f"{len(names)} names for {pos.shape[0]} surfaces")
        pos = pos.copy()
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "names", names)

    @property
    def k(self) -> int:
        return self.positions.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.positions.shape

    def is_ordered(self, tol: float = 0.0) -> bool:
        if self.k < 2:
            return True
        diff = np.diff(self.positions, axis=0)
        diff = diff[np.isfinite(diff)]
        return bool(np.all(diff >= -tol))

    def require_ordered(self):
        if not self.is_ordered():
            raise ValueError("SurfaceSet is not ordered: some surface lies above its predecessor")
        return self

    def in_range(self, n_rows: int) -> bool:
        p = self.positions[np.isfinite(self.positions)]
        return bool(np.all((p >= 1) & (p <= n_rows)))

    def validate(self, n_rows: int):
        """Check the full invariant set against a volume with ``n_rows`` rows."""
        self.require_ordered()
        if not self.in_range(n_rows):
            raise ValueError(f"surface positions outside [1, {n_rows}]")
        return self

    def replace(self, positions) -> "SurfaceSet":
        return SurfaceSet(positions, self.names)


@dataclass(frozen=True)
class DisplacementVector:
    d: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(d)):
            raise ValueError("displacements must be finite")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    def __len__(self):
        return self.d.shape[0]

    def check_rows(self, n_rows: int):
        if np.any(np.abs(self.d) >= n_rows):
            raise ValueError(f"|d_b| must be < R={n_rows}")
        return self

    def centered(self) -> "DisplacementVector":
        return DisplacementVector(self.d - self.d.mean())

    @classmethod
    def zeros(cls, n_bscans: int) -> "DisplacementVector":
        return cls(np.zeros(n_bscans))


@dataclass(frozen=True)
class SurfaceDistribution:
    """Per-A-scan probability over rows, shape ``(K, N_B, N_A, R)``."""

    probs: np.ndarray
    tol: float = field(default=1e-5, repr=False)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 4:
            raise ValueError(f"probs must be 4D (K, N_B, N_A, R), got shape {p.shape}")
        if np.any(p < 0):
            raise ValueError("probabilities must be non-negative")
        err = np.max(np.abs(p.sum(axis=-1) - 1.0))
        if err > self.tol:
            raise ValueError(f"probabilities do not sum to 1 over rows (max error {err:.3g})")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)


@dataclass(frozen=True)
class LabelMap:
    """Region labels ``(N_A, N_B, R)``; label k lies between surfaces k-1 and k."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise ValueError(f"labels must be 3D (N_A, N_B, R), got shape {lab.shape}")
        if np.any(np.diff(lab.astype(np.int64), axis=-1) < 0):
            raise ValueError("labels must be non-decreasing along every A-scan")
        lab = lab.astype(np.int64, copy=True)
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)


def surfaces_to_labelmap(s: SurfaceSet, n_rows: int) -> LabelMap:
    """Voxel (a, b, r) gets the number of surfaces with round(position) <= r."""
    s.require_ordered()
    if np.any(np.isnan(s.positions)):
        raise ValueError("cannot build a label map from surfaces with missing positions")
    boundary = round_half_up(s.positions)  # (K, N_B, N_A)
    rows = np.arange(1, n_rows + 1, dtype=np.float64)
    below = boundary.transpose(2, 1, 0)[..., None, :] <= rows[:, None]  # (N_A, N_B, R, K)
    return LabelMap(below.sum(axis=-1))


def labelmap_boundaries(lab: LabelMap, k: int) -> np.ndarray:
    """Recover integer surface rows (K, N_B, N_A) from a label map.

    Surface k sits at the first row whose label exceeds k; ``R + 1`` if none.
    """
    labels = lab.labels
    n_rows = labels.shape[-1]
    out = np.empty((k,) + labels.shape[:2][::-1])
    for i in range(k):
        hit = labels > i
        first = np.where(hit.any(axis=-1), hit.argmax(axis=-1) + 1, n_rows + 1)
        out[i] = first.T
    return out


def apply_displacement_to_surfaces(
    s: SurfaceSet, d: DisplacementVector, clip_rows: int | None = None
) -> SurfaceSet:
    """Move surfaces into the displaced frame: ``r' = r - d_b``.

    Clipping to ``[1, clip_rows]`` happens only when ``clip_rows`` is given.
    """
    if len(d) != s.shape[1]:
        raise ValueError(f"displacement has {len(d)} entries for {s.shape[1]} B-scans")
    pos = s.positions - d.d[None, :, None]
    if clip_rows is not None:
        pos = np.clip(pos, 1, clip_rows)
    return s.replace(pos)
