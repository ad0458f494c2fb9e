"""Layered phantom volumes with known surfaces and known per-B-scan misalignment."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DEFAULT_SPACING_UM, DisplacementVector, OctVolume, SurfaceSet, default_surface_names
from .dataset import MANIFEST_FORMAT, file_sha256
from .io import save_displacements, save_surfaces, save_volume, write_json


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (128, 12, 96)  # (N_A, N_B, R)
    k: int = 3
    # cycles across the full A-scan / B-scan extent, and their amplitudes in rows
    frequency: tuple[float, float] = (1.0, 0.5)
    amplitude: tuple[float, float] = (4.0, 0.5)
    drusen_count: tuple[int, int] = (0, 3)
    drusen_amplitude: tuple[float, float] = (2.0, 5.0)
    drusen_width: tuple[float, float] = (8.0, 2.0)  # Gaussian sigma in A-scans, B-scans
    noise_sigma: float = 0.05
    shift_range: float = 6.0
    margin: float = 4.0
    mean_rows: tuple[float, ...] | None = None
    layer_means: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        n_a, n_b, r = self.shape
        if n_a < 1 or n_b < 2 or r < 2:
            raise ValueError(f"invalid phantom shape {self.shape}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.shift_range < r / 4:
            raise ValueError(f"shift_range must lie in [0, R/4) = [0, {r / 4})")
        if self.mean_rows is not None and len(self.mean_rows) != self.k:
            raise ValueError("mean_rows needs one entry per surface")
        if self.layer_means is not None and len(self.layer_means) != self.k + 1:
            raise ValueError("layer_means needs k + 1 entries")

    def base_rows(self) -> np.ndarray:
        if self.mean_rows is not None:
            return np.asarray(self.mean_rows, dtype=np.float64)
        r = self.shape[2]
        if self.k == 3:
            return np.array([0.32, 0.62, 0.70]) * r
        return np.linspace(0.3, 0.7, self.k) * r

    def region_means(self) -> np.ndarray:
        if self.layer_means is not None:
            return np.asarray(self.layer_means, dtype=np.float64)
        inner = [0.45 if i % 2 == 0 else 0.9 for i in range(self.k - 1)]
        return np.array([0.05, *inner, 0.3])


def _random_walk(rng, n: int, shift_range: float) -> np.ndarray:
    if shift_range == 0:
        return np.zeros(n)
    walk = np.cumsum(rng.normal(size=n))
    # light smoothing keeps neighbouring B-scans correlated
    walk = np.convolve(np.pad(walk, 1, mode="edge"), [0.25, 0.5, 0.25], mode="valid")
    walk -= walk.mean()
    peak = np.max(np.abs(walk))
    if peak > 0:
        walk *= shift_range * rng.uniform(0.6, 1.0) / peak
    return walk - walk.mean()


def phantom_surfaces(spec: PhantomSpec, rng) -> tuple[np.ndarray, int]:
    """Ordered smooth surfaces (K, N_B, N_A) in the aligned frame, plus drusen count."""
    n_a, n_b, _ = spec.shape
    a = np.arange(n_a)[None, :] / n_a
    b = np.arange(n_b)[:, None] / n_b
    f_a, f_b = spec.frequency
    amp_a, amp_b = spec.amplitude
    ph = rng.uniform(0, 2 * np.pi, size=6)
    common = (
        amp_a * np.sin(2 * np.pi * f_a * a + ph[0])
        + 0.5 * amp_a * np.sin(2 * np.pi * 2 * f_a * a + ph[1])
        + amp_b * np.sin(2 * np.pi * f_b * b + ph[2])
    )
    base = spec.base_rows()
    surfaces = np.empty((spec.k, n_b, n_a))
    surfaces[0] = base[0] + common
    for i in range(1, spec.k):
        gap = base[i] - base[i - 1]
        phase = rng.uniform(0, 2 * np.pi, size=2)
        # thickness stays within [0.75, 1.25] x gap, so layers never cross
        wobble = 0.15 * np.sin(2 * np.pi * f_a * a + phase[0]) + 0.1 * np.sin(2 * np.pi * f_b * b + phase[1])
        surfaces[i] = surfaces[i - 1] + gap * (1.0 + wobble)

    lo, hi = spec.drusen_count
    n_drusen = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    if n_drusen and spec.k >= 2:
        aa = np.arange(n_a)[None, :]
        bb = np.arange(n_b)[:, None]
        bump = np.zeros((n_b, n_a))
        for _ in range(n_drusen):
            ca, cb = rng.uniform(0.15 * n_a, 0.85 * n_a), rng.uniform(0, n_b - 1)
            amp = rng.uniform(*spec.drusen_amplitude)
            sa, sb = spec.drusen_width
            bump += amp * np.exp(-0.5 * (((aa - ca) / sa) ** 2 + ((bb - cb) / sb) ** 2))
        # drusen lift the RPE-side surface; the membrane beneath barely moves
        surfaces[spec.k - 2] -= bump
        surfaces[spec.k - 1] -= 0.25 * bump
    return surfaces, n_drusen


def render_bscans(surfaces: np.ndarray, n_rows: int, means: np.ndarray) -> np.ndarray:
    """Partial-volume rendering: pixel row r covers [r, r+1) in 1-based coordinates.

    Returns intensities (N_A, N_B, R).
    """
    rows = np.arange(1, n_rows + 1, dtype=np.float64)
    img = np.full(surfaces.shape[1:] + (n_rows,), means[0])  # (N_B, N_A, R)
    for i in range(surfaces.shape[0]):
        frac = np.clip(rows + 1.0 - surfaces[i][..., None], 0.0, 1.0)
        img += (means[i + 1] - means[i]) * frac
    return img.transpose(1, 0, 2)


def _generate(spec: PhantomSpec):
    """One phantom: misaligned volume, aligned-frame truth and injected displacement.

    B-scan ``b`` is rendered with every surface moved ``d_b`` rows deeper. The
    layers are constant above the first and below the last surface, so this is
    the same as shifting the clean B-scan with edge replication. Speckle-like
    multiplicative noise is added afterwards. Truth in the volume's own frame is
    ``apply_displacement_to_surfaces(truth, -d)``.
    """
    rng = np.random.default_rng(spec.seed)
    n_a, n_b, n_rows = spec.shape
    surfaces, n_drusen = phantom_surfaces(spec, rng)
    d = _random_walk(rng, n_b, spec.shift_range)
    shifted = surfaces + d[None, :, None]

    lo, hi = 1 + spec.margin, n_rows - spec.margin
    for name, s in (("aligned", surfaces), ("shifted", shifted)):
        if s.min() < lo or s.max() > hi:
            raise ValueError(
                f"{name} surfaces span [{s.min():.2f}, {s.max():.2f}], outside [{lo}, {hi}]; "
                "reduce amplitude/shift_range or move mean_rows"
            )

    img = render_bscans(shifted, n_rows, spec.region_means())
    if spec.noise_sigma > 0:
        img = img * (1.0 + spec.noise_sigma * rng.normal(size=img.shape))
    img = np.clip(img, 0.0, 1.0)
    vol = OctVolume(img, DEFAULT_SPACING_UM, f"phantom-{spec.seed}")
    truth = SurfaceSet(surfaces, default_surface_names(spec.k))
    return vol, truth, DisplacementVector(d), n_drusen


def generate_phantom(spec: PhantomSpec) -> tuple[OctVolume, SurfaceSet, DisplacementVector]:
    return _generate(spec)[:3]


def spec_to_dict(spec: PhantomSpec) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(spec).items()}


def spec_from_dict(d: dict) -> PhantomSpec:
    fields = {f.name for f in dataclasses.fields(PhantomSpec)}
    unknown = set(d) - fields
    if unknown:
        raise ValueError(f"unknown phantom keys: {sorted(unknown)}")
    return PhantomSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def make_dataset(spec: PhantomSpec, n_train: int, n_test: int, out_dir) -> dict:
    """Write a train/test phantom dataset in OCTV1/SURF1 form and return its manifest.

    Case ``i`` (counting train then test) uses seed ``spec.seed + i``.
    """
    out_dir = Path(out_dir)
    splits: dict[str, list] = {"train": [], "test": []}
    injected = {}
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        sample = dataclasses.replace(spec, seed=spec.seed + i)
        vol, truth, d, n_drusen = _generate(sample)
        cid = f"{split}_{i:04d}"
        frame_truth = truth.replace(truth.positions + d.d[None, :, None])
        vpath = save_volume(vol.replace(id=cid), out_dir / split / f"{cid}.octv")
        spath = save_surfaces(frame_truth, out_dir / split / f"{cid}.surf", id=cid)
        injected[cid] = d
        splits[split].append(
            {
                "id": cid,
                "volume": str(vpath.relative_to(out_dir)),
                "surfaces": str(spath.relative_to(out_dir)),
                "seed": sample.seed,
                "tag": "AMD" if n_drusen > 0 else "normal",
                "injected_displacement": [float(x) for x in d.d],
                "sha256": {
                    "volume": file_sha256(vpath.with_suffix(".raw")),
                    "surfaces": file_sha256(spath.with_suffix(".raw")),
                },
            }
        )
    save_displacements(injected, out_dir / "injected_displacements.json")
    manifest = {
        "format": MANIFEST_FORMAT,
        "generator": "phantom",
        "phantom": spec_to_dict(spec),
        "surface_frame": "acquired",
        "splits": splits,
    }
    write_json(out_dir / "manifest.json", manifest)
    return manifest
