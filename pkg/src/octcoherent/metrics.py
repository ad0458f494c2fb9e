"""Evaluation metrics, report serialisation and run comparison tables."""
from __future__ import annotations

import csv
import io as _io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import DisplacementVector, OctVolume, SurfaceSet, apply_displacement_to_surfaces
from .dataset import Case
from .losses import loss_local_ncc

HIST_BINS = 61
HIST_RANGE = (-15.0, 15.0)


def metric_mad(pred: SurfaceSet, truth: SurfaceSet, spacing_um: float = 3.24) -> dict[str, np.ndarray]:
    """Per-surface mean |pred - truth| over (b, a), in pixels and micrometres.

    Missing (NaN) truth entries are skipped.
    """
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    err = np.abs(pred.positions - truth.positions)
    px = np.nanmean(err.reshape(err.shape[0], -1), axis=1)
    return {"px": px, "um": px * spacing_um}


def metric_alignment_mad(truth: SurfaceSet, d: DisplacementVector) -> np.ndarray:
    """Per-surface mean |(r_b - d_b) - (r_{b+1} - d_{b+1})| over adjacent B-scan pairs."""
    corrected = apply_displacement_to_surfaces(truth, d).positions
    diff = np.abs(np.diff(corrected, axis=1))
    return np.nanmean(diff.reshape(diff.shape[0], -1), axis=1)


def metric_ncc_volume(v: OctVolume, d: DisplacementVector, window: int = 9) -> float:
    """Mean local NCC between adjacent B-scans after alignment (higher is better)."""
    x = torch.from_numpy(np.ascontiguousarray(np.transpose(v.intensities, (1, 2, 0)))).double()[None, None]
    dt = torch.from_numpy(np.array(d.d, dtype=np.float64))[None]
    return float(-loss_local_ncc(x, dt, window))


def adjacent_differences(s: SurfaceSet) -> np.ndarray:
    """``s[k, b+1, a] - s[k, b, a]`` for every k, b, a."""
    return np.diff(s.positions, axis=1)


def connectivity_histogram(s: SurfaceSet, bins: int = HIST_BINS, range_: tuple[float, float] = HIST_RANGE):
    """Histogram of adjacent-B-scan surface differences; outliers go to the end bins."""
    diffs = adjacent_differences(s).ravel()
    diffs = diffs[np.isfinite(diffs)]
    edges = np.linspace(range_[0], range_[1], bins + 1)
    counts, _ = np.histogram(np.clip(diffs, range_[0], range_[1]), bins=edges)
    return edges, counts


def central_bin_mass(edges: np.ndarray, counts: np.ndarray) -> float:
    i = int(np.searchsorted(edges, 0.0, side="right") - 1)
    total = counts.sum()
    return float(counts[i] / total) if total else 0.0


def depth_field_export(s: SurfaceSet, index: int, csv_path=None) -> np.ndarray:
    """Surface ``index`` as an (N_B, N_A) grid, optionally written as CSV."""
    grid = np.array(s.positions[index])
    if csv_path is not None:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(csv_path, grid, delimiter=",", fmt="%.4f")
    return grid


@dataclass
class MetricsReport:
    run: str
    surfaces: list[str]
    spacing_um: float
    n_cases: int
    seg_mad_px: list[float]  # per surface, mean over cases
    seg_mad_px_std: list[float]  # per surface, std across cases
    seg_mad_um: list[float]
    seg_mad_um_std: list[float]
    overall_mad_um: float
    overall_mad_um_std: float
    by_tag: dict[str, dict[str, list[float]]] = field(default_factory=dict)  # tag -> {"mean_um", "std_um"}
    align_mad_px: list[float] = field(default_factory=list)
    align_mad_px_average: float = 0.0
    ncc: float = 0.0
    hist_edges: list[float] = field(default_factory=list)
    hist_counts: list[int] = field(default_factory=list)
    truth_hist_counts: list[int] = field(default_factory=list)
    mean_abs_adjacent_diff: float = 0.0
    central_bin_mass: float = 0.0
    displacement_mad_px: float | None = None
    per_case: list[dict] = field(default_factory=list)

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2) + "\n"
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, path) -> "MetricsReport":
        return cls(**json.loads(Path(path).read_text()))

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf)
        w.writerow(["surface", "seg_mad_px", "seg_mad_px_std", "seg_mad_um", "seg_mad_um_std", "align_mad_px"])
        for i, name in enumerate(self.surfaces):
            align = self.align_mad_px[i] if self.align_mad_px else ""
            w.writerow([name, self.seg_mad_px[i], self.seg_mad_px_std[i], self.seg_mad_um[i],
                        self.seg_mad_um_std[i], align])
        return buf.getvalue()

    def histogram_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf)
        w.writerow(["bin_lo", "bin_hi", "count", "truth_count"])
        truth = self.truth_hist_counts or [""] * len(self.hist_counts)
        for lo, hi, c, t in zip(self.hist_edges[:-1], self.hist_edges[1:], self.hist_counts, truth):
            w.writerow([lo, hi, c, t])
        return buf.getvalue()


def evaluate_cases(
    run: str,
    preds: dict[str, tuple[SurfaceSet, DisplacementVector]],
    cases: list[Case],
    ncc_window: int = 9,
    bins: int = HIST_BINS,
    range_: tuple[float, float] = HIST_RANGE,
) -> MetricsReport:
    """Score predictions (acquired frame + displacement) against ground truth.

    Alignment MAD and NCC use the run's displacement; the connectivity
    histogram is taken over predictions moved into the aligned frame.
    """
    if not cases:
        raise ValueError("no cases to evaluate")
    names = list(cases[0].truth.names)
    spacing = cases[0].volume.spacing[0]
    per_case_px, align_rows, nccs, diffs, truth_diffs, disp_mads, per_case = [], [], [], [], [], [], []
    for case in cases:
        if case.id not in preds:
            raise KeyError(f"no prediction for case {case.id}")
        pred, d = preds[case.id]
        mad = metric_mad(pred, case.truth, spacing)
        per_case_px.append(mad["px"])
        align = metric_alignment_mad(case.truth, d)
        align_rows.append(align)
        ncc = metric_ncc_volume(case.volume, d, ncc_window)
        nccs.append(ncc)
        aligned_pred = apply_displacement_to_surfaces(pred, d)
        diffs.append(adjacent_differences(aligned_pred).ravel())
        truth_diffs.append(adjacent_differences(apply_displacement_to_surfaces(case.truth, d)).ravel())
        entry = {"id": case.id, "tag": case.tag, "mad_px": mad["px"].tolist(), "align_mad_px": align.tolist(),
                 "ncc": ncc}
        if case.injected is not None:
            inj = case.injected.d - case.injected.d.mean()
            rec = d.d - d.d.mean()
            entry["displacement_mad_px"] = float(np.mean(np.abs(rec - inj)))
            disp_mads.append(entry["displacement_mad_px"])
        per_case.append(entry)

    px = np.array(per_case_px)  # (cases, K)
    um = px * spacing
    by_tag = {}
    for tag in sorted({c.tag for c in cases if c.tag}):
        sel = np.array([c.tag == tag for c in cases])
        by_tag[tag] = {"mean_um": um[sel].mean(axis=0).tolist(), "std_um": um[sel].std(axis=0).tolist()}

    all_diffs = np.concatenate(diffs)
    edges = np.linspace(range_[0], range_[1], bins + 1)
    counts, _ = np.histogram(np.clip(all_diffs[np.isfinite(all_diffs)], *range_), bins=edges)
    truth_all = np.concatenate(truth_diffs)
    truth_counts, _ = np.histogram(np.clip(truth_all[np.isfinite(truth_all)], *range_), bins=edges)
    align_arr = np.array(align_rows)
    return MetricsReport(
        run=run,
        surfaces=names,
        spacing_um=spacing,
        n_cases=len(cases),
        seg_mad_px=px.mean(axis=0).tolist(),
        seg_mad_px_std=px.std(axis=0).tolist(),
        seg_mad_um=um.mean(axis=0).tolist(),
        seg_mad_um_std=um.std(axis=0).tolist(),
        overall_mad_um=float(um.mean()),
        overall_mad_um_std=float(um.std()),
        by_tag=by_tag,
        align_mad_px=align_arr.mean(axis=0).tolist(),
        align_mad_px_average=float(align_arr.mean()),
        ncc=float(np.mean(nccs)),
        hist_edges=edges.tolist(),
        hist_counts=counts.tolist(),
        truth_hist_counts=truth_counts.tolist(),
        mean_abs_adjacent_diff=float(np.nanmean(np.abs(all_diffs))),
        central_bin_mass=central_bin_mass(edges, counts),
        displacement_mad_px=float(np.mean(disp_mads)) if disp_mads else None,
        per_case=per_case,
    )


@dataclass
class Comparison:
    runs: list[str]
    segmentation: list[list[str]]  # rows of [label, cell per run]
    alignment: list[list[str]]  # rows of [run, per-surface MAD..., average, NCC]
    alignment_header: list[str]

    def to_markdown(self) -> str:
        lines = ["| Surface | " + " | ".join(self.runs) + " |", "|---" * (len(self.runs) + 1) + "|"]
        lines += ["| " + " | ".join(row) + " |" for row in self.segmentation]
        lines += ["", "| " + " | ".join(self.alignment_header) + " |", "|---" * len(self.alignment_header) + "|"]
        lines += ["| " + " | ".join(row) + " |" for row in self.alignment]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf)
        w.writerow(["Surface", *self.runs])
        w.writerows(self.segmentation)
        w.writerow([])
        w.writerow(self.alignment_header)
        w.writerows(self.alignment)
        return buf.getvalue()


def _pm(mean: float, std: float) -> str:
    return f"{mean:.2f}±{std:.2f}"


def compare_runs(reports: list[MetricsReport]) -> Comparison:
    """Segmentation MAD table (surface [x tag] rows, one column per run, then Overall)
    and an alignment table (one row per run: per-surface MAD, average, NCC)."""
    if not reports:
        raise ValueError("no reports to compare")
    names = reports[0].surfaces
    for r in reports[1:]:
        if r.surfaces != names:
            raise ValueError(f"run {r.run!r} has surfaces {r.surfaces}, expected {names}")
    tags = sorted({t for r in reports for t in r.by_tag})
    seg_rows = []
    for i, name in enumerate(names):
        if tags:
            for tag in tags:
                row = [f"{name} ({tag})"]
                for r in reports:
                    t = r.by_tag.get(tag)
                    row.append(_pm(t["mean_um"][i], t["std_um"][i]) if t else "n/a")
                seg_rows.append(row)
        else:
            seg_rows.append([name] + [_pm(r.seg_mad_um[i], r.seg_mad_um_std[i]) for r in reports])
    seg_rows.append(["Overall"] + [_pm(r.overall_mad_um, r.overall_mad_um_std) for r in reports])
    header = ["Method"] + [f"{n} (MAD)" for n in names] + ["Average (MAD)", "NCC"]
    align_rows = [
        [r.run] + [f"{x:.2f}" for x in r.align_mad_px] + [f"{r.align_mad_px_average:.2f}", f"{r.ncc:.4f}"]
        for r in reports
    ]
    return Comparison([r.run for r in reports], seg_rows, align_rows, header)
