"""Desk-scale synthetic experiment: phantoms, the proposed model, and the ablations.

Everything is written below one output directory::

    out/data/                phantom dataset (train + test)
    out/runs/<name>/         training outputs per run
    out/pred/<name>/         test-set predictions per run
    out/reports/<name>.json  MetricsReport per run
    out/comparison.{md,csv}  side-by-side tables

Finished steps are skipped when their outputs already exist, so an interrupted
experiment can be resumed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import io
from .dataset import load_split
from .metrics import MetricsReport, compare_runs, evaluate_cases
from .synth import PhantomSpec, make_dataset
from .trainer import desk_profile, predict_cases, train

log = logging.getLogger(__name__)

ABLATIONS = ("no_align", "pre_align", "full-3d")


@dataclass
class ExperimentConfig:
    n_train: int = 32
    n_test: int = 8
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    epochs: int = 30  # proposed and no_smooth runs
    ablation_epochs: int = 10
    ablations: tuple[str, ...] = ABLATIONS
    seed: int = 0


def _run(name: str, mode: str, epochs: int, cfg: ExperimentConfig, root: Path, data: Path) -> MetricsReport:
    report_path = root / "reports" / f"{name}.json"
    if report_path.exists():
        return MetricsReport.from_json(report_path)
    table_path = data / "injected_displacements.json"
    extra = {"displacement_file": str(table_path)} if mode == "pre_align" else {}
    run_dir = root / "runs" / name
    if not (run_dir / "last" / "weights.npz").exists():
        log.info("training %s (%d epochs)", name, epochs)
        train(desk_profile(mode=mode, epochs=epochs, seed=cfg.seed, **extra), data, run_dir)
    cases = load_split(data, "test")
    table = io.load_displacements(table_path) if mode == "pre_align" else None
    preds = predict_cases(run_dir / "best", cases, mode=mode, table=table)
    pred_dir = root / "pred" / name
    for cid, (surfaces, _) in preds.items():
        io.save_surfaces(surfaces, pred_dir / f"{cid}.surf", id=cid)
    io.save_displacements({cid: d for cid, (_, d) in preds.items()}, pred_dir / "displacements.json")
    report = evaluate_cases(name, preds, cases)
    report.to_json(report_path)
    return report


def run_experiment(out_dir, cfg: ExperimentConfig | None = None, runs: tuple[str, ...] | None = None) -> dict:
    """Run (or resume) the experiment; returns ``{run name: MetricsReport}``.

    ``runs`` restricts which runs are executed (default: proposed, no_smooth
    and every configured ablation).
    """
    cfg = cfg or ExperimentConfig()
    root = Path(out_dir)
    data = root / "data"
    if not (data / "manifest.json").exists():
        log.info("writing %d/%d phantoms to %s", cfg.n_train, cfg.n_test, data)
        make_dataset(cfg.phantom, cfg.n_train, cfg.n_test, data)
    plan = [("proposed", "proposed", cfg.epochs), ("no_smooth", "no_smooth", cfg.epochs)]
    plan += [(m, m, cfg.ablation_epochs) for m in cfg.ablations]
    if runs is not None:
        plan = [p for p in plan if p[0] in runs]
    reports = {name: _run(name, mode, epochs, cfg, root, data) for name, mode, epochs in plan}
    if reports:
        table = compare_runs(list(reports.values()))
        (root / "comparison.md").write_text(table.to_markdown())
        (root / "comparison.csv").write_text(table.to_csv())
    return reports
