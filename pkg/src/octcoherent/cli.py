"""Command line entry point: ``octcoherent {synth,preprocess,train,predict,evaluate,plot,compare}``.

Exit codes: 0 success, 1 invalid input (bad flag, config key, or file), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .core import DisplacementVector
from .dataset import MANIFEST_FORMAT, Case, file_sha256, load_split, read_manifest
from .io import FormatError
from .metrics import MetricsReport, compare_runs, depth_field_export, evaluate_cases
from .model import read_checkpoint_meta
from .preprocess import estimate_bm, flatten_surface, flatten_volume, normalize_intensity
from .synth import PhantomSpec, make_dataset, spec_from_dict, spec_to_dict
from .trainer import TRAIN_MODES, config_from_dict, config_to_dict, desk_profile, paper_profile, predict_cases, train

log = logging.getLogger("octcoherent")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config plumbing -------------------------------------------------------------------


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Set ``dotted.key=value`` entries; the key's parent must already exist."""
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = config
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ValueError(f"unknown config key: {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key: {key}")
        node[parts[-1]] = parse_value(value)
    return config


def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"{path}: cannot read config ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return data


def merge_known(base: dict, update: dict, where: str = "") -> dict:
    for k, v in update.items():
        if k not in base:
            raise ValueError(f"unknown config key: {where}{k}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            merge_known(base[k], v, f"{where}{k}.")
        else:
            base[k] = v
    return base


def start_run(out: Path, command: str, resolved: dict):
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / f"{command}_config.json", resolved)
    handler = logging.FileHandler(out / f"{command}.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    logging.getLogger().setLevel(logging.INFO)


# -- subcommands -----------------------------------------------------------------------


def cmd_synth(args) -> None:
    config = {"phantom": spec_to_dict(PhantomSpec()), "n_train": 32, "n_test": 8}
    merge_known(config, load_config_file(args.config))
    apply_overrides(config, args.override)
    if args.seed is not None:
        config["phantom"]["seed"] = args.seed
    spec = spec_from_dict(config["phantom"])
    out = Path(args.out)
    start_run(out, "synth", config)
    manifest = make_dataset(spec, int(config["n_train"]), int(config["n_test"]), out)
    log.info("wrote %d train / %d test phantoms to %s", len(manifest["splits"]["train"]),
             len(manifest["splits"]["test"]), out)


def cmd_preprocess(args) -> None:
    config = {"normalize": True, "flatten": True, "target_row": None, "gradient_floor": 1e-3}
    merge_known(config, load_config_file(args.config))
    apply_overrides(config, args.override)
    src, out = Path(args.data), Path(args.out)
    manifest = read_manifest(src)
    start_run(out, "preprocess", config)
    new_splits = {}
    for split in manifest["splits"]:
        entries = []
        for case, entry in zip(load_split(src, split), manifest["splits"][split]):
            vol, truth = case.volume, case.truth
            if config["normalize"]:
                vol = normalize_intensity(vol)
            record = None
            if config["flatten"]:
                target = config["target_row"]
                if target is None:
                    target = int(round(0.75 * vol.n_rows))
                bm, flagged = estimate_bm(vol, gradient_floor=float(config["gradient_floor"]))
                if flagged.any():
                    log.warning("%s: %d A-scans without a clear BM edge, filled from neighbours",
                                case.id, int(flagged.sum()))
                vol, record = flatten_volume(vol, bm, int(target))
                truth = flatten_surface(truth, record)
            vpath = io.save_volume(vol, out / split / f"{case.id}.octv")
            spath = io.save_surfaces(truth, out / split / f"{case.id}.surf", id=case.id)
            new_entry = {k: v for k, v in entry.items() if k != "sha256"}
            new_entry.update(volume=str(vpath.relative_to(out)), surfaces=str(spath.relative_to(out)))
            if record is not None:
                rpath = record.save(out / split / f"{case.id}.flat")
                new_entry["flatten_record"] = str(rpath.relative_to(out))
            new_entry["sha256"] = {"volume": file_sha256(vpath.with_suffix(".raw")),
                                   "surfaces": file_sha256(spath.with_suffix(".raw"))}
            entries.append(new_entry)
        new_splits[split] = entries
    for name in ("injected_displacements.json",):
        if (src / name).exists():
            (out / name).write_bytes((src / name).read_bytes())
    io.write_json(out / "manifest.json", {**manifest, "format": MANIFEST_FORMAT, "splits": new_splits,
                                         "preprocess": config})


def _train_config(args):
    data = load_config_file(args.config)
    profile = args.profile or data.pop("profile", "paper")
    data.pop("profile", None)
    if profile not in ("paper", "desk"):
        raise ValueError(f"unknown profile {profile!r} (use 'paper' or 'desk')")
    base = desk_profile() if profile == "desk" else paper_profile()
    resolved = config_to_dict(base)
    merge_known(resolved, data)
    apply_overrides(resolved, args.override)
    if args.seed is not None:
        resolved["seed"] = args.seed
    return config_from_dict(resolved)


def cmd_train(args) -> None:
    cfg = _train_config(args)
    out = Path(args.out)
    start_run(out, "train", config_to_dict(cfg))
    result = train(cfg, args.data, out, split=args.split)
    log.info("best checkpoint %s, last %s", result.best, result.last)


def cmd_predict(args) -> None:
    meta = read_checkpoint_meta(args.checkpoint)
    mode = args.mode or meta.get("train_mode", "proposed")
    if mode not in TRAIN_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    table = io.load_displacements(args.displacement_file) if args.displacement_file else None
    out = Path(args.out)
    start_run(out, "predict", {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split,
                               "mode": mode, "displacement_file": args.displacement_file})
    cases = load_split(args.data, args.split)
    preds = predict_cases(args.checkpoint, cases, mode=mode, table=table)
    for cid, (surfaces, _) in preds.items():
        io.save_surfaces(surfaces, out / f"{cid}.surf", id=cid)
    io.save_displacements({cid: d for cid, (_, d) in preds.items()}, out / "displacements.json")


def load_predictions(pred_dir, cases: list[Case]) -> dict:
    pred_dir = Path(pred_dir)
    disp_path = pred_dir / "displacements.json"
    table = io.load_displacements(disp_path) if disp_path.exists() else {}
    preds = {}
    for case in cases:
        surfaces = io.load_surfaces(pred_dir / f"{case.id}.surf")
        d = table.get(case.id, DisplacementVector.zeros(case.volume.n_bscans))
        preds[case.id] = (surfaces, d)
    return preds


def cmd_evaluate(args) -> None:
    out = Path(args.out)
    run = args.run or Path(args.pred).name
    start_run(out, "evaluate", {"pred": str(args.pred), "truth": str(args.truth), "split": args.split,
                                "run": run, "window": args.window, "bins": args.bins,
                                "range": [args.hist_min, args.hist_max]})
    cases = load_split(args.truth, args.split)
    report = evaluate_cases(run, load_predictions(args.pred, cases), cases, args.window, args.bins,
                            (args.hist_min, args.hist_max))
    report.to_json(out / "report.json")
    (out / "report.csv").write_text(report.to_csv())
    (out / "histogram.csv").write_text(report.histogram_csv())
    log.info("overall MAD %.3f um, alignment MAD %.3f px, NCC %.4f", report.overall_mad_um,
             report.align_mad_px_average, report.ncc)


def cmd_plot(args) -> None:
    out = Path(args.out)
    start_run(out, "plot", {"report": str(args.report), "pred": args.pred, "surface": args.surface})
    report = MetricsReport.from_json(args.report)
    (out / "histogram.csv").write_text(report.histogram_csv())
    grids = {}
    if args.pred:
        for hdr in sorted(Path(args.pred).glob("*.surf.json")):
            cid = hdr.name.removesuffix(".surf.json")
            s = io.load_surfaces(hdr)
            grids[cid] = depth_field_export(s, args.surface, out / f"depth_{cid}.csv")
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not available; wrote CSV files only")
        return
    edges = np.asarray(report.hist_edges)
    centers = 0.5 * (edges[1:] + edges[:-1])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(centers, report.hist_counts, width=np.diff(edges), alpha=0.7, label=report.run)
    if report.truth_hist_counts:
        ax.step(centers, report.truth_hist_counts, where="mid", color="k", lw=1, label="truth (aligned)")
    ax.set_xlabel("adjacent B-scan surface distance (px)")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "histogram.png", dpi=120)
    plt.close(fig)
    for cid, grid in grids.items():
        fig, ax = plt.subplots(figsize=(4, 4))
        im = ax.imshow(grid.T, aspect="auto", cmap="viridis")
        ax.set_xlabel("B-scan")
        ax.set_ylabel("A-scan")
        fig.colorbar(im, ax=ax, label="row")
        fig.tight_layout()
        fig.savefig(out / f"depth_{cid}.png", dpi=120)
        plt.close(fig)


def cmd_compare(args) -> None:
    reports = [MetricsReport.from_json(p) for p in args.reports]
    table = compare_runs(reports)
    out = Path(args.out)
    start_run(out, "compare", {"reports": [str(p) for p in args.reports]})
    (out / "comparison.md").write_text(table.to_markdown())
    (out / "comparison.csv").write_text(table.to_csv())
    print(table.to_markdown())


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="octcoherent", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON config file")
            sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                            help="dotted-key override, value parsed as JSON when possible (repeatable)")

    sp = sub.add_parser("synth", help="generate a phantom dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="normalise and flatten a dataset to Bruch's membrane")
    common(sp)
    sp.add_argument("--data", "--in", dest="data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="train the network")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--profile", choices=("paper", "desk"))
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="run a checkpoint over a dataset split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=TRAIN_MODES, help="default: the checkpoint's training mode")
    sp.add_argument("--displacement-file", help="DISP1 table for pre_align")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="score predictions against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True, help="dataset directory with manifest.json")
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", required=True)
    sp.add_argument("--run", help="run name in the report (default: prediction directory name)")
    sp.add_argument("--window", type=int, default=9)
    sp.add_argument("--bins", type=int, default=61)
    sp.add_argument("--hist-min", type=float, default=-15.0)
    sp.add_argument("--hist-max", type=float, default=15.0)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("plot", help="histogram and depth-field figures (PNG + CSV)")
    sp.add_argument("--report", required=True)
    sp.add_argument("--pred", help="prediction directory for depth fields")
    sp.add_argument("--surface", type=int, default=-1, help="surface index for depth fields (default: deepest)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("compare", help="tabulate several evaluation reports")
    sp.add_argument("--reports", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_compare)
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
        return 0
    except (UsageError, ValueError, KeyError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        log.exception("runtime failure")
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    finally:
        for h in list(logging.getLogger().handlers):
            if isinstance(h, logging.FileHandler):
                logging.getLogger().removeHandler(h)
                h.close()


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
