"""End-to-end training, the ablation switches, and inference on whole volumes."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import DisplacementVector, OctVolume, SurfaceSet
from .dataset import Case, load_split
from .io import load_displacements, write_json
from .losses import LossWeights, compute_losses
from .model import HybridNet, ModelConfig, load_checkpoint, save_checkpoint, set_deterministic
from .preprocess import extract_patches

log = logging.getLogger(__name__)

TRAIN_MODES = ("proposed", "no_align", "pre_align", "no_smooth", "full-3d")
LOG_COLUMNS = (
    "epoch", "lr", "total", "align", "ncc", "smooth_a", "seg", "dice", "voxel_ce", "ce", "l1", "smooth_s", "wall_time",
)
DEVICE_ENV = "OCTCOHERENT_DEVICE"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    lr: float = 1e-3
    plateau_patience: int = 10
    lr_factor: float = 0.5
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 9
    patch_shape: tuple[int, int, int] = (320, 400, 40)  # rows, A-scans, B-scans
    patches_per_case: int = 1
    lambdas: tuple[float, ...] = (0.0, 0.3, 0.5)
    reduction: str = "mean"
    ncc_window: int = 9
    mode: str = "proposed"
    displacement_file: str | None = None
    monitor: str = "total"
    seed: int = 0
    deterministic: bool = True
    model: ModelConfig = field(default_factory=lambda: ModelConfig(base_channels=32))

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patches_per_case < 1:
            raise ValueError("epochs, batch_size and patches_per_case must be positive")
        if self.lr <= 0 or not 0 < self.lr_factor < 1 or self.plateau_patience < 1:
            raise ValueError("need lr > 0, 0 < lr_factor < 1, plateau_patience >= 1")
        if min(self.patch_shape) < 1:
            raise ValueError("patch_shape entries must be positive")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.mode == "pre_align" and not self.displacement_file:
            raise ValueError("mode pre_align requires displacement_file")
        if self.mode == "full-3d" and self.model.mode != "full-3d":
            object.__setattr__(self, "model", dataclasses.replace(self.model, mode="full-3d"))
        if self.mode != "full-3d" and self.model.mode == "full-3d":
            raise ValueError("model.mode full-3d requires mode=full-3d")
        if len(self.lambdas) != self.model.k:
            raise ValueError(f"{len(self.lambdas)} lambdas for k={self.model.k} surfaces")
        if self.monitor not in LOG_COLUMNS[2:-1]:
            raise ValueError(f"monitor must be a logged loss column, got {self.monitor!r}")

    @property
    def align_branch(self) -> bool:
        return self.mode not in ("no_align", "pre_align")

    def loss_weights(self) -> LossWeights:
        lambdas = tuple(0.0 for _ in self.lambdas) if self.mode == "no_smooth" else self.lambdas
        return LossWeights(lambdas, self.reduction, self.ncc_window)


def paper_profile(**overrides) -> TrainConfig:
    """Full-scale settings: 320x400x40 patches, batch 9, 120 epochs."""
    return TrainConfig(**overrides)


def desk_profile(**overrides) -> TrainConfig:
    """CPU-sized settings for 128x12x96 phantoms."""
    base = dict(
        epochs=30,
        batch_size=2,
        patch_shape=(96, 64, 12),
        model=ModelConfig(levels=4, base_channels=8, align_level=1),
    )
    base.update(overrides)
    return TrainConfig(**base)


class PlateauHalver:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, patience: int = 10, factor: float = 0.5):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def device() -> torch.device:
    return torch.device(os.environ.get(DEVICE_ENV, "cpu"))


def volume_tensor(intensities: np.ndarray) -> torch.Tensor:
    """(N_A, N_B, R) array -> (1, N_B, R, N_A) tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.transpose(intensities, (1, 2, 0)))).float()[None]


@dataclass
class TrainResult:
    best: Path
    last: Path
    history: list[dict]


def _batches(cases: list[Case], cfg: TrainConfig, rng: np.random.Generator, table):
    order = rng.permutation(len(cases))
    patches = []
    for i in order:
        case = cases[i]
        d = table.get(case.id) if table else None
        patches.extend(
            extract_patches(case.volume, case.truth, cfg.patch_shape, mode="random", rng=rng,
                            n=cfg.patches_per_case, d=d)
        )
    for start in range(0, len(patches), cfg.batch_size):
        chunk = patches[start : start + cfg.batch_size]
        x = torch.stack([volume_tensor(p.volume) for p in chunk])
        truth = torch.from_numpy(np.stack([p.truth for p in chunk])).float()
        mask = torch.from_numpy(np.stack([p.mask for p in chunk]))
        disp = None
        if table:
            dd = np.stack([p.displacement - p.displacement.mean() for p in chunk])
            disp = torch.from_numpy(dd).float()
        yield x, truth, mask, disp


def _dump_batch(out_dir: Path, epoch: int, x, truth, mask, losses):
    path = out_dir / f"diverged_epoch{epoch:03d}.npz"
    np.savez(path, x=x.numpy(), truth=truth.numpy(), mask=mask.numpy(),
             **{k: np.asarray(v.detach().item()) for k, v in losses.items()})
    return path


def train(cfg: TrainConfig, data_dir, out_dir, split: str = "train", cases: list[Case] | None = None) -> TrainResult:
    """Train on ``split`` of the dataset at ``data_dir``; write logs/checkpoints to ``out_dir``.

    ``out_dir`` receives ``config.json``, ``train_log.csv``, and the ``best`` and
    ``last`` checkpoint directories.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "config.json", config_to_dict(cfg))
    if cfg.deterministic:
        set_deterministic(cfg.seed)
    else:
        torch.manual_seed(cfg.seed)
    dev = device()
    if cases is None:
        cases = load_split(data_dir, split)
    if not cases:
        raise ValueError(f"no training cases in split {split!r}")
    table = load_displacements(cfg.displacement_file) if cfg.mode == "pre_align" else None
    if table is not None:
        missing = [c.id for c in cases if c.id not in table]
        if missing:
            raise ValueError(f"{cfg.displacement_file}: no displacement for cases {missing[:5]}")

    model = HybridNet(cfg.model).to(dev)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)
    sched = PlateauHalver(cfg.lr, cfg.plateau_patience, cfg.lr_factor)
    weights = cfg.loss_weights()
    best_loss = math.inf
    history = []
    log_path = out_dir / "train_log.csv"
    t0 = time.time()
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for epoch in range(1, cfg.epochs + 1):
            lr = sched.lr
            for group in opt.param_groups:
                group["lr"] = lr
            model.train()
            rng = np.random.default_rng([cfg.seed, epoch])
            sums: dict[str, float] = {}
            n_batches = 0
            for x, truth, mask, disp in _batches(cases, cfg, rng, table):
                x, truth, mask = x.to(dev), truth.to(dev), mask.to(dev)
                if disp is not None:
                    disp = disp.to(dev)
                out = model(x, align=cfg.align_branch, displacement=disp)
                losses = compute_losses(out, x, truth, mask, weights, align_active=cfg.align_branch)
                if not torch.isfinite(losses["total"]):
                    dump = _dump_batch(out_dir, epoch, x.cpu(), truth.cpu(), mask.cpu(), losses)
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}: "
                        + ", ".join(f"{k}={v.item():.4g}" for k, v in losses.items())
                        + f"; batch saved to {dump}"
                    )
                opt.zero_grad(set_to_none=True)
                losses["total"].backward()
                opt.step()
                for k, v in losses.items():
                    sums[k] = sums.get(k, 0.0) + float(v.detach())
                n_batches += 1
            row = {k: sums[k] / n_batches for k in LOG_COLUMNS[2:-1]}
            row.update(epoch=epoch, lr=lr, wall_time=round(time.time() - t0, 3))
            writer.writerow(row)
            fh.flush()
            history.append(row)
            monitored = row[cfg.monitor]
            log.info("epoch %d lr %.3g total %.4f", epoch, lr, row["total"])
            if monitored < best_loss:
                best_loss = monitored
                save_checkpoint(model, out_dir / "best", {"epoch": epoch, "monitor": cfg.monitor,
                                                          "value": monitored, "train_mode": cfg.mode})
            sched.step(monitored)
    last = save_checkpoint(model, out_dir / "last", {"epoch": cfg.epochs, "train_mode": cfg.mode})
    return TrainResult(out_dir / "best", last, history)


# -- inference ------------------------------------------------------------------------


def _pad_to(x: np.ndarray, multiple: int, axes) -> np.ndarray:
    pad = [(0, 0)] * x.ndim
    for ax in axes:
        pad[ax] = (0, (-x.shape[ax]) % multiple)
    return np.pad(x, pad, mode="edge")


@torch.no_grad()
def predict_volume(
    model: HybridNet,
    vol: OctVolume,
    align: bool = True,
    displacement: DisplacementVector | None = None,
) -> tuple[SurfaceSet, DisplacementVector]:
    """Surfaces in the volume's own frame and the displacement used.

    Rows and A-scans are edge-padded to the network's size multiple and the
    result cropped back.
    """
    model.eval()
    dev = next(model.parameters()).device
    f = 2 ** (model.cfg.levels - 1)
    x = _pad_to(vol.intensities, f, axes=(0, 2))
    xt = volume_tensor(x)[None].to(dev)
    disp = None
    if displacement is not None:
        dd = displacement.d - displacement.d.mean()
        disp = torch.from_numpy(dd).float()[None].to(dev)
    out = model(xt, align=align, displacement=disp)
    pos = out.surfaces[0, :, :, : vol.n_ascans].double().cpu().numpy()
    pos = np.clip(pos, 1, vol.n_rows)
    d = out.displacement[0].double().cpu().numpy()
    return SurfaceSet(pos), DisplacementVector(d)


def predict_cases(checkpoint, cases: list[Case], mode: str = "proposed", table=None) -> dict:
    """Run a checkpoint over cases; returns ``{case_id: (SurfaceSet, DisplacementVector)}``."""
    model = load_checkpoint(checkpoint).to(device())
    results = {}
    for case in cases:
        disp = None
        if mode == "pre_align":
            if table is None or case.id not in table:
                raise ValueError(f"pre_align prediction needs a displacement for {case.id}")
            disp = table[case.id]
        surfaces, d = predict_volume(model, case.volume, align=mode not in ("no_align", "pre_align"),
                                     displacement=disp)
        results[case.id] = (SurfaceSet(surfaces.positions, case.truth.names), d)
    return results


# -- config (de)serialisation ----------------------------------------------------------


def config_to_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)

    def lists(v):
        if isinstance(v, dict):
            return {k: lists(x) for k, x in v.items()}
        if isinstance(v, tuple):
            return list(v)
        return v

    return lists(d)


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(where + k for k in unknown))}")
    kwargs = {}
    for k, v in data.items():
        if k == "model" and cls is TrainConfig:
            v = _build(ModelConfig, v, where + "model.") if isinstance(v, dict) else v
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


def config_from_dict(data: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Build a TrainConfig from nested JSON-style data, starting from ``base``."""
    merged = config_to_dict(base) if base is not None else {}
    for k, v in data.items():
        if k == "model" and isinstance(v, dict) and "model" in merged:
            merged["model"] = {**merged["model"], **v}
        else:
            merged[k] = v
    return _build(TrainConfig, merged, "")
