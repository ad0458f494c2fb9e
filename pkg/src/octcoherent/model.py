"""Hybrid 2D-3D network for joint B-scan alignment and surface regression.

Tensor layout inside the network is ``(batch, channels, N_B, rows, cols)``: each
B-scan is a ``rows x cols`` image (``R x N_A`` at full resolution) and the
B-scan axis is never downsampled.
"""
from __future__ import annotations

import dataclasses
import json
import os
import random
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import SurfaceDistribution, SurfaceSet

MODES = ("hybrid-2d3d", "full-3d")
CHECKPOINT_FORMAT = "OCTCKPT1"


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 4
    base_channels: int = 8
    k: int = 3
    mode: str = "hybrid-2d3d"
    align_level: int = 0  # finest pyramid level decoded by the alignment branch

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.align_level < self.levels:
            raise ValueError("align_level must index a pyramid level")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level


def set_deterministic(seed: int):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


# -- differentiable building blocks -------------------------------------------------


def stm_apply(features: Tensor, d: Tensor, level: int = 0) -> Tensor:
    """Translate every B-scan slab of ``features`` along the row axis.

    ``features`` is ``(batch, C, N_B, rows, cols)`` at pyramid ``level`` and ``d``
    is ``(batch, N_B)`` in full-resolution rows, so the shift applied here is
    ``d / 2**level``: ``out[..., r, :] = features[..., r + d_b / 2**level, :]``
    with linear interpolation and edge replication. Differentiable in both
    arguments; exact for integer shifts.
    """
    b, c, n, h, w = features.shape
    shift = (d / 2**level).to(features.dtype)
    pos = torch.arange(h, dtype=features.dtype, device=features.device) + shift[..., None]
    pos = pos.clamp(0, h - 1)
    lo = pos.detach().floor()
    frac = (pos - lo)[:, None, :, :, None]
    lo = lo.long()
    hi = (lo + 1).clamp(max=h - 1)
    f_lo = features.gather(3, lo[:, None, :, :, None].expand(b, c, n, h, w))
    f_hi = features.gather(3, hi[:, None, :, :, None].expand(b, c, n, h, w))
    return f_lo + frac * (f_hi - f_lo)


def soft_argmax(q, dim: int = -1, tol: float = 1e-4):
    """Expected 1-based row index under the distribution ``q`` along ``dim``.

    Accepts a tensor or a :class:`SurfaceDistribution` (returning a raw,
    possibly unordered, :class:`SurfaceSet`).
    """
    if isinstance(q, SurfaceDistribution):
        pos = soft_argmax(torch.from_numpy(np.array(q.probs)), dim=-1, tol=tol)
        return SurfaceSet(pos.numpy())
    total = q.sum(dim=dim)
    err = (total - 1).abs().max().item()
    if err > tol:
        raise ValueError(f"distribution is not normalised (max |sum - 1| = {err:.3g})")
    n = q.shape[dim]
    rows = torch.arange(1, n + 1, dtype=q.dtype, device=q.device)
    shape = [1] * q.dim()
    shape[dim] = n
    return (q * rows.view(shape)).sum(dim=dim)


def topology_guarantee(raw, dim: int = 0):
    """Enforce surface order: ``s_1 = raw_1``, ``s_{k+1} = s_k + relu(raw_{k+1} - s_k)``."""
    if isinstance(raw, SurfaceSet):
        out = topology_guarantee(torch.from_numpy(np.array(raw.positions)), dim=0)
        return raw.replace(out.numpy())
    parts = list(raw.unbind(dim))
    out = [parts[0]]
    for nxt in parts[1:]:
        out.append(out[-1] + F.relu(nxt - out[-1]))
    return torch.stack(out, dim=dim)


# -- network modules ------------------------------------------------------------------


class PerBScan(nn.Module):
    """Apply a 2D module to every B-scan independently (shared weights)."""

    def __init__(self, module: nn.Module):
        super().__init__()
        self.module = module

    def forward(self, x: Tensor) -> Tensor:
        b, c, n, h, w = x.shape
        y = self.module(x.transpose(1, 2).reshape(b * n, c, h, w))
        return y.reshape(b, n, *y.shape[1:]).transpose(1, 2)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, dims: int):
        super().__init__()
        conv = nn.Conv2d if dims == 2 else nn.Conv3d
        norm = nn.BatchNorm2d if dims == 2 else nn.BatchNorm3d
        self.conv1 = conv(c_in, c_out, 3, padding=1, bias=False)
        self.bn1 = norm(c_out)
        self.conv2 = conv(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = norm(c_out)
        self.skip = conv(c_in, c_out, 1, bias=False) if c_in != c_out else nn.Identity()

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + self.skip(x))


class Encoder(nn.Module):
    """Contracting path; 2D per B-scan in hybrid mode, 3D in full-3d mode."""

    def __init__(self, cfg: ModelConfig, in_channels: int = 1):
        super().__init__()
        self.hybrid = cfg.mode == "hybrid-2d3d"
        blocks = []
        c_prev = in_channels
        for level in range(cfg.levels):
            c = cfg.channels(level)
            block = ResBlock(c_prev, c, dims=2 if self.hybrid else 3)
            blocks.append(PerBScan(block) if self.hybrid else block)
            c_prev = c
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for level, block in enumerate(self.blocks):
            if level > 0:
                x = F.max_pool3d(x, kernel_size=(1, 2, 2))
            x = block(x)
            feats.append(x)
        return feats


class Decoder3D(nn.Module):
    """Expansive path from the bottleneck up to ``stop_level`` with U-Net shortcuts."""

    def __init__(self, cfg: ModelConfig, stop_level: int = 0):
        super().__init__()
        self.stop_level = stop_level
        self.up = nn.ModuleDict()
        self.blocks = nn.ModuleDict()
        for level in range(cfg.levels - 2, stop_level - 1, -1):
            c = cfg.channels(level)
            self.up[str(level)] = nn.Conv3d(cfg.channels(level + 1), c, 3, padding=1)
            self.blocks[str(level)] = ResBlock(2 * c, c, dims=3)

    def forward(self, feats: list[Tensor]) -> Tensor:
        x = feats[-1]
        for level in range(len(feats) - 2, self.stop_level - 1, -1):
            x = F.interpolate(x, scale_factor=(1, 2, 2), mode="nearest")
            x = self.up[str(level)](x)
            x = self.blocks[str(level)](torch.cat([x, feats[level]], dim=1))
        return x


class AlignmentHead(nn.Module):
    """One displacement per B-scan from decoded 3D features.

    A 1x1x1 convolution scores every (row, column); averaging the scores over
    columns and taking a softmax over rows gives a per-B-scan row attention,
    whose expected row (in full-resolution pixels) goes through a shared linear
    map. The vector is mean-subtracted to fix the global-translation gauge.
    """

    def __init__(self, channels: int, level: int):
        super().__init__()
        self.level = level
        self.score = nn.Conv3d(channels, 1, 1)
        self.scale = nn.Parameter(torch.ones(()))

    def forward(self, x: Tensor) -> Tensor:
        s = self.score(x)[:, 0].mean(dim=-1)  # (batch, N_B, rows)
        attn = torch.softmax(s, dim=-1)
        step = 2**self.level
        rows = torch.arange(s.shape[-1], dtype=x.dtype, device=x.device) * step + (step - 1) / 2
        d = self.scale * (attn * rows).sum(dim=-1)
        return d - d.mean(dim=1, keepdim=True)


@dataclass
class NetworkOutput:
    displacement: Tensor  # (batch, N_B)
    surface_logits: Tensor  # (batch, K, N_B, N_A, R)
    semantic_logits: Tensor  # (batch, K+1, N_A, N_B, R)
    probs: Tensor  # softmax of surface_logits over R
    raw_surfaces: Tensor  # (batch, K, N_B, N_A), soft-argmax in the segmentation frame
    surfaces_seg: Tensor  # ordered, segmentation frame
    surfaces_aligned: Tensor  # ordered, aligned frame
    surfaces: Tensor  # ordered, input (acquired) frame
    stm_applied: bool


class HybridNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.align_decoder = Decoder3D(cfg, stop_level=cfg.align_level)
        self.align_head = AlignmentHead(cfg.channels(cfg.align_level), cfg.align_level)
        self.seg_decoder = Decoder3D(cfg, stop_level=0)
        self.surface_head = nn.Conv3d(cfg.channels(0), cfg.k, 1)
        self.semantic_head = nn.Conv3d(cfg.channels(0), cfg.k + 1, 1)

    def check_input(self, x: Tensor):
        if x.dim() != 5 or x.shape[1] != 1:
            raise ValueError(f"expected input (batch, 1, N_B, R, N_A), got {tuple(x.shape)}")
        f = 2 ** (self.cfg.levels - 1)
        if x.shape[3] % f or x.shape[4] % f:
            raise ValueError(f"rows and A-scans must be divisible by {f}, got {tuple(x.shape[3:])}")

    def forward(self, x: Tensor, align: bool = True, displacement: Tensor | None = None) -> NetworkOutput:
        """Run the full pipeline on ``x`` of shape ``(batch, 1, N_B, R, N_A)``.

        ``align=False`` disables the alignment branch. A given ``displacement``
        replaces the branch output (pre-aligned runs). Without either, d = 0.
        """
        self.check_input(x)
        feats = self.encoder(x)
        if displacement is not None:
            d = displacement.to(x.dtype)
        elif align:
            d = self.align_head(self.align_decoder(feats))
        else:
            d = x.new_zeros(x.shape[0], x.shape[2])

        use_stm = self.cfg.mode == "hybrid-2d3d" and (align or displacement is not None)
        if use_stm:
            feats = [stm_apply(f, d, level) for level, f in enumerate(feats)]
        y = self.seg_decoder(feats)

        surface_logits = self.surface_head(y).permute(0, 1, 2, 4, 3)
        semantic_logits = self.semantic_head(y).permute(0, 1, 4, 2, 3)
        probs = torch.softmax(surface_logits, dim=-1)
        raw = soft_argmax(probs, dim=-1)
        ordered = topology_guarantee(raw, dim=1)
        shift = d[:, None, :, None]
        if use_stm:
            aligned, acquired = ordered, ordered + shift
        else:
            aligned, acquired = ordered - shift.detach(), ordered
        return NetworkOutput(d, surface_logits, semantic_logits, probs, raw, ordered, aligned, acquired, use_stm)


# -- checkpoints ----------------------------------------------------------------------


def save_checkpoint(model: HybridNet, path, extra: dict | None = None) -> Path:
    """Directory checkpoint: ``config.json`` plus ``weights.npz``.

    ``weights.npz`` holds one array per ``state_dict`` key (e.g.
    ``encoder.blocks.0.module.conv1.weight``). The directory is written under a
    temporary name and renamed into place.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    meta = {"format": CHECKPOINT_FORMAT, "model": dataclasses.asdict(model.cfg), **(extra or {})}
    (tmp / "config.json").write_text(json.dumps(meta, indent=2) + "\n")
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(tmp / "weights.npz", **state)
    old = path.with_name(path.name + ".old")
    if path.exists():
        os.replace(path, old)
    os.replace(tmp, path)
    if old.exists():
        shutil.rmtree(old)
    return path


def read_checkpoint_meta(path) -> dict:
    meta = json.loads((Path(path) / "config.json").read_text())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} checkpoint")
    return meta


def load_checkpoint(path, expected: ModelConfig | None = None) -> HybridNet:
    path = Path(path)
    meta = read_checkpoint_meta(path)
    cfg = ModelConfig(**meta["model"])
    if expected is not None and expected != cfg:
        diffs = [
            f"{f.name}: checkpoint={getattr(cfg, f.name)!r} expected={getattr(expected, f.name)!r}"
            for f in dataclasses.fields(ModelConfig)
            if getattr(cfg, f.name) != getattr(expected, f.name)
        ]
        raise ValueError(f"{path}: model config mismatch ({'; '.join(diffs)})")
    model = HybridNet(cfg)
    with np.load(path / "weights.npz") as data:
        state = {k: torch.from_numpy(data[k]) for k in data.files}
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise ValueError(f"{path}: weight names do not match config ({sorted(missing)[:5]} ...)")
    model.load_state_dict(state)
    model.eval()
    return model
