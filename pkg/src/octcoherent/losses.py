"""Training objectives.

All functions take batched tensors:

* volume ``x``: ``(batch, 1, N_B, R, N_A)``
* displacement ``d``: ``(batch, N_B)``
* surfaces / truth / mask: ``(batch, K, N_B, N_A)``, 1-based rows
* surface probabilities ``q``: ``(batch, K, N_B, N_A, R)``
* semantic logits: ``(batch, K+1, N_A, N_B, R)``, labels ``(batch, N_A, N_B, R)``

``reduction="sum"`` sums over every valid term; ``"mean"`` divides that sum by
the number of valid terms.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .model import NetworkOutput, stm_apply

NCC_EPS = 1e-5
DICE_EPS = 1e-5
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambdas: tuple[float, ...] = (0.0, 0.3, 0.5)  # SmoothS weight per surface (ILM, IRPE, OBM)
    reduction: str = "mean"
    ncc_window: int = 9

    def __post_init__(self):
        if any(l < 0 for l in self.lambdas):
            raise ValueError("lambdas must be >= 0")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")
        if self.ncc_window < 1 or self.ncc_window % 2 == 0:
            raise ValueError("ncc_window must be a positive odd integer")


def _reduce(total: Tensor, count, reduction: str) -> Tensor:
    if reduction == "sum":
        return total
    return total / max(float(count), 1.0)


def _full_mask(like: Tensor, mask: Tensor | None) -> Tensor:
    return torch.ones_like(like, dtype=torch.bool) if mask is None else mask.bool()


def local_ncc_map(i: Tensor, j: Tensor, window: int = 9, eps: float = NCC_EPS) -> Tensor:
    """Windowed NCC between image batches ``(n, 1, H, W)``, one value per pixel.

    Window sums use edge-replicated padding. ``cross / sqrt(var_i * var_j + eps)`` with the
    centred sums of the window, so the value lies in [-1, 1] and a flat window
    contributes 0.
    """
    kernel = torch.ones(1, 1, window, window, dtype=i.dtype, device=i.device)
    pad = window // 2
    size = float(window * window)

    def box(t):
        return F.conv2d(F.pad(t, (pad, pad, pad, pad), mode="replicate"), kernel)

    i_sum, j_sum = box(i), box(j)
    i2_sum, j2_sum, ij_sum = box(i * i), box(j * j), box(i * j)
    u_i, u_j = i_sum / size, j_sum / size
    cross = ij_sum - u_j * i_sum - u_i * j_sum + u_i * u_j * size
    var_i = (i2_sum - 2 * u_i * i_sum + u_i * u_i * size).clamp_min(0)
    var_j = (j2_sum - 2 * u_j * j_sum + u_j * u_j * size).clamp_min(0)
    return cross / torch.sqrt(var_i * var_j + eps)


def loss_local_ncc(x: Tensor, d: Tensor, window: int = 9, eps: float = NCC_EPS) -> Tensor:
    """Negative mean local NCC between adjacent B-scans after warping by ``d``."""
    b, c, n, h, w = x.shape
    if n < 2:
        raise ValueError("need at least two B-scans")
    if window > h or window > w:
        raise ValueError(f"NCC window {window} larger than B-scan {h}x{w}")
    warped = stm_apply(x, d, level=0)
    first = warped[:, :, :-1].transpose(1, 2).reshape(-1, c, h, w)
    second = warped[:, :, 1:].transpose(1, 2).reshape(-1, c, h, w)
    return -local_ncc_map(first, second, window, eps).mean()


def loss_smooth_align(truth: Tensor, d: Tensor, mask: Tensor | None = None, reduction: str = "mean") -> Tensor:
    """Squared change of displacement-corrected truth between adjacent B-scans."""
    mask = _full_mask(truth, mask)
    corrected = truth - d[:, None, :, None]
    diff = corrected[:, :, :-1] - corrected[:, :, 1:]
    valid = mask[:, :, :-1] & mask[:, :, 1:]
    diff = torch.where(valid, diff, torch.zeros_like(diff))
    return _reduce((diff * diff).sum(), valid.sum().item(), reduction)


def loss_align(x, truth, d, mask=None, window: int = 9, reduction: str = "mean") -> Tensor:
    return loss_local_ncc(x, d, window) + loss_smooth_align(truth, d, mask, reduction)


def loss_ce_surface(q: Tensor, truth: Tensor, mask: Tensor | None = None, reduction: str = "mean") -> Tensor:
    """Negative log-probability of the (rounded half-up) true row."""
    n_rows = q.shape[-1]
    mask = _full_mask(truth, mask)
    idx = (torch.floor(truth.detach() + 0.5).clamp(1, n_rows) - 1).long()
    logp = torch.log(q.clamp_min(LOG_FLOOR)).gather(-1, idx[..., None])[..., 0]
    nll = torch.where(mask, -logp, torch.zeros_like(logp))
    return _reduce(nll.sum(), mask.sum().item(), reduction)


def smooth_l1(t: Tensor) -> Tensor:
    a = t.abs()
    return torch.where(a < 1, 0.5 * t * t, a - 0.5)


def loss_smooth_l1(pred: Tensor, truth: Tensor, mask: Tensor | None = None, reduction: str = "mean") -> Tensor:
    mask = _full_mask(truth, mask)
    err = smooth_l1(pred - truth)
    err = torch.where(mask, err, torch.zeros_like(err))
    return _reduce(err.sum(), mask.sum().item(), reduction)


def loss_smooth_surface(pred: Tensor, reduction: str = "mean") -> Tensor:
    """Per-surface sum of squared forward differences along A-scans and B-scans.

    ``pred`` is ``(batch, K, N_B, N_A)`` (or ``(K, N_B, N_A)``); returns ``(K,)``.
    """
    if pred.dim() == 3:
        pred = pred[None]
    da = pred[..., :, 1:] - pred[..., :, :-1]
    db = pred[..., 1:, :] - pred[..., :-1, :]
    per_k = (da * da).sum(dim=(0, 2, 3)) + (db * db).sum(dim=(0, 2, 3))
    count = pred.shape[0] * (da[0, 0].numel() + db[0, 0].numel())
    return per_k if reduction == "sum" else per_k / count


def labels_from_surfaces(truth: Tensor, n_rows: int) -> Tensor:
    """Region labels ``(batch, N_A, N_B, R)``: count of surfaces with round(pos) <= r."""
    rows = torch.arange(1, n_rows + 1, dtype=truth.dtype, device=truth.device)
    boundary = torch.floor(truth.detach() + 0.5)  # (batch, K, N_B, N_A)
    below = boundary.permute(0, 3, 2, 1)[..., None, :] <= rows[:, None]
    return below.sum(dim=-1)


def loss_dice_ce(logits: Tensor, labels: Tensor, parts: bool = False):
    """``(1 - mean soft Dice over classes) + voxel cross-entropy``."""
    n_cls = logits.shape[1]
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(labels.long(), n_cls).movedim(-1, 1).to(probs.dtype)
    dims = [0] + list(range(2, logits.dim()))
    inter = (probs * onehot).sum(dim=dims)
    denom = probs.sum(dim=dims) + onehot.sum(dim=dims)
    dice = (2 * inter + DICE_EPS) / (denom + DICE_EPS)
    dice_term = 1 - dice.mean()
    ce_term = F.cross_entropy(logits, labels.long())
    if parts:
        return dice_term, ce_term
    return dice_term + ce_term


def compute_losses(
    out: NetworkOutput,
    x: Tensor,
    truth: Tensor,
    mask: Tensor | None,
    weights: LossWeights,
    align_active: bool = True,
) -> dict[str, Tensor]:
    """Every loss component plus ``align``, ``seg`` and ``total``.

    ``smooth_s`` is already weighted by the per-surface lambdas.
    """
    mask = _full_mask(truth, mask)
    d = out.displacement
    zero = x.new_zeros(())
    red = weights.reduction
    if align_active:
        ncc = loss_local_ncc(x, d, weights.ncc_window)
        smooth_a = loss_smooth_align(truth, d, mask, red)
    else:
        ncc, smooth_a = zero, zero

    n_rows = x.shape[3]
    if out.stm_applied:
        truth_seg = truth - d.detach()[:, None, :, None]
        mask_seg = mask & (truth_seg >= 1) & (truth_seg <= n_rows)
    else:
        truth_seg, mask_seg = truth, mask
    ce = loss_ce_surface(out.probs, truth_seg, mask_seg, red)
    l1 = loss_smooth_l1(out.surfaces, truth, mask, red)
    dice, vox_ce = loss_dice_ce(out.semantic_logits, labels_from_surfaces(truth_seg, n_rows), parts=True)

    lambdas = torch.as_tensor(weights.lambdas, dtype=x.dtype, device=x.device)
    if lambdas.numel() != truth.shape[1]:
        raise ValueError(f"{lambdas.numel()} lambdas for {truth.shape[1]} surfaces")
    if torch.any(lambdas > 0):
        smooth_s = (lambdas * loss_smooth_surface(out.surfaces_aligned, red)).sum()
    else:
        smooth_s = zero

    align = ncc + smooth_a
    seg = dice + vox_ce + ce + l1 + smooth_s
    return {
        "ncc": ncc,
        "smooth_a": smooth_a,
        "align": align,
        "dice": dice,
        "voxel_ce": vox_ce,
        "ce": ce,
        "l1": l1,
        "smooth_s": smooth_s,
        "seg": seg,
        "total": align + seg,
    }


def loss_seg(out: NetworkOutput, x, truth, mask, weights: LossWeights) -> Tensor:
    return compute_losses(out, x, truth, mask, weights, align_active=False)["seg"]


def loss_total(out: NetworkOutput, x, truth, mask, weights: LossWeights, align_active: bool = True) -> Tensor:
    return compute_losses(out, x, truth, mask, weights, align_active)["total"]
