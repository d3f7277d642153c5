"""Training objectives: regularized cross-entropy, focal, soft IoU, their
combination, Tversky/log-cosh-dice ablations, multi-head aggregation, and
the detection loss.

All functions take torch tensors shaped (H, W) or (B, H, W) and reduce to a
scalar: per-image mean first, then mean over the batch. Predictions are
clamped to [1e-7, 1 - 1e-7] before any log.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, Optional

import torch
import torch.nn.functional as F

from .errors import MissingHead, ShapeMismatch

CLAMP_LO = 1e-7
CLAMP_HI = 1.0 - 1e-7

LOSS_KINDS = ("cross_entropy", "focal", "iou", "focal_iou", "tversky", "log_cosh_dice")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "focal_iou"
    alpha: float = 0.5  # focal share in the combined loss
    lambda_l2: float = 0.0001
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ShapeMismatch(f"bad loss kind {self.kind!r}; have {LOSS_KINDS}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ShapeMismatch(f"alpha must be in [0,1], got {self.alpha}")
        if self.lambda_l2 < 0.0:
            raise ShapeMismatch("lambda_l2 must be >= 0")
        if self.epsilon <= 0.0:
            raise ShapeMismatch("epsilon must be > 0")


def _prep(pred, target, clamp=True):
    # clamp guards the log-based losses only; the overlap losses (iou,
    # tversky, dice) take no logs, and clamping an all-zero prediction to
    # 1e-7 would swamp their epsilon in the degenerate empty-mask case.
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.ndim == 2:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    if pred.ndim != 3:
        raise ShapeMismatch(f"expected (H,W) or (B,H,W), got {tuple(pred.shape)}")
    if clamp:
        pred = pred.clamp(CLAMP_LO, CLAMP_HI)
    return pred, target


def _batch_mean(per_image: torch.Tensor, weights: Optional[torch.Tensor]) -> torch.Tensor:
    if weights is None:
        return per_image.mean()
    weights = weights.to(per_image.dtype)
    total = weights.sum()
    if total.item() == 0.0:
        return per_image.sum() * 0.0
    return (per_image * weights).sum() / total


def cross_entropy_l2(pred, target, theta_norm_sq=0.0, cfg=LossConfig(), weights=None):
    """Full two-sided binary cross-entropy plus (lambda/2) * ||theta||^2."""
    p, y = _prep(pred, target)
    ce = -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean(dim=(1, 2))
    return _batch_mean(ce, weights) + 0.5 * cfg.lambda_l2 * theta_norm_sq


def focal_loss(pred, target, cfg=LossConfig(), weights=None):
    p, y = _prep(pred, target)
    pt = torch.where(y > 0.5, p, 1 - p)
    per = (-cfg.focal_alpha * (1 - pt) ** cfg.focal_gamma * torch.log(pt)).mean(dim=(1, 2))
    return _batch_mean(per, weights)


def iou_loss(pred, target, cfg=LossConfig(), weights=None):
    p, y = _prep(pred, target, clamp=False)
    inter = (p * y).sum(dim=(1, 2))
    union = p.sum(dim=(1, 2)) + y.sum(dim=(1, 2)) - inter
    per = 1 - (inter + cfg.epsilon) / (union + cfg.epsilon)
    return _batch_mean(per, weights)


def combined_focal_iou(pred, target, cfg=LossConfig(), weights=None):
    return cfg.alpha * focal_loss(pred, target, cfg, weights) + (
        1 - cfg.alpha
    ) * iou_loss(pred, target, cfg, weights)


def tversky_loss(pred, target, cfg=LossConfig(), weights=None):
    p, y = _prep(pred, target, clamp=False)
    tp = (p * y).sum(dim=(1, 2))
    fp = (p * (1 - y)).sum(dim=(1, 2))
    fn = ((1 - p) * y).sum(dim=(1, 2))
    per = 1 - (tp + cfg.epsilon) / (
        tp + cfg.tversky_alpha * fp + cfg.tversky_beta * fn + cfg.epsilon
    )
    return _batch_mean(per, weights)


def dice_loss(pred, target, cfg=LossConfig(), weights=None):
    # Dice is Tversky at alpha = beta = 0.5; routing through tversky_loss
    # makes that reduction identity hold bitwise, not just to rounding.
    half = replace(cfg, tversky_alpha=0.5, tversky_beta=0.5)
    return tversky_loss(pred, target, half, weights)


def log_cosh_dice_loss(pred, target, cfg=LossConfig(), weights=None):
    d = dice_loss(pred, target, cfg, weights)
    return torch.log(torch.cosh(d))


def detection_loss(logit, label):
    """Binary cross-entropy on the sigmoid of the logit; mean over the batch."""
    logit = torch.as_tensor(logit)
    if logit.ndim == 0:
        logit = logit.unsqueeze(0)
    label = torch.as_tensor(label, dtype=logit.dtype).reshape(logit.shape)
    return F.binary_cross_entropy_with_logits(logit, label)


def loss_by_kind(pred, target, cfg: LossConfig, theta_norm_sq=0.0, weights=None):
    if cfg.kind == "cross_entropy":
        return cross_entropy_l2(pred, target, theta_norm_sq, cfg, weights)
    if cfg.kind == "focal":
        return focal_loss(pred, target, cfg, weights)
    if cfg.kind == "iou":
        return iou_loss(pred, target, cfg, weights)
    if cfg.kind == "focal_iou":
        return combined_focal_iou(pred, target, cfg, weights)
    if cfg.kind == "tversky":
        return tversky_loss(pred, target, cfg, weights)
    if cfg.kind == "log_cosh_dice":
        return log_cosh_dice_loss(pred, target, cfg, weights)
    raise ShapeMismatch(f"bad loss kind {cfg.kind!r}")


def resample_target(target: torch.Tensor, res: int) -> torch.Tensor:
    """Fit a (B, H, W) mask to a head resolution: nearest up, 2x2 max down."""
    h = target.shape[-1]
    if res == h:
        return target
    if res == 2 * h:
        return target.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)
    if 2 * res == h:
        return F.max_pool2d(target.unsqueeze(1), 2).squeeze(1)
    raise MissingHead(f"no target rule for head {res} from mask size {h}")


def multi_head_loss(
    heads: Dict[int, torch.Tensor],
    target,
    cfg: LossConfig,
    theta_norm_sq=0.0,
    weights=None,
):
    """Unweighted mean of the per-head losses against resampled targets."""
    if len(heads) != 3:
        raise MissingHead(f"need exactly 3 heads, got {sorted(heads)}")
    target = torch.as_tensor(target)
    if target.ndim == 2:
        target = target.unsqueeze(0)
    target = target.to(next(iter(heads.values())).dtype)
    total = None
    for res in sorted(heads, reverse=True):
        part = loss_by_kind(
            heads[res], resample_target(target, res), cfg, theta_norm_sq, weights
        )
        total = part if total is None else total + part
    return total / len(heads)


def weight_norm_sq(model: torch.nn.Module) -> torch.Tensor:
    """Sum of squared conv/dense weights; BN scale/shift and biases excluded."""
    total = None
    for mod in model.modules():
        if isinstance(mod, (torch.nn.Conv2d, torch.nn.Linear)):
            term = (mod.weight ** 2).sum()
            total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total
