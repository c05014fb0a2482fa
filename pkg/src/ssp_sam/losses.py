"""Segmentation (focal + Dice) and box (L1 + GIoU) losses and their weighted total.

Mask losses are averaged per image, then over the batch. Boxes are (cx, cy, w, h).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from ssp_sam.config import LossConfig

_EPS = 1e-12


def _flatten(mask_logits: torch.Tensor, gt_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if mask_logits.shape != gt_mask.shape:
        gt_mask = gt_mask.reshape(mask_logits.shape)
    b = mask_logits.shape[0] if mask_logits.ndim > 2 else 1
    return mask_logits.reshape(b, -1), gt_mask.reshape(b, -1).to(mask_logits.dtype)


def focal_loss(mask_logits: torch.Tensor, gt_mask: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    # BCE-with-logits is -log p_t computed without the log(0) hazard
    x, g = _flatten(mask_logits, gt_mask)
    p = torch.sigmoid(x)
    ce = F.binary_cross_entropy_with_logits(x, g, reduction="none")
    p_t = p * g + (1 - p) * (1 - g)
    alpha_t = alpha * g + (1 - alpha) * (1 - g)
    return (alpha_t * (1 - p_t) ** gamma * ce).mean(dim=1).mean()


def dice_loss(mask_logits: torch.Tensor, gt_mask: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    x, g = _flatten(mask_logits, gt_mask)
    p = torch.sigmoid(x)
    return (1 - (2 * (p * g).sum(1) + eps) / (p.sum(1) + g.sum(1) + eps)).mean()


def l1_box_loss(pred_box: torch.Tensor, gt_box: torch.Tensor) -> torch.Tensor:
    return (pred_box - gt_box).abs().mean()


def cxcywh_to_xyxy(box: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = box.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def generalized_iou(pred_box: torch.Tensor, gt_box: torch.Tensor) -> torch.Tensor:
    """Elementwise GIoU of (cx, cy, w, h) boxes.

    Zero-area boxes are points: IoU is 0 unless both boxes are empty, and two coincident
    points score GIoU 1.
    """
    a, b = cxcywh_to_xyxy(pred_box), cxcywh_to_xyxy(gt_box)
    area_a = (a[..., 2] - a[..., 0]).clamp(min=0) * (a[..., 3] - a[..., 1]).clamp(min=0)
    area_b = (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)
    iw = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    union = area_a + area_b - inter
    cw = torch.maximum(a[..., 2], b[..., 2]) - torch.minimum(a[..., 0], b[..., 0])
    ch = torch.maximum(a[..., 3], b[..., 3]) - torch.minimum(a[..., 1], b[..., 1])
    enclose = cw * ch
    iou = torch.where(union > _EPS, inter / union.clamp(min=_EPS), torch.zeros_like(union))
    penalty = torch.where(enclose > _EPS, (enclose - union) / enclose.clamp(min=_EPS), torch.zeros_like(enclose))
    both_empty = (union <= _EPS) & (enclose <= _EPS)
    return torch.where(both_empty, torch.ones_like(iou), iou - penalty)


def giou_loss(pred_box: torch.Tensor, gt_box: torch.Tensor) -> torch.Tensor:
    return (1 - generalized_iou(pred_box, gt_box)).mean()


def total_loss(mask_logits: torch.Tensor, gt_mask: torch.Tensor, pred_box: torch.Tensor, gt_box: torch.Tensor,
               cfg: LossConfig) -> tuple[torch.Tensor, dict[str, float]]:
    """beta * (segmentation) + (box); returns the scalar and a float breakdown for logging."""
    parts = {
        "focal": focal_loss(mask_logits, gt_mask, cfg.focal_gamma, cfg.focal_alpha),
        "dice": dice_loss(mask_logits, gt_mask, cfg.dice_eps),
        "l1": l1_box_loss(pred_box, gt_box),
        "giou": giou_loss(pred_box, gt_box),
    }
    res = cfg.lambda_focal * parts["focal"] + cfg.lambda_dice * parts["dice"]
    aux = cfg.lambda_l1 * parts["l1"] + cfg.lambda_giou * parts["giou"]
    total = aux if cfg.beta == 0 else cfg.beta * res + aux
    breakdown = {k: float(v.detach()) for k, v in parts.items()}
    breakdown.update(res=float(res.detach()), aux=float(aux.detach()), total=float(total.detach()))
    return total, breakdown
