"""Text-to-pixel contrastive loss, IoU metrics and the parameter census."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import dense_aligner, text_adapter
from .config import ProjectConfig


@dataclass
class LossBatch:
    logits: torch.Tensor  # [B, H, W], F_c^i . F_l per pixel
    target: torch.Tensor  # [B, H, W] in {0, 1}
    valid_mask: torch.Tensor | None = None


def contrastive_loss(logits, target=None, valid_mask=None) -> torch.Tensor:
    """Mean over labelled pixels of -log s(z) on positives and -log(1 - s(z)) on negatives.

    Accepts either tensors or a :class:`LossBatch`.  Uses the log-sum-exp
    form ``max(z, 0) - z*y + log1p(exp(-|z|))``, which never evaluates log(0).
    """
    if isinstance(logits, LossBatch):
        logits, target, valid_mask = logits.logits, logits.target, logits.valid_mask
    if logits.shape != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ")
    target = target.to(logits.dtype)
    if not bool(((target == 0) | (target == 1)).all()):
        raise ValueError("target must be binary")
    per_pixel = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    if valid_mask is None:
        if per_pixel.numel() == 0:
            raise ValueError("no labelled pixels")
        return per_pixel.mean()
    valid = valid_mask.to(torch.bool)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no labelled pixels")
    return per_pixel[valid].sum() / n


def iou(pred_mask, gt_mask) -> float:
    """|pred & gt| / |pred | gt|; two empty masks score 1.0."""
    pred = np.asarray(pred_mask.detach().cpu() if torch.is_tensor(pred_mask) else pred_mask).astype(bool)
    gt = np.asarray(gt_mask.detach().cpu() if torch.is_tensor(gt_mask) else gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def batch_iou(pred: torch.Tensor, gt: torch.Tensor) -> list[float]:
    pred = pred.reshape(pred.shape[0], -1).bool()
    gt = gt.reshape(gt.shape[0], -1).bool()
    if pred.shape != gt.shape:
        raise ValueError("mask shapes differ")
    inter = (pred & gt).sum(1).double()
    union = (pred | gt).sum(1).double()
    out = torch.where(union == 0, torch.ones_like(union), inter / union.clamp(min=1))
    return out.tolist()


def miou(per_sample_ious) -> float:
    values = list(per_sample_ious)
    if not values:
        raise ValueError("mIoU of an empty set")
    return float(sum(values) / len(values))


# Parameter census ----------------------------------------------------------

GROUPS = ("vision_backbone", "text_backbone", "dense_aligners", "text_adapters", "head")
_ATTRS = {"vision_backbone": "vision", "text_backbone": "text", "dense_aligners": "dense_aligners",
          "text_adapters": "text_adapters", "head": "head"}


@dataclass
class GroupCount:
    name: str
    trainable_count: int
    frozen_count: int


@dataclass
class ParamReport:
    groups: list[GroupCount] = field(default_factory=list)

    def group(self, name) -> GroupCount:
        for g in self.groups:
            if g.name == name:
                return g
        return GroupCount(name, 0, 0)

    @property
    def trainable(self) -> int:
        return sum(g.trainable_count for g in self.groups)

    @property
    def frozen(self) -> int:
        return sum(g.frozen_count for g in self.groups)

    @property
    def total(self) -> int:
        return self.trainable + self.frozen

    @property
    def adapter_trainable(self) -> int:
        return self.group("dense_aligners").trainable_count + self.group("text_adapters").trainable_count

    @property
    def backbone_frozen(self) -> int:
        return self.group("vision_backbone").frozen_count + self.group("text_backbone").frozen_count

    @property
    def backbone_fraction(self) -> float:
        """Adapter parameters relative to the frozen vision + text encoders."""
        return self.adapter_trainable / max(self.backbone_frozen, 1)

    @property
    def vision_fraction(self) -> float:
        """Adapter parameters relative to the frozen vision encoder alone."""
        return self.adapter_trainable / max(self.group("vision_backbone").frozen_count, 1)

    def to_dict(self) -> dict:
        return {
            "groups": [asdict(g) for g in self.groups],
            "trainable": self.trainable,
            "frozen": self.frozen,
            "total": self.total,
            "adapter_trainable": self.adapter_trainable,
            "backbone_frozen": self.backbone_frozen,
            "backbone_fraction": self.backbone_fraction,
            "vision_fraction": self.vision_fraction,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        lines = [f"{'subsystem':<18}{'trainable':>14}{'frozen':>14}"]
        for g in self.groups:
            lines.append(f"{g.name:<18}{g.trainable_count:>14,}{g.frozen_count:>14,}")
        lines.append(f"{'total':<18}{self.trainable:>14,}{self.frozen:>14,}")
        lines.append(f"adapters / backbone:        {100 * self.backbone_fraction:.3f}%")
        lines.append(f"adapters / vision backbone: {100 * self.vision_fraction:.3f}%")
        return "\n".join(lines)


def param_report(model) -> ParamReport:
    """Exact census of ``model`` grouped by subsystem; every tensor counted once."""
    seen = set()
    groups = []
    for name in GROUPS:
        module = getattr(model, _ATTRS[name], None)
        trainable = frozen = 0
        if module is not None:
            for p in module.parameters():
                if id(p) in seen:
                    continue
                seen.add(id(p))
                if p.requires_grad:
                    trainable += p.numel()
                else:
                    frozen += p.numel()
        groups.append(GroupCount(name, trainable, frozen))
    other_t = other_f = 0
    for p in model.parameters():
        if id(p) not in seen:
            seen.add(id(p))
            if p.requires_grad:
                other_t += p.numel()
            else:
                other_f += p.numel()
    if other_t or other_f:
        groups.append(GroupCount("other", other_t, other_f))
    return ParamReport(groups)


def adapter_budget(cfg: ProjectConfig) -> dict:
    """Closed-form adapter parameter counts for a project config (no tensors built)."""
    v = cfg.backbones.vision
    t = cfg.backbones.text
    da = dense_aligner.count_params(cfg.dense_aligner, v.embed_dim, t.embed_dim) if cfg.train.use_DA else 0
    ta = text_adapter.count_params(cfg.text_adapter, t.embed_dim) if cfg.train.use_TA else 0
    return {"dense_aligners": da, "text_adapters": ta, "total": da + ta}
