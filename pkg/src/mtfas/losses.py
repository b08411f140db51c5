"""Classification, one-side triplet, parsing, depth and combined objectives."""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

PROB_EPS = 1e-7
MINING_MODES = ("batch_all", "batch_hard")


@dataclass(frozen=True)
class LossWeights:
    lambda_mtrn: float = 1.0
    lambda_mtst: float = 1.0
    lambda_cls: float = 1.0
    lambda_dep: float = 10.0
    lambda_seg: float = 1.0
    lambda_trip: float = 0.5

    def __post_init__(self):
        bad = [f.name for f in fields(self) if getattr(self, f.name) < 0]
        if bad:
            raise ValueError(f"loss weights must be nonnegative: {', '.join(bad)}")


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.1
    mining: str = "batch_all"

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("triplet margin must be nonnegative")
        if self.mining not in MINING_MODES:
            raise ValueError(f"mining must be one of {MINING_MODES}, got {self.mining!r}")


@dataclass(frozen=True)
class LossBundle:
    """Component values of one stage; `total` is the task-weighted sum."""

    cls: float
    trip: float
    seg: float
    dep: float
    total: float
    n_valid: int = 0
    n_active: int = 0

    @classmethod
    def build(cls, w: LossWeights, cls_v, trip, seg, dep, n_valid=0, n_active=0) -> "LossBundle":
        cls_v, trip, seg, dep = float(cls_v), float(trip), float(seg), float(dep)
        total = w.lambda_cls * cls_v + w.lambda_dep * dep + w.lambda_seg * seg + w.lambda_trip * trip
        return cls(cls_v, trip, seg, dep, total, int(n_valid), int(n_active))

    @property
    def triplet_stats(self) -> tuple[int, int]:
        return self.n_valid, self.n_active

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def cls_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of live probabilities, clamped away from 0 and 1."""
    if probs.shape != labels.shape:
        raise ValueError(f"probs {tuple(probs.shape)} and labels {tuple(labels.shape)} differ in shape")
    if probs.numel() == 0:
        raise ValueError("cls_loss needs at least one sample")
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def _check_one_side(labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    labels = torch.as_tensor(labels).reshape(-1)
    live = torch.nonzero(labels == 1).flatten()
    spoof = torch.nonzero(labels == 0).flatten()
    if len(live) < 2 or len(spoof) < 1:
        raise ValueError(
            f"one-side triplets need >=2 live and >=1 spoof samples, got {len(live)} live / {len(spoof)} spoof"
        )
    return live, spoof


def pairwise_sq_dists(emb: torch.Tensor) -> torch.Tensor:
    diff = emb[:, None, :] - emb[None, :, :]
    return (diff * diff).sum(-1)


def mine_one_side_triplets(labels, mode: str = "batch_all", dists: torch.Tensor | None = None) -> torch.Tensor:
    """Index triples (anchor, positive, negative): live anchors, live positives, spoof negatives.

    `batch_hard` keeps one triple per anchor (farthest live, nearest spoof) and
    needs the pairwise distance matrix.
    """
    live, spoof = _check_one_side(labels)
    if mode == "batch_all":
        a, p, n = torch.meshgrid(live, live, spoof, indexing="ij")
        keep = a != p
        return torch.stack([a[keep], p[keep], n[keep]], dim=1)
    if mode == "batch_hard":
        if dists is None:
            raise ValueError("batch_hard mining needs the pairwise distance matrix")
        d = dists.detach()
        ap = d[live][:, live].clone()
        ap.fill_diagonal_(-float("inf"))
        hardest_pos = live[ap.argmax(dim=1)]
        hardest_neg = spoof[d[live][:, spoof].argmin(dim=1)]
        return torch.stack([live, hardest_pos, hardest_neg], dim=1)
    raise ValueError(f"unknown mining mode {mode!r}")


def one_side_triplet_loss(embeddings: torch.Tensor, labels, cfg: TripletConfig = TripletConfig()):
    """Hinge on squared distances; returns (loss, (n_valid, n_active)).

    batch_all averages over active triplets (nonzero hinge), batch_hard over anchors.
    """
    dists = pairwise_sq_dists(embeddings)
    triples = mine_one_side_triplets(labels, cfg.mining, dists)
    a, p, n = triples.unbind(1)
    hinge = F.relu(dists[a, p] - dists[a, n] + cfg.margin)
    n_valid = len(triples)
    n_active = int((hinge > 0).sum())
    if cfg.mining == "batch_all":
        loss = hinge.sum() / max(n_active, 1)
    else:
        loss = hinge.mean()
    return loss, (n_valid, n_active)


def seg_loss(parsing_logits: torch.Tensor, parsing_gt: torch.Tensor) -> torch.Tensor:
    """Per-pixel softmax cross-entropy, averaged over pixels and batch.

    Accepts B x C x H x W logits with B x H x W labels (or the unbatched forms).
    """
    if parsing_logits.ndim == 3:
        parsing_logits, parsing_gt = parsing_logits[None], parsing_gt[None]
    n_classes = parsing_logits.shape[1]
    if parsing_logits.shape[2:] != parsing_gt.shape[1:] or parsing_logits.shape[0] != parsing_gt.shape[0]:
        raise ValueError(f"logits {tuple(parsing_logits.shape)} and labels {tuple(parsing_gt.shape)} mismatch")
    gt = parsing_gt.long()
    if gt.numel() and (gt.min() < 0 or gt.max() >= n_classes):
        raise ValueError(f"parsing labels must lie in 0..{n_classes - 1}")
    return F.cross_entropy(parsing_logits, gt)


def depth_loss(depth_pred: torch.Tensor, depth_gt: torch.Tensor) -> torch.Tensor:
    if depth_pred.shape != depth_gt.shape:
        raise ValueError(f"depth shapes differ: {tuple(depth_pred.shape)} vs {tuple(depth_gt.shape)}")
    return F.mse_loss(depth_pred, depth_gt.to(depth_pred.dtype))


def stage_total(w: LossWeights, cls, trip, seg, dep):
    return w.lambda_cls * cls + w.lambda_dep * dep + w.lambda_seg * seg + w.lambda_trip * trip


def overall_loss(mtrn: LossBundle, mtst: LossBundle, w: LossWeights) -> float:
    """Meta-train and meta-test stage totals combined with the stage weights."""
    return w.lambda_mtrn * stage_total(w, mtrn.cls, mtrn.trip, mtrn.seg, mtrn.dep) + w.lambda_mtst * stage_total(
        w, mtst.cls, mtst.trip, mtst.seg, mtst.dep
    )
