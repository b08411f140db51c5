"""Held-out scoring, AUC/HTER, dev-EER thresholds, embedding export and Grad-CAM."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from .data import DomainDataset


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores but {len(labels)} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 (spoof) or 1 (live)")
    if labels.min(initial=1) == labels.max(initial=0) or len(labels) == 0:
        raise ValueError("both live and spoof samples are required")
    return scores, labels


@torch.no_grad()
def score_domain(model, dataset: DomainDataset, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Live probability per sample, in dataset order."""
    if len(dataset) == 0:
        raise ValueError("cannot score an empty dataset")
    model.eval()
    arr = dataset.arrays(model.cfg.input_size)
    dtype = next(model.parameters()).dtype
    scores = []
    for start in range(0, len(arr.labels), batch_size):
        x = torch.as_tensor(np.array(arr.inputs[start : start + batch_size]), dtype=dtype)
        scores.append(model(x).live_prob.double().numpy())
    return np.concatenate(scores), arr.labels.copy()


def auc(scores, labels) -> float:
    """Probability a random live sample outscores a random spoof, ties counted half."""
    scores, labels = _check_binary(scores, labels)
    ranks = rankdata(scores)  # average ranks for ties
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def hter(scores, labels, threshold: float) -> tuple[float, float, float]:
    """(FAR, FRR, HTER); a score equal to the threshold is accepted as live."""
    scores, labels = _check_binary(scores, labels)
    far = float(np.mean(scores[labels == 0] >= threshold))
    frr = float(np.mean(scores[labels == 1] < threshold))
    return far, frr, (far + frr) / 2.0


def _candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    u = np.unique(scores)
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[np.nextafter(u[0], -np.inf)], mids, [np.nextafter(u[-1], np.inf)]])


def _rates(scores, labels, thresholds):
    spoof = np.sort(scores[labels == 0])
    live = np.sort(scores[labels == 1])
    far = 1.0 - np.searchsorted(spoof, thresholds, side="left") / len(spoof)
    frr = np.searchsorted(live, thresholds, side="left") / len(live)
    return far, frr


def select_threshold(dev_scores, dev_labels) -> float:
    """Equal-error-rate threshold: the score midpoint where FAR and FRR cross."""
    scores, labels = _check_binary(dev_scores, dev_labels)
    cands = _candidate_thresholds(scores)
    far, frr = _rates(scores, labels, cands)
    order = np.lexsort((far + frr, np.abs(far - frr)))
    return float(cands[order[0]])


def min_hter_threshold(scores, labels) -> float:
    scores, labels = _check_binary(scores, labels)
    cands = _candidate_thresholds(scores)
    far, frr = _rates(scores, labels, cands)
    return float(cands[np.argmin(far + frr)])


@dataclass
class EvalReport:
    scores: list[float]
    labels: list[int]
    auc: float
    threshold: float
    far: float
    frr: float
    hter: float

    @classmethod
    def build(cls, scores, labels, threshold: float) -> "EvalReport":
        scores, labels = _check_binary(scores, labels)
        far, frr, h = hter(scores, labels, threshold)
        return cls(scores.tolist(), labels.tolist(), auc(scores, labels), float(threshold), far, frr, h)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(asdict(self), indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, path: str | Path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))


def evaluate(model, test: DomainDataset, dev: Sequence[DomainDataset]) -> EvalReport:
    """Threshold on the pooled dev splits, metrics on the held-out test domain."""
    dev_scores, dev_labels = zip(*(score_domain(model, d) for d in dev))
    threshold = select_threshold(np.concatenate(dev_scores), np.concatenate(dev_labels))
    scores, labels = score_domain(model, test)
    return EvalReport.build(scores, labels, threshold)


# ---------------------------------------------------------------------------
# embeddings for external t-SNE
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingTable:
    domains: np.ndarray
    labels: np.ndarray
    embeddings: np.ndarray

    def __len__(self):
        return len(self.labels)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["domain", "label"] + [f"e{i}" for i in range(self.embeddings.shape[1])])
            for d, y, e in zip(self.domains, self.labels, self.embeddings):
                writer.writerow([str(d), int(y)] + [repr(float(v)) for v in e])
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> "EmbeddingTable":
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["domain", "label"]:
                raise ValueError(f"{path}: header must start with domain,label")
            rows = list(reader)
        return cls(
            domains=np.array([r[0] for r in rows]),
            labels=np.array([int(r[1]) for r in rows], dtype=np.int64),
            embeddings=np.array([[float(v) for v in r[2:]] for r in rows], dtype=np.float64).reshape(
                len(rows), len(header) - 2
            ),
        )


@torch.no_grad()
def export_embeddings(model, datasets: Sequence[DomainDataset], batch_size: int = 64) -> EmbeddingTable:
    """Metric embeddings (meta learner's first layer) for every sample."""
    if not datasets:
        raise ValueError("export needs at least one dataset")
    model.eval()
    dtype = next(model.parameters()).dtype
    domains, labels, embs = [], [], []
    for ds in datasets:
        arr = ds.arrays(model.cfg.input_size)
        for start in range(0, len(arr.labels), batch_size):
            x = torch.as_tensor(np.array(arr.inputs[start : start + batch_size]), dtype=dtype)
            embs.append(model(x).metric_embedding.double().numpy())
        domains += [ds.name] * len(arr.labels)
        labels.append(arr.labels)
    return EmbeddingTable(np.array(domains), np.concatenate(labels), np.concatenate(embs))


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------


def cam_from_gradients(activations: torch.Tensor, gradients: torch.Tensor, size) -> np.ndarray:
    """C x h x w activations and gradients -> size map in [0, 1]."""
    weights = gradients.mean(dim=(1, 2))
    cam = F.relu((weights[:, None, None] * activations).sum(0))
    cam = F.interpolate(cam[None, None], size=tuple(size), mode="bilinear", align_corners=False)[0, 0]
    peak = cam.max()
    if peak <= 0:
        return np.zeros(tuple(size))
    return (cam / peak).clamp(0.0, 1.0).detach().double().numpy()


def grad_cam(model, x, target: str = "live") -> np.ndarray:
    """Class saliency on the last extractor feature map, upsampled to the input size."""
    if target not in ("live", "spoof"):
        raise ValueError("target must be 'live' or 'spoof'")
    model.eval()
    dtype = next(model.parameters()).dtype
    x = x.detach().to(dtype) if torch.is_tensor(x) else torch.as_tensor(np.array(x), dtype=dtype)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError("grad_cam takes a single input")
    with torch.enable_grad():
        f = model.extract_features(x)
        trunk = model.trunk(x, f)
        logit, _ = model.meta_forward(trunk.pooled)
        score = logit[0] if target == "live" else -logit[0]
        (grads,) = torch.autograd.grad(score, f.values)
    return cam_from_gradients(f.values[0].detach(), grads[0], x.shape[-2:])
