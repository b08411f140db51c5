"""Meta-train / meta-test / meta-optimization over source-domain episodes.

Every iteration one source domain plays the unseen domain. The meta learner
takes one gradient step per meta-train domain, each adapted copy is scored on
the meta-test batch, and a single optimizer step updates all four parameter
groups with the sum of meta-train and meta-test objectives.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Batch, DomainDataset, EpisodeSplit, sample_episode
from .losses import (
    LossBundle,
    LossWeights,
    TripletConfig,
    cls_loss,
    depth_loss,
    one_side_triplet_loss,
    overall_loss,
    seg_loss,
    stage_total,
)
from .network import FASNet, NetConfig, build_model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    def __init__(self, message: str, report: "MetaStepReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 1e-3
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-5
    optimizer: str = "adam"
    iterations: int = 1000
    batch_size: int = 20
    second_order: bool = False
    meta_learning: bool = True
    stage1_margin: float = 0.1
    stage2_margin: float = 0.3
    switch_iteration: int | None = None
    checkpoint_every: int = 200

    def __post_init__(self):
        # inner_lr == 0 is accepted: it collapses first- and second-order modes
        if self.inner_lr < 0:
            raise ValueError("inner_lr must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.switch_iteration is not None and self.switch_iteration > self.iterations:
            raise ValueError("switch_iteration must not exceed iterations")

    @property
    def switch_at(self) -> int:
        return self.iterations // 2 if self.switch_iteration is None else self.switch_iteration


def mining_stage(cfg: MetaConfig, iteration: int) -> TripletConfig:
    """Batch-all with the small margin first, then batch-hard with the larger one."""
    if iteration < cfg.switch_at:
        return TripletConfig(cfg.stage1_margin, "batch_all")
    return TripletConfig(cfg.stage2_margin, "batch_hard")


def make_optimizer(model: torch.nn.Module, cfg: MetaConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(
        model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay
    )


@dataclass
class MetaStepReport:
    meta_train: list[tuple[int, LossBundle]]
    meta_test: list[LossBundle]
    mtrn: LossBundle
    mtst: LossBundle
    total: float
    grad_norms: dict[str, float] = field(default_factory=dict)
    margin: float = 0.0
    mining: str = ""


@dataclass
class _Terms:
    cls: torch.Tensor
    trip: torch.Tensor
    seg: torch.Tensor
    dep: torch.Tensor
    stats: tuple[int, int]


def _as_tensors(batch: Batch, dtype: torch.dtype):
    return (
        torch.as_tensor(np.array(batch.inputs), dtype=dtype),
        torch.as_tensor(np.array(batch.labels)),
        torch.as_tensor(np.array(batch.depth), dtype=dtype),
        torch.as_tensor(np.array(batch.parsing), dtype=torch.long),
    )


def inner_update(theta_M: dict[str, torch.Tensor], loss: torch.Tensor, inner_lr: float, second_order: bool = False):
    """theta_M - inner_lr * grad(loss, theta_M) as a fresh parameter dict.

    In first-order mode the gradient is detached, so outer gradients reach
    theta_M through the identity path only.
    """
    names = list(theta_M)
    grads = torch.autograd.grad(
        loss,
        [theta_M[k] for k in names],
        create_graph=second_order,
        retain_graph=True,
        allow_unused=True,
    )
    updated = {}
    for k, g in zip(names, grads):
        if g is None:
            updated[k] = theta_M[k]
            continue
        updated[k] = theta_M[k] - inner_lr * (g if second_order else g.detach())
    return updated


def _head_losses(model, pooled, labels, theta_M, triplet: TripletConfig, use_triplet: bool):
    logit, emb = model.meta_forward(pooled, theta_M)
    c = cls_loss(torch.sigmoid(logit), labels)
    if use_triplet:
        t, stats = one_side_triplet_loss(emb, labels, triplet)
    else:
        t, stats = c.new_zeros(()), (0, 0)
    return c, t, stats


def meta_test_losses(model, theta_M_primes, pooled, labels, triplet: TripletConfig, use_triplet: bool = True):
    """Classification and triplet losses of the meta-test batch under each adapted learner."""
    if not theta_M_primes:
        raise ValueError("meta-test needs at least one adapted meta learner")
    return [_head_losses(model, pooled, labels, prime, triplet, use_triplet) for prime in theta_M_primes]


def _bundle(w: LossWeights, t: _Terms) -> LossBundle:
    return LossBundle.build(w, t.cls.item(), t.trip.item(), t.seg.item(), t.dep.item(), *t.stats)


def _aggregate(w: LossWeights, terms: list[_Terms], shared: _Terms | None = None):
    """Sum cls/trip over domains; average dep/seg unless computed once (`shared`)."""
    cls = torch.stack([t.cls for t in terms]).sum()
    trip = torch.stack([t.trip for t in terms]).sum()
    if shared is None:
        seg = torch.stack([t.seg for t in terms]).mean()
        dep = torch.stack([t.dep for t in terms]).mean()
    else:
        seg, dep = shared.seg, shared.dep
    stats = (sum(t.stats[0] for t in terms), sum(t.stats[1] for t in terms))
    return _Terms(cls, trip, seg, dep, stats)


def _zero_terms(like: torch.Tensor) -> _Terms:
    z = like.new_zeros(())
    return _Terms(z, z, z, z, (0, 0))


def meta_objective(
    model: FASNet,
    episode: EpisodeSplit,
    cfg: MetaConfig,
    weights: LossWeights,
    triplet: TripletConfig | None = None,
) -> tuple[torch.Tensor, MetaStepReport]:
    """The combined meta-train + meta-test objective as a differentiable scalar, with its report.

    With `cfg.meta_learning=False` every batch of the episode is a plain
    training batch and the meta-test half is zero.
    """
    triplet = triplet or TripletConfig(cfg.stage1_margin, "batch_all")
    dtype = next(model.parameters()).dtype
    batches = [b for _, b in episode.meta_train] + [episode.meta_test[1]]
    domain_ids = [d for d, _ in episode.meta_train] + [episode.meta_test[0]]
    tensors = [_as_tensors(b, dtype) for b in batches]
    sizes = [len(b) for b in batches]

    trunk = model.trunk(torch.cat([t[0] for t in tensors]))
    pooled = trunk.pooled.split(sizes)
    depth_pred = trunk.depth_pred.split(sizes)
    parsing_logits = trunk.parsing_logits.split(sizes)

    theta_M = dict(model.meta_learner.named_parameters())
    use_triplet = weights.lambda_trip > 0
    n_train = len(batches) - 1 if cfg.meta_learning else len(batches)

    mtrn_terms, primes = [], []
    for i in range(n_train):
        _, labels, depth_gt, parsing_gt = tensors[i]
        c, t, stats = _head_losses(model, pooled[i], labels, theta_M, triplet, use_triplet)
        terms = _Terms(c, t, seg_loss(parsing_logits[i], parsing_gt), depth_loss(depth_pred[i], depth_gt), stats)
        mtrn_terms.append(terms)
        if cfg.meta_learning:
            primes.append(inner_update(theta_M, c + t, cfg.inner_lr, cfg.second_order))

    mtst_terms = []
    if cfg.meta_learning:
        _, labels, depth_gt, parsing_gt = tensors[-1]
        shared = _Terms(
            pooled[-1].new_zeros(()),
            pooled[-1].new_zeros(()),
            seg_loss(parsing_logits[-1], parsing_gt),
            depth_loss(depth_pred[-1], depth_gt),
            (0, 0),
        )
        for c, t, stats in meta_test_losses(model, primes, pooled[-1], labels, triplet, use_triplet):
            mtst_terms.append(_Terms(c, t, shared.seg, shared.dep, stats))
        mtst = _aggregate(weights, mtst_terms, shared)
    else:
        mtst = _zero_terms(pooled[0])

    mtrn = _aggregate(weights, mtrn_terms)
    total = weights.lambda_mtrn * stage_total(weights, mtrn.cls, mtrn.trip, mtrn.seg, mtrn.dep)
    total = total + weights.lambda_mtst * stage_total(weights, mtst.cls, mtst.trip, mtst.seg, mtst.dep)

    mtrn_b, mtst_b = _bundle(weights, mtrn), _bundle(weights, mtst)
    report = MetaStepReport(
        meta_train=[(domain_ids[i], _bundle(weights, t)) for i, t in enumerate(mtrn_terms)],
        meta_test=[_bundle(weights, t) for t in mtst_terms],
        mtrn=mtrn_b,
        mtst=mtst_b,
        total=overall_loss(mtrn_b, mtst_b, weights),
        margin=triplet.margin,
        mining=triplet.mining,
    )
    return total, report


def meta_step(
    model: FASNet,
    optimizer: torch.optim.Optimizer,
    episode: EpisodeSplit,
    cfg: MetaConfig,
    weights: LossWeights,
    triplet: TripletConfig | None = None,
) -> MetaStepReport:
    """One meta-train / meta-test pass followed by a single outer update (in place)."""
    total, report = meta_objective(model, episode, cfg, weights, triplet)
    if not torch.isfinite(total):
        raise NumericalAbort(f"non-finite meta objective ({total.item()})", report)

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    report.grad_norms = grad_norms(model)
    optimizer.step()
    return report


def grad_norms(model) -> dict[str, float]:
    out = {}
    for group, params in model.groups().items():
        sq = sum(float(p.grad.detach().pow(2).sum()) for p in params.values() if p.grad is not None)
        out[group] = sq**0.5
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: FASNet
    records: list[dict]
    checkpoint: Path | None = None


def _record(iteration: int, report: MetaStepReport, wall_time: float) -> dict:
    return {
        "iteration": iteration,
        "total": report.total,
        "mtrn": report.mtrn.as_dict(),
        "mtst": report.mtst.as_dict(),
        "margin": report.margin,
        "mining_mode": report.mining,
        "grad_norms": report.grad_norms,
        "wall_time": wall_time,
    }


def train(
    domains: Sequence[DomainDataset],
    cfg: MetaConfig,
    weights: LossWeights,
    net_cfg: NetConfig | None = None,
    seed: int = 0,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    stop_at: int | None = None,
) -> TrainResult:
    """Run `cfg.iterations` meta steps; deterministic given `seed`.

    With `out_dir`, checkpoints go to `out_dir/checkpoints/` every
    `cfg.checkpoint_every` steps plus `final`, and records are appended to
    `out_dir/train_log.jsonl`. `stop_at` ends the run early (used to simulate
    an interruption) and still writes a checkpoint.
    """
    if len(domains) < 2:
        raise ValueError("training needs at least two source domains")
    rng = np.random.default_rng(seed)
    if resume is not None:
        model, meta = load_checkpoint(resume)
        if net_cfg is not None and model.cfg != net_cfg:
            raise ValueError(f"checkpoint architecture {model.cfg} does not match requested {net_cfg}")
        optimizer = make_optimizer(model, cfg)
        if meta.get("optimizer_state"):
            optimizer.load_state_dict(meta["optimizer_state"])
        rng.bit_generator.state = meta["rng_state"]
        start = int(meta["step"])
    else:
        model = build_model(net_cfg, seed)
        optimizer = make_optimizer(model, cfg)
        start = 0

    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"
        if resume is None:
            log_path.write_text("")

    def checkpoint(name: str, step: int) -> Path | None:
        if out is None:
            return None
        path = out / "checkpoints" / name
        try:
            return save_checkpoint(
                path, model, step, optimizer, rng.bit_generator.state, extra={"seed": seed}
            )
        except OSError as exc:
            raise OSError(f"failed to write checkpoint {path}: {exc}") from exc

    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    size = model.cfg.input_size
    records = []
    t0 = time.perf_counter()
    for it in range(start, end):
        triplet = mining_stage(cfg, it)
        episode = sample_episode(domains, cfg.batch_size, rng, size)
        report = meta_step(model, optimizer, episode, cfg, weights, triplet)
        rec = _record(it, report, time.perf_counter() - t0)
        records.append(rec)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")
        if it % 50 == 0:
            log.info("iter %d total %.4f cls %.4f", it, report.total, report.mtrn.cls)
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0 and it + 1 < end:
            checkpoint(f"step_{it + 1:06d}", it + 1)
    final = checkpoint("final" if end == cfg.iterations else f"step_{end:06d}", end)
    return TrainResult(model, records, final)
