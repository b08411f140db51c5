"""Independent reference implementations used by the tests.

Everything here is written with explicit loops or closed-form derivatives so
that it shares no code path with the library under test.
"""

import math
from itertools import product

import numpy as np
import torch
from torch import nn

from mtfas.data import Batch, EpisodeSplit


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def bce_loop(probs, labels, eps=1e-7):
    total = 0.0
    for p, y in zip(probs, labels):
        p = min(max(float(p), eps), 1.0 - eps)
        total += -(y * math.log(p) + (1 - y) * math.log(1.0 - p))
    return total / len(probs)


def all_one_side_triples(labels):
    out = []
    for a, p, n in product(range(len(labels)), repeat=3):
        if labels[a] == 1 and labels[p] == 1 and labels[n] == 0 and a != p:
            out.append((a, p, n))
    return out


def sq_dist(u, v):
    return sum((float(x) - float(y)) ** 2 for x, y in zip(u, v))


def batch_all_loop(emb, labels, margin):
    terms = []
    for a, p, n in all_one_side_triples(labels):
        terms.append(max(0.0, sq_dist(emb[a], emb[p]) - sq_dist(emb[a], emb[n]) + margin))
    active = [t for t in terms if t > 0]
    return (sum(active) / len(active) if active else 0.0), len(terms), len(active)


def batch_hard_loop(emb, labels, margin):
    lives = [i for i, y in enumerate(labels) if y == 1]
    spoofs = [i for i, y in enumerate(labels) if y == 0]
    terms = []
    for a in lives:
        dp = max(sq_dist(emb[a], emb[p]) for p in lives if p != a)
        dn = min(sq_dist(emb[a], emb[n]) for n in spoofs)
        terms.append(max(0.0, dp - dn + margin))
    return sum(terms) / len(terms)


def seg_ce_loop(logits, gt):
    """logits B x C x H x W, gt B x H x W."""
    b, c, h, w = logits.shape
    total = 0.0
    for i, y, x in product(range(b), range(h), range(w)):
        z = [float(logits[i, k, y, x]) for k in range(c)]
        m = max(z)
        lse = m + math.log(sum(math.exp(v - m) for v in z))
        total += lse - z[int(gt[i, y, x])]
    return total / (b * h * w)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def hter_count(scores, labels, thr):
    fa = sum(1 for s, y in zip(scores, labels) if y == 0 and s >= thr)
    fr = sum(1 for s, y in zip(scores, labels) if y == 1 and s < thr)
    n_spoof = sum(1 for y in labels if y == 0)
    n_live = len(labels) - n_spoof
    far, frr = fa / n_spoof, fr / n_live
    return far, frr, (far + frr) / 2


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def central_fd(fn, x: torch.Tensor, step=1e-4, coords=None):
    """Central differences of scalar fn at x (float64), optionally on a subset of flat coords."""
    flat = x.detach().clone().reshape(-1)
    coords = range(flat.numel()) if coords is None else coords
    out = []
    for i in coords:
        orig = flat[i].item()
        flat[i] = orig + step
        up = float(fn(flat.view_as(x)))
        flat[i] = orig - step
        down = float(fn(flat.view_as(x)))
        flat[i] = orig
        out.append((up - down) / (2 * step))
    return np.array(out)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


# ---------------------------------------------------------------------------
# scalar bilevel model
# ---------------------------------------------------------------------------
#
# pooled = w * x, logit = metric embedding = m * pooled,
# depth = a * x, parsing logits = [0, s * x] (two classes).


class _ScalarM(nn.Module):
    def __init__(self, m):
        super().__init__()
        self.m = nn.Parameter(torch.tensor(float(m), dtype=torch.float64))

    def forward(self, pooled):
        z = self.m * pooled[:, 0]
        return z, z[:, None]


class _Trunk:
    def __init__(self, pooled, depth_pred, parsing_logits):
        self.pooled, self.depth_pred, self.parsing_logits = pooled, depth_pred, parsing_logits


class ScalarModel(nn.Module):
    def __init__(self, w, m, a, s):
        super().__init__()
        f64 = dict(dtype=torch.float64)
        self.w = nn.Parameter(torch.tensor(float(w), **f64))
        self.a = nn.Parameter(torch.tensor(float(a), **f64))
        self.s = nn.Parameter(torch.tensor(float(s), **f64))
        self.meta_learner = _ScalarM(m)

    def trunk(self, x):
        x = x[:, 0]
        pooled = (self.w * x)[:, None]
        depth = (self.a * x)[:, None, None]
        logits = torch.stack([torch.zeros_like(x), self.s * x], dim=1)[:, :, None, None]
        return _Trunk(pooled, depth, logits)

    def meta_forward(self, pooled, theta_M=None):
        if theta_M is None:
            return self.meta_learner(pooled)
        return torch.func.functional_call(self.meta_learner, theta_M, (pooled,))

    def groups(self):
        return {
            "theta_F": {"w": self.w},
            "theta_D": {"a": self.a},
            "theta_S": {"s": self.s},
            "theta_M": dict(self.meta_learner.named_parameters()),
        }

    def values(self):
        return {k: getattr(self, k).item() for k in "was"} | {"m": self.meta_learner.m.item()}


def scalar_batch(x, y, d, g, domain_id):
    x = np.asarray(x, dtype=np.float64)
    return Batch(
        inputs=x[:, None],
        labels=np.asarray(y, dtype=np.int64),
        depth=np.asarray(d, dtype=np.float64)[:, None, None],
        parsing=np.asarray(g, dtype=np.int64)[:, None, None],
        domain_id=domain_id,
    )


def scalar_episode(batches, test_index):
    train = tuple((i, b) for i, b in enumerate(batches) if i != test_index)
    return EpisodeSplit(meta_train=train, meta_test=(test_index, batches[test_index]))


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def _cls_grads(m, w, b):
    """d/dm and d/dw of mean BCE(sigmoid(m w x), y)."""
    n = len(b.labels)
    gm = sum((_sig(m * w * x) - y) * w * x for x, y in zip(b.inputs[:, 0], b.labels)) / n
    gw = sum((_sig(m * w * x) - y) * m * x for x, y in zip(b.inputs[:, 0], b.labels)) / n
    return gm, gw


def _trip_grads(m, w, b, margin):
    """d/dm and d/dw of the batch_all one-side loss on 1-D embeddings m w x."""
    xs, ys = b.inputs[:, 0], b.labels
    active = []
    for a, p, n in all_one_side_triples(list(ys)):
        diff = (xs[a] - xs[p]) ** 2 - (xs[a] - xs[n]) ** 2
        if (m * w) ** 2 * diff + margin > 0:
            active.append(diff)
    if not active:
        return 0.0, 0.0
    k = len(active)
    return sum(2 * m * w * w * dd for dd in active) / k, sum(2 * m * m * w * dd for dd in active) / k


def _dep_grad(a, b):
    xs, d = b.inputs[:, 0], b.depth[:, 0, 0]
    return sum(2 * (a * x - t) * x for x, t in zip(xs, d)) / len(xs)


def _seg_grad(s, b):
    xs, g = b.inputs[:, 0], b.parsing[:, 0, 0]
    return sum((_sig(s * x) - t) * x for x, t in zip(xs, g)) / len(xs)


def scalar_inner_update(m, w, b, alpha, margin, use_trip):
    gm, _ = _cls_grads(m, w, b)
    if use_trip:
        gm += _trip_grads(m, w, b, margin)[0]
    return m - alpha * gm


def scalar_meta_sgd_step(params, episode, alpha, lr, weights, margin):
    """One first-order meta step followed by plain SGD, all by hand."""
    w, m, a, s = params["w"], params["m"], params["a"], params["s"]
    use_trip = weights.lambda_trip > 0
    train = [b for _, b in episode.meta_train]
    test = episode.meta_test[1]
    lc, lt, ld, ls = weights.lambda_cls, weights.lambda_trip, weights.lambda_dep, weights.lambda_seg
    gw = gm = ga = gs = 0.0

    # meta-train: cls/trip summed over domains, dep/seg averaged
    for b in train:
        cm, cw = _cls_grads(m, w, b)
        tm, tw = _trip_grads(m, w, b, margin) if use_trip else (0.0, 0.0)
        gm += weights.lambda_mtrn * (lc * cm + lt * tm)
        gw += weights.lambda_mtrn * (lc * cw + lt * tw)
        ga += weights.lambda_mtrn * ld * _dep_grad(a, b) / len(train)
        gs += weights.lambda_mtrn * ls * _seg_grad(s, b) / len(train)

    # meta-test through each adapted m'; the inner gradient is a constant
    for b in train:
        mp = scalar_inner_update(m, w, b, alpha, margin, use_trip)
        cm, cw = _cls_grads(mp, w, b=test)
        tm, tw = _trip_grads(mp, w, test, margin) if use_trip else (0.0, 0.0)
        gm += weights.lambda_mtst * (lc * cm + lt * tm)
        gw += weights.lambda_mtst * (lc * cw + lt * tw)
    ga += weights.lambda_mtst * ld * _dep_grad(a, test)
    gs += weights.lambda_mtst * ls * _seg_grad(s, test)

    return {"w": w - lr * gw, "m": m - lr * gm, "a": a - lr * ga, "s": s - lr * gs}
