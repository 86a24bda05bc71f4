"""Least-squares adversarial, cycle-consistency and identity-mapping objectives.

Every function accepts numpy arrays or torch tensors.  With tensor inputs
the result is a (differentiable) tensor; with array inputs it is a float.
Scores and ids may be single vectors (n,) or batches (B, n); batch terms
are averaged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class LossWeights:
    w_gan: float = 4.0
    w_cycle: float = 10.0
    w_identity: float = 5.0

    def __post_init__(self):
        if min(self.w_gan, self.w_cycle, self.w_identity) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossReport:
    d_loss: float
    g_adv: float
    g_cycle: float
    g_identity: float
    g_total: float


def _wrap(*values):
    wants_tensor = any(isinstance(v, torch.Tensor) for v in values)
    out = []
    for v in values:
        if isinstance(v, torch.Tensor):
            out.append(v)
        else:
            out.append(torch.as_tensor(np.asarray(v, dtype=np.float64)))
    return wants_tensor, out


def _ret(wants_tensor, value):
    return value if wants_tensor else float(value)


def _check_ids(ids: torch.Tensor, n: int):
    if ids.shape[-1] != n:
        raise ValueError(f"length mismatch: {n} scores vs id of length {ids.shape[-1]}")
    v = ids.detach()
    ok = ((v == 0) | (v == 1)).all() and bool((v.sum(-1) == 1).all())
    if not ok:
        raise ValueError("target id is not one-hot")


def _select(scores, ids):
    _check_ids(ids, scores.shape[-1])
    return (scores * ids.to(scores.dtype)).sum(-1)


def select_score(scores, tgt_id):
    """Dot product of the discriminator outputs with a one-hot id: picks that speaker's score."""
    t, (s, i) = _wrap(scores, tgt_id)
    return _ret(t, _select(s, i).mean())


def d_loss(real_scores, real_tgt_id, fake_scores):
    """(selected real score - 1)^2 + mean over all heads of fake score^2."""
    t, (real, ids, fake) = _wrap(real_scores, real_tgt_id, fake_scores)
    if fake.shape[-1] != real.shape[-1]:
        raise ValueError("length mismatch between real and fake scores")
    real_term = ((_select(real, ids) - 1.0) ** 2).mean()
    fake_term = (fake**2).mean()
    return _ret(t, real_term + fake_term)


def g_adv_loss(fake_scores, tgt_id):
    t, (fake, ids) = _wrap(fake_scores, tgt_id)
    return _ret(t, ((_select(fake, ids) - 1.0) ** 2).mean())


def _mean_l1(a, b):
    t, (a, b) = _wrap(a, b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _ret(t, (a - b).abs().mean())


def cycle_loss(x, x_cyc):
    """Mean absolute error between an input and its round-trip conversion."""
    return _mean_l1(x, x_cyc)


def identity_loss(x, x_id):
    """Mean absolute error between an input and its conversion into its own speaker."""
    return _mean_l1(x, x_id)


def total_g_loss(g_adv, g_cycle, g_identity, weights: LossWeights = LossWeights()):
    terms = {"g_adv": g_adv, "g_cycle": g_cycle, "g_identity": g_identity}
    for name, v in terms.items():
        val = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(val):
            raise ValueError(f"non-finite {name}: {val}")
    total = weights.w_gan * g_adv + weights.w_cycle * g_cycle + weights.w_identity * g_identity
    return total if isinstance(total, torch.Tensor) else float(total)


# --------------------------------------------------------------------------
# explicit two-generator forms for the CycleGAN baseline


def cyclegan_cycle_loss(pair, x, y):
    """L1(G_X(G_Y(x)), x) + L1(G_Y(G_X(y)), y) for a :class:`CycleGANPair`."""
    return cycle_loss(x, pair.to_x(pair.to_y(x))) + cycle_loss(y, pair.to_y(pair.to_x(y)))


def cyclegan_identity_loss(pair, x, y):
    """L1(G_X(x), x) + L1(G_Y(y), y)."""
    return identity_loss(x, pair.to_x(x)) + identity_loss(y, pair.to_y(y))
