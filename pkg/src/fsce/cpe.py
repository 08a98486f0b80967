"""Contrastive proposal encoding (CPE) loss.

A supervised-contrastive objective over RoI embeddings ``z`` of foreground
proposals, with each anchor weighted by a proposal-consistency term
``f(u) = 1{u >= phi} * g(u)`` computed from its IoU ``u`` with the matched
ground truth.

Everything is vectorised in torch so the detector can back-propagate through
it; the record-based helpers run in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch

REWEIGHT_MODES = ("one", "linear", "expm1")

Scalar = Union[float, torch.Tensor]


@dataclass(frozen=True)
class CpeConfig:
    temperature: float = 0.2
    phi: float = 0.7
    reweight: str = "one"
    loss_weight: float = 0.5

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.phi <= 1.0:
            raise ValueError(f"phi must lie in [0, 1], got {self.phi}")
        if self.reweight not in REWEIGHT_MODES:
            raise ValueError(f"reweight must be one of {REWEIGHT_MODES}, got {self.reweight!r}")
        # lambda = 0 is accepted: it is how the strong baseline is expressed
        if not self.loss_weight >= 0:
            raise ValueError(f"loss_weight must be non-negative, got {self.loss_weight}")


@dataclass(frozen=True)
class ProposalRecord:
    z: np.ndarray
    u: float
    y: int

    def __post_init__(self):
        if not 0.0 <= self.u <= 1.0:
            raise ValueError(f"IoU u must lie in [0, 1], got {self.u}")
        if self.y < 0:
            raise ValueError("background proposals cannot enter the CPE batch")


def consistency_weight(u: float, cfg: CpeConfig) -> float:
    if u < cfg.phi:
        return 0.0
    if cfg.reweight == "one":
        return 1.0
    if cfg.reweight == "linear":
        return float(u)
    return math.expm1(u)


def consistency_weights(u: torch.Tensor, cfg: CpeConfig) -> torch.Tensor:
    """Vectorised :func:`consistency_weight`."""
    if cfg.reweight == "one":
        g = torch.ones_like(u)
    elif cfg.reweight == "linear":
        g = u
    else:
        g = torch.expm1(u)
    return torch.where(u >= cfg.phi, g, torch.zeros_like(u))


def per_anchor_losses(z: torch.Tensor, y: torch.Tensor, temperature: float) -> torch.Tensor:
    """Per-anchor supervised-contrastive terms for a batch of embeddings.

    Row ``i`` averages ``-log softmax`` over the other members of ``i``'s
    class; the softmax denominator runs over every ``k != i``. Anchors with
    no same-label partner contribute exactly 0.
    """
    n = z.shape[0]
    if n < 2:
        return z.sum(dim=1) * 0.0
    norms = z.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm embedding in CPE batch")
    zn = z / norms
    sim = zn @ zn.t() / temperature
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    # logsumexp subtracts the row max before exponentiating
    denom = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1, keepdim=True)
    log_prob = sim - denom
    pos = (y[:, None] == y[None, :]) & ~eye
    n_pos = pos.sum(dim=1)
    summed = torch.where(pos, log_prob, torch.zeros_like(log_prob)).sum(dim=1)
    return torch.where(n_pos > 0, -summed / n_pos.clamp_min(1).to(z.dtype),
                       torch.zeros_like(summed))


def cpe_loss_tensor(z: torch.Tensor, u: torch.Tensor, y: torch.Tensor,
                    cfg: CpeConfig) -> torch.Tensor:
    """Differentiable CPE loss: ``mean_i f(u_i) * L_i``.

    Every batch member stays in every denominator, including anchors whose
    own weight is zero.
    """
    n = z.shape[0]
    if n == 0:
        return z.sum() * 0.0
    terms = per_anchor_losses(z, y, cfg.temperature)
    w = consistency_weights(u.to(z.dtype), cfg)
    return (w * terms).sum() / n


def _stack(batch: Sequence[ProposalRecord]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    z = torch.as_tensor(np.stack([np.asarray(r.z, dtype=np.float64) for r in batch]))
    u = torch.tensor([float(r.u) for r in batch], dtype=torch.float64)
    y = torch.tensor([int(r.y) for r in batch], dtype=torch.int64)
    return z, u, y


def per_anchor_loss(batch: Sequence[ProposalRecord], i: int, temperature: float) -> float:
    if len(batch) < 2:
        raise ValueError("per-anchor loss needs a batch of at least 2 records")
    z, _, y = _stack(batch)
    return float(per_anchor_losses(z, y, temperature)[i])


def cpe_loss(batch: Sequence[ProposalRecord], cfg: CpeConfig) -> float:
    if len(batch) == 0:
        return 0.0
    z, u, y = _stack(batch)
    return float(cpe_loss_tensor(z, u, y, cfg))


def cpe_loss_and_grad(z: np.ndarray, u: np.ndarray, y: np.ndarray,
                      cfg: CpeConfig) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to every embedding coordinate."""
    zt = torch.tensor(np.asarray(z, dtype=np.float64), requires_grad=True)
    loss = cpe_loss_tensor(zt, torch.as_tensor(np.asarray(u, dtype=np.float64)),
                           torch.as_tensor(np.asarray(y, dtype=np.int64)), cfg)
    (grad,) = torch.autograd.grad(loss, zt, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(zt)
    return float(loss.detach()), grad.numpy()


def total_finetune_loss(l_rpn: Scalar, l_cls: Scalar, l_reg: Scalar, l_cpe: Scalar,
                        loss_weight: float = 0.5) -> Scalar:
    """``l_rpn + l_cls + l_reg + loss_weight * l_cpe``; accepts floats or tensors."""
    for name, value in (("l_rpn", l_rpn), ("l_cls", l_cls), ("l_reg", l_reg), ("l_cpe", l_cpe)):
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise ValueError(f"non-finite loss term {name}: {v}")
    return l_rpn + l_cls + l_reg + loss_weight * l_cpe
