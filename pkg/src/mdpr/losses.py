"""Circle, batch-hard triplet, attention diversity losses and their sum."""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .config import LossConfig


@dataclass
class LossReport:
    circle: torch.Tensor
    triplet: torch.Tensor
    attention_diversity: torch.Tensor
    distillation: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}

    def check_finite(self) -> None:
        for f in fields(self):
            if not torch.isfinite(getattr(self, f.name)).all():
                raise FloatingPointError(f"non-finite {f.name} loss")


def _unit_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms.detach() == 0).any()):
        raise ValueError(f"zero-norm feature row in {what}")
    return x / norms


def circle_loss(features: torch.Tensor, labels: torch.Tensor, gamma: float = 64.0, m: float = 0.35) -> torch.Tensor:
    """Pairwise circle loss, averaged over anchors.

    For each anchor the in-batch positives (same label, not itself) and
    negatives give cosine similarities ``s_p`` and ``s_n``; the anchor's loss
    is ``log(1 + sum_n exp(gamma * a_n * (s_n - m)) * sum_p exp(-gamma * a_p * (s_p - 1 + m)))``
    with ``a_p = [1 + m - s_p]_+`` and ``a_n = [s_n + m]_+``. Anchors lacking
    positives or negatives contribute 0. The weights ``a_p``/``a_n`` are not
    detached, so the gradient is that of the expression above.
    """
    if features.shape[0] < 2:
        raise ValueError("circle loss needs at least 2 samples")
    x = _unit_rows(features, "circle loss")
    sim = x @ x.t()
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=features.device)
    pos_mask = same & ~eye
    neg_mask = ~same

    alpha_p = torch.clamp_min(1 + m - sim, 0.0)
    alpha_n = torch.clamp_min(sim + m, 0.0)
    logit_p = -gamma * alpha_p * (sim - (1 - m))
    logit_n = gamma * alpha_n * (sim - m)

    valid = pos_mask.any(dim=1) & neg_mask.any(dim=1)
    losses = features.new_zeros(len(labels))
    if valid.any():
        neg_inf = torch.finfo(sim.dtype).min
        lse_p = torch.logsumexp(logit_p.masked_fill(~pos_mask, neg_inf)[valid], dim=1)
        lse_n = torch.logsumexp(logit_n.masked_fill(~neg_mask, neg_inf)[valid], dim=1)
        losses = losses.index_put((valid.nonzero(as_tuple=True)[0],), F.softplus(lse_p + lse_n))
    return losses.mean()


def pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    sq = (x * x).sum(dim=1)
    d2 = sq[:, None] + sq[None, :] - 2 * x @ x.t()
    return d2.clamp_min(1e-12).sqrt()


def triplet_loss(features: torch.Tensor, labels: torch.Tensor, rho: float = 0.05) -> torch.Tensor:
    """Batch-hard triplet loss with hinge: mean of ``[rho + max d_ap - min d_an]_+``."""
    dist = pairwise_euclidean(features)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=features.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not bool(pos_mask.any(dim=1).all()):
        raise ValueError("triplet loss: an anchor has no positive in the batch")
    if not bool(neg_mask.any(dim=1).all()):
        raise ValueError("triplet loss: an anchor has no negative in the batch")
    hardest_pos = dist.masked_fill(~pos_mask, float("-inf")).amax(dim=1)
    hardest_neg = dist.masked_fill(~neg_mask, float("inf")).amin(dim=1)
    return F.relu(rho + hardest_pos - hardest_neg).mean()


def attention_diversity_loss(hat: torch.Tensor, beta: float = 0.001, eps: float = 1e-12) -> torch.Tensor:
    """Sum of cosines over ordered pairs ``i != j`` plus ``beta * sum_i |f_i|_1``.

    ``hat`` is ``B x K x M`` (or ``K x M``); evaluated per sample, then averaged.
    """
    if hat.dim() == 2:
        hat = hat[None]
    if hat.shape[1] < 2:
        raise ValueError("attention diversity loss needs at least 2 maps")
    unit = hat / hat.norm(dim=-1, keepdim=True).clamp_min(eps)
    gram = unit @ unit.transpose(1, 2)
    off_diag = gram.sum(dim=(1, 2)) - gram.diagonal(dim1=1, dim2=2).sum(dim=1)
    l1 = hat.abs().sum(dim=(1, 2))
    return (off_diag + beta * l1).mean()


def supervised_heads(
    features: dict[str, torch.Tensor], include_bap: bool = True
) -> list[tuple[str, torch.Tensor]]:
    """Flatten a feature dict into ``(name, B x D)`` heads; BAP stacks split per map."""
    heads = []
    for name, value in features.items():
        if value.dim() == 3:
            if include_bap:
                heads.extend((f"{name}_{k + 1}", value[:, k]) for k in range(value.shape[1]))
        else:
            heads.append((name, value))
    return heads


def total_loss(
    features: dict[str, torch.Tensor],
    hat_stacks: list[torch.Tensor],
    labels: torch.Tensor,
    cfg: LossConfig,
    distillation: torch.Tensor | None = None,
) -> LossReport:
    """Unit-weighted sum of the four terms.

    Circle and triplet losses are averaged over every supervised head in
    ``features``; the diversity loss is summed over the per-stage ``hat_stacks``
    (stacks with a single map have no pairs to decorrelate and are skipped).
    ``distillation=None`` means the term is disabled and reported as 0.
    """
    heads = supervised_heads(features, cfg.supervise_bap)
    circle = torch.stack([circle_loss(v, labels, cfg.gamma, cfg.m) for _, v in heads]).mean()
    triplet = torch.stack([triplet_loss(v, labels, cfg.rho) for _, v in heads]).mean()
    zero = labels.new_zeros((), dtype=circle.dtype)
    diversity = sum((attention_diversity_loss(h, cfg.beta) for h in hat_stacks if h.shape[-2] > 1), zero)
    distill = zero if distillation is None else distillation
    return LossReport(circle, triplet, diversity, distill, circle + triplet + diversity + distill)
