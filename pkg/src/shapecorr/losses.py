"""Reconstruction losses, the neighbourhood-preserving regulariser and the total loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .backbone import cosine_similarity_matrix, gather_rows, _batched
from .geometry import chamfer_distance, knn_indices


@dataclass
class LossWeights:
    lambda_cc: float = 1.0
    lambda_sc: float = 10.0
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 1.0
    lambda4: float = 0.8
    lambda5: float = 1.0
    alpha: float | None = None
    k_cons: int = 10

    def __post_init__(self):
        for name in ("lambda_cc", "lambda_sc", "lambda1", "lambda2", "lambda3", "lambda4", "lambda5"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.k_cons < 1:
            raise ValueError("k_cons must be >= 1")

    @classmethod
    def from_config(cls, loss_cfg) -> "LossWeights":
        return cls(loss_cfg.lambda_cc, loss_cfg.lambda_sc, loss_cfg.l1, loss_cfg.l2, loss_cfg.l3,
                   loss_cfg.l4, loss_cfg.l5, loss_cfg.alpha, loss_cfg.k)


def top_k_similar(S: torch.Tensor, k: int) -> torch.Tensor:
    """Column indices of the ``k`` largest entries per row (ties: lower index)."""
    if k < 1 or k > S.shape[-1]:
        raise ValueError(f"k must be in [1, {S.shape[-1]}], got {k}")
    return torch.sort(S.detach(), dim=-1, descending=True, stable=True).indices[..., :k]


def cross_construct(S: torch.Tensor, y: torch.Tensor, k: int = 10) -> torch.Tensor:
    """Rebuild one point per row of ``S`` from its ``k`` most similar target points.

    Weights are a softmax of the selected similarities, so each output is a
    convex combination of target coordinates.

    Args:
        S: ``(..., N, M)`` similarity of source rows to target rows.
        y: ``(..., M, 3)`` target coordinates.
        k: number of latent neighbours.
    """
    S, squeeze = _batched(S)
    y, _ = _batched(y)
    idx = top_k_similar(S, k)
    weights = torch.softmax(S.gather(-1, idx), dim=-1)
    out = (weights.unsqueeze(-1) * gather_rows(y, idx)).sum(dim=2)
    return out.squeeze(0) if squeeze else out


def self_construct(F: torch.Tensor, x: torch.Tensor, k: int = 10) -> torch.Tensor:
    """:func:`cross_construct` of a cloud from itself using its self-similarity."""
    return cross_construct(cosine_similarity_matrix(F, F), x, k)


def construction_loss(y_s, y_cross, x_s, x_cross, y_self, x_self, weights: LossWeights) -> torch.Tensor:
    """Weighted Chamfer terms for cross- and self-reconstructions (batch mean)."""
    cross = chamfer_distance(y_s, y_cross) + chamfer_distance(x_s, x_cross)
    own = chamfer_distance(y_s, y_self) + chamfer_distance(x_s, x_self)
    return (weights.lambda_cc * cross + weights.lambda_sc * own).mean()


def default_alpha(x: torch.Tensor, k: int) -> float:
    """Mean squared distance from each point to its ``k`` nearest other points."""
    x, _ = _batched(x.detach())
    nb = knn_indices(x, x, k + 1)[..., 1:]
    d = ((gather_rows(x, nb) - x.unsqueeze(2)) ** 2).sum(-1)
    return float(d.mean())


def mapping_regularizer(x: torch.Tensor, y_hat: torch.Tensor, k: int = 10, alpha: float | None = None,
                        sign: float = -1.0, reduction: str = "sum") -> torch.Tensor:
    """Penalise mapped neighbours drifting apart.

    ``sum_i sum_l exp(sign * |x_i - x_l|^2 / alpha) * |y_hat_i - y_hat_l|^2``
    over the ``k`` nearest *other* source points ``l`` of ``x_i`` in
    coordinate space. ``sign=-1`` down-weights distant neighbours;
    ``sign=+1`` is the literal exponent. ``alpha=None`` uses
    :func:`default_alpha`. ``reduction`` is ``"sum"`` or ``"mean"`` over the
    ``N*k`` terms (then averaged over a batch).
    """
    if alpha is None:
        alpha = default_alpha(x, k)
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    x, squeeze = _batched(x)
    y_hat, _ = _batched(y_hat)
    if k < 1 or k > x.shape[-2] - 1:
        raise ValueError(f"k must be in [1, {x.shape[-2] - 1}], got {k}")
    nb = knn_indices(x, x, k + 1)[..., 1:]
    dx = ((gather_rows(x, nb) - x.unsqueeze(2)) ** 2).sum(-1)
    dy = ((gather_rows(y_hat, nb) - y_hat.unsqueeze(2)) ** 2).sum(-1)
    terms = torch.exp(sign * dx / alpha) * dy
    if reduction == "sum":
        per_cloud = terms.sum(dim=(-1, -2))
    elif reduction == "mean":
        per_cloud = terms.mean(dim=(-1, -2))
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return per_cloud.squeeze(0) if squeeze else per_cloud.mean()


LOSS_TERMS = ("ccs", "css", "angle", "domain", "cons", "norm")


def total_loss(components: dict, weights: LossWeights) -> torch.Tensor:
    """``l1*ccs + l2*css + l3*angle + l4*domain + cons + l5*norm``.

    Missing components (switched-off terms) contribute nothing.

    Raises:
        FloatingPointError: naming the first non-finite component.
    """
    scale = {"ccs": weights.lambda1, "css": weights.lambda2, "angle": weights.lambda3,
             "domain": weights.lambda4, "cons": 1.0, "norm": weights.lambda5}
    total = None
    for name in LOSS_TERMS:
        if name not in components:
            continue
        value = components[name]
        if not math.isfinite(float(torch.as_tensor(value).detach())):
            raise FloatingPointError(f"loss component {name!r} is not finite: {float(torch.as_tensor(value).detach())}")
        term = scale[name] * value
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total
