"""Orientation estimation: relative z-rotation between a source and a target.

The module encodes both clouds with a shared three-block EdgeConv encoder,
fuses source features with feature-space-nearest target features (feature
interaction), refines the fused features, and classifies the relative angle
into ``M`` bins. A domain discriminator behind a gradient-reversal layer
pushes the fused features of labelled same-shape pairs and unlabelled
cross-shape pairs toward one distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import EdgeConv, _batched
from .geometry import TWO_PI, knn_indices, rotate_z

LOG_EPS = 1e-12


# -- angle bins ----------------------------------------------------------------


def angle_to_bin(angle: float, bins: int = 8, centered: bool = False) -> int:
    """Discretise an angle in ``[0, 2*pi)``.

    Default bins start at 0 (bin ``b`` covers ``[b*w, (b+1)*w)``). With
    ``centered`` they are shifted by half a width so bin 0 is centred on 0
    and an unrotated pair maps to a zero-rotation bin.
    """
    if not 0.0 <= angle < TWO_PI:
        raise ValueError(f"angle must lie in [0, 2pi), got {angle}")
    pos = angle * bins / TWO_PI
    if centered:
        return int(math.floor(pos + 0.5)) % bins
    return min(int(math.floor(pos)), bins - 1)


def bin_to_angle(b: int, bins: int = 8, centered: bool = False) -> float:
    """Representative (centre) angle of a bin."""
    if not 0 <= b < bins:
        raise ValueError(f"bin must lie in [0, {bins}), got {b}")
    return (b if centered else b + 0.5) * TWO_PI / bins


def angles_to_bins(angles: torch.Tensor, bins: int = 8, centered: bool = False) -> torch.Tensor:
    """Vectorised :func:`angle_to_bin` for a tensor of angles."""
    return torch.tensor([angle_to_bin(float(a), bins, centered) for a in angles.reshape(-1)],
                        dtype=torch.long).view(angles.shape)


def bin_centers(bins: int = 8, centered: bool = False, dtype=torch.float64) -> torch.Tensor:
    return torch.tensor([bin_to_angle(b, bins, centered) for b in range(bins)], dtype=dtype)


# -- losses --------------------------------------------------------------------


def angle_loss(probs: torch.Tensor, label) -> torch.Tensor:
    """Cross entropy ``-log p[label]`` (log clamped at 1e-12), batch-averaged."""
    probs = probs if probs.dim() == 2 else probs.unsqueeze(0)
    label = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    picked = probs.gather(1, label.unsqueeze(1)).squeeze(1)
    return -(picked.clamp_min(LOG_EPS).log()).mean()


def domain_loss(d: torch.Tensor, is_real: bool, gamma: float = 2.0) -> torch.Tensor:
    """Two-class focal loss on the probability ``d`` that a pair is real.

    Real pairs: ``-(1-d)^gamma log d``; rotation-augmented pairs:
    ``-d^gamma log(1-d)``. Batch-averaged.
    """
    if gamma <= 1:
        raise ValueError(f"focal gamma must exceed 1, got {gamma}")
    d = torch.as_tensor(d)
    if is_real:
        loss = -((1 - d) ** gamma) * d.clamp_min(LOG_EPS).log()
    else:
        loss = -(d ** gamma) * (1 - d).clamp_min(LOG_EPS).log()
    return loss.mean()


# -- gradient reversal -----------------------------------------------------------


class GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, weight):
        ctx.weight = weight
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.weight * grad_output, None


def grad_reverse(x: torch.Tensor, weight: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-weight``."""
    return GradientReversal.apply(x, weight)


# -- network pieces ----------------------------------------------------------------


class OemEncoder(nn.Module):
    """Three EdgeConv blocks on a per-cloud coordinate kNN graph."""

    def __init__(self, widths=(64, 128, 256), k: int = 24, negative_slope: float = 0.2):
        super().__init__()
        self.k = k
        chans = [3, *widths]
        self.blocks = nn.ModuleList(
            EdgeConv(chans[i], chans[i + 1], negative_slope) for i in range(len(widths))
        )

    def forward(self, points: torch.Tensor, graph: torch.Tensor | None = None) -> torch.Tensor:
        if graph is None:
            graph = knn_indices(points, points, self.k)
        h = points
        for block in self.blocks:
            h = block(h, graph)
        return h


class FeatureInteraction(nn.Module):
    """Query-based graph convolution from source features into the target.

    Each source point looks up its ``k`` nearest target points in feature
    space. Edges ``(p_i, q_j - p_i)`` are built on features extended with xyz,
    so they carry feature and spatial-position differences. Edge map, max
    pool and ReLU give the aggregated feature, to which a linear skip of the
    source feature is added.
    """

    def __init__(self, channels: int, out_channels: int | None = None, k: int = 24):
        super().__init__()
        out_channels = out_channels or channels
        self.k = k
        self.aggregate = EdgeConv(channels + 3, out_channels, activation="relu")
        self.skip = nn.Linear(channels, out_channels)

    @property
    def edge_width(self) -> int:
        return self.aggregate.edge.in_features

    def forward(self, p_s, p_t, coords_s, coords_t):
        if p_s.shape[-1] != p_t.shape[-1] or p_s.shape[-2] != coords_s.shape[-2]:
            raise ValueError("feature/coordinate shapes disagree")
        if self.k > p_t.shape[-2]:
            raise ValueError(f"k={self.k} exceeds target size {p_t.shape[-2]}")
        graph = knn_indices(p_s.detach(), p_t.detach(), self.k)
        query = torch.cat([p_s, coords_s], dim=-1)
        keys = torch.cat([p_t, coords_t], dim=-1)
        return self.aggregate(query, graph, neighbors=keys) + self.skip(p_s)


class GlobalFusion(nn.Module):
    """Stand-in used when feature interaction is switched off.

    Each source feature is combined with the max-pooled target descriptor
    through one linear layer, so the head still sees both clouds.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.fuse = nn.Linear(2 * channels, channels)

    def forward(self, p_s, p_t, coords_s, coords_t):
        g = p_t.max(dim=-2, keepdim=True).values.expand_as(p_s)
        return F.relu(self.fuse(torch.cat([p_s, g], dim=-1)))


def _norm_layer(kind: str, width: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm1d(width, momentum=0.1)
    if kind == "layer":
        return nn.LayerNorm(width)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}")


class RotationHead(nn.Module):
    """Max+average pooled global feature -> Linear-Norm-ReLU stack -> M logits."""

    def __init__(self, in_channels: int, widths=(256, 128, 128), bins: int = 8, norm: str = "batch"):
        super().__init__()
        layers = []
        prev = 2 * in_channels
        for w in widths:
            layers += [nn.Linear(prev, w), _norm_layer(norm, w), nn.ReLU()]
            prev = w
        self.mlp = nn.Sequential(*layers)
        self.out = nn.Linear(prev, bins)

    def forward(self, p_hat: torch.Tensor) -> torch.Tensor:
        p_hat, squeeze = _batched(p_hat)
        g = torch.cat([p_hat.max(dim=1).values, p_hat.mean(dim=1)], dim=-1)
        logits = self.out(self.mlp(g))
        return logits.squeeze(0) if squeeze else logits


def _mlp(chans, negative_slope):
    layers = []
    for a, b in zip(chans[:-1], chans[1:]):
        layers += [nn.Linear(a, b), nn.LeakyReLU(negative_slope)]
    return nn.Sequential(*layers)


class DomainDiscriminator(nn.Module):
    """PointNet-style discriminator: per-point MLP, global max, MLP, sigmoid."""

    def __init__(self, in_channels: int, mlp1=(512, 256, 128), mlp2=(256, 128, 256),
                 negative_slope: float = 0.2):
        super().__init__()
        self.mlp1 = _mlp([in_channels, *mlp1], negative_slope)
        self.mlp2 = _mlp([mlp1[-1], *mlp2], negative_slope)
        self.out = nn.Linear(mlp2[-1], 1)

    def forward(self, p_hat: torch.Tensor) -> torch.Tensor:
        g = self.mlp1(p_hat).max(dim=-2).values
        return torch.sigmoid(self.out(self.mlp2(g))).squeeze(-1)


@dataclass
class OemOutput:
    p_in_s: torch.Tensor
    p_in_t: torch.Tensor
    p_out: torch.Tensor
    p_hat: torch.Tensor
    logits: torch.Tensor

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)


class OrientationModule(nn.Module):
    def __init__(self, widths=(64, 128, 256), k: int = 24, bins: int = 8, centered_bins: bool = True,
                 head_widths=(256, 128, 128), disc_mlp1=(512, 256, 128), disc_mlp2=(256, 128, 256),
                 norm: str = "batch", use_fim: bool = True, use_dam: bool = True,
                 grl_weight: float = 1.0, negative_slope: float = 0.2):
        super().__init__()
        c1 = widths[-1]
        self.k = k
        self.bins = bins
        self.centered_bins = centered_bins
        self.use_fim = use_fim
        self.use_dam = use_dam
        self.grl_weight = grl_weight
        self.encoder = OemEncoder(widths, k, negative_slope)
        self.interaction = FeatureInteraction(c1, c1, k) if use_fim else GlobalFusion(c1)
        self.refine = EdgeConv(c1, c1, negative_slope)
        self.head = RotationHead(2 * c1, head_widths, bins, norm)
        self.discriminator = DomainDiscriminator(2 * c1, disc_mlp1, disc_mlp2, negative_slope) if use_dam else None

    def encode(self, source, target):
        """Shared-weight encodings ``(p_in_s, p_in_t)``."""
        return self.encoder(source), self.encoder(target)

    def forward(self, source: torch.Tensor, target: torch.Tensor) -> OemOutput:
        source, squeeze = _batched(source)
        target, _ = _batched(target)
        graph_s = knn_indices(source, source, self.k)
        p_s = self.encoder(source, graph_s)
        p_t = self.encoder(target)
        p_out = self.interaction(p_s, p_t, source, target)
        p_hat = torch.cat([p_out, self.refine(p_out, graph_s)], dim=-1)
        logits = self.head(p_hat)
        out = OemOutput(p_s, p_t, p_out, p_hat, logits)
        if squeeze:
            out = OemOutput(*(t.squeeze(0) for t in (p_s, p_t, p_out, p_hat, logits)))
        return out

    def discriminate(self, p_hat: torch.Tensor) -> torch.Tensor:
        """Probability that ``p_hat`` comes from a real (cross-shape) pair.

        Gradients flowing back into ``p_hat`` are reversed.
        """
        if self.discriminator is None:
            raise RuntimeError("domain adaptation is disabled")
        return self.discriminator(grad_reverse(p_hat, self.grl_weight))

    def predicted_angle(self, probs: torch.Tensor) -> torch.Tensor:
        centers = bin_centers(self.bins, self.centered_bins, probs.dtype).to(probs.device)
        return centers[probs.argmax(dim=-1)]


def align_source(source: torch.Tensor, probs: torch.Tensor, centered: bool = False) -> torch.Tensor:
    """Undo the estimated relative rotation of ``source``.

    The argmax bin (lowest bin on ties) is converted to its representative
    angle ``a`` and the source is rotated by ``-a``.
    """
    bins = probs.shape[-1]
    centers = bin_centers(bins, centered, source.dtype).to(source.device)
    angle = centers[probs.detach().argmax(dim=-1)]
    return rotate_z(source, -angle)
