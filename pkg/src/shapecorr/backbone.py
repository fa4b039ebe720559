"""Static-graph DGCNN feature extractor and cosine similarity."""

from __future__ import annotations

import warnings

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import knn_indices


class ZeroNormWarning(RuntimeWarning):
    pass


# number of zero-norm feature rows seen by cosine_similarity_matrix
zero_norm_events = 0


def gather_rows(values: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``values[b, idx[b, i, j]]`` for ``values (B, N, C)``, ``idx (B, M, k)``."""
    b, n, c = values.shape
    _, m, k = idx.shape
    offset = torch.arange(b, device=idx.device).view(b, 1, 1) * n
    flat = values.reshape(b * n, c)
    return flat.index_select(0, (idx + offset).reshape(-1)).view(b, m, k, c)


class _NeighborMax(torch.autograd.Function):
    """Max over gathered neighbour rows with a sparse backward.

    Forward takes the elementwise max across the ``k`` gathered slabs; the
    gradient goes to the first neighbour attaining it, scattered straight
    into the source rows.
    """

    @staticmethod
    def forward(ctx, flat, rows):
        # flat (R, C); rows (k, M) indices into flat
        k, m = rows.shape
        gathered = flat.index_select(0, rows.reshape(-1)).view(k, m, -1)
        best = gathered.amax(dim=0)
        arg = torch.zeros(best.shape, dtype=torch.long)
        for j in range(k - 1, -1, -1):
            arg = torch.where(gathered[j] == best, j, arg)
        ctx.save_for_backward(torch.gather(rows.t(), 1, arg))    # winning row per (m, c)
        ctx.num_rows = flat.shape[0]
        return best

    @staticmethod
    def backward(ctx, grad):
        (src,) = ctx.saved_tensors
        out = torch.zeros(ctx.num_rows, grad.shape[1], dtype=grad.dtype)
        return out.scatter_add_(0, src, grad), None


def neighbor_max(values: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``max_j values[b, idx[b, i, j]]`` for ``values (B, N, C)``, ``idx (B, M, k)``."""
    b, n, c = values.shape
    _, m, k = idx.shape
    offset = torch.arange(b, device=idx.device).view(b, 1, 1) * n
    rows = (idx + offset).reshape(b * m, k).t().contiguous()
    return _NeighborMax.apply(values.reshape(b * n, c), rows).view(b, m, c)


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 2:
        return x.unsqueeze(0), True
    return x, False


class EdgeConv(nn.Module):
    """EdgeConv block with a linear edge map and max aggregation.

    For a centre ``x_i`` with neighbours ``x_j`` the edge feature is
    ``W [x_i, x_j - x_i] + b``; edges are max-pooled over the ``k`` neighbours
    and passed through the activation. ``W`` is split into the blocks that act
    on ``x_i`` and on ``x_j - x_i``, which lets the max be taken over a gather
    of per-point projections instead of materialising ``N x k x 2C`` edges.
    The result is identical to the direct evaluation.

    ``neighbors`` may come from a different set than ``x`` (query-based
    convolution); by default the centres are their own neighbour set.
    """

    def __init__(self, in_channels: int, out_channels: int, negative_slope: float = 0.2,
                 activation: str = "leaky_relu"):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.negative_slope = negative_slope
        self.activation = activation
        self.edge = nn.Linear(2 * in_channels, out_channels)

    def forward(self, x: torch.Tensor, graph: torch.Tensor,
                neighbors: torch.Tensor | None = None) -> torch.Tensor:
        x, squeeze = _batched(x)
        graph, _ = _batched(graph)
        neighbors = x if neighbors is None else _batched(neighbors)[0]
        if x.shape[-1] != self.in_channels or neighbors.shape[-1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[-1]}")
        w_center, w_diff = self.edge.weight.split(self.in_channels, dim=1)
        h_nb = F.linear(neighbors, w_diff)
        pooled = neighbor_max(h_nb, graph)
        out = F.linear(x, w_center - w_diff, self.edge.bias) + pooled
        out = self._activate(out)
        return out.squeeze(0) if squeeze else out

    def edge_tensor(self, x: torch.Tensor, graph: torch.Tensor,
                    neighbors: torch.Tensor | None = None) -> torch.Tensor:
        """Explicit ``(B, N, k, 2C)`` edge tensor ``[x_i, x_j - x_i]``."""
        x, _ = _batched(x)
        graph, _ = _batched(graph)
        neighbors = x if neighbors is None else _batched(neighbors)[0]
        nb = gather_rows(neighbors, graph)
        center = x.unsqueeze(2).expand_as(nb)
        return torch.cat([center, nb - center], dim=-1)

    def _activate(self, out):
        if self.activation == "leaky_relu":
            return F.leaky_relu(out, self.negative_slope)
        if self.activation == "relu":
            return F.relu(out)
        return out


class DGCNN(nn.Module):
    """Four EdgeConv blocks on one coordinate-space kNN graph.

    The graph is built once from the input coordinates and reused by every
    block. Block outputs are concatenated and projected per point to the
    embedding width (``concat=False`` projects the last block only).
    """

    def __init__(self, widths=(64, 64, 128, 256), out_channels: int = 512, k: int = 10,
                 negative_slope: float = 0.2, concat: bool = True):
        super().__init__()
        if len(widths) != 4:
            raise ValueError(f"backbone needs exactly four EdgeConv blocks, got {len(widths)}")
        self.k = k
        self.concat = concat
        self.out_channels = out_channels
        chans = [3, *widths]
        self.blocks = nn.ModuleList(
            EdgeConv(chans[i], chans[i + 1], negative_slope) for i in range(4)
        )
        proj_in = sum(widths) if concat else widths[-1]
        self.project = nn.Linear(proj_in, out_channels)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        points, squeeze = _batched(points)
        if points.shape[-2] < self.k:
            raise ValueError(f"cloud has {points.shape[-2]} points, fewer than k={self.k}")
        graph = knn_indices(points, points, self.k)
        feats = []
        h = points
        for block in self.blocks:
            h = block(h, graph)
            feats.append(h)
        out = self.project(torch.cat(feats, dim=-1) if self.concat else h)
        return out.squeeze(0) if squeeze else out


def cosine_similarity_matrix(fx: torch.Tensor, fy: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """``s_ij = <fx_i, fy_j> / (|fx_i| |fy_j|)`` for ``(..., N, C)`` inputs.

    Row norms below ``eps`` are clamped to ``eps`` (the row then yields zeros
    instead of NaN) and a :class:`ZeroNormWarning` is emitted.
    """
    global zero_norm_events
    if fx.shape[-1] != fy.shape[-1]:
        raise ValueError(f"feature widths differ: {fx.shape[-1]} vs {fy.shape[-1]}")
    nx = torch.linalg.vector_norm(fx, dim=-1, keepdim=True)
    ny = torch.linalg.vector_norm(fy, dim=-1, keepdim=True)
    small = int((nx < eps).sum()) + int((ny < eps).sum())
    if small:
        zero_norm_events += small
        warnings.warn(f"{small} zero-norm feature rows clamped to eps={eps}", ZeroNormWarning,
                      stacklevel=2)
    return (fx / nx.clamp_min(eps)) @ (fy / ny.clamp_min(eps)).transpose(-1, -2)
