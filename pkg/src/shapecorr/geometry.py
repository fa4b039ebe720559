"""Geometric primitives shared by every other module.

Point clouds are ``(..., N, 3)`` arrays; index ``i`` of an augmented clone is
the same physical point as index ``i`` of the original, so none of these
functions reorder points unless that is their job (``downsample``).
Functions accept numpy arrays or torch tensors where noted and return the
same kind.
"""

from __future__ import annotations

import math

import numpy as np
import torch

TWO_PI = 2.0 * math.pi


def rotate_z(cloud, angle):
    """Rotate points about the vertical z-axis.

    Args:
        cloud: ``(..., N, 3)`` numpy array or tensor.
        angle: radians; a scalar, or one angle per leading batch entry.

    Returns:
        Rotated cloud of the same kind and shape. z-coordinates are copied
        through untouched.
    """
    if isinstance(cloud, np.ndarray):
        a = np.asarray(angle, dtype=cloud.dtype)
        c, s = np.cos(a), np.sin(a)
        if a.ndim:
            c = c.reshape(a.shape + (1,) * (cloud.ndim - 1 - a.ndim))
            s = s.reshape(c.shape)
        x, y, z = cloud[..., 0], cloud[..., 1], cloud[..., 2]
        return np.stack([c * x - s * y, s * x + c * y, z], axis=-1)

    a = torch.as_tensor(angle, dtype=cloud.dtype, device=cloud.device)
    c, s = torch.cos(a), torch.sin(a)
    if a.ndim:
        c = c.reshape(a.shape + (1,) * (cloud.ndim - 1 - a.ndim))
        s = s.reshape(c.shape)
    x, y, z = cloud[..., 0], cloud[..., 1], cloud[..., 2]
    return torch.stack([c * x - s * y, s * x + c * y, z], dim=-1)


def add_gaussian_noise(cloud, sigma, seed=None, generator=None):
    """Perturb every coordinate with independent N(0, sigma^2) noise.

    Exactly one of ``seed`` / ``generator`` drives the sampling (a fresh
    generator seeded with 0 is used if neither is given). numpy inputs use a
    numpy ``Generator``; tensors use a torch ``Generator``.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if isinstance(cloud, np.ndarray):
        rng = generator if generator is not None else np.random.default_rng(seed or 0)
        if sigma == 0:
            return cloud.copy()
        return cloud + sigma * rng.standard_normal(cloud.shape).astype(cloud.dtype)

    if generator is None:
        generator = torch.Generator().manual_seed(seed or 0)
    if sigma == 0:
        return cloud.clone()
    noise = torch.randn(cloud.shape, generator=generator, dtype=cloud.dtype)
    return cloud + sigma * noise.to(cloud.device)


def pairwise_sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distances between rows, ``(..., Na, Nb)``.

    Uses explicit differences (not the Gram expansion) so a row's distance to
    itself is exactly zero and the result is smooth for autograd.
    """
    diff = a.unsqueeze(-2) - b.unsqueeze(-3)
    return (diff * diff).sum(-1)


def knn_indices(query: torch.Tensor, reference: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` nearest reference rows for every query row.

    Works in any dimension (coordinates or features). Rows of the result are
    sorted by nondecreasing distance; equal distances keep the lower index.

    Args:
        query: ``(..., Nq, C)``.
        reference: ``(..., Nr, C)``.
        k: neighbourhood size, ``1 <= k <= Nr``.

    Returns:
        ``(..., Nq, k)`` int64 tensor.
    """
    n_ref = reference.shape[-2]
    if k < 1 or k > n_ref:
        raise ValueError(f"k must be in [1, {n_ref}], got {k}")
    with torch.no_grad():
        if query.shape[-1] <= 8:
            d = pairwise_sq_dists(query, reference)
        else:
            d = torch.cdist(query, reference, compute_mode="donot_use_mm_for_euclid_dist")
        return _smallest_k(d, k)


def _smallest_k(d: torch.Tensor, k: int) -> torch.Tensor:
    """Column indices of the ``k`` smallest entries per row, ties to the lower index.

    ``topk`` gives the candidate set; rows where the k-th value is tied
    with an entry outside it are redone with a full stable sort.
    """
    vals, idx = torch.topk(d, k, dim=-1, largest=False, sorted=False)
    kth = vals.max(dim=-1, keepdim=True).values
    if bool(((d <= kth).sum(-1) > k).any()):
        return torch.sort(d, dim=-1, stable=True).indices[..., :k]
    # order the candidates by (distance, index)
    idx, pos = idx.sort(dim=-1)
    vals = vals.gather(-1, pos)
    order = torch.sort(vals, dim=-1, stable=True).indices
    return idx.gather(-1, order)


def chamfer_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Symmetric Chamfer distance with squared nearest-neighbour distances.

    ``mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2``; leading batch dims give
    one value per batch entry.
    """
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ValueError("chamfer_distance needs nonempty clouds")
    d = pairwise_sq_dists(a, b)
    return d.min(dim=-1).values.mean(-1) + d.min(dim=-2).values.mean(-1)


def point_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean distance between matching rows of two ``(N, 3)`` arrays."""
    dx = a[:, 0] - b[:, 0]
    dy = a[:, 1] - b[:, 1]
    dz = a[:, 2] - b[:, 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def max_diameter(cloud: np.ndarray) -> float:
    """Largest pairwise Euclidean distance in a cloud (0 for a single point)."""
    cloud = np.asarray(cloud, dtype=np.float64)
    best = 0.0
    for i in range(cloud.shape[0] - 1):
        rest = cloud[i + 1:]
        d = point_distances(np.broadcast_to(cloud[i], rest.shape), rest)
        best = max(best, float(d.max()))
    return best


def downsample(cloud: np.ndarray, n: int, seed: int):
    """Uniform random subset of ``n`` points without replacement.

    Returns:
        ``(subset, indices)`` where ``subset = cloud[indices]``.
    """
    total = cloud.shape[0]
    if n > total or n < 1:
        raise ValueError(f"cannot draw {n} points from a cloud of {total}")
    idx = np.random.default_rng(seed).choice(total, size=n, replace=False)
    return cloud[idx], idx


def downsample_pair(source, target, n, seed, gt=None, shared_identity=True):
    """Downsample a source/target pair while keeping ground truth valid.

    With ``shared_identity`` (synthetic pairs whose ``gt`` is a bijection) the
    same physical points are kept on both sides, so the remapped ground truth is
    again a bijection. Otherwise both clouds are subsampled independently and
    each retained source point is mapped to the retained target point nearest
    to its original match.

    Returns:
        ``(source_sub, target_sub, gt_sub)``.
    """
    if gt is None:
        if source.shape[0] != target.shape[0]:
            raise ValueError("gt is required when clouds differ in size")
        gt = np.arange(source.shape[0])
    gt = np.asarray(gt)
    src, src_idx = downsample(source, n, seed)
    if shared_identity:
        tgt_idx = gt[src_idx]
        return src, target[tgt_idx], np.arange(n)

    tgt, tgt_idx = downsample(target, n, seed + 1)
    matched = torch.from_numpy(np.ascontiguousarray(target[gt[src_idx]], dtype=np.float64))
    kept = torch.from_numpy(np.ascontiguousarray(tgt, dtype=np.float64))
    new_gt = knn_indices(matched, kept, 1)[:, 0].numpy()
    return src, tgt, new_gt


# -- text file formats -------------------------------------------------------


def write_cloud(path, cloud) -> None:
    """Write ``<N>`` then N lines of ``x y z``."""
    cloud = np.asarray(cloud, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(f"{cloud.shape[0]}\n")
        for x, y, z in cloud.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")


def read_cloud(path) -> np.ndarray:
    """Read a cloud written by :func:`write_cloud`.

    Raises:
        ValueError: with the 1-based line number of the first malformed line.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty point-cloud file")
    try:
        n = int(lines[0].strip())
    except ValueError:
        raise ValueError(f"{path}:1: expected point count, got {lines[0]!r}") from None
    if len(lines) - 1 < n:
        raise ValueError(f"{path}: header says {n} points but file has {len(lines) - 1}")
    out = np.empty((n, 3), dtype=np.float64)
    for i in range(n):
        parts = lines[i + 1].split()
        try:
            if len(parts) != 3:
                raise ValueError
            out[i] = [float(p) for p in parts]
        except ValueError:
            raise ValueError(f"{path}:{i + 2}: malformed coordinate line {lines[i + 1]!r}") from None
    if not np.isfinite(out).all():
        raise ValueError(f"{path}: non-finite coordinates")
    return out


def write_indices(path, indices) -> None:
    """One 0-based integer index per line (ground-truth and mapping files)."""
    with open(path, "w") as fh:
        for i in np.asarray(indices, dtype=np.int64):
            fh.write(f"{int(i)}\n")


def read_indices(path) -> np.ndarray:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(int(line))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed index line {line.rstrip()!r}") from None
    return np.asarray(out, dtype=np.int64)
