"""Inference, correspondence metrics, test-set augmentation and accuracy curves."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import TWO_PI, add_gaussian_noise, max_diameter, point_distances, rotate_z
from .synth import ShapePair

DEFAULT_TOLERANCES = (0.0, 0.01, 0.02, 0.05, 0.10, 0.20)


@dataclass
class CorrespondenceResult:
    mapping: np.ndarray                       # target index per source point
    distances: np.ndarray | None = None       # |y[mapping] - y[gt]| once scored

    def __post_init__(self):
        self.mapping = np.asarray(self.mapping, dtype=np.int64)


@dataclass
class MetricsReport:
    err: float
    acc: dict = field(default_factory=dict)   # tolerance -> mean accuracy
    n_pairs: int = 0

    def table(self) -> list[tuple[float, float]]:
        return sorted(self.acc.items())

    def to_dict(self) -> dict:
        return {"err": self.err, "acc": {repr(float(k)): v for k, v in self.table()},
                "n_pairs": self.n_pairs}


def infer_correspondence(S) -> CorrespondenceResult:
    """Row-wise argmax of a similarity matrix; ties go to the lowest column."""
    s = S.detach().cpu().numpy() if torch.is_tensor(S) else np.asarray(S)
    return CorrespondenceResult(np.argmax(s, axis=-1))


def _check(result, y, gt):
    y = np.asarray(y, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.int64)
    m = result.mapping
    if m.shape != gt.shape:
        raise ValueError(f"mapping has {m.shape[0]} entries, gt has {gt.shape[0]}")
    if m.size and (m.min() < 0 or m.max() >= y.shape[0]):
        raise ValueError("mapping refers to points outside the target cloud")
    return y, gt


def mapping_distances(result: CorrespondenceResult, y, gt) -> np.ndarray:
    """Euclidean distance between the predicted and true target of each source point."""
    y, gt = _check(result, y, gt)
    return point_distances(y[result.mapping], y[gt])


def correspondence_error(result: CorrespondenceResult, y, gt) -> float:
    """Mean distance between predicted and true targets (1 unit = 1 cm)."""
    d = mapping_distances(result, y, gt)
    result.distances = d
    return math.fsum(d.tolist()) / len(d)


def correspondence_accuracy(result: CorrespondenceResult, y, gt, eps: float,
                            diameter: float | None = None) -> float:
    """Fraction of points whose error is strictly below ``eps`` times the target diameter."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    d = mapping_distances(result, y, gt)
    diameter = max_diameter(np.asarray(y, dtype=np.float64)) if diameter is None else diameter
    return int(np.count_nonzero(d < eps * diameter)) / len(d)


def accuracy_curve(results, tolerances=DEFAULT_TOLERANCES) -> MetricsReport:
    """Pair-averaged ``err`` and ``acc`` at each tolerance.

    ``results`` is a sequence of ``(CorrespondenceResult, y, gt)`` triples.
    """
    tolerances = [float(t) for t in tolerances]
    if tolerances != sorted(tolerances):
        raise ValueError("tolerances must be sorted ascending")
    errs, accs = [], {t: [] for t in tolerances}
    for result, y, gt in results:
        y = np.asarray(y, dtype=np.float64)
        errs.append(correspondence_error(result, y, gt))
        diameter = max_diameter(y)
        for t in tolerances:
            accs[t].append(correspondence_accuracy(result, y, gt, t, diameter))
    n = len(errs)
    if n == 0:
        return MetricsReport(float("nan"), {t: float("nan") for t in tolerances}, 0)
    return MetricsReport(math.fsum(errs) / n, {t: math.fsum(v) / n for t, v in accs.items()}, n)


def augment_test_set(pairs, use_noise: bool = False, use_rotation: bool = False,
                     sigma: float = 0.1, seed: int = 0) -> list[ShapePair]:
    """Noisy and/or rotated copies of test pairs.

    Noise is added to both clouds; the rotation is a random z-angle applied
    to the source. Point order and ground truth are untouched.
    """
    rng = np.random.default_rng([seed, 7919])
    out = []
    for p in pairs:
        src = np.array(p.source, dtype=np.float64)
        tgt = np.array(p.target, dtype=np.float64)
        theta = p.theta
        if use_rotation:
            angle = float(rng.uniform(0.0, TWO_PI))
            src = rotate_z(src, angle)
            theta = ((theta or 0.0) + angle) % TWO_PI
        if use_noise:
            src = add_gaussian_noise(src, sigma, seed=int(rng.integers(2**31)))
            tgt = add_gaussian_noise(tgt, sigma, seed=int(rng.integers(2**31)))
        out.append(ShapePair(src, tgt, np.array(p.gt), theta, p.name))
    return out


def random_results(pairs, seed: int = 0):
    """Uniformly random mappings, the chance baseline for :func:`accuracy_curve`."""
    rng = np.random.default_rng([seed, 31337])
    return [(CorrespondenceResult(rng.integers(0, len(p.target), size=len(p.source))), p.target, p.gt)
            for p in pairs]


def predict_pairs(model, pairs):
    """Run ``model`` on every pair; returns ``(result, y, gt)`` triples."""
    from .training import similarity

    return [(infer_correspondence(similarity(model, p.source, p.target)), p.target, p.gt)
            for p in pairs]


def evaluate(model, pairs, tolerances=DEFAULT_TOLERANCES) -> tuple[MetricsReport, list[dict]]:
    """Aggregate report plus one record per pair."""
    triples = predict_pairs(model, pairs)
    records = []
    for (result, y, gt), p in zip(triples, pairs):
        single = accuracy_curve([(result, y, gt)], tolerances)
        records.append({"pair": p.name, "err": single.err,
                        "acc": {repr(k): v for k, v in single.table()}})
    return accuracy_curve(triples, tolerances), records


def write_report(report: MetricsReport, records, path) -> None:
    """JSON lines: one record per pair, then an aggregate record."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
        fh.write(json.dumps({"aggregate": report.to_dict()}) + "\n")


def read_report(path) -> MetricsReport:
    for line in reversed(Path(path).read_text().splitlines()):
        rec = json.loads(line)
        if "aggregate" in rec:
            agg = rec["aggregate"]
            return MetricsReport(agg["err"], {float(k): v for k, v in agg["acc"].items()},
                                 agg["n_pairs"])
    raise ValueError(f"{path}: no aggregate record")


def plot_accuracy(report: MetricsReport, path, label: str | None = None) -> None:
    """Static accuracy-vs-tolerance plot (format from the file suffix)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tol, acc = zip(*report.table())
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(tol, [100 * a for a in acc], marker="o", label=label or f"err {report.err:.2f}")
    ax.set_xlabel("error tolerance")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
