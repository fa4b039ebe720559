"""Synthetic deformable shape pairs with exact ground-truth correspondence.

Shapes are articulated stick figures: a cylindrical torso, four two-link
cylindrical limbs and ellipsoid blobs (head, nose, feet). Points are sampled
once per template; posing moves every point rigidly with its limb link, so
index ``i`` names the same surface point in every pose. The figure stands
along +z, faces +x and is mirror symmetric in y (left/right limbs), but has
no rotational symmetry about z thanks to the nose and feet. One unit is
treated as one centimetre.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import TWO_PI, read_cloud, read_indices, rotate_z, write_cloud, write_indices

PARTS = ("torso", "head", "nose",
         "l_upper_arm", "l_lower_arm", "r_upper_arm", "r_lower_arm",
         "l_upper_leg", "l_lower_leg", "r_upper_leg", "r_lower_leg",
         "l_foot", "r_foot")

# joint name -> (min, max) in degrees
DEFAULT_LIMITS = {
    "lean": (-15.0, 15.0),
    "head_turn": (-30.0, 30.0),
    "l_shoulder_swing": (-60.0, 60.0), "r_shoulder_swing": (-60.0, 60.0),
    "l_shoulder_abduct": (0.0, 80.0), "r_shoulder_abduct": (0.0, 80.0),
    "l_elbow": (0.0, 100.0), "r_elbow": (0.0, 100.0),
    "l_hip_swing": (-40.0, 40.0), "r_hip_swing": (-40.0, 40.0),
    "l_hip_abduct": (0.0, 25.0), "r_hip_abduct": (0.0, 25.0),
    "l_knee": (0.0, 80.0), "r_knee": (0.0, 80.0),
}
SCALE_LIMITS = (0.9, 1.1)


@dataclass
class ShapeTemplate:
    points: np.ndarray          # (P, 3) rest pose
    labels: np.ndarray          # (P,) index into PARTS
    joints: dict                # joint name -> pivot (3,)
    template_id: int = 0


@dataclass
class DeformParams:
    angles: dict = field(default_factory=dict)   # joint name -> degrees
    scale: float = 1.0

    def validate(self, limits=DEFAULT_LIMITS, scale_limits=SCALE_LIMITS) -> None:
        for name, value in self.angles.items():
            if name not in limits:
                raise ValueError(f"unknown joint {name!r}")
            lo, hi = limits[name]
            if not lo <= value <= hi:
                raise ValueError(f"joint {name!r} angle {value} outside [{lo}, {hi}]")
        if not scale_limits[0] <= self.scale <= scale_limits[1]:
            raise ValueError(f"scale {self.scale} outside {scale_limits}")


@dataclass
class ShapePair:
    source: np.ndarray
    target: np.ndarray
    gt: np.ndarray | None = None
    theta: float | None = None
    name: str = ""


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _cylinder(rng, count, start, length, radius):
    """Lateral surface of a z-aligned cylinder hanging down from ``start``."""
    phi = rng.uniform(0, TWO_PI, count)
    h = rng.uniform(0, length, count)
    return np.stack([start[0] + radius * np.cos(phi), start[1] + radius * np.sin(phi), start[2] - h], axis=1)


def _ellipsoid(rng, count, center, radii):
    v = rng.standard_normal((count, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + v * np.asarray(radii)


def make_template(template_id: int = 0, size: int = 2048) -> ShapeTemplate:
    """Sample a figure; proportions vary by up to ~10% with ``template_id``."""
    rng = np.random.default_rng([template_id, 7919])
    f = lambda base: base * rng.uniform(0.9, 1.1)  # noqa: E731
    torso_len, torso_r = f(4.0), f(0.9)
    arm_u, arm_l, arm_r = f(1.8), f(1.6), f(0.3)
    leg_u, leg_l, leg_r = f(2.0), f(2.0), f(0.38)
    shoulder_y, hip_y = torso_r + arm_r + 0.05, f(0.5)
    head_r = f(0.7)

    shoulder_z = torso_len - 0.2
    joints = {
        "hip_center": np.array([0.0, 0.0, 0.0]),
        "neck": np.array([0.0, 0.0, torso_len]),
    }
    for side, sgn in (("l", 1.0), ("r", -1.0)):
        joints[f"{side}_shoulder"] = np.array([0.0, sgn * shoulder_y, shoulder_z])
        joints[f"{side}_elbow"] = np.array([0.0, sgn * shoulder_y, shoulder_z - arm_u])
        joints[f"{side}_hip"] = np.array([0.0, sgn * hip_y, 0.0])
        joints[f"{side}_knee"] = np.array([0.0, sgn * hip_y, -leg_u])

    # (part, kind, args, relative surface area)
    prims = [("torso", "cyl", (joints["neck"], torso_len, torso_r), torso_len * torso_r),
             ("head", "ell", (joints["neck"] + [0.15, 0, head_r + 0.1], (head_r, head_r * 0.85, head_r * 1.1)),
              1.6 * head_r ** 2),
             ("nose", "ell", (joints["neck"] + [head_r + 0.2, 0, head_r + 0.1], (0.35, 0.18, 0.18)), 0.15)]
    for side in ("l", "r"):
        prims += [
            (f"{side}_upper_arm", "cyl", (joints[f"{side}_shoulder"], arm_u, arm_r), arm_u * arm_r),
            (f"{side}_lower_arm", "cyl", (joints[f"{side}_elbow"], arm_l, arm_r * 0.85), arm_l * arm_r * 0.85),
            (f"{side}_upper_leg", "cyl", (joints[f"{side}_hip"], leg_u, leg_r), leg_u * leg_r),
            (f"{side}_lower_leg", "cyl", (joints[f"{side}_knee"], leg_l, leg_r * 0.85), leg_l * leg_r * 0.85),
            (f"{side}_foot", "ell", (joints[f"{side}_knee"] + [0.45, 0, -leg_l - 0.1], (0.6, 0.25, 0.15)), 0.35),
        ]
    areas = np.array([p[3] for p in prims])
    counts = np.floor(areas / areas.sum() * size).astype(int)
    counts[0] += size - counts.sum()

    pts, labels = [], []
    for (part, kind, args, _), count in zip(prims, counts):
        sample = _cylinder(rng, count, *args) if kind == "cyl" else _ellipsoid(rng, count, *args)
        pts.append(sample)
        labels.append(np.full(count, PARTS.index(part)))
    return ShapeTemplate(np.concatenate(pts), np.concatenate(labels), joints, template_id)


def random_deform(rng: np.random.Generator, limits=DEFAULT_LIMITS, strength: float = 1.0) -> DeformParams:
    """Uniform joint angles inside ``limits`` (shrunk toward rest by ``strength``)."""
    angles = {}
    for name, (lo, hi) in limits.items():
        rest = min(max(0.0, lo), hi)
        angles[name] = rest + strength * (rng.uniform(lo, hi) - rest)
    return DeformParams(angles, float(rng.uniform(*SCALE_LIMITS)))


def deform(template: ShapeTemplate, params: DeformParams) -> np.ndarray:
    """Pose the template; returns a new ``(P, 3)`` array in the same point order."""
    params.validate()
    a = {name: math.radians(params.angles.get(name, 0.0)) for name in DEFAULT_LIMITS}
    j = template.joints
    out = template.points.copy()
    lab = template.labels

    def apply(mask, rot, pivot):
        out[mask] = (out[mask] - pivot) @ rot.T + pivot

    def part_mask(*names):
        return np.isin(lab, [PARTS.index(n) for n in names])

    for side, sgn in (("l", 1.0), ("r", -1.0)):
        # arms: elbow first (innermost), then shoulder
        apply(part_mask(f"{side}_lower_arm"), _rot_y(-a[f"{side}_elbow"]), j[f"{side}_elbow"])
        shoulder = _rot_y(-a[f"{side}_shoulder_swing"]) @ _rot_x(sgn * a[f"{side}_shoulder_abduct"])
        apply(part_mask(f"{side}_upper_arm", f"{side}_lower_arm"), shoulder, j[f"{side}_shoulder"])
        # legs: knee bends backward, feet follow the lower leg
        apply(part_mask(f"{side}_lower_leg", f"{side}_foot"), _rot_y(a[f"{side}_knee"]), j[f"{side}_knee"])
        hip = _rot_y(-a[f"{side}_hip_swing"]) @ _rot_x(sgn * a[f"{side}_hip_abduct"])
        apply(part_mask(f"{side}_upper_leg", f"{side}_lower_leg", f"{side}_foot"), hip, j[f"{side}_hip"])

    apply(part_mask("head", "nose"), _rot_z(a["head_turn"]), j["neck"])
    upper = part_mask("torso", "head", "nose", "l_upper_arm", "l_lower_arm", "r_upper_arm", "r_lower_arm")
    apply(upper, _rot_y(a["lean"]), j["hip_center"])
    return out * params.scale


def generate_pair(template: ShapeTemplate, deform_a: DeformParams, deform_b: DeformParams, n: int,
                  seed: int, shuffle: bool = False, rotate: bool = False, centered: bool = True) -> ShapePair:
    """Two posed instances of one template with exact correspondence.

    Both are subsampled with the same point indices. With ``shuffle`` the
    target rows are permuted and ``gt`` tracks where each source point went.
    With ``rotate`` the source is turned about z by ``theta ~ U[0, 2pi)``,
    recorded on the pair.
    """
    size = template.points.shape[0]
    if n > size:
        raise ValueError(f"cannot draw {n} points from a template of {size}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(size, size=n, replace=False)
    src = deform(template, deform_a)[idx]
    tgt = deform(template, deform_b)[idx]
    if centered:
        src = src - src.mean(axis=0)
        tgt = tgt - tgt.mean(axis=0)
    gt = np.arange(n)
    if shuffle:
        perm = rng.permutation(n)          # new row r holds old row perm[r]
        tgt = tgt[perm]
        gt = np.argsort(perm)              # old row i now lives at gt[i]
    theta = None
    if rotate:
        theta = float(rng.uniform(0.0, TWO_PI)) % TWO_PI
        src = rotate_z(src, theta)
    return ShapePair(src, tgt, gt, theta)


def make_dataset(count: int, n: int = 256, seed: int = 0, templates: int = 8, template_seed: int = 0,
                 same_shape: bool = False, rotation_labels: bool = False, shuffle: bool = False,
                 strength: float = 1.0) -> list[ShapePair]:
    """A list of synthetic pairs.

    Each pair picks one of ``templates`` figures (ids offset by
    ``template_seed``) and two random poses; ``same_shape`` reuses the first
    pose for the target, so the pair differs only by the optional rotation.
    """
    rng = np.random.default_rng([seed, 104729])
    pool = [make_template(template_seed + t, max(2048, n)) for t in range(templates)]
    pairs = []
    for i in range(count):
        tmpl = pool[int(rng.integers(templates))]
        da = random_deform(rng, strength=strength)
        db = da if same_shape else random_deform(rng, strength=strength)
        pair = generate_pair(tmpl, da, db, n, seed=int(rng.integers(2**31)), shuffle=shuffle,
                             rotate=rotation_labels)
        pair.name = f"pair_{i:05d}"
        pairs.append(pair)
    return pairs


MANIFEST_FIELDS = ("source", "target", "gt", "theta")


def write_dataset(pairs, directory) -> Path:
    """Write clouds, ground truth and ``manifest.csv``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for i, pair in enumerate(pairs):
            stem = pair.name or f"pair_{i:05d}"
            src, tgt = f"{stem}_src.xyz", f"{stem}_tgt.xyz"
            write_cloud(directory / src, pair.source)
            write_cloud(directory / tgt, pair.target)
            gt = ""
            if pair.gt is not None:
                gt = f"{stem}_gt.txt"
                write_indices(directory / gt, pair.gt)
            theta = "" if pair.theta is None else repr(float(pair.theta))
            writer.writerow([src, tgt, gt, theta])
    return manifest


def read_dataset(manifest) -> list[ShapePair]:
    """Load pairs listed in a manifest; relative paths resolve against its folder.

    Raises:
        FileNotFoundError: naming the first missing file.
    """
    manifest = Path(manifest)
    if not manifest.exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    root = manifest.parent
    pairs = []
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS[:2]) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{manifest}: missing columns {sorted(missing)}")
        for row in reader:
            paths = {}
            for key in ("source", "target", "gt"):
                value = (row.get(key) or "").strip()
                if not value:
                    continue
                path = root / value
                if not path.exists():
                    raise FileNotFoundError(f"{manifest}: referenced file not found: {path}")
                paths[key] = path
            theta = (row.get("theta") or "").strip()
            pairs.append(ShapePair(
                read_cloud(paths["source"]),
                read_cloud(paths["target"]),
                read_indices(paths["gt"]) if "gt" in paths else None,
                float(theta) if theta else None,
                Path(row["source"]).stem.removesuffix("_src"),
            ))
    return pairs
