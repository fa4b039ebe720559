"""Training loop, loss assembly, checkpointing and determinism plumbing."""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import cosine_similarity_matrix
from .config import Config, config_from_dict
from .ensemble import (
    TeacherStudent,
    apply_stochastic_transform,
    consistency_losses,
    ema_decay_at,
    sample_angles,
    teacher_student_forward,
)
from .geometry import rotate_z
from .losses import (
    LossWeights,
    construction_loss,
    cross_construct,
    mapping_regularizer,
    self_construct,
    total_loss,
)
from .model import CorrespondenceNet
from .orientation import angle_loss, angles_to_bins, domain_loss

MAGIC = b"SEOR1\n"
FORMAT_VERSION = "seor-checkpoint/1"

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CheckpointFormatError(ValueError):
    """Raised for unreadable, truncated or corrupted checkpoint files."""


class CheckpointVersionError(CheckpointFormatError):
    """Raised when a checkpoint was written by an incompatible format version."""


# -- state -----------------------------------------------------------------------


@dataclass
class TrainState:
    pair: TeacherStudent
    optimizer: torch.optim.Optimizer
    config: Config
    step: int = 0

    @property
    def student(self) -> CorrespondenceNet:
        return self.pair.student

    @property
    def teacher(self) -> CorrespondenceNet:
        return self.pair.teacher


def make_optimizer(params, settings) -> torch.optim.Optimizer:
    if settings.optimizer == "adam":
        return torch.optim.Adam(params, lr=settings.learning_rate)
    if settings.optimizer == "sgd":
        return torch.optim.SGD(params, lr=settings.learning_rate)
    raise ValueError(f"unknown optimizer {settings.optimizer!r}")


def build_state(config: Config) -> TrainState:
    """Fresh student, teacher copy and optimizer for ``config``."""
    config.validate()
    student = CorrespondenceNet.from_config(config).to(DTYPES[config.train.dtype])
    student.train()
    pair = TeacherStudent(student)
    return TrainState(pair, make_optimizer(student.parameters(), config.train), config)


def step_generator(seed: int, step: int, stream: int = 0) -> torch.Generator:
    """Generator for one step, derived from ``(seed, step, stream)`` only.

    Nothing carries over between steps, so a resumed run draws exactly the
    same augmentations as an unbroken one.
    """
    state = np.random.SeedSequence([seed, step, stream]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


# -- loss assembly ---------------------------------------------------------------


def _stack(clouds, dtype):
    return torch.stack([torch.as_tensor(np.asarray(c), dtype=dtype) for c in clouds])


def loss_components(state: TrainState, x: torch.Tensor, y: torch.Tensor,
                    generator: torch.Generator) -> dict:
    """All enabled loss terms for a batch of raw pairs ``(x, y)``, shape ``(B, N, 3)``.

    Switched-off terms are absent from the returned dict.
    """
    cfg = state.config
    se, lc, oc = cfg.se, cfg.loss, cfg.oem
    student = state.student
    batch = x.shape[0]

    if se.use_transform:
        x_s, y_s, theta = apply_stochastic_transform(
            x, y, se.sigma, generator=generator, rotate=se.use_rotation, noise=se.use_noise)
    else:
        x_s, y_s, theta = x, y, None

    out = teacher_student_forward(state.pair, x, y, x_s, y_s)
    comps = {}
    l_ccs, l_css = consistency_losses(out.bundle, se.beta)
    if lc.use_ccs:
        comps["ccs"] = l_ccs
    if lc.use_css:
        comps["css"] = l_css

    # Reconstructions live in the student's (aligned, augmented) frame.
    xa, fx, fy = out.x_student, out.fx_student, out.fy_student
    s_xy = out.bundle.s_xy
    y_cross = cross_construct(s_xy, y_s, lc.k)
    x_cross = cross_construct(s_xy.transpose(-1, -2), xa, lc.k)
    y_self = self_construct(fy, y_s, lc.k)
    x_self = self_construct(fx, xa, lc.k)
    weights = LossWeights.from_config(lc)
    comps["cons"] = construction_loss(y_s, y_cross, xa, x_cross, y_self, x_self, weights)
    comps["norm"] = (
        mapping_regularizer(xa, y_cross, lc.k, lc.alpha, lc.reg_sign, lc.reg_reduction)
        + mapping_regularizer(y_s, x_cross, lc.k, lc.alpha, lc.reg_sign, lc.reg_reduction)
    )

    if student.oem is not None:
        # Labelled same-shape pair: the rotated raw source against itself.
        if theta is None or not (se.use_transform and se.use_rotation):
            theta = sample_angles(batch, generator)
            sup_src = rotate_z(x, theta.to(x.dtype))
        else:
            sup_src = x_s
        sup = student.oem(sup_src, x)
        labels = angles_to_bins(theta.reshape(-1), oc.bins, oc.centered_bins)
        comps["angle"] = angle_loss(sup.probs, labels)
        if student.oem.use_dam:
            d_real = student.oem.discriminate(out.oem_student.p_hat)
            d_aug = student.oem.discriminate(sup.p_hat)
            comps["domain"] = 0.5 * (domain_loss(d_real, True, oc.gamma)
                                     + domain_loss(d_aug, False, oc.gamma))
    return comps


def train_step(state: TrainState, x, y, generator: torch.Generator | None = None) -> dict:
    """One optimisation step on a batch of pairs; returns the metrics record.

    ``x`` and ``y`` are ``(B, N, 3)`` tensors (or sequences of ``(N, 3)``
    arrays). The teacher is updated by EMA after the optimizer step.

    Raises:
        FloatingPointError: naming the first non-finite loss component.
    """
    cfg = state.config
    dtype = DTYPES[cfg.train.dtype]
    x = x.to(dtype) if torch.is_tensor(x) else _stack(x, dtype)
    y = y.to(dtype) if torch.is_tensor(y) else _stack(y, dtype)
    if generator is None:
        generator = step_generator(cfg.train.seed, state.step, 1)
    state.student.train()
    comps = loss_components(state, x, y, generator)
    weights = LossWeights.from_config(cfg.loss)
    total = total_loss(comps, weights)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    decay = ema_decay_at(state.step, cfg.train.steps, cfg.se.ema_decay, cfg.se.ema_ramp_start,
                         cfg.se.ema_ramp_fraction)
    state.pair.update_teacher(decay)
    record = {"step": state.step}
    record.update({name: v.item() for name, v in comps.items()})
    record["total"] = total.item()
    state.step += 1
    return record


def batch_indices(seed: int, step: int, count: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, step, 2])
    return rng.choice(count, size=batch_size, replace=batch_size > count)


def train(state: TrainState, pairs, steps: int | None = None, metrics_path=None,
          checkpoint_path=None, log_every: int = 0, logger=None) -> list[dict]:
    """Run until ``state.step`` reaches ``steps`` (default: the configured total).

    Returns the metrics records of the steps run in this call. Records are
    appended to ``metrics_path`` as JSON lines when given.
    """
    cfg = state.config
    steps = cfg.train.steps if steps is None else steps
    dtype = DTYPES[cfg.train.dtype]
    xs = _stack([p.source for p in pairs], dtype)
    ys = _stack([p.target for p in pairs], dtype)
    records = []
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        while state.step < steps:
            idx = torch.as_tensor(batch_indices(cfg.train.seed, state.step, len(pairs),
                                                cfg.train.batch_size))
            rec = train_step(state, xs[idx], ys[idx])
            records.append(rec)
            if sink:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
            if logger and log_every and rec["step"] % log_every == 0:
                logger.info("step %d total %.5f", rec["step"], rec["total"])
            every = cfg.train.checkpoint_every
            if checkpoint_path and every and state.step % every == 0:
                save_checkpoint(state, checkpoint_path)
    finally:
        if sink:
            sink.close()
    return records


# -- orientation-only training -----------------------------------------------------


def train_orientation(oem, pairs, steps: int, batch_size: int = 8, learning_rate: float = 1e-3,
                      seed: int = 0, resample_rotation: bool = True, cosine: bool = True,
                      time_limit: float | None = None):
    """Fit the rotation head alone on labelled same-shape pairs.

    Each pair is ``(R(theta) X, X)``. With ``resample_rotation`` every draw
    applies a fresh angle to the unrotated target, so the labels are not
    memorised per pair. ``cosine`` anneals the learning rate to zero over
    ``steps``. Returns the list of per-step angle losses.
    """
    import time

    dtype = next(oem.parameters()).dtype
    targets = _stack([p.target for p in pairs], dtype)
    thetas = torch.tensor([p.theta or 0.0 for p in pairs], dtype=torch.float64)
    opt = torch.optim.Adam(oem.parameters(), lr=learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps) if cosine else None
    oem.train()
    losses = []
    start = time.monotonic()
    for step in range(steps):
        gen = step_generator(seed, step, 3)
        idx = torch.as_tensor(batch_indices(seed, step, len(pairs), batch_size))
        y = targets[idx]
        theta = sample_angles(len(idx), gen) if resample_rotation else thetas[idx]
        x = rotate_z(y, theta.to(dtype))
        out = oem(x, y)
        loss = angle_loss(out.probs, angles_to_bins(theta, oem.bins, oem.centered_bins))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        losses.append(loss.item())
        if time_limit is not None and time.monotonic() - start > time_limit:
            break
    oem.eval()
    return losses


@torch.no_grad()
def orientation_accuracy(oem, pairs) -> float:
    """Fraction of labelled pairs whose predicted bin equals the label bin."""
    oem.eval()
    dtype = next(oem.parameters()).dtype
    hits = 0
    for p in pairs:
        out = oem(torch.as_tensor(p.source, dtype=dtype), torch.as_tensor(p.target, dtype=dtype))
        label = angles_to_bins(torch.tensor([p.theta]), oem.bins, oem.centered_bins)[0]
        hits += int(out.logits.argmax()) == int(label)
    return hits / len(pairs)


# -- checkpoints -----------------------------------------------------------------
#
# Layout: MAGIC, u64 header length, JSON header, raw tensor bytes, sha256 of
# everything before it. The header stores the nested state with tensors
# replaced by references into the byte section, so the file is deterministic
# and int dict keys (optimizer state) survive the round trip.


def _encode(value, blobs):
    if torch.is_tensor(value):
        t = value.detach().cpu().contiguous()
        blobs.append(t.numpy().tobytes() if t.numel() else b"")
        return {"tensor": len(blobs) - 1, "dtype": str(t.dtype).replace("torch.", ""),
                "shape": list(t.shape)}
    if isinstance(value, dict):
        return {"dict": [[_encode(k, blobs), _encode(v, blobs)] for k, v in value.items()]}
    if isinstance(value, tuple):
        return {"tuple": [_encode(v, blobs) for v in value]}
    if isinstance(value, list):
        return {"list": [_encode(v, blobs) for v in value]}
    if value is None or isinstance(value, (bool, int, float, str)):
        return {"value": value}
    raise TypeError(f"cannot serialise {type(value).__name__}")


def _decode(node, blobs):
    if "tensor" in node:
        dtype = getattr(torch, node["dtype"])
        raw = blobs[node["tensor"]]
        arr = np.frombuffer(raw, dtype=torch.empty((), dtype=dtype).numpy().dtype).copy()
        return torch.from_numpy(arr).reshape(node["shape"])
    if "dict" in node:
        return {_decode(k, blobs): _decode(v, blobs) for k, v in node["dict"]}
    if "tuple" in node:
        return tuple(_decode(v, blobs) for v in node["tuple"])
    if "list" in node:
        return [_decode(v, blobs) for v in node["list"]]
    return node["value"]


def checkpoint_bytes(state: TrainState) -> bytes:
    blobs: list[bytes] = []
    body = {
        "student": _encode(state.student.state_dict(), blobs),
        "teacher": _encode(state.teacher.state_dict(), blobs),
        "optimizer": _encode(state.optimizer.state_dict(), blobs),
    }
    sizes = [len(b) for b in blobs]
    header = {"format_version": FORMAT_VERSION, "step": state.step,
              "config": state.config.to_dict(), "sizes": sizes, "state": body}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    for b in blobs:
        buf.write(b)
    data = buf.getvalue()
    return data + hashlib.sha256(data).digest()


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)


def _parse(data: bytes, source: str):
    if not data.startswith(MAGIC):
        raise CheckpointFormatError(f"{source}: not a checkpoint (bad magic header)")
    if len(data) < len(MAGIC) + 8 + 32:
        raise CheckpointFormatError(f"{source}: truncated checkpoint")
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointFormatError(f"{source}: checksum mismatch, file is corrupted")
    (head_len,) = struct.unpack("<Q", payload[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(payload[start:start + head_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{source}: unreadable header ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{source}: checkpoint format {version!r} is not supported (expected {FORMAT_VERSION!r})")
    blobs, offset = [], start + head_len
    for size in header["sizes"]:
        blobs.append(payload[offset:offset + size])
        offset += size
    if offset != len(payload):
        raise CheckpointFormatError(f"{source}: tensor section length mismatch")
    return header, blobs


def load_checkpoint(path) -> TrainState:
    """Rebuild the full training state written by :func:`save_checkpoint`.

    Raises:
        CheckpointFormatError: bad magic, checksum or layout.
        CheckpointVersionError: a different format version.
    """
    path = Path(path)
    header, blobs = _parse(path.read_bytes(), str(path))
    config = config_from_dict(header["config"])
    state = build_state(config)
    body = header["state"]
    state.student.load_state_dict(_decode(body["student"], blobs))
    state.teacher.load_state_dict(_decode(body["teacher"], blobs))
    state.optimizer.load_state_dict(_decode(body["optimizer"], blobs))
    state.step = header["step"]
    return state


def similarity(model: CorrespondenceNet, source, target) -> torch.Tensor:
    """Inference similarity matrix in eval mode without gradients."""
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        _, fx, fy, _ = model.embed(torch.as_tensor(np.asarray(source), dtype=dtype),
                                   torch.as_tensor(np.asarray(target), dtype=dtype))
        return cosine_similarity_matrix(fx, fy)
