"""Mean-teacher machinery: stochastic transforms, EMA, consistency losses."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import cosine_similarity_matrix
from .geometry import TWO_PI, add_gaussian_noise, rotate_z
from .model import CorrespondenceNet
from .orientation import OemOutput


def sample_angles(count: int, generator: torch.Generator) -> torch.Tensor:
    """``count`` angles uniform on ``[0, 2*pi)`` (float64)."""
    theta = torch.rand(count, generator=generator, dtype=torch.float64) * TWO_PI
    return torch.where(theta >= TWO_PI, torch.zeros_like(theta), theta)


def apply_stochastic_transform(x, y, sigma, seed=None, generator=None, theta=None,
                               rotate=True, noise=True):
    """Augment a pair for the student branch.

    ``y_s = y + n`` and ``x_s = R(theta) x + n'`` with independent Gaussian
    noise. Point order is preserved in both clouds. ``theta`` is sampled
    uniformly per batch entry unless given.

    Returns:
        ``(x_s, y_s, theta)``; ``theta`` is a float64 tensor with one angle per
        batch entry (a 0-d tensor for unbatched input).
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if generator is None:
        generator = torch.Generator().manual_seed(seed or 0)
    batch = x.shape[0] if x.dim() == 3 else None
    if theta is None:
        theta = sample_angles(batch or 1, generator) if rotate else torch.zeros(batch or 1, dtype=torch.float64)
        theta = theta if batch else theta[0]
    theta = torch.as_tensor(theta, dtype=torch.float64)
    sig = sigma if noise else 0.0
    y_s = add_gaussian_noise(y, sig, generator=generator)
    x_s = add_gaussian_noise(rotate_z(x, theta.to(x.dtype)), sig, generator=generator)
    return x_s, y_s, theta


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, decay: float) -> nn.Module:
    """``teacher = decay * teacher + (1 - decay) * student`` for every float tensor.

    Parameters and floating-point buffers (e.g. normalisation statistics) are
    both averaged; integer buffers are copied.
    """
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must lie in [0, 1], got {decay}")
    t_state = teacher.state_dict()
    s_state = student.state_dict()
    if t_state.keys() != s_state.keys():
        raise ValueError("teacher and student have different parameter sets")
    for name, t in t_state.items():
        s = s_state[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        if t.is_floating_point():
            t.copy_(decay * t + (1.0 - decay) * s)
        else:
            t.copy_(s)
    return teacher


def ema_decay_at(step: int, total_steps: int, decay: float, ramp_start: float | None = 0.99,
                 ramp_fraction: float = 0.1) -> float:
    """Decay for ``step``: linear ramp from ``ramp_start`` to ``decay`` over the
    first ``ramp_fraction`` of training, constant afterwards.
    """
    if ramp_start is None or ramp_fraction <= 0:
        return decay
    ramp_steps = ramp_fraction * total_steps
    if step >= ramp_steps:
        return decay
    return ramp_start + (decay - ramp_start) * step / ramp_steps


def smooth_l1(a: torch.Tensor, b: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Mean Smooth-L1: ``0.5 d^2 / beta`` if ``|d| < beta`` else ``|d| - beta / 2``."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    return F.smooth_l1_loss(a, b, beta=beta)


@dataclass
class SimilarityBundle:
    t_xy: torch.Tensor
    t_xx: torch.Tensor
    s_xy: torch.Tensor
    s_xx: torch.Tensor


def consistency_losses(bundle: SimilarityBundle, beta: float = 1.0):
    """Cross- and self-similarity consistency of the student against the teacher.

    Teacher matrices are detached (soft labels).
    """
    l_ccs = smooth_l1(bundle.s_xy, bundle.t_xy.detach(), beta)
    l_css = smooth_l1(bundle.s_xx, bundle.t_xx.detach(), beta)
    return l_ccs, l_css


class TeacherStudent:
    """Student network plus an EMA teacher of identical shape."""

    def __init__(self, student: CorrespondenceNet, teacher: CorrespondenceNet | None = None):
        self.student = student
        self.teacher = teacher if teacher is not None else copy.deepcopy(student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.teacher.eval()

    def update_teacher(self, decay: float) -> None:
        ema_update(self.teacher, self.student, decay)


@dataclass
class ForwardOutputs:
    bundle: SimilarityBundle
    x_teacher: torch.Tensor        # teacher-aligned raw source
    x_student: torch.Tensor        # student-aligned augmented source
    fx_student: torch.Tensor
    fy_student: torch.Tensor
    oem_student: OemOutput | None


def teacher_student_forward(state: TeacherStudent, x, y, x_s, y_s) -> ForwardOutputs:
    """Run the teacher on the raw pair and the student on the augmented pair.

    Each branch aligns its own source with its own orientation module before
    embedding. Teacher outputs carry no gradient.
    """
    with torch.no_grad():
        x_t, fx_t, fy_t, _ = state.teacher.embed(x, y)
        t_xy = cosine_similarity_matrix(fx_t, fy_t)
        t_xx = cosine_similarity_matrix(fx_t, fx_t)
    x_st, fx_s, fy_s, oem_s = state.student.embed(x_s, y_s)
    bundle = SimilarityBundle(
        t_xy=t_xy,
        t_xx=t_xx,
        s_xy=cosine_similarity_matrix(fx_s, fy_s),
        s_xx=cosine_similarity_matrix(fx_s, fx_s),
    )
    return ForwardOutputs(bundle, x_t, x_st, fx_s, fy_s, oem_s)
