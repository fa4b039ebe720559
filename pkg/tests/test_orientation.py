import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from shapecorr.backbone import gather_rows
from shapecorr.geometry import TWO_PI, knn_indices, rotate_z
from shapecorr.orientation import (
    DomainDiscriminator,
    FeatureInteraction,
    OemEncoder,
    OrientationModule,
    RotationHead,
    align_source,
    angle_loss,
    angle_to_bin,
    bin_to_angle,
    domain_loss,
    grad_reverse,
)


def small_oem(**kw):
    args = dict(widths=(8, 8, 16), k=6, head_widths=(16, 16, 16), disc_mlp1=(16, 16, 8),
                disc_mlp2=(8, 8, 8), norm="layer")
    args.update(kw)
    torch.manual_seed(0)
    return OrientationModule(**args).double()


# -- bins ------------------------------------------------------------------------


def test_angle_to_bin_edges():
    assert angle_to_bin(0.0, 8) == 0
    assert angle_to_bin(math.pi, 8) == 4
    assert angle_to_bin(TWO_PI - 1e-9, 8) == 7


@pytest.mark.parametrize("angle", [-0.1, TWO_PI, 7.0])
def test_angle_to_bin_rejects_out_of_range(angle):
    with pytest.raises(ValueError):
        angle_to_bin(angle, 8)


def test_bin_to_angle_centres():
    assert math.degrees(bin_to_angle(0, 8)) == pytest.approx(22.5)
    assert bin_to_angle(2, 4) == pytest.approx(5 * math.pi / 4)
    with pytest.raises(ValueError):
        bin_to_angle(8, 8)


@pytest.mark.parametrize("centered", [False, True])
@pytest.mark.parametrize("bins", [4, 8, 12])
def test_bin_round_trip(bins, centered):
    for b in range(bins):
        assert angle_to_bin(bin_to_angle(b, bins, centered), bins, centered) == b


def test_eight_bins_span_45_degrees():
    assert bin_to_angle(1, 8) - bin_to_angle(0, 8) == pytest.approx(math.radians(45))


@given(st.floats(0, TWO_PI, exclude_max=True))
def test_centered_bin_within_half_width(angle):
    b = angle_to_bin(angle, 8, centered=True)
    diff = (angle - bin_to_angle(b, 8, centered=True) + math.pi) % TWO_PI - math.pi
    assert abs(diff) <= math.pi / 8 + 1e-12


# -- losses ----------------------------------------------------------------------


def test_angle_loss_one_hot_is_zero():
    p = torch.zeros(8)
    p[3] = 1
    assert float(angle_loss(p, 3)) == 0.0


def test_angle_loss_uniform_is_log_bins():
    assert float(angle_loss(torch.full((8,), 1 / 8, dtype=torch.float64), 5)) == pytest.approx(math.log(8))


def test_angle_loss_ignores_mass_on_other_bins():
    a = torch.tensor([0.5, 0.5, 0, 0], dtype=torch.float64)
    b = torch.tensor([0.5, 0.1, 0.2, 0.2], dtype=torch.float64)
    assert float(angle_loss(a, 0)) == float(angle_loss(b, 0))


def test_angle_loss_clamped_when_label_has_zero_mass():
    p = torch.tensor([1.0, 0.0])
    assert float(angle_loss(p, 1)) == pytest.approx(-math.log(1e-12))


def test_domain_loss_closed_form():
    assert float(domain_loss(torch.tensor(0.5, dtype=torch.float64), True, 2.0)) == pytest.approx(
        -0.25 * math.log(0.5), abs=1e-12)
    assert float(domain_loss(torch.tensor(0.5, dtype=torch.float64), True, 2.0)) == pytest.approx(0.17329, abs=1e-5)


def test_domain_loss_confident_correct_vanishes():
    assert float(domain_loss(torch.tensor(1 - 1e-9, dtype=torch.float64), True)) < 1e-15
    assert float(domain_loss(torch.tensor(1e-9, dtype=torch.float64), False)) < 1e-15


@pytest.mark.parametrize("gamma", [1.0, 0.5])
def test_domain_loss_rejects_small_gamma(gamma):
    with pytest.raises(ValueError):
        domain_loss(torch.tensor(0.5), True, gamma)


def test_focal_below_cross_entropy_on_grid():
    d = torch.linspace(1e-4, 1 - 1e-4, 999, dtype=torch.float64)
    for di in d:
        assert float(domain_loss(di, True, 2.0)) < float(-torch.log(di))


# -- gradient reversal -------------------------------------------------------------


def test_gradient_reversal_negates_scalar_probe():
    x = torch.tensor(1.5, requires_grad=True)
    (3.0 * grad_reverse(x, 1.0)).backward()
    assert float(x.grad) == -3.0
    y = torch.tensor(1.5, requires_grad=True)
    (3.0 * y).backward()
    assert float(y.grad) == -float(x.grad)


def test_gradient_reversal_weight_and_identity_forward():
    x = torch.randn(4, requires_grad=True)
    out = grad_reverse(x, 0.5)
    assert torch.equal(out, x)
    out.sum().backward()
    torch.testing.assert_close(x.grad, torch.full((4,), -0.5))


def test_discriminator_input_gradient_is_reversed_into_features():
    oem = small_oem()
    p_hat = torch.randn(20, 32, dtype=torch.float64, requires_grad=True)
    oem.discriminate(p_hat).backward()
    reversed_grad = p_hat.grad.clone()
    p_hat.grad = None
    oem.discriminator(p_hat).backward()
    torch.testing.assert_close(reversed_grad, -p_hat.grad)


# -- network pieces ------------------------------------------------------------


def test_encoder_defaults():
    enc = OemEncoder()
    assert [b.out_channels for b in enc.blocks] == [64, 128, 256]
    assert enc.k == 24
    assert enc(torch.randn(30, 3)).shape == (30, 256)


def test_identical_clouds_encode_identically():
    oem = small_oem()
    x = torch.randn(24, 3, dtype=torch.float64)
    a, b = oem.encode(x, x.clone())
    assert torch.equal(a, b)


def test_feature_interaction_edge_width():
    fim = FeatureInteraction(256, 256, 24)
    assert fim.edge_width == 2 * (256 + 3)


def test_feature_interaction_zero_aggregation_is_skip():
    torch.manual_seed(1)
    fim = FeatureInteraction(8, 8, 4).double()
    with torch.no_grad():
        fim.aggregate.edge.weight.zero_()
        fim.aggregate.edge.bias.zero_()
    p_s = torch.randn(16, 8, dtype=torch.float64)
    p_t = torch.randn(16, 8, dtype=torch.float64, requires_grad=True)
    cs, ct = torch.randn(16, 3, dtype=torch.float64), torch.randn(16, 3, dtype=torch.float64)
    out = fim(p_s, p_t, cs, ct)
    torch.testing.assert_close(out, fim.skip(p_s))
    (out - fim.skip(p_s)).sum().backward()
    assert p_t.grad is None or torch.all(p_t.grad == 0)


def test_feature_interaction_matches_explicit_edge_evaluation():
    torch.manual_seed(2)
    fim = FeatureInteraction(8, 5, 4).double()
    p_s = torch.randn(16, 8, dtype=torch.float64)
    p_t = torch.randn(16, 8, dtype=torch.float64)
    cs, ct = torch.randn(16, 3, dtype=torch.float64), torch.randn(16, 3, dtype=torch.float64)
    d = ((p_s[:, None] - p_t[None]) ** 2).sum(-1)
    graph = torch.tensor([sorted(range(16), key=lambda j: (float(d[i, j]), j))[:4] for i in range(16)])
    assert torch.equal(graph, knn_indices(p_s, p_t, 4))
    q = torch.cat([p_s, cs], -1)
    keys = torch.cat([p_t, ct], -1)
    nb = gather_rows(keys[None], graph[None])[0]
    edges = torch.cat([q[:, None].expand_as(nb), nb - q[:, None]], -1)
    assert edges.shape[-1] == 2 * (8 + 3)
    agg = torch.relu((edges @ fim.aggregate.edge.weight.T + fim.aggregate.edge.bias).max(1).values)
    torch.testing.assert_close(fim(p_s, p_t, cs, ct), agg + fim.skip(p_s))


def test_feature_interaction_rejects_large_k():
    fim = FeatureInteraction(4, 4, 10)
    with pytest.raises(ValueError):
        fim(torch.randn(8, 4), torch.randn(8, 4), torch.randn(8, 3), torch.randn(8, 3))


def test_full_size_widths():
    oem = OrientationModule(norm="batch")
    oem.eval()
    out = oem(torch.randn(30, 3), torch.randn(30, 3))
    assert out.p_in_s.shape == (30, 256)
    assert out.p_out.shape == (30, 256)
    assert out.p_hat.shape == (30, 512)
    assert out.logits.shape == (8,)
    assert [m.out_features for m in oem.discriminator.mlp1 if hasattr(m, "out_features")] == [512, 256, 128]
    assert [m.out_features for m in oem.discriminator.mlp2 if hasattr(m, "out_features")] == [256, 128, 256]
    head = [m.out_features for m in oem.head.mlp if hasattr(m, "out_features")]
    assert head == [256, 128, 128]


def test_probabilities_sum_to_one():
    oem = small_oem()
    out = oem(torch.randn(2, 20, 3, dtype=torch.float64), torch.randn(2, 20, 3, dtype=torch.float64))
    torch.testing.assert_close(out.probs.sum(-1), torch.ones(2, dtype=torch.float64), atol=1e-6, rtol=0)
    assert torch.all(out.probs >= 0)


def test_head_and_discriminator_are_permutation_invariant():
    torch.manual_seed(3)
    head = RotationHead(12, (16, 16, 16), 8, "layer").double()
    disc = DomainDiscriminator(12, (16, 8, 8), (8, 8, 8)).double()
    p = torch.randn(25, 12, dtype=torch.float64)
    perm = torch.randperm(25)
    torch.testing.assert_close(head(p[perm]), head(p), rtol=0, atol=1e-14)
    torch.testing.assert_close(disc(p[perm]), disc(p), rtol=0, atol=1e-14)


def test_discriminator_output_open_interval():
    disc = DomainDiscriminator(6, (8, 8, 8), (8, 8, 8)).double()
    for scale in (1.0, 10.0):
        d = disc(scale * torch.randn(4, 10, 6, dtype=torch.float64))
        assert torch.all((d > 0) & (d < 1))


def test_oem_deterministic():
    oem = small_oem()
    x, y = torch.randn(20, 3, dtype=torch.float64), torch.randn(20, 3, dtype=torch.float64)
    assert torch.equal(oem(x, y).p_hat, oem(x, y).p_hat)


def test_gradient_reaches_both_concat_branches():
    oem = small_oem()
    x, y = torch.randn(20, 3, dtype=torch.float64), torch.randn(20, 3, dtype=torch.float64)
    out = oem(x, y)
    c1 = out.p_out.shape[-1]
    w = torch.randn_like(out.p_hat)
    (out.p_hat * w).sum().backward()
    assert oem.refine.edge.weight.grad.abs().sum() > 0
    # Finite differences of the refined half with respect to p_out entries.
    p_out = out.p_out.detach().clone()
    graph = knn_indices(x, x, oem.k)

    @torch.no_grad()
    def f(p):
        return float((torch.cat([p, oem.refine(p, graph)], -1) * w).sum())

    p_req = p_out.clone().requires_grad_(True)
    (torch.cat([p_req, oem.refine(p_req, graph)], -1) * w).sum().backward()
    h = 1e-6
    for i, c in [(0, 0), (3, c1 - 1), (7, 2)]:
        plus, minus = p_out.clone(), p_out.clone()
        plus[i, c] += h
        minus[i, c] -= h
        fd = (f(plus) - f(minus)) / (2 * h)
        assert fd == pytest.approx(float(p_req.grad[i, c]), rel=1e-5, abs=1e-8)
        # the direct branch contributes exactly w[i, c]
        assert float(w[i, c]) != 0


def test_fim_switch_uses_global_fusion():
    oem = small_oem(use_fim=False)
    out = oem(torch.randn(20, 3, dtype=torch.float64), torch.randn(20, 3, dtype=torch.float64))
    assert out.p_hat.shape == (20, 32)
    assert not isinstance(oem.interaction, FeatureInteraction)


def test_dam_switch_removes_discriminator():
    oem = small_oem(use_dam=False)
    assert oem.discriminator is None
    with pytest.raises(RuntimeError):
        oem.discriminate(torch.randn(20, 32, dtype=torch.float64))


# -- alignment -------------------------------------------------------------------


def test_align_with_zero_centre_is_identity_and_idempotent():
    x = torch.randn(30, 3, dtype=torch.float64)
    probs = torch.zeros(8, dtype=torch.float64)
    probs[0] = 1
    once = align_source(x, probs, centered=True)
    assert torch.equal(once, x)
    assert torch.equal(align_source(once, probs, centered=True), once)


@pytest.mark.parametrize("centered", [False, True])
def test_align_ground_truth_bin_leaves_at_most_half_bin(centered):
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.standard_normal((40, 3)))
    for theta in rng.uniform(0, TWO_PI, 50):
        xs = rotate_z(x, float(theta))
        probs = torch.zeros(8, dtype=torch.float64)
        probs[angle_to_bin(float(theta), 8, centered)] = 1
        aligned = align_source(xs, probs, centered)
        centre = bin_to_angle(angle_to_bin(float(theta), 8, centered), 8, centered)
        residual = (theta - centre + math.pi) % TWO_PI - math.pi
        assert abs(residual) <= math.radians(22.5) + 1e-12
        torch.testing.assert_close(aligned, rotate_z(x, residual))


def test_align_ties_go_to_lower_bin():
    x = torch.randn(10, 3, dtype=torch.float64)
    probs = torch.tensor([0, 0, 0.5, 0.5, 0, 0, 0, 0], dtype=torch.float64)
    torch.testing.assert_close(align_source(x, probs), rotate_z(x, -bin_to_angle(2, 8)))
