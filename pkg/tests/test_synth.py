import numpy as np
import pytest

from shapecorr.geometry import TWO_PI
from shapecorr.orientation import angle_to_bin
from shapecorr.synth import (
    PARTS,
    DeformParams,
    deform,
    generate_pair,
    make_dataset,
    make_template,
    random_deform,
    read_dataset,
    write_dataset,
)


@pytest.fixture(scope="module")
def template():
    return make_template(0, 1024)


def test_template_reproducible(template):
    again = make_template(0, 1024)
    np.testing.assert_array_equal(template.points, again.points)
    np.testing.assert_array_equal(template.labels, again.labels)
    assert not np.array_equal(make_template(1, 1024).points, template.points)


def test_template_has_every_part(template):
    assert template.points.shape == (1024, 3)
    assert set(np.unique(template.labels)) == set(range(len(PARTS)))


def test_limbs_attach_to_torso(template):
    # every limb's nearest torso point is close: segments are connected
    torso = template.points[template.labels == PARTS.index("torso")]
    for part in ("l_upper_arm", "r_upper_arm", "l_upper_leg", "r_upper_leg", "head"):
        pts = template.points[template.labels == PARTS.index(part)]
        gap = min(np.linalg.norm(torso - p, axis=1).min() for p in pts)
        assert gap < 0.5, part


def test_equal_deformations_give_identical_clouds(template):
    d = random_deform(np.random.default_rng(0))
    pair = generate_pair(template, d, d, 128, seed=1)
    np.testing.assert_array_equal(pair.source, pair.target)
    np.testing.assert_array_equal(pair.gt, np.arange(128))


def test_deformation_is_nonrigid(template):
    rng = np.random.default_rng(1)
    pair = generate_pair(template, random_deform(rng), random_deform(rng), 200, seed=2)
    ds = np.linalg.norm(pair.source[:, None] - pair.source[None], axis=-1)
    dt = np.linalg.norm(pair.target[:, None] - pair.target[None], axis=-1)
    assert np.abs(ds - dt).max() > 0.5


def test_gt_is_bijection_and_inverse_round_trips(template):
    rng = np.random.default_rng(3)
    for i in range(100):
        pair = generate_pair(template, random_deform(rng), random_deform(rng), 64, seed=i, shuffle=True)
        assert sorted(pair.gt.tolist()) == list(range(64))
        inverse = np.empty_like(pair.gt)
        inverse[pair.gt] = np.arange(64)
        np.testing.assert_array_equal(inverse[pair.gt], np.arange(64))
        np.testing.assert_array_equal(pair.gt[inverse], np.arange(64))


def test_shuffled_gt_points_at_same_physical_point(template):
    d = random_deform(np.random.default_rng(4))
    pair = generate_pair(template, d, d, 100, seed=5, shuffle=True)
    np.testing.assert_allclose(pair.target[pair.gt], pair.source)


def test_labels_survive_deformation(template):
    d = random_deform(np.random.default_rng(6))
    posed = deform(template, d)
    for part in range(len(PARTS)):
        mask = template.labels == part
        # each part moves rigidly: pairwise distances inside the part are scaled only
        idx = np.flatnonzero(mask)[:20]
        a = np.linalg.norm(template.points[idx][:, None] - template.points[idx][None], axis=-1)
        b = np.linalg.norm(posed[idx][:, None] - posed[idx][None], axis=-1)
        np.testing.assert_allclose(b, a * d.scale, atol=1e-9)


def test_invalid_limits_rejected(template):
    with pytest.raises(ValueError):
        deform(template, DeformParams({"l_elbow": 170.0}))
    with pytest.raises(ValueError):
        deform(template, DeformParams({"tail": 10.0}))
    with pytest.raises(ValueError):
        deform(template, DeformParams({}, scale=3.0))


def test_too_many_points_rejected(template):
    with pytest.raises(ValueError):
        generate_pair(template, DeformParams(), DeformParams(), 2000, seed=0)


def test_rotation_labels_cover_bins_uniformly():
    pairs = make_dataset(800, 32, seed=0, templates=2, rotation_labels=True)
    bins = np.bincount([angle_to_bin(p.theta, 8) for p in pairs], minlength=8)
    expected = 100
    bound = 3 * np.sqrt(800 * (1 / 8) * (7 / 8))
    assert np.all(np.abs(bins - expected) <= bound), bins
    assert all(0 <= p.theta < TWO_PI for p in pairs)


def test_same_shape_pairs_differ_only_by_rotation():
    from shapecorr.geometry import rotate_z

    for p in make_dataset(5, 64, seed=1, same_shape=True, rotation_labels=True):
        np.testing.assert_allclose(rotate_z(p.target, p.theta), p.source, atol=1e-12)


def test_dataset_round_trip(tmp_path):
    pairs = make_dataset(4, 32, seed=2, rotation_labels=True, shuffle=True)
    manifest = write_dataset(pairs, tmp_path)
    rows = manifest.read_text().strip().splitlines()
    assert len(rows) - 1 == len(pairs)
    loaded = read_dataset(manifest)
    for a, b in zip(pairs, loaded):
        np.testing.assert_allclose(a.source, b.source, atol=1e-6)
        np.testing.assert_allclose(a.target, b.target, atol=1e-6)
        np.testing.assert_array_equal(a.gt, b.gt)
        assert a.theta == pytest.approx(b.theta)


def test_missing_file_names_path(tmp_path):
    manifest = write_dataset(make_dataset(2, 16, seed=3), tmp_path)
    (tmp_path / "pair_00001_tgt.xyz").unlink()
    with pytest.raises(FileNotFoundError, match="pair_00001_tgt.xyz"):
        read_dataset(manifest)


def test_malformed_line_reports_line(tmp_path):
    manifest = write_dataset(make_dataset(1, 16, seed=4), tmp_path)
    path = tmp_path / "pair_00000_src.xyz"
    lines = path.read_text().splitlines()
    lines[5] = "1.0 two 3.0"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match=r"pair_00000_src.xyz:6"):
        read_dataset(manifest)
