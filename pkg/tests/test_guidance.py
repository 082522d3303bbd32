import numpy as np
import pytest

from dgdehaze import guidance as gmod
from dgdehaze.detector import Detection


def naive_render(dets, height, width, num_classes):
    """Per-pixel reference: winner = max (score, class_id) among covering boxes."""
    out = np.zeros((height, width), dtype=np.float32)
    for i in range(height):
        for j in range(width):
            best = None
            for d in dets:
                xmin, ymin, xmax, ymax = d.bbox
                if xmin <= j + 0.5 < xmax and ymin <= i + 0.5 < ymax:
                    if best is None or (d.score, d.class_id) > (best.score, best.class_id):
                        best = d
            if best is not None:
                out[i, j] = np.float32((best.class_id + 1) * best.score)
    return out


def random_detections(rng, n, size, num_classes):
    dets = []
    for _ in range(n):
        x0, y0 = rng.uniform(0, size - 4, 2)
        w, h = rng.uniform(2, size / 2, 2)
        dets.append(Detection(
            class_id=int(rng.integers(0, num_classes)),
            score=float(rng.uniform(0.05, 1.0)),
            bbox=(float(x0), float(y0), float(min(x0 + w, size)),
                  float(min(y0 + h, size)))))
    return dets


def test_no_detections_gives_zero_mask():
    mask = gmod.render_guidance([], 16, 16, 3)
    assert mask.values.shape == (16, 16) and not mask.values.any()


def test_single_detection_value():
    det = Detection(class_id=2, score=0.8, bbox=(2, 3, 6, 7))
    mask = gmod.render_guidance([det], 10, 10, 3)
    inside = mask.values[3:7, 2:6]
    assert np.allclose(inside, 2.4, atol=1e-6)
    total = mask.values.sum()
    assert abs(total - inside.sum()) < 1e-6  # nothing outside the box


def test_overlap_keeps_highest_score():
    a = Detection(class_id=0, score=0.9, bbox=(0, 0, 8, 8))
    b = Detection(class_id=4, score=0.3, bbox=(4, 4, 12, 12))
    mask = gmod.render_guidance([a, b], 16, 16, 5)
    assert np.allclose(mask.values[4:8, 4:8], 0.9)  # overlap region: score wins
    assert np.allclose(mask.values[8:12, 8:12], 1.5)  # (4+1)*0.3


def test_overlap_tie_breaks_on_class_id():
    a = Detection(class_id=0, score=0.5, bbox=(0, 0, 8, 8))
    b = Detection(class_id=2, score=0.5, bbox=(0, 0, 8, 8))
    mask = gmod.render_guidance([a, b], 8, 8, 3)
    assert np.allclose(mask.values, 1.5)  # class 2 wins the tie


def test_render_matches_naive_reference(rng):
    for _ in range(50):
        n = int(rng.integers(0, 6))
        dets = random_detections(rng, n, 32, 5)
        mask = gmod.render_guidance(dets, 32, 32, 5)
        assert np.array_equal(mask.values, naive_render(dets, 32, 32, 5))


def test_support_equals_box_union(rng):
    for _ in range(10):
        dets = random_detections(rng, int(rng.integers(1, 5)), 24, 3)
        mask = gmod.render_guidance(dets, 24, 24, 3)
        union = naive_render(dets, 24, 24, 3) > 0
        assert np.array_equal(mask.values > 0, union)


def test_render_rejects_out_of_range_class():
    det = Detection(class_id=3, score=0.5, bbox=(0, 0, 4, 4))
    with pytest.raises(ValueError):
        gmod.render_guidance([det], 8, 8, 3)


def test_normalize_scales_by_num_classes():
    det = Detection(class_id=2, score=0.8, bbox=(0, 0, 4, 4))
    mask = gmod.render_guidance([det], 8, 8, 3)
    norm = gmod.normalize_guidance(mask)
    assert np.allclose(norm.values[:4, :4], 0.8, atol=1e-6)
    zero = gmod.normalize_guidance(gmod.render_guidance([], 8, 8, 3))
    assert not zero.values.any()


def test_normalize_ceiling_is_one():
    det = Detection(class_id=2, score=1.0, bbox=(0, 0, 8, 8))
    norm = gmod.normalize_guidance(gmod.render_guidance([det], 8, 8, 3))
    assert norm.values.max() == 1.0


def test_normalize_idempotent_only_for_single_class():
    det = Detection(class_id=0, score=0.6, bbox=(0, 0, 4, 4))
    m1 = gmod.normalize_guidance(gmod.render_guidance([det], 8, 8, 1))
    m2 = gmod.normalize_guidance(m1)
    assert np.array_equal(m1.values, m2.values)
    m3 = gmod.normalize_guidance(gmod.render_guidance([det], 8, 8, 2))
    m4 = gmod.normalize_guidance(m3)
    assert not np.array_equal(m3.values, m4.values)


def test_resample_identity():
    rng = np.random.default_rng(3)
    mask = gmod.GuidanceMask(rng.uniform(0, 1, (12, 9)).astype(np.float32), 3)
    out = gmod.resample_guidance(mask, 12, 9)
    assert np.array_equal(out.values, mask.values)


def test_resample_constant_stays_constant():
    mask = gmod.GuidanceMask(np.full((6, 6), 0.7, dtype=np.float32), 3)
    for th, tw in [(3, 3), (12, 12), (5, 11)]:
        out = gmod.resample_guidance(mask, th, tw)
        assert out.values.shape == (th, tw)
        assert np.allclose(out.values, 0.7, atol=1e-6)


def test_resample_quadrant_down():
    vals = np.zeros((4, 4), dtype=np.float32)
    vals[:2, :2] = 1.0
    out = gmod.resample_guidance(gmod.GuidanceMask(vals, 1), 2, 2)
    assert np.array_equal(out.values, np.array([[1, 0], [0, 0]], dtype=np.float32))


def test_resample_preserves_range_and_mean(rng):
    vals = rng.uniform(0, 1, (16, 16)).astype(np.float32)
    mask = gmod.GuidanceMask(vals, 3)
    for th, tw in [(7, 5), (32, 32), (16, 9)]:
        out = gmod.resample_guidance(mask, th, tw)
        assert out.values.min() >= vals.min() - 1e-6
        assert out.values.max() <= vals.max() + 1e-6
        assert abs(out.values.mean() - vals.mean()) < 1e-6


def test_resample_rejects_bad_dims():
    mask = gmod.GuidanceMask(np.zeros((4, 4), dtype=np.float32), 1)
    with pytest.raises(ValueError):
        gmod.resample_guidance(mask, 0, 4)


def test_mask_png_round_trip(tmp_path, rng):
    vals = rng.uniform(0, 1, (16, 16)).astype(np.float32)
    mask = gmod.GuidanceMask(vals, 3)
    path = str(tmp_path / "mask.png")
    gmod.save_mask_png(mask, path)
    loaded = gmod.load_mask_png(path)
    assert loaded.num_classes == 3
    assert np.max(np.abs(loaded.values - vals)) <= 1.0 / gmod.MASK_SCALE
