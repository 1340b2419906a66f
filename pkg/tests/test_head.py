"""Tests for decoding, IoU, NMS and the postprocess pipeline."""
import math

import numpy as np
import pytest

from yoloface.datapipe import LetterboxTransform, letterbox
from yoloface.errors import ConfigError, ShapeError
from yoloface.head import (
    AnchorLevel,
    AnchorSet,
    Detection,
    decode_level,
    iou,
    nms,
    postprocess,
)

LEVEL8 = AnchorLevel(stride=8, sizes=((16.0, 20.0), (32.0, 40.0), (64.0, 80.0)))
ANCHORS = AnchorSet.from_sizes(
    (8, 16, 32),
    (((16, 20), (32, 40), (64, 80)),) * 3,
)


def _identity_transform(size=640):
    return LetterboxTransform(1.0, 0, 0, size, size, size, size)


def _inv_sigmoid(p):
    return math.log(p / (1.0 - p))


class TestDecode:
    def test_zero_logits_cell(self):
        gh = gw = 4
        raw = np.zeros((3 * 16, gh, gw), dtype=np.float32)
        dets = decode_level(raw, LEVEL8)
        assert len(dets) == 3 * gh * gw
        # Candidate order is (anchor, row, col): first det = anchor 0 at (0,0).
        for a in range(3):
            for cy in range(gh):
                for cx in range(gw):
                    d = dets[a * gh * gw + cy * gw + cx]
                    x1, y1, x2, y2 = d.box
                    aw, ah = LEVEL8.sizes[a]
                    assert (x1 + x2) / 2 == pytest.approx((cx + 0.5) * 8, abs=1e-9)
                    assert (y1 + y2) / 2 == pytest.approx((cy + 0.5) * 8, abs=1e-9)
                    assert x2 - x1 == pytest.approx(aw, abs=1e-9)
                    assert y2 - y1 == pytest.approx(ah, abs=1e-9)
                    assert d.conf == pytest.approx(0.5, abs=1e-12)
                    assert d.cls == pytest.approx(0.5, abs=1e-12)
                    np.testing.assert_allclose(d.landmarks[:, 0], cx * 8, atol=1e-9)
                    np.testing.assert_allclose(d.landmarks[:, 1], cy * 8, atol=1e-9)

    def test_conf_monotone_in_logit(self):
        confs = []
        for to in np.linspace(-6, 6, 25):
            raw = np.zeros((3 * 16, 1, 1), dtype=np.float32)
            raw[4] = to
            confs.append(decode_level(raw, LEVEL8)[0].conf)
        assert all(b > a for a, b in zip(confs, confs[1:]))

    def test_encode_decode_round_trip(self):
        # Sample logits as exact float32 so the only error left is decode
        # arithmetic; the induced boxes cover the full valid range (center
        # offsets in (-0.5, 1.5) cells, sizes in (0, 4) anchors).
        rng = np.random.default_rng(42)
        gh = gw = 8
        n_trials = 10_000
        max_err = 0.0
        na = 3
        for start in range(0, n_trials, 1000):
            raw = np.zeros((na * 16, gh, gw), dtype=np.float32)
            expected = {}
            for _ in range(1000):
                a = int(rng.integers(na))
                cy = int(rng.integers(gh))
                cx = int(rng.integers(gw))
                t = rng.uniform(-4, 4, size=4).astype(np.float32)
                to = np.float32(3.0)  # keep conf above threshold
                base = a * 16
                raw[base + 0, cy, cx] = t[0]
                raw[base + 1, cy, cx] = t[1]
                raw[base + 2, cy, cx] = t[2]
                raw[base + 3, cy, cx] = t[3]
                raw[base + 4, cy, cx] = to
                sig = 1.0 / (1.0 + np.exp(-t.astype(np.float64)))
                aw, ah = LEVEL8.sizes[a]
                bx = (2 * sig[0] - 0.5 + cx) * 8
                by = (2 * sig[1] - 0.5 + cy) * 8
                bw = (2 * sig[2]) ** 2 * aw
                bh = (2 * sig[3]) ** 2 * ah
                expected[(a, cy, cx)] = (bx - bw / 2, by - bh / 2, bx + bw / 2, by + bh / 2)
            dets = decode_level(raw, LEVEL8, conf_thr=0.9)
            assert len(dets) == len(expected)
            got = {}
            for d, key in zip(dets, sorted(expected)):
                got[key] = d.box
            for key, box in expected.items():
                err = max(abs(g - e) for g, e in zip(got[key], box))
                max_err = max(max_err, err)
        assert max_err < 1e-4

    def test_decoded_centers_within_valid_range(self):
        rng = np.random.default_rng(7)
        raw = rng.normal(0, 3, size=(3 * 16, 6, 6)).astype(np.float32)
        for d in decode_level(raw, LEVEL8):
            cx = (d.box[0] + d.box[2]) / 2 / 8
            cy = (d.box[1] + d.box[3]) / 2 / 8
            assert -0.5 < cx < 6 + 1.5 and -0.5 < cy < 6 + 1.5
            w = (d.box[2] - d.box[0])
            assert 0 < w <= 4 * 64

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            decode_level(np.zeros((10, 4, 4), dtype=np.float32), LEVEL8)


class TestIoU:
    def test_identical(self):
        assert iou((0, 0, 2, 3), (0, 0, 2, 3)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0

    def test_third(self):
        assert iou((0, 0, 1, 1), (0.5, 0, 1.5, 1)) == pytest.approx(1 / 3, abs=1e-12)


def _nms_oracle(dets, thr):
    """Quadratic reference: repeatedly take the best remaining, suppress."""
    rest = sorted(range(len(dets)), key=lambda i: (-dets[i].conf, i))
    kept = []
    while rest:
        best = rest.pop(0)
        kept.append(best)
        rest = [i for i in rest if iou(dets[best].box, dets[i].box) <= thr]
    return [dets[i] for i in kept]


class TestNMS:
    def test_identical_boxes(self):
        dets = [
            Detection((0, 0, 10, 10), 0.9, 0.5, np.zeros((5, 2))),
            Detection((0, 0, 10, 10), 0.8, 0.5, np.zeros((5, 2))),
        ]
        out = nms(dets, 0.5)
        assert len(out) == 1 and out[0].conf == 0.9

    def test_disjoint_all_kept(self):
        dets = [
            Detection((i * 20, 0, i * 20 + 10, 10), 0.5 + i / 100, 0.5, np.zeros((5, 2)))
            for i in range(5)
        ]
        assert len(nms(dets, 0.5)) == 5

    def test_matches_quadratic_oracle(self):
        rng = np.random.default_rng(1234)
        for trial in range(1000):
            n = int(rng.integers(0, 51))
            dets = []
            for _ in range(n):
                x1, y1 = rng.uniform(0, 80, size=2)
                w, h = rng.uniform(1, 40, size=2)
                dets.append(Detection(
                    (x1, y1, x1 + w, y1 + h), float(rng.random()), 0.5, np.zeros((5, 2))))
            thr = float(rng.uniform(0.2, 0.8))
            got = nms(dets, thr)
            want = _nms_oracle(dets, thr)
            assert [g.box for g in got] == [w.box for w in want]

    def test_kept_set_invariant_under_permutation(self):
        rng = np.random.default_rng(5)
        dets = []
        for i in range(30):
            x1, y1 = rng.uniform(0, 60, size=2)
            w, h = rng.uniform(2, 30, size=2)
            dets.append(Detection((x1, y1, x1 + w, y1 + h),
                                  float(i) / 30 + 0.001, 0.5, np.zeros((5, 2))))
        base = {(d.box, d.conf) for d in nms(dets, 0.5)}
        for seed in range(5):
            perm = list(np.random.default_rng(seed).permutation(len(dets)))
            shuffled = [dets[i] for i in perm]
            assert {(d.box, d.conf) for d in nms(shuffled, 0.5)} == base

    def test_kept_pairwise_iou_bounded(self):
        rng = np.random.default_rng(6)
        dets = []
        for _ in range(40):
            x1, y1 = rng.uniform(0, 50, size=2)
            w, h = rng.uniform(2, 25, size=2)
            dets.append(Detection((x1, y1, x1 + w, y1 + h),
                                  float(rng.random()), 0.5, np.zeros((5, 2))))
        kept = nms(dets, 0.45)
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                assert iou(a.box, b.box) <= 0.45

    def test_bad_threshold(self):
        with pytest.raises(ConfigError):
            nms([], 1.5)


class TestPostprocess:
    def _maps(self, value=-10.0):
        na = 3
        return [np.full((na * 16, 640 // s, 640 // s), value, dtype=np.float32)
                for s in (8, 16, 32)]

    def test_conf_thr_one_yields_empty(self):
        out = postprocess(self._maps(0.0), ANCHORS, 1.0, 0.5, _identity_transform())
        assert out == []

    def test_single_hot_cell(self):
        maps = self._maps(-10.0)
        maps[0][0:4, 5, 7] = 0.0          # anchor 0, cell (7, 5): centered box
        maps[0][4, 5, 7] = 10.0
        out = postprocess(maps, ANCHORS, 0.5, 0.5, _identity_transform())
        assert len(out) == 1
        d = out[0]
        cx = (d.box[0] + d.box[2]) / 2
        cy = (d.box[1] + d.box[3]) / 2
        assert cx == pytest.approx((7 + 0.5) * 8, abs=1e-6)
        assert cy == pytest.approx((5 + 0.5) * 8, abs=1e-6)
        assert d.conf == pytest.approx(1 / (1 + math.exp(-10)), rel=1e-9)

    def test_identity_transform_keeps_coordinates(self):
        maps = self._maps(-10.0)
        maps[1][4, 3, 3] = 8.0
        kept_letterboxed = nms(
            sum((list(decode_level(m, lvl, 5, 0.5))
                 for m, lvl in zip(maps, ANCHORS.levels)), []), 0.5)
        out = postprocess(maps, ANCHORS, 0.5, 0.5, _identity_transform())
        assert len(out) == len(kept_letterboxed) == 1
        np.testing.assert_allclose(out[0].box, kept_letterboxed[0].box, atol=1e-9)

    def test_letterbox_inversion_and_clipping(self):
        t = letterbox(1000, 800, 640, 32)  # scale 0.64, no pad
        maps = [np.full((3 * 16, t.out_h // s, t.out_w // s), -10.0, dtype=np.float32)
                for s in (8, 16, 32)]
        maps[2][4, 1, 1] = 10.0
        maps[2][2, 1, 1] = 5.0  # widen so the raw box pokes past the edge pre-clip
        out = postprocess(maps, ANCHORS, 0.5, 0.5, t)
        assert len(out) == 1
        x1, y1, x2, y2 = out[0].box
        assert 0 <= x1 < x2 <= 1000 and 0 <= y1 < y2 <= 800
