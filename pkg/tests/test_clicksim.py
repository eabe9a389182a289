import numpy as np
import pytest

from rftrace.clicksim import Click, centroid, dilate, make_bands, sample_clicks
from rftrace.errors import ShapeError

from oracles import naive_dilate


def random_blob(rng, h=40, w=40, walks=60):
    """Connected random blob mask via a dilated random walk."""
    mask = np.zeros((h, w), dtype=bool)
    r, c = h // 2, w // 2
    for _ in range(walks):
        mask[r, c] = True
        r = min(max(r + int(rng.integers(-2, 3)), 1), h - 2)
        c = min(max(c + int(rng.integers(-2, 3)), 1), w - 2)
    return dilate(mask, 3, 3)


class TestCentroid:
    def test_full_square(self):
        mask = np.ones((3, 3), dtype=bool)
        c = centroid(mask)
        assert (c.y, c.x) == (1, 1)

    def test_single_pixel(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[4, 7] = True
        c = centroid(mask)
        assert (c.y, c.x) == (4, 7)

    def test_ring_snaps_to_nearest_pixel(self):
        mask = np.zeros((11, 11), dtype=bool)
        mask[2, :] = mask[8, :] = True
        mask[:, 2] = mask[:, 8] = True
        mask[0, :] = mask[10, :] = mask[:, 0] = mask[:, 10] = False
        # raw moment is the hollow center (5,5); brute-force nearest scan
        ys, xs = np.nonzero(mask)
        d2 = (ys - 5) ** 2 + (xs - 5) ** 2
        expect = sorted(zip(d2, ys, xs))[0]
        c = centroid(mask)
        assert not mask[5, 5]
        assert (c.y, c.x) == (expect[1], expect[2])

    def test_empty_raises(self):
        with pytest.raises(ShapeError):
            centroid(np.zeros((4, 4), dtype=bool))


class TestDilate:
    def test_center_pixel_becomes_block(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[2, 2] = True
        out = dilate(mask, 3, 3)
        assert out.sum() == 9
        assert out[1:4, 1:4].all()

    def test_kernel_1_identity(self):
        rng = np.random.default_rng(0)
        mask = rng.random((8, 8)) < 0.3
        np.testing.assert_array_equal(dilate(mask, 1, 1), mask)

    def test_merges_nearby_pixels(self):
        mask = np.zeros((5, 7), dtype=bool)
        mask[2, 2] = mask[2, 4] = True
        out = dilate(mask, 3, 3)
        np.testing.assert_array_equal(out, naive_dilate(mask, 3, 3))
        assert out[2, 3]

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            dilate(np.zeros((4, 4), dtype=bool), 2, 3)

    def test_matches_translate_union_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(15):
            h = int(rng.integers(3, 15))
            w = int(rng.integers(3, 15))
            mask = rng.random((h, w)) < 0.25
            kh = int(rng.choice([1, 3, 5]))
            kw = int(rng.choice([1, 3, 5]))
            np.testing.assert_array_equal(dilate(mask, kh, kw), naive_dilate(mask, kh, kw))

    def test_extensive_and_monotone(self):
        rng = np.random.default_rng(2)
        m1 = rng.random((12, 12)) < 0.2
        m2 = m1 | (rng.random((12, 12)) < 0.2)
        d1 = dilate(m1, 3, 5)
        d2 = dilate(m2, 3, 5)
        assert (m1 <= d1).all()  # extensive
        assert (d1 <= d2).all()  # monotone


class TestMakeBands:
    def test_solid_square_bands(self):
        mask = np.zeros((60, 60), dtype=bool)
        mask[5:55, 5:55] = True
        bands = make_bands(mask)
        stack = np.stack(bands.bands)
        assert (stack.sum(axis=0) == mask.astype(int)).all()  # disjoint + union
        for band in bands.bands:
            assert band.any()
            assert not (band & ~mask).any()

    def test_single_pixel_instance(self):
        mask = np.zeros((9, 9), dtype=bool)
        mask[3, 4] = True
        bands = make_bands(mask)
        assert bands.bands[0].sum() == 1
        assert bands.bands[0][3, 4]
        for band in bands.bands[1:]:
            assert not band.any()

    def test_band1_contains_centroid(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            mask = random_blob(rng)
            c = centroid(mask)
            bands = make_bands(mask)
            assert bands.bands[0][c.y, c.x]

    def test_random_blobs_partition_mask(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            mask = random_blob(rng)
            bands = make_bands(mask)
            stack = np.stack(bands.bands)
            assert (stack.sum(axis=0) == mask.astype(int)).all()

    def test_empty_instance_raises(self):
        with pytest.raises(ShapeError):
            make_bands(np.zeros((5, 5), dtype=bool))


class TestSampleClicks:
    def square(self):
        mask = np.zeros((60, 60), dtype=bool)
        mask[5:55, 5:55] = True
        return mask

    def test_returns_25_clicks_inside(self):
        mask = self.square()
        bands = make_bands(mask)
        clicks = sample_clicks(bands, mask, seed=0)
        assert len(clicks) == 25
        for _band, c in clicks:
            assert mask[c.y, c.x]

    def test_deterministic_under_seed(self):
        mask = self.square()
        bands = make_bands(mask)
        a = sample_clicks(bands, mask, seed=123)
        b = sample_clicks(bands, mask, seed=123)
        assert a == b
        c = sample_clicks(bands, mask, seed=124)
        assert a != c

    def test_five_clicks_per_band_on_square(self):
        mask = self.square()
        bands = make_bands(mask)
        clicks = sample_clicks(bands, mask, seed=7)
        per_band = {}
        for band, click in clicks:
            per_band.setdefault(band, []).append(click)
            assert bands.bands[band - 1][click.y, click.x]
        assert sorted(per_band) == [1, 2, 3, 4, 5]
        assert all(len(v) == 5 for v in per_band.values())

    def test_empty_band_redraws_from_instance(self):
        mask = np.zeros((9, 9), dtype=bool)
        mask[3, 4] = True
        bands = make_bands(mask)
        clicks = sample_clicks(bands, mask, seed=1)
        assert len(clicks) == 25
        assert all(c == Click(x=4, y=3) for _b, c in clicks)
