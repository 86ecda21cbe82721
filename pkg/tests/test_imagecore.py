import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlppnn.imagecore import (
    PgmParseError,
    add_gaussian_noise,
    as_image,
    gradient_magnitude,
    gradients,
    load_pgm,
    rmse,
    sample_bilinear,
    save_pgm,
)

from imagegen import texture


class TestPgm:
    def test_p5_round_trip_exact(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, (17, 23)).astype(float)
        again = load_pgm(save_pgm(img))
        assert np.array_equal(again, img)

    def test_p2_round_trip_exact(self):
        rng = np.random.default_rng(4)
        img = rng.integers(0, 256, (5, 9)).astype(float)
        again = load_pgm(save_pgm(img, binary=False))
        assert np.array_equal(again, img)

    def test_binary_header_is_canonical(self):
        img = np.zeros((2, 3))
        data = save_pgm(img)
        assert data.startswith(b"P5\n3 2\n255\n")
        assert len(data) == len(b"P5\n3 2\n255\n") + 6

    def test_quantization_rounds_half_up_and_clips(self):
        img = np.array([[0.49, 0.5, 254.5, 300.0, -7.0]])
        out = load_pgm(save_pgm(img))
        assert out.tolist() == [[0.0, 1.0, 255.0, 255.0, 0.0]]

    def test_comments_and_whitespace_in_header(self):
        data = b"P2 # comment\n# another\n 3\t2 # sizes\n255\n0 1 2\n3 4 5\n"
        img = load_pgm(data)
        assert img.shape == (2, 3)
        assert img[1, 2] == 5.0

    def test_p5_ascii_and_binary_agree(self):
        rng = np.random.default_rng(5)
        img = rng.integers(0, 256, (11, 7)).astype(float)
        assert np.array_equal(load_pgm(save_pgm(img)), load_pgm(save_pgm(img, binary=False)))

    @pytest.mark.parametrize(
        "data",
        [
            b"P6\n2 2\n255\n" + b"\x00" * 12,   # wrong magic
            b"P5\n2 2\n65535\n" + b"\x00" * 8,  # maxval too large
            b"P5\n2 2\n255\n\x00\x00\x00",      # truncated payload
            b"P5\n2 x\n255\n\x00\x00\x00\x00",  # non-numeric dimension
            b"P2\n2 2\n255\n1 2 3",             # too few ascii samples
            b"P5\n0 2\n255\n",                  # zero dimension
            b"",                                # empty
        ],
    )
    def test_malformed_inputs_raise_parse_error(self, data):
        with pytest.raises(PgmParseError):
            load_pgm(data)

    def test_roundtrip_corpus(self):
        # generated corpus: many sizes, both encodings, bit-exact
        rng = np.random.default_rng(9)
        for _ in range(25):
            h, w = rng.integers(1, 40, 2)
            img = rng.integers(0, 256, (h, w)).astype(float)
            for binary in (True, False):
                assert np.array_equal(load_pgm(save_pgm(img, binary=binary)), img)


class TestAsImage:
    def test_accepts_lists(self):
        img = as_image([[1, 2], [3, 4]])
        assert img.dtype == np.float64 and img.shape == (2, 2)

    @pytest.mark.parametrize("bad", [np.zeros(3), np.zeros((0, 4)), [[np.nan]], [[np.inf, 1.0]]])
    def test_rejects_bad_input(self, bad):
        with pytest.raises(ValueError):
            as_image(bad)


class TestBilinear:
    def test_exact_at_integer_coordinates(self):
        img = texture(16, seed=2)
        ys, xs = np.mgrid[0:16, 0:16]
        assert np.array_equal(sample_bilinear(img, xs.astype(float), ys.astype(float)), img)

    def test_midpoint_average(self):
        img = np.array([[0.0, 10.0], [20.0, 30.0]])
        assert sample_bilinear(img, 0.5, 0.5) == pytest.approx(15.0)
        assert sample_bilinear(img, 0.5, 0.0) == pytest.approx(5.0)

    def test_replicate_clamp_outside(self):
        img = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert sample_bilinear(img, -5.0, -5.0) == 1.0
        assert sample_bilinear(img, 10.0, 10.0) == 4.0
        assert sample_bilinear(img, 10.0, 0.0) == 2.0

    @given(st.floats(0, 7), st.floats(0, 5))
    @settings(max_examples=60, deadline=None)
    def test_linear_field_reproduced(self, x, y):
        # bilinear interpolation is exact on a plane
        ys, xs = np.mgrid[0:6, 0:8].astype(float)
        img = 3.0 * xs - 2.0 * ys + 5.0
        want = 3.0 * x - 2.0 * y + 5.0
        assert sample_bilinear(img, x, y) == pytest.approx(want, abs=1e-9)

    def test_vectorized_matches_scalar(self):
        img = texture(12, seed=8)
        rng = np.random.default_rng(1)
        xs = rng.uniform(-1, 12, 50)
        ys = rng.uniform(-1, 12, 50)
        vec = sample_bilinear(img, xs, ys)
        for i in range(50):
            assert vec[i] == sample_bilinear(img, float(xs[i]), float(ys[i]))


class TestGradients:
    def test_uniform_ramp(self):
        ys, xs = np.mgrid[0:7, 0:9].astype(float)
        gx, gy = gradients(2.0 * xs + 3.0 * ys)
        assert np.allclose(gx, 2.0) and np.allclose(gy, 3.0)

    def test_constant_image_zero(self):
        gx, gy = gradients(np.full((5, 5), 9.0))
        assert not gx.any() and not gy.any()
        assert not gradient_magnitude(np.full((4, 4), 1.0)).any()

    def test_step_edge_magnitude(self):
        img = np.zeros((5, 8))
        img[:, 4:] = 100.0
        gm = gradient_magnitude(img)
        # central difference spreads the step over the two adjacent columns
        assert np.allclose(gm[:, 3], 50.0) and np.allclose(gm[:, 4], 50.0)
        assert not gm[:, :3].any() and not gm[:, 6:].any()


class TestNoise:
    def test_sigma_zero_is_identity_copy(self):
        img = texture(10, seed=3)
        out = add_gaussian_noise(img, 0.0, seed=1)
        assert np.array_equal(out, img) and out is not img

    def test_seeded_reproducibility(self):
        img = texture(10, seed=3)
        a = add_gaussian_noise(img, 5.0, seed=42)
        b = add_gaussian_noise(img, 5.0, seed=42)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, add_gaussian_noise(img, 5.0, seed=43))

    def test_moments(self):
        img = np.zeros((200, 200))
        out = add_gaussian_noise(img, 10.0, seed=0)
        assert abs(out.mean()) < 0.5
        assert abs(out.std() - 10.0) < 0.3

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            add_gaussian_noise(np.zeros((2, 2)), -1.0, seed=0)


def test_rmse_basics():
    a = np.zeros((4, 4))
    b = np.full((4, 4), 3.0)
    assert rmse(a, a) == 0.0
    assert rmse(a, b) == pytest.approx(3.0)
