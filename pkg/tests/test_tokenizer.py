import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from randsac.errors import ConfigurationError
from randsac.tokenizer import (grid_shape, normalize_targets, patchify, sincos_positions,
                               token_coordinates, unpatchify)


class TestPatchify:
    def test_cifar_shape(self, rng):
        tokens = patchify(rng.random((2, 32, 32, 3)), 4)
        assert tokens.shape == (2, 64, 48)

    def test_pixel_tokens(self, rng):
        img = rng.random((1, 6, 4, 3))
        tokens = patchify(img, 1)
        assert tokens.shape == (1, 24, 3)
        np.testing.assert_array_equal(tokens[0, 5], img[0, 1, 1])

    def test_token_content_is_raster_block(self, rng):
        img = rng.random((1, 8, 12, 3))
        tokens = patchify(img, 4)
        # token 4 sits at grid row 1, column 1 of the 2x3 grid
        np.testing.assert_array_equal(tokens[0, 4], img[0, 4:8, 4:8].reshape(-1))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
    def test_round_trip(self, gh, gw, p, c):
        img = np.random.default_rng(gh * 100 + gw).random((2, gh * p, gw * p, c))
        np.testing.assert_array_equal(unpatchify(patchify(img, p), gh, gw, p), img)

    def test_non_divisible_rejected(self):
        with pytest.raises(ConfigurationError):
            patchify(np.zeros((1, 10, 10, 3)), 4)
        with pytest.raises(ConfigurationError):
            grid_shape(32, 30, 4)


class TestPositions:
    def test_pure(self):
        np.testing.assert_array_equal(sincos_positions(4, 4, 16), sincos_positions(4, 4, 16))

    @pytest.mark.parametrize("g,dim", [(2, 8), (8, 8), (16, 8), (16, 64), (5, 12)])
    def test_rows_distinct(self, g, dim):
        pe = sincos_positions(g, g, dim)
        assert len(np.unique(pe.round(12), axis=0)) == g * g

    def test_range(self):
        pe = sincos_positions(16, 16, 32)
        assert pe.shape == (256, 32)
        assert np.abs(pe).max() <= 1.0

    def test_dim_not_multiple_of_four(self):
        with pytest.raises(ConfigurationError):
            sincos_positions(4, 4, 10)


class TestCoordinates:
    def test_corners(self):
        coords = token_coordinates(2, 2)
        assert {tuple(c) for c in coords} == {(-2, -2), (2, -2), (-2, 2), (2, 2)}
        assert tuple(coords[0]) == (-2, -2) and tuple(coords[-1]) == (2, 2)

    def test_center_and_degenerate(self):
        assert tuple(token_coordinates(3, 3)[4]) == (0, 0)
        assert tuple(token_coordinates(1, 1)[0]) == (0, 0)
        assert np.all(token_coordinates(1, 5)[:, 1] == 0)

    @pytest.mark.parametrize("gh,gw", [(2, 3), (4, 4), (7, 5)])
    def test_monotone_and_rotation_symmetric(self, gh, gw):
        coords = token_coordinates(gh, gw).reshape(gh, gw, 2)
        assert np.all(np.diff(coords[..., 0], axis=1) > 0)
        assert np.all(np.diff(coords[..., 1], axis=0) > 0)
        np.testing.assert_allclose(coords[::-1, ::-1], -coords, atol=1e-12)


class TestNormalizeTargets:
    def test_constant_patch(self):
        np.testing.assert_array_equal(normalize_targets(np.full((1, 1, 6), 0.3)), 0.0)

    def test_hand_example(self):
        np.testing.assert_allclose(normalize_targets(np.array([[0.0, 1.0]]), eps=0.0), [[-1.0, 1.0]])

    def test_population_formula_and_shift_invariance(self, rng):
        x = rng.random((3, 5, 12))
        out = normalize_targets(x)
        expected = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, ddof=0, keepdims=True) + 1e-6)
        np.testing.assert_allclose(out, expected)
        assert np.abs(out.mean(-1)).max() < 1e-6
        np.testing.assert_allclose(normalize_targets(x + 7.0), out, atol=1e-9)

    @pytest.mark.parametrize("s", [0.01, 0.5, 3.0])
    def test_scaling(self, s, rng):
        x = rng.random(16)
        sigma = x.std()
        scaled = normalize_targets(s * x)
        unit = (x - x.mean()) / sigma
        np.testing.assert_allclose(scaled, unit * s * sigma / np.sqrt(s * s * sigma * sigma + 1e-6))
