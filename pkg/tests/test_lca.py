import itertools
import math

import numpy as np
import pytest

from lcaenet.errors import DimensionError, InputError
from lcaenet.lca import (DIRECTIONS, LcaParams, hyperparameter_grid, lca_operators, lca_oracle, lca_weights,
                         lcd_maps, local_contrast_attention)


def _loop_lcd(img, alpha, beta, d):
    """Plain-Python reference, independent of numpy convolution and numba."""
    h, w = len(img), len(img[0])

    def px(r, c):
        return img[r][c] if 0 <= r < h and 0 <= c < w else 0.0

    out = [[[0.0] * w for _ in range(h)] for _ in range(4)]
    for k, (dr, dc) in enumerate(DIRECTIONS):
        for r in range(h):
            for c in range(w):
                out[k][r][c] = alpha * img[r][c] - beta * (px(r - dr * d, c - dc * d) + px(r + dr * d, c + dc * d))
    return out


def test_operator_layout_d1():
    ops = lca_operators(LcaParams())
    expected_diag = np.array([[-0.5, 0, 0], [0, 1, 0], [0, 0, -0.5]])
    np.testing.assert_array_equal(ops[0], expected_diag)
    np.testing.assert_array_equal(ops[1], np.fliplr(expected_diag))
    np.testing.assert_array_equal(ops[2], [[0, 0, 0], [-0.5, 1, -0.5], [0, 0, 0]])
    np.testing.assert_array_equal(ops[3], [[0, -0.5, 0], [0, 1, 0], [0, -0.5, 0]])


@pytest.mark.parametrize("d", [1, 2, 3, 4])
def test_operator_shape_and_sum(d):
    ops = lca_operators(LcaParams(alpha=1.5, beta=1.0, d=d))
    assert ops.shape == (4, 2 * d + 1, 2 * d + 1)
    np.testing.assert_allclose(ops.sum(axis=(1, 2)), [-0.5] * 4)
    assert np.count_nonzero(ops, axis=(1, 2)).tolist() == [3, 3, 3, 3]


def test_lcd_matches_python_loops(rng):
    img = rng.normal(size=(7, 9))
    for d, a, b in [(1, 1.0, 0.5), (2, 2.0, 1.0), (3, 1.5, 0.5)]:
        got = lcd_maps(img, LcaParams(a, b, d))
        np.testing.assert_allclose(got, np.array(_loop_lcd(img.tolist(), a, b, d)), atol=1e-12)


def test_single_bright_pixel_hand_values():
    img = np.zeros((5, 5))
    img[2, 2] = 1.0
    lca = local_contrast_attention(img, LcaParams())
    assert lca[2, 2] == pytest.approx(1 / (1 + math.exp(-2.0)), abs=1e-15)
    # one map is -0.5 next to the spike, its partner is 0
    assert lca[2, 3] == 0.5
    assert lca[1, 1] == 0.5
    assert lca[0, 0] == 0.5


def test_mixed_pairing_differs_from_default():
    img = np.zeros((5, 5))
    img[2, 2] = 1.0
    img[1, 1] = 0.5
    img[2, 3] = 1.0
    maps = lcd_maps(img, LcaParams())
    f = maps[:, 2, 2]
    assert lca_weights(maps)[2, 2] == pytest.approx(1 / (1 + math.exp(-(f[0] * f[1] + f[2] * f[3]))))
    assert lca_weights(maps, "mixed")[2, 2] == pytest.approx(1 / (1 + math.exp(-(f[0] * f[2] + f[1] * f[3]))))
    assert lca_weights(maps)[2, 2] != lca_weights(maps, "mixed")[2, 2]


@pytest.mark.parametrize("pairing", ["diagonals", "mixed"])
def test_kernel_path_matches_oracle(rng, pairing):
    for params in hyperparameter_grid():
        img = rng.uniform(0, 255, size=(19, 23))
        np.testing.assert_allclose(local_contrast_attention(img, params, pairing),
                                   lca_oracle(img, params, pairing), atol=1e-12, rtol=0)


def test_flat_field_is_half_in_interior():
    img = np.full((12, 12), 3.7)
    lca = local_contrast_attention(img, LcaParams(1.0, 0.5, 2))
    assert np.all(lca[2:-2, 2:-2] == 0.5)


def test_batch_axes():
    imgs = np.random.default_rng(0).normal(size=(3, 10, 11))
    maps = lcd_maps(imgs, LcaParams())
    assert maps.shape == (3, 4, 10, 11)
    np.testing.assert_allclose(maps[1], lcd_maps(imgs[1], LcaParams()))


def test_weights_in_unit_interval(rng):
    lca = local_contrast_attention(rng.normal(scale=50, size=(16, 16)), LcaParams(2.0, 0.5, 1))
    assert np.all((lca >= 0) & (lca <= 1))


def test_grid_order_and_size():
    grid = hyperparameter_grid()
    assert len(grid) == 24
    assert [(p.d, p.alpha, p.beta) for p in grid[:3]] == [(1, 1.0, 0.5), (1, 1.0, 1.0), (1, 1.5, 0.5)]
    assert {p.d for p in grid} == {1, 2, 3, 4}
    assert list(itertools.islice(grid, 23, None))[0] == LcaParams(2.0, 1.0, 4)


@pytest.mark.parametrize("kwargs", [dict(alpha=0), dict(beta=-1), dict(d=0), dict(d=1.5)])
def test_invalid_params(kwargs):
    with pytest.raises(ValueError):
        LcaParams(**kwargs)


def test_image_smaller_than_operator():
    with pytest.raises(DimensionError):
        lcd_maps(np.zeros((4, 4)), LcaParams(d=2))


def test_non_finite_rejected():
    img = np.zeros((5, 5))
    img[1, 1] = np.nan
    with pytest.raises(InputError):
        local_contrast_attention(img, LcaParams())


def test_wrong_map_count():
    with pytest.raises(DimensionError):
        lca_weights(np.zeros((3, 5, 5)))
