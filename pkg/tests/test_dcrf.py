import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfseg.dcrf import CrfParams, build_unary, mean_field_refine, pairwise_kernel, softmax_neg
from selfseg.structures import CamStack


def brute_force_mean_field(unary, image, p: CrfParams):
    """Straight transcription of the update with explicit pixel loops."""
    nl, h, w = unary.shape
    pix = [(y, x) for y in range(h) for x in range(w)]
    n = len(pix)
    k = [[0.0] * n for _ in range(n)]
    for i, (yi, xi) in enumerate(pix):
        for j, (yj, xj) in enumerate(pix):
            if i == j:
                continue
            d2 = (yi - yj) ** 2 + (xi - xj) ** 2
            c2 = sum((image[yi, xi, c] - image[yj, xj, c]) ** 2 for c in range(3))
            k[i][j] = p.spatial_weight * math.exp(-d2 / (2 * p.spatial_sigma**2)) + p.bilateral_weight * math.exp(
                -d2 / (2 * p.bilateral_sigma_xy**2) - c2 / (2 * p.bilateral_sigma_rgb**2)
            )
    u = [[unary[l, y, x] for l in range(nl)] for (y, x) in pix]

    def normalise(e):
        m = min(e)
        z = [math.exp(-(v - m)) for v in e]
        s = sum(z)
        return [v / s for v in z]

    q = [normalise(row) for row in u]
    for _ in range(p.iterations):
        new = []
        for i in range(n):
            msg = [sum(k[i][j] * q[j][l] for j in range(n)) for l in range(nl)]
            total = sum(msg)
            new.append(normalise([u[i][l] + (total - msg[l]) for l in range(nl)]))
        q = new
    out = np.zeros_like(unary)
    for i, (y, x) in enumerate(pix):
        out[:, y, x] = q[i]
    return out


def random_instance(rng, h, w, nl=3):
    unary = rng.uniform(0.0, 3.0, size=(nl, h, w))
    image = rng.uniform(0.0, 1.0, size=(h, w, 3))
    return unary, image


# --- examples ---------------------------------------------------------------------


def test_defaults():
    p = CrfParams()
    assert (p.iterations, p.spatial_weight, p.spatial_sigma) == (10, 3.0, 3.0)
    assert (p.bilateral_weight, p.bilateral_sigma_xy, p.bilateral_sigma_rgb) == (4.0, 20.0, 0.1)


def test_unary_all_zero_cams_prefers_background():
    cams = CamStack(np.zeros((2, 3, 3)), frozenset({1, 2}))
    u = build_unary(cams, 0.3)
    prob = np.exp(-u)
    np.testing.assert_allclose(prob[0], 1 - 1e-6)
    np.testing.assert_allclose(prob[1:], 1e-6)
    assert np.all(u[0] < u[1:])


def test_unary_cam_equal_to_tau_is_even():
    cams = CamStack(np.full((1, 1, 1), 0.3), frozenset({1}))
    np.testing.assert_allclose(np.exp(-build_unary(cams, 0.3))[:, 0, 0], [0.5, 0.5], atol=1e-15)


def test_unary_normalisation_arithmetic():
    cams = CamStack(np.full((1, 1, 1), 0.6), frozenset({1}))
    np.testing.assert_allclose(np.exp(-build_unary(cams, 0.3))[:, 0, 0], [1 / 3, 2 / 3], atol=1e-15)


def test_unary_probabilities_sum_to_one_before_clamp():
    rng = np.random.default_rng(0)
    cams = CamStack(rng.uniform(size=(3, 4, 4)), frozenset({1, 3}))
    p = np.exp(-build_unary(cams, 0.3))
    np.testing.assert_allclose(p[2], 1e-6, rtol=1e-9)  # absent class
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=3e-6)


@pytest.mark.parametrize("params", [CrfParams(spatial_weight=0, bilateral_weight=0, iterations=7), CrfParams(iterations=0)])
def test_no_message_cases_return_softmax(params):
    rng = np.random.default_rng(1)
    unary, image = random_instance(rng, 6, 5)
    q = mean_field_refine(unary, image, params)
    np.testing.assert_allclose(q, softmax_neg(unary), atol=1e-9)


def test_two_pixel_hand_update():
    # two pixels, two labels, one iteration, bilateral only with identical colours
    p = CrfParams(iterations=1, spatial_weight=0.0, bilateral_weight=2.0, bilateral_sigma_xy=1.0)
    unary = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    image = np.zeros((1, 2, 3))
    kval = 2.0 * math.exp(-0.5)
    q0 = softmax_neg(unary)
    expected = np.zeros_like(q0)
    for i, j in ((0, 1), (1, 0)):
        # Potts: label l pays kernel mass on the other label at the neighbour
        e = [unary[0, 0, i] + kval * q0[1, 0, j], unary[1, 0, i] + kval * q0[0, 0, j]]
        z = np.exp(-np.array(e))
        expected[:, 0, i] = z / z.sum()
    np.testing.assert_allclose(mean_field_refine(unary, image, p), expected, atol=1e-14)


def test_kernel_symmetric_with_zero_diagonal():
    rng = np.random.default_rng(2)
    k = pairwise_kernel(rng.uniform(size=(5, 4, 3)), CrfParams())
    np.testing.assert_array_equal(np.diag(k), 0.0)
    np.testing.assert_allclose(k, k.T, atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
    unary, image = random_instance(rng, h, w)
    p = CrfParams(iterations=int(rng.integers(1, 6)))
    np.testing.assert_allclose(
        mean_field_refine(unary, image, p), brute_force_mean_field(unary, image, p), atol=1e-6, rtol=0
    )


def test_fast_spatial_path_matches_exact_path():
    rng = np.random.default_rng(4)
    unary, image = random_instance(rng, 20, 17, nl=4)
    exact = mean_field_refine(unary, image, CrfParams(spatial_fast_path=False))
    fast = mean_field_refine(unary, image, CrfParams(spatial_fast_path=True))
    np.testing.assert_allclose(fast, exact, atol=1e-4)
    assert np.abs(fast - exact).max() < 1e-10


def test_beliefs_normalised_after_every_iteration():
    rng = np.random.default_rng(5)
    unary, image = random_instance(rng, 12, 12)
    seen = []

    def check(i, q):
        seen.append(i)
        assert np.all(q >= 0)
        np.testing.assert_allclose(q.sum(axis=0), 1.0, atol=1e-9)

    mean_field_refine(unary, image, CrfParams(iterations=6), callback=check)
    assert seen == list(range(6))


def test_extent_mismatch_and_bad_params():
    with pytest.raises(ValueError):
        mean_field_refine(np.zeros((2, 3, 3)), np.zeros((4, 3, 3)), CrfParams())
    with pytest.raises(ValueError):
        mean_field_refine(np.zeros((2, 3, 3)), np.zeros((3, 3, 3)), CrfParams(spatial_sigma=0))
    with pytest.raises(ValueError):
        mean_field_refine(np.zeros((2, 3, 3)), np.zeros((3, 3, 3)), CrfParams(iterations=-1))


# --- properties -------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000), st.permutations([0, 1, 2, 3]))
def test_permutation_equivariance(seed, perm):
    rng = np.random.default_rng(seed)
    unary, image = random_instance(rng, 6, 7, nl=4)
    p = CrfParams(iterations=4)
    q = mean_field_refine(unary, image, p)
    qp = mean_field_refine(unary[list(perm)], image, p)
    np.testing.assert_allclose(qp, q[list(perm)], atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 100_000), st.integers(0, 2), st.integers(0, 3))
def test_translation_shifts_beliefs(seed, dy, dx):
    # Kernels depend on pixel differences only, so embedding the problem at an
    # offset in a larger canvas shifts Q.  The spatial term is switched off and
    # the canvas colour is far away so padding pixels exchange no messages.
    rng = np.random.default_rng(seed)
    unary, image = random_instance(rng, 7, 6)
    p = CrfParams(iterations=3, spatial_weight=0.0)
    big_u = np.zeros((3, 10, 10))
    big_i = np.full((10, 10, 3), 50.0)
    big_u[:, dy : dy + 7, dx : dx + 6] = unary
    big_i[dy : dy + 7, dx : dx + 6] = image
    qs = mean_field_refine(big_u, big_i, p)
    np.testing.assert_allclose(qs[:, dy : dy + 7, dx : dx + 6], mean_field_refine(unary, image, p), atol=1e-12)
