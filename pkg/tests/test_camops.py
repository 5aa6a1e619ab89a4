import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfseg import numcore as nc
from selfseg.camops import (
    cams_to_mask,
    crf_labels,
    generate_pseudo_label,
    load_cam_dump,
    multiscale_cams,
    save_cam_dump,
)
from selfseg.dcrf import CrfParams, build_unary, softmax_neg
from selfseg.model import DecoderConfig, EncoderConfig, build_model, compute_cam, encode
from selfseg.structures import CamStack, PseudoMask

from test_dcrf import brute_force_mean_field

SMALL_ENC = EncoderConfig(widths=(4, 6, 8), strides=(1, 2, 2))


def small_model(seed=0):
    return build_model(SMALL_ENC, DecoderConfig(), 3, seed)


def single_pass(params, image, present, align_corners=True):
    feats, _ = encode(params, image.transpose(2, 0, 1)[None])
    cam = compute_cam(params, feats, present)
    return nc.resize_array(cam.maps, *image.shape[:2], align_corners)


# --- thresholding -------------------------------------------------------------------


def test_all_zero_cams_give_background():
    m = cams_to_mask(CamStack(np.zeros((3, 4, 4)), frozenset({1, 2})), 0.3)
    assert m.all_background and not m.labels.any()


def test_threshold_boundary():
    cams = CamStack(np.array([[[0.31, 0.29, 0.3]]]), frozenset({1}))
    np.testing.assert_array_equal(cams_to_mask(cams, 0.3).labels, [[1, 0, 0]])


def test_argmax_and_ties():
    maps = np.zeros((3, 1, 2))
    maps[0, 0] = [0.4, 0.5]
    maps[1, 0] = [0.6, 0.5]
    cams = CamStack(maps, frozenset({1, 2}))
    np.testing.assert_array_equal(cams_to_mask(cams, 0.3).labels, [[2, 1]])


def test_absent_class_never_labelled():
    maps = np.zeros((2, 2, 2))
    maps[1] = 0.9  # class 2 has a response but is not present
    maps[0] = 0.5
    m = cams_to_mask(CamStack(maps, frozenset({1})), 0.3)
    assert set(np.unique(m.labels)) == {1}


def test_tau_must_be_open_unit_interval():
    with pytest.raises(ValueError):
        cams_to_mask(CamStack(np.zeros((1, 2, 2)), frozenset({1})), 1.0)


# --- multiscale ---------------------------------------------------------------------


def test_single_scale_no_flip_reproduces_single_pass():
    rng = np.random.default_rng(0)
    p = small_model()
    image = rng.uniform(size=(24, 20, 3))
    ms = multiscale_cams(p, image, {1, 3}, scales=(1.0,), use_flip=False, renormalize=False)
    np.testing.assert_allclose(ms.maps, single_pass(p, image, {1, 3}), atol=1e-12)


def test_flip_symmetric_input_gives_symmetric_cams():
    rng = np.random.default_rng(1)
    half = rng.uniform(size=(20, 10, 3))
    image = np.concatenate([half, half[:, ::-1]], axis=1)
    ms = multiscale_cams(small_model(), image, {1, 2, 3}, scales=(1.0, 0.5, 1.5), use_flip=True)
    np.testing.assert_allclose(ms.maps, ms.maps[:, :, ::-1], atol=1e-9)


def test_constant_response_gives_constant_map():
    # zero conv weights leave only the biases: every pixel sees the same features
    p = small_model()
    for name, t in p.tensors.items():
        if name.startswith("encoder"):
            t.data = np.zeros_like(t.data) if name.endswith("weight") else np.full_like(t.data, 0.5)
    p["classifier.weight"].data = np.abs(p["classifier.weight"].data)
    ms = multiscale_cams(p, np.random.default_rng(2).uniform(size=(16, 16, 3)), {1}, scales=(1.0, 0.5))
    np.testing.assert_allclose(ms.maps[0], 1.0, atol=1e-12)


@pytest.mark.parametrize("scales", [(1.0,), (0.5,), (1.0, 0.5, 1.5, 2.0), (0.3, 1.7)])
def test_output_extent_matches_image(scales):
    ms = multiscale_cams(small_model(), np.zeros((17, 23, 3)), {2}, scales=scales)
    assert ms.extent == (17, 23)
    assert ms.maps.min() >= 0 and ms.maps.max() <= 1
    assert not ms.maps[[0, 2]].any()


def test_bad_scales_rejected():
    with pytest.raises(ValueError):
        multiscale_cams(small_model(), np.zeros((8, 8, 3)), {1}, scales=())
    with pytest.raises(ValueError):
        multiscale_cams(small_model(), np.zeros((8, 8, 3)), {1}, scales=(1.0, 0.0))


# --- pseudo-labels ------------------------------------------------------------------


def test_zero_pairwise_equals_unary_argmax():
    rng = np.random.default_rng(3)
    cams = CamStack(rng.uniform(size=(3, 6, 6)), frozenset({1, 3}))
    crf = CrfParams(spatial_weight=0.0, bilateral_weight=0.0)
    m = generate_pseudo_label(cams, rng.uniform(size=(6, 6, 3)), 0.3, crf)
    np.testing.assert_array_equal(m.labels, softmax_neg(build_unary(cams, 0.3)).argmax(axis=0))


def test_zero_cams_all_background_for_any_crf():
    cams = CamStack(np.zeros((3, 8, 8)), frozenset({1, 2}))
    for crf in (CrfParams(), CrfParams(iterations=30, bilateral_weight=20.0)):
        m = generate_pseudo_label(cams, np.random.default_rng(0).uniform(size=(8, 8, 3)), 0.3, crf)
        assert m.all_background


@pytest.mark.parametrize("seed", range(3))
def test_pseudo_label_matches_brute_force_pipeline(seed):
    rng = np.random.default_rng(seed)
    cams = CamStack(rng.uniform(size=(3, 8, 8)) ** 2, frozenset({1, 2}))
    image = rng.uniform(size=(8, 8, 3))
    crf = CrfParams(iterations=4)
    q = brute_force_mean_field(build_unary(cams, 0.3), image, crf)
    q[3] = -1  # absent class can never win
    m = generate_pseudo_label(cams, image, 0.3, crf)
    np.testing.assert_array_equal(m.labels, q.argmax(axis=0))
    np.testing.assert_array_equal(m.pre_crf, cams_to_mask(cams, 0.3).labels)


def test_extent_mismatch_rejected():
    with pytest.raises(ValueError):
        generate_pseudo_label(CamStack(np.zeros((1, 4, 4)), frozenset({1})), np.zeros((5, 4, 3)), 0.3, CrfParams())


def test_cam_dump_round_trip(tmp_path):
    cams = CamStack(np.random.default_rng(0).uniform(size=(3, 5, 7)), frozenset({1, 3}), "img7")
    cams.maps[1] = 0
    save_cam_dump(tmp_path / "a.cam", cams)
    back = load_cam_dump(tmp_path / "a.cam")
    assert back.image_id == "img7" and back.present_classes == cams.present_classes
    assert back.maps.tobytes() == cams.maps.tobytes()


# --- properties -------------------------------------------------------------------


@st.composite
def cam_stacks(draw):
    c = draw(st.integers(1, 4))
    h, w = draw(st.integers(1, 8)), draw(st.integers(1, 8))
    present = draw(st.frozensets(st.integers(1, c)))
    maps = np.random.default_rng(draw(st.integers(0, 10_000))).uniform(size=(c, h, w))
    for k in range(1, c + 1):
        if k not in present:
            maps[k - 1] = 0.0
    return CamStack(maps, present)


@settings(max_examples=60, deadline=None)
@given(cam_stacks(), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_threshold_monotone(cams, t1, t2):
    lo, hi = sorted((t1, t2))
    assert (cams_to_mask(cams, hi).labels > 0).sum() <= (cams_to_mask(cams, lo).labels > 0).sum()


@settings(max_examples=40, deadline=None)
@given(cam_stacks())
def test_labels_subset_of_present(cams):
    image = np.random.default_rng(0).uniform(size=(*cams.extent, 3))
    allowed = {0} | set(cams.present_classes)
    assert set(np.unique(cams_to_mask(cams, 0.3).labels)) <= allowed
    assert set(np.unique(crf_labels(cams, image, 0.3, CrfParams(iterations=3)))) <= allowed


def test_pseudo_mask_all_background_flag():
    assert PseudoMask(np.zeros((2, 2), dtype=np.int64)).all_background
    assert not PseudoMask(np.array([[0, 1], [0, 0]])).all_background
