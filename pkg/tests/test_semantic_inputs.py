import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from desc_depth.data import VOID, SemanticMap
from desc_depth.semantic_inputs import canny_edges, encode_semantic_channels, to_gray
from oracles import canny_reference


def _step(h=16, w=16, col=8):
    img = np.zeros((h, w, 3))
    img[:, col:] = 1.0
    return img


def test_constant_image_has_no_edges():
    assert not canny_edges(np.full((16, 16, 3), 0.4)).any()


def test_step_matches_loop_reference():
    img = _step()
    ours = canny_edges(img, 0.1, 0.2, 1.4)
    ref = canny_reference(to_gray(img), 0.1, 0.2, 1.4)
    assert np.array_equal(ours, ref)
    # one vertical line, one pixel wide, away from the border rows
    cols = np.flatnonzero(ours.any(axis=0))
    assert cols.tolist() == [8]
    assert np.flatnonzero(ours[:, 8]).tolist() == list(range(1, 15))


@pytest.mark.parametrize("seed", range(6))
def test_smooth_random_images_match_loop_reference(seed):
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.random((20, 24, 3)), (1.5, 1.5, 0))
    ours = canny_edges(img, 0.03, 0.06, 1.0)
    ref = canny_reference(to_gray(img), 0.03, 0.06, 1.0)
    assert np.array_equal(ours, ref)


def test_degenerate_thresholds_raise():
    with pytest.raises(ValueError):
        canny_edges(_step(), 0.2, 0.2)
    with pytest.raises(ValueError):
        canny_edges(_step(), 0.3, 0.2)


def test_canny_is_deterministic():
    img = np.random.default_rng(0).random((32, 32, 3))
    assert np.array_equal(canny_edges(img), canny_edges(img))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), offset=st.floats(-0.3, 0.3))
def test_canny_invariant_to_constant_offset(seed, offset):
    rng = np.random.default_rng(seed)
    img = 0.35 + 0.3 * ndimage.gaussian_filter(rng.random((24, 24, 3)), (1.0, 1.0, 0))
    shifted = img + offset  # stays inside [0, 1], so no clamping
    assert np.array_equal(canny_edges(img, 0.02, 0.05), canny_edges(shifted, 0.02, 0.05))


def test_encode_examples():
    sem = SemanticMap(np.array([[3, VOID]]))
    enc = encode_semantic_channels(sem, np.array([[1, 0]]), 10)
    assert enc.channels.shape == (1, 2, 2)
    assert enc.semantic[0, 0] == pytest.approx(0.3)
    assert enc.semantic[0, 1] == 1.0
    assert enc.edges.tolist() == [[1.0, 0.0]]


def test_encode_all_void_constant():
    enc = encode_semantic_channels(SemanticMap.void(4, 6), np.zeros((4, 6), dtype=bool), 6)
    assert (enc.semantic == 1.0).all() and (enc.edges == 0.0).all()


def test_encode_rejects_out_of_range_class():
    with pytest.raises(ValueError):
        encode_semantic_channels(SemanticMap(np.array([[6]])), np.zeros((1, 1)), 6)


def test_encode_is_injective_and_edges_idempotent():
    C = 7
    ids = np.array([list(range(C)) + [VOID]])
    edges = np.array([[0, 1, 0, 1, 1, 0, 0, 1]])
    enc = encode_semantic_channels(SemanticMap(ids), edges, C)
    assert len(set(enc.semantic.ravel().tolist())) == C + 1
    again = encode_semantic_channels(SemanticMap(ids), enc.edges, C)
    assert np.array_equal(again.edges, enc.edges)
    values = enc.semantic.ravel()
    assert np.allclose(values * C, np.round(values * C), atol=1e-5)
