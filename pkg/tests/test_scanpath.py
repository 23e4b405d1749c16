import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isoscan.scanpath import (CHUNK_DIRECTIONS, ScanOrder, build_path, chunk_channels, flatten,
                              path_is_valid, restore, unchunk)

ALL = [(o, r) for o in ScanOrder for r in (False, True)]


def test_degenerate_line():
    assert build_path((1, 1, 3), ScanOrder.LATERAL_FIRST).perm.tolist() == [0, 1, 2]


def test_axial_first_example():
    assert build_path((2, 1, 2), ScanOrder.AXIAL_FIRST).perm.tolist() == [0, 2, 3, 1]


def test_exhaustive_small_dims():
    for f in range(1, 5):
        for h in range(1, 5):
            for w in range(1, 5):
                for o, r in ALL:
                    assert path_is_valid(build_path((f, h, w), o, r).perm, (f, h, w)) == (True, True)


@settings(max_examples=50, deadline=None)
@given(st.tuples(st.integers(1, 7), st.integers(1, 7), st.integers(1, 7)), st.sampled_from(list(ScanOrder)))
def test_reversal_property(dims, order):
    fwd = build_path(dims, order, False).perm
    rev = build_path(dims, order, True).perm
    assert np.array_equal(rev, fwd[::-1])


def test_lateral_first_stays_in_section_until_done():
    perm = build_path((3, 2, 2), ScanOrder.LATERAL_FIRST).perm
    assert (perm // 4).tolist() == [0] * 4 + [1] * 4 + [2] * 4


def test_axial_first_walks_sections_innermost():
    perm = build_path((3, 2, 2), ScanOrder.AXIAL_FIRST).perm
    assert (perm % 4).tolist()[:3] == [0, 0, 0]
    assert (perm // 4).tolist()[:6] == [0, 1, 2, 2, 1, 0]


def test_paths_are_read_only():
    p = build_path((2, 2, 2))
    with pytest.raises(ValueError):
        p.perm[0] = 1


def test_zero_dim_rejected():
    with pytest.raises(ValueError):
        build_path((0, 2, 2))


def test_chunk_split():
    x = np.stack([np.ones((2, 2, 2)), 2 * np.ones((2, 2, 2))], axis=-1)
    c1, c2 = chunk_channels(x)
    assert np.all(c1 == 1) and np.all(c2 == 2)
    assert np.array_equal(unchunk(c1, c2), x)
    with pytest.raises(ValueError):
        chunk_channels(np.zeros((2, 2, 2, 3)))


def test_flatten_row_and_example():
    row = np.arange(5.0).reshape(1, 1, 5, 1)
    assert flatten(row, build_path((1, 1, 5))).ravel().tolist() == [0, 1, 2, 3, 4]
    vol = np.arange(4.0).reshape(2, 1, 2, 1)
    assert flatten(vol, build_path((2, 1, 2), ScanOrder.AXIAL_FIRST)).ravel().tolist() == [0, 2, 3, 1]


@settings(max_examples=30, deadline=None)
@given(st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)), st.integers(0, 1000))
def test_restore_inverts_flatten(dims, seed):
    x = np.random.default_rng(seed).standard_normal(dims + (3,))
    for _ in range(2):  # both chunks use the same four directions
        for o, r in CHUNK_DIRECTIONS:
            p = build_path(dims, o, r)
            assert np.array_equal(restore(flatten(x, p), p), x)


def test_dims_mismatch():
    with pytest.raises(ValueError):
        flatten(np.zeros((2, 2, 2, 1)), build_path((2, 2, 3)))
    with pytest.raises(ValueError):
        restore(np.zeros((7, 1)), build_path((2, 2, 2)))
