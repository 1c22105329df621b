import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import mask, random_mask_array
from oracles import flood_fill_components, partition_of
from petpipe.cc import Connectivity, label_array, label_components
from petpipe.errors import ParameterError

ALL = list(Connectivity)
small_masks = arrays(bool, st.tuples(*[st.integers(1, 6)] * 3))


def test_empty_mask():
    assert label_components(mask(np.zeros((4, 4, 4)))).count == 0


@pytest.mark.parametrize("conn", ALL)
def test_full_block(conn):
    cs = label_components(mask(np.ones((3, 3, 3))), conn)
    assert cs.count == 1
    assert cs.sizes.tolist() == [27]


def test_diagonal_pair():
    fg = np.zeros((2, 2, 2), dtype=bool)
    fg[0, 0, 0] = fg[1, 1, 1] = True
    assert label_components(mask(fg), Connectivity.FACE6).count == 2
    assert label_components(mask(fg), Connectivity.FACE_EDGE18).count == 2
    assert label_components(mask(fg), Connectivity.FACE_EDGE_CORNER26).count == 1
    assert len(flood_fill_components(fg, 6)) == 2
    assert len(flood_fill_components(fg, 26)) == 1


def test_volumes_and_raster_order():
    fg = np.zeros((4, 1, 4), dtype=bool)
    fg[3, 0, 0] = True
    fg[0, 0, 2:4] = True
    cs = label_components(mask(fg, (10, 10, 10)), Connectivity.FACE6)
    # the component containing (0,0,2) comes first in raster order
    assert cs.labels[0, 0, 2] == 1 and cs.labels[3, 0, 0] == 2
    assert cs.sizes.tolist() == [2, 1]
    np.testing.assert_allclose(cs.volumes_ml, [2.0, 1.0])


def test_parse():
    assert Connectivity.parse("18") is Connectivity.FACE_EDGE18
    with pytest.raises(ParameterError):
        Connectivity.parse(8)


@pytest.mark.parametrize("conn", ALL)
def test_matches_flood_fill(rng, conn):
    for _ in range(40):
        fg = random_mask_array(rng, max_side=10)
        labels, k = label_array(fg, conn)
        oracle = flood_fill_components(fg, conn)
        assert k == len(oracle)
        assert partition_of(labels) == set(oracle)


@settings(max_examples=60, deadline=None)
@given(small_masks)
def test_count_non_increasing_as_connectivity_widens(fg):
    k6, k18, k26 = (label_array(fg, c)[1] for c in ALL)
    assert k26 <= k18 <= k6


@settings(max_examples=60, deadline=None)
@given(small_masks, st.permutations([0, 1, 2]), st.sampled_from([6, 26]))
def test_axis_permutation_equivariance(fg, perm, conn):
    labels, _ = label_array(fg, conn)
    plabels, _ = label_array(np.transpose(fg, perm), conn)
    moved = {frozenset(tuple(v[p] for p in perm) for v in comp) for comp in partition_of(labels)}
    assert partition_of(plabels) == moved


@settings(max_examples=60, deadline=None)
@given(small_masks, st.sampled_from([6, 18, 26]))
def test_labels_are_contiguous_and_in_scan_order(fg, conn):
    labels, k = label_array(fg, conn)
    flat = labels.ravel()
    firsts = [int(v) for v in flat[flat > 0]]
    order = list(dict.fromkeys(firsts))
    assert order == list(range(1, k + 1))
