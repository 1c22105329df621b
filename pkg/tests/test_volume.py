import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import sort_and_index_percentile
from petpipe import metrics
from petpipe.errors import ParameterError
from petpipe.volume import (
    BinaryMask,
    LabelVolume,
    NormalizationStats,
    VoxelGrid,
    apply_dataset_stats,
    clip_percentile,
    fit_dataset_stats,
    voxel_volume_ml,
    zscore_normalize,
)


def grid(values, shape=None, spacing=(1, 1, 1)):
    arr = np.asarray(values, dtype=np.float32)
    return VoxelGrid(arr.reshape(shape or (arr.size, 1, 1)), spacing)


@pytest.mark.parametrize(
    "spacing, expected",
    [((1, 1, 1), 0.001), ((10, 10, 10), 1.0), ((2.0, 2.0, 3.0), 0.012)],
)
def test_voxel_volume_ml(spacing, expected):
    assert voxel_volume_ml(grid([0], spacing=spacing)) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("bad", [(0, 1, 1), (1, -2, 1), (1, 1, float("nan")), (1, 1, float("inf"))])
def test_spacing_must_be_positive_finite(bad):
    with pytest.raises(ParameterError):
        grid([0], spacing=bad)


def test_grid_rejects_nonfinite_and_wrong_rank():
    with pytest.raises(ParameterError):
        grid([0.0, np.nan])
    with pytest.raises(ParameterError):
        VoxelGrid(np.zeros((2, 2)), (1, 1, 1))


def test_grid_is_immutable():
    g = grid([1, 2, 3])
    with pytest.raises(ValueError):
        g.data[0, 0, 0] = 5


def test_label_volume_vocabulary_and_binary_mask():
    lv = LabelVolume(np.array([0, 1, 7]).reshape(3, 1, 1), (1, 1, 1), {7: "liver"})
    assert lv.vocabulary == {0: "background", 1: "lesion", 7: "liver"}
    with pytest.raises(ParameterError):
        LabelVolume(np.array([0, 3]).reshape(2, 1, 1), (1, 1, 1))
    with pytest.raises(ParameterError):
        BinaryMask(np.array([0, 2]).reshape(2, 1, 1), (1, 1, 1))
    assert BinaryMask.from_labels(lv, 7).foreground.ravel().tolist() == [False, False, True]


def test_normalization_stats_invariants():
    with pytest.raises(ParameterError):
        NormalizationStats(0, 1, 2, 1)
    with pytest.raises(ParameterError):
        NormalizationStats(0, 1, 0, 1, 50, 50)


def test_clip_constant_volume():
    out, stats = clip_percentile(grid([5.0] * 10), 10, 90)
    assert np.all(out.data == 5.0)
    assert (stats.clip_lo, stats.clip_hi) == (5.0, 5.0)


def test_clip_full_range_is_identity(rng):
    g = grid(rng.normal(size=50))
    out, _ = clip_percentile(g, 0, 100)
    assert np.array_equal(out.data, g.data)


def test_clip_hundred_values_sort_and_index():
    values = list(range(100))
    lo = sort_and_index_percentile(values, 5)
    hi = sort_and_index_percentile(values, 95)
    assert (lo, hi) == (5.0, 95.0)
    out, stats = clip_percentile(grid(np.random.default_rng(0).permutation(values)), 5, 95)
    assert (out.data.min(), out.data.max()) == (5.0, 95.0)
    assert (stats.clip_lo, stats.clip_hi) == (lo, hi)


@pytest.mark.parametrize("lo, hi", [(-1, 50), (50, 50), (60, 40), (0, 101)])
def test_clip_rejects_bad_percentiles(lo, hi):
    with pytest.raises(ParameterError):
        clip_percentile(grid([1, 2, 3]), lo, hi)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float32, st.integers(2, 200), elements=st.floats(-1e4, 1e4, width=32)),
    st.floats(0, 49),
    st.floats(51, 100),
)
def test_clip_matches_oracle_and_is_idempotent(values, lo, hi):
    g = grid(values)
    once, stats = clip_percentile(g, lo, hi)
    assert stats.clip_lo == sort_and_index_percentile(values, lo)
    assert stats.clip_hi == sort_and_index_percentile(values, hi)
    twice, _ = clip_percentile(once, lo, hi)
    assert twice.data.tobytes() == once.data.tobytes()


def test_zscore_examples():
    out, stats = zscore_normalize(grid([3.0] * 4))
    assert np.all(out.data == 0) and stats.std == 0
    out, _ = zscore_normalize(grid([-1.0, 1.0]))
    assert out.data.ravel().tolist() == [-1.0, 1.0]
    out, stats = zscore_normalize(grid([0.0, 10.0]))
    assert out.data.ravel().tolist() == [-1.0, 1.0]
    assert stats.std == 5.0


def test_zscore_needs_two_voxels():
    with pytest.raises(ParameterError):
        zscore_normalize(grid([1.0]))


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.integers(2, 300), elements=st.floats(-100, 100)),
    st.floats(0.01, 100),
    st.floats(-100, 100),
)
def test_zscore_affine_invariance(values, a, b):
    # float32 storage of a*x + b must not already lose more than the tolerance
    spread = float(np.std(values))
    assume(spread > 1e-3)
    assume((np.abs(values).max() + abs(b) / a) / spread < 50)
    base, _ = zscore_normalize(grid(values))
    scaled, _ = zscore_normalize(grid(a * values + b))
    assert abs(float(base.data.mean())) < 1e-5
    assert abs(float(base.data.std()) - 1) < 1e-5
    np.testing.assert_allclose(scaled.data, base.data, atol=1e-5)


def test_single_component_volume_matches_metrics():
    fg = np.zeros((5, 5, 5), dtype=bool)
    fg[1:3, 1:4, 2] = True
    m = BinaryMask(fg, (2.0, 2.0, 3.0))
    empty = BinaryMask(np.zeros_like(fg), m.spacing)
    assert metrics.false_positive_volume(m, empty) == pytest.approx(voxel_volume_ml(m) * fg.sum())


def test_dataset_stats_are_global(rng):
    a = grid(rng.normal(0, 1, 100))
    b = grid(rng.normal(10, 1, 100))
    stats = fit_dataset_stats([a, b], 0, 100)
    assert stats.mean == pytest.approx(np.concatenate([a.data.ravel(), b.data.ravel()]).mean())
    both = np.concatenate([apply_dataset_stats(a, stats).data.ravel(), apply_dataset_stats(b, stats).data.ravel()])
    assert abs(both.mean()) < 1e-5 and abs(both.std() - 1) < 1e-5
