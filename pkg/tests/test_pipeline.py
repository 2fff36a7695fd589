import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spdrought import gridcube, pipeline
from spdrought.gridcube import ConfigError, GridSpec
from spdrought.pipeline import (
    MaxTable,
    SplitAssignment,
    Window,
    block_split,
    denormalize,
    enumerate_windows,
    impute_weekly_climatology,
    normalize_by_max,
    prepare,
)

from conftest import make_tiny_dataset


# -- normalize_by_max ---------------------------------------------------------


def test_normalize_direct_arithmetic():
    ds = make_tiny_dataset(rows=1, cols=3, weeks=52)
    dyn = ds.dynamics.values.copy()
    dyn[0, :, 0, 0] = [2.0, 4.0, 8.0]
    ds = gridcube.Dataset(ds.spec, ds.statics, gridcube.DynamicCube(dyn), ds.indices)
    out, table = normalize_by_max(ds)
    assert table.dynamics_max[0] == 8.0
    np.testing.assert_allclose(out.dynamics.values[0, :, 0, 0], [0.25, 0.5, 1.0])


def test_normalize_all_nan_variable_flagged():
    ds = make_tiny_dataset()
    dyn = ds.dynamics.values.copy()
    dyn[..., 2] = np.nan
    ds = gridcube.Dataset(ds.spec, ds.statics, gridcube.DynamicCube(dyn), ds.indices)
    out, table = normalize_by_max(ds)
    assert "dynamic:vpd" in table.degenerate
    assert np.isnan(out.dynamics.values[..., 2]).all()


def test_normalize_idempotent_when_maxima_are_one():
    ds = make_tiny_dataset(dynamics_fill=1.0, indices_fill=1.0)
    once, table = normalize_by_max(ds)
    twice, _ = normalize_by_max(once)
    assert np.array_equal(once.dynamics.values, twice.dynamics.values)
    assert np.array_equal(once.indices.values, twice.indices.values)
    assert (table.dynamics_max == 1.0).all()


def test_normalize_preserves_nan_and_uses_land_max():
    ds = make_tiny_dataset(rows=2, cols=2, ocean=[(0, 0)])
    dyn = ds.dynamics.values.copy()
    dyn[1, 1, 0, 0] = np.nan
    dyn[1, 0, 0, 0] = 4.0
    ds = gridcube.Dataset(ds.spec, ds.statics, gridcube.DynamicCube(dyn), ds.indices)
    out, table = normalize_by_max(ds)
    assert table.dynamics_max[0] == 4.0
    assert np.isnan(out.dynamics.values[1, 1, 0, 0])


def test_denormalize_recovers_within_one_ulp():
    rng = np.random.default_rng(0)
    ds = make_tiny_dataset(rows=3, cols=3)
    dyn = (rng.random(ds.dynamics.values.shape) * 7.3).astype(np.float32)
    ds = gridcube.Dataset(ds.spec, ds.statics, gridcube.DynamicCube(dyn), ds.indices)
    out, table = normalize_by_max(ds)
    back = denormalize(out.dynamics.values, table.dynamics_max).astype(np.float32)
    diff = np.abs(back - dyn)
    assert (diff <= np.spacing(np.abs(dyn).astype(np.float32))).all()


def test_max_table_text_round_trip():
    ds = make_tiny_dataset()
    _, table = normalize_by_max(ds)
    parsed = MaxTable.from_text(table.to_text())
    np.testing.assert_array_equal(parsed.dynamics_max, table.dynamics_max)
    np.testing.assert_array_equal(parsed.indices_max, table.indices_max)
    assert parsed.degenerate == table.degenerate


def test_normalize_by_quantile_option():
    ds = make_tiny_dataset(rows=1, cols=3, weeks=52)
    out, table = pipeline.normalize_by_quantile(ds, q=1.0)
    assert np.isfinite(table.dynamics_max).all()


# -- impute_weekly_climatology --------------------------------------------------


def test_impute_two_point_mean():
    cube = np.full((1, 3 * 52, 1), np.nan, dtype=np.float32)
    cube[0, :, 0] = 0.7
    cube[0, 4, 0] = 0.2  # year 0, calendar week 4
    cube[0, 52 + 4, 0] = np.nan
    cube[0, 104 + 4, 0] = 0.4
    out, report = impute_weekly_climatology(cube, 52)
    assert out[0, 52 + 4, 0] == pytest.approx(0.3)
    assert report.n_filled == 1


def test_impute_dead_slot_zero_filled_and_reported():
    cube = np.full((1, 2 * 52, 1), 0.5, dtype=np.float32)
    cube[0, 10, 0] = np.nan
    cube[0, 52 + 10, 0] = np.nan
    out, report = impute_weekly_climatology(cube, 52)
    assert out[0, 10, 0] == 0.0 and out[0, 52 + 10, 0] == 0.0
    assert [tuple(r) for r in report.zero_filled] == [(0, 10, 0)]


def test_impute_identity_without_nan():
    cube = np.random.default_rng(1).random((2, 104, 3)).astype(np.float32)
    out, report = impute_weekly_climatology(cube, 52)
    assert np.array_equal(out, cube)
    assert report.n_filled == 0


def test_impute_preserves_observed_weekly_means():
    rng = np.random.default_rng(2)
    cube = rng.random((3, 4 * 52, 2)).astype(np.float32)
    gaps = rng.random(cube.shape) < 0.3
    cube[gaps] = np.nan
    out, _ = impute_weekly_climatology(cube, 52)
    by_year_in = cube.reshape(3, 4, 52, 2)
    by_year_out = out.reshape(3, 4, 52, 2)
    observed_mean = np.nanmean(by_year_in, axis=1)
    filled_mean = by_year_out.mean(axis=1)
    ok = np.isfinite(observed_mean)
    np.testing.assert_allclose(filled_mean[ok], observed_mean[ok], rtol=1e-5, atol=1e-6)


def test_impute_requires_whole_years():
    with pytest.raises(ConfigError):
        impute_weekly_climatology(np.zeros((1, 53, 1)), 52)


# -- block_split ----------------------------------------------------------------


def _full_land_spec(rows, cols):
    return GridSpec(rows, cols, 52, 52, np.ones((rows, cols), dtype=bool))


def test_block_split_counts():
    split = block_split(_full_land_spec(10, 10), 5, 0.8, seed=4)
    n_train_tiles = len({(r // 5, c // 5) for r, c in split.train_pixels})
    n_test_tiles = len({(r // 5, c // 5) for r, c in split.test_pixels})
    assert n_train_tiles == 3 and n_test_tiles == 1


def test_block_split_deterministic():
    a = block_split(_full_land_spec(11, 7), 5, 0.8, seed=9)
    b = block_split(_full_land_spec(11, 7), 5, 0.8, seed=9)
    assert np.array_equal(a.train_pixels, b.train_pixels)
    assert np.array_equal(a.test_pixels, b.test_pixels)
    c = block_split(_full_land_spec(11, 7), 5, 0.8, seed=10)
    assert not np.array_equal(a.train_pixels, c.train_pixels)


def test_block_split_partition_property():
    mask = np.ones((13, 9), dtype=bool)
    mask[0, :3] = False  # some ocean
    spec = GridSpec(13, 9, 52, 52, mask)
    split = block_split(spec, 5, 0.8, seed=3)
    train = {tuple(p) for p in split.train_pixels}
    test = {tuple(p) for p in split.test_pixels}
    assert not train & test
    assert train | test == {tuple(p) for p in np.argwhere(mask)}
    # all pixels of one block share one side
    for r, c in train:
        assert (r // 5, c // 5) not in {(tr // 5, tc // 5) for tr, tc in test}


def test_block_split_needs_two_tiles():
    with pytest.raises(ConfigError):
        block_split(_full_land_spec(4, 4), 5, 0.8, seed=0)


def test_split_text_round_trip():
    split = block_split(_full_land_spec(10, 10), 5, 0.8, seed=4)
    parsed = SplitAssignment.from_text(split.to_text())
    assert parsed.block_size == split.block_size and parsed.seed == split.seed
    assert np.array_equal(parsed.train_pixels, split.train_pixels)
    assert np.array_equal(parsed.test_pixels, split.test_pixels)


# -- enumerate_windows ------------------------------------------------------------


def test_protocol_window_count():
    windows = enumerate_windows(572, 100, 26, 26)
    assert len(windows) == 18
    assert windows[0].context_start == 0
    assert windows[0].horizon_start == 100 and windows[0].end == 126
    assert windows[-1].context_start == 442


def test_boundary_window_counts():
    assert len(enumerate_windows(126, 100, 26, 26)) == 1
    assert len(enumerate_windows(125, 100, 26, 26)) == 0


@given(
    weeks=st.integers(0, 2000),
    context=st.integers(1, 300),
    horizon=st.integers(1, 100),
    stride=st.integers(1, 100),
)
@settings(max_examples=200, deadline=None)
def test_window_count_formula(weeks, context, horizon, stride):
    windows = enumerate_windows(weeks, context, horizon, stride)
    expected = max(0, (weeks - context - horizon) // stride + 1) if weeks >= context + horizon else 0
    assert len(windows) == expected
    for w in windows:
        assert w.end <= weeks


def test_window_validation():
    with pytest.raises(ConfigError):
        enumerate_windows(100, 0, 26, 26)
    with pytest.raises(ConfigError):
        Window(-1)


# -- prepare ----------------------------------------------------------------------


def test_prepare_masks_and_fills(small_ds, small_prepared):
    pre = small_prepared
    assert np.isfinite(pre.series).all()
    assert pre.series.shape == (pre.n_land, small_ds.spec.weeks, 14)
    # validity mask matches the raw NaN pattern of the indices on land
    land = small_ds.spec.land_mask
    raw_valid = np.isfinite(small_ds.indices.values[land])
    assert np.array_equal(pre.target_valid, raw_valid)
    # normalized values live in [0, 1]
    assert pre.series.min() >= 0.0 and pre.series.max() <= 1.0


def test_prepare_attention_statics_scale(small_prepared):
    pre = small_prepared
    assert pre.attention_statics.shape == (pre.n_land, 9)
    scaled = pre.attention_statics[:, 8]
    assert scaled.min() >= 0.0 and scaled.max() <= 1.0
