import numpy as np
import pytest
import torch

from spdrought import gridcube, pipeline
from spdrought.trainer import StagedData

torch.set_num_threads(2)


def make_tiny_dataset(
    rows=2,
    cols=3,
    weeks=52,
    ocean=(),
    dynamics_fill=1.0,
    indices_fill=0.5,
    n_classes=4,
):
    """Hand-built dataset with controllable payloads for pipeline tests."""
    land = np.ones((rows, cols), dtype=bool)
    for r, c in ocean:
        land[r, c] = False
    dynamics = np.full((rows, cols, weeks, gridcube.N_DYNAMIC), dynamics_fill, dtype=np.float32)
    indices = np.full((rows, cols, weeks, gridcube.N_INDICES), indices_fill, dtype=np.float32)
    numeric = np.full((rows, cols, gridcube.N_STATIC_NUMERIC), 0.25, dtype=np.float32)
    dynamics[~land] = np.nan
    indices[~land] = np.nan
    numeric[~land] = np.nan
    return gridcube.Dataset(
        spec=gridcube.GridSpec(rows, cols, weeks, 52, land),
        statics=gridcube.StaticFeatures(
            numeric=numeric,
            land_cover=np.zeros((rows, cols), dtype=np.int64),
            n_classes=n_classes,
        ),
        dynamics=gridcube.DynamicCube(dynamics),
        indices=gridcube.IndexCube(indices),
    )


@pytest.fixture(scope="session")
def small_ds():
    cfg = gridcube.SynthConfig(rows=12, cols=12, years=4, ocean_frac=0.3, n_events=2, nan_frac=0.02)
    return gridcube.generate_synthetic(cfg, seed=7)


@pytest.fixture(scope="session")
def small_prepared(small_ds):
    return pipeline.prepare(small_ds)


@pytest.fixture(scope="session")
def small_staged(small_prepared):
    return StagedData(small_prepared)
