import numpy as np
import pytest

from causal_voxel.cohort import default_ad_graph, ground_truth_mechanisms
from causal_voxel.phantom import GridSpec, PhantomGenerator


@pytest.fixture(scope="session")
def graph():
    return default_ad_graph()


@pytest.fixture(scope="session")
def gt_mechanisms():
    return ground_truth_mechanisms()


@pytest.fixture(scope="session")
def generator():
    return PhantomGenerator()


@pytest.fixture(scope="session")
def small_generator():
    # same physical field of view as the default grid, coarser voxels
    return PhantomGenerator(GridSpec((32, 32, 32), 6.0))


@pytest.fixture(scope="session")
def cohort_styles(generator):
    """Sampled styles with measured volumes, shared by regression tests."""
    from causal_voxel.phantom import measure_volumes

    ws, vols = [], {"brain": [], "gm": [], "ventricle": []}
    for i in range(60):
        w = generator.sample_style(i)
        m = measure_volumes(generator.generate(w, None))
        ws.append(w)
        for k in vols:
            vols[k].append(m[k])
    return np.array(ws), {k: np.array(v) for k, v in vols.items()}


@pytest.fixture(scope="session")
def volume_regression(cohort_styles):
    from causal_voxel.latent_edit import fit_regression

    styles, volumes = cohort_styles
    return fit_regression(styles, volumes)
