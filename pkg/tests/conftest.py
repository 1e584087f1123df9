"""Shared fixtures: small analytic meshes and the cached benchmark model set."""
import os

import pytest

from lsepose.bench import build_model_set
from lsepose.primitives import box, uv_sphere


@pytest.fixture(scope="session")
def bench_models(tmp_path_factory):
    """The three bundled models with 20000-sample indices.

    Set ``LSEPOSE_TEST_CACHE`` to a directory to reuse the indices across runs.
    """
    cache = os.environ.get("LSEPOSE_TEST_CACHE") or str(tmp_path_factory.mktemp("indices"))
    return build_model_set(cache_dir=cache)


@pytest.fixture(scope="session")
def cube():
    return box((2.0, 2.0, 2.0))


@pytest.fixture(scope="session")
def sphere():
    return uv_sphere(1.0, 32, 64)

