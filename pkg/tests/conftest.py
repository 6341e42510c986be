"""Run the suite on the numpy kernel path.

On boxes with few cores the BLAS-backed numpy kernels are much faster
than the compiled loops, and the two paths are proven equivalent in
test_backend.py, which toggles the backend per test itself.
"""

import pytest

from lrhyper import backend


@pytest.fixture(autouse=True, scope="session")
def _numpy_kernels():
    previous = backend.set_numba(False)
    yield
    backend.set_numba(previous)
