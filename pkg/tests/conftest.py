import numpy as np
import pytest

from specbias import _accel

BACKENDS = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    with _accel.use_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_psd(rng, n, decay=1.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.sort(rng.uniform(0.1, 10.0, n))[::-1] ** decay
    return (Q * lam) @ Q.T, lam, Q
