import numpy as np
import pytest

from sanet import _kernels


def rel_err(a, b):
    """Max-norm relative error of ``a`` against reference ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


@pytest.fixture(params=_kernels.available_backends())
def conv_backend(request, monkeypatch):
    """Run the test once per compiled/runtime backend that is present."""
    impl = _kernels.get_backend(request.param)
    monkeypatch.setattr(_kernels, "conv2d_forward", impl.conv2d_forward)
    monkeypatch.setattr(_kernels, "conv2d_backward_input",
                        impl.conv2d_backward_input)
    monkeypatch.setattr(_kernels, "conv2d_backward_weight",
                        impl.conv2d_backward_weight)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
