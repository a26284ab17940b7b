"""Kernel-level tests: loop oracles, finite differences, and parity
between the compiled and pure-numpy implementations.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gmvc import backend
from gmvc.errors import InvalidInput

BACKENDS = ["numpy", "numba"]


@pytest.fixture(autouse=True)
def restore_backend():
    prev = backend.active_backend()
    yield
    backend.set_backend(prev)


def conv_oracle(x, w, b):
    """Direct triple loop over (batch, time, output channel)."""
    m, t, c_in = x.shape
    c_out = w.shape[1]
    out = np.zeros((m, t, c_out))
    for i in range(m):
        for j in range(t):
            for tap, dt in enumerate((-1, 0, 1)):
                src = j + dt
                if 0 <= src < t:
                    out[i, j] += x[i, src] @ w[tap * c_in : (tap + 1) * c_in]
            out[i, j] += b
    return out


def lstm_oracle(preact, c_prev):
    h_dim = preact.shape[1] // 4

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    i = sig(preact[:, :h_dim])
    f = sig(preact[:, h_dim : 2 * h_dim])
    g = np.tanh(preact[:, 2 * h_dim : 3 * h_dim])
    o = sig(preact[:, 3 * h_dim :])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


class TestConvKernel:
    @pytest.mark.parametrize("name", BACKENDS)
    def test_forward_matches_loop_oracle(self, name):
        backend.set_backend(name)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 7, 5))
        w = rng.normal(size=(15, 4))
        b = rng.normal(size=4)
        assert_allclose(backend.conv1d_forward(x, w, b), conv_oracle(x, w, b),
                        rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("name", BACKENDS)
    def test_backward_matches_finite_differences(self, name):
        backend.set_backend(name)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 5, 3))
        w = rng.normal(size=(9, 2))
        b = rng.normal(size=2)
        gy = rng.normal(size=(2, 5, 2))
        gx, gw, gb = backend.conv1d_backward(x, w, gy, True)

        def loss(xx, ww, bb):
            return float((backend.conv1d_forward(xx, ww, bb) * gy).sum())

        eps = 1e-6
        for arr, grad, which in ((x, gx, 0), (w, gw, 1), (b, gb, 2)):
            flat = arr.reshape(-1)
            num = np.zeros_like(flat)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = loss(x, w, b)
                flat[k] = orig - eps
                dn = loss(x, w, b)
                flat[k] = orig
                num[k] = (up - dn) / (2 * eps)
            assert_allclose(grad.reshape(-1), num, rtol=1e-5, atol=1e-7,
                            err_msg=f"arg {which}")

    def test_backward_can_skip_input_gradient(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 4, 3))
        w = rng.normal(size=(9, 2))
        gy = rng.normal(size=(1, 4, 2))
        gx, gw, gb = backend.conv1d_backward(x, w, gy, False)
        assert gx is None
        assert gw.shape == w.shape

    def test_backend_parity(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 43, 8)).astype(np.float32)
        w = rng.normal(size=(24, 6)).astype(np.float32)
        b = rng.normal(size=6).astype(np.float32)
        gy = rng.normal(size=(3, 43, 6)).astype(np.float32)
        outs, grads = [], []
        for name in BACKENDS:
            backend.set_backend(name)
            outs.append(backend.conv1d_forward(x, w, b))
            grads.append(backend.conv1d_backward(x, w, gy, True))
        assert_allclose(outs[0], outs[1], rtol=2e-5, atol=2e-5)
        for a, b_ in zip(grads[0], grads[1]):
            assert_allclose(a, b_, rtol=2e-4, atol=2e-4)


class TestLstmKernel:
    @pytest.mark.parametrize("name", BACKENDS)
    def test_forward_matches_oracle(self, name):
        backend.set_backend(name)
        rng = np.random.default_rng(4)
        pre = rng.normal(size=(5, 16)) * 3.0
        c0 = rng.normal(size=(5, 4))
        h, c, gates = backend.lstm_gates_forward(pre, c0)
        oh, oc = lstm_oracle(pre, c0)
        assert_allclose(h, oh, rtol=1e-10, atol=1e-12)
        assert_allclose(c, oc, rtol=1e-10, atol=1e-12)
        assert gates.shape == (5, 16)

    @pytest.mark.parametrize("name", BACKENDS)
    def test_backward_matches_finite_differences(self, name):
        backend.set_backend(name)
        rng = np.random.default_rng(5)
        pre = rng.normal(size=(2, 12))
        c0 = rng.normal(size=(2, 3))
        gh = rng.normal(size=(2, 3))
        gc = rng.normal(size=(2, 3))
        _, c_new, gates = backend.lstm_gates_forward(pre, c0)
        gpre, gc0 = backend.lstm_gates_backward(gates, c0, c_new, gh, gc)

        def loss(p, c):
            h_, c_, _ = backend.lstm_gates_forward(p, c)
            return float((h_ * gh).sum() + (c_ * gc).sum())

        eps = 1e-6
        for arr, grad in ((pre, gpre), (c0, gc0)):
            flat = arr.reshape(-1)
            num = np.zeros_like(flat)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = loss(pre, c0)
                flat[k] = orig - eps
                dn = loss(pre, c0)
                flat[k] = orig
                num[k] = (up - dn) / (2 * eps)
            assert_allclose(grad.reshape(-1), num, rtol=1e-5, atol=1e-7)

    def test_extreme_preactivations_stay_finite(self):
        for name in BACKENDS:
            backend.set_backend(name)
            pre = np.array([[800.0, -800.0, 700.0, -700.0]])
            h, c, gates = backend.lstm_gates_forward(pre, np.zeros((1, 1)))
            assert np.isfinite(h).all() and np.isfinite(c).all()
            assert np.isfinite(gates).all()

    def test_backend_parity(self):
        rng = np.random.default_rng(6)
        pre = rng.normal(size=(8, 32)).astype(np.float32)
        c0 = rng.normal(size=(8, 8)).astype(np.float32)
        res = []
        for name in BACKENDS:
            backend.set_backend(name)
            res.append(backend.lstm_gates_forward(pre, c0))
        for a, b_ in zip(res[0], res[1]):
            assert_allclose(a, b_, rtol=2e-5, atol=2e-5)


class TestBackendSelection:
    def test_set_and_report(self):
        backend.set_backend("numpy")
        assert backend.active_backend() == "numpy"
        backend.set_backend("numba")
        assert backend.active_backend() == "numba"

    def test_unknown_backend_rejected(self):
        with pytest.raises(InvalidInput):
            backend.set_backend("cuda")

    @pytest.mark.parametrize("name", BACKENDS)
    def test_each_backend_is_deterministic(self, name):
        backend.set_backend(name)
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 10, 4)).astype(np.float32)
        w = rng.normal(size=(12, 4)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        assert_array_equal(backend.conv1d_forward(x, w, b),
                           backend.conv1d_forward(x, w, b))
