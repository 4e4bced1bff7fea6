import numpy as np
import pytest

from fusionvote import kernels
from fusionvote.kernels import _pyimpl

compiled = pytest.mark.skipif("compiled" not in kernels.BACKENDS, reason="compiled kernels not built")


@pytest.fixture
def restore_backend():
    name = kernels.BACKEND
    yield
    kernels.use_backend(name)


@compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("k,stride,dilation,padding", [(1, 1, 1, 0), (3, 1, 1, 1), (3, 2, 1, 1), (3, 1, 3, 3),
                                                       (2, 2, 1, 0), (3, 3, 2, 4), (5, 2, 1, 6)])
def test_im2col_col2im_parity(rng, dtype, k, stride, dilation, padding):
    from fusionvote.kernels import _cimpl

    x = rng.standard_normal((2, 3, 9, 7)).astype(dtype)
    span = dilation * (k - 1) + 1
    oh = (9 + 2 * padding - span) // stride + 1
    ow = (7 + 2 * padding - span) // stride + 1
    a = _pyimpl.im2col(x, k, stride, dilation, padding, oh, ow)
    b = _cimpl.im2col(x, k, stride, dilation, padding, oh, ow)
    assert a.dtype == b.dtype == dtype and a.tobytes() == b.tobytes()
    cols = rng.standard_normal(a.shape).astype(dtype)
    np.testing.assert_allclose(_pyimpl.col2im(cols, 9, 7, stride, dilation, padding),
                               _cimpl.col2im(cols, 9, 7, stride, dilation, padding), rtol=1e-6, atol=1e-6)


@compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_warp_parity(rng, dtype):
    from fusionvote.kernels import _cimpl

    img = rng.random((11, 13, 3)).astype(dtype)
    for _ in range(10):
        inv = np.array([[1, 0, 0], [0, 1, 0]], float) + rng.normal(0, 0.3, (2, 3))
        assert _pyimpl.warp_nearest(img, inv).tobytes() == _cimpl.warp_nearest(img, inv).tobytes()


def test_col2im_is_adjoint(rng):
    # <im2col(x), c> == <x, col2im(c)>
    x = rng.standard_normal((1, 2, 6, 6))
    cols = _pyimpl.im2col(x, 3, 1, 2, 2, 6, 6)
    c = rng.standard_normal(cols.shape)
    lhs = float((cols * c).sum())
    rhs = float((x * _pyimpl.col2im(c, 6, 6, 1, 2, 2)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_warp_identity(rng):
    img = rng.random((5, 4, 3))
    assert np.array_equal(_pyimpl.warp_nearest(img, np.eye(3)[:2]), img)


def test_use_backend_switches(restore_backend):
    kernels.use_backend("python")
    assert kernels.BACKEND == "python" and kernels.im2col is _pyimpl.im2col


def test_use_backend_unknown(restore_backend):
    with pytest.raises(ValueError, match="unknown"):
        kernels.use_backend("gpu")


@compiled
def test_conv_same_under_both_backends(rng, restore_backend):
    from fusionvote import tensor as T

    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    out = {}
    for name in ("python", "compiled"):
        kernels.use_backend(name)
        xt, wt = T.Tensor(x, requires_grad=True, dtype=np.float64), T.Tensor(w, requires_grad=True, dtype=np.float64)
        y = T.conv2d(xt, wt, stride=1, padding=2, dilation=2)
        y.sum().backward()
        out[name] = (y.data, xt.grad, wt.grad)
    for a, b in zip(out["python"], out["compiled"]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
