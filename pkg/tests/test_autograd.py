import numpy as np
import pytest

from learned_beamforming import autograd as ag
from learned_beamforming.errors import DataError, GraphError, NumericalError


def test_elementwise_gradients(rng, check_gradients):
    a = rng.uniform(0.5, 2.0, (3, 4))
    b = rng.uniform(0.5, 2.0, (1, 4))

    def fn(x, y):
        return (ag.log(x / y) * x + (x - y) ** 3 + ag.absolute(x - 3.0) * y).sum()

    check_gradients(fn, a, b)


def test_activation_gradients(rng, check_gradients):
    # keep away from the kinks of clamp and hard_sigmoid
    x = rng.uniform(-2.5, 2.5, (2, 5))
    x[np.abs(np.abs(x) - 1) < 0.05] = 0.3
    w = rng.normal(size=x.shape)

    def fn(t):
        return ((ag.silu(t) + ag.hard_sigmoid(t) + ag.clamp(t, -1.0, 1.0)) * ag.tensor(w)).sum()

    check_gradients(fn, x)


def test_reduction_and_indexing_gradients(rng, check_gradients):
    x = rng.normal(size=(2, 3, 4))

    def fn(t):
        parts = ag.concat([t[:, :2], t[:, 1:] * 2.0], axis=1)
        return (parts.mean(axis=(1, 2)) ** 2).sum() + t.reshape(6, 4)[1:4].sum()

    check_gradients(fn, x)


@pytest.mark.parametrize('stride', [1, 2])
def test_conv2d_gradients(rng, check_gradients, stride):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    with ag.precision('float64'):
        out_shape = ag.conv2d(ag.tensor(x), ag.tensor(w), ag.tensor(b), stride).shape
    proj = rng.normal(size=out_shape)

    def fn(xt, wt, bt):
        return (ag.conv2d(xt, wt, bt, stride) * ag.tensor(proj)).sum()

    check_gradients(fn, x, w, b)


def test_conv2d_matches_direct_correlation(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    with ag.precision('float64'):
        out = ag.conv2d(ag.tensor(x), ag.tensor(w)).data
    expected = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                expected[0, o, i, j] = (x[0, :, i : i + 3, j : j + 3] * w[o]).sum()
    np.testing.assert_allclose(out, expected, rtol=1e-12)


@pytest.mark.parametrize('use_running', [False, True])
def test_batch_norm_gradients(rng, check_gradients, use_running):
    x = rng.normal(1.0, 2.0, (3, 2, 4, 3))
    gamma = rng.uniform(0.5, 1.5, 2)
    beta = rng.normal(size=2)
    proj = rng.normal(size=x.shape)
    running = (np.array([0.5, -0.2]), np.array([1.5, 0.7])) if use_running else None

    def fn(xt, gt, bt):
        out, _, _ = ag.batch_norm(xt, gt, bt, running=running)
        return (out * ag.tensor(proj)).sum()

    check_gradients(fn, x, gamma, beta, rtol=1e-4, atol=1e-6)


def test_batch_norm_normalizes_per_channel(rng):
    x = rng.normal(3.0, 2.0, (4, 3, 5, 5))
    with ag.precision('float64'):
        out, mu, var = ag.batch_norm(ag.tensor(x), ag.tensor(np.ones(3)), ag.tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, rtol=1e-3)
    np.testing.assert_allclose(mu, x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(var, x.var(axis=(0, 2, 3)))


def test_spatial_op_gradients(rng, check_gradients):
    x = rng.normal(size=(1, 2, 5, 7))
    proj_pad = rng.normal(size=(1, 2, 8, 9))
    proj_up = rng.normal(size=(1, 2, 10, 14))
    proj_pool = rng.normal(size=(1, 2, 2, 3))

    def fn(t):
        padded = ag.pad_reflect(t, 1, 2, 0, 2) * ag.tensor(proj_pad)
        up = ag.upsample2x(t) * ag.tensor(proj_up)
        pooled = ag.avg_pool2x(t) * ag.tensor(proj_pool)
        return padded.sum() + up.sum() + pooled.sum()

    check_gradients(fn, x)


def test_pad_reflect_values():
    x = np.arange(12, dtype=np.float64).reshape(1, 1, 3, 4)
    with ag.precision('float64'):
        padded = ag.pad_reflect(ag.tensor(x), 1, 1, 2, 0).data
    np.testing.assert_array_equal(padded[0, 0], np.pad(x[0, 0], ((1, 1), (2, 0)), mode='reflect'))
    with pytest.raises(DataError):
        ag.pad_reflect(ag.tensor(x), 3, 0, 0, 0)


def test_shared_inputs_accumulate():
    with ag.precision('float64'):
        x = ag.tensor([1.0, 2.0, 3.0], requires_grad=True)
        (x * x + x).sum().backward()
        np.testing.assert_allclose(x.grad, [3.0, 5.0, 7.0])
        x.zero_grad()
        assert x.grad is None


def test_graph_errors():
    leaf = ag.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError):
        leaf.backward()
    with pytest.raises(GraphError):
        (leaf * 2.0).backward()
    with pytest.raises(GraphError):
        ag.tensor(1.0).backward()


def test_non_finite_values_raise():
    with pytest.raises(NumericalError):
        ag.log(ag.tensor([0.0, 1.0]))
    with pytest.raises(NumericalError):
        ag.tensor([1.0]) / ag.tensor([0.0])


def test_no_grad_skips_graph():
    x = ag.tensor([1.0, 2.0], requires_grad=True)
    with ag.no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad
    assert not y.depends_on
    assert (x * 3.0).sum().requires_grad


def test_precision_switches_dtype():
    assert ag.tensor([1.0]).data.dtype == np.float32
    with ag.precision('float64'):
        assert ag.tensor([1.0]).data.dtype == np.float64
    assert ag.default_dtype() is np.float32
