import math

import numpy as np
import pytest

import numerics as nx
from errors import DimensionError, InputError
from supervision import focal_loss


def test_matmul_hand_example():
    a = nx.Tensor([[1, 2], [3, 4]])
    b = nx.Tensor([[1], [1]])
    np.testing.assert_array_equal(nx.matmul(a, b).data, [[3], [7]])


def test_matmul_identity_and_zero():
    a = nx.Tensor(np.arange(9.0).reshape(3, 3))
    np.testing.assert_array_equal(nx.matmul(nx.Tensor(np.eye(3)), a).data, a.data)
    np.testing.assert_array_equal(nx.matmul(a, nx.Tensor(np.zeros((3, 2)))).data, np.zeros((3, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.ones((2, 3))))


def test_gelu_values(float64):
    out = nx.gelu(nx.Tensor([0.0, 1.0, 20.0])).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(0.8413, abs=1e-4)
    assert out[2] == pytest.approx(20.0)


def test_softmax_closed_form(float64):
    p = nx.softmax(nx.Tensor([0.0, math.log(2.0)])).data
    np.testing.assert_allclose(p, [1 / 3, 2 / 3], atol=1e-12)
    np.testing.assert_allclose(nx.softmax(nx.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-12)


def test_softmax_shift_invariance(float64):
    base = nx.softmax(nx.Tensor([0.0, 0.7, 1.4])).data
    shifted = nx.softmax(nx.Tensor([5.0, 5.7, 6.4])).data
    np.testing.assert_allclose(base, shifted, atol=1e-12)


def test_softmax_mask_zeroes_entries(float64):
    p = nx.softmax(nx.Tensor([[1.0, 2.0, 3.0]]), mask=np.array([[True, False, True]])).data
    assert p[0, 1] == 0.0
    assert p.sum() == pytest.approx(1.0)


def test_segment_mean():
    out = nx.segment_mean(nx.Tensor([[1.0], [3.0], [10.0]]), [2, 1]).data
    np.testing.assert_allclose(out, [[2.0], [10.0]])
    with pytest.raises(DimensionError):
        nx.segment_mean(nx.Tensor([[1.0], [3.0]]), [3])


def test_cross_entropy_matches_manual(float64):
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 4))
    targets = [0, 3, 1, 1, 2]
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    expected = -logp[np.arange(5), targets].mean()
    assert nx.cross_entropy(nx.Tensor(z), targets).item() == pytest.approx(expected, abs=1e-12)


def test_grad_check_sum_of_squares(float64):
    x = nx.Tensor(np.random.default_rng(1).normal(size=(3, 4)))
    err = nx.grad_check(lambda t: nx.reduce_sum(nx.mul(t, t)), x)
    assert err < 1e-8


def test_grad_check_layer_norm_and_gelu(float64):
    rng = np.random.default_rng(2)
    gamma = nx.Tensor(rng.normal(size=4))
    beta = nx.Tensor(rng.normal(size=4))
    weights = nx.Tensor(rng.normal(size=(3, 4)))

    def f(t):
        return nx.mean(nx.mul(nx.gelu(nx.layer_norm(t, gamma, beta)), weights))

    assert nx.grad_check(f, nx.Tensor(rng.normal(size=(3, 4)))) < 1e-5


def test_grad_check_focal_loss(float64):
    rng = np.random.default_rng(3)
    labels = [0, 1, 2, 1, 1]
    alpha = [1.4, 0.2, 1.4]

    def f(t):
        return focal_loss(nx.softmax(t, axis=-1), labels, alpha, gamma=2.0)

    assert nx.grad_check(f, nx.Tensor(rng.normal(size=(5, 3)))) < 1e-4


def test_grad_check_token_loss(float64, tiny_config):
    from backbone import TinyTransformer

    model = TinyTransformer(tiny_config, seed=11)
    model.params["embed.token"].data = model.params["embed.token"].data * 25.0
    tokens = [1, 11, 17, 2]
    targets = [-1, 17, 2, 17]

    def f(w):
        model.params["head.weight"] = w
        return model.token_loss([tokens], [targets])

    assert nx.grad_check(f, nx.Tensor(model.params["head.weight"].data)) < 1e-3


def test_backward_accumulates_on_leaves(float64):
    w = nx.Tensor([1.0, 2.0], requires_grad=True)
    nx.reduce_sum(nx.mul(w, 3.0)).backward()
    nx.reduce_sum(nx.mul(w, 3.0)).backward()
    np.testing.assert_allclose(w.grad, [6.0, 6.0])
    w.zero_grad()
    assert w.grad is None


def test_backward_needs_scalar_and_tracked_output():
    w = nx.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        nx.mul(w, 2.0).backward()
    with pytest.raises(InputError):
        nx.reduce_sum(nx.Tensor(np.ones(3))).backward()


def test_no_grad_skips_recording():
    w = nx.Tensor(np.ones(2), requires_grad=True)
    with nx.no_grad():
        out = nx.reduce_sum(nx.mul(w, 2.0))
    assert not out.requires_grad


def test_precision_switch():
    assert nx.get_default_dtype() is np.float32
    with nx.precision(np.float64):
        assert nx.Tensor([1.0]).dtype == np.float64
    assert nx.Tensor([1.0]).dtype == np.float32
    with pytest.raises(InputError):
        nx.set_default_dtype(np.int32)
