"""Tensor op evaluation and reverse-mode gradients against finite differences."""

import numpy as np
import pytest

from conceptseg import autodiff as ad
from conceptseg.autodiff import Tensor


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def test_matmul_of_ones():
    out = ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    assert np.array_equal(out.data, np.full((2, 2), 3.0))


def test_sigmoid_at_zero():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_sigmoid_extremes_stay_finite():
    out = ad.sigmoid(Tensor([-1000.0, 1000.0]))
    assert np.isfinite(out.data).all()
    assert out.data[0] == 0.0 and out.data[1] == 1.0


def test_softmax_uniform_on_equal_logits():
    out = ad.softmax(Tensor([1.0, 1.0, 1.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3])


def test_sum_gradient_is_ones():
    x = Tensor([3.0, -1.0, 2.0, 0.5], requires_grad=True)
    ad.backward(x.sum())
    assert np.array_equal(x.grad, np.ones(4))


def test_square_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.backward((x * x).sum())
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_fanout_accumulates():
    # x feeds two consumers; d/dx [sum(x*a) + sum(x*b)] = a + b
    x = Tensor([1.0, 1.0], requires_grad=True)
    loss = (x * Tensor([2.0, 3.0])).sum() + (x * Tensor([5.0, 7.0])).sum()
    ad.backward(loss)
    assert np.array_equal(x.grad, [7.0, 10.0])


def test_repeated_backward_accumulates_into_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.backward(x.sum())
    ad.backward(x.sum())
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_backward_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.backward(x * x)


def test_shape_mismatch_names_op():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_log_domain():
    with pytest.raises(ad.DomainError):
        ad.log(Tensor([-1.0]))
    # zero is floored, not an error
    assert np.isfinite(ad.log(Tensor([0.0])).data).all()


def test_tape_visits_each_node_once():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    z = y + y  # diamond: y reused
    tape = ad.Tape.from_root(z)
    assert len(tape) == len({id(t) for t in tape.order})


def test_deterministic_evaluation():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 5))

    def run():
        t = Tensor(x, requires_grad=True)
        out = ad.softmax(ad.matmul(ad.sigmoid(t), t), axis=1).sum()
        ad.backward(out)
        return out.item(), t.grad.copy()

    v1, g1 = run()
    v2, g2 = run()
    assert v1 == v2
    assert np.array_equal(g1, g2)


def test_grad_check_sum_of_sigmoids():
    rng = np.random.default_rng(1)
    x = rand(rng, 8)
    report = ad.grad_check(lambda t: ad.sigmoid(t).sum(), [x])
    assert report.passed, report


def test_grad_check_negative_control():
    # a deliberately corrupted gradient closure must be flagged
    def bad_op(t):
        out = Tensor(t.data * 3.0)
        out.node = ad.TapeNode("bad", (t,), lambda g: (g * 2.0,))
        return out

    x = Tensor([1.0, -0.5], requires_grad=True)
    report = ad.grad_check(lambda t: bad_op(t).sum(), [x])
    assert not report.passed
    assert report.max_rel_error > 1e-4


def test_grad_check_rejects_bad_step():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        ad.grad_check(lambda t: t.sum(), [x], step=1.0)


def test_grad_check_reports_nonfinite():
    x = Tensor([0.5], requires_grad=True)

    def f(t):
        out = Tensor(np.array([np.inf]))
        out.node = ad.TapeNode("inf", (t,), lambda g: (g,))
        return out.sum()

    assert not ad.grad_check(f, [x]).passed


OP_CASES = {
    "add": lambda a, b: (a + b).sum(),
    "sub": lambda a, b: (a - b).sum(),
    "mul": lambda a, b: (a * b).mean(),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)).sum(),
    "sigmoid": lambda a, b: ad.sigmoid(a + b).sum(),
    "softmax": lambda a, b: (ad.softmax(a, axis=1) * b).sum(),
    "mean_axis": lambda a, b: (a.mean(axis=0) * b.mean(axis=1)).sum(),
    "sum_axis": lambda a, b: (a.sum(axis=1, keepdims=True) * b).sum(),
    "reshape_transpose": lambda a, b: ad.matmul(a.reshape(2, 8), a.reshape(8, 2)).sum() + b.sum(),
    "concat": lambda a, b: ad.concatenate([a, b], axis=1).mean(),
    "sin_cos": lambda a, b: (ad.sin(a) * ad.cos(b)).sum(),
    "silu": lambda a, b: ad.silu(a * b).sum(),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    f = OP_CASES[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(10):
        a, b = rand(rng, 4, 4), rand(rng, 4, 4)
        report = ad.grad_check(f, [a, b])
        assert report.passed, f"{name}: {report}"


def test_log_power_clamp_gradients():
    rng = np.random.default_rng(7)
    for _ in range(10):
        x = Tensor(rng.uniform(0.1, 2.0, (3, 3)), requires_grad=True)
        assert ad.grad_check(lambda t: ad.log(t).sum(), [x]).passed
        assert ad.grad_check(lambda t: ad.power(t, 2.0).sum(), [x]).passed
        assert ad.grad_check(lambda t: ad.power(t, 0.5).mean(), [x]).passed
        assert ad.grad_check(lambda t: ad.power(t, -1.0).mean(), [x]).passed
        y = Tensor(rng.uniform(-2.0, 2.0, (3, 3)), requires_grad=True)
        assert ad.grad_check(lambda t: ad.clamp(t, 0.0, 1.0).sum(), [y]).passed


def test_layer_norm_gradients():
    rng = np.random.default_rng(11)
    for _ in range(10):
        x = rand(rng, 5, 6)
        gain = rand(rng, 6)
        bias = rand(rng, 6)
        report = ad.grad_check(lambda a, g, b: ad.layer_norm(a, g, b).sum(), [x, gain, bias])
        assert report.passed, report


def test_conv_gradients():
    rng = np.random.default_rng(13)
    for _ in range(5):
        x = rand(rng, 4, 5, 2)
        w3 = Tensor(0.3 * rng.standard_normal((3, 3, 2, 3)), requires_grad=True)
        b3 = rand(rng, 3)
        report = ad.grad_check(lambda a, w, b: ad.conv2d_3x3(a, w, b).sum(), [x, w3, b3])
        assert report.passed, report
        w1 = rand(rng, 2, 3)
        b1 = rand(rng, 3)
        report = ad.grad_check(lambda a, w, b: (ad.conv1x1(a, w, b) ** 2.0).mean(), [x, w1, b1])
        assert report.passed, report


def test_conv1x1_matches_manual_matmul():
    rng = np.random.default_rng(17)
    x = rng.standard_normal((4, 4, 3))
    w = rng.standard_normal((3, 5))
    out = ad.conv1x1(Tensor(x), Tensor(w)).data
    expected = (x.reshape(16, 3) @ w).reshape(4, 4, 5)
    assert np.allclose(out, expected)


def test_conv3x3_matches_direct_convolution():
    rng = np.random.default_rng(19)
    x = rng.standard_normal((5, 4, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    out = ad.conv2d_3x3(Tensor(x), Tensor(w), Tensor(b)).data
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    expected = np.zeros((5, 4, 3))
    for i in range(5):
        for j in range(4):
            patch = xp[i:i + 3, j:j + 3, :]
            expected[i, j] = np.tensordot(patch, w, axes=3) + b
    assert np.allclose(out, expected)


def test_constants_build_no_graph():
    out = ad.sigmoid(Tensor(np.ones(3)) * Tensor(np.ones(3)))
    assert out.node is None
