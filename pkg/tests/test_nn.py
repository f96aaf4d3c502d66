import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference
from wsgrasp.errors import DomainError, FormatError, NumericError, UsageError
from wsgrasp.nn import (Adam, Linear, MaxPoolRows, ReLU, Sequential, SoftmaxRows, Tanh, load_checkpoint, mlp,
                        save_checkpoint)

rows = arrays(np.float64, st.tuples(st.integers(1, 8), st.just(4)), elements=st.floats(-20, 20, allow_nan=False))


def test_relu_softmax_maxpool_definitions():
    assert np.array_equal(Sequential([ReLU(2)])([[-1.0, 2.0]]), [[0.0, 2.0]])
    assert np.array_equal(Sequential([SoftmaxRows(2)])([[0.0, 0.0]]), [[0.5, 0.5]])
    assert np.array_equal(Sequential([MaxPoolRows(2)])([[1.0, 5.0], [3.0, 2.0]]), [[3.0, 5.0]])


def test_width_mismatch_is_domain_error():
    with pytest.raises(DomainError):
        Sequential([Linear(3, 4), Linear(5, 2)])
    with pytest.raises(DomainError):
        Sequential([Linear(3, 4)])(np.zeros((2, 5)))


def test_non_finite_output_is_numeric_error():
    net = Sequential([Linear(1, 1)])
    net.params[0][...] = 1e300
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        net(np.array([[1e300]]))


def test_backward_without_tape():
    with pytest.raises(UsageError):
        Sequential([Linear(2, 2)]).backward(None, np.zeros((1, 2)))


def test_dense_quadratic_closed_form(rng):
    layer = Linear(3, 2, rng=rng)
    net = Sequential([layer])
    x = rng.normal(size=(1, 3))
    y = rng.normal(size=(1, 2))
    out, tape = net.forward(x)
    _, (gW, gb) = net.backward(tape, 2 * (out - y))
    # W stored as in x out, so the closed form 2(Wx - y)x^T appears transposed
    assert np.allclose(gW, (2 * (out - y)).T.dot(x).T, atol=1e-14)
    assert np.allclose(gb, 2 * (out - y)[0])


def test_zero_output_gradient_gives_zero(rng):
    net = mlp((4, 8, 8, 3), rng)
    _, tape = net.forward(rng.normal(size=(5, 4)))
    gx, grads = net.backward(tape, np.zeros((5, 3)))
    assert not np.any(gx) and all(not np.any(g) for g in grads)


def _fd_check(net, x, rng):
    out, tape = net.forward(x)
    w = rng.normal(size=out.shape)
    gx, grads = net.backward(tape, w)

    def loss():
        return float(np.sum(net(x) * w))

    for p, g in zip(net.params, grads):
        fd = central_difference(loss, p, h=1e-5)
        assert np.allclose(g, fd, rtol=1e-4, atol=1e-7)
    assert np.allclose(gx, central_difference(loss, x, h=1e-5), rtol=1e-4, atol=1e-7)


def test_three_layer_net_finite_difference(rng):
    _fd_check(mlp((4, 6, 5, 3), rng), rng.normal(size=(7, 4)), rng)


@pytest.mark.parametrize("layer", ["dense", "conv1d", "relu", "tanh", "softmax", "maxpool"])
def test_every_layer_kind_finite_difference(layer, rng):
    make = {
        "dense": lambda: Sequential([Linear(4, 3, "dense", rng)]),
        "conv1d": lambda: Sequential([Linear(4, 3, "conv1d-k1", rng)]),
        "relu": lambda: Sequential([Linear(4, 4, rng=rng), ReLU(4)]),
        "tanh": lambda: Sequential([Linear(4, 4, rng=rng), Tanh(4)]),
        "softmax": lambda: Sequential([Linear(4, 4, rng=rng), SoftmaxRows(4)]),
        "maxpool": lambda: Sequential([Linear(4, 4, rng=rng), MaxPoolRows(4)]),
    }
    _fd_check(make[layer](), rng.normal(size=(6, 4)), rng)


@given(rows, st.randoms(use_true_random=False))
def test_conv_rows_are_independent(x, r):
    net = mlp((4, 8, 3), np.random.default_rng(0), kind="conv1d-k1")
    p = list(range(len(x)))
    r.shuffle(p)
    assert np.allclose(net(x[p]), net(x)[p], rtol=0, atol=1e-12)


@given(rows, st.randoms(use_true_random=False))
def test_maxpool_permutation_invariant(x, r):
    p = list(range(len(x)))
    r.shuffle(p)
    pool = Sequential([MaxPoolRows(4)])
    assert np.array_equal(pool(x[p]), pool(x))


@given(rows)
def test_softmax_rows_sum_to_one(x):
    y = Sequential([SoftmaxRows(4)])(x * 0.5)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(y > 0) and np.all(y < 1)


def test_adam_first_step_magnitude():
    p = np.array([1.0, -2.0])
    Adam([p], lr=0.01).step([np.array([0.3, -5.0])])
    assert np.allclose(p, [1.0 - 0.01, -2.0 + 0.01], atol=1e-9)


def test_adam_zero_grad_fixed_point():
    p = np.array([1.0])
    opt = Adam([p], lr=0.1)
    opt.step([np.array([1.0])])
    m0, v0, p0 = opt.m[0].copy(), opt.v[0].copy(), p.copy()
    opt.m[0][...] = 0.0
    opt.v[0][...] = 0.0
    opt.step([np.zeros(1)])
    assert np.array_equal(p, p0)
    opt.m[0][...] = m0
    opt.v[0][...] = v0
    opt.step([np.zeros(1)])
    assert opt.m[0][0] == pytest.approx(0.9 * m0[0])
    assert opt.v[0][0] == pytest.approx(0.999 * v0[0])


def test_adam_scalar_convergence():
    w = np.array([0.0])
    opt = Adam([w], lr=0.1)
    for _ in range(200):
        opt.step([2 * (w - 3.0)])
    assert abs(w[0] - 3.0) < 0.1


def test_adam_shape_mismatch():
    with pytest.raises(DomainError):
        Adam([np.zeros(2)]).step([np.zeros(3)])


def test_checkpoint_round_trip(tmp_path, rng):
    nets = {"a": mlp((3, 5, 2), rng, kind="conv1d-k1"),
            "b": Sequential([Linear(2, 2, rng=rng), SoftmaxRows(2)])}
    save_checkpoint(tmp_path / "m.tnn", nets, {"k": "v", "n": "3"})
    back, meta = load_checkpoint(tmp_path / "m.tnn")
    assert meta == {"k": "v", "n": "3"}
    for name in nets:
        assert back[name].spec() == nets[name].spec()
        for p, q in zip(back[name].params, nets[name].params):
            assert np.array_equal(p, q)


def test_checkpoint_corruption(tmp_path, rng):
    save_checkpoint(tmp_path / "m.tnn", {"a": mlp((3, 4), rng)})
    blob = (tmp_path / "m.tnn").read_bytes()
    (tmp_path / "t.tnn").write_bytes(blob[:40])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "t.tnn")
    (tmp_path / "x.tnn").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "x.tnn")
