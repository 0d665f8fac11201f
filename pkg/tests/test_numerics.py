import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from piano import numerics as nx
from piano.numerics import Tensor

from conftest import max_rel_error, numeric_grad, tape_grads


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nx.matmul(a, b).data, b.data)


def test_matmul_projector():
    out = nx.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0], [7.0]]))
    assert out.data.tolist() == [[5.0], [0.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for p in range(4):
                ref[i, j] += a[i, p] * b[p, j]
    assert np.max(np.abs(nx.matmul(Tensor(a), Tensor(b)).data - ref)) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------- silu

def test_silu_values():
    assert nx.silu(Tensor([0.0])).data[0] == 0.0
    assert abs(nx.silu(Tensor([50.0])).data[0] - 50.0) < 1e-12
    assert abs(nx.silu(Tensor([1.0])).data[0] - 1.0 / (1.0 + math.exp(-1.0))) < 1e-15
    assert abs(nx.silu(Tensor([1.0])).data[0] - 0.7310585786300049) < 1e-15


def test_silu_extreme_inputs_are_finite():
    out = nx.silu(Tensor([-1e4, 1e4])).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1e4


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_vector_is_zero():
    out = nx.layer_norm(Tensor(np.full(5, 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.all(out.data == 0.0)


def test_layer_norm_already_normalised():
    out = nx.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    assert np.allclose(out.data, [-1.0, 1.0], atol=0, rtol=1e-15)


def test_layer_norm_matches_direct_formula(rng):
    x, g, b = rng.normal(size=8), rng.normal(size=8), rng.normal(size=8)
    mu = sum(x) / 8
    var = sum((v - mu) ** 2 for v in x) / 8
    ref = [(v - mu) / math.sqrt(var + 1e-5) * gi + bi for v, gi, bi in zip(x, g, b)]
    out = nx.layer_norm(Tensor(x), Tensor(g), Tensor(b))
    assert np.max(np.abs(out.data - ref)) < 1e-12


def test_layer_norm_rejects_single_feature():
    with pytest.raises(nx.ShapeError):
        nx.layer_norm(Tensor([1.0]), Tensor([1.0]), Tensor([0.0]))


# ---------------------------------------------------------------- backward

def test_backward_of_sum():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (g,) = tape_grads(lambda: nx.tsum(w), [w])
    assert g.tolist() == [1.0, 1.0, 1.0]


def test_backward_of_half_square():
    w = Tensor([1.0, -2.0, 0.5], requires_grad=True)
    (g,) = tape_grads(lambda: nx.tsum(w * w) * 0.5, [w])
    assert np.allclose(g, w.data, rtol=0, atol=1e-15)


def test_backward_rejects_non_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with nx.Tape() as tape:
        out = w * 2.0
    with pytest.raises(nx.ShapeError):
        nx.backward(tape, out)


def test_unused_parameter_gets_zero_gradient():
    w = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    grads = tape_grads(lambda: nx.tsum(w), [w, unused])
    assert np.array_equal(grads[1], np.zeros((2, 2)))


def test_repeated_backward_resets_accumulators():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with nx.Tape() as tape:
        loss = nx.tsum(nx.square(w))
    first = nx.backward(tape, loss, [w])[w].copy()
    second = nx.backward(tape, loss, [w])[w]
    assert np.array_equal(first, second)


def test_no_recording_outside_tape():
    w = Tensor([1.0], requires_grad=True)
    out = w * 3.0
    assert nx.active_tape() is None and out.requires_grad


# --------------------------------------------------- gradient checks per primitive

def _check(fn, tensors, tol=1e-4):
    analytic = tape_grads(fn, tensors)
    numeric = numeric_grad(fn, tensors)
    for a, n in zip(analytic, numeric):
        assert max_rel_error(a, n) < tol


PRIMITIVE_CASES = {
    "add_broadcast": lambda r: ((lambda a, b: nx.tsum(nx.square(a + b))), [param(r, 3, 4), param(r, 4)]),
    "sub": lambda r: ((lambda a, b: nx.tsum(nx.square(a - b))), [param(r, 3, 2), param(r, 3, 1)]),
    "mul": lambda r: ((lambda a, b: nx.tsum(a * b * a)), [param(r, 2, 3), param(r, 2, 3)]),
    "matmul": lambda r: ((lambda a, b: nx.tsum(nx.square(a @ b))), [param(r, 3, 4), param(r, 4, 2)]),
    "linear": lambda r: ((lambda x, w, b: nx.tsum(nx.square(nx.linear(x, w, b)))),
                         [param(r, 3, 4), param(r, 4, 5), param(r, 5)]),
    "sigmoid": lambda r: ((lambda a: nx.tsum(nx.square(nx.sigmoid(a)))), [param(r, 3, 3)]),
    "tanh": lambda r: ((lambda a: nx.tsum(nx.square(nx.tanh(a)))), [param(r, 3, 3)]),
    "silu": lambda r: ((lambda a: nx.tsum(nx.square(nx.silu(a)))), [param(r, 3, 3, scale=2)]),
    "layer_norm": lambda r: ((lambda x, g, b: nx.tsum(nx.square(nx.layer_norm(x, g, b)) * Tensor(np.arange(15.).reshape(3, 5)))),
                             [param(r, 3, 5), param(r, 5), param(r, 5)]),
    "concat": lambda r: ((lambda a, b: nx.tsum(nx.square(nx.concat([a, b], axis=1)) * Tensor(np.arange(10.).reshape(2, 5)))),
                         [param(r, 2, 2), param(r, 2, 3)]),
    "stack": lambda r: ((lambda a, b: nx.tsum(nx.square(nx.stack([a, b], axis=0)) * 1.5)), [param(r, 3), param(r, 3)]),
    "reshape": lambda r: ((lambda a: nx.tsum(nx.reshape(a, (3, 2)) @ Tensor([[1.0], [2.0]]))), [param(r, 2, 3)]),
    "getitem_basic": lambda r: ((lambda a: nx.tsum(nx.square(a[1:, :2]))), [param(r, 3, 3)]),
    "getitem_fancy": lambda r: ((lambda a: nx.tsum(nx.square(nx.getitem(a, ([0, 2, 0], slice(None)))))), [param(r, 3, 2)]),
    "mean_axis": lambda r: ((lambda a: nx.tsum(nx.square(nx.mean(a, axis=1)))), [param(r, 3, 4)]),
    "mean_all": lambda r: ((lambda a: nx.mean(nx.square(a))), [param(r, 3, 4)]),
    "apply_left": lambda r: ((lambda a: nx.tsum(nx.square(nx.apply_left(np.arange(12.).reshape(4, 3), a)))), [param(r, 3, 2)]),
    "apply_right": lambda r: ((lambda a: nx.tsum(nx.square(nx.apply_right(a, np.arange(12.).reshape(4, 3))))), [param(r, 2, 3)]),
    "dense_silu": lambda r: ((lambda x, w, b: nx.tsum(nx.square(nx.dense_silu(x, w, b)))),
                             [param(r, 3, 4), param(r, 4, 5), param(r, 5)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    fn, tensors = PRIMITIVE_CASES[name](np.random.default_rng(7))
    _check(lambda: fn(*tensors), tensors)


def test_ssm_cell_gradient(rng):
    k, n = 4, 3
    ts = [param(rng, n, k), param(rng, n, k), param(rng, k, k, scale=0.5),
          param(rng, k, 2 * k, scale=0.5), param(rng, k, k, scale=0.5),
          param(rng, k), param(rng, k)]
    w = Tensor(rng.normal(size=(n, 2 * k)))
    _check(lambda: nx.tsum(nx.ssm_cell(*ts) * w), ts)


def test_gru_cell_gradient(rng):
    k, n = 4, 3
    ts = [param(rng, n, k), param(rng, n, k), param(rng, k, 3 * k, scale=0.5),
          param(rng, k, 2 * k, scale=0.5), param(rng, k, k, scale=0.5), param(rng, 3 * k)]
    w = Tensor(rng.normal(size=(n, k)))
    _check(lambda: nx.tsum(nx.gru_cell(*ts) * w), ts)


def test_fused_ssm_cell_equals_composition(rng):
    k, n = 6, 4
    h, m = param(rng, n, k), param(rng, n, k)
    A, B, C, D = (param(rng, k, k, scale=0.4) for _ in range(4))
    g, b = param(rng, k), param(rng, k)
    w = Tensor(rng.normal(size=(n, 2 * k)))

    def composed():
        hn = nx.silu(nx.layer_norm(h @ A + m @ B, g, b))
        o = hn @ C + m @ D + m
        return nx.tsum(nx.concat([hn, o], axis=1) * w)

    def fused():
        return nx.tsum(nx.ssm_cell(h, m, A, nx.concat([B, D], axis=1), C, g, b) * w)

    ts = [h, m, A, B, C, D, g, b]
    assert abs(float(composed().data) - float(fused().data)) < 1e-12
    for a, f in zip(tape_grads(composed, ts), tape_grads(fused, ts)):
        assert np.max(np.abs(a - f)) < 1e-12


def test_fused_gru_cell_equals_composition(rng):
    k, n = 5, 3
    h, m = param(rng, n, k), param(rng, n, k)
    W, Uzr, Un, b = param(rng, k, 3 * k), param(rng, k, 2 * k), param(rng, k, k), param(rng, 3 * k)
    w = Tensor(rng.normal(size=(n, k)))

    def composed():
        gx = nx.linear(m, W, b)
        zr = nx.sigmoid(gx[:, :2 * k] + h @ Uzr)
        z, r = zr[:, :k], zr[:, k:]
        cand = nx.tanh(gx[:, 2 * k:] + (r * h) @ Un)
        return nx.tsum((z * h + (1.0 - z) * cand) * w)

    def fused():
        return nx.tsum(nx.gru_cell(h, m, W, Uzr, Un, b) * w)

    ts = [h, m, W, Uzr, Un, b]
    assert abs(float(composed().data) - float(fused().data)) < 1e-12
    for a, f in zip(tape_grads(composed, ts), tape_grads(fused, ts)):
        assert np.max(np.abs(a - f)) < 1e-12


# ---------------------------------------------------------------- properties

@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    w = param(rng, 3, 2)
    v = Tensor(rng.normal(size=(2, 4)))
    l1 = lambda: nx.tsum(nx.square(w @ v))
    l2 = lambda: nx.tsum(nx.tanh(w))
    (g1,) = tape_grads(l1, [w])
    (g2,) = tape_grads(l2, [w])
    (g,) = tape_grads(lambda: l1() * a + l2() * b, [w])
    assert np.allclose(g, a * g1 + b * g2, rtol=1e-12, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_matmul_gradient_random_shapes(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, m, k), param(rng, k, n)
    _check(lambda: nx.tsum(nx.square(a @ b)), [a, b])


def test_forward_and_gradients_are_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(3)
        w = param(rng, 4, 4)
        x = Tensor(rng.normal(size=(5, 4)))
        with nx.Tape() as tape:
            loss = nx.tsum(nx.silu(nx.layer_norm(x @ w, Tensor(np.ones(4)), Tensor(np.zeros(4)))))
        return float(loss.data), nx.backward(tape, loss, [w])[w]

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and np.array_equal(g1, g2)


def test_tape_records_in_topological_order():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with nx.Tape() as tape:
        a = w * 2.0
        b = nx.tanh(a)
        nx.tsum(b + a)
    position = {id(node): i for i, node in enumerate(tape.nodes)}
    for i, node in enumerate(tape.nodes):
        for p in node._parents:
            if id(p) in position:
                assert position[id(p)] < i
