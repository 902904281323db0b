import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memkd import numcore as nc
from memkd.errors import ContractError, DimensionError, NumericError


def grad_of(fn, params):
    return nc.value_and_grad(fn, params)[1]


# --- matmul ---------------------------------------------------------------

def test_matmul_identity_and_zeros():
    M = np.random.default_rng(0).uniform(-1, 1, (3, 4))
    assert np.array_equal(nc.matmul(np.eye(3), M).data, M)
    assert np.array_equal(nc.matmul(M, np.eye(4)).data, M)
    assert np.array_equal(nc.matmul(M, np.zeros((4, 2))).data, np.zeros((3, 2)))


def test_matmul_hand_value():
    out = nc.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        nc.matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_single_row_product_matches_batched_rows():
    rng = np.random.default_rng(1)
    A, B = rng.uniform(-1, 1, (7, 100)), rng.uniform(-1, 1, (100, 40))
    full = nc.matmul(A, B).data
    for i in range(7):
        assert np.array_equal(nc.matmul(A[i:i + 1], B).data[0], full[i])


# --- elementwise ----------------------------------------------------------

def test_elementwise_values():
    assert nc.sigmoid(0.0).item() == 0.5
    assert nc.tanh(0.0).item() == 0.0
    assert nc.elementwise("hadamard", [2.0, 3.0], [4.0, 5.0]).data.tolist() == [8.0, 15.0]
    assert nc.elementwise("scale", [1.0, -2.0], 3.0).data.tolist() == [3.0, -6.0]


def test_no_broadcasting():
    with pytest.raises(DimensionError):
        nc.add(np.ones((2, 3)), np.ones(3))
    with pytest.raises(ContractError):
        nc.elementwise("relu", [1.0])


def test_activation_ranges():
    x = np.linspace(-15, 15, 301)  # beyond ~18.7, tanh rounds to 1.0 in float64
    s, t = nc.sigmoid(x).data, nc.tanh(x).data
    assert np.all((s > 0) & (s < 1))
    assert np.all((t > -1) & (t < 1))


def test_tensor_is_read_only():
    t = nc.Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0


# --- softmax --------------------------------------------------------------

def test_softmax_values():
    assert np.allclose(nc.softmax_rows(np.zeros((1, 4))).data, 0.25, rtol=0, atol=1e-15)
    out = nc.softmax_rows([[np.log(1.0), np.log(3.0)]]).data
    assert np.allclose(out, [[0.25, 0.75]], rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(seed, shift):
    logits = np.random.default_rng(seed).uniform(-20, 20, (5, 4))
    p = nc.softmax_rows(logits).data
    assert np.all(p >= 0)
    assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-12
    assert np.allclose(nc.softmax_rows(logits + shift).data, p, rtol=0, atol=1e-13)


# --- reductions -----------------------------------------------------------

def test_reductions():
    assert nc.reduce("l2_norm", [3.0, 4.0]).item() == 5.0
    assert nc.reduce("mean", np.zeros(7)).item() == 0.0
    assert nc.reduce("sum", [1.0, 2.0, 3.0]).item() == 6.0
    assert nc.reduce("sum", np.ones((2, 3)), axis=1).data.tolist() == [3.0, 3.0]


# --- backward -------------------------------------------------------------

def test_backward_of_sum_is_ones():
    g = grad_of(lambda p: nc.reduce("sum", p["w"]), {"w": np.zeros((2, 3))})
    assert np.array_equal(g["w"], np.ones((2, 3)))


def test_backward_squared_norm():
    g = grad_of(lambda p: nc.square(nc.reduce("l2_norm", p["w"])), {"w": np.array([3.0, 4.0])})
    assert np.allclose(g["w"], [6.0, 8.0], rtol=0, atol=1e-12)


def test_gradients_accumulate_and_untouched_are_zero():
    params = {"a": np.array([1.0, 2.0]), "unused": np.ones(3)}
    g = grad_of(lambda p: nc.reduce("sum", nc.add(p["a"], nc.hadamard(p["a"], p["a"]))), params)
    assert np.allclose(g["a"], 1 + 2 * params["a"])
    assert np.array_equal(g["unused"], np.zeros(3))


def test_repeated_take_indices_accumulate():
    g = grad_of(lambda p: nc.reduce("sum", nc.take(p["h"], np.array([0, 0, 2]), axis=0)), {"h": np.zeros((3, 2))})
    assert g["h"].tolist() == [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]


def test_backward_rejects_non_scalar_root():
    tape = nc.Tape()
    leaves = tape.watch({"w": np.ones(2)})
    with pytest.raises(ContractError):
        nc.backward(tape, nc.scale(leaves["w"], 2.0), leaves)


def test_backward_visits_each_node_once():
    tape = nc.Tape()
    leaves = tape.watch({"w": np.ones((2, 2))})
    h = leaves["w"]
    for _ in range(5):
        h = nc.tanh(nc.matmul(h, leaves["w"]))
    root = nc.reduce("sum", h)
    nc.backward(tape, root, leaves)
    assert tape.visits == len(tape)
    # topological order: every parent precedes its consumer
    assert all(p is None or p < i for i, ps in enumerate(tape.parents) for p in ps)


# --- finite differences ---------------------------------------------------

def test_finite_difference_examples():
    g = nc.finite_difference_gradient(lambda p: float(np.sum(p["t"] ** 2)), {"t": np.array([1.0, -2.0])})
    assert np.allclose(g["t"], [2.0, -4.0], atol=1e-8)
    g = nc.finite_difference_gradient(lambda p: 3.0, {"t": np.ones(4)})
    assert np.array_equal(g["t"], np.zeros(4))


def test_finite_difference_non_finite_raises():
    with pytest.raises(NumericError):
        nc.finite_difference_gradient(lambda p: float("nan"), {"t": np.ones(1)})


def _composite(p):
    a, b, v = p["a"], p["b"], p["v"]
    h = nc.tanh(nc.matmul(a, b))
    s = nc.softmax_rows(nc.add(h, nc.tile_rows(v, 3)))
    n = nc.reduce("l2_norm", nc.sub(nc.sigmoid(h), s), axis=1)
    ratio = nc.div(n, nc.add_scalar(nc.reduce("l2_norm", h, axis=1), 1e-8))
    hub = nc.reduce("mean", nc.smooth_l1(nc.scale(ratio, 3.0), 1.0))
    cat = nc.transpose(nc.concat([nc.slice_axis(h, 0, 1, axis=0), nc.reshape(v, (1, 2))], axis=0))
    return nc.add(hub, nc.reduce("sum", nc.square(nc.stack([cat, cat], axis=0))))


@pytest.mark.parametrize("seed", range(100))
def test_composite_expression_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = {"a": rng.uniform(-1, 1, (3, 4)), "b": rng.uniform(-1, 1, (4, 2)), "v": rng.uniform(-1, 1, 2)}
    analytic = grad_of(_composite, params)
    numeric = nc.finite_difference_gradient(lambda p: _composite(p).item(), params, 1e-5)
    assert nc.max_relative_error(analytic, numeric, floor=1e-5) <= 1e-4
