from __future__ import annotations

import numpy as np
import pytest

from pers import tensorkit as tk


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def test_matmul_identity():
    x = tk.tensor([[3.0], [4.0]])
    eye = tk.tensor(np.eye(2))
    out = tk.matmul(eye, x)
    assert out.data.tolist() == [[3.0], [4.0]]


def test_tanh_of_zero_is_zero():
    z = tk.tensor(np.zeros(5))
    assert np.all(tk.tanh(z).data == 0.0)


def test_concat_vectors():
    out = tk.concat([tk.tensor([1.0, 2.0]), tk.tensor([3.0])])
    assert out.data.tolist() == [1.0, 2.0, 3.0]


def test_concat_matrices_columnwise():
    a = tk.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = tk.tensor([[5.0], [6.0]])
    out = tk.concat([a, b])
    assert out.data.tolist() == [[1.0, 2.0, 5.0], [3.0, 4.0, 6.0]]


def test_matmul_shape_error_names_operand():
    w = tk.parameter(np.zeros((2, 3)), "W_1")
    x = tk.tensor(np.zeros((4, 5)))
    with pytest.raises(tk.ShapeError, match="W_1"):
        tk.matmul(w, x)


@pytest.mark.parametrize("op", [tk.add, tk.sub, tk.hadamard])
def test_elementwise_ops_reject_mismatched_shapes(op):
    with pytest.raises(tk.ShapeError):
        op(tk.tensor(np.zeros(3)), tk.tensor(np.zeros(4)))


def test_ops_preserve_documented_dims():
    g = rng(1)
    a = tk.tensor(g.normal(size=(3, 4)))
    b = tk.tensor(g.normal(size=(4, 5)))
    assert tk.matmul(a, b).dims == [3, 5]
    assert tk.sub(a, a).dims == [3, 4]
    assert tk.hadamard(a, a).dims == [3, 4]
    assert tk.tanh(a).dims == [3, 4]
    assert tk.scale_rows(a, tk.tensor(g.normal(size=3))).dims == [3, 4]
    assert tk.add_bias(a, tk.tensor(g.normal(size=4))).dims == [3, 4]


def test_forward_is_deterministic_bitwise():
    g = rng(2)
    a_data = g.normal(size=(6, 6))
    b_data = g.normal(size=(6, 6))
    outs = []
    for _ in range(2):
        a, b = tk.tensor(a_data), tk.tensor(b_data)
        outs.append(tk.tanh(tk.matmul(a, b)).data)
    assert outs[0].tobytes() == outs[1].tobytes()


def test_backward_linear_map_gradient():
    # root = sum(W @ x), x fixed: dW[i, j] = x[j]
    w = tk.parameter(rng(3).normal(size=(3, 4)), "W")
    x = tk.tensor(rng(4).normal(size=(4, 1)))
    grads = tk.backward(tk.sum_all(tk.matmul(w, x)), {"W": w})
    expected = np.tile(x.data[:, 0], (3, 1))
    np.testing.assert_array_equal(grads["W"], expected)


def test_backward_tanh_at_zero_gives_ones():
    z = tk.parameter(np.zeros(7), "z")
    grads = tk.backward(tk.sum_all(tk.tanh(z)), {"z": z})
    np.testing.assert_array_equal(grads["z"], np.ones(7))


def test_backward_requires_scalar_root():
    a = tk.parameter(np.ones((2, 2)), "a")
    with pytest.raises(tk.NonScalarRootError):
        tk.backward(tk.tanh(a), {"a": a})


def test_backward_zero_gradient_for_unused_parameter():
    used = tk.parameter(np.ones(3), "used")
    unused = tk.parameter(np.ones((2, 2)), "unused")
    grads = tk.backward(tk.sum_all(used), {"used": used, "unused": unused})
    assert grads["unused"].shape == (2, 2)
    assert np.all(grads["unused"] == 0.0)


def _random_five_param_graph(params):
    # Mixes every core op so the finite-difference oracle covers them all.
    h1 = tk.tanh(tk.add_bias(tk.matmul(params["x"], params["w1"]), params["b1"]))
    h2 = tk.hadamard(h1, tk.sigmoid(tk.matmul(params["x"], params["w2"])))
    h3 = tk.concat([h2, tk.sub(h1, h2)])
    h4 = tk.scale_rows(h3, params["s"])
    return tk.sum_all(tk.tanh(h4))


def test_gradients_match_finite_differences():
    g = rng(5)
    params = {
        "x": tk.parameter(g.uniform(-1, 1, size=(3, 4)), "x"),
        "w1": tk.parameter(g.uniform(-1, 1, size=(4, 5)), "w1"),
        "w2": tk.parameter(g.uniform(-1, 1, size=(4, 5)), "w2"),
        "b1": tk.parameter(g.uniform(-1, 1, size=5), "b1"),
        "s": tk.parameter(g.uniform(-1, 1, size=3), "s"),
    }
    for name in params:
        err = tk.finite_diff_check(_random_five_param_graph, params, name, h=1e-5)
        assert err < 1e-4, f"{name}: {err}"


def test_finite_diff_exact_for_linear_graph():
    g = rng(6)
    params = {"w": tk.parameter(g.uniform(-1, 1, size=(3, 2)), "w")}
    x = tk.tensor(g.uniform(-1, 1, size=(2, 1)))
    err = tk.finite_diff_check(lambda p: tk.sum_all(tk.matmul(p["w"], x)), params, "w", h=1e-4)
    assert err < 1e-10


def test_finite_diff_rejects_bad_h():
    params = {"w": tk.parameter(np.ones((1, 1)), "w")}
    fn = lambda p: tk.sum_all(p["w"])
    with pytest.raises(ValueError):
        tk.finite_diff_check(fn, params, "w", h=0.0)
    with pytest.raises(ValueError):
        tk.finite_diff_check(fn, params, "w", h=1e-2)


def test_gather_rows_and_scatter_gradient():
    table = tk.parameter(np.arange(12.0).reshape(4, 3), "E")
    out = tk.gather_rows(table, np.array([1, 1, 3]))
    np.testing.assert_array_equal(out.data, [[3, 4, 5], [3, 4, 5], [9, 10, 11]])
    grads = tk.backward(tk.sum_all(out), {"E": table})
    np.testing.assert_array_equal(grads["E"], [[0, 0, 0], [2, 2, 2], [0, 0, 0], [1, 1, 1]])


def test_gather_rows_index_out_of_range():
    table = tk.parameter(np.zeros((4, 3)), "E")
    with pytest.raises(tk.ShapeError, match="out of range"):
        tk.gather_rows(table, np.array([4]))


def test_cross_entropy_uniform_logits_is_log_k():
    # 5 allowed classes with equal logits: loss = ln 5 per the softmax definition.
    logits = tk.tensor(np.zeros((2, 7)))
    mask = np.array([False, False, True, True, True, True, True])
    loss = tk.cross_entropy(logits, np.array([2, 4]), np.ones(2), mask)
    assert loss.data == pytest.approx(np.log(5.0), abs=1e-12)


def test_cross_entropy_matches_naive_oracle():
    g = rng(7)
    logits_data = g.normal(size=(6, 9))
    targets = g.integers(2, 9, size=6)
    step_mask = np.array([1, 1, 0, 1, 0, 1], dtype=float)
    class_mask = np.ones(9, dtype=bool)
    class_mask[:2] = False

    logits = tk.parameter(logits_data, "logits")
    loss = tk.cross_entropy(logits, targets, step_mask, class_mask)

    # Definitional oracle: explicit softmax over allowed classes.
    total = 0.0
    for i in range(6):
        if step_mask[i] == 0:
            continue
        z = logits_data[i, class_mask]
        p = np.exp(logits_data[i, targets[i]]) / np.exp(z).sum()
        total += -np.log(p)
    assert float(loss.data) == pytest.approx(total / step_mask.sum(), abs=1e-12)

    err = tk.finite_diff_check(
        lambda p: tk.cross_entropy(p["logits"], targets, step_mask, class_mask),
        {"logits": logits},
        "logits",
    )
    assert err < 1e-4


def test_cross_entropy_rejects_masked_target():
    logits = tk.tensor(np.zeros((1, 4)))
    mask = np.array([False, False, True, True])
    with pytest.raises(ValueError):
        tk.cross_entropy(logits, np.array([0]), np.ones(1), mask)


def test_bce_with_negatives_matches_naive_oracle():
    g = rng(8)
    logits_data = g.normal(size=(4, 10))
    targets = np.array([2, 3, 4, 5])
    negatives = np.array([[6, 7], [8, 9], [2, 3], [6, 9]])
    step_mask = np.array([1, 1, 1, 0], dtype=float)

    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    total = 0.0
    for i in range(4):
        if step_mask[i] == 0:
            continue
        row = -np.log(sig(logits_data[i, targets[i]]))
        for j in negatives[i]:
            row += -np.log(1.0 - sig(logits_data[i, j]))
        total += row
    logits = tk.parameter(logits_data, "logits")
    loss = tk.bce_with_negatives(logits, targets, negatives, step_mask)
    assert float(loss.data) == pytest.approx(total / 3.0, abs=1e-9)

    err = tk.finite_diff_check(
        lambda p: tk.bce_with_negatives(p["logits"], targets, negatives, step_mask),
        {"logits": logits},
        "logits",
    )
    assert err < 1e-4


def test_adam_zero_gradient_leaves_params_unchanged():
    p = {"w": tk.parameter(np.array([1.0, -2.0]), "w")}
    state = tk.AdamState()
    out = tk.adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(out["w"].data, p["w"].data)


def test_adam_first_step_matches_hand_formula():
    # t=1, g=1: mhat=1, vhat=1, so the step is lr/(1+eps).
    p = {"w": tk.parameter(np.array([0.5]), "w")}
    state = tk.AdamState()
    out = tk.adam_step(p, {"w": np.ones(1)}, state, lr=0.01, eps=1e-8)
    expected = 0.5 - 0.01 / (1.0 + 1e-8)
    assert out["w"].data[0] == pytest.approx(expected, abs=1e-15)


def test_adam_descends_convex_quadratic():
    params = {"w": tk.parameter(np.array([3.0, -2.0]), "w")}
    state = tk.AdamState()

    def loss_of(p):
        return float((p["w"].data ** 2).sum())

    losses = [loss_of(params)]
    for _ in range(2):
        grads = {"w": 2.0 * params["w"].data}
        params = tk.adam_step(params, grads, state, lr=0.05)
        losses.append(loss_of(params))
    assert losses[1] < losses[0] and losses[2] < losses[1]


def test_adam_shape_mismatch():
    p = {"w": tk.parameter(np.zeros(3), "w")}
    with pytest.raises(tk.ShapeError):
        tk.adam_step(p, {"w": np.zeros(4)}, tk.AdamState(), lr=0.1)


def test_gradient_accumulates_over_shared_subexpression():
    x = tk.parameter(np.array([2.0]), "x")
    y = tk.add(x, x)  # dy/dx = 2
    grads = tk.backward(tk.sum_all(y), {"x": x})
    np.testing.assert_array_equal(grads["x"], [2.0])


def test_smul_scales_value_and_gradient():
    x = tk.parameter(np.array([1.0, -2.0]), "x")
    y = tk.smul(3.0, x)
    np.testing.assert_array_equal(y.data, [3.0, -6.0])
    grads = tk.backward(tk.sum_all(y), {"x": x})
    np.testing.assert_array_equal(grads["x"], [3.0, 3.0])
