"""Engine-level checks: finite-difference oracles, determinism, stop-grad."""

import numpy as np
import pytest

from dimcomm.autodiff import (
    EAGER,
    Graph,
    GraphError,
    NonFiniteError,
    evaluate_at,
    primitive_ops,
)


def finite_diff(f, x, h=1e-5):
    """Central finite differences of a scalar function over a flat array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g.ravel()[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return np.max(np.abs(a - b) / denom)


def check_grad(build, shapes, rng, tol=1e-4, h=1e-5):
    """build(graph, leaf_nodes) -> scalar node; leaves drawn at random."""
    values = {k: rng.standard_normal(s) for k, s in shapes.items()}
    g = Graph()
    leaves = {k: g.leaf(k, v) for k, v in values.items()}
    out = build(g, leaves)
    grads = g.backward(out)

    for k in shapes:
        def f(x, k=k):
            vals = dict(values)
            vals[k] = x
            gg = Graph()
            ll = {n: gg.leaf(n, v) for n, v in vals.items()}
            return float(build(gg, ll).value)

        fd = finite_diff(f, values[k].copy(), h=h)
        analytic = grads.get(k, np.zeros(shapes[k]))
        assert rel_err(np.asarray(analytic), fd) < tol, f"gradient mismatch for {k}"


OPS_UNDER_TEST = [
    ("add", {"a": (3, 4), "b": (3, 4)},
     lambda g, L: g.sum_all(g.mul(g.add(L["a"], L["b"]), L["a"]))),
    ("sub_neg", {"a": (3, 4), "b": (3, 4)},
     lambda g, L: g.sum_all(g.square(g.sub(L["a"], g.neg(L["b"]))))),
    ("scalar", {"a": (5,)},
     lambda g, L: g.sum_all(g.rsub(2.0, g.sadd(g.smul(L["a"], 3.0), -1.5)))),
    ("matmul", {"a": (3, 4), "b": (4, 2)},
     lambda g, L: g.sum_all(g.square(g.matmul(L["a"], L["b"])))),
    ("bmm", {"a": (2, 3, 4), "b": (2, 4, 2)},
     lambda g, L: g.sum_all(g.square(g.bmm(L["a"], L["b"])))),
    ("transpose", {"a": (3, 4)},
     lambda g, L: g.sum_all(g.square(g.matmul(g.transpose(L["a"]), L["a"])))),
    ("swap_last", {"a": (2, 3, 4)},
     lambda g, L: g.sum_all(g.square(g.bmm(L["a"], g.swap_last(L["a"]))))),
    ("reshape", {"a": (3, 4)},
     lambda g, L: g.sum_all(g.square(g.reshape(L["a"], (2, 6))))),
    ("concat_last", {"a": (3, 2), "b": (3, 5)},
     lambda g, L: g.sum_all(g.square(g.concat_last([L["a"], L["b"]])))),
    ("concat_rows", {"a": (2, 3), "b": (4, 3)},
     lambda g, L: g.sum_all(g.square(g.concat_rows([L["a"], L["b"]])))),
    ("slice_rows", {"a": (6, 3)},
     lambda g, L: g.sum_all(g.square(g.slice_rows(L["a"], 1, 4)))),
    ("slice_cols", {"a": (3, 8)},
     lambda g, L: g.sum_all(g.square(g.slice_cols(L["a"], 2, 7)))),
    ("take_rows", {"a": (6, 3)},
     lambda g, L: g.sum_all(g.square(g.take_rows(L["a"], np.array([0, 2, 2, 5]))))),
    ("repeat_rows", {"a": (3, 2)},
     lambda g, L: g.sum_all(g.square(g.repeat_rows(L["a"], 3)))),
    ("gather_last", {"a": (5, 4)},
     lambda g, L: g.sum_all(g.square(g.gather_last(L["a"], np.array([0, 3, 1, 2, 2]))))),
    ("relu", {"a": (4, 4)},
     lambda g, L: g.sum_all(g.relu(g.smul(L["a"], 2.0)))),
    ("elu", {"a": (4, 4)},
     lambda g, L: g.sum_all(g.square(g.elu(L["a"])))),
    ("sigmoid", {"a": (4, 4)},
     lambda g, L: g.sum_all(g.square(g.sigmoid(L["a"])))),
    ("tanh", {"a": (4, 4)},
     lambda g, L: g.sum_all(g.square(g.tanh(L["a"])))),
    ("absolute", {"a": (4, 4)},
     lambda g, L: g.sum_all(g.square(g.absolute(L["a"])))),
    ("sqrt_reciprocal", {"a": (4, 4)},
     lambda g, L: g.sum_all(g.reciprocal(g.sqrt(g.sadd(g.square(L["a"]), 1.0))))),
    ("softmax", {"a": (5, 7)},
     lambda g, L: g.sum_all(g.mul(g.softmax_last(L["a"]), L["a"]))),
    ("softmax3d", {"a": (2, 3, 4)},
     lambda g, L: g.sum_all(g.square(g.softmax_last(L["a"])))),
    ("sum_axis", {"a": (3, 4, 2)},
     lambda g, L: g.sum_all(g.square(g.sum_axis(L["a"], 1)))),
    ("sum_axis_keep", {"a": (3, 4)},
     lambda g, L: g.sum_all(g.square(g.sum_axis(L["a"], -1, keepdims=True)))),
    ("mean_all", {"a": (3, 4)},
     lambda g, L: g.square(g.mean_all(g.square(L["a"])))),
    ("expand_axis", {"a": (3, 2)},
     lambda g, L: g.sum_all(g.square(g.expand_axis(L["a"], 1, 4)))),
    ("bias_add", {"a": (5, 3), "b": (3,)},
     lambda g, L: g.sum_all(g.square(g.bias_add(L["a"], L["b"])))),
    ("rowscale", {"a": (5, 3), "s": (3,)},
     lambda g, L: g.sum_all(g.square(g.rowscale(L["a"], L["s"])))),
    ("affine", {"x": (5, 3), "w": (3, 4), "b": (4,)},
     lambda g, L: g.sum_all(g.square(g.affine(L["x"], L["w"], L["b"])))),
    ("gru_cell", {"x": (4, 3), "h": (4, 5), "wx": (3, 15), "wh": (5, 15),
                  "bx": (15,), "bh": (15,)},
     lambda g, L: g.sum_all(g.square(g.gru_cell(L["x"], L["h"], L["wx"],
                                                L["wh"], L["bx"], L["bh"])))),
    ("col_norm", {"a": (6, 3)},
     lambda g, L: g.sum_all(g.square(g.col_norm(g.sadd(g.square(L["a"]), 0.1))))),
    ("diag", {"a": (4, 4)},
     lambda g, L: g.sum_all(g.square(g.embed_diag(g.diag_part(L["a"]))))),
]


@pytest.mark.parametrize("name,shapes,build", OPS_UNDER_TEST,
                         ids=[t[0] for t in OPS_UNDER_TEST])
def test_primitive_gradients_match_finite_differences(name, shapes, build):
    rng = np.random.default_rng(hash(name) % (2**32))
    for trial in range(4):
        check_grad(build, shapes, rng)


def test_gradcheck_many_random_instances():
    # the spec-level property: 100 random op instances, rel. error < 1e-4
    rng = np.random.default_rng(7)
    count = 0
    while count < 100:
        name, shapes, build = OPS_UNDER_TEST[count % len(OPS_UNDER_TEST)]
        check_grad(build, shapes, rng)
        count += 1


def test_sigmoid_relu_softmax_values():
    g = Graph()
    assert float(g.sigmoid(g.constant(0.0)).value) == 0.5
    assert float(g.relu(g.constant(-3.2)).value) == 0.0
    sm = g.softmax_last(g.constant([1.0, 1.0, 1.0])).value
    np.testing.assert_allclose(sm, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_backward_square():
    g = Graph()
    x = g.leaf("x", np.array(3.0))
    y = g.square(x)
    grads = g.backward(y)
    assert grads["x"] == pytest.approx(6.0, abs=0)


def test_backward_linear_map_structure():
    rng = np.random.default_rng(0)
    v = rng.standard_normal(4)
    g = Graph()
    w = g.leaf("w", rng.standard_normal((3, 4)))
    y = g.sum_all(g.matmul(w, g.constant(v.reshape(4, 1))))
    grads = g.backward(y)
    np.testing.assert_array_equal(grads["w"], np.tile(v, (3, 1)))


def test_three_layer_mlp_gradcheck():
    rng = np.random.default_rng(42)
    shapes = {"w1": (6, 16), "b1": (16,), "w2": (16, 16), "b2": (16,),
              "w3": (16, 1), "b3": (1,)}
    x = rng.standard_normal((8, 6))

    def build(g, L):
        h1 = g.relu(g.affine(g.constant(x), L["w1"], L["b1"]))
        h2 = g.tanh(g.affine(h1, L["w2"], L["b2"]))
        out = g.affine(h2, L["w3"], L["b3"])
        return g.mean_all(g.square(out))

    check_grad(build, shapes, rng)


def test_non_scalar_backward_rejected():
    g = Graph()
    x = g.leaf("x", np.ones((2, 2)))
    with pytest.raises(GraphError):
        g.backward(g.square(x))


def test_nan_detection_names_offender():
    g = Graph()
    x = g.leaf("x", np.array([1.0, 0.0]))
    with pytest.raises(NonFiniteError) as ei:
        g.reciprocal(x)
    assert "reciprocal" in str(ei.value)


def test_stop_gradient_blocks_flow():
    rng = np.random.default_rng(3)
    g = Graph()
    x = g.leaf("x", rng.standard_normal((3, 3)))
    y = g.leaf("y", rng.standard_normal((3, 3)))
    out = g.sum_all(g.add(g.mul(g.stop_grad(g.square(x)), y), y))
    grads = g.backward(out)
    assert "x" not in grads
    assert grads["y"].shape == (3, 3)


def test_linearity_of_backward():
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((4, 4))
    a, b = 2.5, -1.25

    def parts(g, x):
        f = g.sum_all(g.square(x))
        h = g.sum_all(g.sigmoid(x))
        return f, h

    g1 = Graph()
    x = g1.leaf("x", x0)
    f, h = parts(g1, x)
    gf = g1.backward(f)["x"]
    gh = g1.backward(h)["x"]

    g2 = Graph()
    x2 = g2.leaf("x", x0)
    f2, h2 = parts(g2, x2)
    combo = g2.add(g2.smul(f2, a), g2.smul(h2, b))
    gc = g2.backward(combo)["x"]
    np.testing.assert_allclose(gc, a * gf + b * gh, rtol=1e-12, atol=1e-14)


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(11)
        g = Graph()
        x = g.leaf("x", rng.standard_normal((6, 6)))
        w = g.leaf("w", rng.standard_normal((6, 6)))
        out = g.mean_all(g.square(g.tanh(g.matmul(x, w))))
        grads = g.backward(out)
        return out.value.tobytes(), grads["x"].tobytes(), grads["w"].tobytes()

    assert run() == run()


def test_replay_reproduces_tape_bitwise():
    rng = np.random.default_rng(13)
    g = Graph()
    x = g.leaf("x", rng.standard_normal((4, 5)))
    w = g.leaf("w", rng.standard_normal((5, 3)))
    h = g.relu(g.matmul(x, w))
    out = g.mean_all(g.mul(h, h))
    g.backward(out)
    assert g.replay() == 0.0


def test_primitive_ops_inventory():
    ops = primitive_ops()
    for required in ["matmul", "add", "sub", "mul", "smul", "relu", "sigmoid",
                     "tanh", "softmax_last", "gru_cell", "sum_axis",
                     "mean_all", "square", "sqrt", "col_norm", "concat_last",
                     "gather_last", "stop_grad"]:
        assert required in ops


def test_unsupported_op_fails_loudly():
    g = Graph()
    with pytest.raises(AttributeError):
        g.convolve2d  # noqa: B018


def test_duplicate_leaf_rejected():
    g = Graph()
    g.leaf("x", np.ones(2))
    with pytest.raises(GraphError):
        g.leaf("x", np.ones(2))


def test_shape_mismatch_rejected():
    g = Graph()
    a = g.leaf("a", np.ones((2, 3)))
    b = g.leaf("b", np.ones((3, 2)))
    with pytest.raises(GraphError):
        g.add(a, b)
    with pytest.raises(GraphError):
        g.matmul(a, a)


class TestEvaluateAt:
    def test_zero_step_is_identity(self):
        rng = np.random.default_rng(17)
        params = {"w": rng.standard_normal((3, 3))}

        def build(g, L):
            return g.sum_all(g.square(L["w"]))

        base = float(np.sum(params["w"] ** 2))
        v, _, _ = evaluate_at(build, params, {"w": rng.standard_normal((3, 3))}, 0.0)
        assert v == base

    def test_quadratic_closed_form(self):
        # f(t) = t^2 at t=2, displacement = grad f = 4, step 0.25 -> f(1) = 1
        params = {"t": np.array(2.0)}

        def build(g, L):
            return g.square(L["t"])

        v, _, _ = evaluate_at(build, params, {"t": np.array(4.0)}, 0.25)
        assert v == 1.0

    def test_shape_mismatch_rejected(self):
        params = {"t": np.zeros(3)}
        with pytest.raises(GraphError):
            evaluate_at(lambda g, L: g.sum_all(L["t"]), params,
                        {"t": np.zeros(4)}, 0.1)

    def test_unknown_displacement_rejected(self):
        with pytest.raises(GraphError):
            evaluate_at(lambda g, L: g.sum_all(L["t"]), {"t": np.zeros(3)},
                        {"u": np.zeros(3)}, 0.1)

    def test_second_order_through_displacement(self):
        # inner loss f(t, a) = a * t^2; g = df/dt = 2 a t (kept differentiable)
        # outer loss F(a) = f(t - s * g, a); compare dF/da to finite differences
        t0, a0, s = 1.3, 0.7, 0.05

        def outer(a):
            g = Graph()
            t = g.leaf("t", np.array(t0))
            an = g.leaf("a", np.array(a))
            inner = g.mul(an, g.square(t))
            gt = g.backward(inner, create_graph=True)["t"]
            _, _, loss = evaluate_at(
                lambda gg, L: gg.mul(gg.params["a"], gg.square(L["t"])),
                {"t": np.array(t0)}, {"t": gt}, s,
                differentiable_displacement=True, graph=g)
            return g, loss

        g, loss = outer(a0)
        da = g.backward(loss)["a"]

        h = 1e-6
        fp = float(outer(a0 + h)[1].value)
        fm = float(outer(a0 - h)[1].value)
        fd = (fp - fm) / (2 * h)
        assert abs(float(da) - fd) / max(abs(fd), 1.0) < 1e-3


def test_create_graph_backward_matches_plain_backward():
    rng = np.random.default_rng(23)
    x0 = rng.standard_normal((4, 6))
    w0 = rng.standard_normal((5, 6))
    h0 = rng.standard_normal((4, 5))
    shapes = {"wx": (6, 15), "wh": (5, 15), "bx": (15,), "bh": (15,)}
    vals = {k: rng.standard_normal(s) for k, s in shapes.items()}

    def build(g):
        L = {k: g.leaf(k, v) for k, v in vals.items()}
        x = g.constant(x0)
        h = g.constant(h0)
        hn = g.gru_cell(x, h, L["wx"], L["wh"], L["bx"], L["bh"])
        z = g.softmax_last(g.matmul(hn, g.constant(w0)))
        return g, g.sum_all(g.square(z))

    g1, out1 = build(Graph())
    plain = g1.backward(out1)
    g2, out2 = build(Graph())
    graphed = g2.backward(out2, create_graph=True)
    for k in shapes:
        np.testing.assert_array_equal(plain[k], graphed[k].value)


def test_evaluate_at_reuses_existing_leaves():
    g = Graph()
    t = g.leaf("t", np.array(2.0))
    y = g.square(t)
    gt = g.backward(y, create_graph=True)["t"]
    v, g2, _ = evaluate_at(lambda gg, L: gg.square(L["t"]),
                           {"t": np.array(2.0)}, {"t": gt}, 0.25,
                           differentiable_displacement=True, graph=g)
    assert g2 is g
    assert v == 1.0
