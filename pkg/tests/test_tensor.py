import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import vmformer.tensor as tn
from oracles import avg_pool_loop, conv3d_loop, depthwise_loop, matmul_loop, max_rel, num_grad, pointwise_oracle
from vmformer.tensor import Tensor


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def fd_check(fn, arrays_in, seed=0, tol=1e-6, floor=1e-4):
    """Autodiff vs central differences of sum(fn(*inputs) * R)."""
    rng = np.random.default_rng(seed)
    tensors = [T(a, grad=True) for a in arrays_in]
    out = fn(*tensors)
    r = rng.normal(size=out.shape)
    grads = tn.backward((out * T(r)).sum(), {i: t for i, t in enumerate(tensors)})
    for i, t in enumerate(tensors):
        num = num_grad(lambda: float(np.sum(fn(*tensors).data * r)), t.data)
        assert max_rel(grads[i], num, floor) <= tol, f"input {i}"


# -- matmul ------------------------------------------------------------------
def test_matmul_identity_examples():
    b = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(tn.matmul(T(np.eye(3)), T(b)).data, b)
    out = tn.matmul(T([[1, 2], [3, 4]]), T([[1, 0], [0, 1]])).data
    assert np.array_equal(out, [[1, 2], [3, 4]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 4))
    assert max_rel(tn.matmul(T(a), T(b)).data, matmul_loop(a, b)) <= 1e-12


def test_matmul_batched_matches_loop():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(5, 2))
    out = tn.matmul(T(a), T(b)).data
    for i in range(2):
        for j in range(3):
            assert max_rel(out[i, j], matmul_loop(a[i, j], b)) <= 1e-12


def test_matmul_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="extents"):
        tn.matmul(T(np.ones((2, 3))), T(np.ones((4, 2))))


# -- softmax -----------------------------------------------------------------
def test_softmax_examples():
    assert np.allclose(tn.softmax(T([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    assert tn.softmax(T([5.0])).data.tolist() == [1.0]


def test_softmax_shift_invariance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6))
    a = tn.softmax(T(x), axis=-1).data
    b = tn.softmax(T(x + 123.456), axis=-1).data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_softmax_large_inputs_stay_finite():
    out = tn.softmax(T([1000.0, 0.0, -1000.0])).data
    assert np.all(np.isfinite(out)) and out[0] == 1.0


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=st.floats(-50, 50)))
def test_softmax_rows_are_convex_weights(x):
    p = tn.softmax(T(x), axis=-1).data
    assert p.min() >= 0
    assert np.max(np.abs(p.sum(axis=-1) - 1.0)) <= 1e-12


# -- depthwise convolution ----------------------------------------------------
def test_depthwise_delta_kernel_is_identity():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4, 5, 5))
    w = np.zeros((3, 3, 3, 3))
    w[:, 1, 1, 1] = 1.0
    assert np.array_equal(tn.conv3d_depthwise(T(x), T(w), (1, 1, 1), (1, 1, 1)).data, x)


def test_depthwise_ones_kernel_counts_interior():
    x = np.ones((1, 1, 3, 3, 3))
    out = tn.conv3d_depthwise(T(x), T(np.ones((1, 3, 3, 3))), (1, 1, 1), (1, 1, 1)).data
    assert out[0, 0, 1, 1, 1] == 27.0


@pytest.mark.parametrize(
    "shape,k,stride,pad",
    [
        ((1, 2, 3, 4, 4), (3, 3, 3), (1, 1, 1), (1, 1, 1)),
        ((2, 3, 4, 5, 6), (3, 3, 3), (1, 2, 2), (1, 1, 1)),
        ((1, 2, 5, 5, 5), (1, 3, 3), (1, 2, 2), (0, 1, 1)),
        ((2, 1, 6, 3, 3), (3, 1, 1), (2, 1, 1), (1, 0, 0)),
        ((1, 2, 4, 7, 5), (3, 3, 3), (2, 2, 1), (1, 0, 1)),
    ],
)
def test_depthwise_matches_nested_loop(shape, k, stride, pad):
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=shape), rng.normal(size=(shape[1],) + k)
    assert max_rel(tn.conv3d_depthwise(T(x), T(w), stride, pad).data, depthwise_loop(x, w, stride, pad)) <= 1e-12


def test_depthwise_nonpositive_extent_rejected():
    with pytest.raises(ValueError, match="extent"):
        tn.conv3d_depthwise(T(np.ones((1, 1, 1, 2, 2))), T(np.ones((1, 3, 3, 3))), (1, 1, 1), (0, 0, 0))


def test_depthwise_channel_independence():
    rng = np.random.default_rng(6)
    x, w = rng.normal(size=(1, 4, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3))
    base = tn.conv3d_depthwise(T(x), T(w), (1, 2, 2), (1, 1, 1)).data
    x2 = x.copy()
    x2[:, 2] = 0.0
    out = tn.conv3d_depthwise(T(x2), T(w), (1, 2, 2), (1, 1, 1)).data
    changed = [c for c in range(4) if not np.array_equal(out[:, c], base[:, c])]
    assert changed == [2]


def test_dense_conv_matches_loop():
    rng = np.random.default_rng(7)
    x, w = rng.normal(size=(2, 3, 4, 6, 6)), rng.normal(size=(4, 3, 1, 3, 3))
    assert max_rel(tn.conv3d(T(x), T(w), (1, 2, 2), (0, 1, 1)).data, conv3d_loop(x, w, (1, 2, 2), (0, 1, 1))) <= 1e-12
    w2 = rng.normal(size=(2, 3, 3, 1, 1))
    ref = conv3d_loop(x, w2, (4, 1, 1), (1, 0, 0))
    assert max_rel(tn.conv3d(T(x), T(w2), (4, 1, 1), (1, 0, 0)).data, ref) <= 1e-12


def test_conv_extent_formula():
    assert tn.conv_extent(64, 3, 4, 1) == 16
    assert tn.conv_extent(64, 3, 8, 1) == 8
    assert tn.conv_extent(224, 3, 2, 1) == 112


# -- pointwise convolution ------------------------------------------------------
def test_pointwise_examples():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 3, 2, 4, 4))
    assert np.array_equal(tn.conv3d_pointwise(T(x), T(np.eye(3))).data, x)
    two = rng.normal(size=(1, 2, 2, 3, 3))
    out = tn.conv3d_pointwise(T(two), T([[1.0, 1.0]])).data
    assert np.array_equal(out[:, 0], two[:, 0] + two[:, 1])


@pytest.mark.parametrize("shape,co", [((2, 3, 2, 4, 4), 5), ((1, 8, 1, 3, 3), 2), ((3, 2, 4, 2, 5), 7)])
def test_pointwise_matches_reshape_matmul_exactly(shape, co):
    rng = np.random.default_rng(9)
    x, w = rng.normal(size=shape), rng.normal(size=(co, shape[1]))
    assert np.array_equal(tn.conv3d_pointwise(T(x), T(w)).data, pointwise_oracle(x, w))


def test_pointwise_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        tn.conv3d_pointwise(T(np.ones((1, 3, 1, 2, 2))), T(np.ones((2, 4))))


# -- pooling ------------------------------------------------------------------
def test_avg_pool_examples():
    assert np.all(tn.avg_pool_per_frame(T(np.full((2, 3, 4, 5, 5), 0.75))).data == 0.75)
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 3, 4, 1, 1))
    assert np.array_equal(tn.avg_pool_per_frame(T(x)).data, x[:, :, :, 0, 0].transpose(0, 2, 1))


def test_avg_pool_matches_loop():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 3, 4, 5, 6))
    assert max_rel(tn.avg_pool_per_frame(T(x)).data, avg_pool_loop(x)) <= 1e-12


# -- backward -----------------------------------------------------------------
def test_backward_sum_gives_ones():
    x = T(np.random.default_rng(0).normal(size=(3, 4)), grad=True)
    g = tn.backward(x.sum(), {"x": x})
    assert np.array_equal(g["x"], np.ones((3, 4)))


def test_backward_matmul_known_formula():
    rng = np.random.default_rng(12)
    a, b = T(rng.normal(size=(3, 4)), grad=True), T(rng.normal(size=(4, 2)), grad=True)
    g = tn.backward((a @ b).sum(), {"a": a, "b": b})
    assert np.allclose(g["a"], np.ones((3, 2)) @ b.data.T, rtol=0, atol=1e-14)
    assert np.allclose(g["b"], a.data.T @ np.ones((3, 2)), rtol=0, atol=1e-14)


def test_backward_rejects_non_scalar():
    x = T(np.ones(3), grad=True)
    with pytest.raises(ValueError, match="scalar"):
        tn.backward(x * 2.0)


def test_unreachable_parameter_gets_zero_gradient():
    x, y = T(np.ones((2, 2)), grad=True), T(np.ones(5), grad=True)
    g = tn.backward((x * 3.0).sum(), {"x": x, "y": y})
    assert np.array_equal(g["y"], np.zeros(5))
    assert g["y"].shape == y.shape


def test_topological_order_parents_first():
    a = T(np.ones(2), grad=True)
    b = a * 2.0
    c = b + a
    d = (c * b).sum()
    order = tn.topological_order(d)
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]


def test_no_grad_builds_no_graph():
    a = T(np.ones(2), grad=True)
    with tn.no_grad():
        b = a * 2.0
    assert b._parents == () or not b.requires_grad


# -- finite differences, every op, three shapes each ------------------------------
SHAPES = [(3,), (2, 4), (2, 3, 2)]


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.2, 1.5, size=shape)


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize(
    "name,fn,gen",
    [
        ("add", lambda a, b: a + b, None),
        ("mul", lambda a, b: a * b, None),
        ("sub", lambda a, b: a - b, None),
        ("div", lambda a, b: a / b, "pos"),
        ("neg", lambda a: -a, None),
        ("power", lambda a: a**3, None),
        ("exp", lambda a: a.exp(), None),
        ("log", lambda a: a.log(), "pos"),
        ("relu", lambda a: a.relu(), "nz"),
        ("sigmoid", lambda a: a.sigmoid(), None),
        ("gelu", lambda a: a.gelu(), None),
        ("sum", lambda a: a.sum(axis=-1), None),
        ("mean", lambda a: a.mean(axis=0, keepdims=True), None),
        ("reshape", lambda a: a.reshape(-1), None),
        ("transpose", lambda a: a.transpose(*reversed(range(a.ndim))), None),
        ("softmax", lambda a: a.softmax(-1), None),
        ("log_softmax", lambda a: a.log_softmax(-1), None),
        ("layer_norm", lambda a: tn.layer_norm(a), None),
        ("getitem", lambda a: a[..., ::2], None),
        ("fancy_getitem", lambda a: a[np.array([0, 0, -1])], None),
        ("concat", lambda a, b: tn.concat([a, b, a], axis=-1), None),
    ],
)
def test_op_gradients_match_finite_differences(shape, name, fn, gen):
    rng = np.random.default_rng(hash(name) % 1000)
    nargs = fn.__code__.co_argcount
    make = {"pos": _pos, "nz": _away_from_zero, None: lambda r, s: r.normal(size=s)}[gen]
    fd_check(fn, [make(rng, shape) for _ in range(nargs)])


@pytest.mark.parametrize("shapes", [((3,), (2, 3)), ((2, 1, 4), (3, 4)), ((1,), (4, 2))])
def test_broadcast_gradients(shapes):
    rng = np.random.default_rng(13)
    fd_check(lambda a, b: a * b + a, [rng.normal(size=s) for s in shapes])


@pytest.mark.parametrize("shapes", [((4, 5), (5, 3)), ((2, 3, 4), (2, 4, 2)), ((2, 2, 3, 4), (4, 5))])
def test_matmul_gradients(shapes):
    rng = np.random.default_rng(14)
    fd_check(tn.matmul, [rng.normal(size=s) for s in shapes])


@pytest.mark.parametrize("shape", [(2, 5), (3, 2, 4), (1, 6)])
def test_affine_layer_norm_gradients(shape):
    rng = np.random.default_rng(15)
    d = shape[-1]
    fd_check(tn.layer_norm, [rng.normal(size=shape), rng.normal(size=d), rng.normal(size=d)])


@pytest.mark.parametrize("shape,groups", [((2, 4, 3, 2, 2), 2), ((1, 6, 2, 3, 1), 3), ((2, 3, 1, 2, 2), 1)])
def test_group_norm_gradients(shape, groups):
    rng = np.random.default_rng(16)
    c = shape[1]
    fd_check(
        lambda x, w, b: tn.group_norm(x, groups, w, b),
        [rng.normal(size=shape), rng.normal(size=c), rng.normal(size=c)],
    )


@pytest.mark.parametrize(
    "shape,k,stride,pad",
    [
        ((1, 2, 3, 4, 4), (3, 3, 3), (1, 1, 1), (1, 1, 1)),
        ((2, 2, 4, 5, 5), (3, 3, 3), (2, 2, 2), (1, 1, 1)),
        ((1, 3, 2, 5, 4), (1, 3, 3), (1, 2, 1), (0, 1, 1)),
    ],
)
def test_depthwise_gradients(shape, k, stride, pad):
    rng = np.random.default_rng(17)
    fd_check(
        lambda x, w: tn.conv3d_depthwise(x, w, stride, pad), [rng.normal(size=shape), rng.normal(size=(shape[1],) + k)]
    )


@pytest.mark.parametrize(
    "shape,wshape,stride,pad",
    [
        ((1, 3, 2, 4, 4), (2, 3, 1, 3, 3), (1, 2, 2), (0, 1, 1)),
        ((2, 2, 5, 2, 2), (3, 2, 3, 1, 1), (2, 1, 1), (1, 0, 0)),
        ((1, 2, 3, 3, 3), (2, 2, 3, 3, 3), (1, 1, 1), (1, 1, 1)),
    ],
)
def test_dense_conv_gradients(shape, wshape, stride, pad):
    rng = np.random.default_rng(18)
    fd_check(lambda x, w: tn.conv3d(x, w, stride, pad), [rng.normal(size=shape), rng.normal(size=wshape)])


@pytest.mark.parametrize("shape,co", [((2, 3, 2, 2, 2), 4), ((1, 1, 3, 2, 1), 2), ((2, 4, 1, 3, 3), 1)])
def test_pointwise_gradients(shape, co):
    rng = np.random.default_rng(19)
    fd_check(tn.conv3d_pointwise, [rng.normal(size=shape), rng.normal(size=(co, shape[1]))])


@pytest.mark.parametrize("shape", [(2, 3, 2, 2, 2), (1, 1, 3, 4, 1), (2, 2, 1, 3, 3)])
def test_pool_gradients(shape):
    rng = np.random.default_rng(20)
    fd_check(tn.avg_pool_per_frame, [rng.normal(size=shape)])
    fd_check(tn.global_avg_pool, [rng.normal(size=shape)])


@pytest.mark.parametrize("shape", [(2, 3, 2, 2, 2), (1, 4, 3, 1, 2), (3, 1, 1, 2, 2)])
def test_dyrelu_gradients(shape):
    rng = np.random.default_rng(21)
    n, c, t = shape[:3]
    cshape = (n, c, t, 1, 1)
    # Keep the two lines well separated so no entry sits on the kink.
    x = _away_from_zero(rng, shape)
    a1, a2 = 1.0 + 0.2 * rng.normal(size=cshape), -0.5 + 0.1 * rng.normal(size=cshape)
    b = 0.01 * rng.normal(size=cshape)
    fd_check(tn.dyrelu, [x, a1, b, a2, b.copy()])


def test_expand_and_broadcast_gradients():
    rng = np.random.default_rng(22)
    fd_check(lambda a: a.expand(3, 2, 4), [rng.normal(size=(1, 2, 4))])
    fd_check(lambda a: tn.broadcast_to(a, (2, 3, 4)), [rng.normal(size=(3, 1))])


# -- invariants ---------------------------------------------------------------
def test_batch_equivariance_of_ops():
    rng = np.random.default_rng(23)
    x = rng.normal(size=(4, 3, 2, 4, 4))
    w = rng.normal(size=(3, 3, 3, 3))
    pw = rng.normal(size=(5, 3))
    gw, gb = rng.normal(size=3), rng.normal(size=3)
    perm = np.array([2, 0, 3, 1])

    def run(v):
        h = tn.conv3d_depthwise(T(v), T(w), (1, 2, 2), (1, 1, 1))
        h = tn.group_norm(h, 3, T(gw), T(gb)).relu()
        h = tn.conv3d_pointwise(h, T(pw))
        return tn.avg_pool_per_frame(h).softmax(-1).data

    assert np.array_equal(run(x)[perm], run(x[perm]))


def test_ops_are_deterministic():
    rng = np.random.default_rng(24)
    x, w = rng.normal(size=(2, 3, 3, 5, 5)), rng.normal(size=(3, 3, 3, 3))
    a = tn.conv3d_depthwise(T(x), T(w), (1, 1, 1), (1, 1, 1)).data
    b = tn.conv3d_depthwise(T(x), T(w), (1, 1, 1), (1, 1, 1)).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3)), elements=st.floats(-1e3, 1e3))
)
def test_ops_keep_finite_inputs_finite(x):
    t = T(x)
    for out in (t.softmax(-1), tn.layer_norm(t), t.gelu(), t.sigmoid(), t.relu(), t @ t.swap_last()):
        assert np.all(np.isfinite(out.data))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 6), st.integers(1, 3), st.integers(0, 1))
def test_conv_extent_agrees_with_output(c, t, hw, s, p):
    x = np.ones((1, c, t + 2, hw + 2, hw + 2))
    out = tn.conv3d_depthwise(T(x), T(np.ones((c, 3, 3, 3))), (s, s, s), (p, p, p))
    assert out.shape[2:] == tuple(tn.conv_extent(L, 3, s, p) for L in x.shape[2:])
