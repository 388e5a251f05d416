import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msfmamba import ndtensor as nt
from msfmamba.ndtensor import ConfigError, ContractError, Parameter, ShapeError, Tensor

from oracles import conv3d_loops, conv3d_shared_loops, matmul_loops


def param(rng, shape, name="p", scale=1.0):
    return Parameter(rng.normal(size=shape) * scale, name)


def check_grad(build, params, tol=1e-6):
    rng = np.random.default_rng(99)
    w_holder = {}

    def f():
        out = build()
        if "w" not in w_holder:
            w_holder["w"] = rng.normal(size=out.shape)
        return nt.sum(nt.mul(out, Tensor(w_holder["w"])))

    err = nt.finite_diff_check(f, params)
    assert err < tol, err


# ---------------------------------------------------------------------------
# forward values


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))
    got = nt.matmul(a, b).data
    for i in range(2):
        np.testing.assert_allclose(got[i], matmul_loops(a[i], b), atol=1e-13)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nt.matmul(np.ones((2, 3)), np.ones((4, 5)))


def test_item_requires_single_element():
    assert Tensor(np.array([3.5])).item() == 3.5
    with pytest.raises(ShapeError):
        Tensor(np.ones(2)).item()


def test_softmax_is_stable_and_normalized():
    z = np.array([[1000.0, 1000.0, -1000.0], [0.0, 1.0, 2.0]])
    s = nt.softmax_axis(z, -1).data
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-15)
    np.testing.assert_allclose(s[0], [0.5, 0.5, 0.0], atol=1e-15)


def test_logsumexp_matches_direct_formula():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(3, 7))
    np.testing.assert_allclose(nt.logsumexp(z, -1).data, np.log(np.exp(z).sum(axis=-1)), atol=1e-13)
    big = z + 800.0
    np.testing.assert_allclose(nt.logsumexp(big, -1).data, np.log(np.exp(z).sum(axis=-1)) + 800.0, atol=1e-10)


def test_softplus_large_inputs():
    x = np.array([-800.0, 0.0, 800.0])
    np.testing.assert_allclose(nt.softplus(x).data, [0.0, np.log(2.0), 800.0], atol=1e-15)


def test_layer_norm_zero_mean_unit_var():
    rng = np.random.default_rng(2)
    x = rng.normal(3.0, 5.0, size=(4, 16))
    y = nt.layer_norm(x, np.ones(16), np.zeros(16)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-5)


@pytest.mark.parametrize("w", [1, 3, 5])
def test_conv3d_shared_matches_loop_oracle(w):
    rng = np.random.default_rng(w)
    x = rng.normal(size=(2, 3, 4, 5, 6))
    k = rng.normal(size=(w, w, w))
    np.testing.assert_allclose(nt.conv3d_shared(x, k).data, conv3d_shared_loops(x, k), atol=1e-12)


def test_conv3d_shared_large_grid_path_matches_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 6, 20, 20))  # 2400 voxels, above the dense limit
    assert 6 * 20 * 20 > nt.DENSE_CONV_MAX_VOXELS
    k = rng.normal(size=(3, 3, 3))
    np.testing.assert_allclose(nt.conv3d_shared(x, k).data, conv3d_shared_loops(x, k), atol=1e-12)


def test_conv3d_shared_rejects_even_window():
    with pytest.raises(ConfigError):
        nt.conv3d_shared(np.ones((1, 3, 3, 3)), np.ones((2, 2, 2)))


def test_conv3d_matches_loop_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 3, 4, 5))
    w = rng.normal(size=(4, 3, 3, 3, 3))
    b = rng.normal(size=4)
    np.testing.assert_allclose(nt.conv3d(x, w, b).data, conv3d_loops(x, w, b), atol=1e-12)


def test_conv3d_pointwise_kernel():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 3, 2, 2, 2))
    w = rng.normal(size=(2, 3, 1, 1, 1))
    expect = np.einsum("oi,bithw->bothw", w[:, :, 0, 0, 0], x)
    np.testing.assert_allclose(nt.conv3d(x, w).data, expect, atol=1e-13)


def test_conv3d_channel_mismatch():
    with pytest.raises(ShapeError):
        nt.conv3d(np.ones((1, 2, 3, 3, 3)), np.ones((1, 3, 3, 3, 3)))


# ---------------------------------------------------------------------------
# tape behaviour


def test_no_recording_without_tape():
    p = Parameter(np.ones(3))
    out = nt.mul(p, 2.0)
    np.testing.assert_array_equal(out.data, 2.0)


def test_backward_requires_scalar_loss():
    p = Parameter(np.ones(3))
    with nt.Tape() as tape:
        out = nt.mul(p, 2.0)
    with pytest.raises(ContractError):
        nt.backward(tape, out)


def test_gradients_accumulate_until_zeroed():
    p = Parameter(np.array([1.0, 2.0]))
    for _ in range(2):
        with nt.Tape() as tape:
            loss = nt.sum(nt.mul(p, p))
        nt.backward(tape, loss)
    np.testing.assert_allclose(p.grad.data, 4.0 * p.data)
    p.zero_grad()
    np.testing.assert_array_equal(p.grad.data, 0.0)


def test_reused_intermediate_sums_both_paths():
    p = Parameter(np.array(3.0))
    with nt.Tape() as tape:
        q = nt.mul(p, 2.0)
        loss = nt.add(nt.mul(q, q), q)  # 4p^2 + 2p
    nt.backward(tape, loss)
    assert p.grad.data == pytest.approx(8 * 3.0 + 2)


# ---------------------------------------------------------------------------
# gradient checks, one per differentiable op


@pytest.mark.parametrize(
    "name, build",
    [
        ("add_broadcast", lambda a, b: nt.add(a, b[0])),
        ("sub", lambda a, b: nt.sub(a, b)),
        ("mul_broadcast", lambda a, b: nt.mul(a, b[:, :1])),
        ("div", lambda a, b: nt.div(a, nt.add(nt.mul(b, b), 1.0))),
        ("neg", lambda a, b: nt.neg(a)),
        ("exp", lambda a, b: nt.exp(a)),
        ("log", lambda a, b: nt.log(nt.add(nt.mul(a, a), 0.5))),
        ("sqrt", lambda a, b: nt.sqrt(nt.add(nt.mul(a, a), 0.5))),
        ("softplus", lambda a, b: nt.softplus(a)),
        ("sigmoid", lambda a, b: nt.sigmoid(a)),
        ("relu", lambda a, b: nt.relu(a)),
        ("sum_axis", lambda a, b: nt.sum(a, axis=1, keepdims=True)),
        ("mean_axis", lambda a, b: nt.mean(a, axis=0)),
        ("reshape", lambda a, b: nt.reshape(a, (4, 3))),
        ("transpose", lambda a, b: nt.transpose(a, (1, 0))),
        ("getitem_slice", lambda a, b: nt.getitem(a, (slice(1, 3), slice(None, None, 2)))),
        ("getitem_fancy", lambda a, b: nt.getitem(a, (np.array([0, 0, 2]), np.array([1, 1, 3])))),
        ("flip", lambda a, b: nt.flip(a, 1)),
        ("concat", lambda a, b: nt.concat([a, b], axis=0)),
        ("stack", lambda a, b: nt.stack([a, b], axis=1)),
        ("matmul", lambda a, b: nt.matmul(a, nt.transpose(b, (1, 0)))),
        ("softmax", lambda a, b: nt.softmax_axis(a, -1)),
        ("logsumexp", lambda a, b: nt.logsumexp(a, 0)),
        ("layer_norm", lambda a, b: nt.layer_norm(a, b[0], b[1])),
    ],
)
def test_op_gradients(name, build):
    rng = np.random.default_rng(7)
    a = param(rng, (3, 4), "a")
    b = param(rng, (3, 4), "b")
    if name == "relu":
        a.data[np.abs(a.data) < 0.1] = 0.5  # stay clear of the kink
    check_grad(lambda: build(a, b), [a, b])


def test_conv3d_shared_gradients():
    rng = np.random.default_rng(8)
    x = param(rng, (2, 3, 4, 4), "x")
    k = param(rng, (3, 3, 3), "k")
    check_grad(lambda: nt.conv3d_shared(x, k), [x, k])


def test_conv3d_shared_gradients_loop_path():
    rng = np.random.default_rng(9)
    x = param(rng, (1, 6, 20, 20), "x")
    k = param(rng, (3, 3, 3), "k")
    entries = {"x": rng.choice(x.size, 40, replace=False), "k": np.arange(27)}
    w = rng.normal(size=x.shape)
    err = nt.finite_diff_check(lambda: nt.sum(nt.mul(nt.conv3d_shared(x, k), Tensor(w))), [x, k], entries=entries)
    assert err < 1e-6


def test_conv3d_gradients():
    rng = np.random.default_rng(10)
    x = param(rng, (2, 3, 3, 4, 4), "x")
    w = param(rng, (2, 3, 3, 3, 3), "w", 0.5)
    b = param(rng, (2,), "b")
    check_grad(lambda: nt.conv3d(x, w, b), [x, w, b])


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=40, deadline=None)
@given(
    shape=st.lists(st.integers(1, 4), min_size=1, max_size=3),
    drop=st.integers(0, 2),
    seed=st.integers(0, 2**31),
)
def test_broadcast_add_gradient_is_sum_over_broadcast_axes(shape, drop, seed):
    rng = np.random.default_rng(seed)
    small = shape[drop % len(shape):]
    a = Parameter(rng.normal(size=shape), "a")
    b = Parameter(rng.normal(size=small), "b")
    with nt.Tape() as tape:
        loss = nt.sum(nt.add(a, b))
    nt.backward(tape, loss)
    np.testing.assert_allclose(b.grad.data, np.prod(shape) / max(np.prod(small), 1))
    np.testing.assert_allclose(a.grad.data, 1.0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 6), k=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_softmax_rows_sum_to_one(n, k, seed):
    z = np.random.default_rng(seed).normal(scale=30.0, size=(n, k))
    s = nt.softmax_axis(z, -1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(s >= 0)
