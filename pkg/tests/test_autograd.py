import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from trace_recon import autograd as ag
from trace_recon.autograd import AdamState, NonFiniteError, Tensor, adam_update, finite_difference_check


def _rng(seed=0):
    return np.random.default_rng(seed)


def _away_from(values, points, margin=0.05):
    """Nudge entries that sit within ``margin`` of a kink."""
    v = values.copy()
    for p in points:
        near = np.abs(v - p) < margin
        v[near] = p + np.where(v[near] >= p, margin, -margin) * 2
    return v


def _direct_conv(x, k, mode="zero", stride=1):
    """Loop-based cross-correlation oracle for one input/output channel pair set."""
    cin, h, w = x.shape
    cout, _, ks, _ = k.shape
    pad = (ks - 1) // 2
    np_mode = {"zero": "constant", "reflect": "reflect", "symmetric": "symmetric"}[mode]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode=np_mode)
    ho, wo = -(-h // stride), -(-w // stride)
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride : i * stride + ks, j * stride : j * stride + ks]
                out[o, i, j] = np.sum(patch * k[o])
    return out


# ------------------------------------------------------------------ tensors


def test_dtype_is_preserved():
    assert Tensor(np.ones(3, np.float32)).dtype == np.float32
    assert Tensor(np.ones(3)).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32


def test_backward_requires_scalar():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (p * p).backward()


def test_sum_of_squares_gradient_is_2p():
    p = Tensor(_rng().standard_normal((2, 3)), requires_grad=True)
    (g,) = ag.gradients(ag.sum_of_squares(p), [p])
    np.testing.assert_array_equal(g, 2 * p.data)


def test_disconnected_parameter_gets_zero_gradient():
    p = Tensor(np.ones((2, 2)), requires_grad=True)
    q = Tensor(np.full(3, 2.0), requires_grad=True)
    gp, gq = ag.gradients(ag.sum_of_squares(q), [p, q])
    np.testing.assert_array_equal(gp, np.zeros((2, 2)))
    np.testing.assert_array_equal(gq, 2 * q.data)


def test_shared_node_accumulates_gradient():
    p = Tensor(np.array([3.0]), requires_grad=True)
    loss = ag.sum_of_squares(p + p * p)  # (p + p^2)^2 -> 2(p+p^2)(1+2p)
    (g,) = ag.gradients(loss, [p])
    assert g[0] == pytest.approx(2 * 12 * 7)


def test_deep_chain_has_no_recursion_limit():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x
    for _ in range(5000):
        y = ag.scale(y, 1.0)
    (g,) = ag.gradients(ag.sum_of_squares(y), [x])
    np.testing.assert_array_equal(g, 2 * np.ones(2))


def test_nonfinite_output_from_finite_inputs_raises():
    big = Tensor(np.array([1e200]))
    with pytest.raises(NonFiniteError):
        ag.mul(big, big)


def test_leaky_relu_and_clip_kink_conventions():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
    (g,) = ag.gradients(ag.sum_of_squares(ag.leaky_relu(x) + Tensor(np.ones(3))), [x])
    # d/dx (lrelu(x)+1)^2 = 2(lrelu(x)+1) lrelu'(x); slope at 0 is 0.1
    np.testing.assert_allclose(g, [2 * 1 * 0.1, 2 * 2 * 1.0, 2 * 0.9 * 0.1])

    c = Tensor(np.array([-0.5, 0.0, 0.5, 1.0, 1.5]), requires_grad=True)
    out = ag.clip(c)
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.5, 1.0, 1.0])
    (gc,) = ag.gradients(ag.sum_of_squares(out), [c])
    np.testing.assert_array_equal(gc, [0.0, 0.0, 1.0, 2.0, 0.0])


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_sigmoid_stays_inside_open_interval(dtype):
    s = ag.sigmoid(Tensor(np.array([-800.0, -20.0, 0.0, 20.0, 800.0], dtype))).data
    assert np.all((s > 0) & (s < 1))
    assert s[2] == 0.5


# --------------------------------------------------------------------- conv


def test_conv_identity_kernel():
    x = Tensor(_rng().standard_normal((2, 5, 6)).astype(np.float32))
    k = Tensor(np.eye(2, dtype=np.float32)[:, :, None, None])
    np.testing.assert_array_equal(ag.conv2d(x, k).data, x.data)


def test_conv_preserves_constant_with_symmetric_padding():
    x = Tensor(np.full((1, 7, 7), 0.3))
    k = Tensor(np.full((1, 1, 3, 3), 1 / 9))
    np.testing.assert_allclose(ag.conv2d(x, k, "symmetric").data, 0.3, rtol=1e-14)


def test_conv_center_of_ones_kernel_is_45():
    x = Tensor(np.arange(1.0, 10.0).reshape(1, 3, 3))
    out = ag.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), "zero")
    expected = _direct_conv(x.data, np.ones((1, 1, 3, 3)))
    assert out.data[0, 1, 1] == 45.0
    np.testing.assert_allclose(out.data, expected)
    # frozen from the loop oracle
    np.testing.assert_array_equal(out.data[0], [[12, 21, 16], [27, 45, 33], [24, 39, 28]])


@pytest.mark.parametrize("mode", ag.PADDING_MODES)
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_matches_loop_oracle(mode, stride, k):
    rng = _rng(k + stride)
    x = rng.standard_normal((2, 7, 8))
    ker = rng.standard_normal((3, 2, k, k))
    out = ag.conv2d(Tensor(x), Tensor(ker), mode, stride).data
    np.testing.assert_allclose(out, _direct_conv(x, ker, mode, stride), rtol=1e-12, atol=1e-12)


def test_depthwise_matches_per_channel_conv():
    rng = _rng(3)
    x = rng.standard_normal((3, 6, 6))
    ker = rng.standard_normal((3, 1, 3, 3))
    out = ag.conv2d(Tensor(x), Tensor(ker), "reflect", depthwise=True).data
    for c in range(3):
        ref = _direct_conv(x[c : c + 1], ker[c : c + 1], "reflect")
        np.testing.assert_allclose(out[c : c + 1], ref, rtol=1e-12)


def test_large_reflect_padding_wraps_periodically():
    # pad wider than the image: index maps must stay in range
    x = Tensor(_rng().standard_normal((1, 3, 3)))
    k = Tensor(np.ones((1, 1, 9, 9)) / 81)
    for mode in ("reflect", "symmetric"):
        out = ag.conv2d(x, k, mode)
        assert out.shape == (1, 3, 3)
        assert np.all(np.isfinite(out.data))


@pytest.mark.parametrize("mode", ag.PADDING_MODES)
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("depthwise", [False, True])
def test_conv_adjoint_50_pairs(mode, stride, depthwise):
    rng = _rng(11)
    cin, cout = (2, 2) if depthwise else (2, 3)
    ker = rng.standard_normal((cout, 1 if depthwise else cin, 3, 3))
    worst = 0.0
    for _ in range(50):
        x = rng.standard_normal((cin, 9, 10))
        ax = ag.conv2d(Tensor(x), Tensor(ker), mode, stride, depthwise).data
        y = rng.standard_normal(ax.shape)
        aty = ag.conv2d_transpose(y, ker, x.shape, mode, stride, depthwise)
        lhs, rhs = np.vdot(ax, y), np.vdot(x, aty)
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(ax) * np.linalg.norm(y)))
    assert worst <= 1e-5
    assert worst < 1e-13  # float64 throughout


@settings(max_examples=25, deadline=None)
@given(
    a=st.floats(-3, 3),
    b=st.floats(-3, 3),
    seed=st.integers(0, 2**16),
    mode=st.sampled_from(ag.PADDING_MODES),
    stride=st.sampled_from([1, 2]),
)
def test_conv_linearity(a, b, seed, mode, stride):
    rng = _rng(seed)
    x, y = rng.standard_normal((2, 2, 6, 6))
    ker = Tensor(rng.standard_normal((2, 2, 3, 3)))
    lhs = ag.conv2d(Tensor(a * x + b * y), ker, mode, stride).data
    rhs = a * ag.conv2d(Tensor(x), ker, mode, stride).data + b * ag.conv2d(Tensor(y), ker, mode, stride).data
    scale = max(np.abs(rhs).max(), np.abs(lhs).max(), 1e-12)
    assert np.abs(lhs - rhs).max() / scale <= 1e-6


def test_conv_is_deterministic_bitwise():
    rng = _rng(5)
    x = Tensor(rng.standard_normal((4, 16, 16)).astype(np.float32))
    k = Tensor(rng.standard_normal((8, 4, 3, 3)).astype(np.float32))
    a = ag.conv2d(x, k, "zero", 2).data
    b = ag.conv2d(x, k, "zero", 2).data
    assert a.tobytes() == b.tobytes()


def test_conv_rejects_bad_arguments():
    x = Tensor(np.zeros((2, 4, 4)))
    with pytest.raises(ValueError):
        ag.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))  # channel mismatch
    with pytest.raises(ValueError):
        ag.conv2d(x, Tensor(np.zeros((1, 2, 2, 2))))  # even kernel
    with pytest.raises(ValueError):
        ag.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), "wrap")


# ---------------------------------------------------- finite differences per primitive


def _primitive_cases():
    rng = _rng(42)
    a = rng.standard_normal((2, 4, 4))
    b = rng.standard_normal((2, 4, 4))
    bias = rng.standard_normal((2, 1, 1))
    w = rng.standard_normal((2, 4, 4))  # random projection makes each loss generic
    mat = sp.random(10, 32, density=0.3, random_state=0, format="csr")

    def proj(t):
        return ag.sum_of_squares(ag.mul(t, Tensor(w[tuple(slice(0, s) for s in t.shape)]))) if t.shape == w.shape else ag.sum_of_squares(t)

    return {
        "add": ([a, bias], lambda p: proj(ag.add(p[0], p[1]))),
        "sub": ([a, b], lambda p: proj(ag.sub(p[0], p[1]))),
        "mul": ([a, b], lambda p: proj(ag.mul(p[0], p[1]))),
        "scale": ([a], lambda p: proj(ag.scale(p[0], -1.7))),
        "leaky_relu": ([_away_from(a, [0.0])], lambda p: proj(ag.leaky_relu(p[0]))),
        "sigmoid": ([a], lambda p: proj(ag.sigmoid(p[0]))),
        "clip": ([_away_from(0.5 + 0.4 * a, [0.0, 1.0])], lambda p: proj(ag.clip(p[0]))),
        "sum_of_squares": ([a], lambda p: ag.sum_of_squares(p[0])),
        "concat": ([a, b[:1]], lambda p: ag.sum_of_squares(ag.mul(ag.concat([p[0], p[1]]), Tensor(np.concatenate([w, w[:1]]))))),
        "decimate": ([a], lambda p: ag.sum_of_squares(ag.mul(ag.decimate(p[0], 2), Tensor(w[:, :2, :2])))),
        "upsample_nearest": ([a[:, :2, :2]], lambda p: proj(ag.upsample_nearest(p[0], 2))),
        "sparse_matvec": ([a], lambda p: ag.sum_of_squares(ag.sparse_matvec(mat, p[0], (10,)))),
    }


@pytest.mark.parametrize("name", list(_primitive_cases()))
def test_primitive_gradients_match_finite_differences(name):
    values, fn = _primitive_cases()[name]
    params = [Tensor(v, requires_grad=True) for v in values]
    assert finite_difference_check(fn, params, h=1e-3, seed=0, samples=200) <= 1e-4


@pytest.mark.parametrize("mode", ag.PADDING_MODES)
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("depthwise", [False, True])
def test_conv_gradients_match_finite_differences(mode, stride, depthwise):
    rng = _rng(7)
    x = rng.standard_normal((2, 6, 6))
    k = rng.standard_normal((2, 1 if depthwise else 2, 3, 3))
    r = rng.standard_normal((2, 3 if stride == 2 else 6, 3 if stride == 2 else 6))

    def loss(p):
        return ag.sum_of_squares(ag.sub(ag.conv2d(p[0], p[1], mode, stride, depthwise), Tensor(r)))

    params = [Tensor(x, requires_grad=True), Tensor(k, requires_grad=True)]
    assert finite_difference_check(loss, params, h=1e-3, samples=200) <= 1e-4


def _kink_free_two_layer_instance(h, seed=0):
    """Draw init-scale instances until no first-layer pre-activation lies within
    the finite-difference radius of the leaky-relu kink."""
    rng = _rng(seed)
    while True:
        x = rng.uniform(0, 1, (1, 8, 8))
        target = rng.uniform(0, 1, (1, 8, 8))
        k1 = rng.uniform(-np.sqrt(6 / 9), np.sqrt(6 / 9), (4, 1, 3, 3))
        k2 = rng.uniform(-np.sqrt(6 / 36), np.sqrt(6 / 36), (1, 4, 3, 3))
        pre = ag.conv2d(Tensor(x), Tensor(k1)).data
        if np.abs(pre).min() > 2 * h * np.abs(x).max():
            return x, target, k1, k2


def test_two_layer_conv_net_gradient():
    x, target, k1, k2 = _kink_free_two_layer_instance(1e-3)

    def loss(p):
        hidden = ag.leaky_relu(ag.conv2d(Tensor(x), p[0]))
        return ag.sum_of_squares(ag.sub(ag.sigmoid(ag.conv2d(hidden, p[1])), Tensor(target)))

    params = [Tensor(k1, requires_grad=True), Tensor(k2, requires_grad=True)]
    assert finite_difference_check(loss, params, h=1e-3, samples=72) <= 1e-4


def test_finite_difference_check_on_quadratic():
    rng = _rng(1)
    A = rng.standard_normal((5, 5))
    Q = A @ A.T

    def loss(p):
        v = p[0]
        Qv = ag.sparse_matvec(Q, v, (5,))
        return ag.scale(ag.sum_of_squares(ag.add(v, Qv)), 0.5)

    err = finite_difference_check(loss, [Tensor(rng.standard_normal(5), requires_grad=True)], h=1e-3)
    assert err <= 1e-8


def test_finite_difference_check_without_parameters():
    assert finite_difference_check(lambda p: Tensor(np.array(1.0)), []) == 0.0


def test_finite_difference_check_catches_a_wrong_gradient():
    def broken(a):
        return ag._make(a.data**2, (a,), lambda g: (g * a.data,), "broken")  # missing factor 2

    def loss(p):
        return ag.sum_of_squares(broken(p[0]))

    assert finite_difference_check(loss, [Tensor(np.linspace(0.5, 2, 6), requires_grad=True)]) > 0.1


# --------------------------------------------------------------------- adam


def test_adam_first_step_value():
    p = Tensor(np.zeros(1), requires_grad=True)
    state = AdamState(lr=1e-3, b1=0.9, b2=0.999, eps=1e-8)
    adam_update([p], [np.ones(1)], state)
    # m_hat = 1, v_hat = 1 -> -lr * 1/(1+eps)
    assert abs(p.data[0] - (-1e-3)) < 1e-6
    assert p.data[0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-15)
    assert state.step == 1


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState()
    adam_update([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1
    adam_update([p], [None], state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 2


def test_adam_against_reference_recurrence():
    rng = _rng(4)
    grads = rng.standard_normal((5, 3))
    p = Tensor(np.zeros(3), requires_grad=True)
    state = AdamState(lr=0.01)
    m = v = np.zeros(3)
    ref = np.zeros(3)
    for i, g in enumerate(grads, start=1):
        adam_update([p], [g], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**i)) / (np.sqrt(v / (1 - 0.999**i)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_adam_is_bitwise_deterministic():
    def run():
        rng = _rng(8)
        p = Tensor(rng.standard_normal(10).astype(np.float32), requires_grad=True)
        state = AdamState()
        for _ in range(20):
            (g,) = ag.gradients(ag.sum_of_squares(ag.sigmoid(p)), [p])
            adam_update([p], [g], state)
        return p.data.tobytes()

    assert run() == run()


def test_adam_rejects_nan_and_shape_mismatch():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(NonFiniteError):
        adam_update([p], [np.array([np.nan, 0.0])], AdamState())
    with pytest.raises(ValueError):
        adam_update([p], [np.zeros(3)], AdamState())


def test_adam_reset():
    p = Tensor(np.zeros(2), requires_grad=True)
    state = AdamState()
    adam_update([p], [np.ones(2)], state)
    state.reset()
    assert state.step == 0 and not state.m and not state.v
