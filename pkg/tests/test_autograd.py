import numpy as np
import pytest

from s4mil.autograd import Tape, check_gradients, grad_ssm_conv
from s4mil.errors import ContractError


def f64_tape():
    return Tape(dtype=np.float64)


# --------------------------------------------------------------------------
# Hand-checked chain rules
# --------------------------------------------------------------------------

def test_square_gradient():
    tape = f64_tape()
    w = tape.leaf(3.0, name="w")
    tape.mul(w, w)
    assert tape.forward() == 9.0
    grads = tape.backward()
    assert grads["w"] == pytest.approx(6.0)


def test_log_sigmoid_gradient_at_zero():
    tape = f64_tape()
    w = tape.leaf(0.0, name="w")
    tape.log(tape.sigmoid(w))
    grads = tape.backward()
    assert grads["w"] == pytest.approx(0.5)


def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(0)
    tape = f64_tape()
    x = tape.leaf(rng.standard_normal((6, 3)), name="x")
    w = tape.leaf(rng.standard_normal((3, 4)), name="w")
    tape.softmax_log_loss(tape.matvec(x, w), rng.integers(0, 4, 6), reduction="sum")
    first = tape.backward()
    second = tape.backward()
    for k in first:
        assert np.array_equal(first[k], second[k])


def test_max_pool_tie_breaks_to_lowest_index():
    tape = f64_tape()
    x = tape.leaf(np.array([[1.0, 2.0], [1.0, 0.0], [0.5, 2.0]]), name="x")
    pooled = tape.max_pool_sequence(x)
    tape.softmax_log_loss(pooled, [0])
    np.testing.assert_allclose(pooled.value, [1.0, 2.0])
    grads = tape.backward()
    # column 0 ties rows 0/1 at 1.0; column 1 ties rows 0/2 at 2.0
    assert grads["x"][0, 0] != 0 and grads["x"][1, 0] == 0
    assert grads["x"][0, 1] != 0 and grads["x"][2, 1] == 0


def test_shape_mismatch_names_both_shapes():
    tape = f64_tape()
    x = tape.leaf(np.zeros((2, 3)))
    w = tape.leaf(np.zeros((4, 5)))
    with pytest.raises(ContractError, match=r"\(2, 3\).*\(4, 5\)"):
        tape.matvec(x, w)
    with pytest.raises(ContractError, match=r"\(2, 3\).*\(4, 5\)"):
        tape.add(x, w)


def test_non_scalar_tape_rejected():
    tape = f64_tape()
    tape.leaf(np.zeros(3))
    with pytest.raises(ContractError, match="scalar"):
        tape.forward()


# --------------------------------------------------------------------------
# Finite-difference checks, one per op kind
# --------------------------------------------------------------------------

def assert_gradcheck(build, params, **kw):
    worst, failures = check_gradients(build, params, **kw)
    assert not failures, "\n".join(failures[:10])


def test_matvec_2d_fd():
    rng = np.random.default_rng(1)
    params = {"x": rng.standard_normal((5, 3)), "w": rng.standard_normal((3, 4))}
    labels = rng.integers(0, 4, 5)

    def build(p):
        tape = f64_tape()
        x, w = tape.leaf(p["x"], "x"), tape.leaf(p["w"], "w")
        tape.softmax_log_loss(tape.matvec(x, w), labels, reduction="sum")
        return tape

    assert_gradcheck(build, params)


def test_matvec_1d_fd():
    rng = np.random.default_rng(2)
    params = {"x": rng.standard_normal(3), "w": rng.standard_normal((3, 4))}

    def build(p):
        tape = f64_tape()
        tape.softmax_log_loss(tape.matvec(tape.leaf(p["x"], "x"), tape.leaf(p["w"], "w")), [2])
        return tape

    assert_gradcheck(build, params)


def test_add_mul_sigmoid_exp_log_scale_fd():
    rng = np.random.default_rng(3)
    params = {
        "a": rng.standard_normal((4, 3)),
        "b": rng.standard_normal((4, 3)),
        "bias": rng.standard_normal(3),
    }
    labels = rng.integers(0, 3, 4)

    def build(p):
        tape = f64_tape()
        a, b = tape.leaf(p["a"], "a"), tape.leaf(p["b"], "b")
        bias = tape.leaf(p["bias"], "bias")
        z = tape.add(tape.mul(a, tape.sigmoid(b)), bias)
        z = tape.log(tape.exp(tape.scale(z, 0.7)))
        tape.softmax_log_loss(z, labels, reduction="mean")
        return tape

    assert_gradcheck(build, params)


def test_max_pool_fd():
    rng = np.random.default_rng(4)
    params = {"x": rng.standard_normal((8, 5))}

    def build(p):
        tape = f64_tape()
        tape.softmax_log_loss(tape.max_pool_sequence(tape.leaf(p["x"], "x")), [1])
        return tape

    assert_gradcheck(build, params)


def test_layernorm_fd():
    rng = np.random.default_rng(5)
    params = {
        "x": rng.standard_normal((6, 4)),
        "g": 1.0 + 0.1 * rng.standard_normal(4),
        "b": 0.1 * rng.standard_normal(4),
    }
    labels = rng.integers(0, 4, 6)

    def build(p):
        tape = f64_tape()
        out = tape.layernorm(tape.leaf(p["x"], "x"), tape.leaf(p["g"], "g"), tape.leaf(p["b"], "b"))
        tape.softmax_log_loss(out, labels, reduction="sum")
        return tape

    assert_gradcheck(build, params)


def ssm_params(rng, h, n_half):
    return {
        "u": rng.standard_normal((12, h)),
        "a_re": -rng.uniform(0.2, 1.5, (h, n_half)),
        "a_im": np.pi * rng.uniform(0, 2, (h, n_half)),
        "c_re": rng.standard_normal((h, n_half)),
        "c_im": rng.standard_normal((h, n_half)),
        "d": rng.standard_normal(h),
        "log_dt": rng.uniform(np.log(0.01), np.log(0.5), h),
    }


def build_ssm_tape(p, rule, labels):
    tape = f64_tape()
    nodes = {k: tape.leaf(v, k) for k, v in p.items()}
    out = tape.ssm_conv(nodes["u"], nodes["a_re"], nodes["a_im"], nodes["c_re"],
                        nodes["c_im"], nodes["d"], nodes["log_dt"], rule=rule)
    tape.softmax_log_loss(out, labels, reduction="sum")
    return tape


@pytest.mark.parametrize("rule", ["bilinear", "zoh"])
def test_ssm_conv_fd(rule):
    rng = np.random.default_rng(6)
    params = ssm_params(rng, h=3, n_half=2)
    labels = rng.integers(0, 3, 12)
    assert_gradcheck(lambda p: build_ssm_tape(p, rule, labels), params)


@pytest.mark.parametrize("rule", ["bilinear", "zoh"])
def test_ssm_conv_scalar_channel_l4_fd(rule):
    rng = np.random.default_rng(7)
    params = ssm_params(rng, h=1, n_half=1)
    params["u"] = rng.standard_normal((4, 1))
    widen = rng.standard_normal((1, 3))  # fixed, so the scalar loss is non-degenerate
    labels = rng.integers(0, 3, 4)

    def build(p):
        tape = f64_tape()
        nodes = {k: tape.leaf(v, k) for k, v in p.items()}
        out = tape.ssm_conv(nodes["u"], nodes["a_re"], nodes["a_im"], nodes["c_re"],
                            nodes["c_im"], nodes["d"], nodes["log_dt"], rule=rule)
        tape.softmax_log_loss(tape.matvec(out, tape.leaf(widen)), labels, reduction="sum")
        return tape

    assert_gradcheck(build, params)


def test_ssm_conv_feedthrough_gradient_is_correlation():
    # d is a pure skip: dL/dd_h = sum_t g[t,h] u[t,h].
    rng = np.random.default_rng(8)
    from s4mil.autograd import _ssm_conv_forward

    p = ssm_params(rng, h=2, n_half=2)
    _, cache = _ssm_conv_forward(p["u"], p["a_re"], p["a_im"], p["c_re"], p["c_im"],
                                 p["d"], p["log_dt"], "bilinear", keep_cache=True)
    g = rng.standard_normal(p["u"].shape)
    grads = grad_ssm_conv(g, cache)
    np.testing.assert_allclose(grads["d"], np.einsum("lh,lh->h", g, p["u"]), rtol=1e-12)


def test_ssm_conv_zero_upstream_zero_grads():
    rng = np.random.default_rng(9)
    from s4mil.autograd import _ssm_conv_forward

    p = ssm_params(rng, h=2, n_half=3)
    _, cache = _ssm_conv_forward(p["u"], p["a_re"], p["a_im"], p["c_re"], p["c_im"],
                                 p["d"], p["log_dt"], "zoh", keep_cache=True)
    grads = grad_ssm_conv(np.zeros_like(p["u"]), cache)
    for k, v in grads.items():
        assert np.all(v == 0.0), k


def test_ssm_conv_grads_match_unrolled_recurrence():
    # Forward-mode accumulation through the stepped recurrence, an
    # independent route to the same pole/projection gradients.
    rng = np.random.default_rng(10)
    from s4mil.autograd import _ssm_conv_forward

    h, n_half, length = 1, 2, 6
    p = ssm_params(rng, h=h, n_half=n_half)
    p["u"] = rng.standard_normal((length, h))
    _, cache = _ssm_conv_forward(p["u"], p["a_re"], p["a_im"], p["c_re"], p["c_im"],
                                 p["d"], p["log_dt"], "bilinear", keep_cache=True)
    g = rng.standard_normal((length, h))
    grads = grad_ssm_conv(g, cache)

    a_bar, b_bar, c = cache.a_bar[0], cache.b_bar[0], cache.c[0]
    u = p["u"][:, 0]
    x = np.zeros(n_half, dtype=complex)
    dx_dabar = np.zeros(n_half, dtype=complex)  # holomorphic sensitivities
    dx_dbbar = np.zeros(n_half, dtype=complex)
    abar_dot = np.zeros(n_half, dtype=complex)
    bbar_dot = np.zeros(n_half, dtype=complex)
    c_dot = np.zeros(n_half, dtype=complex)
    for t in range(length):
        dx_dabar = a_bar * dx_dabar + x
        dx_dbbar = a_bar * dx_dbbar + u[t]
        x = a_bar * x + b_bar * u[t]
        # y_t = 2 Re(sum c x) + d u_t; adjoints of holomorphic params are
        # accumulated as g_t * conj(dy/dparam) with dy/dz = c * dx/dz etc.
        abar_dot += g[t, 0] * 2.0 * np.conj(c * dx_dabar)
        bbar_dot += g[t, 0] * 2.0 * np.conj(c * dx_dbbar)
        c_dot += g[t, 0] * 2.0 * np.conj(x)
    # chain through the bilinear map to the continuous pole and timestep
    dt = cache.dt[0]
    den2 = cache.den[0] * cache.den[0]
    a_hat = abar_dot * np.conj(dt / den2) + bbar_dot * np.conj(dt * dt / (2 * den2))
    ddt = (abar_dot * np.conj(cache.a[0] / den2) + bbar_dot * np.conj(1.0 / den2)).real.sum()
    np.testing.assert_allclose(grads["a_re"][0], a_hat.real, rtol=1e-9)
    np.testing.assert_allclose(grads["a_im"][0], a_hat.imag, rtol=1e-9)
    np.testing.assert_allclose(grads["c_re"][0], c_dot.real, rtol=1e-9)
    np.testing.assert_allclose(grads["c_im"][0], c_dot.imag, rtol=1e-9)
    np.testing.assert_allclose(grads["log_dt"][0], dt * ddt, rtol=1e-9)


def test_softmax_log_loss_fd():
    rng = np.random.default_rng(11)
    params = {"z": rng.standard_normal((5, 3))}
    labels = rng.integers(0, 3, 5)
    for reduction in ("mean", "sum"):
        def build(p, reduction=reduction):
            tape = f64_tape()
            tape.softmax_log_loss(tape.leaf(p["z"], "z"), labels, reduction=reduction)
            return tape

        assert_gradcheck(build, params)


def test_full_mil_model_gradients_match_finite_differences():
    # Every trainable parameter of a small aggregator, multitask loss so the
    # patch head is covered too.
    from s4mil.model import ModelConfig, build_tape, init_parameters

    cfg = ModelConfig(input_dim=8, hidden_dim=4, state_dim=4, num_classes=2,
                      multitask=True, num_patch_classes=2)
    model = init_parameters(cfg, seed=5)
    rng = np.random.default_rng(12)
    features = rng.standard_normal((16, 8))
    patch_labels = rng.integers(0, 2, 16)
    params = {k: v.astype(np.float64) for k, v in model.parameters().items()}

    def build(p):
        bundle = build_tape(cfg, p, features, slide_label=1, patch_labels=patch_labels,
                            lam=5.0, dtype=np.float64)
        return bundle.tape

    worst, failures = check_gradients(build, params)
    assert not failures, "\n".join(failures[:10])
    assert worst <= 1e-4
