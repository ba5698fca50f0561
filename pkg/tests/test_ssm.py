import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cobra_ssm.errors import (
    ConfigurationError,
    InvalidInputError,
    InvalidParameterError,
    PreconditionError,
    ShapeError,
    UnsupportedModeError,
)
from cobra_ssm.nn import softplus
from cobra_ssm.ssm import (
    DiscreteSsmParams,
    LtiSsmParams,
    SsmState,
    build_kernel,
    causal_conv1d,
    conv_step,
    discretize_zoh,
    init_mamba_block,
    init_selective,
    linear_recurrence,
    lti_forward_convolutional,
    lti_scan_recurrent,
    mamba_block_backward,
    mamba_block_forward,
    mamba_block_step,
    rms_norm,
    selective_parameterize,
    selective_scan,
    ssm_step,
)
from cobra_ssm.verify import numeric_gradient, random_stable_lti, relative_error


def scalar_discrete(a_bar, b_bar, c=1.0):
    return DiscreteSsmParams(np.array([[a_bar]]), np.array([[b_bar]]), np.array([[c]]))


# ---------------------------------------------------------------- discretization


def test_zoh_zero_a_limit():
    d = discretize_zoh(LtiSsmParams.scalar(1.0, 0.0, 1.0))
    assert d.A_bar[0, 0] == 1.0
    assert d.B_bar[0, 0] == 1.0


def test_zoh_unit_decay():
    d = discretize_zoh(LtiSsmParams.scalar(1.0, -1.0, 1.0))
    assert d.A_bar[0, 0] == pytest.approx(0.367879, abs=1e-6)
    assert d.B_bar[0, 0] == pytest.approx(0.632121, abs=1e-6)


def _held_input_integral(delta, a, b):
    # state after holding u=1 for delta seconds from h=0: int_0^delta e^{a s} b ds
    mpmath.mp.dps = 40
    return float(mpmath.quad(lambda s: mpmath.exp(a * s) * b, [0, delta]))


def test_zoh_matches_numerical_integration():
    d = discretize_zoh(LtiSsmParams.scalar(0.5, -2.0, 1.0))
    assert d.A_bar[0, 0] == pytest.approx(math.exp(-1), abs=1e-12)
    assert d.B_bar[0, 0] == pytest.approx(0.316060, abs=1e-6)
    assert d.B_bar[0, 0] == pytest.approx(_held_input_integral(0.5, -2.0, 1.0), abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-4, 3.0), st.floats(-20.0, -1e-6), st.floats(-5.0, 5.0))
def test_zoh_scalar_closed_form(delta, a, b):
    d = discretize_zoh(LtiSsmParams.scalar(delta, a, b))
    assert d.A_bar[0, 0] == pytest.approx(math.exp(delta * a), abs=1e-12)
    assert d.B_bar[0, 0] == pytest.approx(math.expm1(delta * a) / a * b, abs=1e-12)


def test_zoh_small_delta_a_is_accurate():
    # expm1(x)/x must not lose digits as x -> 0
    d = discretize_zoh(LtiSsmParams.scalar(1e-9, -1e-6, 1.0))
    assert d.B_bar[0, 0] == pytest.approx(_held_input_integral(1e-9, -1e-6, 1.0), rel=1e-12)


def test_zoh_rejects_bad_parameters():
    with pytest.raises(PreconditionError):
        discretize_zoh(LtiSsmParams.scalar(0.0, -1.0))
    with pytest.raises(InvalidParameterError):
        discretize_zoh(LtiSsmParams.scalar(1.0, float("nan")))


def test_zoh_matches_euler_to_second_order():
    p = LtiSsmParams.scalar(0.2, -1.3, 0.8)
    errs = []
    for k in range(5):
        delta = 0.2 / 2 ** k
        d = discretize_zoh(LtiSsmParams.scalar(delta, -1.3, 0.8))
        errs.append(abs(d.A_bar[0, 0] - (1 + delta * p.A[0, 0])) + abs(d.B_bar[0, 0] - delta * 0.8))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios > 3.5) & (ratios < 4.5))


# ---------------------------------------------------------------- LTI forms


def test_recurrent_zero_input():
    rng = np.random.default_rng(0)
    d = discretize_zoh(random_stable_lti(rng))
    y, h = lti_scan_recurrent(d, np.zeros((10, d.channels)))
    assert not y.any() and not h.any()


def test_recurrent_hand_example():
    y, h = lti_scan_recurrent(scalar_discrete(0.5, 1.0), np.ones(3))
    np.testing.assert_allclose(y, [1.0, 1.5, 1.75], atol=1e-15)
    assert h[0, 0] == pytest.approx(1.75)
    # independent scripted recurrence
    hh, ys = 0.0, []
    for xt in (1.0, 1.0, 1.0):
        hh = 0.5 * hh + xt
        ys.append(hh)
    np.testing.assert_allclose(y, ys)


def test_impulse_response_is_kernel():
    rng = np.random.default_rng(1)
    d = discretize_zoh(random_stable_lti(rng))
    x = np.zeros((20, d.channels))
    x[0] = 1.0
    y, _ = lti_scan_recurrent(d, x)
    np.testing.assert_allclose(y, build_kernel(d, 20), atol=1e-14)


def test_kernel_examples():
    np.testing.assert_allclose(build_kernel(scalar_discrete(0.5, 1.0, 2.0), 3)[:, 0], [2.0, 1.0, 0.5])
    d = discretize_zoh(LtiSsmParams.scalar(1.0, -1.0, 1.0))
    np.testing.assert_allclose(build_kernel(d, 2)[:, 0], [0.632121, 0.232544], atol=1e-6)
    # oracle: repeated multiplication
    a, b = d.A_bar[0, 0], d.B_bar[0, 0]
    assert build_kernel(d, 2)[1, 0] == pytest.approx(a * b, abs=1e-15)


def test_kernel_first_entry_is_cb():
    rng = np.random.default_rng(2)
    d = discretize_zoh(random_stable_lti(rng))
    np.testing.assert_allclose(build_kernel(d, 1)[0], np.sum(d.C * d.B_bar, axis=1))
    with pytest.raises(PreconditionError):
        build_kernel(d, 0)


def test_convolutional_examples():
    rng = np.random.default_rng(3)
    d = discretize_zoh(random_stable_lti(rng))
    assert not lti_forward_convolutional(d, np.zeros((8, d.channels))).any()
    x = np.zeros((8, d.channels))
    x[0] = 1.0
    np.testing.assert_allclose(lti_forward_convolutional(d, x), build_kernel(d, 8), atol=1e-15)
    with pytest.raises(UnsupportedModeError):
        lti_forward_convolutional(d, x, h0=np.ones((d.channels, d.state_dim)))


def test_convolutional_matches_recurrent_scalar():
    d = discretize_zoh(LtiSsmParams.scalar(0.3, -0.7, 1.2, -0.4))
    x = np.random.default_rng(4).normal(size=64)
    y_rec, _ = lti_scan_recurrent(d, x)
    assert np.max(np.abs(lti_forward_convolutional(d, x) - y_rec)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([1, 64, 257]))
def test_lti_forms_agree(seed, L):
    rng = np.random.default_rng(seed)
    d = discretize_zoh(random_stable_lti(rng))
    x = rng.normal(size=(L, d.channels))
    y_rec, _ = lti_scan_recurrent(d, x)
    assert np.max(np.abs(lti_forward_convolutional(d, x) - y_rec)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_discrete_stability(seed):
    p = random_stable_lti(np.random.default_rng(seed))
    assert p.is_stable
    assert np.all(np.abs(discretize_zoh(p).A_bar) < 1)


# ---------------------------------------------------------------- selective SSM


def _weights(E=4, N=3, R=2, seed=0):
    return init_selective(E, N, R, np.random.default_rng(seed))


def test_parameterize_zero_input():
    w = _weights()
    w0 = type(w)(w.x_proj, w.dt_proj, np.zeros_like(w.dt_bias), w.A_log)
    delta, B, C = selective_parameterize(np.zeros(w.d_inner), w0)
    np.testing.assert_allclose(delta, math.log(2))
    assert not B.any() and not C.any()
    w10 = type(w)(w.x_proj, w.dt_proj, np.full_like(w.dt_bias, -10.0), w.A_log)
    delta, _, _ = selective_parameterize(np.zeros(w.d_inner), w10)
    np.testing.assert_allclose(delta, 4.54e-5, rtol=1e-3)
    assert softplus(-10.0) == pytest.approx(math.log1p(math.exp(-10.0)))


def test_delta_positive_on_random_draws():
    w = _weights(E=8)
    x = np.random.default_rng(5).normal(scale=30, size=(100_000 // 8, 8))
    delta, _, _ = selective_parameterize(x, w)
    assert np.all(delta > 0)


def test_parameterize_rejects_nan_and_bad_shape():
    w = _weights()
    with pytest.raises(InvalidInputError):
        selective_parameterize(np.full(w.d_inner, np.nan), w)
    with pytest.raises(ShapeError):
        selective_parameterize(np.zeros(w.d_inner + 1), w)


def test_scan_single_element_identical():
    w = _weights()
    x = np.random.default_rng(6).normal(size=(1, w.d_inner))
    y_s, h_s = selective_scan(x, w, "sequential")
    y_p, h_p = selective_scan(x, w, "parallel")
    assert np.array_equal(y_s, y_p) and np.array_equal(h_s, h_p)


def test_scan_zero_input():
    w = _weights()
    for mode in ("sequential", "parallel"):
        y, h = selective_scan(np.zeros((9, w.d_inner)), w, mode)
        assert not y.any() and not h.any()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 600), st.booleans())
def test_scan_modes_agree(seed, L, zoh_b):
    rng = np.random.default_rng(seed)
    w = init_selective(int(rng.integers(1, 6)), int(rng.integers(1, 6)), 1, rng)
    x = rng.normal(size=(L, w.d_inner))
    h0 = rng.normal(size=(w.d_inner, w.d_state))
    y_s, h_s = selective_scan(x, w, "sequential", h0, zoh_b=zoh_b)
    y_p, h_p = selective_scan(x, w, "parallel", h0, zoh_b=zoh_b)
    assert np.max(np.abs(y_s - y_p)) < 1e-5
    assert np.max(np.abs(h_s - h_p)) < 1e-5


def test_scan_modes_agree_long_non_power_of_two():
    w = _weights(E=4, N=4)
    x = np.random.default_rng(7).normal(size=(4095, 4))
    y_s, _ = selective_scan(x, w, "sequential")
    y_p, _ = selective_scan(x, w, "parallel")
    assert np.max(np.abs(y_s - y_p)) < 1e-5


def test_linear_recurrence_unknown_mode():
    with pytest.raises(ConfigurationError):
        linear_recurrence(np.ones((2, 1)), np.ones((2, 1)), mode="fft")


def test_step_matches_scan():
    w = _weights(E=5, N=4)
    x = np.random.default_rng(8).normal(size=(16, 5))
    y_ref, h_ref = selective_scan(x, w, "sequential")
    h = np.zeros((5, 4))
    rows = []
    for t in range(16):
        y, h = ssm_step(h, x[t], w)
        rows.append(y)
    assert np.max(np.abs(np.array(rows) - y_ref)) < 1e-10
    assert np.max(np.abs(h - h_ref)) < 1e-10


def test_step_zero_input_zero_state():
    w = _weights()
    st0 = SsmState.zeros(w.d_inner, w.d_state, 4)
    y, st1 = ssm_step(st0, np.zeros(w.d_inner), w)
    assert not y.any() and not st1.h.any()
    assert st1.nbytes == st0.nbytes


def test_state_size_constant():
    w = _weights(E=3, N=2)
    st1 = SsmState.zeros(3, 2, 4)
    _, s = ssm_step(st1, np.ones(3), w)
    size1 = len(s.to_bytes())
    rng = np.random.default_rng(9)
    for _ in range(4095):
        _, s = ssm_step(s, rng.normal(size=3), w)
    assert len(s.to_bytes()) == size1


def test_float32_scan_is_close():
    w = _weights(E=4, N=4)
    x = np.random.default_rng(10).normal(size=(64, 4))
    y64, _ = selective_scan(x, w, "parallel")
    y32, _ = selective_scan(x, w, "parallel", dtype=np.float32)
    assert y32.dtype == np.float32
    assert np.max(np.abs(y32 - y64)) < 1e-4


# ---------------------------------------------------------------- block pieces


def test_rms_norm_examples():
    np.testing.assert_allclose(rms_norm(np.ones(5), np.ones(5), 0.0), np.ones(5))
    np.testing.assert_allclose(rms_norm(np.array([3.0, 4.0]), np.ones(2), 0.0), [0.848528, 1.131371], atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-3, 1e3))
def test_rms_norm_scale_invariant(seed, c):
    x = np.random.default_rng(seed).normal(size=(3, 7))
    g = np.ones(7)
    np.testing.assert_allclose(rms_norm(c * x, g, 0.0), rms_norm(x, g, 0.0), rtol=1e-10, atol=1e-12)


def test_conv_examples():
    x = np.random.default_rng(11).normal(size=12)
    np.testing.assert_array_equal(causal_conv1d(x, np.array([0.0, 0.0, 0.0, 1.0])), x)
    np.testing.assert_allclose(causal_conv1d(np.array([2.0, 4.0]), np.array([0.5, 0.5])), [1.0, 3.0])


def test_conv_streaming_matches_batch():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(64, 3))
    k = rng.normal(size=(3, 4))
    bias = rng.normal(size=3)
    ref = causal_conv1d(x, k, bias)
    buf = np.zeros((3, 3))
    for t in range(64):
        y, buf = conv_step(buf, x[t], k, bias)
        assert np.max(np.abs(y - ref[t])) < 1e-12


def test_block_zero_weights_is_identity():
    blk = init_mamba_block(6, 3)
    blk = type(blk)(blk.norm, blk.in_proj, blk.conv_weight, blk.conv_bias, blk.ssm, np.zeros_like(blk.out_proj))
    x = np.random.default_rng(13).normal(size=(10, 6))
    np.testing.assert_array_equal(mamba_block_forward(x, blk), x)


@pytest.mark.parametrize("zoh_b", [False, True])
def test_block_streaming_matches_batch(zoh_b):
    rng = np.random.default_rng(14)
    blk = init_mamba_block(8, 4, rng=rng)
    x = rng.normal(size=(64, 8))
    ref = mamba_block_forward(x, blk, zoh_b=zoh_b)
    state = blk.new_state()
    for t in range(64):
        y, state = mamba_block_step(state, x[t], blk, zoh_b=zoh_b)
        assert np.max(np.abs(y - ref[t])) < 1e-6


def test_block_final_state_resumes_stream():
    rng = np.random.default_rng(15)
    blk = init_mamba_block(4, 2, rng=rng)
    x = rng.normal(size=(20, 4))
    ref = mamba_block_forward(x, blk)
    _, _, state = mamba_block_forward(x[:12], blk, return_cache=True)
    for t in range(12, 20):
        y, state = mamba_block_step(state, x[t], blk)
        assert np.max(np.abs(y - ref[t])) < 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1.0, 1e3))
def test_block_finite_for_large_inputs(seed, scale):
    rng = np.random.default_rng(seed)
    blk = init_mamba_block(4, 4, rng=rng)
    out = mamba_block_forward(rng.uniform(-scale, scale, size=(32, 4)), blk)
    assert np.all(np.isfinite(out))


@pytest.mark.parametrize("zoh_b", [False, True])
def test_block_gradient_matches_finite_differences(zoh_b):
    from cobra_ssm.nn import flatten, unflatten

    rng = np.random.default_rng(16)
    blk = init_mamba_block(3, 2, rng=rng)
    x = rng.normal(size=(7, 3))
    r = rng.normal(size=(7, 3))

    def loss(p):
        b = unflatten(blk, p)
        return float(np.sum(mamba_block_forward(p["x"], b, zoh_b=zoh_b) * r))

    _, cache, _ = mamba_block_forward(x, blk, zoh_b=zoh_b, return_cache=True)
    dx, grads = mamba_block_backward(blk, cache, r)
    analytic = {**flatten(grads), "x": dx}
    params = {**flatten(blk), "x": x}
    numeric = numeric_gradient(loss, params, list(analytic))
    for k in analytic:
        assert relative_error(analytic[k], numeric[k]) < 1e-4, k
