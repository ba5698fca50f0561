"""Structured and selective state-space layers.

Conventions
-----------
* Sequences are ``(L, channels)`` arrays; a 1-D array is accepted wherever the
  channel count is 1.
* ``A`` is always diagonal and stored as its diagonal, shape ``(channels, N)``.
  ``B`` and ``C`` are stored per channel with the same shape, so a single-input
  single-output SSM runs independently on every channel.
* Weight matrices act on the right: ``y = x @ W`` with ``W`` shaped ``(in, out)``.

The LTI part (``discretize_zoh``, ``lti_scan_recurrent``, ``build_kernel``,
``lti_forward_convolutional``) is the classical time-invariant model. The
selective part makes ``delta``, ``B`` and ``C`` functions of the input and is
evaluated either step by step or with a Blelloch tree scan. ``mamba_block_*``
wraps it with RMSNorm, short causal convolution, gating and a residual.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import (
    ConfigurationError,
    InvalidInputError,
    InvalidParameterError,
    PreconditionError,
    ShapeError,
    StateError,
    UnsupportedModeError,
)
from .nn import sigmoid, silu, silu_grad, softplus

ScanMode = Literal["sequential", "parallel"]


# --------------------------------------------------------------------------
# LTI SSM
# --------------------------------------------------------------------------


def _as_2d(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be at most 2-D, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class LtiSsmParams:
    """Continuous-time diagonal SSM, one independent system per channel.

    ``delta`` has shape ``(D,)``; ``A``, ``B`` and ``C`` have shape ``(D, N)``
    (``A`` holds the diagonal of the N x N state matrix).
    """

    delta: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A = _as_2d(self.A, "A")
        B = _as_2d(self.B, "B")
        C = _as_2d(self.C, "C")
        delta = np.atleast_1d(np.asarray(self.delta, dtype=np.float64))
        if not (A.shape == B.shape == C.shape):
            raise ShapeError(f"A, B, C shapes differ: {A.shape}, {B.shape}, {C.shape}")
        if delta.shape != (A.shape[0],):
            raise ShapeError(f"delta must have shape ({A.shape[0]},), got {delta.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "delta", delta)

    @classmethod
    def scalar(cls, delta: float, a: float, b: float = 1.0, c: float = 1.0) -> "LtiSsmParams":
        return cls(np.array([delta]), np.array([[a]]), np.array([[b]]), np.array([[c]]))

    @property
    def channels(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    @property
    def is_stable(self) -> bool:
        return bool(np.all(self.A < 0))


@dataclass(frozen=True)
class DiscreteSsmParams:
    """Discrete diagonal SSM: ``A_bar``, ``B_bar``, ``C`` all shaped ``(D, N)``."""

    A_bar: np.ndarray
    B_bar: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A = _as_2d(self.A_bar, "A_bar")
        B = _as_2d(self.B_bar, "B_bar")
        C = _as_2d(self.C, "C")
        if not (A.shape == B.shape == C.shape):
            raise ShapeError(f"A_bar, B_bar, C shapes differ: {A.shape}, {B.shape}, {C.shape}")
        object.__setattr__(self, "A_bar", A)
        object.__setattr__(self, "B_bar", B)
        object.__setattr__(self, "C", C)

    @property
    def channels(self) -> int:
        return self.A_bar.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A_bar.shape[1]


def _zoh_input_coef(dA: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """(dA)^-1 (exp(dA) - 1) * delta for diagonal dA, with the dA -> 0 limit equal to delta."""
    safe = np.where(dA == 0.0, 1.0, dA)
    ratio = np.where(dA == 0.0, 1.0, np.expm1(safe) / safe)
    return ratio * delta


def discretize_zoh(p: LtiSsmParams) -> DiscreteSsmParams:
    """Zero-order-hold discretization of a diagonal SSM."""
    if not all(np.all(np.isfinite(v)) for v in (p.delta, p.A, p.B, p.C)):
        raise InvalidParameterError("SSM parameters contain NaN or Inf")
    if np.any(p.delta <= 0):
        raise PreconditionError(f"delta must be strictly positive, got {p.delta}")
    dA = p.delta[:, None] * p.A
    A_bar = np.exp(dA)
    B_bar = _zoh_input_coef(dA, p.delta[:, None]) * p.B
    return DiscreteSsmParams(A_bar, B_bar, p.C.copy())


def _check_sequence(x, channels: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = False
    if x.ndim == 1:
        if channels != 1:
            raise ShapeError(f"1-D input given but the system has {channels} channels")
        x = x[:, None]
        squeeze = True
    if x.ndim != 2 or x.shape[1] != channels:
        raise ShapeError(f"input must have shape (L, {channels}), got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError("input sequence must have length >= 1")
    return x, squeeze


def lti_scan_recurrent(d: DiscreteSsmParams, x, h0=None) -> tuple[np.ndarray, np.ndarray]:
    """Run ``h_k = A_bar h_{k-1} + B_bar x_k``, ``y_k = C h_k`` left to right.

    Returns ``(y, h_final)``; ``h_final`` has shape ``(D, N)`` and can be passed
    back as ``h0`` to continue the stream.
    """
    x, squeeze = _check_sequence(x, d.channels)
    h = np.zeros((d.channels, d.state_dim)) if h0 is None else np.array(h0, dtype=np.float64)
    if h.shape != (d.channels, d.state_dim):
        raise ShapeError(f"h0 must have shape {(d.channels, d.state_dim)}, got {h.shape}")
    if not np.all(np.isfinite(h)):
        raise InvalidInputError("h0 must be finite")
    y = np.empty_like(x)
    for k in range(x.shape[0]):
        h = d.A_bar * h + d.B_bar * x[k][:, None]
        y[k] = np.sum(d.C * h, axis=1)
    return (y[:, 0] if squeeze else y), h


def build_kernel(d: DiscreteSsmParams, L: int) -> np.ndarray:
    """Convolution kernel ``K[k, c] = C_c A_bar_c^k B_bar_c`` for ``k < L``; shape ``(L, D)``."""
    if L < 1:
        raise PreconditionError("kernel length must be >= 1")
    powers = d.A_bar[None, :, :] ** np.arange(L)[:, None, None]
    return np.sum(d.C * d.B_bar * powers, axis=2)


def lti_forward_convolutional(d: DiscreteSsmParams, x, h0=None, kernel: np.ndarray | None = None) -> np.ndarray:
    """Evaluate the LTI SSM as a causal convolution ``y = x * K`` (zero initial state only)."""
    if h0 is not None and np.any(np.asarray(h0) != 0):
        raise UnsupportedModeError("the convolutional form only supports a zero initial state")
    x, squeeze = _check_sequence(x, d.channels)
    L = x.shape[0]
    K = build_kernel(d, L) if kernel is None else np.asarray(kernel, dtype=np.float64)
    if K.shape != (L, d.channels):
        raise ShapeError(f"kernel must have shape {(L, d.channels)}, got {K.shape}")
    y = np.empty_like(x)
    for c in range(d.channels):
        y[:, c] = np.convolve(x[:, c], K[:, c])[:L]
    return y[:, 0] if squeeze else y


# --------------------------------------------------------------------------
# Selective SSM
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectiveWeights:
    """Projections that make ``delta``, ``B`` and ``C`` depend on the input.

    ``x_proj`` (E, R + 2N) maps an input vector to ``[dt_low | B | C]``;
    ``dt_proj`` (R, E) and ``dt_bias`` (E,) lift the rank-R ``dt_low`` back to
    one time scale per channel. ``A_log`` (E, N) parameterizes ``A = -exp(A_log)``
    so the diagonal stays strictly negative.
    """

    x_proj: np.ndarray
    dt_proj: np.ndarray
    dt_bias: np.ndarray
    A_log: np.ndarray

    @property
    def d_inner(self) -> int:
        return self.A_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    @property
    def dt_rank(self) -> int:
        return self.dt_proj.shape[0]

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.A_log)


def init_selective(d_inner: int, d_state: int, dt_rank: int, rng: np.random.Generator,
                   dt_min: float = 1e-3, dt_max: float = 1e-1) -> SelectiveWeights:
    """S4D-real style init: ``A = -(1..N)`` per channel, initial delta log-uniform in [dt_min, dt_max]."""
    x_proj = rng.normal(0.0, d_inner ** -0.5, size=(d_inner, dt_rank + 2 * d_state))
    bound = dt_rank ** -0.5
    dt_proj = rng.uniform(-bound, bound, size=(dt_rank, d_inner))
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_inner))
    dt_bias = dt + np.log(-np.expm1(-dt))  # inverse softplus
    A_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1)))
    return SelectiveWeights(x_proj, dt_proj, dt_bias, A_log)


def selective_parameterize(x, w: SelectiveWeights) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Input-dependent ``(delta, B, C)`` for a vector ``(E,)`` or a sequence ``(L, E)``.

    ``delta = softplus(dt_low @ dt_proj + dt_bias)`` is strictly positive for any
    finite input.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.d_inner:
        raise ShapeError(f"input last dim must be {w.d_inner}, got {x.shape}")
    if np.isnan(x).any():
        raise InvalidInputError("NaN in selective SSM input")
    R, N = w.dt_rank, w.d_state
    proj = x @ w.x_proj
    delta = softplus(proj[..., :R] @ w.dt_proj + w.dt_bias)
    return delta, proj[..., R:R + N], proj[..., R + N:]


def _input_coef(delta, A, Bm, zoh_b: bool):
    """B_bar for every (t, e, n): Euler ``delta * B`` or full ZOH ``expm1(delta A) / A * B``."""
    if zoh_b:
        return np.expm1(delta[..., :, None] * A) / A * Bm[..., None, :]
    return delta[..., :, None] * Bm[..., None, :]


def _scan_sequential(a: np.ndarray, b: np.ndarray, h0: np.ndarray) -> np.ndarray:
    hs = np.empty_like(b)
    h = h0
    for t in range(a.shape[0]):
        h = a[t] * h + b[t]
        hs[t] = h
    return hs


def _scan_blelloch(a: np.ndarray, b: np.ndarray, h0: np.ndarray) -> np.ndarray:
    """Inclusive scan of ``h_t = a_t h_{t-1} + b_t`` via up-sweep / down-sweep.

    Elements are pairs (a, b) with combine ``(a1, b1) o (a2, b2) = (a2 a1, a2 b1 + b2)``
    (first 1 then 2). The length is padded to a power of two with the identity (1, 0).
    """
    L = a.shape[0]
    n = 1 << max(L - 1, 0).bit_length()
    A = np.ones((n,) + a.shape[1:], dtype=a.dtype)
    B = np.zeros((n,) + b.shape[1:], dtype=b.dtype)
    A[:L] = a
    B[:L] = b
    B[0] = a[0] * h0 + b[0]
    A[0] = 1.0
    # up-sweep: node r accumulates the total of its subtree
    stride = 1
    while stride < n:
        left = slice(stride - 1, n, 2 * stride)
        right = slice(2 * stride - 1, n, 2 * stride)
        B[right] = A[right] * B[left] + B[right]
        A[right] = A[right] * A[left]
        stride *= 2
    # down-sweep: turn subtree totals into exclusive prefixes
    A[n - 1] = 1.0
    B[n - 1] = 0.0
    stride = n // 2
    while stride >= 1:
        left = slice(stride - 1, n, 2 * stride)
        right = slice(2 * stride - 1, n, 2 * stride)
        tA = A[left].copy()
        tB = B[left].copy()
        A[left] = A[right]
        B[left] = B[right]
        B[right] = tA * B[right] + tB
        A[right] = tA * A[right]
        stride //= 2
    # exclusive prefix applied to a zero initial state is B; fold in element t
    a_eff = a.copy()
    a_eff[0] = 1.0
    b_eff = b.copy()
    b_eff[0] = a[0] * h0 + b[0]
    return a_eff * B[:L] + b_eff


def linear_recurrence(a: np.ndarray, b: np.ndarray, h0: np.ndarray | None = None,
                      mode: ScanMode = "sequential") -> np.ndarray:
    """All states of ``h_t = a_t * h_{t-1} + b_t`` (elementwise), shape like ``b``."""
    if h0 is None:
        h0 = np.zeros(b.shape[1:], dtype=b.dtype)
    if mode == "sequential":
        return _scan_sequential(a, b, h0)
    if mode == "parallel":
        return _scan_blelloch(a, b, h0)
    raise ConfigurationError(f"unknown scan mode {mode!r}; expected 'sequential' or 'parallel'")


@dataclass(frozen=True)
class SsmState:
    """Recurrent state of one mamba layer: SSM hidden state plus conv window.

    ``h`` is ``(E, N)``; ``conv_buffer`` is ``(E, w - 1)`` holding the last
    ``w - 1`` conv inputs, oldest first. The size never depends on how many
    steps have been taken.
    """

    h: np.ndarray
    conv_buffer: np.ndarray

    @classmethod
    def zeros(cls, d_inner: int, d_state: int, conv_width: int, dtype=np.float64) -> "SsmState":
        return cls(np.zeros((d_inner, d_state), dtype=dtype),
                   np.zeros((d_inner, conv_width - 1), dtype=dtype))

    @property
    def nbytes(self) -> int:
        return self.h.nbytes + self.conv_buffer.nbytes

    def to_bytes(self) -> bytes:
        return self.h.tobytes() + self.conv_buffer.tobytes()


def _state_h(h0, w: SelectiveWeights) -> np.ndarray:
    if h0 is None:
        return np.zeros((w.d_inner, w.d_state))
    h = h0.h if isinstance(h0, SsmState) else np.asarray(h0, dtype=np.float64)
    if h.shape != (w.d_inner, w.d_state):
        raise StateError(f"state must have shape {(w.d_inner, w.d_state)}, got {h.shape}")
    return h


def selective_scan(x, w: SelectiveWeights, mode: ScanMode = "sequential", h0=None, *,
                   zoh_b: bool = False, dtype=np.float64,
                   return_states: bool = False):
    """Selective SSM over a sequence ``x`` of shape ``(L, E)``.

    ``mode`` only picks the execution strategy; both give the same result up to
    rounding. Returns ``(y, h_final)``, or ``(y, h_final, hs)`` with every state
    when ``return_states`` is set.
    """
    if mode not in ("sequential", "parallel"):
        raise ConfigurationError(f"unknown scan mode {mode!r}; expected 'sequential' or 'parallel'")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"selective_scan expects a non-empty (L, E) sequence, got {x.shape}")
    h0 = _state_h(h0, w)
    delta, Bm, Cm = selective_parameterize(x, w)
    A = w.A
    a_bar = np.exp(delta[:, :, None] * A).astype(dtype)
    bu = (_input_coef(delta, A, Bm, zoh_b) * x[:, :, None]).astype(dtype)
    hs = linear_recurrence(a_bar, bu, h0.astype(dtype), mode)
    y = np.einsum("len,ln->le", hs, Cm.astype(dtype))
    if return_states:
        return y, hs[-1], hs
    return y, hs[-1]


def ssm_step(state, x_t, w: SelectiveWeights, *, zoh_b: bool = False):
    """One recurrence step with input-dependent parameters.

    ``state`` is an :class:`SsmState` (only ``h`` is touched) or a bare ``(E, N)``
    array; the return value mirrors the type given.
    """
    h = _state_h(state, w)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (w.d_inner,):
        raise ShapeError(f"x_t must have shape ({w.d_inner},), got {x_t.shape}")
    delta, Bm, Cm = selective_parameterize(x_t, w)
    A = w.A
    a_bar = np.exp(delta[:, None] * A)
    h = a_bar * h + _input_coef(delta, A, Bm, zoh_b) * x_t[:, None]
    y = np.einsum("en,n->e", h, Cm)
    if isinstance(state, SsmState):
        return y, dataclasses.replace(state, h=h)
    return y, h


def _selective_scan_backward(x, w: SelectiveWeights, hs, h0, dy, zoh_b: bool):
    """Gradients of ``selective_scan`` w.r.t. its input and weights, given dL/dy."""
    R, N = w.dt_rank, w.d_state
    proj = x @ w.x_proj
    dt_low, Bm, Cm = proj[:, :R], proj[:, R:R + N], proj[:, R + N:]
    dt_raw = dt_low @ w.dt_proj + w.dt_bias
    delta = softplus(dt_raw)
    A = w.A
    dA = delta[:, :, None] * A
    a_bar = np.exp(dA)
    b_coef = _input_coef(delta, A, Bm, zoh_b)

    dCm = np.einsum("le,len->ln", dy, hs)
    direct = dy[:, :, None] * Cm[:, None, :]
    # adjoint recurrence g_t = a_{t+1} g_{t+1} + direct_t, run as a reversed scan
    a_next = np.empty_like(a_bar)
    a_next[:-1] = a_bar[1:]
    a_next[-1] = 0.0
    g = linear_recurrence(a_next[::-1], direct[::-1], mode="parallel")[::-1]

    h_prev = np.concatenate([h0[None], hs[:-1]], axis=0)
    d_dA = g * h_prev * a_bar
    d_bcoef = g * x[:, :, None]
    du = np.sum(g * b_coef, axis=2)

    d_delta = np.sum(d_dA * A, axis=2)
    dA_total = np.sum(d_dA * delta[:, :, None], axis=0)
    if zoh_b:
        em1 = np.expm1(dA)
        d_delta += np.sum(d_bcoef * a_bar * Bm[:, None, :], axis=2)
        dA_total += np.sum(d_bcoef * Bm[:, None, :] * (dA * a_bar - em1) / (A * A), axis=0)
        dBm = np.sum(d_bcoef * em1 / A, axis=1)
    else:
        d_delta += np.sum(d_bcoef * Bm[:, None, :], axis=2)
        dBm = np.sum(d_bcoef * delta[:, :, None], axis=1)

    d_raw = d_delta * sigmoid(dt_raw)
    grads = SelectiveWeights(
        x_proj=None, dt_proj=dt_low.T @ d_raw, dt_bias=d_raw.sum(axis=0), A_log=dA_total * A,
    )
    d_proj = np.concatenate([d_raw @ w.dt_proj.T, dBm, dCm], axis=1)
    du += d_proj @ w.x_proj.T
    return du, dataclasses.replace(grads, x_proj=x.T @ d_proj)


# --------------------------------------------------------------------------
# Block components
# --------------------------------------------------------------------------


def rms_norm(x, gain, eps: float = 1e-5) -> np.ndarray:
    """``gain * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if x.shape[-1] != gain.shape[-1] or gain.ndim != 1:
        raise ShapeError(f"rms_norm gain shape {gain.shape} does not match input {x.shape}")
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return gain * x * r


def _rms_norm_backward(x, gain, eps, dout):
    n = x.shape[-1]
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    gd = gain * dout
    dx = r * gd - x * r ** 3 * np.sum(gd * x, axis=-1, keepdims=True) / n
    dgain = np.sum((dout * x * r).reshape(-1, n), axis=0)
    return dx, dgain


def causal_conv1d(x, kernel, bias=None) -> np.ndarray:
    """Depthwise causal convolution, zero left padding.

    ``x`` is ``(L, E)`` and ``kernel`` ``(E, w)``; the last tap multiplies the
    current input, so ``y_t`` depends on ``x_{t-w+1..t}`` only.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if kernel.ndim == 1:
        kernel = kernel[None, :]
    if kernel.ndim != 2 or kernel.shape[0] != x.shape[1] or kernel.shape[1] < 1:
        raise ShapeError(f"kernel shape {kernel.shape} incompatible with input {x.shape}")
    L, width = x.shape[0], kernel.shape[1]
    xpad = np.concatenate([np.zeros((width - 1, x.shape[1])), x], axis=0)
    y = np.zeros_like(x)
    for j in range(width):
        y += kernel[:, j] * xpad[j:j + L]
    if bias is not None:
        y = y + bias
    return y[:, 0] if squeeze else y


def conv_step(buffer, x_t, kernel, bias=None) -> tuple[np.ndarray, np.ndarray]:
    """Streaming form of :func:`causal_conv1d`. ``buffer`` is ``(E, w-1)``, oldest first."""
    buffer = np.asarray(buffer, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim == 1:
        kernel = kernel[None, :]
        buffer = buffer.reshape(1, -1)
        x_t = x_t.reshape(1)
    if buffer.shape != (kernel.shape[0], kernel.shape[1] - 1) or x_t.shape != (kernel.shape[0],):
        raise ShapeError(f"conv buffer {buffer.shape} / input {x_t.shape} do not match kernel {kernel.shape}")
    window = np.concatenate([buffer, x_t[:, None]], axis=1)
    y = np.zeros(kernel.shape[0])
    for j in range(kernel.shape[1]):
        y += kernel[:, j] * window[:, j]
    if bias is not None:
        y = y + bias
    return y, window[:, 1:]


@dataclass(frozen=True)
class MambaBlockWeights:
    norm: np.ndarray          # (D,)
    in_proj: np.ndarray       # (D, 2E)  -> [ssm branch | gate branch]
    conv_weight: np.ndarray   # (E, w)
    conv_bias: np.ndarray     # (E,)
    ssm: SelectiveWeights
    out_proj: np.ndarray      # (E, D)

    @property
    def d_model(self) -> int:
        return self.norm.shape[0]

    @property
    def d_inner(self) -> int:
        return self.conv_weight.shape[0]

    @property
    def conv_width(self) -> int:
        return self.conv_weight.shape[1]

    def new_state(self) -> SsmState:
        return SsmState.zeros(self.d_inner, self.ssm.d_state, self.conv_width)


def init_mamba_block(d_model: int, d_state: int = 16, expand: int = 2, conv_width: int = 4,
                     dt_rank: int | None = None, rng: np.random.Generator | None = None) -> MambaBlockWeights:
    rng = np.random.default_rng(0) if rng is None else rng
    E = expand * d_model
    R = dt_rank or max(1, -(-d_model // 16))
    cb = conv_width ** -0.5
    return MambaBlockWeights(
        norm=np.ones(d_model),
        in_proj=rng.normal(0.0, d_model ** -0.5, size=(d_model, 2 * E)),
        conv_weight=rng.uniform(-cb, cb, size=(E, conv_width)),
        conv_bias=rng.uniform(-cb, cb, size=E),
        ssm=init_selective(E, d_state, R, rng),
        out_proj=rng.normal(0.0, E ** -0.5, size=(E, d_model)),
    )


NORM_EPS = 1e-5


def mamba_block_forward(x, blk: MambaBlockWeights, *, mode: ScanMode = "parallel",
                        zoh_b: bool = False, return_cache: bool = False):
    """Pre-norm residual mamba block over a ``(L, D)`` sequence.

    ``out = x + (SSM(silu(conv(xn @ W_a))) * silu(xn @ W_b)) @ W_out`` with
    ``xn = rms_norm(x)``. With ``return_cache`` the intermediates needed by the
    backward pass and the final :class:`SsmState` are returned as well.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != blk.d_model:
        raise ShapeError(f"block input must be (L, {blk.d_model}), got {x.shape}")
    E = blk.d_inner
    xn = rms_norm(x, blk.norm, NORM_EPS)
    xz = xn @ blk.in_proj
    xa, z = xz[:, :E], xz[:, E:]
    xc = causal_conv1d(xa, blk.conv_weight, blk.conv_bias)
    u = silu(xc)
    y, h_last, hs = selective_scan(u, blk.ssm, mode, zoh_b=zoh_b, return_states=True)
    gate = silu(z)
    out = x + (y * gate) @ blk.out_proj
    if not return_cache:
        return out
    w = blk.conv_width
    tail = np.concatenate([np.zeros((w - 1, E)), xa], axis=0)[-(w - 1):] if w > 1 else np.zeros((0, E))
    state = SsmState(h_last, tail.T.copy())
    cache = dict(x=x, xn=xn, xa=xa, z=z, xc=xc, u=u, y=y, hs=hs, gate=gate, zoh_b=zoh_b)
    return out, cache, state


def mamba_block_backward(blk: MambaBlockWeights, cache: dict, dout: np.ndarray):
    """Backward pass of :func:`mamba_block_forward`. Returns ``(dx, grads)``.

    ``grads`` is a :class:`MambaBlockWeights` holding the gradient of every weight.
    """
    E, w = blk.d_inner, blk.conv_width
    v = cache["y"] * cache["gate"]
    d_out_proj = v.T @ dout
    dv = dout @ blk.out_proj.T
    dy = dv * cache["gate"]
    dz = dv * cache["y"] * silu_grad(cache["z"])

    u = cache["u"]
    du, g_ssm = _selective_scan_backward(u, blk.ssm, cache["hs"], np.zeros((E, blk.ssm.d_state)),
                                         dy, cache["zoh_b"])
    dxc = du * silu_grad(cache["xc"])

    L = dxc.shape[0]
    xpad = np.concatenate([np.zeros((w - 1, E)), cache["xa"]], axis=0)
    d_conv = np.empty_like(blk.conv_weight)
    dxpad = np.zeros_like(xpad)
    for j in range(w):
        d_conv[:, j] = np.sum(dxc * xpad[j:j + L], axis=0)
        dxpad[j:j + L] += blk.conv_weight[:, j] * dxc
    dxa = dxpad[w - 1:]

    dxz = np.concatenate([dxa, dz], axis=1)
    d_in_proj = cache["xn"].T @ dxz
    dxn = dxz @ blk.in_proj.T
    dx_norm, d_norm = _rms_norm_backward(cache["x"], blk.norm, NORM_EPS, dxn)
    grads = MambaBlockWeights(
        norm=d_norm, in_proj=d_in_proj, conv_weight=d_conv, conv_bias=dxc.sum(axis=0),
        ssm=g_ssm, out_proj=d_out_proj,
    )
    return dout + dx_norm, grads


def mamba_block_step(state: SsmState, x_t, blk: MambaBlockWeights, *, zoh_b: bool = False):
    """Single-token streaming form of :func:`mamba_block_forward`. Returns ``(out_t, new_state)``."""
    if not isinstance(state, SsmState):
        raise StateError("mamba_block_step needs an SsmState")
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (blk.d_model,):
        raise ShapeError(f"x_t must have shape ({blk.d_model},), got {x_t.shape}")
    if state.h.shape != (blk.d_inner, blk.ssm.d_state) or state.conv_buffer.shape != (blk.d_inner, blk.conv_width - 1):
        raise StateError("state shape does not match this block's configuration")
    E = blk.d_inner
    xn = rms_norm(x_t, blk.norm, NORM_EPS)
    xz = xn @ blk.in_proj
    xc, buffer = conv_step(state.conv_buffer, xz[:E], blk.conv_weight, blk.conv_bias)
    y, h = ssm_step(state.h, silu(xc), blk.ssm, zoh_b=zoh_b)
    out = x_t + (y * silu(xz[E:])) @ blk.out_proj
    return out, SsmState(h, buffer)
