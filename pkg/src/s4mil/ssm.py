"""Diagonal state space mathematics.

A channel is a single-input single-output linear system with a diagonal
(complex) state matrix.  Continuous parameters (a, c, d, log_dt) are
discretized to (a_bar, b_bar) by either the bilinear map or zero-order hold,
after which the channel can be evaluated two ways:

  * recurrence:   x_t = a_bar * x_{t-1} + b_bar * u_t,
                  y_t = 2 Re(c . x_t) + d u_t
  * convolution:  y = K * u + d u   with   K_l = 2 Re(sum_k c_k a_bar_k^l b_bar_k)

The two views must agree to near machine precision; the recurrence is the
slow oracle-grade path, the kernel + FFT convolution is the fast path.

Poles come in conjugate pairs; only one member of each pair is stored and
outputs take twice the real part (``pairs=True``).  ``pairs=False`` disables
the doubling so tests can drive plain scalar systems.

Kernel powers are accumulated by running products in 64-bit complex
arithmetic regardless of the model's working precision, using a sqrt(L)
two-level factorization: powers 0..T-1 and powers of a_bar^T are cumulative
products, and their outer combination is a small matrix product.  Total work
stays O(n_half * L) without materializing an (n_half, L) power table per
evaluation step.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericalError

PIVOT_EPS = 1e-12  # |1 - dt*a/2| below this is a degenerate bilinear pivot
ZERO_POLE_EPS = 1e-12  # |a| below this uses the ZOH series limit b_bar = dt


def _as_complex_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.complex128)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractError(f"{name} must be a non-empty 1-d complex vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr.real)) or not np.all(np.isfinite(arr.imag)):
        raise ContractError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SsmChannelParams:
    """Continuous-time parameters of one diagonal channel.

    ``a`` and ``c`` hold one member of each conjugate pole pair (n_half
    entries for a state of dimension 2*n_half).  ``d`` is the feedthrough
    scalar and ``log_dt`` the natural log of the timestep.
    """

    a: np.ndarray
    c: np.ndarray
    d: float
    log_dt: float

    def __post_init__(self):
        a = _as_complex_vector(self.a, "a")
        c = _as_complex_vector(self.c, "c")
        if a.shape != c.shape:
            raise ContractError(f"a and c must match: {a.shape} vs {c.shape}")
        if np.any(a.real >= 0):
            k = int(np.argmax(a.real >= 0))
            raise ContractError(f"unstable channel: re(a[{k}]) = {a.real[k]} >= 0")
        if not np.isfinite(self.log_dt):
            raise ContractError(f"log_dt must be finite, got {self.log_dt}")
        if not np.isfinite(self.d):
            raise ContractError(f"d must be finite, got {self.d}")
        a.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "c", c)

    @classmethod
    def from_timestep(cls, a, c, d: float, dt: float) -> "SsmChannelParams":
        """Build from a raw timestep; dt <= 0 is rejected here, not clamped."""
        if not (dt > 0) or not np.isfinite(dt):
            raise ContractError(f"timestep must be positive and finite, got {dt}")
        return cls(a=a, c=c, d=d, log_dt=float(np.log(dt)))

    @property
    def n_half(self) -> int:
        return self.a.shape[0]

    @property
    def dt(self) -> float:
        return float(np.exp(self.log_dt))


@dataclass(frozen=True)
class DiscretizedChannel:
    """Discrete transition (a_bar) and input (b_bar) coefficients per pole."""

    a_bar: np.ndarray
    b_bar: np.ndarray

    def __post_init__(self):
        a_bar = _as_complex_vector(self.a_bar, "a_bar")
        b_bar = _as_complex_vector(self.b_bar, "b_bar")
        if a_bar.shape != b_bar.shape:
            raise ContractError(f"a_bar and b_bar must match: {a_bar.shape} vs {b_bar.shape}")
        a_bar.setflags(write=False)
        b_bar.setflags(write=False)
        object.__setattr__(self, "a_bar", a_bar)
        object.__setattr__(self, "b_bar", b_bar)


@dataclass(frozen=True)
class KernelCache:
    """Materialized real convolution kernel of one channel at one length."""

    length: int
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if self.length < 1 or values.shape != (self.length,):
            raise ContractError(
                f"kernel must hold exactly length={self.length} values, got shape {values.shape}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


# --------------------------------------------------------------------------
# Discretization
# --------------------------------------------------------------------------

def bilinear_arrays(a: np.ndarray, dt, channel: str | None = None):
    """Bilinear (Tustin) map on stacked poles.

    a_bar = (1 - dt*a/2)^-1 (1 + dt*a/2),  b_bar = (1 - dt*a/2)^-1 dt
    (the input vector is fixed to ones).  ``a`` has shape (..., n) and
    ``dt`` broadcasts against (...,).
    """
    a = np.asarray(a, dtype=np.complex128)
    dt = np.asarray(dt, dtype=np.float64)
    half = 0.5 * dt[..., None] * a
    den = 1.0 - half
    bad = np.abs(den) < PIVOT_EPS
    if np.any(bad):
        idx = tuple(int(i[0]) for i in np.nonzero(bad))
        where = f"channel {channel}, " if channel is not None else ""
        raise NumericalError(
            f"degenerate bilinear pivot |1 - dt*a/2| < {PIVOT_EPS} at {where}pole index {idx[-1]}"
        )
    a_bar = (1.0 + half) / den
    b_bar = dt[..., None] / den
    return a_bar, b_bar


def zoh_arrays(a: np.ndarray, dt):
    """Zero-order-hold map: a_bar = exp(dt*a), b_bar = (a_bar - 1)/a.

    Poles with |a| < ZERO_POLE_EPS use the series limit b_bar = dt.
    """
    a = np.asarray(a, dtype=np.complex128)
    dt = np.asarray(dt, dtype=np.float64)
    a_bar = np.exp(dt[..., None] * a)
    tiny = np.abs(a) < ZERO_POLE_EPS
    safe = np.where(tiny, 1.0, a)
    b_bar = (a_bar - 1.0) / safe
    if np.any(tiny):
        b_bar = np.where(tiny, np.broadcast_to(dt[..., None] + 0j, b_bar.shape), b_bar)
    return a_bar, b_bar


def discretize_bilinear(params: SsmChannelParams, channel: str | None = None) -> DiscretizedChannel:
    a_bar, b_bar = bilinear_arrays(params.a, params.dt, channel=channel)
    return DiscretizedChannel(a_bar=a_bar, b_bar=b_bar)


def discretize_zoh(params: SsmChannelParams) -> DiscretizedChannel:
    a_bar, b_bar = zoh_arrays(params.a, params.dt)
    return DiscretizedChannel(a_bar=a_bar, b_bar=b_bar)


def discretize(params: SsmChannelParams, rule: str, channel: str | None = None) -> DiscretizedChannel:
    if rule == "bilinear":
        return discretize_bilinear(params, channel=channel)
    if rule == "zoh":
        return discretize_zoh(params)
    raise ContractError(f"unknown discretization rule {rule!r} (expected 'bilinear' or 'zoh')")


# --------------------------------------------------------------------------
# Kernel generation (running products, 64-bit)
# --------------------------------------------------------------------------

def _sqrt_block(length: int) -> tuple[int, int]:
    t = max(1, int(np.ceil(np.sqrt(length))))
    q = -(-length // t)
    return q, t


def _power_tables(alpha: np.ndarray, length: int):
    """Running-product tables P[..., r] = alpha^r (r < T) and B[..., q] = alpha^(qT)."""
    q, t = _sqrt_block(length)
    shape = alpha.shape
    p = np.ones(shape + (t,), dtype=np.complex128)
    if t > 1:
        np.cumprod(np.broadcast_to(alpha[..., None], shape + (t - 1,)), axis=-1, out=p[..., 1:])
    alpha_t = p[..., -1] * alpha
    b = np.ones(shape + (q,), dtype=np.complex128)
    if q > 1:
        np.cumprod(np.broadcast_to(alpha_t[..., None], shape + (q - 1,)), axis=-1, out=b[..., 1:])
    return p, b, q, t


def power_series(weights: np.ndarray, alpha: np.ndarray, length: int) -> np.ndarray:
    """sum_k weights[..., k] * alpha[..., k]^l for l in [0, length).

    Shapes: weights, alpha (..., n) -> output (..., length), complex128.
    """
    if length < 1:
        raise ContractError(f"length must be >= 1, got {length}")
    weights = np.asarray(weights, dtype=np.complex128)
    alpha = np.asarray(alpha, dtype=np.complex128)
    p, b, q, t = _power_tables(alpha, length)
    u = np.swapaxes(weights[..., None] * b, -1, -2)  # (..., q, n)
    flat = np.matmul(u, p)  # (..., q, t)
    return flat.reshape(alpha.shape[:-1] + (q * t,))[..., :length]


def power_weighted_sum(alpha: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sum_l weights[..., l] * alpha[..., k]^l, the transpose of power_series.

    Shapes: alpha (..., n), weights (..., L) -> output (..., n), complex128.
    """
    length = weights.shape[-1]
    alpha = np.asarray(alpha, dtype=np.complex128)
    weights = np.asarray(weights)
    p, b, q, t = _power_tables(alpha, length)
    padded = np.zeros(weights.shape[:-1] + (q * t,), dtype=np.complex128)
    padded[..., :length] = weights
    w_qt = padded.reshape(weights.shape[:-1] + (q, t))
    inner = np.matmul(p, np.swapaxes(w_qt, -1, -2))  # (..., n, q)
    return np.sum(inner * b, axis=-1)


def kernel_bank(c: np.ndarray, a_bar: np.ndarray, b_bar: np.ndarray, length: int,
                pairs: bool = True) -> np.ndarray:
    """Real kernels for stacked channels: (..., n) params -> (..., length)."""
    scale = 2.0 if pairs else 1.0
    with np.errstate(over="ignore", invalid="ignore"):
        k = scale * power_series(np.asarray(c, dtype=np.complex128) * b_bar, a_bar, length).real
    if not np.all(np.isfinite(k)):
        raise NumericalError("kernel overflow: non-finite values in the materialized kernel")
    return k


def compute_kernel(disc: DiscretizedChannel, c, length: int, pairs: bool = True) -> KernelCache:
    """Materialize one channel's kernel K_l = 2 Re(sum_k c_k a_bar_k^l b_bar_k)."""
    c = _as_complex_vector(c, "c")
    if c.shape != disc.a_bar.shape:
        raise ContractError(f"c must match pole count: {c.shape} vs {disc.a_bar.shape}")
    values = kernel_bank(c, disc.a_bar, disc.b_bar, length, pairs=pairs)
    return KernelCache(length=length, values=values)


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------

def _fft_size(length: int) -> int:
    return 1 << max(1, int(2 * length - 1).bit_length())


def fft_causal_conv(kernels: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Causal convolution of stacked kernels (..., L) with inputs (..., L).

    Zero-padded to a power of two >= 2L so the circular product is linear on
    the first L samples.  Runs in float64.
    """
    length = u.shape[-1]
    if kernels.shape[-1] != length:
        raise ContractError(
            f"kernel length {kernels.shape[-1]} does not match input length {length}"
        )
    n = _fft_size(length)
    kf = np.fft.rfft(np.asarray(kernels, dtype=np.float64), n)
    uf = np.fft.rfft(np.asarray(u, dtype=np.float64), n)
    return np.fft.irfft(kf * uf, n)[..., :length]


def fft_causal_corr(g: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Causal cross-correlation corr[l] = sum_{t >= l} g[t] * v[t-l].

    This is the adjoint of fft_causal_conv in its kernel argument; same
    stacked shapes as fft_causal_conv.
    """
    return fft_causal_conv(np.flip(g, axis=-1), v)[..., ::-1]


def direct_causal_conv(kernel: np.ndarray, u: np.ndarray) -> np.ndarray:
    """O(L^2) reference convolution used as the oracle for the FFT path."""
    kernel = np.asarray(kernel, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    return np.convolve(u, kernel)[: u.shape[0]]


def convolve(kernel: KernelCache, u, d: float, method: str = "fft") -> np.ndarray:
    """y_t = sum_{s<=t} K_s u_{t-s} + d u_t for one channel."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1 or u.shape[0] != kernel.length:
        raise ContractError(
            f"input length {u.shape} does not match kernel length {kernel.length}"
        )
    if method == "fft":
        y = fft_causal_conv(kernel.values, u)
    elif method == "direct":
        y = direct_causal_conv(kernel.values, u)
    else:
        raise ContractError(f"unknown convolution method {method!r}")
    return y + d * u


# --------------------------------------------------------------------------
# Recurrence (oracle-grade path)
# --------------------------------------------------------------------------

def run_recurrence(disc: DiscretizedChannel, c, d: float, u, pairs: bool = True) -> np.ndarray:
    """Step the recurrence from x_0 = 0; the reference for the convolution."""
    c = _as_complex_vector(c, "c")
    if c.shape != disc.a_bar.shape:
        raise ContractError(f"c must match pole count: {c.shape} vs {disc.a_bar.shape}")
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1:
        raise ContractError(f"u must be 1-d, got shape {u.shape}")
    scale = 2.0 if pairs else 1.0
    a_bar, b_bar = disc.a_bar, disc.b_bar
    x = np.zeros_like(a_bar)
    y = np.empty(u.shape[0], dtype=np.float64)
    for t in range(u.shape[0]):
        x = a_bar * x + b_bar * u[t]
        y[t] = scale * np.dot(c, x).real + d * u[t]
    return y
