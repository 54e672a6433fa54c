"""Minimal reverse-mode differentiation on numpy arrays.

A Tape records Nodes in evaluation order; values are computed eagerly as
ops are appended, so topological order is the append order.  backward()
zeroes every gradient, seeds the final scalar with 1 and walks the list
in reverse exactly once, accumulating into parent gradients.

The op set is deliberately small: exactly what the aggregator model needs.
There is no general broadcasting; `add` supports the one bias pattern
(L, H) + (H,) the model uses.

Training runs the tape in float32; gradient-check builds use float64.
The ssm-conv op always performs its internal kernel/FFT math in 64-bit
complex and casts back to the tape dtype.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericalError
from . import parallel, ssm

# Trainable pole real parts are kept strictly negative; values at or above
# this ceiling are clamped and receive zero gradient through the clamp.
POLE_REAL_CEILING = -1e-4

LAYERNORM_EPS = 1e-5

OPS = frozenset({
    "leaf", "matvec", "add", "elementwise-mul", "sigmoid", "exp", "log",
    "max-pool-over-sequence", "layernorm", "ssm-conv", "softmax-log-loss",
    "scale",
})


@dataclass
class Node:
    op: str
    value: np.ndarray
    grad: np.ndarray | None = None
    parents: tuple = ()
    name: str | None = None
    backward_fn: object = field(default=None, repr=False)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tape:
    """Single-owner computation record; one per bag during training."""

    def __init__(self, dtype=np.float32, grad_enabled: bool = True):
        self.dtype = np.dtype(dtype)
        self.grad_enabled = grad_enabled
        self.nodes: list[Node] = []

    # -- construction helpers ------------------------------------------------

    def _append(self, op: str, value: np.ndarray, parents=(), name=None, backward_fn=None) -> Node:
        assert op in OPS, op
        node = Node(op=op, value=value, parents=tuple(parents), name=name,
                    backward_fn=backward_fn)
        self.nodes.append(node)
        return node

    def leaf(self, value, name: str | None = None) -> Node:
        value = np.asarray(value, dtype=self.dtype)
        return self._append("leaf", value, name=name)

    # -- ops -----------------------------------------------------------------

    def matvec(self, x: Node, w: Node) -> Node:
        xv, wv = x.value, w.value
        if wv.ndim != 2 or xv.ndim not in (1, 2) or xv.shape[-1] != wv.shape[0]:
            raise ContractError(f"matvec shape mismatch: {xv.shape} @ {wv.shape}")
        value = xv @ wv

        def backward_fn(g):
            if xv.ndim == 2:
                x.grad += g @ wv.T
                w.grad += xv.T @ g
            else:
                x.grad += wv @ g
                w.grad += np.outer(xv, g)

        return self._append("matvec", value, (x, w), backward_fn=backward_fn)

    def add(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        if av.shape == bv.shape:
            broadcast = False
        elif av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]:
            broadcast = True
        else:
            raise ContractError(f"add shape mismatch: {av.shape} + {bv.shape}")
        value = av + bv

        def backward_fn(g):
            a.grad += g
            b.grad += g.sum(axis=0) if broadcast else g

        return self._append("add", value, (a, b), backward_fn=backward_fn)

    def mul(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ContractError(f"elementwise-mul shape mismatch: {a.value.shape} * {b.value.shape}")
        value = a.value * b.value

        def backward_fn(g):
            a.grad += g * b.value
            b.grad += g * a.value

        return self._append("elementwise-mul", value, (a, b), backward_fn=backward_fn)

    def sigmoid(self, x: Node) -> Node:
        value = _sigmoid(x.value)

        def backward_fn(g):
            x.grad += g * value * (1.0 - value)

        return self._append("sigmoid", value, (x,), backward_fn=backward_fn)

    def exp(self, x: Node) -> Node:
        value = np.exp(x.value)

        def backward_fn(g):
            x.grad += g * value

        return self._append("exp", value, (x,), backward_fn=backward_fn)

    def log(self, x: Node) -> Node:
        value = np.log(x.value)

        def backward_fn(g):
            x.grad += g / x.value

        return self._append("log", value, (x,), backward_fn=backward_fn)

    def scale(self, x: Node, alpha: float) -> Node:
        alpha = self.dtype.type(alpha)
        value = alpha * x.value

        def backward_fn(g):
            x.grad += alpha * g

        return self._append("scale", value, (x,), backward_fn=backward_fn)

    def max_pool_sequence(self, x: Node) -> Node:
        """(L, H) -> (H,) coordinate-wise max; ties go to the lowest index."""
        xv = x.value
        if xv.ndim != 2:
            raise ContractError(f"max-pool expects (L, H), got {xv.shape}")
        idx = np.argmax(xv, axis=0)  # first occurrence wins ties
        cols = np.arange(xv.shape[1])
        value = xv[idx, cols]

        def backward_fn(g):
            np.add.at(x.grad, (idx, cols), g)

        return self._append("max-pool-over-sequence", value, (x,), backward_fn=backward_fn)

    def layernorm(self, x: Node, gamma: Node, beta: Node) -> Node:
        """Per-token normalization over the feature axis of (L, H)."""
        xv = x.value
        if xv.ndim != 2 or gamma.value.shape != (xv.shape[1],) or beta.value.shape != (xv.shape[1],):
            raise ContractError(
                f"layernorm shape mismatch: x {xv.shape}, scale {gamma.value.shape}, shift {beta.value.shape}"
            )
        mean = xv.mean(axis=1, keepdims=True)
        var = xv.var(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + LAYERNORM_EPS)
        xhat = (xv - mean) * inv_std
        value = gamma.value * xhat + beta.value

        def backward_fn(g):
            gamma.grad += (g * xhat).sum(axis=0)
            beta.grad += g.sum(axis=0)
            gx_hat = g * gamma.value
            h = xv.shape[1]
            term = gx_hat - gx_hat.mean(axis=1, keepdims=True) \
                - xhat * (gx_hat * xhat).sum(axis=1, keepdims=True) / h
            x.grad += term * inv_std

        return self._append("layernorm", value, (x, gamma, beta), backward_fn=backward_fn)

    def ssm_conv(self, u: Node, a_re: Node, a_im: Node, c_re: Node, c_im: Node,
                 d: Node, log_dt: Node, rule: str = "bilinear") -> Node:
        """Bank of H diagonal-SSM channels applied feature-wise to (L, H).

        Forward materializes the per-channel kernels (running products in
        64-bit) and convolves via FFT; the feedthrough d u is the skip term.
        """
        uv = u.value
        if uv.ndim != 2:
            raise ContractError(f"ssm-conv expects (L, H) input, got {uv.shape}")
        h = uv.shape[1]
        for p, nm in ((a_re, "a_re"), (a_im, "a_im"), (c_re, "c_re"), (c_im, "c_im")):
            if p.value.ndim != 2 or p.value.shape[0] != h:
                raise ContractError(f"ssm-conv {nm} must be (H, n_half): {p.value.shape} vs H={h}")
        if d.value.shape != (h,) or log_dt.value.shape != (h,):
            raise ContractError(
                f"ssm-conv d/log_dt must be ({h},): {d.value.shape}, {log_dt.value.shape}"
            )
        y64, cache = _ssm_conv_forward(
            uv, a_re.value, a_im.value, c_re.value, c_im.value, d.value,
            log_dt.value, rule, keep_cache=self.grad_enabled,
        )
        value = y64.astype(self.dtype)

        def backward_fn(g):
            grads = grad_ssm_conv(np.asarray(g, dtype=np.float64), cache)
            u.grad += grads["u"].astype(self.dtype)
            a_re.grad += grads["a_re"].astype(self.dtype)
            a_im.grad += grads["a_im"].astype(self.dtype)
            c_re.grad += grads["c_re"].astype(self.dtype)
            c_im.grad += grads["c_im"].astype(self.dtype)
            d.grad += grads["d"].astype(self.dtype)
            log_dt.grad += grads["log_dt"].astype(self.dtype)

        return self._append("ssm-conv", value, (u, a_re, a_im, c_re, c_im, d, log_dt),
                            backward_fn=backward_fn)

    def softmax_log_loss(self, logits: Node, labels, reduction: str = "mean") -> Node:
        """Fused softmax + negative log likelihood; ends a classification tape."""
        lv = np.asarray(logits.value, dtype=np.float64)
        squeeze = lv.ndim == 1
        if squeeze:
            lv = lv[None, :]
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if lv.ndim != 2 or labels.shape != (lv.shape[0],):
            raise ContractError(f"loss shape mismatch: logits {logits.value.shape}, labels {labels.shape}")
        if np.any(labels < 0) or np.any(labels >= lv.shape[1]):
            raise ContractError(f"label out of range for {lv.shape[1]} classes")
        if reduction not in ("mean", "sum"):
            raise ContractError(f"unknown reduction {reduction!r}")
        shifted = lv - lv.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        rows = np.arange(lv.shape[0])
        per_row = -log_p[rows, labels]
        total = per_row.sum() if reduction == "sum" else per_row.mean()
        value = np.asarray(total, dtype=self.dtype)

        def backward_fn(g):
            p = np.exp(log_p)
            p[rows, labels] -= 1.0
            if reduction == "mean":
                p /= lv.shape[0]
            gl = (float(g) * p).astype(self.dtype)
            logits.grad += gl[0] if squeeze else gl

        return self._append("softmax-log-loss", value, (logits,), backward_fn=backward_fn)

    # -- evaluation ----------------------------------------------------------

    def forward(self) -> float:
        """Values are populated eagerly; this validates and returns the loss."""
        if not self.nodes:
            raise ContractError("empty tape")
        out = self.nodes[-1]
        if np.ndim(out.value) != 0:
            raise ContractError(f"tape must end in a scalar, got shape {np.shape(out.value)}")
        return float(out.value)

    def backward(self) -> dict[str, np.ndarray]:
        """Reverse sweep; returns gradients of all named leaves."""
        if not self.grad_enabled:
            raise ContractError("tape was built with grad_enabled=False")
        self.forward()
        for node in self.nodes:
            node.grad = np.zeros_like(node.value)
        self.nodes[-1].grad = np.ones_like(self.nodes[-1].value)
        for node in reversed(self.nodes):
            if node.backward_fn is not None:
                node.backward_fn(node.grad)
        return {n.name: n.grad for n in self.nodes if n.op == "leaf" and n.name is not None}


# --------------------------------------------------------------------------
# ssm-conv forward/backward internals
# --------------------------------------------------------------------------

@dataclass
class SsmConvCache:
    rule: str
    u64: np.ndarray | None
    kernels: np.ndarray | None
    a: np.ndarray
    a_bar: np.ndarray
    b_bar: np.ndarray
    w: np.ndarray
    dt: np.ndarray
    den: np.ndarray | None
    tiny: np.ndarray | None
    clamp_mask: np.ndarray
    c: np.ndarray
    d: np.ndarray


def _conv_chunk(h: int, fft_len: int) -> int:
    # Bound transient FFT buffers to ~100 MB regardless of L.
    return max(1, min(h, int(96e6 // (fft_len * 48))))


def _chunked_conv(kernels: np.ndarray, ut: np.ndarray) -> np.ndarray:
    h = ut.shape[0]
    out = np.empty_like(ut)

    def work(s, e):
        out[s:e] = ssm.fft_causal_conv(kernels[s:e], ut[s:e])

    parallel.run_chunked(h, _conv_chunk(h, ssm._fft_size(ut.shape[1])), work)
    return out


def _chunked_corr(g: np.ndarray, vt: np.ndarray) -> np.ndarray:
    h = vt.shape[0]
    out = np.empty_like(vt)

    def work(s, e):
        out[s:e] = ssm.fft_causal_corr(g[s:e], vt[s:e])

    parallel.run_chunked(h, _conv_chunk(h, ssm._fft_size(vt.shape[1])), work)
    return out


def _ssm_conv_forward(u, a_re, a_im, c_re, c_im, d, log_dt, rule, keep_cache):
    length = u.shape[0]
    u64 = np.ascontiguousarray(np.asarray(u, dtype=np.float64).T)  # (H, L)
    a_re64 = np.asarray(a_re, dtype=np.float64)
    clamp_mask = a_re64 <= POLE_REAL_CEILING
    a = np.minimum(a_re64, POLE_REAL_CEILING) + 1j * np.asarray(a_im, dtype=np.float64)
    c = np.asarray(c_re, dtype=np.float64) + 1j * np.asarray(c_im, dtype=np.float64)
    dt = np.exp(np.asarray(log_dt, dtype=np.float64))
    den = tiny = None
    if rule == "bilinear":
        half = 0.5 * dt[:, None] * a
        den = 1.0 - half
        if np.any(np.abs(den) < ssm.PIVOT_EPS):
            raise NumericalError("degenerate bilinear pivot inside ssm-conv")
        a_bar = (1.0 + half) / den
        b_bar = dt[:, None] / den
    elif rule == "zoh":
        a_bar = np.exp(dt[:, None] * a)
        tiny = np.abs(a) < ssm.ZERO_POLE_EPS
        safe = np.where(tiny, 1.0, a)
        b_bar = np.where(tiny, dt[:, None] + 0j, (a_bar - 1.0) / safe)
    else:
        raise ContractError(f"unknown discretization rule {rule!r}")
    w = c * b_bar
    kernels = ssm.kernel_bank(c, a_bar, b_bar, length)  # (H, L)
    d64 = np.asarray(d, dtype=np.float64)
    y = (_chunked_conv(kernels, u64) + d64[:, None] * u64).T
    if not np.all(np.isfinite(y)):
        raise NumericalError("ssm-conv produced non-finite outputs")
    cache = SsmConvCache(
        rule=rule,
        u64=u64 if keep_cache else None,
        kernels=kernels if keep_cache else None,
        a=a, a_bar=a_bar, b_bar=b_bar, w=w, dt=dt, den=den, tiny=tiny,
        clamp_mask=clamp_mask, c=c, d=d64,
    )
    return y, cache


def grad_ssm_conv(upstream: np.ndarray, cache: SsmConvCache) -> dict[str, np.ndarray]:
    """Gradients of the convolution view w.r.t. (u, a, c, d, log_dt).

    The kernel gradient is the causal correlation of the upstream signal
    with the input; pole and projection gradients then chain through the
    cumulative powers and the discretization map.  Complex adjoints use the
    convention z_hat = dL/d re(z) + i dL/d im(z), so holomorphic steps
    multiply by the conjugated derivative.
    """
    if cache.u64 is None:
        raise ContractError("ssm-conv was evaluated without gradient caching")
    g = np.ascontiguousarray(np.asarray(upstream, dtype=np.float64).T)  # (H, L)
    u64, kernels = cache.u64, cache.kernels
    length = g.shape[1]

    grad_d = np.einsum("hl,hl->h", g, u64)
    grad_u = (_chunked_corr(g, kernels) + cache.d[:, None] * g).T

    gk = _chunked_corr(g, u64)  # dL/dK, shape (H, L)

    conj_abar = np.conj(cache.a_bar)
    w_hat = 2.0 * ssm.power_weighted_sum(conj_abar, gk)
    shifted = gk[:, 1:] * np.arange(1, length)[None, :]
    if shifted.shape[1] == 0:
        s_shift = np.zeros_like(conj_abar)
    else:
        s_shift = ssm.power_weighted_sum(conj_abar, shifted)
    abar_hat = 2.0 * np.conj(cache.w) * s_shift

    c_hat = w_hat * np.conj(cache.b_bar)
    bbar_hat = w_hat * np.conj(cache.c)

    dt_col = cache.dt[:, None]
    if cache.rule == "bilinear":
        den2 = cache.den * cache.den
        da_da = dt_col / den2
        da_ddt = cache.a / den2
        db_da = dt_col * dt_col / (2.0 * den2)
        db_ddt = 1.0 / den2
    else:  # zoh
        da_da = dt_col * cache.a_bar
        da_ddt = cache.a * cache.a_bar
        safe = np.where(cache.tiny, 1.0, cache.a)
        db_da = np.where(cache.tiny, dt_col * dt_col / 2.0 + 0j,
                         (dt_col * cache.a_bar - cache.b_bar) / safe)
        db_ddt = cache.a_bar

    a_hat = abar_hat * np.conj(da_da) + bbar_hat * np.conj(db_da)
    ddt = (abar_hat * np.conj(da_ddt) + bbar_hat * np.conj(db_ddt)).real.sum(axis=1)
    grad_log_dt = cache.dt * ddt

    return {
        "u": grad_u,
        "a_re": a_hat.real * cache.clamp_mask,
        "a_im": a_hat.imag,
        "c_re": c_hat.real,
        "c_im": c_hat.imag,
        "d": grad_d,
        "log_dt": grad_log_dt,
    }


# --------------------------------------------------------------------------
# Finite-difference harness
# --------------------------------------------------------------------------

def finite_difference(loss_fn, params: dict[str, np.ndarray], step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of loss_fn(params) w.r.t. every entry of every array."""
    grads = {}
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        flat = value.reshape(-1)
        out = np.zeros_like(flat)
        for i in range(flat.size):
            bumped = dict(params)
            plus = value.copy().reshape(-1)
            plus[i] += step
            bumped[name] = plus.reshape(value.shape)
            minus = value.copy().reshape(-1)
            minus[i] -= step
            bumped_minus = dict(bumped)
            bumped_minus[name] = minus.reshape(value.shape)
            out[i] = (loss_fn(bumped) - loss_fn(bumped_minus)) / (2.0 * step)
        grads[name] = out.reshape(value.shape)
    return grads


def check_gradients(build_tape, params: dict[str, np.ndarray], step: float = 1e-5,
                    rtol: float = 1e-4, abs_floor: float = 1e-7,
                    small: float = 1e-4):
    """Compare tape gradients against central differences.

    build_tape(params) must return a finished Tape.  A component passes if
    |analytic - fd| <= abs_floor when |analytic| < small, else the relative
    error |analytic - fd| / max(|analytic|, |fd|) must be <= rtol.
    Returns (worst_relative_error, failures) where failures is a list of
    human-readable strings.
    """
    analytic = build_tape(params).backward()

    def loss_fn(p):
        return build_tape(p).forward()

    fd = finite_difference(loss_fn, params, step=step)
    worst = 0.0
    failures = []
    for name in params:
        a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        f = fd[name].reshape(-1)
        for i, (ai, fi) in enumerate(zip(a, f)):
            if abs(ai) < small:
                if abs(ai - fi) > abs_floor:
                    failures.append(f"{name}[{i}]: analytic={ai:.3e} fd={fi:.3e} (abs)")
            else:
                rel = abs(ai - fi) / max(abs(ai), abs(fi))
                worst = max(worst, float(rel))
                if rel > rtol:
                    failures.append(f"{name}[{i}]: analytic={ai:.6e} fd={fi:.6e} rel={rel:.2e}")
    return worst, failures
