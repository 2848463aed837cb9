"""Dense NCHW numerics with explicit forward/backward pairs.

Tensors are plain ``numpy.ndarray`` objects.  Every differentiable op in this
module has a matching ``*_backward`` that returns exact gradients, so the
higher level modules can chain them by hand without an autodiff graph.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "ConvSpec",
    "AdamState",
    "KinkMonitor",
    "conv2d",
    "conv2d_backward",
    "soft_threshold",
    "soft_threshold_backward",
    "adam_step",
    "set_debug",
    "check_finite",
    "debug_mode",
]

_DEBUG = False
_monitors: list["KinkMonitor"] = []


def set_debug(enabled: bool) -> None:
    """Turn the finite-output check on every forward op on or off."""
    global _DEBUG
    _DEBUG = bool(enabled)


def check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"{name}: non-finite value in output")


def _shape_error(what: str, expected, actual) -> ValueError:
    return ValueError(f"{what}: expected shape {tuple(expected)}, got {tuple(actual)}")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    bias: bool = False

    def __post_init__(self):
        if self.kernel_size % 2 != 1 or self.kernel_size < 1:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        f = self.kernel_size
        return (self.out_channels, self.in_channels, f, f)

    def check(self, weight: np.ndarray, bias: np.ndarray | None = None) -> None:
        if weight.shape != self.weight_shape:
            raise _shape_error("conv2d weight", self.weight_shape, weight.shape)
        if self.bias:
            if bias is None or bias.shape != (self.out_channels,):
                raise _shape_error(
                    "conv2d bias", (self.out_channels,), None if bias is None else bias.shape
                )
        elif bias is not None:
            raise ValueError("conv2d: bias given but spec has bias=False")


def _im2col_nhwc(x: np.ndarray, f: int) -> np.ndarray:
    """Rows of f*f*C patch values, one per position of the zero-padded grid.

    ``x`` is channels-last.  Row ``(n, h, w)`` of the padded grid holds the
    window whose top-left corner is padded pixel ``(h, w)``; only rows with
    ``h < H`` and ``w < W`` are real outputs, the rest are dropped later.
    """
    n, h, w, c = x.shape
    p = f // 2
    hp, wp = h + 2 * p, w + 2 * p
    rows = n * hp * wp
    buf = np.zeros((rows + (f - 1) * (wp + 1), c), dtype=x.dtype)
    buf[:rows].reshape(n, hp, wp, c)[:, p : p + h, p : p + w] = x
    s_row, s_ch = buf.strides
    win = as_strided(buf, (rows, f, f, c), (s_row, wp * s_row, s_row, s_ch), writeable=False)
    return np.ascontiguousarray(win).reshape(rows, f * f * c)


def _wmat(weight: np.ndarray) -> np.ndarray:
    cout, cin, f, _ = weight.shape
    return np.ascontiguousarray(weight.transpose(2, 3, 1, 0)).reshape(f * f * cin, cout)


def _check_input(x: np.ndarray, weight: np.ndarray, channel_axis: int = 1) -> None:
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be 4D, got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 != 1:
        raise ValueError(f"conv2d weight must be (Cout, Cin, f, f) with f odd, got {weight.shape}")
    if x.shape[channel_axis] != weight.shape[1]:
        raise ValueError(
            f"conv2d: input has {x.shape[channel_axis]} channels, weight expects {weight.shape[1]} "
            f"(input shape {x.shape}, weight shape {weight.shape})"
        )


def conv2d_nhwc(x: np.ndarray, weight: np.ndarray, cols: np.ndarray | None = None,
                keep_cols: bool = False):
    """Channels-last :func:`conv2d` without bias; ``weight`` is still (Cout, Cin, f, f).

    With ``keep_cols`` the im2col matrix is returned too so that
    :func:`conv2d_nhwc_backward` can skip rebuilding it.
    """
    _check_input(x, weight, channel_axis=3)
    n, h, w, _ = x.shape
    f = weight.shape[2]
    p = f // 2
    if cols is None:
        cols = _im2col_nhwc(x, f)
    out = (cols @ _wmat(weight)).reshape(n, h + 2 * p, w + 2 * p, -1)[:, :h, :w]
    out = np.ascontiguousarray(out)
    if _DEBUG:
        check_finite("conv2d", out)
    return (out, cols) if keep_cols else out


def conv2d_nhwc_backward(grad_out: np.ndarray, saved_input: np.ndarray, weight: np.ndarray,
                         cols: np.ndarray | None = None, need_input_grad: bool = True):
    _check_input(saved_input, weight, channel_axis=3)
    n, h, w, cin = saved_input.shape
    cout, _, f, _ = weight.shape
    if grad_out.shape != (n, h, w, cout):
        raise _shape_error("conv2d_backward grad_out", (n, h, w, cout), grad_out.shape)
    p = f // 2
    if cols is None:
        cols = _im2col_nhwc(saved_input, f)
    g = np.zeros((n, h + 2 * p, w + 2 * p, cout), dtype=grad_out.dtype)
    g[:, :h, :w] = grad_out
    gw = cols.T @ g.reshape(-1, cout)
    grad_weight = np.ascontiguousarray(gw.reshape(f, f, cin, cout).transpose(3, 2, 0, 1))
    grad_input = None
    if need_input_grad:
        flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        grad_input = conv2d_nhwc(grad_out, flipped)
    return grad_input, grad_weight


def conv2d(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    spec: ConvSpec | None = None,
) -> np.ndarray:
    """Stride-1 cross-correlation of NCHW input with symmetric zero padding."""
    if spec is not None:
        spec.check(weight, bias)
    _check_input(x, weight)
    out = conv2d_nhwc(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), weight)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out


def conv2d_backward(
    grad_out: np.ndarray,
    saved_input: np.ndarray,
    weight: np.ndarray,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d` w.r.t. input, weight and bias."""
    _check_input(saved_input, weight)
    n, _, h, w = saved_input.shape
    expected = (n, weight.shape[0], h, w)
    if grad_out.shape != expected:
        raise _shape_error("conv2d_backward grad_out", expected, grad_out.shape)
    g_nhwc = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1))
    x_nhwc = np.ascontiguousarray(saved_input.transpose(0, 2, 3, 1))
    gi, gw = conv2d_nhwc_backward(g_nhwc, x_nhwc, weight, need_input_grad=need_input_grad)
    if gi is not None:
        gi = np.ascontiguousarray(gi.transpose(0, 3, 1, 2))
    return gi, gw, grad_out.sum(axis=(0, 2, 3))


class KinkMonitor:
    """Records how close soft-threshold inputs come to the kink ``|a| = lam``.

    While active (as a context manager) every :func:`soft_threshold` call
    reports its smallest margin and, if ``fingerprint`` is set, a hash of its
    active set so that a perturbed evaluation can be checked for kink crossings.
    """

    def __init__(self, fingerprint: bool = False):
        self.fingerprint = fingerprint
        self.min_margin = np.inf
        self.calls = 0
        self._hash = hashlib.blake2b(digest_size=16)

    def record(self, a: np.ndarray, lam: np.ndarray) -> None:
        self.calls += 1
        margin = np.abs(np.abs(a) - lam)
        if margin.size:
            self.min_margin = min(self.min_margin, float(margin.min()))
        if self.fingerprint:
            self._hash.update(np.packbits(np.abs(a) > lam).tobytes())

    @property
    def signature(self) -> str:
        return self._hash.hexdigest()

    def __enter__(self):
        _monitors.append(self)
        return self

    def __exit__(self, *exc):
        _monitors.remove(self)
        return False


def _channel_lambda(a: np.ndarray, lam, axis: int = 1) -> np.ndarray:
    lam = np.asarray(lam, dtype=a.dtype)
    if lam.ndim == 0:
        return lam
    axis = axis % a.ndim
    if lam.ndim != 1 or a.ndim < 2 or lam.shape[0] != a.shape[axis]:
        raise ValueError(
            f"soft_threshold: threshold shape {lam.shape} does not broadcast over "
            f"channels of input shape {a.shape}"
        )
    shape = [1] * a.ndim
    shape[axis] = -1
    return lam.reshape(shape)


def soft_threshold(a: np.ndarray, lam, axis: int = 1) -> np.ndarray:
    """``sgn(a) * max(|a| - lam, 0)`` with one threshold per channel ``axis``."""
    lam_b = _channel_lambda(a, lam, axis)
    if np.any(lam_b < 0):
        raise ValueError("soft_threshold: negative threshold")
    for mon in _monitors:
        mon.record(a, lam_b)
    out = np.abs(a)
    out -= lam_b
    np.maximum(out, 0, out=out)
    np.copysign(out, a, out=out)
    if _DEBUG:
        check_finite("soft_threshold", out)
    return out


def soft_threshold_backward(
    grad_out: np.ndarray, saved_input: np.ndarray, lam, axis: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Subgradient 0 is used at the kink ``|a| = lam``."""
    if grad_out.shape != saved_input.shape:
        raise _shape_error("soft_threshold_backward grad_out", saved_input.shape, grad_out.shape)
    lam_b = _channel_lambda(saved_input, lam, axis)
    axis = axis % saved_input.ndim
    active = np.abs(saved_input) > lam_b
    grad_input = np.where(active, grad_out, 0)
    g_lam = -np.sign(saved_input) * grad_input
    if np.ndim(lam) == 0:
        grad_lam = g_lam.sum()
    else:
        grad_lam = g_lam.sum(axis=tuple(i for i in range(g_lam.ndim) if i != axis))
    return grad_input, np.asarray(grad_lam, dtype=saved_input.dtype)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise KeyError(f"adam_step: params/grads keys differ: {missing[:5]}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise _shape_error(f"adam_step grad[{name}]", p.shape, grads[name].shape)
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if m.shape != p.shape:
            raise _shape_error(f"adam_step state[{name}]", p.shape, m.shape)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p -= (state.lr * step).astype(p.dtype, copy=False)
    return params, state


@contextlib.contextmanager
def debug_mode():
    prev = _DEBUG
    set_debug(True)
    try:
        yield
    finally:
        set_debug(prev)
