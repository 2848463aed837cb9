"""Lifting-inspired invertible network: predictor/update pairs on wavelet bands.

One lifting pair maps ``(d, c) -> (d - P(c), c + U(d - P(c)))``.  Whatever
``P`` and ``U`` compute, the step is undone by ``c = c' - U(d')`` followed by
``d = d' + P(c)``, so the transform is invertible for any parameter values.

Backward passes come in two flavours.  Trace mode keeps every sub-network's
activations from the forward call.  Memory-efficient mode keeps nothing and
rebuilds each step's inputs from its outputs with the exact inverse while
walking back, so only one sub-network's activations are alive at a time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import conv2d_nhwc, conv2d_nhwc_backward, soft_threshold, soft_threshold_backward


class ActivationCounter:
    """Tracks how many activation tensors are retained for a backward pass."""

    def __init__(self):
        self.live = 0
        self.peak = 0

    def hold(self, n: int) -> None:
        self.live += n
        self.peak = max(self.peak, self.live)

    def release(self, n: int) -> None:
        self.live -= n


class _NullCounter(ActivationCounter):
    def hold(self, n):
        pass

    def release(self, n):
        pass


_NULL = _NullCounter()


@dataclass
class PUNet:
    """K (conv, soft-threshold) layers followed by a final conv, no biases.

    ``thetas`` are raw threshold parameters; the effective per-channel
    thresholds are ``|theta|``.
    """

    weights: list[np.ndarray]
    thetas: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.thetas) + 1:
            raise ValueError("PUNet needs exactly one more conv than threshold layers")
        for k, th in enumerate(self.thetas):
            if th.shape != (self.weights[k].shape[0],):
                raise ValueError(f"threshold {k} shape {th.shape} does not match conv {k}")
        for k in range(1, len(self.weights)):
            if self.weights[k].shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"conv {k} input channels do not match conv {k - 1} output")

    @property
    def in_channels(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def depth(self) -> int:
        return len(self.thetas)

    def thresholds(self) -> list[np.ndarray]:
        return [np.abs(t) for t in self.thetas]

    def parameters(self) -> dict[str, np.ndarray]:
        params = {f"conv{k}.weight": w for k, w in enumerate(self.weights)}
        params.update({f"thr{k}": t for k, t in enumerate(self.thetas)})
        return params


def init_punet(
    in_channels: int,
    out_channels: int,
    depth: int = 8,
    width: int = 16,
    kernel_size: int = 3,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
    threshold_init: float = 1e-3,
    final_scale: float = 0.0,
    init_gain: float = 2.0,
) -> PUNet:
    """Gaussian interior convs with std ``sqrt(init_gain / fan_in)`` (He for
    the default gain 2); the final conv's std is ``final_scale`` times the He
    value, so the default zero final conv makes the net output 0."""
    if depth < 1:
        raise ValueError("PUNet depth must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    f = kernel_size
    chans = [in_channels] + [width] * depth
    weights = []
    for cin, cout in zip(chans[:-1], chans[1:]):
        std = np.sqrt(init_gain / (cin * f * f))
        weights.append((rng.standard_normal((cout, cin, f, f)) * std).astype(dtype))
    final_shape = (out_channels, width, f, f)
    if final_scale == 0:
        weights.append(np.zeros(final_shape, dtype=dtype))
    else:
        std = final_scale * np.sqrt(2.0 / (width * f * f))
        weights.append((rng.standard_normal(final_shape) * std).astype(dtype))
    thetas = [np.full(width, threshold_init, dtype=dtype) for _ in range(depth)]
    return PUNet(weights, thetas)


def _to_nhwc(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _to_nchw(x):
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def punet_apply(net: PUNet, x: np.ndarray, keep: bool | str = False):
    """Run the sub-network on an NCHW tensor.

    With ``keep`` the activations needed by :func:`punet_backward` are
    returned as well; ``keep="cols"`` additionally keeps the im2col matrices
    so the backward pass does not rebuild them (more memory, less time).
    Internally the layers run channels-last.
    """
    if x.ndim != 4 or x.shape[1] != net.in_channels:
        raise ValueError(
            f"PUNet expects {net.in_channels} input channels, got input of shape {x.shape}"
        )
    want_cols = keep == "cols"
    cache = [] if keep else None
    h = _to_nhwc(x)
    for w, th in zip(net.weights[:-1], net.thetas):
        a, cols = conv2d_nhwc(h, w, keep_cols=True)
        if keep:
            cache.append((h, cols if want_cols else None, a))
        h = soft_threshold(a, np.abs(th), axis=-1)
    out, cols = conv2d_nhwc(h, net.weights[-1], keep_cols=True)
    if keep:
        cache.append((h, cols if want_cols else None, None))
    out = _to_nchw(out)
    return (out, cache) if keep else out


def punet_backward(net: PUNet, grad_out: np.ndarray, cache) -> tuple[np.ndarray, dict]:
    grads = {}
    h, cols, _ = cache[-1]
    g, grads[f"conv{net.depth}.weight"] = conv2d_nhwc_backward(
        _to_nhwc(grad_out), h, net.weights[-1], cols
    )
    for k in range(net.depth - 1, -1, -1):
        h, cols, a = cache[k]
        th = net.thetas[k]
        g, g_lam = soft_threshold_backward(g, a, np.abs(th), axis=-1)
        grads[f"thr{k}"] = g_lam * np.where(th >= 0, 1, -1).astype(th.dtype)
        g, grads[f"conv{k}.weight"] = conv2d_nhwc_backward(g, h, net.weights[k], cols)
    return _to_nchw(g), grads


def _cache_size(cache) -> int:
    return sum(1 + (cols is not None) + (a is not None) for _, cols, a in cache)


@dataclass
class LinnScale:
    """An ordered list of (P-Net, U-Net) pairs.

    P-Nets map the 1-channel coarse part to a 3-channel prediction of the
    detail part; U-Nets map the 3-channel detail part to a 1-channel update.
    """

    pairs: list[tuple[PUNet, PUNet]] = field(default_factory=list)

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("LinnScale needs at least one lifting pair")
        for i, (p, u) in enumerate(self.pairs):
            if (p.in_channels, p.out_channels) != (1, 3) or (u.in_channels, u.out_channels) != (3, 1):
                raise ValueError(f"pair {i}: P must map 1->3 channels and U 3->1")

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, (p, u) in enumerate(self.pairs):
            params.update({f"pair{i}.P.{k}": v for k, v in p.parameters().items()})
            params.update({f"pair{i}.U.{k}": v for k, v in u.parameters().items()})
        return params


def init_scale(
    pairs: int = 4,
    depth: int = 8,
    width: int = 16,
    kernel_size: int = 3,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
    final_scale: float = 0.0,
    init_gain: float = 2.0,
) -> LinnScale:
    rng = rng if rng is not None else np.random.default_rng()
    kw = dict(depth=depth, width=width, kernel_size=kernel_size, rng=rng, dtype=dtype,
              final_scale=final_scale, init_gain=init_gain)
    return LinnScale([(init_punet(1, 3, **kw), init_punet(3, 1, **kw)) for _ in range(pairs)])


def _check_bands(zd, zc):
    if zd.ndim != 4 or zd.shape[1] != 3 or zc.ndim != 4 or zc.shape[1] != 1:
        raise ValueError(f"expected detail (N,3,H,W) and coarse (N,1,H,W), got {zd.shape}, {zc.shape}")
    if zd.shape[0] != zc.shape[0] or zd.shape[2:] != zc.shape[2:]:
        raise ValueError(f"detail {zd.shape} and coarse {zc.shape} disagree")


def linn_forward(scale: LinnScale, zd, zc, trace: bool = False, counter=None):
    """Apply the lifting pairs in order; with ``trace`` also return activations."""
    _check_bands(zd, zc)
    counter = counter or _NULL
    steps = [] if trace else None
    for p, u in scale.pairs:
        if trace:
            pc, p_cache = punet_apply(p, zc, keep=True)
            zd = zd - pc
            uc, u_cache = punet_apply(u, zd, keep=True)
            zc = zc + uc
            steps.append((p_cache, u_cache))
            counter.hold(_cache_size(p_cache) + _cache_size(u_cache))
        else:
            zd = zd - punet_apply(p, zc)
            zc = zc + punet_apply(u, zd)
    return (zd, zc, steps) if trace else (zd, zc)


def linn_inverse(scale: LinnScale, zd, zc, trace: bool = False, counter=None):
    """Undo :func:`linn_forward`, running the pairs in reverse order."""
    _check_bands(zd, zc)
    counter = counter or _NULL
    steps = [] if trace else None
    for p, u in reversed(scale.pairs):
        if trace:
            uc, u_cache = punet_apply(u, zd, keep=True)
            zc = zc - uc
            pc, p_cache = punet_apply(p, zc, keep=True)
            zd = zd + pc
            steps.append((p_cache, u_cache))
            counter.hold(_cache_size(p_cache) + _cache_size(u_cache))
        else:
            zc = zc - punet_apply(u, zd)
            zd = zd + punet_apply(p, zc)
    return (zd, zc, steps) if trace else (zd, zc)


def _accumulate(grads: dict, i: int, g_p: dict, g_u: dict) -> None:
    for tag, g in (("P", g_p), ("U", g_u)):
        for k, v in g.items():
            key = f"pair{i}.{tag}.{k}"
            if key in grads:
                grads[key] = grads[key] + v
            else:
                grads[key] = v


def _forward_step_backward(p, u, gd, gc, p_cache, u_cache):
    # d' = d - P(c); c' = c + U(d')
    gu_in, g_u = punet_backward(u, gc, u_cache)
    gd = gd + gu_in
    gp_in, g_p = punet_backward(p, -gd, p_cache)
    return gd, gc + gp_in, g_p, g_u


def _inverse_step_backward(p, u, gd, gc, p_cache, u_cache):
    # c = c' - U(d'); d = d' + P(c)
    gp_in, g_p = punet_backward(p, gd, p_cache)
    gc = gc + gp_in
    gu_in, g_u = punet_backward(u, -gc, u_cache)
    return gd + gu_in, gc, g_p, g_u


def linn_backward_trace(scale: LinnScale, grad_zd, grad_zc, steps, counter=None):
    """Backward of :func:`linn_forward` using its retained trace."""
    counter = counter or _NULL
    grads: dict[str, np.ndarray] = {}
    gd, gc = grad_zd, grad_zc
    for i in range(len(scale.pairs) - 1, -1, -1):
        p, u = scale.pairs[i]
        p_cache, u_cache = steps[i]
        gd, gc, g_p, g_u = _forward_step_backward(p, u, gd, gc, p_cache, u_cache)
        _accumulate(grads, i, g_p, g_u)
        counter.release(_cache_size(p_cache) + _cache_size(u_cache))
        steps[i] = None
    return gd, gc, grads


def linn_backward_memeff(scale: LinnScale, grad_zd, grad_zc, zd, zc, counter=None):
    """Backward of :func:`linn_forward` from its outputs alone.

    Each step's inputs are rebuilt with the inverse equations; the sub-network
    activations needed for that step are produced on the way and dropped
    right after use.
    """
    _check_bands(zd, zc)
    counter = counter or _NULL
    grads: dict[str, np.ndarray] = {}
    gd, gc = grad_zd, grad_zc
    counter.hold(2)
    for i in range(len(scale.pairs) - 1, -1, -1):
        p, u = scale.pairs[i]
        uc, u_cache = punet_apply(u, zd, keep="cols")
        counter.hold(_cache_size(u_cache))
        zc = zc - uc
        pc, p_cache = punet_apply(p, zc, keep="cols")
        counter.hold(_cache_size(p_cache))
        zd = zd + pc
        gd, gc, g_p, g_u = _forward_step_backward(p, u, gd, gc, p_cache, u_cache)
        _accumulate(grads, i, g_p, g_u)
        counter.release(_cache_size(p_cache) + _cache_size(u_cache))
    counter.release(2)
    return gd, gc, grads


def linn_inverse_backward_trace(scale: LinnScale, grad_zd, grad_zc, steps, counter=None):
    """Backward of :func:`linn_inverse` using its retained trace."""
    counter = counter or _NULL
    grads: dict[str, np.ndarray] = {}
    gd, gc = grad_zd, grad_zc
    n = len(scale.pairs)
    # steps[j] belongs to pair n-1-j; walk them back from the last executed
    for j in range(n - 1, -1, -1):
        i = n - 1 - j
        p, u = scale.pairs[i]
        p_cache, u_cache = steps[j]
        gd, gc, g_p, g_u = _inverse_step_backward(p, u, gd, gc, p_cache, u_cache)
        _accumulate(grads, i, g_p, g_u)
        counter.release(_cache_size(p_cache) + _cache_size(u_cache))
        steps[j] = None
    return gd, gc, grads


def linn_inverse_backward_memeff(scale: LinnScale, grad_zd, grad_zc, zd, zc, counter=None):
    """Backward of :func:`linn_inverse` from its outputs, recomputing forward."""
    _check_bands(zd, zc)
    counter = counter or _NULL
    grads: dict[str, np.ndarray] = {}
    gd, gc = grad_zd, grad_zc
    counter.hold(2)
    for i, (p, u) in enumerate(scale.pairs):
        pc, p_cache = punet_apply(p, zc, keep="cols")
        counter.hold(_cache_size(p_cache))
        zd = zd - pc
        uc, u_cache = punet_apply(u, zd, keep="cols")
        counter.hold(_cache_size(u_cache))
        zc = zc + uc
        gd, gc, g_p, g_u = _inverse_step_backward(p, u, gd, gc, p_cache, u_cache)
        _accumulate(grads, i, g_p, g_u)
        counter.release(_cache_size(p_cache) + _cache_size(u_cache))
    counter.release(2)
    return gd, gc, grads
