"""The full denoiser: DWT, LINN forward, detail denoising, LINN inverse, IDWT.

With two scales the second model (its own DWT, LINN and head) denoises the
coarse output of the first scale's forward pass before the first scale is
inverted.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import linn
from .denoiser import LISTAHead, STHead, head_apply, head_backward, init_lista_head, init_st_head
from .wavelet import WaveletBands, dwt_forward, dwt_inverse


@dataclass(frozen=True)
class HParams:
    pairs: int = 4          # lifting pairs per scale
    depth: int = 8          # conv + soft-threshold layers per P/U net
    width: int = 16         # channels inside P/U nets
    kernel_size: int = 3
    lista_layers: int = 3
    scales: int = 1
    head: str = "st"        # "st" or "lista"

    def __post_init__(self):
        if self.head not in ("st", "lista"):
            raise ValueError(f"unknown denoiser head {self.head!r}")
        if self.scales not in (1, 2):
            raise ValueError("only 1 or 2 scales are supported")
        for name in ("pairs", "depth", "width", "kernel_size", "lista_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LinnModel:
    hparams: HParams
    scales: list[linn.LinnScale]
    heads: list[STHead | LISTAHead]
    sigma_n: float
    sigma_t: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sigma_n > 0:
            raise ValueError("sigma_n must be positive")
        if len(self.scales) != self.hparams.scales or len(self.heads) != self.hparams.scales:
            raise ValueError("number of scales/heads does not match hparams")
        for head in self.heads:
            if head.kind != self.hparams.head:
                raise ValueError(f"head {head.kind!r} does not match hparams head {self.hparams.head!r}")

    @property
    def dtype(self):
        return self.scales[0].pairs[0][0].weights[0].dtype

    def parameters(self) -> dict[str, np.ndarray]:
        """All learnable arrays by name; the arrays are the live model storage."""
        params = {}
        for s, (scale, head) in enumerate(zip(self.scales, self.heads)):
            params.update({f"s{s}.{k}": v for k, v in scale.parameters().items()})
            params.update({f"s{s}.head.{k}": v for k, v in head.parameters().items()})
        return params

    def astype(self, dtype) -> "LinnModel":
        out = copy.deepcopy(self)
        _cast_inplace(out, dtype)
        return out


def _cast_inplace(model: LinnModel, dtype) -> None:
    for scale in model.scales:
        for p, u in scale.pairs:
            for net in (p, u):
                net.weights = [w.astype(dtype) for w in net.weights]
                net.thetas = [t.astype(dtype) for t in net.thetas]
    for head in model.heads:
        if isinstance(head, STHead):
            head.theta = head.theta.astype(dtype)
        else:
            head.we = [w.astype(dtype) for w in head.we]
            head.wg = [w.astype(dtype) for w in head.wg]
            head.thetas = [t.astype(dtype) for t in head.thetas]
            head.ws = head.ws.astype(dtype)


def init_model(
    hparams: HParams | None = None,
    sigma_n: float = 25.0,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
    final_scale: float = 0.0,
    init_gain: float = 2.0,
) -> LinnModel:
    hp = hparams or HParams()
    rng = rng if rng is not None else np.random.default_rng(0)
    scales, heads = [], []
    for _ in range(hp.scales):
        scales.append(
            linn.init_scale(hp.pairs, hp.depth, hp.width, hp.kernel_size, rng, dtype, final_scale, init_gain)
        )
        if hp.head == "st":
            heads.append(init_st_head(dtype))
        else:
            heads.append(init_lista_head(hp.lista_layers, hp.kernel_size, dtype))
    return LinnModel(hp, scales, heads, float(sigma_n))


def _check_image(model: LinnModel, y: np.ndarray) -> None:
    if not isinstance(model, LinnModel) or not model.scales:
        raise ValueError("model is not initialised")
    if y.ndim != 4 or y.shape[1] != 1:
        raise ValueError(f"expected grayscale images of shape (N,1,H,W), got {y.shape}")


def _scale_apply(model: LinnModel, s: int, img: np.ndarray) -> np.ndarray:
    bands = dwt_forward(img)
    zd, zc = linn.linn_forward(model.scales[s], bands.detail, bands.coarse)
    g = head_apply(model.heads[s], zd)
    if s + 1 < len(model.scales):
        zc = _scale_apply(model, s + 1, zc)
    zd0, zc0 = linn.linn_inverse(model.scales[s], g, zc)
    return dwt_inverse(WaveletBands(coarse=zc0, detail=zd0))


def denoise_image(model: LinnModel, y: np.ndarray) -> np.ndarray:
    """Denoise a (N,1,H,W) batch; output is not clipped."""
    _check_image(model, y)
    return _scale_apply(model, 0, y.astype(model.dtype, copy=False))


def transform(model: LinnModel, y: np.ndarray, scale: int = 0):
    """Detail bands before and after denoising, and the coarse band, at ``scale``."""
    _check_image(model, y)
    img = y.astype(model.dtype, copy=False)
    for s in range(scale + 1):
        bands = dwt_forward(img)
        zd, zc = linn.linn_forward(model.scales[s], bands.detail, bands.coarse)
        img = zc
    return zd, head_apply(model.heads[scale], zd), zc


# --- training forward / backward --------------------------------------------


@dataclass
class _ScaleCtx:
    mode: str
    fwd_out: tuple | None = None
    fwd_steps: list | None = None
    inv_out: tuple | None = None
    inv_steps: list | None = None
    head_cache: object = None


def model_forward(model: LinnModel, y: np.ndarray, memory_efficient: bool = True, counter=None):
    """Forward pass that keeps what :func:`model_backward` needs."""
    _check_image(model, y)
    ctxs: list[_ScaleCtx] = []
    out = _scale_forward(model, 0, y, memory_efficient, counter, ctxs)
    return out, ctxs


def _scale_forward(model, s, img, memeff, counter, ctxs):
    ctx = _ScaleCtx("memeff" if memeff else "trace")
    ctxs.append(ctx)
    scale = model.scales[s]
    bands = dwt_forward(img)
    if memeff:
        zd, zc = linn.linn_forward(scale, bands.detail, bands.coarse)
        ctx.fwd_out = (zd, zc)
    else:
        zd, zc, ctx.fwd_steps = linn.linn_forward(scale, bands.detail, bands.coarse, True, counter)
    g, ctx.head_cache = head_apply(model.heads[s], zd, keep=True)
    if s + 1 < len(model.scales):
        zc = _scale_forward(model, s + 1, zc, memeff, counter, ctxs)
    if memeff:
        zd0, zc0 = linn.linn_inverse(scale, g, zc)
        ctx.inv_out = (zd0, zc0)
    else:
        zd0, zc0, ctx.inv_steps = linn.linn_inverse(scale, g, zc, True, counter)
    return dwt_inverse(WaveletBands(coarse=zc0, detail=zd0))


def model_backward(model: LinnModel, ctxs, grad_out: np.ndarray, counter=None):
    """Gradients of a scalar loss w.r.t. all parameters and the input image."""
    grads: dict[str, np.ndarray] = {}
    g_img = _scale_backward(model, 0, ctxs, grad_out, grads, counter)
    return grads, g_img


def _merge(grads, prefix, part):
    for k, v in part.items():
        key = prefix + k
        grads[key] = grads[key] + v if key in grads else v


def _scale_backward(model, s, ctxs, grad_out, grads, counter):
    ctx = ctxs[s]
    scale = model.scales[s]
    gb = dwt_forward(grad_out)  # adjoint of dwt_inverse
    if ctx.mode == "memeff":
        g_g, g_zc, g_inv = linn.linn_inverse_backward_memeff(
            scale, gb.detail, gb.coarse, *ctx.inv_out, counter=counter
        )
    else:
        g_g, g_zc, g_inv = linn.linn_inverse_backward_trace(
            scale, gb.detail, gb.coarse, ctx.inv_steps, counter
        )
    _merge(grads, f"s{s}.", g_inv)
    if s + 1 < len(model.scales):
        g_zc = _scale_backward(model, s + 1, ctxs, g_zc, grads, counter)
    g_zd, g_head = head_backward(model.heads[s], g_g, ctx.head_cache)
    _merge(grads, f"s{s}.head.", g_head)
    if ctx.mode == "memeff":
        g_d0, g_c0, g_fwd = linn.linn_backward_memeff(scale, g_zd, g_zc, *ctx.fwd_out, counter=counter)
    else:
        g_d0, g_c0, g_fwd = linn.linn_backward_trace(scale, g_zd, g_zc, ctx.fwd_steps, counter)
    _merge(grads, f"s{s}.", g_fwd)
    return dwt_inverse(WaveletBands(coarse=g_c0, detail=g_d0))  # adjoint of dwt_forward


def loss_and_grads(model: LinnModel, y: np.ndarray, x: np.ndarray, memory_efficient: bool = True):
    """MSE training loss for one batch and its gradients."""
    from .train import mse_loss

    xhat, ctxs = model_forward(model, y, memory_efficient)
    loss, g = mse_loss(xhat, x)
    grads, _ = model_backward(model, ctxs, g)
    return loss, grads


# --- model size ---------------------------------------------------------------


def count_params(model: LinnModel) -> dict[str, int]:
    """Learnable parameter counts split by role.

    The LISTA synthesis conv ``Ws`` is booked on the transform side;
    ``denoiser`` counts only the parameters that drive shrinkage.
    """
    weights = thresholds = synthesis = denoiser = 0
    for scale, head in zip(model.scales, model.heads):
        for p, u in scale.pairs:
            for net in (p, u):
                weights += sum(w.size for w in net.weights)
                thresholds += sum(t.size for t in net.thetas)
        if isinstance(head, STHead):
            denoiser += head.theta.size
        else:
            denoiser += head.shrinkage_parameter_count()
            synthesis += head.ws.size
    transform = weights + thresholds + synthesis
    return {
        "transform_weights": weights,
        "transform_thresholds": thresholds,
        "synthesis": synthesis,
        "transform": transform,
        "denoiser": denoiser,
        "total": transform + denoiser,
    }
