"""Sparsity-driven denoising heads for the detail bands, plus an ISTA oracle.

Convention: the soft-threshold ``S_lam`` is the exact minimiser of
``||z - g||^2 + 2 lam ||g||_1``.  ISTA below minimises
``||z - D*g||^2 + 2 lam ||g||_1`` with the update

    g <- S_{lam/mu}(g - (1/mu) D^T (D*g - z)),

so with ``D`` the identity and ``mu = 1`` one step from zero lands on
``S_lam(z)``.  Heads store thresholds directly, so this is the only place
the factor of two matters.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .tensor import conv2d, conv2d_backward, soft_threshold, soft_threshold_backward


class UnsupportedHeadError(TypeError):
    """Raised when an operation is not defined for the model's denoiser head."""


def _sign(theta: np.ndarray) -> np.ndarray:
    return np.where(theta >= 0, 1, -1).astype(theta.dtype)


@dataclass
class STHead:
    """One learned soft-threshold per detail channel.

    ``gain`` rescales the effective thresholds at test time (noise-level
    adaptation) without touching the trained ``theta``.
    """

    theta: np.ndarray
    gain: float = 1.0

    kind = "st"

    def __post_init__(self):
        if self.theta.shape != (3,):
            raise ValueError(f"ST head needs 3 thresholds, got shape {self.theta.shape}")

    def thresholds(self) -> np.ndarray:
        return np.abs(self.theta) * self.theta.dtype.type(self.gain)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"theta": self.theta}


def init_st_head(dtype=np.float32, threshold_init: float = 1e-3) -> STHead:
    return STHead(np.full(3, threshold_init, dtype=dtype))


def st_denoise(head: STHead, zd: np.ndarray, keep: bool = False):
    out = soft_threshold(zd, head.thresholds())
    return (out, zd) if keep else out


def st_backward(head: STHead, grad_out: np.ndarray, cache) -> tuple[np.ndarray, dict]:
    g, g_lam = soft_threshold_backward(grad_out, cache, head.thresholds())
    scale = head.theta.dtype.type(head.gain)
    return g, {"theta": g_lam * scale * _sign(head.theta)}


@dataclass
class LISTAHead:
    """Unrolled ISTA with learned kernels.

    Layer ``t`` computes ``g <- S_{|theta_t|}(We_t * g + Wg_t * z)`` from
    ``g = 0``; the output is ``Ws * g_T``.
    """

    we: list[np.ndarray]
    wg: list[np.ndarray]
    thetas: list[np.ndarray]
    ws: np.ndarray

    kind = "lista"

    def __post_init__(self):
        if not (len(self.we) == len(self.wg) == len(self.thetas)) or not self.we:
            raise ValueError("LISTA head needs matching, non-empty We/Wg/threshold lists")

    @property
    def layers(self) -> int:
        return len(self.we)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for t in range(self.layers):
            params[f"layer{t}.We"] = self.we[t]
            params[f"layer{t}.Wg"] = self.wg[t]
            params[f"layer{t}.thr"] = self.thetas[t]
        params["Ws"] = self.ws
        return params

    def shrinkage_parameter_count(self) -> int:
        """Parameters of the iterative shrinkage layers (excludes ``Ws``)."""
        return sum(a.size for t in range(self.layers) for a in (self.we[t], self.wg[t], self.thetas[t]))


def _center_kernel(mat: np.ndarray, f: int) -> np.ndarray:
    k = np.zeros(mat.shape + (f, f), dtype=mat.dtype)
    k[:, :, f // 2, f // 2] = mat
    return k


def init_lista_head(
    layers: int = 3, kernel_size: int = 3, dtype=np.float32, threshold_init: float = 1e-3
) -> LISTAHead:
    """Start from ISTA unrolled with an identity dictionary and unit step."""
    eye = np.eye(3, dtype=dtype)
    return LISTAHead(
        we=[np.zeros((3, 3, kernel_size, kernel_size), dtype=dtype) for _ in range(layers)],
        wg=[_center_kernel(eye, kernel_size) for _ in range(layers)],
        thetas=[np.full(3, threshold_init, dtype=dtype) for _ in range(layers)],
        ws=_center_kernel(eye, kernel_size),
    )


def lista_denoise(head: LISTAHead, zd: np.ndarray, keep: bool = False, return_codes: bool = False):
    n, _, h, w = zd.shape
    g = np.zeros((n, head.we[0].shape[1], h, w), dtype=zd.dtype)
    layers = []
    codes = []
    for we, wg, th in zip(head.we, head.wg, head.thetas):
        a = conv2d(g, we) + conv2d(zd, wg)
        layers.append((g, a))
        g = soft_threshold(a, np.abs(th))
        codes.append(g)
    out = conv2d(g, head.ws)
    if return_codes:
        return out, codes
    return (out, (zd, layers, g)) if keep else out


def lista_backward(head: LISTAHead, grad_out: np.ndarray, cache) -> tuple[np.ndarray, dict]:
    zd, layers, g_last = cache
    grads = {}
    gg, grads["Ws"], _ = conv2d_backward(grad_out, g_last, head.ws)
    gz = np.zeros_like(zd)
    for t in range(head.layers - 1, -1, -1):
        g_in, a = layers[t]
        th = head.thetas[t]
        ga, g_lam = soft_threshold_backward(gg, a, np.abs(th))
        grads[f"layer{t}.thr"] = g_lam * _sign(th)
        gg, grads[f"layer{t}.We"], _ = conv2d_backward(ga, g_in, head.we[t])
        gz_t, grads[f"layer{t}.Wg"], _ = conv2d_backward(ga, zd, head.wg[t])
        gz += gz_t
    return gz, grads


def head_apply(head, zd, keep=False):
    if isinstance(head, STHead):
        return st_denoise(head, zd, keep)
    return lista_denoise(head, zd, keep)


def head_backward(head, grad_out, cache):
    if isinstance(head, STHead):
        return st_backward(head, grad_out, cache)
    return lista_backward(head, grad_out, cache)


# --- ISTA reference solver -------------------------------------------------


def _adjoint_kernel(d: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(d[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


def dictionary_lipschitz(d: np.ndarray, code_shape, iters: int = 200, seed: int = 0) -> float:
    """Power-iteration estimate of the largest eigenvalue of ``D^T D``."""
    rng = np.random.default_rng(seed)
    dt = _adjoint_kernel(d)
    v = rng.standard_normal(code_shape)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = conv2d(conv2d(v, d), dt)
        est = float(np.vdot(v, w))
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
    return est


@dataclass
class L1Problem:
    """``min_g ||z - D*g||^2 + 2 lam ||g||_1`` with ISTA step ``1/mu``.

    ``z`` is (N, C, H, W); ``dictionary`` is a (C, Cg, f, f) conv kernel
    mapping codes to observations; ``lam`` is a scalar or one value per
    code channel.  ``mu`` defaults to 1.05 times the power-iteration
    estimate of the Lipschitz constant of ``D^T D``.
    """

    z: np.ndarray
    dictionary: np.ndarray
    lam: np.ndarray | float
    mu: float | None = None
    lipschitz: float = field(init=False)

    def __post_init__(self):
        if np.any(np.asarray(self.lam) < 0):
            raise ValueError("L1Problem: lam must be non-negative")
        if self.dictionary.shape[0] != self.z.shape[1]:
            raise ValueError(
                f"dictionary maps to {self.dictionary.shape[0]} channels, z has {self.z.shape[1]}"
            )
        self.lipschitz = dictionary_lipschitz(self.dictionary, self.code_shape)
        if self.mu is None:
            self.mu = 1.05 * self.lipschitz
        if not self.mu > 0 or self.mu < self.lipschitz * (1 - 1e-9):
            raise ValueError(
                f"step parameter mu={self.mu} must be >= Lipschitz estimate {self.lipschitz:.6g}"
            )

    @property
    def code_shape(self):
        n, _, h, w = self.z.shape
        return (n, self.dictionary.shape[1], h, w)

    def lam_per_channel(self) -> np.ndarray:
        lam = np.asarray(self.lam, dtype=self.z.dtype)
        return np.broadcast_to(lam, (self.code_shape[1],)).copy()

    def objective(self, g: np.ndarray) -> float:
        r = self.z - conv2d(g, self.dictionary)
        lam = self.lam_per_channel().reshape(1, -1, 1, 1)
        return float(np.sum(r * r) + 2 * np.sum(lam * np.abs(g)))


def ista_solve(problem: L1Problem, iters: int, return_iterates: bool = False):
    """Run ISTA from ``g = 0``; return the final code and the objective trace."""
    d = problem.dictionary
    dt = _adjoint_kernel(d)
    mu = problem.mu
    thr = problem.lam_per_channel() / mu
    g = np.zeros(problem.code_shape, dtype=problem.z.dtype)
    trace = [problem.objective(g)]
    iterates = []
    for _ in range(iters):
        grad = conv2d(conv2d(g, d) - problem.z, dt)
        g = soft_threshold(g - grad / mu, thr)
        trace.append(problem.objective(g))
        iterates.append(g)
    if return_iterates:
        return g, trace, iterates
    return g, trace


def lista_from_ista(dictionary: np.ndarray, lam, mu: float, layers: int, kernel_size: int = 3) -> LISTAHead:
    """LISTA head whose layers reproduce ISTA iterations exactly.

    Only pointwise dictionaries (all taps off the kernel centre zero) are
    accepted: for them ``I - D^T D / mu`` is again pointwise, so it fits a
    single f x f layer with no boundary effects.
    """
    f = dictionary.shape[-1]
    off_center = dictionary.copy()
    off_center[:, :, f // 2, f // 2] = 0
    if np.any(off_center):
        raise ValueError("lista_from_ista: only pointwise (centre-tap) dictionaries unroll exactly")
    dmat = dictionary[:, :, f // 2, f // 2]
    cg = dmat.shape[1]
    we = np.eye(cg, dtype=dmat.dtype) - dmat.T @ dmat / mu
    wg = dmat.T / mu
    thr = np.broadcast_to(np.asarray(lam, dtype=dmat.dtype) / mu, (cg,)).copy()
    return LISTAHead(
        we=[_center_kernel(we, kernel_size) for _ in range(layers)],
        wg=[_center_kernel(wg, kernel_size) for _ in range(layers)],
        thetas=[thr.copy() for _ in range(layers)],
        ws=_center_kernel(dmat, kernel_size),
    )


def adapt_thresholds(model, sigma_t: float):
    """Copy of ``model`` with ST thresholds scaled by ``sigma_t^2 / sigma_n^2``.

    The trained thresholds are kept as they are and the factor is held as a
    gain, so adapting back to the training noise level is exact.
    """
    if not sigma_t > 0:
        raise ValueError(f"sigma_t must be positive, got {sigma_t}")
    for head in model.heads:
        if not isinstance(head, STHead):
            raise UnsupportedHeadError("threshold adaptation is only defined for ST heads")
    out = copy.deepcopy(model)
    factor = sigma_t**2 / model.sigma_n**2
    for head in out.heads:
        head.gain = factor
    out.sigma_t = float(sigma_t)
    return out
