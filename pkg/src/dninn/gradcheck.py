"""Central finite-difference checks for the hand-written backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import KinkMonitor

LossFn = Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    min_margin: float = np.inf
    margin: float = 1e-3
    crossings: list[str] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst_name(self) -> str | None:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)

    @property
    def kink_violation(self) -> bool:
        return self.min_margin < self.margin or bool(self.crossings)

    def ok(self, tol: float) -> bool:
        return not self.kink_violation and self.worst <= tol

    def lines(self) -> list[str]:
        out = [f"{name:40s} n={self.checked[name]:4d} max_rel_err={err:.3e}"
               for name, err in self.errors.items()]
        out.append(f"min soft-threshold margin: {self.min_margin:.3e} (required {self.margin:.1e})")
        if self.crossings:
            out.append(f"kink crossings under perturbation: {', '.join(self.crossings[:10])}")
        out.append(f"worst: {self.worst:.3e} ({self.worst_name})")
        return out


def rel_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    loss_fn: LossFn,
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
    margin: float = 1e-3,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare ``loss_fn``'s analytic gradients against central differences.

    ``loss_fn(params)`` returns ``(loss, grads)`` with one gradient per entry
    of ``params``.  Parameters are perturbed in place and restored.  With
    ``samples`` set, only that many random coordinates per tensor are probed.
    Soft-threshold inputs closer than ``margin`` to the kink, or whose active
    set flips under a perturbation, are reported as a kink violation.

    The relative error of each entry is ``|a - n| / max(|a|, |n|, floor_t)``
    with ``floor_t = max(floor, 1e-4 * max|grad_t|)``, so entries whose true
    gradient is zero are judged against the tensor's gradient scale.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, {name} is {p.dtype}")
    rng = rng if rng is not None else np.random.default_rng(0)
    report = GradCheckReport(margin=margin)

    with KinkMonitor(fingerprint=True) as mon:
        _, grads = loss_fn(params)
    report.min_margin = mon.min_margin
    base_sig = mon.signature
    global_max = max(float(np.max(np.abs(g), initial=0.0)) for g in grads.values())

    for name, p in params.items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        if samples is None or samples >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=samples, replace=False)
        # exactly-zero gradients (dead channels) are compared on the tensor's scale
        scale = float(np.max(np.abs(g), initial=0.0)) or global_max
        tensor_floor = max(floor, 1e-4 * scale)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            with KinkMonitor(fingerprint=True) as m_plus:
                f_plus, _ = loss_fn(params)
            flat[i] = orig - eps
            with KinkMonitor(fingerprint=True) as m_minus:
                f_minus, _ = loss_fn(params)
            flat[i] = orig
            if m_plus.signature != base_sig or m_minus.signature != base_sig:
                report.crossings.append(f"{name}[{i}]")
            numeric = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, rel_error(float(g[i]), numeric, tensor_floor))
        report.errors[name] = worst
        report.checked[name] = len(idx)
    return report


def model_gradcheck(
    hparams,
    seed: int = 0,
    size: int = 16,
    samples: int | None = 6,
    input_scale: float = 50.0,
    eps: float = 1e-5,
    margin: float = 1e-3,
    max_tries: int = 50,
    corrupt: str | None = None,
) -> tuple[GradCheckReport, int]:
    """Finite-difference check of the full denoiser loss on a 1x1xSxS image.

    Random float64 models (non-zero final convs, thresholds drawn so that
    shrinkage is active) are tried from ``seed`` upward until every
    soft-threshold input clears ``margin``.  Images and thresholds are
    multiplied by ``input_scale``; the network is positively homogeneous, so
    this only spreads pre-activations away from the kinks.
    ``corrupt`` names a parameter whose analytic gradient is deliberately
    scaled by 1.5, a negative control for the checker itself.
    Returns the report and the seed that was used.
    """
    from .model import init_model, loss_and_grads

    report = None
    for k in range(max_tries):
        s = seed + k
        rng = np.random.default_rng(s)
        model = init_model(hparams, 25.0, rng, dtype=np.float64, final_scale=0.5)
        _randomize_thresholds(model, rng, input_scale)
        x = rng.random((1, 1, size, size)) * input_scale
        y = x + 0.3 * input_scale * rng.standard_normal(x.shape)

        def fn(params, model=model, y=y, x=x):
            loss, grads = loss_and_grads(model, y, x)
            if corrupt is not None:
                grads[corrupt] = grads[corrupt] * 1.5
            return loss, grads

        with KinkMonitor() as mon:
            fn(model.parameters())
        if mon.min_margin < margin and k + 1 < max_tries:
            continue
        report = grad_check(fn, model.parameters(), eps=eps, samples=samples, rng=rng, margin=margin)
        return report, s
    return report, seed + max_tries - 1


def _randomize_thresholds(model, rng, scale):
    from .denoiser import STHead

    for sc in model.scales:
        for p, u in sc.pairs:
            for net in (p, u):
                for t in net.thetas:
                    t[:] = rng.uniform(0.1, 0.5, t.shape) * scale
    for head in model.heads:
        if isinstance(head, STHead):
            head.theta[:] = rng.uniform(0.2, 0.6, 3) * scale
        else:
            for t in head.thetas:
                t[:] = rng.uniform(0.2, 0.6, t.shape) * scale
