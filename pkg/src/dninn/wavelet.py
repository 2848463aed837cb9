"""Single-level undecimated 2D Haar transform with periodic boundaries.

The 1D analysis pair is ``lo = [1/2, 1/2]`` and ``hi = [1/2, -1/2]`` applied
as a correlation, ``lo(x)[n] = (x[n] + x[n+1]) / 2``.  Because
``|LO(w)|^2 + |HI(w)|^2 = 1`` the undecimated analysis is a tight frame with
bound 1, so synthesis is exactly the adjoint.

Detail channel order is fixed as LH, HL, HH, where the first letter is the
filter along rows (axis H) and the second along columns (axis W).  LH thus
responds to vertical edges, HL to horizontal ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DETAIL_ORDER = ("LH", "HL", "HH")


@dataclass
class WaveletBands:
    coarse: np.ndarray  # (N, 1, H, W)
    detail: np.ndarray  # (N, 3, H, W)

    def __post_init__(self):
        c, d = self.coarse, self.detail
        if c.ndim != 4 or c.shape[1] != 1:
            raise ValueError(f"coarse band must be (N,1,H,W), got {c.shape}")
        if d.ndim != 4 or d.shape[1] != 3:
            raise ValueError(f"detail bands must be (N,3,H,W), got {d.shape}")
        if (c.shape[0],) + c.shape[2:] != (d.shape[0],) + d.shape[2:]:
            raise ValueError(f"coarse {c.shape} and detail {d.shape} bands disagree")


def _lo(x, axis):
    return 0.5 * (x + np.roll(x, -1, axis=axis))


def _hi(x, axis):
    return 0.5 * (x - np.roll(x, -1, axis=axis))


def _lo_adj(x, axis):
    return 0.5 * (x + np.roll(x, 1, axis=axis))


def _hi_adj(x, axis):
    return 0.5 * (x - np.roll(x, 1, axis=axis))


def dwt_forward(image: np.ndarray) -> WaveletBands:
    if image.ndim != 4 or image.shape[1] != 1:
        raise ValueError(f"dwt_forward expects a (N,1,H,W) image, got {image.shape}")
    if image.shape[2] < 2 or image.shape[3] < 2:
        raise ValueError(f"dwt_forward needs H, W >= 2, got {image.shape[2:]}")
    lo_r, hi_r = _lo(image, 2), _hi(image, 2)
    ll = _lo(lo_r, 3)
    lh = _hi(lo_r, 3)
    hl = _lo(hi_r, 3)
    hh = _hi(hi_r, 3)
    return WaveletBands(coarse=ll, detail=np.concatenate([lh, hl, hh], axis=1))


def dwt_inverse(bands: WaveletBands) -> np.ndarray:
    """Adjoint of :func:`dwt_forward`, which is also its exact inverse."""
    ll = bands.coarse
    lh, hl, hh = (bands.detail[:, i : i + 1] for i in range(3))
    lo_r = _lo_adj(ll, 3) + _hi_adj(lh, 3)
    hi_r = _lo_adj(hl, 3) + _hi_adj(hh, 3)
    return _lo_adj(lo_r, 2) + _hi_adj(hi_r, 2)
