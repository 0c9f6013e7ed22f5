"""Similarity, smoothness and mask-overlap objectives.

Every function accepts either unbatched numpy arrays (returning a float) or
batched Tensors ``(N, C, *spatial)`` (returning a scalar Tensor averaged over
the batch), so the same code serves evaluation and training.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import diffgraph as dg
from .errors import ShapeError, ZeroVarianceError
from .regcore import warp

DICE_EPS = 1e-6
VARIANCE_FLOOR = 1e-12

# finest-level smoothness weight; coarser levels double it
FINEST_LAMBDA = {2: 8.0, 3: 2.0}


def default_lambdas(dims, levels):
    """Smoothness weights coarsest first, halving toward the finest level.

    2D with 5 levels gives (128, 64, 32, 16, 8); 3D with 4 gives (16, 8, 4, 2).
    """
    base = FINEST_LAMBDA[dims]
    return [base * 2 ** (levels - 1 - i) for i in range(levels)]


def _batched(x, lead):
    arr = np.asarray(x, dtype=np.float64)
    return dg.Tensor(arr.reshape((1,) * lead + arr.shape))


def _spatial_axes(x):
    return tuple(range(1, x.ndim))


def gncc(a, b):
    """Global normalized cross-correlation (Pearson correlation of intensities)."""
    if not isinstance(a, dg.Tensor) and not isinstance(b, dg.Tensor):
        if np.shape(a) != np.shape(b):
            raise ShapeError(f"gncc shapes differ: {np.shape(a)} vs {np.shape(b)}")
        with dg.no_grad():
            return float(gncc(_batched(a, 1), _batched(b, 1)).data)
    if a.shape != b.shape:
        raise ShapeError(f"gncc shapes differ: {a.shape} vs {b.shape}")
    axes = _spatial_axes(a)
    for t in (a, b):
        if np.any(t.data.reshape(t.shape[0], -1).var(axis=1) < VARIANCE_FLOOR):
            raise ZeroVarianceError("gncc is undefined for constant images")
    am = a - dg.reduce_mean(a, axes, keepdims=True)
    bm = b - dg.reduce_mean(b, axes, keepdims=True)
    num = dg.reduce_sum(am * bm, axes)
    den = dg.sqrt(dg.reduce_sum(dg.square(am), axes) * dg.reduce_sum(dg.square(bm), axes))
    return dg.reduce_mean(num / den)


def smoothness(field):
    """Mean squared forward difference over points, components and axes."""
    if not isinstance(field, dg.Tensor):
        with dg.no_grad():
            return float(smoothness(_batched(field, 1)).data)
    nd = field.ndim - 2
    if any(n < 2 for n in field.shape[2:]):
        raise ShapeError("smoothness needs extents >= 2")
    total = None
    for axis in range(2, field.ndim):
        hi = [slice(None)] * field.ndim
        lo = [slice(None)] * field.ndim
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        term = dg.reduce_mean(dg.square(field[tuple(hi)] - field[tuple(lo)]))
        total = term if total is None else total + term
    return total * (1.0 / nd)


def soft_dice(x, y):
    """Soft Dice overlap averaged over classes: (2 sum xy + eps) / (sum x^2 + sum y^2 + eps)."""
    if not isinstance(x, dg.Tensor) and not isinstance(y, dg.Tensor):
        if np.shape(x) != np.shape(y):
            raise ShapeError(f"mask shapes differ: {np.shape(x)} vs {np.shape(y)}")
        with dg.no_grad():
            return float(soft_dice(_batched(x, 1), _batched(y, 1)).data)
    if x.shape != y.shape:
        raise ShapeError(f"mask shapes differ: {x.shape} vs {y.shape}")
    axes = tuple(range(2, x.ndim))
    inter = dg.reduce_sum(x * y, axes)
    denom = dg.reduce_sum(dg.square(x), axes) + dg.reduce_sum(dg.square(y), axes)
    return dg.reduce_mean((inter * 2.0 + DICE_EPS) / (denom + DICE_EPS))


@dataclass
class LossWeights:
    lambdas: List[float]
    mask_enabled: bool = False

    @classmethod
    def defaults(cls, dims, levels, mask_enabled=False):
        return cls(default_lambdas(dims, levels), mask_enabled)


@dataclass
class LossReport:
    total: dg.Tensor
    gncc: List[float] = field(default_factory=list)
    smooth: List[float] = field(default_factory=list)
    dice: Optional[List[float]] = None

    @property
    def levels(self):
        return len(self.gncc)

    def terms(self, lambdas):
        """(gncc_term, smooth_term, dice_term), each already divided by K."""
        k = self.levels
        g = sum(1.0 - v for v in self.gncc) / k
        s = sum(lam * v for lam, v in zip(lambdas, self.smooth)) / k
        d = sum(1.0 - v for v in self.dice) / k if self.dice is not None else 0.0
        return g, s, d


def multires_loss(levels, source_pyr, target_pyr, weights, masks=None):
    """Average over levels of (1 - GNCC) + lambda * smoothness (+ 1 - soft Dice).

    ``levels`` is a :class:`~mrreg.network.LevelOutput`; pyramids are lists of
    batched Tensors ordered coarsest first. ``masks`` is an optional pair of
    mask pyramids, used only when ``weights.mask_enabled``.
    """
    k = len(levels.composed)
    if not (len(source_pyr) == len(target_pyr) == len(weights.lambdas) == k):
        raise ShapeError("pyramids, lambdas and network levels disagree on K")
    use_mask = weights.mask_enabled
    if use_mask and masks is None:
        raise ValueError("mask-guided loss requested without masks")

    report = LossReport(total=None, dice=[] if use_mask else None)
    total = None
    for i in range(k):
        fld = levels.composed[i]
        sim = gncc(warp(source_pyr[i], fld), target_pyr[i])
        reg = smoothness(levels.residuals[i])
        term = (1.0 - sim) + reg * float(weights.lambdas[i])
        report.gncc.append(float(sim.data))
        report.smooth.append(float(reg.data))
        if use_mask:
            dice = soft_dice(warp(masks[0][i], fld), masks[1][i])
            term = term + (1.0 - dice)
            report.dice.append(float(dice.data))
        total = term if total is None else total + term
    report.total = total * (1.0 / k)
    return report
