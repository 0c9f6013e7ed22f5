"""Registration geometry: pyramids, displacement fields, warping and Jacobians.

Unbatched numpy conventions used throughout the package:

* image: ``(*spatial)`` with 2 or 3 axes, intensities in [0, 1]
* mask: ``(C, *spatial)`` soft memberships in [0, 1]
* field: ``(ndim, *spatial)``; component ``a`` displaces along axis ``a``

Functions that take part in training (``upsample_field``, ``compose_residual``,
``warp``) also accept batched :class:`~mrreg.diffgraph.Tensor` inputs of shape
``(N, C, *spatial)`` and stay differentiable in that case.
"""

import numpy as np

from . import diffgraph as dg
from .errors import OddExtentError, ShapeError


def _as_batched(arr, leading):
    """Add batch (and channel) axes to an unbatched numpy array."""
    arr = np.asarray(arr)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(dg.get_default_dtype())
    return dg.Tensor(arr.reshape((1,) * leading + arr.shape))


def build_pyramid(img, levels, ndim=None):
    """Return ``levels`` images ordered coarsest first; the last is ``img``.

    ``img`` may be an unbatched array or a batched Tensor. For unbatched input
    any axes before the last ``ndim`` spatial ones (mask classes) are kept;
    ``ndim`` defaults to 2 for 2-axis arrays and 3 otherwise, so pass
    ``ndim=2`` for a ``(C, H, W)`` mask. Masks stay soft.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if isinstance(img, dg.Tensor):
        spatial = img.shape[2:]
        cur = img
    else:
        arr = np.asarray(img)
        if ndim is None:
            ndim = 2 if arr.ndim == 2 else 3
        spatial = arr.shape[arr.ndim - ndim:]
        cur = None
    factor = 2 ** (levels - 1)
    if any(n % factor for n in spatial):
        raise OddExtentError(f"extents {spatial} not divisible by 2**{levels - 1}")

    if cur is None:
        lead = arr.shape[: arr.ndim - len(spatial)]
        cur = _as_batched(arr.reshape((-1,) + spatial), 1)
        out = [cur]
        with dg.no_grad():
            for _ in range(levels - 1):
                out.append(dg.resize_linear(out[-1], 0.5))
        return [t.data.reshape(lead + t.shape[2:]) for t in reversed(out)]

    out = [cur]
    for _ in range(levels - 1):
        out.append(dg.resize_linear(out[-1], 0.5))
    return out[::-1]


def upsample_field(field):
    """Double the extents of a field and scale its vectors by 2."""
    if isinstance(field, dg.Tensor):
        return dg.resize_linear(field, 2.0) * 2.0
    with dg.no_grad():
        out = upsample_field(_as_batched(field, 1))
    return out.data[0]


def compose_residual(prev, residual):
    """Composed field at a finer level: ``upsample_field(prev) + residual``."""
    if isinstance(prev, dg.Tensor) or isinstance(residual, dg.Tensor):
        prev = prev if isinstance(prev, dg.Tensor) else _as_batched(prev, 1)
        residual = residual if isinstance(residual, dg.Tensor) else _as_batched(residual, 1)
        up = upsample_field(prev)
        if up.shape != residual.shape:
            raise ShapeError(f"upsampled {up.shape} does not match residual {residual.shape}")
        return up + residual
    up = upsample_field(prev)
    residual = np.asarray(residual)
    if up.shape != residual.shape:
        raise ShapeError(f"upsampled {up.shape} does not match residual {residual.shape}")
    return up + residual


def warp(img, field):
    """Backward-warp an image or mask with a displacement field.

    Unbatched: ``img`` is ``(*spatial)`` or ``(C, *spatial)`` and ``field`` is
    ``(ndim, *spatial)``. Batched tensors go straight to ``grid_sample``.
    """
    if isinstance(img, dg.Tensor) or isinstance(field, dg.Tensor):
        img = img if isinstance(img, dg.Tensor) else _as_batched(img, 2)
        field = field if isinstance(field, dg.Tensor) else _as_batched(field, 1)
        return dg.grid_sample(img, field)
    field = np.asarray(field)
    img = np.asarray(img)
    nd = field.shape[0]
    if field.ndim != nd + 1 or img.shape[-nd:] != field.shape[1:]:
        raise ShapeError(f"field {field.shape} does not match image {img.shape}")
    lead = img.shape[:-nd]
    x = img.reshape((1, -1) + field.shape[1:])
    dtype = np.result_type(img.dtype, field.dtype, np.float32)
    with dg.no_grad():
        out = dg.grid_sample(dg.Tensor(x.astype(dtype)), dg.Tensor(field[None].astype(dtype)))
    return out.data.reshape(lead + field.shape[1:])


def identity_field(spatial, dtype=np.float64):
    return np.zeros((len(spatial),) + tuple(spatial), dtype=dtype)


def _forward_diff(arr, axis):
    """Forward differences with the backward difference reused at the last index."""
    d = np.diff(arr, axis=axis)
    last = np.take(d, [-1], axis=axis)
    return np.concatenate([d, last], axis=axis)


def jacobian_matrix(field):
    """Per-point Jacobian of ``p -> p + field(p)``, shape ``(*spatial, nd, nd)``."""
    field = np.asarray(field, dtype=np.float64)
    nd = field.shape[0]
    if field.ndim != nd + 1:
        raise ShapeError(f"field with {nd} components must have {nd} spatial axes")
    if any(n < 2 for n in field.shape[1:]):
        raise ShapeError("every extent must be >= 2 for finite differences")
    jac = np.empty(field.shape[1:] + (nd, nd))
    for i in range(nd):
        for j in range(nd):
            jac[..., i, j] = _forward_diff(field[i], j) + (1.0 if i == j else 0.0)
    return jac


def jacobian_det_map(field):
    """Determinant of the deformation Jacobian at every grid point."""
    j = jacobian_matrix(field)
    if j.shape[-1] == 2:
        return j[..., 0, 0] * j[..., 1, 1] - j[..., 0, 1] * j[..., 1, 0]
    return (
        j[..., 0, 0] * (j[..., 1, 1] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 1])
        - j[..., 0, 1] * (j[..., 1, 0] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 0])
        + j[..., 0, 2] * (j[..., 1, 0] * j[..., 2, 1] - j[..., 1, 1] * j[..., 2, 0])
    )


def nonpositive_jacobian_rate(field):
    """Fraction of grid points where the Jacobian determinant is <= 0."""
    det = jacobian_det_map(field)
    return float(np.count_nonzero(det <= 0) / det.size)
