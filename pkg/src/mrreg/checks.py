"""Finite-difference gradient checks for every differentiable building block.

Each case is a scalar function of a few float64 arrays. Random inputs are
kept away from the non-differentiable points of the piecewise operators
(``leaky_relu`` at 0, ``grid_sample`` at integer sample positions and at the
image border) so central differences are meaningful. The full-network loss
cases contain thousands of such kinks that cannot all be avoided, so they use
a smaller step; a 1e-5 step crosses one every few seeds.
"""

import numpy as np

from . import diffgraph as dg
from .losses import LossWeights, default_lambdas, gncc, multires_loss, smoothness, soft_dice
from .network import ModelConfig, forward, init_params
from .regcore import build_pyramid

TOLERANCE = 1e-4


def _weighted(out, r):
    """Project ``out`` onto fixed random weights so the whole Jacobian is probed."""
    return dg.reduce_sum(out * dg.Tensor(r))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _interior_field(rng, n, spatial):
    """Field whose sample positions stay inside the grid and off integer coordinates."""
    nd = len(spatial)
    grid = np.stack(np.meshgrid(*[np.arange(s) for s in spatial], indexing="ij"))
    out = np.empty((n, nd) + tuple(spatial))
    for a, ext in enumerate(spatial):
        base = rng.integers(0, ext - 1, (n,) + tuple(spatial))
        out[:, a] = base + rng.uniform(0.15, 0.85, base.shape) - grid[a]
    return out


def _network_case(dims, rng, mask):
    extent = 8
    cfg = ModelConfig(dims=dims, levels=2, channels=[3, 4])
    params = init_params(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    for name in params:
        if ".head." in name:
            params.arrays[name] = rng.normal(0.0, 0.05, params[name].shape)
        elif name.endswith(".b"):
            params.arrays[name] = rng.normal(0.0, 0.1, params[name].shape)
    spatial = (extent,) * dims
    src = rng.uniform(0, 1, (2, 1) + spatial)
    tgt = rng.uniform(0, 1, (2, 1) + spatial)
    weights = LossWeights(default_lambdas(dims, 2), mask_enabled=mask)
    masks = None
    if mask:
        masks = (rng.uniform(0, 1, (2, 2) + spatial), rng.uniform(0, 1, (2, 2) + spatial))
    names = list(params)

    def f(*leaves):
        w = dict(zip(names, leaves))
        levels = forward(params, dg.Tensor(src), dg.Tensor(tgt), w)
        s_pyr, t_pyr = build_pyramid(dg.Tensor(src), 2), build_pyramid(dg.Tensor(tgt), 2)
        m = None
        if mask:
            m = (build_pyramid(dg.Tensor(masks[0]), 2), build_pyramid(dg.Tensor(masks[1]), 2))
        return multires_loss(levels, s_pyr, t_pyr, weights, m).total

    return f, [params[n] for n in names]


def gradient_cases(dims, seed):
    """``{name: (f, inputs, options)}`` for one random draw."""
    rng = np.random.default_rng([seed, dims])
    n = 6 if dims == 2 else 4
    sp = (n,) * dims
    cases = {}

    def add(name, f, inputs, **opts):
        cases[name] = (f, inputs, opts)

    a, b = rng.normal(size=(2, 3) + sp), rng.normal(size=(1, 3) + sp)
    pos = rng.uniform(0.5, 2.0, (2, 3) + sp)
    r = rng.normal(size=(2, 3) + sp)
    add("add", lambda x, y: _weighted(x + y, r), [a, b])
    add("sub", lambda x, y: _weighted(x - y, r), [a, b])
    add("mul", lambda x, y: _weighted(x * y, r), [a, b])
    add("div", lambda x, y: _weighted(x / y, r), [a, pos])
    add("square", lambda x: _weighted(dg.square(x), r), [a])
    add("sqrt", lambda x: _weighted(dg.sqrt(x), r), [pos])
    add("reduce_sum", lambda x: dg.reduce_sum(dg.square(dg.reduce_sum(x, (2,), keepdims=True))), [a])
    add("reduce_mean", lambda x: dg.reduce_sum(dg.square(dg.reduce_mean(x, (1, 2)))), [a])
    add("getitem", lambda x: dg.reduce_sum(dg.square(x[:, 1:, 1:])), [a])
    add("leaky_relu", lambda x: _weighted(dg.leaky_relu(x, 0.2), r), [_away_from_zero(rng, a.shape)])
    r5 = rng.normal(size=(2, 5) + sp)
    add("concat_channels", lambda x, y: _weighted(dg.concat_channels(x, y), r5), [a, rng.normal(size=(2, 2) + sp)])

    w = rng.normal(size=(4, 3) + (3,) * dims)
    bias = rng.normal(size=4)
    rc = rng.normal(size=(2, 4) + sp)
    add("conv", lambda x, k, c: _weighted(dg.conv(x, k, c, 1, 1), rc), [a, w, bias])
    half = tuple(s // 2 for s in sp)
    rh = rng.normal(size=(2, 4) + half)
    w1 = rng.normal(size=(4, 3) + (1,) * dims)
    add("conv_stride2", lambda x, k, c: _weighted(dg.conv(x, k, c, 2, 0), rh), [a, w1, bias])
    small = rng.normal(size=(2, 4) + half)
    wt = rng.normal(size=(4, 3) + (3,) * dims)
    rt = rng.normal(size=(2, 3) + sp)
    add(
        "conv_transpose",
        lambda x, k, c: _weighted(dg.conv_transpose(x, k, c, 2, 1), rt),
        [small, wt, rng.normal(size=3)],
    )
    rd = rng.normal(size=(2, 3) + half)
    add("resize_down", lambda x: _weighted(dg.resize_linear(x, 0.5), rd), [a])
    add("resize_up", lambda x: _weighted(dg.resize_linear(x, 2), r), [small[:, :3]])

    fld = _interior_field(rng, 2, sp)
    rg = rng.normal(size=(2, 3) + sp)
    add("grid_sample", lambda x, d: _weighted(dg.grid_sample(x, d), rg), [a, fld])

    img1, img2 = rng.uniform(0, 1, (2, 1) + sp), rng.uniform(0, 1, (2, 1) + sp)
    add("gncc", lambda x, y: gncc(x, y), [img1, img2])
    add("smoothness", lambda d: smoothness(d), [rng.normal(size=(2, dims) + sp)])
    m1, m2 = rng.uniform(0, 1, (2, 2) + sp), rng.uniform(0, 1, (2, 2) + sp)
    add("soft_dice", lambda x, y: soft_dice(x, y), [m1, m2])

    f, inputs = _network_case(dims, rng, mask=False)
    add("loss_no_mask", f, inputs, max_coords=6, step=1e-6)
    f, inputs = _network_case(dims, rng, mask=True)
    add("loss_mask_guided", f, inputs, max_coords=6, step=1e-6)
    return cases


def gradient_suite(dims=2, seeds=range(5), names=None):
    """Worst relative gradient error per case over ``seeds``."""
    worst = {}
    for seed in seeds:
        for name, (f, inputs, opts) in gradient_cases(dims, seed).items():
            if names is not None and name not in names:
                continue
            err = dg.grad_check(f, inputs, seed=seed, **opts)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
