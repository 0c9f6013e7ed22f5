"""Synthetic images with known deformations.

A template image with labelled regions is generated once; every item is the
template warped by its own smooth random field, with a small intensity bias
and noise. ``item.field`` maps item coordinates into the template, i.e.
``item.image ~= warp(template, item.field)``.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import ndimage

from .regcore import warp

FAMILIES = ("blobs", "rings", "brain-phantom")

# band period of the phantom texture, in normalized [-1, 1] units
FOLD_PERIOD = 0.22
# phantom intensity outside the head; a gray field of view keeps the global
# head/background step from dominating image variance
PHANTOM_BACKGROUND = 0.3


@dataclass
class SynthConfig:
    dims: int = 2
    extent: int = 64
    count: int = 40
    amplitude: float = 4.0
    sigma: float = 8.0
    family: str = "brain-phantom"
    classes: int = 1
    seed: int = 0
    noise: float = 0.02
    bias: float = 0.05

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValueError("dims must be 2 or 3")
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        if self.amplitude < 0 or self.sigma <= 0:
            raise ValueError("amplitude must be >= 0 and sigma > 0")
        if self.classes < 1:
            raise ValueError("need at least one mask class")

    @property
    def shape(self):
        return (self.extent,) * self.dims


@dataclass
class SynthItem:
    id: str
    image: np.ndarray
    mask: np.ndarray
    field: np.ndarray


@dataclass
class SynthDataset:
    config: SynthConfig
    template: np.ndarray
    template_mask: np.ndarray
    items: List[SynthItem] = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def pairs(self):
        """``(image, mask)`` tuples, the form consumed by training."""
        return [(it.image, it.mask) for it in self.items]


def random_smooth_field(shape, amplitude, sigma, seed=None):
    """Gaussian-smoothed white noise scaled so the largest vector has norm ``amplitude``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    shape = tuple(shape)
    nd = len(shape)
    out = np.zeros((nd,) + shape)
    if amplitude == 0:
        return out
    rng = np.random.default_rng(seed)
    for a in range(nd):
        out[a] = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    peak = np.sqrt((out**2).sum(axis=0)).max()
    return out * (amplitude / peak)


def _coords(shape):
    """Normalized coordinates in [-1, 1] per axis."""
    return np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij")


def _ellipsoid(coords, center, radii):
    r = sum(((c - c0) / rad) ** 2 for c, c0, rad in zip(coords, center, radii))
    return r <= 1.0


def _blobs(shape, classes, rng):
    coords = _coords(shape)
    nd = len(shape)
    img = np.zeros(shape)
    label = np.full(shape, -1)
    n_extra = max(5 - classes, 0)
    # distractor blobs first so the labelled ones are drawn on top
    for i in range(n_extra + classes):
        region = _ellipsoid(coords, rng.uniform(-0.5, 0.5, nd), rng.uniform(0.15, 0.35, nd))
        img = np.where(region, rng.uniform(0.35, 0.95), img)
        label[region] = i - n_extra
    return img, [label == c for c in range(classes)]


def _rings(shape, classes, rng):
    coords = _coords(shape)
    center = rng.uniform(-0.1, 0.1, len(shape))
    r = np.sqrt(sum((c - c0) ** 2 for c, c0 in zip(coords, center)))
    radii = np.linspace(0.15, 0.85, 2 * classes + 2)
    img = np.zeros(shape)
    masks = []
    for i in range(len(radii) - 1):
        band = (r >= radii[i]) & (r < radii[i + 1])
        img[band] = 0.2 + 0.7 * ((i % 2) ^ 1) * (1 - i / len(radii))
        if i % 2 == 0 and len(masks) < classes:
            masks.append(band)
    return img, masks


def _brain_phantom(shape, classes, rng):
    coords = _coords(shape)
    nd = len(shape)
    jitter = lambda s: rng.uniform(-s, s, nd)  # noqa: E731
    head = _ellipsoid(coords, jitter(0.03), np.full(nd, 0.85))
    brain = _ellipsoid(coords, jitter(0.03), np.full(nd, 0.75))
    img = np.where(head, 0.7, PHANTOM_BACKGROUND)
    # folded cortex-like bands: radius modulated by the angle in the first plane
    r = np.sqrt(sum(c**2 for c in coords))
    theta = np.arctan2(coords[0], coords[-1])
    phase = rng.uniform(0, 2 * np.pi, 2)
    wobble = 0.04 * np.sin(7 * theta + phase[0]) + 0.02 * np.sin(11 * theta + phase[1])
    bands = 0.45 + 0.25 * np.sin(2 * np.pi * (r + wobble) / FOLD_PERIOD)
    img = np.where(brain, bands, img)
    regions = []
    # dark ventricles
    for sign in (-1, 1):
        center = np.zeros(nd)
        center[-1] = 0.18 * sign
        center[0] = -0.1
        radii = np.full(nd, 0.075)
        radii[0] = 0.22
        regions.append(_ellipsoid(coords, center + jitter(0.02), radii))
    ventricles = regions[0] | regions[1]
    img = np.where(ventricles, 0.12, img)
    # low-contrast central structure
    center = np.zeros(nd)
    center[0] = 0.3
    mid = _ellipsoid(coords, center + jitter(0.02), np.full(nd, 0.10)) & ~ventricles
    img = np.where(mid, img - 0.05, img)
    masks = [mid, ventricles]
    while len(masks) < classes:
        lobe = _ellipsoid(coords, rng.uniform(-0.4, 0.4, nd), rng.uniform(0.1, 0.2, nd)) & brain
        masks.append(lobe & ~ventricles & ~mid)
    return img, masks[:classes]


_BUILDERS = {"blobs": _blobs, "rings": _rings, "brain-phantom": _brain_phantom}


def make_template(config):
    """Template image (smoothed, in [0, 1]) and its hard ``(C, *shape)`` mask."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    img, masks = _BUILDERS[config.family](config.shape, config.classes, rng)
    img = np.clip(ndimage.gaussian_filter(img, 0.75), 0.0, 1.0)
    mask = np.stack([m.astype(np.float64) for m in masks])
    return img, mask


def generate(config):
    """Build a :class:`SynthDataset` from ``config``."""
    template, tmask = make_template(config)
    seeds = np.random.SeedSequence([config.seed, 1]).spawn(config.count)
    items = []
    for i, ss in enumerate(seeds):
        field_seed, noise_seed = ss.spawn(2)
        fld = random_smooth_field(config.shape, config.amplitude, config.sigma, field_seed)
        rng = np.random.default_rng(noise_seed)
        img = warp(template, fld)
        if config.bias:
            img = img * (1.0 + rng.uniform(-config.bias, config.bias)) + rng.uniform(
                -config.bias, config.bias
            ) * 0.5
        if config.noise:
            img = img + rng.normal(0.0, config.noise, img.shape)
        img = np.clip(img, 0.0, 1.0)
        mask = (warp(tmask, fld) >= 0.5).astype(np.float64)
        items.append(SynthItem(f"item{i:04d}", img, mask, fld))
    return SynthDataset(config, template, tmask, items)
