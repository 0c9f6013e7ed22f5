"""Unsupervised training: random pairing, multi-level loss, Adam updates."""

import csv
import logging
from dataclasses import asdict, dataclass
from dataclasses import field as dc_field
from typing import List, Optional

import numpy as np

from . import diffgraph as dg
from .errors import DatasetTooSmall, NonFiniteLossError, ShapeError
from .losses import LossWeights, default_lambdas, multires_loss
from .network import forward, init_params, save_params
from .regcore import build_pyramid

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ["epoch", "total", "gncc_term", "smooth_term", "dice_term"]
# guard threshold suggested for TrainConfig.clip; clipping is off by default
CLIP_GUARD = 1e3


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 200
    batch_size: int = 10
    levels: int = 5
    lambdas: Optional[List[float]] = None
    mask_enabled: bool = False
    seed: int = 0
    checkpoint_interval: int = 0
    precision: str = "float32"
    clip: Optional[float] = None
    dims: int = 2

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr, epochs and batch_size must be positive")
        if self.lambdas is None:
            self.lambdas = default_lambdas(self.dims, self.levels)
        self.lambdas = [float(v) for v in self.lambdas]
        if len(self.lambdas) != self.levels:
            raise ValueError(f"need {self.levels} smoothness weights, got {len(self.lambdas)}")

    @classmethod
    def full_scale_2d(cls, **overrides):
        """Full-scale 2D slice settings: lr 1e-3, batch 10, 5 levels."""
        return cls(**{"lr": 0.001, "epochs": 200, "batch_size": 10, "levels": 5, "dims": 2, **overrides})

    @classmethod
    def full_scale_3d(cls, **overrides):
        """Full-scale 3D volume settings: lr 1e-4, batch 1, 4 levels."""
        return cls(**{"lr": 0.0001, "epochs": 200, "batch_size": 1, "levels": 4, "dims": 3, **overrides})

    def to_dict(self):
        return asdict(self)


def pair_sampler(n_items, seed, epoch):
    """Ordered ``(source, target)`` index pairs for one epoch.

    Every item is the source exactly once; its target is drawn uniformly from
    the other items. Deterministic in ``(seed, epoch)``.
    """
    if n_items < 2:
        raise DatasetTooSmall(f"need at least 2 images to form pairs, got {n_items}")
    rng = np.random.default_rng([seed, epoch])
    sources = rng.permutation(n_items)
    targets = rng.integers(0, n_items - 1, size=n_items)
    targets = targets + (targets >= sources)
    return [(int(s), int(t)) for s, t in zip(sources, targets)]


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = dc_field(default_factory=dict)
    v: dict = dc_field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """In-place bias-corrected Adam update of the ``params`` array dict."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


@dataclass
class TrainResult:
    params: object
    history: list
    state: AdamState
    val_history: list = dc_field(default_factory=list)


def _stack(images, dtype):
    return dg.Tensor(np.stack([np.asarray(x, dtype=dtype) for x in images])[:, None])


def _stack_masks(masks, dtype):
    return dg.Tensor(np.stack([np.asarray(m, dtype=dtype) for m in masks]))


def batch_loss(params, weights, batch, dataset, config, loss_weights):
    """Forward one batch of index pairs and return the LossReport."""
    dtype = dg.get_default_dtype()
    src = _stack([dataset[s][0] for s, _ in batch], dtype)
    tgt = _stack([dataset[t][0] for _, t in batch], dtype)
    k = params.config.levels
    with dg.no_grad():
        s_pyr = build_pyramid(src, k)
        t_pyr = build_pyramid(tgt, k)
        masks = None
        if loss_weights.mask_enabled:
            sm = _stack_masks([dataset[s][1] for s, _ in batch], dtype)
            tm = _stack_masks([dataset[t][1] for _, t in batch], dtype)
            masks = (build_pyramid(sm, k), build_pyramid(tm, k))
    levels = forward(params, src, tgt, weights)
    return multires_loss(levels, s_pyr, t_pyr, loss_weights, masks)


def _validation_loss(params, pairs, dataset, config, loss_weights):
    total = 0.0
    with dg.no_grad():
        for start in range(0, len(pairs), config.batch_size):
            batch = pairs[start:start + config.batch_size]
            report = batch_loss(params, None, batch, dataset, config, loss_weights)
            total += len(batch) * float(report.total.data)
    return total / len(pairs)


def train(model_config, config, dataset, checkpoint_path=None, history_path=None, params=None, validation=None):
    """Train a network on ``dataset``, a list of ``(image, mask_or_None)``.

    Returns a :class:`TrainResult`. Per-epoch mean losses are kept in
    ``history`` (and written to ``history_path`` as CSV if given).

    ``validation`` (same form, at least two items) is scored once per epoch on
    a fixed set of pairs for monitoring only; it never drives an update.
    """
    if model_config.levels != config.levels:
        raise ShapeError("model and training configs disagree on the number of levels")
    dataset = [(img, mask) for img, mask in dataset]
    n = len(dataset)
    if n < 2:
        raise DatasetTooSmall(f"need at least 2 images to form pairs, got {n}")
    if config.mask_enabled and any(m is None for _, m in dataset):
        raise ValueError("mask-guided training needs a mask for every image")
    loss_weights = LossWeights(list(config.lambdas), config.mask_enabled)
    val_pairs = None
    if validation is not None and len(validation) >= 2:
        validation = [(img, mask) for img, mask in validation]
        val_pairs = pair_sampler(len(validation), config.seed, 0)

    with dg.precision(config.precision):
        dtype = dg.get_default_dtype()
        params = init_params(model_config, config.seed, dtype) if params is None else params.astype(dtype)
        state = AdamState()
        history, val_history = [], []
        last_good = params.copy()
        for epoch in range(1, config.epochs + 1):
            pairs = pair_sampler(n, config.seed, epoch)
            sums = np.zeros(4)
            for start in range(0, n, config.batch_size):
                batch = pairs[start:start + config.batch_size]
                weights = params.tensors(requires_grad=True)
                report = batch_loss(params, weights, batch, dataset, config, loss_weights)
                total = float(report.total.data)
                if not np.isfinite(total):
                    if checkpoint_path is not None:
                        save_params(last_good, checkpoint_path)
                    raise NonFiniteLossError(
                        f"non-finite loss at epoch {epoch}", params=last_good, epoch=epoch
                    )
                dg.backward(report.total)
                grads = {k: w.grad for k, w in weights.items() if w.grad is not None}
                if config.clip is not None:
                    grads = {k: np.clip(g, -config.clip, config.clip) for k, g in grads.items()}
                adam_step(params.arrays, grads, state, config.lr)
                sums += len(batch) * np.array([total, *report.terms(loss_weights.lambdas)])
            means = sums / n
            row = dict(zip(HISTORY_FIELDS, [epoch, *means.tolist()]))
            history.append(row)
            last_good = params.copy()
            if val_pairs is not None:
                val = _validation_loss(params, val_pairs, validation, config, loss_weights)
                val_history.append(val)
                logger.info("epoch %d loss %.5f val %.5f", epoch, row["total"], val)
            else:
                logger.info("epoch %d loss %.5f", epoch, row["total"])
            if checkpoint_path and config.checkpoint_interval and epoch % config.checkpoint_interval == 0:
                save_params(params, checkpoint_path)
        if checkpoint_path is not None:
            save_params(params, checkpoint_path)
    if history_path is not None:
        write_history(history, history_path)
    return TrainResult(params, history, state, val_history)


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(float(v)) if k != "epoch" else int(v)) for k, v in row.items()})
