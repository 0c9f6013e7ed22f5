"""Evaluation metrics and the pairwise evaluation harness.

All metrics take unbatched numpy arrays: images ``(*spatial)``, masks
``(C, *spatial)`` and fields ``(ndim, *spatial)``.
"""

import csv
import math
import time
from dataclasses import dataclass
from dataclasses import field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from .errors import EmptyMaskError, MrRegError, ShapeError
from .losses import gncc
from .regcore import nonpositive_jacobian_rate, warp

SSIM_WINDOW = 7
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def ssim(a, b, window=SSIM_WINDOW):
    """Mean SSIM over all fully contained uniform windows of width ``window``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ShapeError(f"extents {a.shape} smaller than the {window}-wide window")
    shape = (window,) * a.ndim
    axes = tuple(range(a.ndim, 2 * a.ndim))
    wa = sliding_window_view(a, shape)
    wb = sliding_window_view(b, shape)
    mu_a = wa.mean(axis=axes)
    mu_b = wb.mean(axis=axes)
    var_a = (wa**2).mean(axis=axes) - mu_a**2
    var_b = (wb**2).mean(axis=axes) - mu_b**2
    cov = (wa * wb).mean(axis=axes) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def _as_classes(mask, ndim):
    mask = np.asarray(mask)
    return mask[None] if mask.ndim == ndim else mask


def dice_hard(x, y, threshold=0.5, ndim=2):
    """Per-class Dice after binarizing at ``threshold``; two empty masks score 1.

    Masks are ``(C, *spatial)``; an array with exactly ``ndim`` axes is a
    single class.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ShapeError(f"mask shapes differ: {x.shape} vs {y.shape}")
    x, y = _as_classes(x, ndim), _as_classes(y, ndim)
    out = []
    for xc, yc in zip(x, y):
        xb, yb = xc >= threshold, yc >= threshold
        total = np.count_nonzero(xb) + np.count_nonzero(yb)
        out.append(1.0 if total == 0 else 2.0 * np.count_nonzero(xb & yb) / total)
    return np.array(out)


def boundary_points(mask):
    """Coordinates of foreground points with a background face-neighbour.

    Points outside the grid count as background.
    """
    fg = np.asarray(mask, dtype=bool)
    padded = np.pad(fg, 1, constant_values=False)
    interior = np.ones_like(fg)
    core = tuple(slice(1, -1) for _ in range(fg.ndim))
    for axis in range(fg.ndim):
        for shift in (-1, 1):
            sl = list(core)
            sl[axis] = slice(1 + shift, padded.shape[axis] - 1 + shift)
            interior &= padded[tuple(sl)]
    return np.argwhere(fg & ~interior).astype(np.float64)


def hausdorff(x, y, threshold=0.5, percentile=None):
    """Symmetric Hausdorff distance (pixels) between the boundaries of two binary masks.

    With ``percentile`` set (e.g. 95) that percentile of the directed distances
    replaces the maximum.
    """
    xb = np.asarray(x) >= threshold
    yb = np.asarray(y) >= threshold
    if xb.shape != yb.shape:
        raise ShapeError(f"mask shapes differ: {xb.shape} vs {yb.shape}")
    if not xb.any() or not yb.any():
        raise EmptyMaskError("Hausdorff distance needs two non-empty masks")
    px, py = boundary_points(xb), boundary_points(yb)
    dxy, _ = cKDTree(py).query(px)
    dyx, _ = cKDTree(px).query(py)
    if percentile is None:
        return float(max(dxy.max(), dyx.max()))
    return float(max(np.percentile(dxy, percentile), np.percentile(dyx, percentile)))


def endpoint_error(pred, true):
    """Mean Euclidean norm of the difference between two displacement fields."""
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ShapeError(f"field shapes differ: {pred.shape} vs {true.shape}")
    return float(np.sqrt(((pred - true) ** 2).sum(axis=0)).mean())


# ---------------------------------------------------------------------------
# pair evaluation


@dataclass
class EvalPair:
    source_id: str
    target_id: str
    source: np.ndarray
    target: np.ndarray
    source_mask: Optional[np.ndarray] = None
    target_mask: Optional[np.ndarray] = None
    true_field: Optional[np.ndarray] = None


@dataclass
class MetricRecord:
    """Mean and standard deviation of each metric over a set of pairs."""

    mean: dict
    std: dict
    count: int
    rows: list = dc_field(default_factory=list)

    def format(self, key):
        m, s = self.mean.get(key), self.std.get(key)
        if m is None or (isinstance(m, float) and math.isnan(m)):
            return "n/a"
        return f"{m:.2f}±{s:.2f}"


def pair_metrics(source, target, fld=None, source_mask=None, target_mask=None, true_field=None):
    """Metric dict for one (warped) source against its target.

    ``fld`` is the estimated field; ``None`` means "before registration".
    """
    nd = np.asarray(target).ndim
    warped = source if fld is None else warp(source, fld)
    row = {"gncc": gncc(warped, target), "ssim": ssim(warped, target)}
    if source_mask is not None and target_mask is not None:
        wmask = source_mask if fld is None else warp(source_mask, fld)
        wmask = _as_classes(wmask, nd)
        tmask = _as_classes(target_mask, nd)
        per_class = dice_hard(wmask, tmask, ndim=nd)
        row["dsc_mean"] = float(per_class.mean())
        for c, v in enumerate(per_class):
            row[f"dsc_class_{c}"] = float(v)
        dists = []
        for wc, tc in zip(wmask, tmask):
            try:
                dists.append(hausdorff(wc, tc))
            except EmptyMaskError:
                dists.append(math.nan)
        row["hd"] = float(np.mean(dists))
    row["nonpos_jac_rate"] = math.nan if fld is None else nonpositive_jacobian_rate(fld)
    if fld is not None and true_field is not None:
        row["endpoint_error"] = endpoint_error(fld, true_field)
    return row


METRIC_KEYS = ["gncc", "ssim", "dsc_mean", "hd", "nonpos_jac_rate", "endpoint_error"]


def aggregate(rows):
    keys = [k for k in METRIC_KEYS if any(k in r for r in rows)]
    keys += sorted({k for r in rows for k in r if k.startswith("dsc_class_")})
    mean, std = {}, {}
    for k in keys:
        vals = np.array([r.get(k, math.nan) for r in rows], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        mean[k] = float(vals.mean()) if vals.size else math.nan
        std[k] = float(vals.std()) if vals.size else math.nan
    return mean, std


def protocol_pairs(ids, n_sources=5, seed=0, all_pairs=False):
    """Index pairs: ``n_sources`` random sources, each against all remaining items."""
    n = len(ids)
    if n < 2:
        raise ValueError("need at least two items to form pairs")
    if all_pairs:
        return [(i, j) for i in range(n) for j in range(n) if i != j]
    rng = np.random.default_rng(seed)
    sources = sorted(rng.choice(n, size=min(n_sources, n - 1), replace=False).tolist())
    chosen = set(sources)
    return [(s, t) for s in sources for t in range(n) if t not in chosen]


def evaluate_pairs(method: Callable, pairs: Sequence[EvalPair], report_path=None, timing=True):
    """Evaluate ``method(source, target) -> field`` on every pair.

    Returns ``(baseline, registered)`` MetricRecords. A metric failure on one
    pair is recorded as missing and does not abort the batch.
    """
    if not pairs:
        raise ValueError("need at least one pair")
    base_rows, reg_rows = [], []
    for idx, pair in enumerate(pairs):
        head = {"pair_id": idx, "source_id": pair.source_id, "target_id": pair.target_id}
        masks = dict(source_mask=pair.source_mask, target_mask=pair.target_mask)
        try:
            base = pair_metrics(pair.source, pair.target, None, **masks)
        except MrRegError:
            base = {}
        t0 = time.perf_counter()
        fld = method(pair.source, pair.target)
        wall = (time.perf_counter() - t0) * 1000.0
        try:
            reg = pair_metrics(pair.source, pair.target, fld, true_field=pair.true_field, **masks)
        except MrRegError:
            reg = {}
        base_rows.append({**head, "phase": "baseline", **base})
        reg_rows.append({**head, "phase": "registered", **reg, "wall_ms": wall if timing else math.nan})
    baseline = MetricRecord(*aggregate(base_rows), len(base_rows), base_rows)
    registered = MetricRecord(*aggregate(reg_rows), len(reg_rows), reg_rows)
    if report_path is not None:
        write_report(report_path, baseline, registered)
    return baseline, registered


def _columns(rows):
    classes = sorted({k for r in rows for k in r if k.startswith("dsc_class_")}, key=lambda k: int(k.rsplit("_", 1)[1]))
    return (
        ["pair_id", "source_id", "target_id", "phase", "gncc", "ssim", "dsc_mean"]
        + classes
        + ["hd", "nonpos_jac_rate", "endpoint_error", "wall_ms"]
    )


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(path, baseline, registered):
    """CSV with one row per pair and phase, then mean and std summary rows."""
    rows = [r for pair in zip(baseline.rows, registered.rows) for r in pair]
    cols = _columns(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            writer.writerow([_fmt(r.get(c)) for c in cols])
        for rec, phase in ((baseline, "baseline"), (registered, "registered")):
            for label, stats in (("mean", rec.mean), ("std", rec.std)):
                row = {"pair_id": label, "phase": phase, **stats}
                if phase == "baseline":
                    row["nonpos_jac_rate"] = math.nan
                writer.writerow([_fmt(row.get(c)) for c in cols])


def read_report(path):
    """Parse a report CSV back into a list of dicts (numbers as floats)."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if k in ("pair_id", "source_id", "target_id", "phase"):
                    parsed[k] = v
                else:
                    parsed[k] = float(v) if v != "" else math.nan
            out.append(parsed)
    return out
