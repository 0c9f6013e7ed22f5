"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

The lines are printed in the pytest terminal summary. Criteria 5, 6 and 8
train small networks and take several minutes in total.
"""

import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from scipy import ndimage
from threadpoolctl import threadpool_limits

from mrreg import diffgraph as dg
from mrreg.checks import TOLERANCE, gradient_suite
from mrreg.datagen import SynthConfig, generate
from mrreg.demons import demons_register
from mrreg.losses import LossWeights, gncc, multires_loss, soft_dice
from mrreg.metrics import (
    EvalPair,
    dice_hard,
    endpoint_error,
    evaluate_pairs,
    hausdorff,
    protocol_pairs,
    ssim,
)
from mrreg.network import ModelConfig, forward, init_params, register
from mrreg.regcore import build_pyramid, nonpositive_jacobian_rate, upsample_field, warp
from mrreg.train import TrainConfig, train

# synthetic protocol shared by criteria 5-8
SYNTH = SynthConfig(count=40, extent=64, amplitude=4.0, sigma=8.0, seed=0)
N_FIT = 26  # train + val blocks of the default 60/5/35 split
MODEL = ModelConfig(dims=2, levels=3, channels=[16, 32, 64])
FIT = dict(lr=1e-3, epochs=100, batch_size=4, levels=3, lambdas=[32.0, 16.0, 8.0], seed=0)


def record(number, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


@pytest.fixture(autouse=True, scope="module")
def single_thread():
    with threadpool_limits(1):
        yield


# ---------------------------------------------------------------------------
# independent oracles


def gncc_oracle(a, b):
    a, b = a.ravel().tolist(), b.ravel().tolist()
    ma, mb = math.fsum(a) / len(a), math.fsum(b) / len(b)
    num = math.fsum((x - ma) * (y - mb) for x, y in zip(a, b))
    da = math.fsum((x - ma) ** 2 for x in a)
    db = math.fsum((y - mb) ** 2 for y in b)
    return num / math.sqrt(da * db)


def ssim_oracle(a, b, win=7):
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            pa, pb = a[i:i + win, j:j + win].ravel(), b[i:i + win, j:j + win].ravel()
            ma, mb = pa.mean(), pb.mean()
            va, vb = ((pa - ma) ** 2).mean(), ((pb - mb) ** 2).mean()
            cov = ((pa - ma) * (pb - mb)).mean()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return math.fsum(vals) / len(vals)


def soft_dice_oracle(x, y, eps=1e-6):
    scores = []
    for xc, yc in zip(x, y):
        xs, ys = xc.ravel().tolist(), yc.ravel().tolist()
        inter = math.fsum(p * q for p, q in zip(xs, ys))
        den = math.fsum(p * p for p in xs) + math.fsum(q * q for q in ys)
        scores.append((2 * inter + eps) / (den + eps))
    return sum(scores) / len(scores)


def dice_hard_oracle(x, y):
    out = []
    for xc, yc in zip(x, y):
        xs, ys = (xc >= 0.5).ravel().tolist(), (yc >= 0.5).ravel().tolist()
        both = sum(1 for p, q in zip(xs, ys) if p and q)
        total = sum(xs) + sum(ys)
        out.append(1.0 if total == 0 else 2 * both / total)
    return out


def _boundary(mask):
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if mask[i, j] and any(
                not (0 <= y < h and 0 <= x < w) or not mask[y, x]
                for y, x in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1))
            ):
                pts.append((i, j))
    return pts


def hausdorff_oracle(x, y):
    px, py = _boundary(x >= 0.5), _boundary(y >= 0.5)

    def directed(p, q):
        return max(min(math.hypot(a[0] - b[0], a[1] - b[1]) for b in q) for a in p)

    return max(directed(px, py), directed(py, px))


def folding_rate_oracle(fld):
    _, h, w = fld.shape
    bad = 0
    for i in range(h):
        for j in range(w):
            i0, i1 = (i, i + 1) if i + 1 < h else (i - 1, i)
            j0, j1 = (j, j + 1) if j + 1 < w else (j - 1, j)
            a = 1 + fld[0, i1, j] - fld[0, i0, j]
            b = fld[0, i, j1] - fld[0, i, j0]
            c = fld[1, i1, j] - fld[1, i0, j]
            d = 1 + fld[1, i, j1] - fld[1, i, j0]
            bad += a * d - b * c <= 0
    return bad / (h * w)


# ---------------------------------------------------------------------------
# shared checks for criteria 1-3 (2D) and 9 (3D)


def _gradient_check(dims):
    worst = gradient_suite(dims, seeds=range(5))
    name = max(worst, key=worst.get)
    return all(v <= TOLERANCE for v in worst.values()), f"{len(worst)} cases, worst {name} {worst[name]:.2e}"


def _identity_at_init(dims, extent, levels):
    rng = np.random.default_rng(dims)
    cfg = ModelConfig(dims=dims, levels=levels, channels=[4] * levels)
    params = init_params(cfg, seed=1)
    ok = True
    worst = 0.0
    for _ in range(3):
        s = rng.uniform(size=(extent,) * dims)
        t = rng.uniform(size=(extent,) * dims)
        res = register(params, s, t)
        ok &= np.array_equal(warp(s.astype(res.field.dtype), res.field), s.astype(res.field.dtype))
        ok &= np.array_equal(res.warped, s.astype(res.warped.dtype))
        with dg.precision(np.float64), dg.no_grad():
            p64 = init_params(cfg, seed=1, dtype=np.float64)
            out = forward(p64, s, t)
            sp = build_pyramid(dg.Tensor(s[None, None]), levels)
            tp = build_pyramid(dg.Tensor(t[None, None]), levels)
            total = float(multires_loss(out, sp, tp, LossWeights.defaults(dims, levels)).total.data)
        want = (1.0 / levels) * sum(1.0 - gncc(a.data[0, 0], b.data[0, 0]) for a, b in zip(sp, tp))
        worst = max(worst, abs(total - want))
    ok &= worst == 0.0
    return ok, f"warp bit-exact, loss gap {worst:.1e}"


def _composition_law(dims):
    rng = np.random.default_rng(10 + dims)
    ok = True
    for _ in range(5):
        consts = rng.normal(size=dims) * 3
        shape = tuple(rng.integers(2, 6, dims))
        fld = np.stack([np.full(shape, c) for c in consts])
        up = upsample_field(fld)
        ok &= up.shape == (dims,) + tuple(2 * s for s in shape)
        ok &= all(np.array_equal(up[a], np.full(up.shape[1:], 2 * consts[a])) for a in range(dims))
    finest = 32 if dims == 2 else 16
    for k in range(1, 6):
        params = init_params(ModelConfig(dims=dims, levels=k, channels=[2] * k))
        x = rng.uniform(size=(finest,) * dims)
        with dg.no_grad():
            out = forward(params, x, x)
        want = [(dims,) + (finest // 2 ** (k - 1 - i),) * dims for i in range(k)]
        ok &= [c.shape[1:] for c in out.composed] == want
        ok &= [r.shape[1:] for r in out.residuals] == want
    return ok, "constant doubling exact, extents K=1..5"


def test_criterion_1_gradients():
    ok, detail = _gradient_check(2)
    assert record(1, ok, detail)


def test_criterion_2_identity_at_init():
    ok, detail = _identity_at_init(2, 32, 3)
    assert record(2, ok, detail)


def test_criterion_3_composition_law():
    ok, detail = _composition_law(2)
    assert record(3, ok, detail)


# ---------------------------------------------------------------------------
# criterion 4


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(4)
    worst = {k: 0.0 for k in ("gncc", "ssim", "soft_dice", "dice_hard", "hausdorff", "jacobian_rate")}
    n = 100
    for _ in range(n):
        h, w = rng.integers(8, 33, 2)
        a, b = rng.uniform(size=(h, w)), rng.uniform(size=(h, w))
        worst["gncc"] = max(worst["gncc"], abs(gncc(a, b) - gncc_oracle(a, b)))
        worst["ssim"] = max(worst["ssim"], abs(ssim(a, b) - ssim_oracle(a, b)))

        c = int(rng.integers(1, 4))
        x, y = rng.uniform(size=(c, h, w)), rng.uniform(size=(c, h, w))
        worst["soft_dice"] = max(worst["soft_dice"], abs(soft_dice(x, y) - soft_dice_oracle(x, y)))
        hx = ndimage.gaussian_filter(rng.uniform(size=(c, h, w)), (0, 1.5, 1.5))
        hy = ndimage.gaussian_filter(rng.uniform(size=(c, h, w)), (0, 1.5, 1.5))
        hx, hy = (hx > np.median(hx)).astype(float), (hy > np.median(hy)).astype(float)
        got = dice_hard(hx, hy)
        worst["dice_hard"] = max(worst["dice_hard"], float(np.max(np.abs(got - dice_hard_oracle(hx, hy)))))
        worst["hausdorff"] = max(worst["hausdorff"], abs(hausdorff(hx[0], hy[0]) - hausdorff_oracle(hx[0], hy[0])))

        fld = np.stack([ndimage.gaussian_filter(rng.normal(size=(h, w)), 1.5) for _ in range(2)])
        fld *= rng.uniform(0.5, 6.0)
        worst["jacobian_rate"] = max(
            worst["jacobian_rate"], abs(nonpositive_jacobian_rate(fld) - folding_rate_oracle(fld))
        )
    tol = {"gncc": 1e-6, "ssim": 1e-6, "soft_dice": 1e-6, "dice_hard": 1e-12, "hausdorff": 1e-12, "jacobian_rate": 1e-12}
    ok = all(worst[k] <= tol[k] for k in worst)
    detail = f"{n} instances; " + ", ".join(f"{k} {v:.0e}" for k, v in worst.items())
    assert record(4, ok, detail)


# ---------------------------------------------------------------------------
# criteria 5-8: synthetic recovery


@pytest.fixture(scope="module")
def synthetic():
    data = generate(SYNTH)
    fit, test = data.items[:N_FIT], data.items[N_FIT:]
    idx = protocol_pairs([it.id for it in test], 5, 0)
    pairs = [EvalPair(test[s].id, test[t].id, test[s].image, test[t].image, test[s].mask, test[t].mask) for s, t in idx]
    return fit, pairs


def _fit_and_score(synthetic, workdir, mask_enabled, tag):
    fit, pairs = synthetic
    ckpt, report = workdir / f"{tag}.mrck", workdir / f"{tag}.csv"
    t0 = time.perf_counter()
    result = train(MODEL, TrainConfig(mask_enabled=mask_enabled, **FIT), [(it.image, it.mask) for it in fit], checkpoint_path=ckpt)
    base, reg = evaluate_pairs(lambda s, t: register(result.params, s, t).field, pairs, report, timing=False)
    return {"base": base.mean, "reg": reg.mean, "ckpt": ckpt, "report": report, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def plain_run(synthetic, tmp_path_factory):
    return _fit_and_score(synthetic, tmp_path_factory.mktemp("plain"), False, "plain")


@pytest.fixture(scope="module")
def mask_run(synthetic, tmp_path_factory):
    return _fit_and_score(synthetic, tmp_path_factory.mktemp("mask"), True, "mask")


@pytest.mark.slow
def test_criterion_5_synthetic_recovery(plain_run):
    b, r = plain_run["base"], plain_run["reg"]
    ok = (
        r["gncc"] >= b["gncc"] + 0.15
        and r["dsc_mean"] >= b["dsc_mean"] + 0.10
        and r["hd"] <= b["hd"]
        and r["nonpos_jac_rate"] <= 0.01
    )
    detail = (
        f"GNCC {b['gncc']:.3f}->{r['gncc']:.3f}, DSC {b['dsc_mean']:.3f}->{r['dsc_mean']:.3f}, "
        f"HD {b['hd']:.2f}->{r['hd']:.2f}, folding {r['nonpos_jac_rate']:.4f} ({plain_run['seconds']:.0f}s)"
    )
    assert record(5, ok, detail)


@pytest.mark.slow
def test_criterion_6_mask_guided_gain(plain_run, mask_run):
    p, m = plain_run["reg"], mask_run["reg"]
    ok = m["dsc_mean"] >= p["dsc_mean"] + 0.03 and p["gncc"] - m["gncc"] < 0.05
    detail = f"DSC {p['dsc_mean']:.3f}->{m['dsc_mean']:.3f}, GNCC {p['gncc']:.3f}->{m['gncc']:.3f}"
    assert record(6, ok, detail)


@pytest.mark.slow
def test_criterion_7_demons(synthetic):
    _, pairs = synthetic
    base, reg = evaluate_pairs(lambda s, t: demons_register(s, t).field, pairs, timing=False)
    template = generate(SynthConfig(count=1, amplitude=0.0, seed=SYNTH.seed)).template
    shift = np.zeros((2,) + template.shape)
    shift[0] = 3.0
    res = demons_register(warp(template, -shift), template)
    epe = endpoint_error(res.field, shift)
    folds = max(r["nonpos_jac_rate"] for r in reg.rows) + nonpositive_jacobian_rate(res.field)
    ok = reg.mean["gncc"] >= base.mean["gncc"] + 0.10 and epe < 0.5 and folds == 0.0
    detail = f"GNCC {base.mean['gncc']:.3f}->{reg.mean['gncc']:.3f}, translation EPE {epe:.3f}, folding {folds:.4f}"
    assert record(7, ok, detail)


@pytest.mark.slow
def test_criterion_8_determinism(synthetic, plain_run, tmp_path):
    again = _fit_and_score(synthetic, tmp_path, False, "plain")
    same_ckpt = again["ckpt"].read_bytes() == plain_run["ckpt"].read_bytes()
    same_report = again["report"].read_bytes() == plain_run["report"].read_bytes()
    detail = f"checkpoint {'identical' if same_ckpt else 'differs'}, report {'identical' if same_report else 'differs'}"
    assert record(8, same_ckpt and same_report, detail)


# ---------------------------------------------------------------------------
# criterion 9


@pytest.mark.slow
def test_criterion_9_3d_conformance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    params = init_params(ModelConfig(dims=3, levels=4), seed=0)
    for name in params:
        if ".head." in name:
            params.arrays[name] = rng.normal(0.0, 0.01, params[name].shape).astype(params[name].dtype)
    s, t = rng.uniform(size=(32, 32, 32)), rng.uniform(size=(32, 32, 32))
    res = register(params, s, t)
    shapes = [c.shape for c in res.composed]
    ok = shapes == [(3, n, n, n) for n in (4, 8, 16, 32)] and res.field.shape == (3, 32, 32, 32)
    ok &= bool(np.all(np.isfinite(res.field))) and bool(np.abs(res.field).max() > 0)
    parts = []
    for label, check in (
        ("grad", lambda: _gradient_check(3)),
        ("identity", lambda: _identity_at_init(3, 16, 3)),
        ("composition", lambda: _composition_law(3)),
    ):
        sub_ok, sub_detail = check()
        ok &= sub_ok
        parts.append(f"{label} {'ok' if sub_ok else 'FAIL'} ({sub_detail})")
    detail = "extents 4/8/16/32 x3; " + "; ".join(parts) + f" ({time.perf_counter() - t0:.0f}s)"
    assert record(9, ok, detail)
