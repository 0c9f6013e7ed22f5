"""Command-line entry point: ``mrreg <command> [options]``.

Exit status is 0 on success, 1 when ``gradcheck`` finds a gradient outside
tolerance, 2 on usage errors and 3 on data errors (unreadable or
inconsistent inputs). Diagnostics go to standard error.
"""

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from . import io as rio
from .checks import TOLERANCE, gradient_suite
from .datagen import SynthConfig, generate
from .demons import demons_register
from .errors import FormatError, MrRegError
from .metrics import EvalPair, evaluate_pairs, protocol_pairs
from .network import DEFAULT_LEVELS, ModelConfig, load_params, register
from .regcore import warp
from .train import TrainConfig, train

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg})", exc.pos) from exc


def _threads(value):
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("thread count must be >= 1")
    return n


def build_parser():
    p = argparse.ArgumentParser(prog="mrreg", description="Multi-resolution deformable image registration.")
    p.add_argument("--threads", type=_threads, default=None,
                   help="BLAS threads (default: $MRREG_THREADS or 1; 1 is bit-reproducible)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset and manifest")
    s.add_argument("--config", help="JSON with SynthConfig fields")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="override the config seed")

    t = sub.add_parser("train", help="train a registration network")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config", help="JSON with training fields and an optional 'model' block")
    t.add_argument("--out", required=True, help="checkpoint path (.mrck)")
    t.add_argument("--mask-guided", action="store_true", help="add the mask overlap term to the loss")
    t.add_argument("--history", help="loss CSV path (default: <out>.loss.csv)")

    r = sub.add_parser("register", help="register one source image to a target")
    r.add_argument("--method", choices=["mrregnet", "demons"], default="mrregnet")
    r.add_argument("--ckpt", help="checkpoint for --method mrregnet")
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--out-field", required=True, help="displacement field output (.rvf)")
    r.add_argument("--out-warped", help="warped source output (.png or .rvf)")

    e = sub.add_parser("evaluate", help="score a method over source/target pairs")
    e.add_argument("--manifest", required=True)
    e.add_argument("--method", choices=["mrregnet", "demons", "identity"], default="mrregnet")
    e.add_argument("--ckpt")
    e.add_argument("--report", required=True, help="CSV report path")
    e.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    e.add_argument("--sources", type=int, default=5, help="number of random source images")
    e.add_argument("--seed", type=int, default=0, help="seed for choosing sources")
    e.add_argument("--all-pairs", action="store_true", help="use every ordered pair instead")
    e.add_argument("--no-timing", action="store_true", help="leave wall_ms empty (byte-stable reports)")

    g = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    g.add_argument("--dims", type=int, choices=[2, 3], default=2)
    g.add_argument("--seeds", type=int, default=5)

    h = sub.add_parser("export-heatmap", help="render displacement magnitude as a color PNG")
    h.add_argument("--field", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--cmap", default="viridis")
    h.add_argument("--vmax", type=float, help="magnitude mapped to the top color (default: field max)")
    h.add_argument("--slice", type=int, help="index along axis 0 for 3D fields (default: middle)")
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        config = SynthConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad synth config: {exc}") from exc
    data = generate(config)
    out = args.out
    for sub in ("images", "masks", "fields"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    rio.save_rvf(os.path.join(out, "template.rvf"), data.template)
    items = []
    for it in data.items:
        img = f"images/{it.id}.rvf"
        masks = [f"masks/{it.id}_c{c}.rvf" for c in range(len(it.mask))]
        fld = f"fields/{it.id}.rvf"
        rio.save_rvf(os.path.join(out, img), it.image)
        for rel, m in zip(masks, it.mask):
            rio.save_rvf(os.path.join(out, rel), m, "mask")
        rio.save_field(os.path.join(out, fld), it.field)
        items.append(rio.ManifestItem(it.id, img, masks, fld))
    man = rio.Manifest(items, rio.split_ids([it.id for it in items]), root=out)
    rio.write_manifest(os.path.join(out, "manifest.json"), man)
    with open(os.path.join(out, "synth_config.json"), "w") as fh:
        json.dump(vars(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(items)} items to {out}")
    return EXIT_OK


def _load_split(man, split):
    items = man.items if split == "all" else man.subset(split)
    return items, [man.load_item(it) for it in items]


def cmd_train(args):
    man = rio.read_manifest(args.manifest)
    cfg = _read_json(args.config) if args.config else {}
    model_cfg = dict(cfg.pop("model", {}))
    _, train_items = _load_split(man, "train")
    _, val_items = _load_split(man, "val")
    if not train_items:
        raise FormatError("manifest has no training items")
    dims = train_items[0][0].ndim
    cfg.setdefault("dims", dims)
    cfg.setdefault("levels", DEFAULT_LEVELS[cfg["dims"]])
    if args.mask_guided:
        cfg["mask_enabled"] = True
    try:
        config = TrainConfig(**cfg)
        model = ModelConfig(dims=config.dims, levels=config.levels, **model_cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc
    history = args.history or os.path.splitext(args.out)[0] + ".loss.csv"
    dataset = [(img, mask) for img, mask, _ in train_items]
    validation = [(img, mask) for img, mask, _ in val_items] or None
    result = train(model, config, dataset, checkpoint_path=args.out, history_path=history, validation=validation)
    last = result.history[-1]
    print(f"trained {config.epochs} epochs, final loss {last['total']:.5f}; checkpoint {args.out}, history {history}")
    return EXIT_OK


def _method(args):
    if args.method == "identity":
        return lambda s, t: np.zeros((s.ndim,) + s.shape)
    if args.method == "demons":
        return lambda s, t: demons_register(s, t).field
    if not args.ckpt:
        raise UsageError("--ckpt is required for --method mrregnet")
    params = load_params(args.ckpt)
    return lambda s, t: np.asarray(register(params, s, t).field, dtype=np.float64)


def cmd_register(args):
    src = np.asarray(rio.load_image(args.source), dtype=np.float64)
    tgt = np.asarray(rio.load_image(args.target), dtype=np.float64)
    if src.shape != tgt.shape:
        raise FormatError(f"source {src.shape} and target {tgt.shape} differ in shape")
    fld = _method(args)(src, tgt)
    rio.save_field(args.out_field, fld)
    if args.out_warped:
        rio.save_image(args.out_warped, np.clip(warp(src, fld), 0.0, 1.0))
    print(f"wrote {args.out_field}")
    return EXIT_OK


def cmd_evaluate(args):
    man = rio.read_manifest(args.manifest)
    items, loaded = _load_split(man, args.split)
    if len(items) < 2:
        raise FormatError(f"split {args.split!r} has fewer than two items")
    method = _method(args)
    idx = protocol_pairs([it.id for it in items], args.sources, args.seed, args.all_pairs)
    pairs = [
        EvalPair(items[s].id, items[t].id, loaded[s][0], loaded[t][0], loaded[s][1], loaded[t][1])
        for s, t in idx
    ]
    base, reg = evaluate_pairs(method, pairs, report_path=args.report, timing=not args.no_timing)
    keys = [k for k in ("gncc", "ssim", "dsc_mean", "hd") if k in reg.mean]
    print(f"{len(pairs)} pairs ({args.method})")
    print(f"{'metric':<18}{'before':>14}{'after':>14}")
    for k in keys:
        print(f"{k:<18}{base.format(k):>14}{reg.format(k):>14}")
    rate = reg.mean.get("nonpos_jac_rate", math.nan)
    if not math.isnan(rate):
        print(f"{'nonpos_jac_%':<18}{'n/a':>14}{100 * rate:>13.2f}%")
    print(f"report written to {args.report}")
    return EXIT_OK


def cmd_gradcheck(args):
    worst = gradient_suite(args.dims, range(args.seeds))
    width = max(len(k) for k in worst)
    failed = 0
    for name, err in worst.items():
        ok = err <= TOLERANCE
        failed += not ok
        print(f"{name:<{width}}  {err:.3e}  {'ok' if ok else 'FAIL'}")
    print(f"{len(worst) - failed}/{len(worst)} within {TOLERANCE:g}")
    return EXIT_OK if not failed else EXIT_CHECK


def heatmap_rgb(fld, cmap="viridis", vmax=None, index=None):
    """Displacement magnitude of a 2D field (or one slice of a 3D one) as uint8 RGB."""
    from matplotlib import colormaps

    fld = np.asarray(fld, dtype=np.float64)
    mag = np.sqrt((fld**2).sum(axis=0))
    if mag.ndim == 3:
        mag = mag[mag.shape[0] // 2 if index is None else index]
    top = mag.max() if vmax is None else vmax
    norm = mag / top if top > 0 else np.zeros_like(mag)
    rgba = colormaps[cmap](np.clip(norm, 0.0, 1.0))
    return np.rint(rgba[..., :3] * 255).astype(np.uint8)


def cmd_heatmap(args):
    from PIL import Image

    fld = rio.load_field(args.field)
    try:
        rgb = heatmap_rgb(fld, args.cmap, args.vmax, args.slice)
    except KeyError as exc:
        raise UsageError(f"unknown colormap {args.cmap!r}") from exc
    except IndexError as exc:
        raise UsageError(f"slice {args.slice} out of range") from exc
    Image.fromarray(rgb, mode="RGB").save(args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "register": cmd_register,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "export-heatmap": cmd_heatmap,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads
    if threads is None:
        env = os.environ.get("MRREG_THREADS", "1")
        try:
            threads = _threads(env)
        except (ValueError, argparse.ArgumentTypeError):
            print(f"mrreg: MRREG_THREADS must be a positive integer, got {env!r}", file=sys.stderr)
            return EXIT_USAGE
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mrreg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MrRegError, OSError, ValueError) as exc:
        print(f"mrreg {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
