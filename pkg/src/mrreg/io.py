"""File formats: RVF arrays, PNG images and JSON dataset manifests.

RVF layout (all little-endian)::

    b"RVF1" | u8 kind | u8 rank | u32 extent * rank | [u32 components] | f32 payload

``kind`` is 0 for images, 1 for masks and 2 for displacement fields; only
fields carry the component count. Field payloads are stored component-major,
matching the in-memory ``(ndim, *spatial)`` layout.
"""

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from .errors import FormatError, ShapeError

RVF_MAGIC = b"RVF1"
KINDS = {"image": 0, "mask": 1, "field": 2}
_KIND_NAMES = {v: k for k, v in KINDS.items()}

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.60, 0.05, 0.35)


# ---------------------------------------------------------------------------
# RVF


def dumps_rvf(arr, kind="image"):
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {sorted(KINDS)}")
    arr = np.asarray(arr)
    if kind == "field":
        if arr.ndim < 2 or arr.shape[0] != arr.ndim - 1:
            raise ShapeError(f"field must be (ndim, *spatial), got {arr.shape}")
        spatial, comps = arr.shape[1:], (arr.shape[0],)
    else:
        spatial, comps = arr.shape, ()
        if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1):
            raise ValueError(f"{kind} values must lie in [0, 1]")
    head = RVF_MAGIC + struct.pack("<BB", KINDS[kind], len(spatial))
    head += struct.pack(f"<{len(spatial) + len(comps)}I", *spatial, *comps)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def loads_rvf(data):
    """Parse RVF bytes; returns ``(array, kind)`` with a float32 array."""
    if len(data) < 6:
        raise FormatError("truncated RVF header", len(data))
    if data[:4] != RVF_MAGIC:
        raise FormatError("not an RVF1 file", 0)
    code, rank = data[4], data[5]
    if code not in _KIND_NAMES:
        raise FormatError(f"unknown RVF kind {code}", 4)
    kind = _KIND_NAMES[code]
    n_dims = rank + (kind == "field")
    end = 6 + 4 * n_dims
    if len(data) < end:
        raise FormatError("truncated RVF extents", len(data))
    dims = struct.unpack(f"<{n_dims}I", data[6:end])
    shape = (dims[-1],) + dims[:-1] if kind == "field" else dims
    if kind == "field" and shape[0] != rank:
        raise FormatError(f"field has {shape[0]} components for rank {rank}", 6 + 4 * rank)
    expected = end + 4 * int(np.prod(shape, dtype=np.int64))
    if len(data) != expected:
        raise FormatError(f"payload length mismatch: expected {expected} bytes, got {len(data)}", min(len(data), expected))
    arr = np.frombuffer(data, dtype="<f4", offset=end).reshape(shape).astype(np.float32)
    if kind != "field" and arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1):
        raise FormatError(f"{kind} values outside [0, 1]", end)
    return arr, kind


def save_rvf(path, arr, kind="image"):
    with open(path, "wb") as fh:
        fh.write(dumps_rvf(arr, kind))


def load_rvf(path, kind=None):
    with open(path, "rb") as fh:
        arr, got = loads_rvf(fh.read())
    if kind is not None and got != kind:
        raise FormatError(f"{path}: expected an RVF {kind}, found {got}", 4)
    return arr


# ---------------------------------------------------------------------------
# images


def _is_png(path):
    return str(path).lower().endswith(".png")


def load_image(path):
    """Load a 2D PNG (8-bit / 255, 16-bit / 65535) or an RVF image/mask as float32 in [0, 1]."""
    if not _is_png(path):
        with open(path, "rb") as fh:
            arr, kind = loads_rvf(fh.read())
        if kind == "field":
            raise FormatError(f"{path}: expected an image, found a field", 4)
        return arr
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except OSError as exc:
        raise FormatError(f"{path}: unreadable PNG ({exc})", 0) from exc
    if mode == "L":
        return (arr.astype(np.float64) / 255.0).astype(np.float32)
    if mode.startswith("I"):
        return (arr.astype(np.float64) / 65535.0).astype(np.float32)
    raise FormatError(f"{path}: expected a grayscale PNG, got mode {mode}", 0)


def save_image(path, img, bits=8, kind="image"):
    """Write a 2D image as PNG (quantized to ``bits``) or any image as RVF (lossless)."""
    img = np.asarray(img)
    if not _is_png(path):
        save_rvf(path, img, kind)
        return
    if img.ndim != 2:
        raise ShapeError(f"PNG output needs a 2D image, got shape {img.shape}")
    clipped = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if bits == 8:
        Image.fromarray(np.rint(clipped * 255).astype(np.uint8), mode="L").save(path)
    elif bits == 16:
        Image.fromarray(np.rint(clipped * 65535).astype(np.uint16)).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


def load_field(path):
    return load_rvf(path, kind="field")


def save_field(path, fld):
    save_rvf(path, fld, "field")


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestItem:
    id: str
    image: str
    mask: List[str] = field(default_factory=list)
    field: Optional[str] = None


@dataclass
class Manifest:
    """Dataset listing; paths are relative to ``root`` (the manifest directory)."""

    items: List[ManifestItem]
    splits: Dict[str, List[str]]
    root: str = "."

    def __post_init__(self):
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise FormatError("manifest ids are not unique")
        if set(self.splits) - set(SPLITS):
            raise FormatError(f"unknown split names {sorted(set(self.splits) - set(SPLITS))}")
        tagged = [i for name in SPLITS for i in self.splits.get(name, [])]
        if len(tagged) != len(set(tagged)) or set(tagged) != set(ids):
            raise FormatError("manifest splits must be disjoint and cover every item")

    def path(self, rel):
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def subset(self, split):
        keep = set(self.splits.get(split, []))
        return [it for it in self.items if it.id in keep]

    def load_item(self, item):
        """``(image, mask or None, true field or None)`` as float64 arrays."""
        img = np.asarray(load_image(self.path(item.image)), dtype=np.float64)
        mask = None
        if item.mask:
            mask = np.stack([np.asarray(load_image(self.path(p)), dtype=np.float64) for p in item.mask])
        fld = None if item.field is None else np.asarray(load_field(self.path(item.field)), dtype=np.float64)
        return img, mask, fld

    def to_dict(self):
        return {
            "items": [
                {"id": it.id, "image": it.image, "mask": list(it.mask), "field": it.field} for it in self.items
            ],
            "splits": {k: list(self.splits.get(k, [])) for k in SPLITS},
        }


def split_ids(ids, fractions=DEFAULT_FRACTIONS):
    """Consecutive train/val/test blocks of ``ids`` in the given proportions."""
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    n = len(ids)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return {
        "train": list(ids[:n_train]),
        "val": list(ids[n_train:n_train + n_val]),
        "test": list(ids[n_train + n_val:]),
    }


def write_manifest(path, manifest):
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path, check_paths=True):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg})", exc.pos) from exc
    try:
        items = []
        for entry in doc["items"]:
            masks = entry.get("mask") or []
            if isinstance(masks, str):
                masks = [masks]
            items.append(ManifestItem(str(entry["id"]), entry["image"], list(masks), entry.get("field")))
        splits = {k: [str(i) for i in v] for k, v in doc.get("splits", {}).items()}
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    if not splits:
        splits = split_ids([it.id for it in items])
    man = Manifest(items, splits, root=os.path.dirname(os.path.abspath(path)))
    if check_paths:
        for it in items:
            for rel in [it.image, *it.mask] + ([it.field] if it.field else []):
                if not os.path.exists(man.path(rel)):
                    raise FormatError(f"{path}: item {it.id} refers to missing file {rel}")
    return man
