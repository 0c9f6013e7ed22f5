"""Multi-resolution encoder-decoder registration network.

Scales are indexed internally from the finest (``s = 0``) to the coarsest
(``s = K - 1``). Level outputs are returned coarsest first, so ``residuals[0]``
is the residual field of the lowest resolution and ``composed[-1]`` is the
full-resolution field used to warp the source.

Encoder, per scale: (1x1 stride-2 downsampler + leaky ReLU, except at s = 0),
then a residual block of two 3x3 convs with an identity or 1x1 projection
shortcut. Decoder, from coarse to fine: stride-2 transposed conv + leaky ReLU
(except at the coarsest scale), concatenation with the encoder features of
the same scale, 3x3 conv + leaky ReLU, and a linear 3x3 displacement head.
"""

import io
import json
import struct
from dataclasses import asdict, dataclass
from dataclasses import field as dc_field
from typing import List, Optional

import numpy as np

from . import diffgraph as dg
from .errors import FormatError, ShapeError
from .regcore import compose_residual, warp

DEFAULT_CHANNELS = {2: [16, 32, 64, 128, 256], 3: [16, 32, 64, 128]}
DEFAULT_LEVELS = {2: 5, 3: 4}

MAGIC = b"MRCK"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    dims: int = 2
    levels: Optional[int] = None
    channels: Optional[List[int]] = None
    slope: float = 0.2
    down_activation: bool = True

    in_channels = 2  # source and target stacked

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValueError(f"dims must be 2 or 3, got {self.dims}")
        if self.levels is None:
            self.levels = DEFAULT_LEVELS[self.dims]
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.channels is None:
            base = DEFAULT_CHANNELS[self.dims]
            self.channels = (base + [base[-1]] * self.levels)[: self.levels]
        self.channels = [int(c) for c in self.channels]
        if len(self.channels) != self.levels or min(self.channels) < 1:
            raise ValueError(f"need {self.levels} positive channel widths, got {self.channels}")
        if not 0 < self.slope < 1:
            raise ValueError("leaky slope must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def param_shapes(config):
    """Ordered mapping name -> shape for every learnable tensor."""
    nd, ch, k = config.dims, config.channels, config.levels
    k3, k1 = (3,) * nd, (1,) * nd
    shapes = {}

    def add(name, cout, cin, ksize):
        shapes[f"{name}.w"] = (cout, cin) + ksize
        shapes[f"{name}.b"] = (cout,)

    for s in range(k):
        cin = config.in_channels if s == 0 else ch[s]
        if s > 0:
            add(f"down{s}", ch[s], ch[s - 1], k1)
        add(f"enc{s}.conv1", ch[s], cin, k3)
        add(f"enc{s}.conv2", ch[s], ch[s], k3)
        if cin != ch[s]:
            add(f"enc{s}.proj", ch[s], cin, k1)
    for s in reversed(range(k)):
        if s < k - 1:
            # transposed conv kernel is stored in forward-conv layout (Cin, Cout, k...)
            shapes[f"up{s}.w"] = (ch[s + 1], ch[s]) + k3
            shapes[f"up{s}.b"] = (ch[s],)
        add(f"dec{s}.conv", ch[s], ch[s] if s == k - 1 else 2 * ch[s], k3)
        add(f"dec{s}.head", nd, ch[s], k3)
    return shapes


class ModelParams:
    """Named weight arrays plus the config that determines their shapes."""

    def __init__(self, config, arrays):
        self.config = config
        self.arrays = dict(arrays)
        expected = param_shapes(config)
        if list(expected) != list(self.arrays):
            raise ShapeError("parameter names do not match the model config")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {self.arrays[name].shape}")

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def count(self):
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype):
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def tensors(self, requires_grad=False):
        return {k: dg.Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}


def init_params(config, seed=0, dtype=None):
    """He-uniform conv weights, zero biases, zero displacement heads."""
    dtype = dtype or dg.get_default_dtype()
    rng = np.random.default_rng(seed)
    gain = np.sqrt(2.0 / (1.0 + config.slope**2))
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b") or ".head." in name:
            arrays[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:]))
        if name.startswith("up"):
            fan_in = int(shape[0] * np.prod(shape[2:]))
        bound = gain * np.sqrt(3.0 / fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelParams(config, arrays)


@dataclass
class LevelOutput:
    residuals: list
    composed: list


@dataclass
class RegistrationResult:
    field: np.ndarray
    warped: np.ndarray
    residuals: list = dc_field(default_factory=list)
    composed: list = dc_field(default_factory=list)
    warped_mask: Optional[np.ndarray] = None
    metrics: dict = dc_field(default_factory=dict)


def _batched_pair(source, target, dims):
    def prep(x):
        if isinstance(x, dg.Tensor):
            return x
        x = np.asarray(x, dtype=dg.get_default_dtype())
        if x.ndim == dims:
            x = x[None, None]
        elif x.ndim == dims + 1:
            x = x[:, None]
        return dg.Tensor(x)

    s, t = prep(source), prep(target)
    if s.shape != t.shape or s.shape[1] != 1 or s.ndim != dims + 2:
        raise ShapeError(f"source {s.shape} and target {t.shape} must be matching single-channel images")
    return s, t


def forward(params, source, target, weights=None):
    """Run the network on a source/target pair (or batch).

    ``source``/``target`` are unbatched images, ``(N, *spatial)`` stacks or
    ``(N, 1, *spatial)`` tensors. ``weights`` optionally maps parameter names
    to Tensors (e.g. with ``requires_grad``); by default constant tensors are
    built from ``params``.
    """
    cfg = params.config
    k, slope = cfg.levels, cfg.slope
    w = weights if weights is not None else params.tensors()
    s, t = _batched_pair(source, target, cfg.dims)
    spatial = s.shape[2:]
    factor = 2 ** (k - 1)
    if any(n % factor for n in spatial):
        raise ShapeError(f"extents {spatial} must be divisible by {factor} for {k} levels")

    def conv(x, name, stride=1, padding=1):
        return dg.conv(x, w[f"{name}.w"], w[f"{name}.b"], stride, padding)

    h = dg.concat_channels(s, t)
    skips = []
    for lvl in range(k):
        if lvl > 0:
            h = conv(h, f"down{lvl}", stride=2, padding=0)
            if cfg.down_activation:
                h = dg.leaky_relu(h, slope)
        y = dg.leaky_relu(conv(h, f"enc{lvl}.conv1"), slope)
        y = conv(y, f"enc{lvl}.conv2")
        shortcut = conv(h, f"enc{lvl}.proj", padding=0) if f"enc{lvl}.proj.w" in w else h
        h = dg.leaky_relu(y + shortcut, slope)
        skips.append(h)

    residuals, composed = [], []
    g = skips[-1]
    for lvl in reversed(range(k)):
        if lvl < k - 1:
            up = dg.conv_transpose(g, w[f"up{lvl}.w"], w[f"up{lvl}.b"], stride=2, padding=1)
            g = dg.concat_channels(skips[lvl], dg.leaky_relu(up, slope))
        g = dg.leaky_relu(conv(g, f"dec{lvl}.conv"), slope)
        d = conv(g, f"dec{lvl}.head")
        residuals.append(d)
        composed.append(d if not composed else compose_residual(composed[-1], d))
    return LevelOutput(residuals, composed)


def register(params, source, target, source_mask=None):
    """Inference: predict the finest composed field and warp the source.

    Inputs are unbatched arrays; no graph is recorded and masks are optional.
    """
    with dg.no_grad():
        out = forward(params, source, target)
    fld = out.composed[-1].data[0]
    src = np.asarray(source, dtype=fld.dtype)
    warped = warp(src, fld)
    warped_mask = None
    if source_mask is not None:
        warped_mask = warp(np.asarray(source_mask, dtype=fld.dtype), fld)
    return RegistrationResult(
        field=fld,
        warped=warped,
        residuals=[r.data[0] for r in out.residuals],
        composed=[c.data[0] for c in out.composed],
        warped_mask=warped_mask,
    )


# ---------------------------------------------------------------------------
# checkpoint format: "MRCK", u16 version, u32 + JSON config, u32 entry count,
# then per entry u16 + name, u8 rank, u32 extents, float32 LE payload


def dumps_params(params):
    buf = io.BytesIO()
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params.arrays)))
    for name, arr in params.arrays.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads_params(data):
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("not an MRCK checkpoint", 0)
    version, cfg_len = struct.unpack("<HI", take(6, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    try:
        config = ModelConfig.from_dict(json.loads(take(cfg_len, "config").decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad config block: {exc}", 10) from exc
    (count,) = struct.unpack("<I", take(4, "entry count"))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(take(4 * n, name), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(data):
        raise FormatError("trailing bytes after last entry", pos)
    try:
        return ModelParams(config, arrays)
    except ShapeError as exc:
        raise FormatError(str(exc), pos) from exc


def save_params(params, path):
    with open(path, "wb") as fh:
        fh.write(dumps_params(params))


def load_params(path):
    with open(path, "rb") as fh:
        return loads_params(fh.read())
