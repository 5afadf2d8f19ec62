"""
Slim 1D U-Net for per-sample spindle probabilities.

Each level holds two composite layers (conv -> ReLU -> batch norm). The encoder
max-pools between levels, the decoder upsamples by nearest neighbour, applies
an up-convolution that halves the channel count and concatenates the matching
encoder output. A kernel-1 convolution maps to two channels (spindle,
no-spindle) followed by a channel softmax.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, FormatError, ShapeError

N_CLASSES = 2
SPINDLE = 0  # channel index of the spindle class in the softmax output

MAGIC = b"SUMO"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    levels: int = 3
    pool_widths: tuple[int, ...] = (4, 4)
    channels: tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 7
    dilations: tuple[int, ...] = (1, 1, 1)
    up_kernel_size: int = 4
    smoothing_width: int = 42

    def __post_init__(self):
        # JSON round trips hand us lists
        for name in ("pool_widths", "channels", "dilations"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if len(self.pool_widths) != self.levels - 1:
            raise ConfigError("need levels - 1 pool widths")
        if len(self.channels) != self.levels or len(self.dilations) != self.levels:
            raise ConfigError("need one channel count and one dilation per level")
        values = (*self.pool_widths, *self.channels, *self.dilations,
                  self.kernel_size, self.up_kernel_size, self.smoothing_width)
        if any(v < 1 for v in values):
            raise ConfigError("all architecture entries must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @property
    def min_length(self) -> int:
        return int(np.prod(self.pool_widths, dtype=np.int64)) if self.pool_widths else 1


@dataclass
class ModelParams:
    arch: ArchConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def trainable(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not _is_buffer(k)}

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()},
                           json.loads(json.dumps(self.meta)))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()},
                           dict(self.meta))


def _is_buffer(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


# ---------------------------------------------------------------- layout

def _blocks(arch: ArchConfig):
    """Yield (prefix, kind, in_ch, out_ch, kernel, dilation) in declaration order."""
    k = arch.kernel_size
    c_in = 1
    for lvl in range(arch.levels):
        c = arch.channels[lvl]
        d = arch.dilations[lvl]
        yield f"enc{lvl}.conv0", "composite", c_in, c, k, d
        yield f"enc{lvl}.conv1", "composite", c, c, k, d
        c_in = c
    for lvl in reversed(range(arch.levels - 1)):
        c_deep = arch.channels[lvl + 1]
        c = arch.channels[lvl]
        d = arch.dilations[lvl]
        yield f"dec{lvl}.up", "conv", c_deep, c_deep // 2, arch.up_kernel_size, 1
        yield f"dec{lvl}.conv0", "composite", c_deep // 2 + c, c, k, d
        yield f"dec{lvl}.conv1", "composite", c, c, k, d
    yield "head", "conv", arch.channels[0], N_CLASSES, 1, 1


def parameter_shapes(arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for prefix, kind, cin, cout, k, _ in _blocks(arch):
        shapes[f"{prefix}.weight"] = (cout, cin, k)
        shapes[f"{prefix}.bias"] = (cout,)
        if kind == "composite":
            bn = prefix.replace("conv", "bn")
            for suffix in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"{bn}.{suffix}"] = (cout,)
    return shapes


def count_parameters(arch: ArchConfig) -> int:
    """Closed-form number of trainable values (kernels, biases, gamma, beta)."""
    k, ku, ch = arch.kernel_size, arch.up_kernel_size, arch.channels

    def composite(cin, cout):
        return cout * cin * k + cout + 2 * cout

    total = 0
    c_in = 1
    for c in ch:
        total += composite(c_in, c) + composite(c, c)
        c_in = c
    for lvl in range(arch.levels - 1):
        half = ch[lvl + 1] // 2
        total += half * ch[lvl + 1] * ku + half
        total += composite(half + ch[lvl], ch[lvl]) + composite(ch[lvl], ch[lvl])
    total += N_CLASSES * ch[0] + N_CLASSES
    return total


def receptive_field(arch: ArchConfig, fs: float = 100.0) -> float:
    """Receptive field (seconds) of one bottleneck activation."""
    rf, jump = 1, 1
    for lvl in range(arch.levels):
        rf += 2 * (arch.kernel_size - 1) * arch.dilations[lvl] * jump
        if lvl < arch.levels - 1:
            w = arch.pool_widths[lvl]
            rf += (w - 1) * jump
            jump *= w
    return rf / fs


def build(arch: ArchConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Kaiming-uniform kernels (bound sqrt(6 / fan_in)), zero biases, unit BN."""
    arch.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(arch).items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2]
            bound = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif name.endswith(".gamma") or name.endswith(".running_var"):
            tensors[name] = np.ones(shape, dtype=dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return ModelParams(arch, tensors, {"epoch": 0, "best_f1_bar": None})


# ---------------------------------------------------------------- forward / backward

def _conv(params: ModelParams, prefix: str, dilation: int) -> nn.ConvLayer:
    t = params.tensors
    return nn.ConvLayer(t[f"{prefix}.weight"], t[f"{prefix}.bias"], dilation)


def _bn(params: ModelParams, prefix: str, mode: str, track_stats: bool) -> nn.BatchNormLayer:
    t = params.tensors
    bn = prefix.replace("conv", "bn")
    return nn.BatchNormLayer(t[f"{bn}.gamma"], t[f"{bn}.beta"],
                             t[f"{bn}.running_mean"], t[f"{bn}.running_var"],
                             mode=mode, track_stats=track_stats)


class Tape:
    """Activations recorded during a forward pass, consumed by ``backward``."""

    def __init__(self, mode: str):
        self.mode = mode
        self.records: list[tuple] = []
        self.probs = None
        self.grad_input = None  # filled by backward


def forward(params: ModelParams, x: np.ndarray, mode: str = "eval",
            tape: Tape | None = None, track_stats: bool = True) -> np.ndarray:
    """Return per-sample class probabilities of shape [B, 2, T]."""
    arch = params.arch
    if x.ndim != 3 or x.shape[1] != 1:
        raise ShapeError(f"model input must be [B, 1, T], got {x.shape}")
    if x.shape[2] < arch.min_length:
        raise ShapeError(f"input length {x.shape[2]} shorter than pooling product {arch.min_length}")
    x = x.astype(params.tensors["head.weight"].dtype, copy=False)
    rec = tape.records if tape is not None else None

    def composite(h, prefix, dilation):
        conv = _conv(params, prefix, dilation)
        a = nn.conv1d(h, conv)
        r = nn.relu(a)
        y = nn.batchnorm1d(r, _bn(params, prefix, mode, track_stats))
        if rec is not None:
            rec.append(("composite", prefix, dilation, h, r))
        return y

    skips = []
    h = x
    for lvl in range(arch.levels):
        d = arch.dilations[lvl]
        h = composite(h, f"enc{lvl}.conv0", d)
        h = composite(h, f"enc{lvl}.conv1", d)
        if lvl < arch.levels - 1:
            skips.append(h)
            w = arch.pool_widths[lvl]
            t_in = h.shape[2]
            h, idx = nn.maxpool1d(h, w)
            if rec is not None:
                rec.append(("pool", lvl, w, t_in, idx))
    for lvl in reversed(range(arch.levels - 1)):
        skip = skips[lvl]
        w = arch.pool_widths[lvl]
        t_in = h.shape[2]
        u = nn.upsample_nn(h, w, skip.shape[2])
        if rec is not None:
            rec.append(("upsample", w, t_in))
        up = _conv(params, f"dec{lvl}.up", 1)
        if rec is not None:
            rec.append(("conv", f"dec{lvl}.up", u))
        h = nn.concat_channels(nn.conv1d(u, up), skip)
        if rec is not None:
            rec.append(("concat", up.weight.shape[0], lvl))
        d = arch.dilations[lvl]
        h = composite(h, f"dec{lvl}.conv0", d)
        h = composite(h, f"dec{lvl}.conv1", d)
    head = _conv(params, "head", 1)
    if rec is not None:
        rec.append(("conv", "head", h))
    probs = nn.softmax_channels(nn.conv1d(h, head))
    if tape is not None:
        tape.probs = probs
    return probs


def backward(params: ModelParams, tape: Tape, grad_probs: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss wrt every trainable tensor, given dL/dprobs."""
    grads = {}
    g = nn.softmax_channels_backward(tape.probs, grad_probs)
    skip_grads = {}
    for rec in reversed(tape.records):
        kind = rec[0]
        if kind == "conv":
            _, prefix, inp = rec
            g, gw, gb = nn.conv1d_backward(inp, _conv(params, prefix, 1), g)
            grads[f"{prefix}.weight"] = gw
            grads[f"{prefix}.bias"] = gb
        elif kind == "composite":
            _, prefix, dilation, inp, r = rec
            bn = prefix.replace("conv", "bn")
            g, gg, gbeta = nn.batchnorm1d_backward(r, _bn(params, prefix, tape.mode, False), g)
            grads[f"{bn}.gamma"] = gg
            grads[f"{bn}.beta"] = gbeta
            g = nn.relu_backward(r, g)
            g, gw, gb = nn.conv1d_backward(inp, _conv(params, prefix, dilation), g)
            grads[f"{prefix}.weight"] = gw
            grads[f"{prefix}.bias"] = gb
        elif kind == "concat":
            _, c1, lvl = rec
            g, skip_grads[lvl] = nn.concat_channels_backward(g, c1)
        elif kind == "upsample":
            _, w, t_in = rec
            g = nn.upsample_nn_backward(g, w, t_in)
        elif kind == "pool":
            _, lvl, w, t_in, idx = rec
            g = nn.maxpool1d_backward(g, idx, w, t_in)
            # the pooled encoder output also fed the skip connection
            g = g + skip_grads.pop(lvl)
    tape.grad_input = g
    return grads


def predict_proba(params: ModelParams, x: np.ndarray, batch_size: int = 12) -> np.ndarray:
    """Eval-mode probabilities for a stack of equal-length segments [N, T]."""
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None]
    out = []
    for start in range(0, len(x), batch_size):
        out.append(forward(params, x[start:start + batch_size, None, :], mode="eval"))
    if not out:
        return np.zeros((0, N_CLASSES, x.shape[-1]), dtype=np.float32)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------- checkpoints

def save(params: ModelParams, path, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write a checkpoint: magic, version, JSON header, raw little-endian f32 blocks.

    ``extra`` holds additional named tensors (optimizer state) stored after
    the model tensors.
    """
    blocks = list(params.tensors.items()) + list((extra or {}).items())
    header = {
        "arch": params.arch.to_dict(),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in blocks],
        "n_model_tensors": len(params.tensors),
        "meta": params.meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)


def load(path, arch: ArchConfig | None = None, with_extra: bool = False):
    """Read a checkpoint written by ``save``.

    If ``arch`` is given it must equal the stored architecture. Returns the
    params, or ``(params, extra)`` when ``with_extra`` is set.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not a SUMO checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        stored_arch = ArchConfig.from_dict(header["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    if arch is not None and arch != stored_arch:
        raise FormatError(f"{path}: architecture mismatch ({stored_arch} != {arch})")
    expected = parameter_shapes(stored_arch)
    offset = 12 + hlen
    tensors, extra = {}, {}
    for i, entry in enumerate(header["tensors"]):
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        chunk = data[offset:offset + 4 * n]
        if len(chunk) != 4 * n:
            raise FormatError(f"{path}: truncated at tensor {entry['name']}")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
        offset += 4 * n
        if i < header["n_model_tensors"]:
            tensors[entry["name"]] = arr
        else:
            extra[entry["name"]] = arr
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes after tensor data")
    if {k: v.shape for k, v in tensors.items()} != expected or list(tensors) != list(expected):
        raise FormatError(f"{path}: tensor table disagrees with architecture")
    params = ModelParams(stored_arch, tensors, header.get("meta", {}))
    return (params, extra) if with_extra else params
