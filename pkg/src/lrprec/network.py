"""Feedforward layer stack: configuration, init, forward/backward, checkpoints."""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError, IntegrityError

KINDS = ("conv", "relu", "maxpool", "flatten", "dense")
MAGIC = b"LRPREC01"
_LEN = struct.Struct("<Q")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    window: int = 0
    in_features: int = 0
    out_features: int = 0
    bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")

    @classmethod
    def conv(cls, in_channels, out_channels, kernel, stride=1, pad=0, bias=True):
        return cls("conv", in_channels=in_channels, out_channels=out_channels,
                   kernel=kernel, stride=stride, pad=pad, bias=bias)

    @classmethod
    def relu(cls):
        return cls("relu")

    @classmethod
    def maxpool(cls, window, stride=None):
        return cls("maxpool", window=window, stride=window if stride is None else stride)

    @classmethod
    def flatten(cls):
        return cls("flatten")

    @classmethod
    def dense(cls, in_features, out_features, bias=True):
        return cls("dense", in_features=in_features, out_features=out_features, bias=bias)

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "dense")

    def to_dict(self) -> dict:
        keys = {
            "conv": ("in_channels", "out_channels", "kernel", "stride", "pad", "bias"),
            "relu": (),
            "maxpool": ("window", "stride"),
            "flatten": (),
            "dense": ("in_features", "out_features", "bias"),
        }[self.kind]
        d = asdict(self)
        return {"kind": self.kind, **{k: d[k] for k in keys}}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        kind = d.pop("kind", None)
        if kind == "maxpool" and "stride" not in d:
            d["stride"] = d.get("window", 0)
        try:
            return cls(kind, **d)
        except TypeError as exc:
            raise ConfigError(f"bad layer spec {d!r}: {exc}") from None

    def describe(self) -> str:
        d = self.to_dict()
        d.pop("kind")
        inner = ", ".join(f"{k}={v}" for k, v in d.items())
        return f"{self.kind}({inner})"


def layer_shapes(specs, input_shape) -> list[tuple]:
    """Activation shapes entering each layer, plus the final output shape.

    Raises ConfigError naming the first incompatible pair of layers.
    """
    shapes = [tuple(int(s) for s in input_shape)]
    if len(shapes[0]) != 3 or min(shapes[0]) < 1:
        raise ConfigError(f"input shape must be [C,H,W] with positive extents, got {input_shape}")
    for idx, spec in enumerate(specs):
        cur = shapes[-1]
        where = (f"layer {idx} {spec.describe()} after "
                 + (f"layer {idx - 1} {specs[idx - 1].describe()}" if idx else "the input")
                 + f" producing shape {list(cur)}")
        if spec.kind == "conv":
            if len(cur) != 3 or cur[0] != spec.in_channels:
                raise ConfigError(f"incompatible: {where}")
            if spec.out_channels < 1 or spec.kernel < 1:
                raise ConfigError(f"conv needs positive out_channels and kernel: {where}")
            try:
                h = T.conv_output_size(cur[1], spec.kernel, spec.stride, spec.pad)
                w = T.conv_output_size(cur[2], spec.kernel, spec.stride, spec.pad)
            except ConfigError as exc:
                raise ConfigError(f"{exc}: {where}") from None
            shapes.append((spec.out_channels, h, w))
        elif spec.kind == "maxpool":
            if len(cur) != 3 or spec.window < 1 or spec.stride < 1:
                raise ConfigError(f"incompatible: {where}")
            for extent in cur[1:]:
                if extent < spec.window or (extent - spec.window) % spec.stride:
                    raise ConfigError(f"pooling does not tile: {where}")
            shapes.append((cur[0],
                           (cur[1] - spec.window) // spec.stride + 1,
                           (cur[2] - spec.window) // spec.stride + 1))
        elif spec.kind == "relu":
            shapes.append(cur)
        elif spec.kind == "flatten":
            shapes.append((int(np.prod(cur)),))
        else:
            if len(cur) != 1 or cur[0] != spec.in_features or spec.out_features < 1:
                raise ConfigError(f"incompatible: {where}")
            shapes.append((spec.out_features,))
    if not specs or specs[-1].kind != "dense":
        raise ConfigError("the final layer must be dense (it produces the feature vector)")
    return shapes


@dataclass
class LayerStack:
    specs: tuple
    input_shape: tuple
    params: list  # per layer: {} or {"weight": ..., "bias": ...}
    seed: int = 0

    def __post_init__(self):
        self.specs = tuple(self.specs)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.shapes = layer_shapes(self.specs, self.input_shape)
        if len(self.params) != len(self.specs):
            raise IntegrityError("one parameter dict per layer is required")
        for idx, (spec, p) in enumerate(zip(self.specs, self.params)):
            for name, shape in _param_shapes(spec, self.shapes[idx]).items():
                if name not in p or p[name].shape != shape:
                    got = None if name not in p else p[name].shape
                    raise IntegrityError(f"layer {idx} {name} must have shape {shape}, got {got}")

    @property
    def feature_dim(self) -> int:
        return self.shapes[-1][0]

    def named_params(self) -> dict:
        """Flat name -> array view of every trainable tensor, in checkpoint order."""
        out = {}
        for idx, p in enumerate(self.params):
            for name in ("weight", "bias"):
                if name in p:
                    out[f"{idx}.{name}"] = p[name]
        return out

    def copy(self) -> "LayerStack":
        params = [{k: v.copy() for k, v in p.items()} for p in self.params]
        return LayerStack(self.specs, self.input_shape, params, self.seed)


def _param_shapes(spec: LayerSpec, in_shape: tuple) -> dict:
    if spec.kind == "conv":
        shapes = {"weight": (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)}
        if spec.bias:
            shapes["bias"] = (spec.out_channels,)
        return shapes
    if spec.kind == "dense":
        shapes = {"weight": (spec.out_features, spec.in_features)}
        if spec.bias:
            shapes["bias"] = (spec.out_features,)
        return shapes
    return {}


def init_stack(specs, seed: int, input_shape) -> LayerStack:
    """He-normal weights (variance 2 / fan_in) and zero biases, deterministic in ``seed``."""
    specs = tuple(s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s) for s in specs)
    shapes = layer_shapes(specs, input_shape)
    rng = np.random.default_rng(seed)
    params = []
    for idx, spec in enumerate(specs):
        p = {}
        for name, shape in _param_shapes(spec, shapes[idx]).items():
            if name == "weight":
                fan_in = int(np.prod(shape[1:]))
                p[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            else:
                p[name] = np.zeros(shape)
        params.append(p)
    return LayerStack(specs, tuple(input_shape), params, seed)


@dataclass
class ForwardTrace:
    """Inputs to every layer, the pooling argmax maps and the output features.

    With a batch of images every stored tensor carries a leading batch axis.
    """
    inputs: list
    features: np.ndarray
    pool_indices: dict = field(default_factory=dict)
    batched: bool = False


def _layer_forward(spec, p, x, sample_ndim):
    if spec.kind == "conv":
        y = T.conv2d(x, p["weight"], spec.stride, spec.pad)
        if "bias" in p:
            y = y + p["bias"][:, None, None]
        return y, None
    if spec.kind == "relu":
        return np.maximum(x, 0.0), None
    if spec.kind == "maxpool":
        return T.maxpool2d(x, spec.window, spec.stride)
    if spec.kind == "flatten":
        lead = x.shape[: x.ndim - sample_ndim]
        return x.reshape(lead + (-1,)), None
    y = x @ p["weight"].T
    if "bias" in p:
        y = y + p["bias"]
    return y, None


def _run(stack: LayerStack, x: np.ndarray, batched: bool) -> ForwardTrace:
    inputs, pools = [], {}
    for idx, (spec, p) in enumerate(zip(stack.specs, stack.params)):
        inputs.append(x)
        x, aux = _layer_forward(spec, p, x, len(stack.shapes[idx]))
        if aux is not None:
            pools[idx] = aux
    return ForwardTrace(inputs, x, pools, batched)


def forward(stack: LayerStack, image) -> ForwardTrace:
    image = T.as_tensor(image)
    if image.shape != stack.input_shape:
        raise DimensionError(f"image shape {image.shape} does not match stack input {stack.input_shape}")
    return _run(stack, image, batched=False)


def forward_batch(stack: LayerStack, images) -> ForwardTrace:
    images = T.as_tensor(images)
    if images.ndim != 4 or images.shape[1:] != stack.input_shape:
        raise DimensionError(
            f"batch shape {images.shape} does not match [N, {', '.join(map(str, stack.input_shape))}]"
        )
    return _run(stack, images, batched=True)


def _check_trace(stack: LayerStack, trace: ForwardTrace) -> None:
    if len(trace.inputs) != len(stack.specs):
        raise IntegrityError(
            f"trace has {len(trace.inputs)} layers but the stack has {len(stack.specs)}"
        )
    skip = 1 if trace.batched else 0
    for idx, x in enumerate(trace.inputs):
        if tuple(x.shape[skip:]) != stack.shapes[idx]:
            raise IntegrityError(
                f"trace input {idx} has shape {x.shape}, stack expects {stack.shapes[idx]}"
            )
    for idx, spec in enumerate(stack.specs):
        if spec.kind == "maxpool" and idx not in trace.pool_indices:
            raise IntegrityError(f"trace lacks the argmax map of pooling layer {idx}")


def backward(stack: LayerStack, trace: ForwardTrace, grad_features):
    """Reverse-mode gradients of ``sum(features * grad_features)``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` mirrors
    ``stack.params``. For a batched trace the parameter gradients are summed
    over the batch and ``input_grad`` keeps the batch axis.
    """
    _check_trace(stack, trace)
    g = T.as_tensor(grad_features)
    if g.shape != trace.features.shape:
        raise DimensionError(f"grad_features shape {g.shape} != features shape {trace.features.shape}")
    grads = [dict() for _ in stack.specs]
    for idx in range(len(stack.specs) - 1, -1, -1):
        spec, p, x = stack.specs[idx], stack.params[idx], trace.inputs[idx]
        if spec.kind == "dense":
            flat_g = g.reshape(-1, g.shape[-1])
            grads[idx]["weight"] = flat_g.T @ x.reshape(-1, x.shape[-1])
            if "bias" in p:
                grads[idx]["bias"] = flat_g.sum(axis=0)
            g = g @ p["weight"]
        elif spec.kind == "conv":
            grads[idx]["weight"] = T.conv2d_grad_kernels(x, g, p["weight"].shape, spec.stride, spec.pad)
            if "bias" in p:
                grads[idx]["bias"] = g.sum(axis=tuple(a for a in range(g.ndim) if a != g.ndim - 3))
            g = T.conv2d_grad_input(g, p["weight"], x.shape, spec.stride, spec.pad)
        elif spec.kind == "relu":
            g = g * (x > 0)
        elif spec.kind == "maxpool":
            g = T.maxpool2d_scatter(g, trace.pool_indices[idx], x.shape)
        else:
            g = g.reshape(x.shape)
    return grads, g


# -- checkpoints -------------------------------------------------------------

def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(stack: LayerStack, sections: dict | None = None, meta: dict | None = None) -> bytes:
    """Serialize a stack plus optional extra tensor sections.

    ``sections`` maps a section name to an ordered ``{tensor name: array}``
    dict; the stack's own tensors always form the first section, ``theta``.
    """
    all_sections = {"theta": stack.named_params()}
    for name, tensors in (sections or {}).items():
        if name == "theta":
            raise ValueError("section name 'theta' is reserved")
        all_sections[name] = tensors
    header = {
        "specs": [s.to_dict() for s in stack.specs],
        "input_shape": list(stack.input_shape),
        "feature_dim": stack.feature_dim,
        "seed": stack.seed,
        "sections": [
            {"name": name, "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]}
            for name, tensors in all_sections.items()
        ],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, _LEN.pack(len(head)), head]
    for tensors in all_sections.values():
        for arr in tensors.values():
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


@dataclass
class Checkpoint:
    stack: LayerStack
    sections: dict
    meta: dict


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC):
        raise FormatError("file shorter than the magic bytes", offset=len(data))
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}", offset=0)
    pos = len(MAGIC)
    if len(data) < pos + _LEN.size:
        raise FormatError("truncated header length", offset=len(data))
    (n,) = _LEN.unpack_from(data, pos)
    pos += _LEN.size
    if len(data) < pos + n:
        raise FormatError(f"truncated header: need {n} bytes", offset=len(data))
    try:
        header = json.loads(data[pos:pos + n].decode("utf-8"))
        specs = [LayerSpec.from_dict(s) for s in header["specs"]]
        input_shape = tuple(header["input_shape"])
        section_defs = header["sections"]
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"unreadable header: {exc}", offset=pos) from None
    pos += n
    sections = {}
    for sec in section_defs:
        tensors = {}
        for t in sec["tensors"]:
            shape = tuple(t["shape"])
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if len(data) < pos + nbytes:
                raise FormatError(
                    f"truncated payload in tensor {sec['name']}/{t['name']}", offset=len(data)
                )
            tensors[t["name"]] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos) \
                .astype(np.float64).reshape(shape)
            pos += nbytes
        sections[sec["name"]] = tensors
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after payload", offset=pos)
    theta = sections.pop("theta", {})
    params = [dict() for _ in specs]
    for key, arr in theta.items():
        idx, name = key.split(".")
        params[int(idx)][name] = arr
    try:
        stack = LayerStack(specs, input_shape, params, int(header.get("seed", 0)))
    except (IntegrityError, ConfigError) as exc:
        raise FormatError(f"checkpoint does not describe a valid stack: {exc}", offset=len(MAGIC)) from None
    return Checkpoint(stack, sections, header.get("meta", {}))


def save_checkpoint(stack: LayerStack, path, sections=None, meta=None) -> None:
    atomic_write_bytes(path, encode_checkpoint(stack, sections, meta))


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path) -> LayerStack:
    return read_checkpoint(path).stack
