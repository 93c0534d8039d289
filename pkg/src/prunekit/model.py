"""CNN graph description, toy network builders, FLOPs/parameter accounting
and checkpoint persistence.

A ModelGraph is an ordered list of layer objects, each owning its weight
tensors. Residual blocks are single layers wrapping two convolutions and an
optional 1x1 projection shortcut. The graph is cloneable; clones share no
state, so rollouts can mutate their own copy freely.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import ShapeError, Tensor
from .optim import ParamStore

CHECKPOINT_MAGIC = b"PKCHKPT1"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


def he_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv2D:
    def __init__(self, in_channels: int, out_channels: int, kh: int, kw: int,
                 stride: int = 1, pad: int = 0, prunable: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        if rng is None:
            w = np.zeros((out_channels, in_channels, kh, kw), dtype=dtype)
        else:
            w = he_init(rng, (out_channels, in_channels, kh, kw), in_channels * kh * kw, dtype)
        self.weight = engine.parameter(w)
        self.bias = engine.parameter(np.zeros(out_channels, dtype=dtype))
        self.stride = stride
        self.pad = pad
        self.prunable = prunable

    @property
    def out_channels(self) -> int:
        return self.weight.data.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.data.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.data.shape[2], self.weight.data.shape[3]

    def forward(self, x: Tensor) -> Tensor:
        return engine.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} input channels, got {c}")
        kh, kw = self.kernel
        ho, wo = engine._conv_out_dims(h, w, kh, kw, self.stride, self.pad)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv output would be {ho}x{wo} for input {h}x{w}")
        return (self.out_channels, ho, wo)

    def spec(self) -> dict:
        kh, kw = self.kernel
        return {"kind": "conv", "in": self.in_channels, "out": self.out_channels,
                "kh": kh, "kw": kw, "stride": self.stride, "pad": self.pad,
                "prunable": self.prunable}

    def params(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def param_count(self) -> int:
        k, c, kh, kw = self.weight.data.shape
        return k * c * kh * kw + k

    def flops(self, shape) -> int:
        _, ho, wo = self.out_shape(shape)
        k, c, kh, kw = self.weight.data.shape
        return 2 * ho * wo * k * c * kh * kw

    def clone(self) -> "Conv2D":
        kh, kw = self.kernel
        out = Conv2D(self.in_channels, self.out_channels, kh, kw, self.stride,
                     self.pad, self.prunable, rng=None, dtype=self.weight.data.dtype)
        out.weight.data = self.weight.data.copy()
        out.bias.data = self.bias.data.copy()
        return out


class ReLU:
    def forward(self, x):
        return engine.relu(x)

    def out_shape(self, shape):
        return shape

    def spec(self):
        return {"kind": "relu"}

    def params(self):
        return iter(())

    def param_count(self):
        return 0

    def flops(self, shape):
        return 0

    def clone(self):
        return ReLU()


class MaxPool2:
    def forward(self, x):
        return engine.maxpool2x2(x)

    def out_shape(self, shape):
        c, h, w = shape
        return (c, max(1, h // 2), max(1, w // 2))

    def spec(self):
        return {"kind": "pool"}

    def params(self):
        return iter(())

    def param_count(self):
        return 0

    def flops(self, shape):
        return 0

    def clone(self):
        return MaxPool2()


class Flatten:
    def forward(self, x):
        return engine.flatten(x)

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def spec(self):
        return {"kind": "flatten"}

    def params(self):
        return iter(())

    def param_count(self):
        return 0

    def flops(self, shape):
        return 0

    def clone(self):
        return Flatten()


class Dense:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        if rng is None:
            w = np.zeros((out_dim, in_dim), dtype=dtype)
        else:
            w = he_init(rng, (out_dim, in_dim), in_dim, dtype)
        self.weight = engine.parameter(w)
        self.bias = engine.parameter(np.zeros(out_dim, dtype=dtype))

    @property
    def in_dim(self):
        return self.weight.data.shape[1]

    @property
    def out_dim(self):
        return self.weight.data.shape[0]

    def forward(self, x):
        return engine.linear(x, self.weight, self.bias)

    def out_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.in_dim:
            raise ShapeError(f"dense expects flat input of {self.in_dim}, got {shape}")
        return (self.out_dim,)

    def spec(self):
        return {"kind": "fc", "in": self.in_dim, "out": self.out_dim}

    def params(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def param_count(self):
        return self.out_dim * self.in_dim + self.out_dim

    def flops(self, shape):
        return 2 * self.in_dim * self.out_dim

    def clone(self):
        out = Dense(self.in_dim, self.out_dim, rng=None, dtype=self.weight.data.dtype)
        out.weight.data = self.weight.data.copy()
        out.bias.data = self.bias.data.copy()
        return out


class ResidualBlock:
    """relu(conv2(relu(conv1(x))) + shortcut(x)).

    The shortcut is identity when input and output channel counts agree and
    no projection was requested; a 1x1 projection conv otherwise. With an
    identity shortcut the block's input and output channel counts must stay
    equal, so only conv1 is a safe pruning site; conv2 (jointly with a
    projection shortcut) becomes prunable in coupled mode.
    """

    def __init__(self, conv1: Conv2D, conv2: Conv2D, shortcut: Conv2D | None,
                 coupled: bool = False):
        if coupled and shortcut is None:
            raise ShapeError("coupled residual pruning needs a projection shortcut")
        self.conv1 = conv1
        self.conv2 = conv2
        self.shortcut = shortcut
        self.coupled = coupled

    def forward(self, x):
        h = engine.relu(self.conv1.forward(x))
        h = self.conv2.forward(h)
        s = self.shortcut.forward(x) if self.shortcut is not None else x
        return engine.relu(engine.add(h, s))

    def out_shape(self, shape):
        mid = self.conv1.out_shape(shape)
        out = self.conv2.out_shape(mid)
        skip = self.shortcut.out_shape(shape) if self.shortcut is not None else shape
        if out != skip:
            raise ShapeError(f"residual branch shape {out} != shortcut shape {skip}")
        return out

    def spec(self):
        return {"kind": "block",
                "conv1": self.conv1.spec(),
                "conv2": self.conv2.spec(),
                "shortcut": self.shortcut.spec() if self.shortcut is not None else None,
                "coupled": self.coupled}

    def params(self):
        for sub, layer in (("conv1", self.conv1), ("conv2", self.conv2), ("shortcut", self.shortcut)):
            if layer is None:
                continue
            for pname, p in layer.params():
                yield f"{sub}.{pname}", p

    def param_count(self):
        n = self.conv1.param_count() + self.conv2.param_count()
        if self.shortcut is not None:
            n += self.shortcut.param_count()
        return n

    def flops(self, shape):
        mid = self.conv1.out_shape(shape)
        n = self.conv1.flops(shape) + self.conv2.flops(mid)
        if self.shortcut is not None:
            n += self.shortcut.flops(shape)
        return n

    def clone(self):
        return ResidualBlock(self.conv1.clone(), self.conv2.clone(),
                             self.shortcut.clone() if self.shortcut is not None else None,
                             self.coupled)


def layer_from_spec(d: dict):
    kind = d.get("kind")
    if kind == "conv":
        return Conv2D(d["in"], d["out"], d["kh"], d["kw"], d["stride"], d["pad"], d["prunable"])
    if kind == "relu":
        return ReLU()
    if kind == "pool":
        return MaxPool2()
    if kind == "flatten":
        return Flatten()
    if kind == "fc":
        return Dense(d["in"], d["out"])
    if kind == "block":
        sc = layer_from_spec(d["shortcut"]) if d.get("shortcut") else None
        return ResidualBlock(layer_from_spec(d["conv1"]), layer_from_spec(d["conv2"]),
                             sc, d.get("coupled", False))
    raise CheckpointIntegrityError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

@dataclass
class ConvSite:
    """One conv layer addressable by pruning, in forward order."""
    index: int
    name: str
    conv: Conv2D
    layer_pos: int                      # position of the owning top-level layer
    kind: str                           # plain | block_conv1 | block_conv2
    block: ResidualBlock | None = None

    @property
    def prunable(self) -> bool:
        if self.kind == "block_conv2":
            return self.block.coupled
        return self.conv.prunable

    @property
    def n_filters(self) -> int:
        return self.conv.out_channels


class ModelGraph:
    def __init__(self, layers: list, meta: dict):
        self.layers = layers
        self.meta = dict(meta)
        self._store: ParamStore | None = None

    # -- structure ---------------------------------------------------------

    @property
    def input_shape(self) -> tuple:
        return tuple(self.meta["input_shape"])

    @property
    def num_classes(self) -> int:
        return int(self.meta["num_classes"])

    def parameters(self):
        for i, layer in enumerate(self.layers):
            for pname, p in layer.params():
                yield f"layer{i}.{pname}", p

    def param_store(self) -> ParamStore:
        if self._store is None:
            store = ParamStore()
            for name, p in self.parameters():
                store.register(name, p)
            self._store = store
        return self._store

    def num_params(self) -> int:
        return sum(p.data.size for _, p in self.parameters())

    def param_count_closed_form(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def shapes(self, input_shape=None) -> list[tuple]:
        """Per-layer output shapes; raises ShapeError if layers do not compose."""
        shape = tuple(input_shape if input_shape is not None else self.input_shape)
        out = []
        for layer in self.layers:
            shape = layer.out_shape(shape)
            out.append(shape)
        return out

    def validate(self):
        shapes = self.shapes()
        if self.layers and shapes[-1] != (self.num_classes,):
            raise ShapeError(f"model emits {shapes[-1]}, expected ({self.num_classes},) logits")
        if self.num_params() != self.param_count_closed_form():
            raise ShapeError("parameter arrays disagree with closed-form counts")

    def conv_sites(self) -> list[ConvSite]:
        sites = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2D):
                sites.append(ConvSite(len(sites), f"layer{i}", layer, i, "plain"))
            elif isinstance(layer, ResidualBlock):
                sites.append(ConvSite(len(sites), f"layer{i}.conv1", layer.conv1, i,
                                      "block_conv1", layer))
                sites.append(ConvSite(len(sites), f"layer{i}.conv2", layer.conv2, i,
                                      "block_conv2", layer))
        return sites

    def prunable_sites(self) -> list[ConvSite]:
        return [s for s in self.conv_sites() if s.prunable]

    def clone(self) -> "ModelGraph":
        return ModelGraph([layer.clone() for layer in self.layers], dict(self.meta))

    # -- execution ---------------------------------------------------------

    def forward(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else engine.constant(x)
        for layer in self.layers:
            t = layer.forward(t)
        return t

    def logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Inference-only forward over the whole array, batched."""
        chunks = []
        with engine.no_grad():
            for i in range(0, images.shape[0], batch_size):
                chunks.append(self.forward(images[i:i + batch_size]).data)
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.num_classes))


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_toy_cnn(widths, num_classes: int, input_shape, seed: int = 0,
                  kernel_size: int = 3, residual: bool = False,
                  coupled_blocks: bool = False, dtype=np.float64) -> ModelGraph:
    """Small conv/pool stack (or stack of 2-conv residual blocks) ending in
    one dense classifier head. Deterministic He-style init given the seed."""
    widths = list(widths)
    if residual and len(widths) % 2 != 0:
        raise ShapeError("residual block needs at least 2 conv widths (pairs form blocks)")
    if len(widths) < 2:
        raise ShapeError(f"need at least 2 conv layers, got {len(widths)}")
    if any(w < 2 for w in widths):
        raise ShapeError("every conv layer needs at least 2 filters")
    c, h, w = input_shape
    rng = np.random.default_rng(seed)
    pad = kernel_size // 2
    layers: list = []
    in_ch = c
    if residual:
        for w1, w2 in zip(widths[0::2], widths[1::2]):
            conv1 = Conv2D(in_ch, w1, kernel_size, kernel_size, 1, pad, True, rng, dtype)
            conv2 = Conv2D(w1, w2, kernel_size, kernel_size, 1, pad, coupled_blocks, rng, dtype)
            shortcut = None
            if in_ch != w2 or coupled_blocks:
                shortcut = Conv2D(in_ch, w2, 1, 1, 1, 0, False, rng, dtype)
            layers.append(ResidualBlock(conv1, conv2, shortcut, coupled_blocks))
            layers.append(MaxPool2())
            in_ch = w2
    else:
        for width in widths:
            layers.append(Conv2D(in_ch, width, kernel_size, kernel_size, 1, pad, True, rng, dtype))
            layers.append(ReLU())
            layers.append(MaxPool2())
            in_ch = width
    layers.append(Flatten())
    shape = (c, h, w)
    for layer in layers:
        shape = layer.out_shape(shape)
    layers.append(Dense(shape[0], num_classes, rng, dtype))
    meta = {"name": "toy-resnet" if residual else "toy-cnn", "version": "1",
            "seed": int(seed), "input_shape": [c, h, w], "num_classes": int(num_classes),
            "dtype": np.dtype(dtype).name}
    model = ModelGraph(layers, meta)
    model.validate()
    return model


# ---------------------------------------------------------------------------
# FLOPs / parameter accounting
# ---------------------------------------------------------------------------

@dataclass
class FlopsReport:
    rows: list        # (layer name, flops per image, params)
    total_flops: int
    total_params: int

    def as_dict(self):
        return {"per_layer": [{"layer": n, "flops": f, "params": p} for n, f, p in self.rows],
                "total_flops": self.total_flops, "total_params": self.total_params}


def count_flops(model: ModelGraph, input_shape=None) -> FlopsReport:
    """Per-image FLOPs with the 1 multiply-accumulate = 2 FLOPs convention;
    pooling, activations and the residual add count as zero."""
    shape = tuple(input_shape if input_shape is not None else model.input_shape)
    rows = []
    for i, layer in enumerate(model.layers):
        f = layer.flops(shape)
        rows.append((f"layer{i}[{layer.spec()['kind']}]", f, layer.param_count()))
        shape = layer.out_shape(shape)
    return FlopsReport(rows, sum(r[1] for r in rows), sum(r[2] for r in rows))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _header_dict(model: ModelGraph) -> dict:
    return {"meta": model.meta,
            "layers": [layer.spec() for layer in model.layers],
            "params": [{"name": name, "dtype": p.data.dtype.name, "shape": list(p.data.shape)}
                       for name, p in model.parameters()]}


def save_checkpoint(model: ModelGraph, path: str):
    """Versioned binary: magic, version, length-prefixed JSON header, then raw
    little-endian weight blobs. A pretty-printed JSON sidecar mirrors the
    header for human inspection."""
    header = json.dumps(_header_dict(model)).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, p in model.parameters():
            arr = p.data
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    with open(path + ".json", "w") as fh:
        json.dump(_header_dict(model), fh, indent=2)


def load_checkpoint(path: str) -> ModelGraph:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) or blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    off = len(CHECKPOINT_MAGIC)
    if len(blob) < off + 8:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", blob, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    off += 8
    if len(blob) < off + hlen:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    try:
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointIntegrityError(f"{path}: unreadable header ({e})") from None
    off += hlen

    layers = [layer_from_spec(d) for d in header["layers"]]
    model = ModelGraph(layers, header["meta"])
    params = dict(model.parameters())
    seen = set()
    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        dtype = np.dtype(entry["dtype"])
        if name not in params:
            raise CheckpointIntegrityError(f"{path}: header names unknown parameter {name!r}")
        if params[name].data.shape != shape:
            raise CheckpointIntegrityError(
                f"{path}: declared shape {shape} for {name!r} != layer-spec shape {params[name].data.shape}")
        nbytes = int(np.prod(shape)) * dtype.itemsize
        if len(blob) < off + nbytes:
            raise CheckpointTruncatedError(f"{path}: truncated weight data for {name!r}")
        arr = np.frombuffer(blob[off:off + nbytes], dtype=dtype.newbyteorder("<")).astype(dtype)
        params[name].data = arr.reshape(shape)
        params[name].grad = np.zeros_like(params[name].data)
        off += nbytes
        seen.add(name)
    if seen != set(params):
        raise CheckpointIntegrityError(f"{path}: header missing parameters {sorted(set(params) - seen)}")
    if off != len(blob):
        raise CheckpointIntegrityError(f"{path}: {len(blob) - off} trailing bytes after weight data")
    model.validate()
    return model
