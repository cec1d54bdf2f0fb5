"""UVid-Net graph construction, parameter/FLOP accounting and calibration."""
from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass

import numpy as np

from .layers import BatchNorm2D, Bottleneck, Conv2D, Layer, MaxPool2D, ReLU, Shape, Softmax, Upsample2x
from .tensor import GradTape, Parameter, Tensor, concat_channels, elementwise_mul

PUBLISHED_PARAMS = {
    "multiplication": 23_745_032,
    "concatenation": 26_878_472,
    "baseline": 21_593_732,
}

ENCODERS = ("unet", "resnet50")
MERGES = ("multiplication", "concatenation")
ONE_BY_ONE = ("keep", "halve", "single")
RESNET_STAGES = (3, 4, 6, 3)


@dataclass(frozen=True)
class ArchConfig:
    encoder: str = "unet"
    merge: str = "multiplication"
    base_width: int = 64
    num_classes: int = 4
    height: int = 256
    width: int = 256
    # calibration axes; defaults are the calibrated interpretation
    one_by_one: str = "single"
    conv_bias: bool = True
    encoder_bn: bool = True
    decoder_bn: bool = True

    @property
    def downsampling(self) -> int:
        return 16 if self.encoder == "unet" else 32

    def validate(self) -> None:
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}; choose from {ENCODERS}")
        if self.merge not in MERGES:
            raise ValueError(f"unknown merge {self.merge!r}; choose from {MERGES}")
        if self.one_by_one not in ONE_BY_ONE:
            raise ValueError(f"unknown one_by_one rule {self.one_by_one!r}; choose from {ONE_BY_ONE}")
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        f = self.downsampling
        if self.height <= 0 or self.width <= 0 or self.height % f or self.width % f:
            raise ValueError(f"input {self.height}x{self.width} must be divisible by {f} "
                             f"for the {self.encoder} encoder")

    def replace(self, **changes) -> "ArchConfig":
        return dataclasses.replace(self, **changes)


# Calibrated single-branch U-Net: no batch norm anywhere.
BASELINE_CONFIG = ArchConfig(encoder_bn=False, decoder_bn=False)


@dataclass
class Node:
    name: str
    kind: str  # input | layer | mul | concat
    inputs: tuple[str, ...] = ()
    layer: Layer | None = None
    channels: int = 0  # input nodes only


@dataclass
class LedgerRow:
    name: str
    kind: str
    shape: Shape
    params: int
    flops: int


class ModelGraph:
    """A DAG of layer nodes stored in topological (construction) order."""

    def __init__(self, config: ArchConfig, nodes: list[Node], inputs: list[str], output: str, logits: str,
                 kind: str):
        self.config = config
        self.nodes = nodes
        self.inputs = inputs
        self.output = output
        self.logits = logits
        self.kind = kind
        self._params = self._collect(lambda layer: layer.parameters())
        self._buffers = self._collect(lambda layer: layer.buffers())
        clash = set(self._params) & set(self._buffers)
        if clash:
            raise ValueError(f"parameter/buffer name clash: {sorted(clash)}")

    def _collect(self, getter) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for node in self.nodes:
            if node.layer is None:
                continue
            for p in getter(node.layer):
                if p.name in out:
                    raise ValueError(f"duplicate parameter name {p.name!r}")
                out[p.name] = p
        return out

    def __repr__(self) -> str:
        return f"ModelGraph({self.kind}, {self.config})"

    @property
    def head_layer(self) -> Conv2D:
        return self.node(self.logits).layer  # type: ignore[return-value]

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def parameters(self) -> dict[str, Parameter]:
        return dict(self._params)

    def buffers(self) -> dict[str, Parameter]:
        return dict(self._buffers)

    def state(self) -> dict[str, Parameter]:
        """Parameters and buffers in registry order (the checkpoint order)."""
        out: dict[str, Parameter] = {}
        for node in self.nodes:
            if node.layer is None:
                continue
            for p in node.layer.parameters():
                out[p.name] = p
            for b in node.layer.buffers():
                out[b.name] = b
        return out

    def initialize(self, seed: int = 0) -> "ModelGraph":
        rng = np.random.default_rng(seed)
        for p in self.state().values():
            p.initialize(rng)
        return self

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def forward(self, *frames, training: bool = False, tape: GradTape | None = None,
                logits: bool = False) -> Tensor:
        if len(frames) != len(self.inputs):
            raise ValueError(f"{self.kind} expects {len(self.inputs)} input frame(s), got {len(frames)}")
        values: dict[str, Tensor] = {}
        for name, frame in zip(self.inputs, frames):
            t = frame if isinstance(frame, Tensor) else Tensor(frame)
            expected = self.node(name).channels
            if t.shape[1] != expected:
                raise ValueError(f"input {name!r} needs {expected} channels, got {t.shape}")
            values[name] = t
        stop = self.logits if logits else self.output
        for node in self.nodes:
            if node.kind == "input":
                continue
            args = [values[i] for i in node.inputs]
            if node.kind == "layer":
                values[node.name] = node.layer(args[0], tape, training)
            elif node.kind == "mul":
                values[node.name] = elementwise_mul(args[0], args[1], tape)
            else:
                values[node.name] = concat_channels(args[0], args[1], tape)
            if node.name == stop:
                break
        return values[stop]

    __call__ = forward

    def shapes(self, height: int | None = None, width: int | None = None, batch: int = 1) -> dict[str, Shape]:
        h = self.config.height if height is None else height
        w = self.config.width if width is None else width
        out: dict[str, Shape] = {}
        for node in self.nodes:
            if node.kind == "input":
                out[node.name] = (batch, node.channels, h, w)
            elif node.kind == "layer":
                out[node.name] = node.layer.out_shape(out[node.inputs[0]])
            else:
                a, b = (out[i] for i in node.inputs)
                if node.kind == "mul":
                    if a != b:
                        raise ValueError(f"{node.name}: multiply shapes differ {a} vs {b}")
                    out[node.name] = a
                else:
                    if (a[0], a[2], a[3]) != (b[0], b[2], b[3]):
                        raise ValueError(f"{node.name}: concat shapes differ {a} vs {b}")
                    out[node.name] = (a[0], a[1] + b[1], a[2], a[3])
        return out

    def ledger(self, height: int | None = None, width: int | None = None) -> list[LedgerRow]:
        shapes = self.shapes(height, width)
        rows = []
        for node in self.nodes:
            if node.kind == "input":
                continue
            shape = shapes[node.name]
            if node.kind == "layer":
                params = node.layer.param_count()
                flops = node.layer.flops(shapes[node.inputs[0]])
                kind = type(node.layer).__name__
            else:
                params = 0
                flops = int(np.prod(shape[1:])) if node.kind == "mul" else 0
                kind = "Multiply" if node.kind == "mul" else "Concatenate"
            rows.append(LedgerRow(node.name, kind, shape, params, flops))
        return rows


def count_params(g: ModelGraph, include_buffers: bool = False) -> int:
    """Learnable scalars (conv weights/biases, BN scale/shift).

    With ``include_buffers`` the BN running statistics are counted too, which
    is how the published totals were tallied.
    """
    total = sum(p.size for p in g.parameters().values())
    if include_buffers:
        total += sum(b.size for b in g.buffers().values())
    return total


def count_flops(g: ModelGraph, input_shape: tuple[int, ...] | None = None) -> int:
    """Per-sample FLOPs under the convention documented in `uvidnet.layers`."""
    if input_shape is None:
        h, w = g.config.height, g.config.width
    else:
        h, w = input_shape[-2:]
    return sum(row.flops for row in g.ledger(h, w))


def format_ledger(g: ModelGraph, height: int | None = None, width: int | None = None) -> str:
    rows = g.ledger(height, width)
    name_w = max(len(r.name) for r in rows)
    lines = [f"{'layer':<{name_w}}  {'type':<12} {'output shape':<22} {'params':>12} {'FLOPs':>16}"]
    lines.append("-" * len(lines[0]))
    for r in rows:
        lines.append(f"{r.name:<{name_w}}  {r.kind:<12} {str(r.shape):<22} {r.params:>12,} {r.flops:>16,}")
    lines.append("-" * len(lines[0]))
    learnable = count_params(g)
    total = count_params(g, include_buffers=True)
    flops = sum(r.flops for r in rows)
    lines.append(f"total params: {total:,} (incl. BN running stats) | learnable: {learnable:,} | FLOPs: {flops:,}")
    return "\n".join(lines)


class _Builder:
    def __init__(self, cfg: ArchConfig):
        self.cfg = cfg
        self.nodes: list[Node] = []
        self.names: set[str] = set()

    def _add(self, node: Node) -> str:
        if node.name in self.names:
            raise ValueError(f"duplicate node name {node.name!r}")
        self.names.add(node.name)
        self.nodes.append(node)
        return node.name

    def input(self, name: str, channels: int) -> str:
        return self._add(Node(name, "input", channels=channels))

    def layer(self, x: str, layer: Layer) -> str:
        return self._add(Node(layer.name, "layer", (x,), layer))

    def mul(self, name: str, a: str, b: str) -> str:
        return self._add(Node(name, "mul", (a, b)))

    def concat(self, name: str, a: str, b: str) -> str:
        return self._add(Node(name, "concat", (a, b)))

    def conv(self, x: str, name: str, cin: int, cout: int, k: int = 3, stride: int = 1, *, bn: bool = True,
             act: bool = True, bias: bool = True) -> str:
        x = self.layer(x, Conv2D(f"{name}.conv", cin, cout, k, stride, bias=bias))
        if bn:
            x = self.layer(x, BatchNorm2D(f"{name}.bn", cout))
        if act:
            x = self.layer(x, ReLU(f"{name}.relu"))
        return x

    def bn_conv(self, x: str, name: str, cin: int, cout: int, k: int = 3, stride: int = 1, bn: bool = True) -> str:
        bias = self.cfg.conv_bias or not bn
        return self.conv(x, name, cin, cout, k, stride, bn=bn, bias=bias)


def _unet_encoder(b: _Builder, x: str, prefix: str, reduce: bool) -> tuple[str, int, list[tuple[str, int]]]:
    cfg = b.cfg
    bn = cfg.encoder_bn
    skips = []
    cin = 3
    for i in range(4):
        c = cfg.base_width * 2 ** i
        name = f"{prefix}.enc{i + 1}"
        x = b.bn_conv(x, f"{name}.conv1", cin, c, bn=bn)
        x = b.bn_conv(x, f"{name}.conv2", c, c, bn=bn)
        skips.append((x, c))
        cin = c
        if reduce:
            width = {"keep": c, "halve": max(c // 2, 1), "single": 1}[cfg.one_by_one]
            x = b.conv(x, f"{name}.reduce", c, width, 1, bn=False, act=False)
            cin = width
        x = b.layer(x, MaxPool2D(f"{name}.pool", 2, 2))
    c = 16 * cfg.base_width
    x = b.bn_conv(x, f"{prefix}.bottleneck", cin, c, bn=bn)
    return x, c, skips


def _resnet_encoder(b: _Builder, x: str, prefix: str) -> tuple[str, int, list[tuple[str, int]]]:
    cfg = b.cfg
    base = cfg.base_width
    x = b.bn_conv(x, f"{prefix}.stem", 3, base, 7, 2)
    skips = [(x, base)]
    x = b.layer(x, MaxPool2D(f"{prefix}.stem.pool", 3, 2, padding="same"))
    cin = base
    for s, blocks in enumerate(RESNET_STAGES):
        f = base * 2 ** s
        filters = (f, f, 2 * f)
        for j in range(blocks):
            stride = 2 if (j == 0 and s > 0) else 1
            x = b.layer(x, Bottleneck(f"{prefix}.stage{s + 1}.block{j + 1}", cin, filters, stride,
                                      bias=cfg.conv_bias))
            cin = filters[2]
        if s < 3:
            skips.append((x, cin))
    return x, cin, skips


def _decoder(b: _Builder, x: str, cin: int, skips: list[tuple[str, int]], merge: str) -> tuple[str, int]:
    cfg = b.cfg
    for i, (skip, c) in enumerate(reversed(skips)):
        name = f"dec{i + 1}"
        x = b.layer(x, Upsample2x(f"{name}.up"))
        x = b.conv(x, f"{name}.upconv", cin, c, 2, bn=False)
        if merge == "multiplication":
            x = b.mul(f"{name}.refine", x, skip)
            first_in = c
        else:
            x = b.concat(f"{name}.concat", skip, x)
            first_in = 2 * c
        x = b.bn_conv(x, f"{name}.conv1", first_in, c, bn=cfg.decoder_bn)
        x = b.bn_conv(x, f"{name}.conv2", c, c, bn=cfg.decoder_bn)
        cin = c
    return x, cin


def _head(b: _Builder, x: str, cin: int) -> tuple[str, str]:
    logits = b.layer(x, Conv2D("head", cin, b.cfg.num_classes, 1))
    out = b.layer(logits, Softmax("softmax"))
    return logits, out


def build_uvidnet(cfg: ArchConfig = ArchConfig(), seed: int | None = 0) -> ModelGraph:
    """Two-branch UVid-Net. `seed=None` builds a shape-only graph (no weights)."""
    cfg.validate()
    b = _Builder(cfg)
    a_in = b.input("frame_a", 3)
    b_in = b.input("frame_b", 3)
    if cfg.encoder == "unet":
        up, up_c, _ = _unet_encoder(b, a_in, "upper", reduce=True)
        low, low_c, skips = _unet_encoder(b, b_in, "lower", reduce=False)
    else:
        up, up_c, _ = _resnet_encoder(b, a_in, "upper")
        low, low_c, skips = _resnet_encoder(b, b_in, "lower")
    x = b.concat("fuse", up, low)
    x, c = _decoder(b, x, up_c + low_c, skips, cfg.merge)
    if cfg.encoder == "resnet50":
        x = b.layer(x, Upsample2x("final.up"))
    logits, out = _head(b, x, c)
    g = ModelGraph(cfg, b.nodes, [a_in, b_in], out, logits, kind=f"uvidnet-{cfg.encoder}-{cfg.merge}")
    return g if seed is None else g.initialize(seed)


def build_unet_baseline(cfg: ArchConfig = BASELINE_CONFIG, seed: int | None = 0) -> ModelGraph:
    """Classic single-encoder U-Net with concatenation skips."""
    cfg = cfg.replace(encoder="unet")
    cfg.validate()
    b = _Builder(cfg)
    x_in = b.input("frame", 3)
    x, c, skips = _unet_encoder(b, x_in, "enc", reduce=False)
    x, c = _decoder(b, x, c, skips, "concatenation")
    logits, out = _head(b, x, c)
    g = ModelGraph(cfg, b.nodes, [x_in], out, logits, kind="unet-baseline")
    return g if seed is None else g.initialize(seed)


@dataclass
class Calibration:
    one_by_one: str
    conv_bias: bool
    decoder_bn: bool
    include_buffers: bool
    params_mult: int
    params_concat: int

    @property
    def delta_mult(self) -> int:
        return self.params_mult - PUBLISHED_PARAMS["multiplication"]

    @property
    def delta_concat(self) -> int:
        return self.params_concat - PUBLISHED_PARAMS["concatenation"]

    @property
    def exact(self) -> bool:
        return self.delta_mult == 0 and self.delta_concat == 0

    @property
    def reduction(self) -> float:
        return 1.0 - self.params_mult / self.params_concat

    def config(self, base: ArchConfig = ArchConfig()) -> ArchConfig:
        return base.replace(one_by_one=self.one_by_one, conv_bias=self.conv_bias, decoder_bn=self.decoder_bn)

    def describe(self) -> str:
        convention = "with BN running stats" if self.include_buffers else "learnable only"
        return (f"1x1={self.one_by_one:<6} conv_bias={str(self.conv_bias):<5} decoder_bn={str(self.decoder_bn):<5} "
                f"count={convention:<21} mult={self.params_mult:>11,} ({self.delta_mult:+,}) "
                f"concat={self.params_concat:>11,} ({self.delta_concat:+,}) reduction={100 * self.reduction:.2f}%")


def calibrate(base: ArchConfig = ArchConfig()) -> list[Calibration]:
    """Enumerate the under-specified axes and rank them against the published counts.

    Returns every combination, best first (exact matches lead).
    """
    results = []
    for one, bias, dec_bn in itertools.product(ONE_BY_ONE, (True, False), (True, False)):
        cfg = base.replace(encoder="unet", base_width=64, num_classes=4, one_by_one=one, conv_bias=bias,
                           decoder_bn=dec_bn)
        mult = build_uvidnet(cfg.replace(merge="multiplication"), seed=None)
        cat = build_uvidnet(cfg.replace(merge="concatenation"), seed=None)
        for buffers in (False, True):
            results.append(Calibration(one, bias, dec_bn, buffers, count_params(mult, buffers),
                                       count_params(cat, buffers)))
    results.sort(key=lambda r: (abs(r.delta_mult) + abs(r.delta_concat)))
    return results
