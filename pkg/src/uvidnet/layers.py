"""Layers used by the segmentation networks.

Every layer is callable as ``layer(x, tape=None, training=False)`` and also
answers ``out_shape`` and ``flops`` from shapes alone, so complexity
accounting never has to run a forward pass. FLOPs follow one convention:

    conv         H_out * W_out * C_out * (2 * k_h * k_w * C_in + 1)
    batchnorm    2 per element
    relu         1 per element
    maxpool      (k_h * k_w - 1) per output element
    upsample     0
    multiply     1 per element
    concat       0
    softmax      4 per element
    residual add 1 per element

All counts are per sample (batch size 1).
"""
from __future__ import annotations

from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import GradTape, Parameter, Tensor, add, check_finite, finish

Shape = tuple[int, int, int, int]


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def same_padding(size: int, k: int, s: int) -> tuple[int, int, int]:
    """Return (pad_before, pad_after, out_size) for "same" padding.

    Extra padding goes after (bottom/right), so a 2x2 stride-1 kernel pads
    one row/column at the end.
    """
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2, out


class Layer:
    name: str = ""

    def parameters(self) -> Iterator[Parameter]:
        return iter(())

    def buffers(self) -> Iterator[Parameter]:
        return iter(())

    def out_shape(self, shape: Shape) -> Shape:
        return shape

    def flops(self, shape: Shape) -> int:
        return 0

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2D(Layer):
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel=3, stride=1, padding: str = "same",
                 bias: bool = True):
        if padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {padding!r}")
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        self.padding = padding
        kh, kw = self.kernel
        self.weight = Parameter(f"{name}.weight", (out_channels, in_channels, kh, kw), init="kaiming_uniform")
        self.bias = Parameter(f"{name}.bias", (out_channels,)) if bias else None

    def __repr__(self) -> str:
        return (f"Conv2D({self.name!r}, {self.in_channels}->{self.out_channels}, "
                f"k={self.kernel}, s={self.stride}, {self.padding})")

    def parameters(self):
        yield self.weight
        if self.bias is not None:
            yield self.bias

    def _geometry(self, h: int, w: int):
        (kh, kw), (sh, sw) = self.kernel, self.stride
        if self.padding == "same":
            pt, pb, ho = same_padding(h, kh, sh)
            pl, pr, wo = same_padding(w, kw, sw)
        else:
            pt = pb = pl = pr = 0
            ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
        if ho <= 0 or wo <= 0:
            raise ValueError(f"{self.name}: input {h}x{w} too small for kernel {self.kernel} with valid padding")
        return (pt, pb, pl, pr), ho, wo

    def out_shape(self, shape: Shape) -> Shape:
        n, c, h, w = shape
        if c != self.in_channels:
            raise ValueError(f"{self.name}: expected {self.in_channels} input channels, got {c}")
        _, ho, wo = self._geometry(h, w)
        return n, self.out_channels, ho, wo

    def flops(self, shape: Shape) -> int:
        _, co, ho, wo = self.out_shape(shape)
        kh, kw = self.kernel
        return ho * wo * co * (2 * kh * kw * self.in_channels + 1)

    def __call__(self, x: Tensor, tape: GradTape | None = None, training: bool = False) -> Tensor:
        self.out_shape(x.shape)
        n, c, h, w = x.shape
        (pt, pb, pl, pr), ho, wo = self._geometry(h, w)
        (kh, kw), (sh, sw) = self.kernel, self.stride
        weight = self.weight.require()
        co = self.out_channels

        xp = x.data
        if pt or pb or pl or pr:
            xp = np.pad(xp, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        if (kh, kw, sh, sw) == (1, 1, 1, 1):
            cols = xp.transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
        else:
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        wmat = weight.reshape(co, -1)
        y = cols @ wmat.T
        if self.bias is not None:
            y += self.bias.require()
        out = finish(self.name, y.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))

        if tape is not None:
            padded_shape = xp.shape

            def backward(g):
                gmat = g.transpose(0, 2, 3, 1).reshape(-1, co)
                if not self.weight.frozen:
                    self.weight.accumulate_grad((gmat.T @ cols).reshape(self.weight.shape))
                if self.bias is not None and not self.bias.frozen:
                    self.bias.accumulate_grad(gmat.sum(axis=0))
                dcols = gmat @ wmat
                if (kh, kw, sh, sw) == (1, 1, 1, 1):
                    dxp = dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
                else:
                    dcols = dcols.reshape(n, ho, wo, c, kh, kw)
                    dxp = np.zeros(padded_shape, dtype=g.dtype)
                    for i in range(kh):
                        for j in range(kw):
                            dxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += dcols[..., i, j].transpose(0, 3, 1, 2)
                return (np.ascontiguousarray(dxp[:, :, pt:pt + h, pl:pl + w]),)

            tape.record(self.name, (x,), out, backward)
        return out


class BatchNorm2D(Layer):
    """Per-channel batch normalization.

    Training mode normalizes with batch statistics and updates the running
    estimates as ``(1 - momentum) * old + momentum * batch`` (unbiased batch
    variance). A BN whose scale is frozen always behaves as in inference.
    """

    def __init__(self, name: str, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.name = name
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(f"{name}.gamma", (channels,), init="ones")
        self.beta = Parameter(f"{name}.beta", (channels,))
        self.running_mean = Parameter(f"{name}.running_mean", (channels,))
        self.running_var = Parameter(f"{name}.running_var", (channels,), init="ones")

    def parameters(self):
        yield self.gamma
        yield self.beta

    def buffers(self):
        yield self.running_mean
        yield self.running_var

    def flops(self, shape: Shape) -> int:
        _, c, h, w = shape
        return 2 * c * h * w

    def __call__(self, x: Tensor, tape: GradTape | None = None, training: bool = False) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"{self.name}: expected {self.channels} channels, got {x.shape[1]}")
        gamma = self.gamma.require().reshape(1, -1, 1, 1)
        beta = self.beta.require().reshape(1, -1, 1, 1)
        use_batch = training and not self.gamma.frozen

        if use_batch:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
            centered = x.data - mean
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = centered * inv_std
            mom = self.momentum
            unbiased = var.reshape(-1) * (m / max(m - 1, 1))
            rm, rv = self.running_mean.require(), self.running_var.require()
            self.running_mean.data = ((1 - mom) * rm + mom * mean.reshape(-1)).astype(rm.dtype)
            self.running_var.data = ((1 - mom) * rv + mom * unbiased).astype(rv.dtype)
        else:
            mean = self.running_mean.require().reshape(1, -1, 1, 1)
            inv_std = 1.0 / np.sqrt(self.running_var.require().reshape(1, -1, 1, 1) + self.eps)
            xhat = (x.data - mean) * inv_std
        out = finish(self.name, gamma * xhat + beta)

        if tape is not None:
            def backward(g):
                if not self.gamma.frozen:
                    self.gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
                if not self.beta.frozen:
                    self.beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
                dxhat = g * gamma
                if not use_batch:
                    return (dxhat * inv_std,)
                mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                return ((dxhat - mean_d - xhat * mean_dx) * inv_std,)

            tape.record(self.name, (x,), out, backward)
        return out


class ReLU(Layer):
    def __init__(self, name: str = "relu"):
        self.name = name

    def flops(self, shape: Shape) -> int:
        return int(np.prod(shape[1:]))

    def __call__(self, x: Tensor, tape: GradTape | None = None, training: bool = False) -> Tensor:
        out = Tensor(np.maximum(x.data, 0), check=False)
        if tape is not None:
            mask = x.data > 0
            tape.record(self.name, (x,), out, lambda g: (g * mask,))
        return out


def relu(x: Tensor, tape: GradTape | None = None) -> Tensor:
    return ReLU()(x, tape)


class MaxPool2D(Layer):
    """Max pooling; the gradient goes to the first maximum in row-major window order."""

    def __init__(self, name: str, kernel=2, stride=2, padding: str = "valid"):
        self.name = name
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        self.padding = padding

    def _geometry(self, h, w):
        (kh, kw), (sh, sw) = self.kernel, self.stride
        if self.padding == "same":
            pt, pb, ho = same_padding(h, kh, sh)
            pl, pr, wo = same_padding(w, kw, sw)
        else:
            if h < kh or w < kw:
                raise ValueError(f"{self.name}: kernel {self.kernel} larger than input {h}x{w}")
            pt = pb = pl = pr = 0
            ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
        return (pt, pb, pl, pr), ho, wo

    def out_shape(self, shape: Shape) -> Shape:
        n, c, h, w = shape
        _, ho, wo = self._geometry(h, w)
        return n, c, ho, wo

    def flops(self, shape: Shape) -> int:
        _, c, ho, wo = self.out_shape(shape)
        kh, kw = self.kernel
        return (kh * kw - 1) * c * ho * wo

    def __call__(self, x: Tensor, tape: GradTape | None = None, training: bool = False) -> Tensor:
        n, c, h, w = x.shape
        (pt, pb, pl, pr), ho, wo = self._geometry(h, w)
        (kh, kw), (sh, sw) = self.kernel, self.stride
        xp = x.data
        if pt or pb or pl or pr:
            xp = np.pad(xp, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=-np.inf)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
        win = win.reshape(n, c, ho, wo, kh * kw)
        arg = win.argmax(axis=-1)
        out = Tensor(np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], check=False)

        if tape is not None:
            hp, wp = xp.shape[2:]
            rows = np.arange(ho).reshape(1, 1, ho, 1) * sh + arg // kw
            cols = np.arange(wo).reshape(1, 1, 1, wo) * sw + arg % kw
            plane = (np.arange(n * c).reshape(n, c, 1, 1)) * (hp * wp)
            flat_idx = (plane + rows * wp + cols).reshape(-1)

            def backward(g):
                dxp = np.bincount(flat_idx, weights=g.reshape(-1), minlength=n * c * hp * wp)
                dxp = dxp.astype(g.dtype).reshape(n, c, hp, wp)
                return (np.ascontiguousarray(dxp[:, :, pt:pt + h, pl:pl + w]),)

            tape.record(self.name, (x,), out, backward)
        return out


class Upsample2x(Layer):
    """Nearest-neighbour x2 upsampling in H and W."""

    def __init__(self, name: str = "upsample"):
        self.name = name

    def out_shape(self, shape: Shape) -> Shape:
        n, c, h, w = shape
        return n, c, 2 * h, 2 * w

    def __call__(self, x: Tensor, tape: GradTape | None = None, training: bool = False) -> Tensor:
        out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3), check=False)
        if tape is not None:
            n, c, h, w = x.shape
            tape.record(self.name, (x,), out, lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))
        return out


class Softmax(Layer):
    """Softmax across the channel axis, per pixel."""

    def __init__(self, name: str = "softmax"):
        self.name = name

    def flops(self, shape: Shape) -> int:
        return 4 * int(np.prod(shape[1:]))

    def __call__(self, x: Tensor, tape: GradTape | None = None, training: bool = False) -> Tensor:
        if x.shape[1] < 2:
            raise ValueError("softmax needs at least 2 channels")
        y = softmax(x.data)
        out = finish(self.name, y)
        if tape is not None:
            tape.record(self.name, (x,), out, lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))
        return out


def softmax(logits: np.ndarray) -> np.ndarray:
    check_finite(logits, "softmax input")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class ConvBNReLU(Layer):
    """Conv followed by optional batch norm and optional ReLU."""

    def __init__(self, name: str, cin: int, cout: int, kernel=3, stride=1, *, bn: bool = True, act: bool = True,
                 bias: bool = True):
        self.name = name
        self.conv = Conv2D(f"{name}.conv", cin, cout, kernel, stride, bias=bias)
        self.bn = BatchNorm2D(f"{name}.bn", cout) if bn else None
        self.act = ReLU(f"{name}.relu") if act else None

    @property
    def sublayers(self) -> list[Layer]:
        return [layer for layer in (self.conv, self.bn, self.act) if layer is not None]

    def parameters(self):
        for layer in self.sublayers:
            yield from layer.parameters()

    def buffers(self):
        for layer in self.sublayers:
            yield from layer.buffers()

    def out_shape(self, shape: Shape) -> Shape:
        return self.conv.out_shape(shape)

    def flops(self, shape: Shape) -> int:
        total = 0
        for layer in self.sublayers:
            total += layer.flops(shape)
            shape = layer.out_shape(shape)
        return total

    def __call__(self, x, tape=None, training=False):
        for layer in self.sublayers:
            x = layer(x, tape, training)
        return x


class Bottleneck(Layer):
    """ResNet bottleneck: 1x1, 3x3, 1x1 conv+BN stack plus a shortcut, then ReLU.

    The stride sits on the 3x3 conv. A 1x1 conv + BN projection replaces the
    identity shortcut whenever the channel count or the stride changes.
    """

    def __init__(self, name: str, cin: int, filters: tuple[int, int, int], stride: int = 1, bias: bool = True):
        f1, f2, f3 = filters
        self.name = name
        self.in_channels = cin
        self.filters = (f1, f2, f3)
        self.stride = stride
        self.branch = [
            ConvBNReLU(f"{name}.a", cin, f1, 1, bias=bias),
            ConvBNReLU(f"{name}.b", f1, f2, 3, stride, bias=bias),
            ConvBNReLU(f"{name}.c", f2, f3, 1, act=False, bias=bias),
        ]
        self.shortcut = None
        if cin != f3 or stride != 1:
            self.shortcut = ConvBNReLU(f"{name}.proj", cin, f3, 1, stride, act=False, bias=bias)
        self.act = ReLU(f"{name}.relu")

    def _parts(self):
        yield from self.branch
        if self.shortcut is not None:
            yield self.shortcut

    def parameters(self):
        for part in self._parts():
            yield from part.parameters()

    def buffers(self):
        for part in self._parts():
            yield from part.buffers()

    def out_shape(self, shape: Shape) -> Shape:
        if shape[1] != self.in_channels:
            raise ValueError(f"{self.name}: expected {self.in_channels} channels, got {shape[1]}")
        for part in self.branch:
            shape = part.out_shape(shape)
        return shape

    def flops(self, shape: Shape) -> int:
        total, s = 0, shape
        for part in self.branch:
            total += part.flops(s)
            s = part.out_shape(s)
        if self.shortcut is not None:
            total += self.shortcut.flops(shape)
        per_elem = int(np.prod(s[1:]))
        return total + 2 * per_elem  # residual add + ReLU

    def __call__(self, x: Tensor, tape: GradTape | None = None, training: bool = False) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"{self.name}: expected {self.in_channels} channels, got {x.shape[1]}")
        h = x
        for part in self.branch:
            h = part(h, tape, training)
        skip = x if self.shortcut is None else self.shortcut(x, tape, training)
        if skip.shape != h.shape:
            raise ValueError(f"{self.name}: residual addends differ {h.shape} vs {skip.shape}")
        return self.act(add(h, skip, tape), tape, training)
