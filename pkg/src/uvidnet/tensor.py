"""Dense NCHW tensors, a gradient tape, and a finite-difference checker."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    pass


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        idx = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteError(f"{where}: non-finite value {arr[tuple(idx)]!r} at index {tuple(int(i) for i in idx)}")


class Tensor:
    """A 4-D (N, C, H, W) array with an optional gradient buffer.

    Data is kept C-contiguous. float32 is the working precision; float64 is
    accepted so the gradient checker can run at higher precision.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, grad: np.ndarray | None = None, *, check: bool = True):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        if arr.ndim != 4:
            raise ValueError(f"Tensor needs 4 extents (N, C, H, W), got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        if check:
            check_finite(self.data, "Tensor")
        if grad is not None and np.shape(grad) != self.data.shape:
            raise ValueError(f"grad shape {np.shape(grad)} != data shape {self.data.shape}")
        self.grad = grad

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    @classmethod
    def zeros(cls, *shape: int, dtype=DTYPE) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype))

    @classmethod
    def ones(cls, *shape: int, dtype=DTYPE) -> "Tensor":
        return cls(np.ones(shape, dtype=dtype))


@dataclass
class _Record:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Ordered log of executed operations; `backward` replays it in reverse."""

    def __init__(self):
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, name: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        self.records.append(_Record(name, tuple(inputs), output, backward))

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            grad = np.ones_like(output.data)
        output.accumulate_grad(np.asarray(grad, dtype=output.dtype))
        for rec in reversed(self.records):
            g_out = rec.output.grad
            if g_out is None:
                continue
            grads = rec.backward(g_out)
            for x, g in zip(rec.inputs, grads):
                if g is None:
                    continue
                check_finite(g, f"backward of {rec.name}")
                x.accumulate_grad(g)


def finish(name: str, out: np.ndarray) -> Tensor:
    check_finite(out, name)
    return Tensor(out, check=False)


def elementwise_mul(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"elementwise_mul shape mismatch: {a.shape} vs {b.shape}")
    out = finish("elementwise_mul", a.data * b.data)
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record("elementwise_mul", (a, b), out, lambda g: (g * bd, g * ad))
    return out


def add(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = finish("add", a.data + b.data)
    if tape is not None:
        tape.record("add", (a, b), out, lambda g: (g, g))
    return out


def concat_channels(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ValueError(f"concat_channels needs equal N, H, W: {a.shape} vs {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=1), check=False)
    if tape is not None:
        tape.record("concat_channels", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))
    return out


def slice_channels(x: Tensor, start: int, stop: int, tape: GradTape | None = None) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"bad channel slice [{start}, {stop}) for {x.shape}")
    out = Tensor(x.data[:, start:stop].copy(), check=False)
    if tape is not None:
        def backward(g):
            gx = np.zeros_like(x.data)
            gx[:, start:stop] = g
            return (gx,)
        tape.record("slice_channels", (x,), out, backward)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple[int, ...]
    passed: bool
    checked: int

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{status}: max rel err {self.max_rel_error:.3e} at {self.worst_index} ({self.checked} coords)"


def grad_check(
    op: Callable[[Tensor, GradTape | None], Tensor],
    x: Tensor,
    epsilon: float = 1e-3,
    tolerance: float = 1e-3,
    *,
    seed: int = 0,
    delta: float = 1e-8,
    max_coords: int | None = None,
    fd_dtype=np.float64,
) -> GradCheckReport:
    """Compare the taped gradient of `op` at `x` with central differences.

    The output is reduced to a scalar with a fixed random weighting so every
    output element contributes. The analytic gradient is computed at the
    input's own precision; the finite differences are evaluated at
    `fd_dtype` (float64 by default) so they are not swamped by float32
    rounding. `op(x, tape)` must be deterministic.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    check_finite(x.data, "grad_check input")
    rng = np.random.default_rng(seed)

    x = Tensor(x.data.copy())
    tape = GradTape()
    y = op(x, tape)
    weights = rng.standard_normal(y.shape).astype(y.dtype)
    tape.backward(y, weights)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad

    def scalar(data: np.ndarray) -> float:
        out = op(Tensor(data), None).data
        check_finite(out, "grad_check forward")
        return float(np.sum(out.astype(np.float64) * weights.astype(np.float64)))

    flat = x.data.reshape(-1).astype(fd_dtype)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))

    worst, worst_i = 0.0, 0
    for i in coords:
        plus = flat.copy()
        plus[i] += epsilon
        minus = flat.copy()
        minus[i] -= epsilon
        # actual step after rounding to the working precision
        step = float(plus[i]) - float(minus[i])
        numeric = (scalar(plus.reshape(x.shape)) - scalar(minus.reshape(x.shape))) / step
        a = float(analytic.reshape(-1)[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), delta)
        if rel > worst:
            worst, worst_i = rel, int(i)
    index = tuple(int(v) for v in np.unravel_index(worst_i, x.shape))
    return GradCheckReport(worst, index, worst < tolerance, len(coords))


class Parameter:
    """Named learnable array. Shape-only until `initialize` allocates data."""

    __slots__ = ("name", "shape", "data", "grad", "frozen", "init")

    def __init__(self, name: str, shape: tuple[int, ...], init: str = "zeros"):
        self.name = name
        self.shape = tuple(int(s) for s in shape)
        self.init = init
        self.data: np.ndarray | None = None
        self.grad: np.ndarray | None = None
        self.frozen = False

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}{', frozen' if self.frozen else ''})"

    def initialize(self, rng: np.random.Generator) -> None:
        if self.init == "kaiming_uniform":
            # fan-in over (in, k_h, k_w); bound = sqrt(6 / fan_in)
            fan_in = int(np.prod(self.shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            self.data = rng.uniform(-bound, bound, size=self.shape).astype(DTYPE)
        elif self.init == "ones":
            self.data = np.ones(self.shape, dtype=DTYPE)
        else:
            self.data = np.zeros(self.shape, dtype=DTYPE)
        self.grad = None

    def require(self) -> np.ndarray:
        if self.data is None:
            raise RuntimeError(f"parameter {self.name!r} is not initialized")
        return self.data

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.frozen:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.require().dtype, copy=True)
        else:
            self.grad += g


def param_grad_check(
    forward: Callable[[GradTape | None], Tensor],
    param: Parameter,
    epsilon: float = 1e-3,
    tolerance: float = 1e-3,
    *,
    seed: int = 0,
    delta: float = 1e-8,
    max_coords: int | None = None,
    fd_dtype=np.float64,
) -> GradCheckReport:
    """Like `grad_check`, but differentiates with respect to a parameter."""
    rng = np.random.default_rng(seed)
    original = param.require().copy()
    param.grad = None
    tape = GradTape()
    y = forward(tape)
    weights = rng.standard_normal(y.shape).astype(y.dtype)
    tape.backward(y, weights)
    analytic = np.zeros_like(original) if param.grad is None else param.grad.copy()

    def scalar(values: np.ndarray) -> float:
        param.data = values
        out = forward(None).data
        return float(np.sum(out.astype(np.float64) * weights.astype(np.float64)))

    flat = original.reshape(-1).astype(fd_dtype)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
    worst, worst_i = 0.0, 0
    try:
        for i in coords:
            plus = flat.copy()
            plus[i] += epsilon
            minus = flat.copy()
            minus[i] -= epsilon
            step = float(plus[i]) - float(minus[i])
            numeric = (scalar(plus.reshape(original.shape)) - scalar(minus.reshape(original.shape))) / step
            a = float(analytic.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), delta)
            if rel > worst:
                worst, worst_i = rel, int(i)
    finally:
        param.data = original
    index = tuple(int(v) for v in np.unravel_index(worst_i, original.shape))
    return GradCheckReport(worst, index, worst < tolerance, len(coords))
