"""Cross-entropy training with Adam, checkpoints and head-only transfer learning."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .layers import softmax
from .metrics import ConfusionMatrix, accumulate, miou
from .model import ArchConfig, ModelGraph, build_unet_baseline, build_uvidnet
from .tensor import GradTape, NonFiniteError, Parameter, Tensor

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
CHECKPOINT_MAGIC = b"UVNC"
CHECKPOINT_VERSION = 1

# Urban-street categories of the source dataset and their aerial counterparts.
URBAN_TO_AERIAL = {
    "nature": "greenery",
    "flat": "road",
    "construction": "construction",
    "object": "construction",
    "vehicle": "road",
    "human": "road",
    "sky": None,
    "void": None,
}


class DivergenceError(RuntimeError):
    pass


class CrossEntropy(NamedTuple):
    loss: float
    grad: np.ndarray  # d loss / d logits
    clamped: int  # pixels whose target probability hit the log clamp


def cross_entropy_loss(probs, target: np.ndarray) -> CrossEntropy:
    """Mean -ln p[target] over all pixels, with the fused softmax+CE gradient.

    `probs` is (N, C, H, W) per-pixel normalized; `target` is (N, H, W).
    The returned gradient is with respect to the pre-softmax logits:
    (p - onehot) / pixel_count.
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    target = np.asarray(target, dtype=np.int64)
    n, c, h, w = p.shape
    if target.shape != (n, h, w):
        raise ValueError(f"target shape {target.shape} does not match probabilities {p.shape}")
    if target.min() < 0 or target.max() >= c:
        raise ValueError(f"target indices must lie in [0, {c})")
    picked = np.take_along_axis(p, target[:, None], axis=1)[:, 0]
    clamped = int((picked < LOG_CLAMP).sum())
    if clamped:
        log.warning("cross-entropy: %d pixel(s) clamped at p=%g", clamped, LOG_CLAMP)
    count = n * h * w
    loss = -float(np.log(np.maximum(picked.astype(np.float64), LOG_CLAMP)).sum()) / count
    grad = p.copy()
    np.put_along_axis(grad, target[:, None], np.take_along_axis(grad, target[:, None], axis=1) - 1, axis=1)
    grad /= count
    return CrossEntropy(loss, grad.astype(p.dtype), clamped)


def softmax_cross_entropy(logits: Tensor, target: np.ndarray, tape: GradTape | None = None) -> Tensor:
    """Taped scalar loss (as a 1x1x1x1 tensor) computed from logits."""
    probs = softmax(logits.data)
    ce = cross_entropy_loss(probs, target)
    out = Tensor(np.full((1, 1, 1, 1), ce.loss, dtype=np.float64))
    if tape is not None:
        grad = ce.grad
        tape.record("softmax_cross_entropy", (logits,), out, lambda g: (grad * g.reshape(()),))
    return out


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One in-place Adam update of every array in `params`."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"{name}: gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name!r}; step aborted at t={state.t}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        theta -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Adam over the non-frozen parameters of a registry."""

    def __init__(self, params: Mapping[str, Parameter], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = {n: p for n, p in params.items() if not p.frozen}
        self.state = AdamState(lr, beta1, beta2, eps)

    def step(self) -> None:
        arrays = {n: p.require() for n, p in self.params.items()}
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adam_step(arrays, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    entries: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _write_entries(f, entries: Mapping[str, np.ndarray]) -> None:
    f.write(CHECKPOINT_MAGIC)
    f.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_entries(data: bytes) -> tuple[int, dict[str, np.ndarray]]:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic bytes)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    entries = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * size
        entries[name] = arr
    if pos != len(data):
        raise ValueError(f"checkpoint has {len(data) - pos} trailing bytes")
    return version, entries


def model_kind(model: ModelGraph) -> str:
    return "baseline" if model.kind == "unet-baseline" else "uvidnet"


def save_checkpoint(path, model: ModelGraph, optimizer: Adam | None = None, meta: Mapping | None = None) -> None:
    """Write the model state (and optionally Adam moments) plus a JSON sidecar.

    Both files are written to temporary names and renamed into place.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = {name: p.require() for name, p in model.state().items()}
    info = {"arch": dataclasses.asdict(model.config), "kind": model_kind(model), **(meta or {})}
    if optimizer is not None:
        for name in optimizer.params:
            if name in optimizer.state.m:
                entries[f"adam.m/{name}"] = optimizer.state.m[name]
                entries[f"adam.v/{name}"] = optimizer.state.v[name]
        info["adam_t"] = optimizer.state.t
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        _write_entries(f, entries)
    side = Path(str(path) + ".json")
    side_tmp = side.with_name(side.name + ".tmp")
    side_tmp.write_text(json.dumps(info, indent=2, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)
    os.replace(side_tmp, side)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    version, entries = _read_entries(path.read_bytes())
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
    return Checkpoint(entries, meta, version)


def restore(model: ModelGraph, ckpt: Checkpoint, skip: Sequence[str] = ()) -> None:
    """Copy checkpoint values into the model; names and shapes must agree."""
    state = model.state()
    missing = [n for n in state if n not in ckpt.entries and n not in skip]
    wrong = [f"{n} (model {p.shape}, checkpoint {ckpt.entries[n].shape})" for n, p in state.items()
             if n in ckpt.entries and n not in skip and ckpt.entries[n].shape != p.shape]
    if missing or wrong:
        problems = [f"missing {m}" for m in missing] + [f"shape mismatch {w}" for w in wrong]
        more = f"; and {len(problems) - 6} more" if len(problems) > 6 else ""
        raise ValueError(f"checkpoint does not match model ({len(problems)} entries): "
                         + "; ".join(problems[:6]) + more)
    for name, p in state.items():
        if name not in skip:
            p.data = ckpt.entries[name].copy()
            p.grad = None


def model_from_checkpoint(ckpt: Checkpoint) -> ModelGraph:
    if "arch" not in ckpt.meta:
        raise ValueError("checkpoint sidecar lacks the architecture description")
    cfg = ArchConfig(**ckpt.meta["arch"])
    builder = build_unet_baseline if ckpt.meta.get("kind") == "baseline" else build_uvidnet
    model = builder(cfg, seed=0)
    restore(model, ckpt)
    return model


def config_hash(*configs) -> str:
    blob = json.dumps([dataclasses.asdict(c) if dataclasses.is_dataclass(c) else c for c in configs],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# ------------------------------------------------------------------- training

@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 2
    epochs: int = 10
    max_steps: int | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_every: int = 1  # epochs
    log_path: str | None = None
    checkpoint_dir: str | None = None


@dataclass
class Samples:
    frame_a: np.ndarray  # (N, 3, H, W)
    frame_b: np.ndarray
    labels: np.ndarray  # (N, H, W)

    def __post_init__(self):
        n = len(self.frame_b)
        if len(self.frame_a) != n or len(self.labels) != n:
            raise ValueError("frame_a, frame_b and labels must have the same length")

    def __len__(self) -> int:
        return len(self.frame_b)

    def take(self, idx) -> "Samples":
        return Samples(self.frame_a[idx], self.frame_b[idx], self.labels[idx])


@dataclass
class TrainResult:
    losses: list[float]
    rows: list[tuple]
    best_miou: float | None = None
    best_step: int | None = None
    steps: int = 0


def model_inputs(model: ModelGraph, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, ...]:
    return (b,) if len(model.inputs) == 1 else (a, b)


def predict(model: ModelGraph, a: np.ndarray, b: np.ndarray, batch_size: int = 2) -> np.ndarray:
    """Argmax class map (N, H, W) in inference mode."""
    out = []
    for i in range(0, len(b), batch_size):
        probs = model(*model_inputs(model, a[i:i + batch_size], b[i:i + batch_size]))
        out.append(probs.data.argmax(axis=1))
    return np.concatenate(out)


def evaluate(model: ModelGraph, data: Samples, batch_size: int = 2) -> ConfusionMatrix:
    cm = ConfusionMatrix(model.config.num_classes)
    pred = predict(model, data.frame_a, data.frame_b, batch_size)
    return accumulate(pred, data.labels, cm)


def format_log(rows: Sequence[tuple]) -> str:
    lines = ["step,loss,lr,val_miou"]
    for step, loss, lr, val in rows:
        lines.append(f"{step},{loss:.9e},{lr:.6g},{'' if val is None else f'{val:.6f}'}")
    return "\n".join(lines) + "\n"


def train_step(model: ModelGraph, optimizer: Adam, batch: Samples) -> float:
    tape = GradTape()
    optimizer.zero_grad()
    logits = model(*model_inputs(model, batch.frame_a, batch.frame_b), training=True, tape=tape, logits=True)
    loss = softmax_cross_entropy(logits, batch.labels, tape)
    value = float(loss.data.reshape(()))
    if not np.isfinite(value):
        raise DivergenceError(f"loss became non-finite ({value})")
    tape.backward(loss)
    if optimizer.params:
        optimizer.step()
    return value


def train(model: ModelGraph, data: Samples, cfg: TrainConfig = TrainConfig(), val: Samples | None = None,
          optimizer: Adam | None = None, meta: Mapping | None = None) -> TrainResult:
    """Epoch loop over seeded shuffles; keeps the best-validation-mIoU checkpoint."""
    if data.labels.max() >= model.config.num_classes:
        raise ValueError("labels exceed the model's class count")
    if optimizer is None:
        optimizer = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    result = TrainResult([], [])
    info = {"seed": cfg.seed, "config_hash": config_hash(model.config, cfg), **(meta or {})}

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        for i in range(0, len(order), cfg.batch_size):
            try:
                loss = train_step(model, optimizer, data.take(order[i:i + cfg.batch_size]))
            except NonFiniteError as exc:
                raise DivergenceError(f"step {step + 1}: {exc}") from exc
            step += 1
            result.losses.append(loss)
            result.rows.append((step, loss, optimizer.state.lr, None))
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        done = cfg.max_steps is not None and step >= cfg.max_steps
        if val is not None and (epoch % cfg.val_every == 0 or done or epoch == cfg.epochs):
            score = miou(evaluate(model, val, cfg.batch_size))
            s, l, lr, _ = result.rows[-1]
            result.rows[-1] = (s, l, lr, score)
            log.info("epoch %d step %d loss %.6f val mIoU %.4f", epoch, step, loss, score)
            if result.best_miou is None or score > result.best_miou:
                result.best_miou, result.best_step = score, step
                if ckpt_dir is not None:
                    save_checkpoint(ckpt_dir / "best.uvnc", model, optimizer, {**info, "step": step, "val_miou": score})
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir / "last.uvnc", model, optimizer, {**info, "step": step})
        if done:
            break
    result.steps = step
    if cfg.log_path:
        path = Path(cfg.log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(format_log(result.rows), encoding="utf-8")
        os.replace(tmp, path)
    return result


# ---------------------------------------------------------- transfer learning

@dataclass
class TransferPlan:
    head: tuple[str, ...]
    frozen: tuple[str, ...]
    source_classes: int = 8
    target_classes: int = 4
    lr: float = 1e-4
    remap: dict = field(default_factory=lambda: dict(URBAN_TO_AERIAL))

    @classmethod
    def for_model(cls, model: ModelGraph, source_classes: int = 8, lr: float = 1e-4) -> "TransferPlan":
        names = list(model.parameters())
        head = tuple(p.name for p in model.head_layer.parameters())
        frozen = tuple(n for n in names if n not in head)
        return cls(head, frozen, source_classes, model.config.num_classes, lr)

    def validate(self, model: ModelGraph) -> None:
        names = set(model.parameters())
        if set(self.head) & set(self.frozen):
            raise ValueError("head and frozen sets overlap")
        if set(self.head) | set(self.frozen) != names:
            raise ValueError("head and frozen sets must cover the parameter registry exactly")


def apply_transfer(model: ModelGraph, ckpt: Checkpoint, plan: TransferPlan, seed: int = 0) -> Adam:
    """Load all non-head weights from `ckpt`, freeze them, re-initialize the head.

    Returns an optimizer restricted to the head parameters.
    """
    plan.validate(model)
    head_layer = model.head_layer
    if head_layer.out_channels != plan.target_classes:
        raise ValueError(f"model head has {head_layer.out_channels} classes, plan expects {plan.target_classes}")
    src = ckpt.entries.get(head_layer.weight.name)
    if src is None or src.shape[0] != plan.source_classes:
        raise ValueError(f"checkpoint head {head_layer.weight.name!r} is not a {plan.source_classes}-class head")
    restore(model, ckpt, skip=plan.head)
    rng = np.random.default_rng(seed)
    params = model.parameters()
    for name in plan.head:
        params[name].initialize(rng)
        params[name].frozen = False
    for name in plan.frozen:
        params[name].frozen = True
        params[name].grad = None
    return Adam({n: params[n] for n in plan.head}, lr=plan.lr)


def trainable_count(model: ModelGraph) -> int:
    return sum(p.size for p in model.parameters().values() if not p.frozen)

