"""Color-coded label maps, frame/label loading and train/val/test splits."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .keyframes import ManifestRecord, write_manifest

COLOR_TOLERANCE = 8
SPLIT_NAMES = ("train", "val", "test")
PUBLISHED_SPLIT = (569, 71, 71)


@dataclass(frozen=True)
class Palette:
    names: tuple[str, ...]
    colors: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        if len(self.names) != len(self.colors) or len(self.names) < 2:
            raise ValueError("palette needs >= 2 classes with one color each")
        if len(set(self.colors)) != len(self.colors):
            raise ValueError(f"palette colors must be distinct: {self.colors}")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"palette names must be distinct: {self.names}")

    def __len__(self) -> int:
        return len(self.names)

    @classmethod
    def parse(cls, text: str) -> "Palette":
        """Parse ``name:r,g,b;name:r,g,b;...``."""
        names, colors = [], []
        for item in filter(None, (s.strip() for s in text.split(";"))):
            name, _, rgb = item.partition(":")
            values = tuple(int(v) for v in rgb.split(","))
            if len(values) != 3 or not all(0 <= v <= 255 for v in values):
                raise ValueError(f"bad palette entry {item!r}")
            names.append(name.strip())
            colors.append(values)
        return cls(tuple(names), tuple(colors))

    def format(self) -> str:
        return ";".join(f"{n}:{r},{g},{b}" for n, (r, g, b) in zip(self.names, self.colors))


DEFAULT_PALETTE = Palette(
    ("greenery", "road", "construction", "water"),
    ((0, 255, 0), (128, 128, 128), (255, 0, 0), (0, 0, 255)),
)


class LabelError(ValueError):
    pass


def encode_labels(img: np.ndarray, palette: Palette = DEFAULT_PALETTE, tol: int = COLOR_TOLERANCE) -> np.ndarray:
    """Map an (H, W, 3) color annotation to an (H, W) array of class indices.

    Each pixel must be within L-infinity distance `tol` of exactly one
    palette color.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] < 3:
        raise LabelError(f"expected an (H, W, 3) RGB label image, got shape {img.shape}")
    rgb = img[..., :3].astype(np.int16)
    colors = np.array(palette.colors, dtype=np.int16)
    dist = np.abs(rgb[:, :, None, :] - colors[None, None]).max(axis=-1)
    hits = (dist <= tol).sum(axis=-1)
    if (hits != 1).any():
        y, x = (int(v) for v in np.argwhere(hits != 1)[0])
        what = "matches no palette color" if hits[y, x] == 0 else "is ambiguous between palette colors"
        raise LabelError(f"pixel (row {y}, col {x}) color {tuple(int(v) for v in rgb[y, x])} {what}")
    return dist.argmin(axis=-1).astype(np.int64)


def decode_labels(labels: np.ndarray, palette: Palette = DEFAULT_PALETTE) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= len(palette):
        raise LabelError(f"label indices must lie in [0, {len(palette)})")
    return np.array(palette.colors, dtype=np.uint8)[labels]


def read_rgb(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_png(path, rgb: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.png")
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(tmp)
    tmp.replace(path)


def resize_image(rgb: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to (H, W); returns float32 (3, H, W) in [0, 1]."""
    h, w = size
    out = Image.fromarray(np.asarray(rgb, dtype=np.uint8)).resize((w, h), Image.BILINEAR)
    return (np.asarray(out, dtype=np.float32) / 255.0).transpose(2, 0, 1)


def resize_labels(labels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of an index map; never creates new classes."""
    h, w = size
    src = np.asarray(labels)
    if src.max(initial=0) > 255:
        raise LabelError("too many classes for an 8-bit label resize")
    out = Image.fromarray(src.astype(np.uint8)).resize((w, h), Image.NEAREST)
    return np.asarray(out).astype(np.int64)


def load_pair(record: ManifestRecord, target_size: tuple[int, int] = (256, 256),
              palette: Palette = DEFAULT_PALETTE) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Return (frame_a, frame_b, labels) as (1,3,H,W), (1,3,H,W), (H,W) arrays.

    `labels` is None when the record carries no label path.
    """
    a = read_rgb(record.input_a)
    b = read_rgb(record.input_b)
    labels = None
    if record.label:
        color = read_rgb(record.label)
        if color.shape[:2] != b.shape[:2]:
            raise LabelError(f"label {record.label} is {color.shape[1]}x{color.shape[0]} but frame "
                             f"{record.input_b} is {b.shape[1]}x{b.shape[0]}")
        try:
            labels = resize_labels(encode_labels(color, palette), target_size)
        except LabelError as exc:
            raise LabelError(f"{record.label}: {exc}") from exc
    return resize_image(a, target_size)[None], resize_image(b, target_size)[None], labels


def load_records(records: Sequence[ManifestRecord], target_size=(256, 256), palette: Palette = DEFAULT_PALETTE):
    """Load records in manifest order into stacked arrays (labels may be None)."""
    a, b, y = [], [], []
    for r in records:
        fa, fb, lab = load_pair(r, target_size, palette)
        a.append(fa)
        b.append(fb)
        y.append(lab)
    labels = None if any(v is None for v in y) else np.stack(y)
    return np.concatenate(a), np.concatenate(b), labels


def video_of(record: ManifestRecord) -> str:
    return Path(record.target).parent.name


@dataclass
class DatasetSplit:
    name: str
    records: list[ManifestRecord]

    def __len__(self) -> int:
        return len(self.records)


def split_sizes(n: int, ratios: Sequence[float] = PUBLISHED_SPLIT) -> tuple[int, int, int]:
    total = float(sum(ratios))
    n_val = int(round(n * ratios[1] / total))
    n_test = int(round(n * ratios[2] / total))
    return n - n_val - n_test, n_val, n_test


def make_splits(records: Sequence[ManifestRecord], ratios: Sequence[float] = PUBLISHED_SPLIT, seed: int = 0,
                assignment: Mapping[str, str] | None = None) -> dict[str, DatasetSplit]:
    """Partition records into train/val/test.

    With `assignment` (keys are target paths or video folder names, values
    split names) the split is explicit; otherwise records are shuffled with
    `seed` and cut by `ratios`.
    """
    targets = [r.target for r in records]
    if len(set(targets)) != len(targets):
        dup = next(t for t in targets if targets.count(t) > 1)
        raise ValueError(f"target frame {dup} appears more than once")
    out = {name: DatasetSplit(name, []) for name in SPLIT_NAMES}
    if assignment is not None:
        for r in records:
            by_path, by_video = assignment.get(r.target), assignment.get(video_of(r))
            if by_path and by_video and by_path != by_video:
                raise ValueError(f"{r.target} assigned to both {by_path!r} and {by_video!r}")
            name = by_path or by_video
            if name is None:
                raise ValueError(f"{r.target} has no split assignment")
            if name not in out:
                raise ValueError(f"unknown split {name!r}")
            out[name].records.append(r)
        return out
    order = np.random.default_rng(seed).permutation(len(records))
    n_train, n_val, _ = split_sizes(len(records), ratios)
    for rank, i in enumerate(order):
        name = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        out[name].records.append(records[i])
    return out


def write_splits(directory, splits: Mapping[str, DatasetSplit]) -> dict[str, Path]:
    directory = Path(directory)
    paths = {}
    for name, split in splits.items():
        paths[name] = directory / f"{name}.tsv"
        write_manifest(paths[name], split.records)
    return paths
