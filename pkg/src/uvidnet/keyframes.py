"""Shot boundary detection, keyframe selection and temporal input pairing.

Frame indices are 1-based throughout. Within a shot of ``n`` frames the
keyframe is in-shot frame ``max(n // 2, 1)``. The context frame paired with
shot ``l > 1`` is in-shot frame ``n_prev // 2 + 1`` of shot ``l - 1`` (the
frame after the previous keyframe); shot 1 is paired with the first frame of
the video.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

BINS = 16
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm"}
DEFAULT_THRESHOLD = 0.35


@dataclass(frozen=True)
class Shot:
    index: int  # 1-based shot number
    start: int  # global frame index, inclusive
    end: int  # inclusive

    def __post_init__(self):
        if self.index < 1 or self.start < 1 or self.end < self.start:
            raise ValueError(f"invalid shot {self}")

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class KeyframePair:
    shot: int
    input_a: int  # temporal-context frame (upper branch)
    input_b: int  # current keyframe (lower branch)

    @property
    def target(self) -> int:
        return self.input_b


def color_histogram(rgb: np.ndarray, bins: int = BINS) -> np.ndarray:
    """Per-channel histogram of an (H, W, 3) uint8 image, normalized to sum to 1."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {rgb.shape}")
    idx = (rgb.astype(np.int64) * bins) // 256
    hist = np.concatenate([np.bincount(idx[..., ch].ravel(), minlength=bins) for ch in range(3)])
    return hist / hist.sum()


def dissimilarity(h1: np.ndarray, h2: np.ndarray) -> float:
    """Half the L1 distance between normalized histograms, in [0, 1]."""
    return 0.5 * float(np.abs(h1 - h2).sum())


class FrameSequence:
    """Ordered frames (1-based). Histograms are computed once and cached."""

    def __init__(self, frames: Sequence):
        if len(frames) == 0:
            raise ValueError("frame sequence is empty")
        self.frames = list(frames)
        self._hist: dict[int, np.ndarray] = {}

    @classmethod
    def from_dir(cls, directory) -> "FrameSequence":
        directory = Path(directory)
        if not directory.is_dir():
            raise FileNotFoundError(f"frames directory not found: {directory}")
        paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not paths:
            raise ValueError(f"no frame images in {directory}")
        return cls(paths)

    def __len__(self) -> int:
        return len(self.frames)

    def path(self, index: int):
        return self.frames[index - 1]

    def image(self, index: int) -> np.ndarray:
        frame = self.frames[index - 1]
        if isinstance(frame, np.ndarray):
            return frame
        try:
            with Image.open(frame) as im:
                return np.asarray(im.convert("RGB"))
        except (OSError, ValueError) as exc:
            raise OSError(f"cannot read frame {index} ({frame}): {exc}") from exc

    def histogram(self, index: int) -> np.ndarray:
        if index not in self._hist:
            self._hist[index] = color_histogram(self.image(index))
        return self._hist[index]

    def distances(self) -> np.ndarray:
        """d(frame i, frame i+1) for i = 1 .. len-1."""
        return np.array([dissimilarity(self.histogram(i), self.histogram(i + 1)) for i in range(1, len(self))])


def shots_from_distances(distances: Iterable[float], threshold: float) -> list[Shot]:
    d = list(distances)
    cuts = [i + 1 for i, v in enumerate(d) if v > threshold]  # boundary after frame i+1
    shots, start = [], 1
    for k, cut in enumerate(cuts, start=1):
        shots.append(Shot(k, start, cut))
        start = cut + 1
    shots.append(Shot(len(shots) + 1, start, len(d) + 1))
    return shots


def detect_shots(seq: FrameSequence, threshold: float = DEFAULT_THRESHOLD) -> list[Shot]:
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return shots_from_distances(seq.distances(), threshold)


def keyframe_of(shot: Shot) -> int:
    return shot.start + max(shot.length // 2, 1) - 1


def make_pairs(shots: Sequence[Shot]) -> list[KeyframePair]:
    pairs = []
    for i, shot in enumerate(shots):
        if i == 0:
            context = shots[0].start
        else:
            prev = shots[i - 1]
            context = prev.start + prev.length // 2  # in-shot frame n//2 + 1
        pairs.append(KeyframePair(shot.index, context, keyframe_of(shot)))
    return pairs


@dataclass
class ManifestRecord:
    shot: int
    input_a: str
    input_b: str
    target: str
    label: str | None = None

    def to_line(self) -> str:
        fields = [str(self.shot), self.input_a, self.input_b, self.target]
        if self.label:
            fields.append(self.label)
        for f in fields:
            if "\t" in f or "\n" in f:
                raise ValueError(f"manifest field contains a tab or newline: {f!r}")
        return "\t".join(fields)

    @classmethod
    def from_line(cls, line: str, base: Path | None = None) -> "ManifestRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) not in (4, 5):
            raise ValueError(f"manifest line needs 4 or 5 tab-separated fields, got {len(parts)}: {line!r}")

        def resolve(p):
            if base is None or os.path.isabs(p):
                return p
            return str(base / p)

        label = resolve(parts[4]) if len(parts) == 5 and parts[4] else None
        return cls(int(parts[0]), resolve(parts[1]), resolve(parts[2]), resolve(parts[3]), label)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_manifest(path, records: Sequence[ManifestRecord]) -> None:
    atomic_write_text(path, "".join(r.to_line() + "\n" for r in records))


def read_manifest(path) -> list[ManifestRecord]:
    """Read a pair manifest; relative paths resolve against the manifest's folder."""
    path = Path(path)
    base = path.parent
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(ManifestRecord.from_line(line, base))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def pair_records(seq: FrameSequence, pairs: Sequence[KeyframePair], labels_dir=None) -> list[ManifestRecord]:
    records = []
    for p in pairs:
        a, b = str(seq.path(p.input_a)), str(seq.path(p.input_b))
        label = None
        if labels_dir is not None:
            label = str(Path(labels_dir) / (Path(b).stem + ".png"))
        records.append(ManifestRecord(p.shot, a, b, b, label))
    return records
