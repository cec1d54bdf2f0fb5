import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from uvidnet.keyframes import (FrameSequence, ManifestRecord, Shot, color_histogram, detect_shots, keyframe_of,
                               make_pairs, read_manifest, shots_from_distances, write_manifest)


def solid(color, size=(8, 8)):
    return np.full((*size, 3), color, np.uint8)


def pil_histogram(rgb):
    """48-bin histogram from PIL's 768-bin per-channel counts."""
    counts = np.array(Image.fromarray(rgb).histogram(), dtype=np.float64).reshape(3, 16, 16).sum(axis=2)
    return counts.ravel() / counts.sum()


def oracle_shots(frames, threshold):
    hists = [pil_histogram(f) for f in frames]
    d = [0.5 * np.abs(a - b).sum() for a, b in zip(hists, hists[1:])]
    bounds = [i + 1 for i, v in enumerate(d) if v > threshold]
    starts = [1, *(b + 1 for b in bounds)]
    ends = [*bounds, len(frames)]
    return list(zip(starts, ends))


def spans(shots):
    return [(s.start, s.end) for s in shots]


def test_black_then_white():
    seq = FrameSequence([solid(0)] * 30 + [solid(255)] * 30)
    assert spans(detect_shots(seq, 0.5)) == [(1, 30), (31, 60)]
    d = seq.distances()
    assert d[29] == 1.0 and np.count_nonzero(d) == 1


@pytest.mark.parametrize("threshold", [0.01, 0.35, 0.99])
def test_constant_video_one_shot(threshold):
    assert spans(detect_shots(FrameSequence([solid(77)] * 45), threshold)) == [(1, 45)]


def test_rgb_segments_match_oracle():
    frames = [solid((255, 0, 0))] * 20 + [solid((0, 255, 0))] * 20 + [solid((0, 0, 255))] * 20
    shots = detect_shots(FrameSequence(frames), 0.5)
    assert spans(shots) == oracle_shots(frames, 0.5) == [(1, 20), (21, 40), (41, 60)]


@given(seed=st.integers(0, 10_000))
def test_histogram_matches_pil(seed):
    rgb = np.random.default_rng(seed).integers(0, 256, (6, 5, 3), dtype=np.uint8)
    np.testing.assert_allclose(color_histogram(rgb), pil_histogram(rgb), atol=1e-15)


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5])
def test_threshold_range(bad):
    with pytest.raises(ValueError):
        detect_shots(FrameSequence([solid(0)] * 3), bad)


def test_empty_sequence():
    with pytest.raises(ValueError):
        FrameSequence([])


def test_unreadable_frame_named(tmp_path):
    bad = tmp_path / "f001.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(OSError, match="f001.png"):
        FrameSequence([bad]).image(1)


@pytest.mark.parametrize("shot, expected", [(Shot(1, 1, 16), 8), (Shot(2, 17, 32), 24), (Shot(1, 5, 5), 5),
                                            (Shot(1, 1, 15), 7)])
def test_keyframe_of(shot, expected):
    assert keyframe_of(shot) == expected


@pytest.mark.parametrize("bounds, expected", [
    ([(1, 16), (17, 32)], [(1, 8), (9, 24)]),
    ([(1, 15)], [(1, 7)]),
    ([(1, 2), (3, 4)], [(1, 1), (2, 3)]),
    ([(1, 30), (31, 60)], [(1, 15), (16, 45)]),
])
def test_make_pairs(bounds, expected):
    shots = [Shot(i, s, e) for i, (s, e) in enumerate(bounds, start=1)]
    pairs = make_pairs(shots)
    assert [(p.input_a, p.input_b) for p in pairs] == expected
    assert all(p.target == p.input_b == keyframe_of(s) for p, s in zip(pairs, shots))


distance_lists = st.lists(st.floats(0, 1), min_size=0, max_size=40)


@given(d=distance_lists, threshold=st.floats(0.01, 0.99))
def test_shots_partition(d, threshold):
    shots = shots_from_distances(d, threshold)
    assert shots[0].start == 1 and shots[-1].end == len(d) + 1
    assert all(b.start == a.end + 1 for a, b in zip(shots, shots[1:]))
    assert [s.index for s in shots] == list(range(1, len(shots) + 1))


@given(d=distance_lists, t1=st.floats(0.01, 0.99), t2=st.floats(0.01, 0.99))
def test_lower_threshold_never_fewer_shots(d, t1, t2):
    lo, hi = sorted((t1, t2))
    assert len(shots_from_distances(d, lo)) >= len(shots_from_distances(d, hi))


@given(lengths=st.lists(st.integers(1, 30), min_size=1, max_size=10))
def test_pair_invariants(lengths):
    shots, start = [], 1
    for i, n in enumerate(lengths, start=1):
        shots.append(Shot(i, start, start + n - 1))
        start += n
    pairs = make_pairs(shots)
    assert len(pairs) == len(shots)
    for k, p in enumerate(pairs):
        if k == 0:
            assert p.input_a <= p.input_b
        else:
            assert p.input_a < p.input_b
            assert shots[k - 1].start <= p.input_a <= shots[k - 1].end


def test_manifest_roundtrip(tmp_path):
    records = [ManifestRecord(1, "v/f1.png", "v/f8.png", "v/f8.png", "labels/f8.png"),
               ManifestRecord(2, "/abs/f9.png", "/abs/f24.png", "/abs/f24.png")]
    path = tmp_path / "m.tsv"
    write_manifest(path, records)
    back = read_manifest(path)
    assert back[0].input_a == str(tmp_path / "v/f1.png") and back[0].label == str(tmp_path / "labels/f8.png")
    assert back[1] == records[1]


def test_manifest_bad_line(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("1\ta\tb\n", encoding="utf-8")
    with pytest.raises(ValueError, match=":1:"):
        read_manifest(path)


def test_from_dir_sorted(tmp_path):
    for name, value in [("b.png", 255), ("a.png", 0), ("notes.txt", None)]:
        if value is None:
            (tmp_path / name).write_text("x")
        else:
            Image.fromarray(solid(value)).save(tmp_path / name)
    seq = FrameSequence.from_dir(tmp_path)
    assert [p.name for p in seq.frames] == ["a.png", "b.png"]
    assert seq.image(1).max() == 0
