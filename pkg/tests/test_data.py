import numpy as np
import pytest
from hypothesis import given, strategies as st

from uvidnet.data import (DEFAULT_PALETTE, LabelError, Palette, decode_labels, encode_labels, load_pair, make_splits,
                          read_rgb, resize_labels, split_sizes, write_png, write_splits)
from uvidnet.keyframes import ManifestRecord, read_manifest

GREEN, GRAY, RED, BLUE = DEFAULT_PALETTE.colors


def test_solid_green_is_greenery():
    assert (encode_labels(np.full((4, 5, 3), GREEN, np.uint8)) == 0).all()


def test_four_color_grid():
    img = np.array([[GREEN, GRAY], [RED, BLUE]], np.uint8)
    assert encode_labels(img).tolist() == [[0, 1], [2, 3]]


@given(seed=st.integers(0, 10_000))
def test_roundtrip(seed):
    labels = np.random.default_rng(seed).integers(0, 4, (7, 9))
    img = decode_labels(labels)
    assert np.array_equal(encode_labels(img), labels)
    assert np.array_equal(decode_labels(encode_labels(img)), img)


def test_tolerance_absorbs_noise():
    img = np.array([[[5, 250, 3], [130, 124, 135]]], np.uint8)
    assert encode_labels(img).tolist() == [[0, 1]]


def test_out_of_palette_error_names_pixel():
    img = np.full((3, 3, 3), GREEN, np.uint8)
    img[2, 1] = (40, 40, 40)
    with pytest.raises(LabelError, match=r"row 2, col 1.*\(40, 40, 40\).*no palette"):
        encode_labels(img)


def test_ambiguous_pixel():
    palette = Palette(("a", "b"), ((0, 0, 0), (10, 0, 0)))
    with pytest.raises(LabelError, match="ambiguous"):
        encode_labels(np.full((1, 1, 3), (5, 0, 0), np.uint8), palette)


def test_palette_parse_format_roundtrip():
    assert Palette.parse(DEFAULT_PALETTE.format()) == DEFAULT_PALETTE


@pytest.mark.parametrize("text", ["a:0,0,0;b:0,0,0", "a:0,0,0", "a:0,0,300;b:1,1,1", "a:1,2;b:3,4,5"])
def test_bad_palettes(text):
    with pytest.raises(ValueError):
        Palette.parse(text)


@given(seed=st.integers(0, 10_000), h=st.integers(1, 40), w=st.integers(1, 40))
def test_nearest_resize_adds_no_classes(seed, h, w):
    labels = np.random.default_rng(seed).integers(0, 3, (13, 17)) * 2
    assert set(np.unique(resize_labels(labels, (h, w)))) <= set(np.unique(labels))


def make_pair_files(tmp_path, label):
    rng = np.random.default_rng(0)
    frames = [rng.integers(0, 256, (720, 1280, 3), dtype=np.uint8) for _ in range(2)]
    write_png(tmp_path / "a.png", frames[0])
    write_png(tmp_path / "b.png", frames[1])
    write_png(tmp_path / "b_label.png", label)
    return ManifestRecord(1, str(tmp_path / "a.png"), str(tmp_path / "b.png"), str(tmp_path / "b.png"),
                          str(tmp_path / "b_label.png"))


def test_load_pair_720p(tmp_path):
    label = np.zeros((720, 1280, 3), np.uint8)
    label[:] = GREEN
    label[:, 640:] = GRAY
    record = make_pair_files(tmp_path, label)
    a, b, y = load_pair(record, (256, 256))
    assert a.shape == b.shape == (1, 3, 256, 256) and a.dtype == np.float32
    assert 0.0 <= a.min() and a.max() <= 1.0
    assert y.shape == (256, 256)
    # single vertical boundary: every column is one class, and classes switch once
    assert (y == y[:1]).all()
    row = y[0]
    assert row[0] == 0 and row[-1] == 1 and np.count_nonzero(np.diff(row)) == 1
    assert abs(int(np.argmax(row)) - 128) <= 1


def test_load_pair_size_mismatch(tmp_path):
    record = make_pair_files(tmp_path, np.zeros((10, 10, 3), np.uint8) + np.uint8(GREEN))
    with pytest.raises(LabelError, match="b_label.png"):
        load_pair(record)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.png"):
        read_rgb(tmp_path / "nope.png")


def records(n, videos=1):
    return [ManifestRecord(1, f"v{i % videos}/a{i}.png", f"v{i % videos}/b{i}.png", f"v{i % videos}/b{i}.png")
            for i in range(n)]


def sizes(splits):
    return tuple(len(splits[k]) for k in ("train", "val", "test"))


def test_published_split_sizes():
    assert split_sizes(711) == (569, 71, 71)
    assert sizes(make_splits(records(711))) == (569, 71, 71)


def test_explicit_all_test():
    recs = records(10)
    assert sizes(make_splits(recs, assignment={r.target: "test" for r in recs})) == (0, 0, 10)


def test_assignment_by_video():
    recs = records(9, videos=3)
    splits = make_splits(recs, assignment={"v0": "train", "v1": "val", "v2": "test"})
    assert sizes(splits) == (3, 3, 3)


def test_conflicting_assignment():
    recs = records(2)
    with pytest.raises(ValueError, match="both"):
        make_splits(recs, assignment={"v0": "train", recs[0].target: "test", recs[1].target: "train"})


def test_duplicate_targets_rejected():
    with pytest.raises(ValueError, match="more than once"):
        make_splits(records(3) + records(1))


@given(n=st.integers(0, 200), seed=st.integers(0, 100))
def test_splits_partition_and_determinism(n, seed):
    recs = records(n)
    a, b = make_splits(recs, seed=seed), make_splits(recs, seed=seed)
    assert all(a[k].records == b[k].records for k in a)
    targets = sorted(r.target for s in a.values() for r in s.records)
    assert targets == sorted(r.target for r in recs)


def test_write_splits(tmp_path):
    splits = make_splits(records(20))
    paths = write_splits(tmp_path, splits)
    assert [len(read_manifest(paths[k])) for k in ("train", "val", "test")] == list(sizes(splits))
