import numpy as np
import pytest

from uvidnet.cli import main
from uvidnet.data import decode_labels, encode_labels, load_records, read_rgb, write_png
from uvidnet.keyframes import read_manifest
from uvidnet.model import ArchConfig, build_uvidnet
from uvidnet.train import load_checkpoint, model_from_checkpoint, predict, save_checkpoint

from uvidnet.synthetic import synthetic_scene

SMALL = ["--base-width", "4", "--height", "32", "--width", "32"]


def make_video(root, name="vid1", scenes=(0, 1), frames_per_scene=6, size=32):
    """Frames under root/name, color labels under root/labels_<name>.

    Every other scene is color-inverted so consecutive scenes differ in histogram.
    """
    frames, labels = root / name, root / f"labels_{name}"
    k = 0
    for j, seed in enumerate(scenes):
        image, lab = synthetic_scene(seed, size)
        rgb = (np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        if j % 2:
            rgb = 255 - rgb
        for _ in range(frames_per_scene):
            k += 1
            write_png(frames / f"f{k:03d}.png", rgb)
            write_png(labels / f"f{k:03d}.png", decode_labels(lab))
    return frames, labels


@pytest.fixture
def manifest(tmp_path):
    frames, labels = make_video(tmp_path)
    path = tmp_path / "pairs.tsv"
    assert main(["keyframes", "--frames", str(frames), "--labels", str(labels), "--out", str(path)]) == 0
    return path


def test_inspect_counts(capsys, tmp_path):
    assert main(["inspect", "--out", str(tmp_path / "ledger.txt")]) == 0
    out = capsys.readouterr().out
    assert "total params: 23,745,032" in out and "seed: 0" in out
    assert (tmp_path / "ledger.txt").read_text() == out
    assert main(["inspect", "--merge", "concatenation"]) == 0
    assert "total params: 26,878,472" in capsys.readouterr().out
    assert main(["inspect", "--baseline", "unet"]) == 0
    assert "total params: 21,593,732" in capsys.readouterr().out


def test_inspect_calibrate(capsys):
    assert main(["inspect", "--calibrate"]) == 0
    out = capsys.readouterr().out
    assert "selected (exact match): one_by_one=single conv_bias=True decoder_bn=True" in out


def test_compare(capsys):
    assert main(["compare"]) == 0
    out = capsys.readouterr().out
    assert "parameter reduction: 3,133,440 (11.66%)" in out
    assert "FLOP reduction" in out and "(15.03%)" in out


def test_keyframes_two_scenes(manifest, capsys):
    records = read_manifest(manifest)
    assert len(records) == 2
    assert [r.target.endswith(n) for r, n in zip(records, ("f003.png", "f009.png"))] == [True, True]
    assert records[1].input_a.endswith("f004.png")
    assert all(r.label for r in records)


def test_keyframes_constant_video(tmp_path, capsys):
    frames, _ = make_video(tmp_path, scenes=(3,), frames_per_scene=5)
    assert main(["keyframes", "--frames", str(frames), "--out", str(tmp_path / "m.tsv")]) == 0
    assert len(read_manifest(tmp_path / "m.tsv")) == 1
    assert "shots: 1" in capsys.readouterr().out


def test_keyframes_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["keyframes", "--frames", str(tmp_path / "empty"), "--out", str(tmp_path / "m.tsv")]) == 1
    assert "no frame images" in capsys.readouterr().err


def test_train_eval_infer(manifest, tmp_path, capsys):
    run = tmp_path / "run"
    args = ["train", "--train", str(manifest), "--val", str(manifest), "--out", str(run), *SMALL,
            "--max-steps", "3", "--lr", "1e-3", "--seed", "4"]
    assert main(args) == 0
    assert "seed: 4" in capsys.readouterr().out
    assert (run / "train_log.csv").read_text().startswith("step,loss,lr,val_miou\n")
    assert "seed = 4" in (run / "config.txt").read_text()
    assert {"final.uvnc", "best.uvnc", "last.uvnc"} <= {p.name for p in run.iterdir()}

    assert main(["eval", "--manifest", str(manifest), "--checkpoint", str(run / "final.uvnc"),
                 "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "report.csv").read_text().splitlines()[0].startswith("sequence,greenery,road")

    out = tmp_path / "pred"
    assert main(["infer", "--manifest", str(manifest), "--checkpoint", str(run / "final.uvnc"),
                 "--out", str(out)]) == 0
    model = model_from_checkpoint(load_checkpoint(run / "final.uvnc"))
    records = read_manifest(manifest)
    a, b, _ = load_records(records, (32, 32))
    expected = predict(model, a, b)
    for r, pred in zip(records, expected):
        png = out / (r.target.rsplit("/", 1)[-1])
        assert np.array_equal(encode_labels(read_rgb(png)), pred)


def test_train_deterministic(manifest, tmp_path):
    logs = []
    for run in ("a", "b"):
        assert main(["train", "--train", str(manifest), "--out", str(tmp_path / run), *SMALL,
                     "--max-steps", "3", "--batch-size", "1"]) == 0
        logs.append((tmp_path / run / "train_log.csv").read_bytes())
    assert logs[0] == logs[1]


def test_eval_perfect_predictions(manifest, tmp_path, capsys):
    labels = tmp_path / "labels_vid1"
    assert main(["eval", "--manifest", str(manifest), "--predictions", str(labels), "--height", "32",
                 "--width", "32", "--out", str(tmp_path / "ev")]) == 0
    rows = (tmp_path / "ev" / "report.csv").read_text().splitlines()[1:]
    for row in rows:
        cells = [c for c in row.split(",")[1:] if c]
        assert cells and all(c == "1.000000" for c in cells)


def test_transfer_end_to_end(manifest, tmp_path, capsys):
    src = tmp_path / "src"
    # an 8-class source model, built directly so no 8-class dataset is needed
    save_checkpoint(src / "model.uvnc", build_uvidnet(ArchConfig(base_width=4, height=32, width=32, num_classes=8)))
    out = tmp_path / "tr"
    assert main(["transfer", "--checkpoint", str(src / "model.uvnc"), "--train", str(manifest), "--out", str(out),
                 "--max-steps", "2"]) == 0
    assert "trainable head parameters: 20" in capsys.readouterr().out
    before = load_checkpoint(src / "model.uvnc").entries
    after = load_checkpoint(out / "final.uvnc").entries
    changed = [n for n in after if not n.startswith("head.") and not np.array_equal(after[n], before[n])]
    assert changed == []


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("encoder = unet\nlearning_rate = 0.1\n")
    assert main(["inspect", "--config", str(cfg)]) == 1
    assert "unknown config key 'learning_rate'" in capsys.readouterr().err


def test_config_file_then_flags(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("merge = concatenation  # comment\nseed = 3\n")
    assert main(["inspect", "--config", str(cfg), "--seed", "9"]) == 0
    out = capsys.readouterr().out
    assert "26,878,472" in out and "seed: 9" in out


@pytest.mark.parametrize("argv", [
    ["inspect", "--height", "100"],
    ["eval", "--manifest", "/nonexistent/m.tsv", "--predictions", "/tmp"],
    ["infer", "--manifest", "/nonexistent/m.tsv", "--checkpoint", "/nonexistent.uvnc", "--out", "/tmp/x"],
])
def test_errors_exit_nonzero(argv, capsys):
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err
