import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from feature_exporter import Bundle, EncoderOutput, ExportSpec, encode_bundle, export, mask_to_grid  # noqa: E402


class MeanColourEncoder:
    """Stand-in encoder: per-patch mean colour tiled to `dim` channels."""

    patch_size = 14
    num_layers = 2

    def __init__(self, dim=6):
        self.dim = dim

    def __call__(self, image, layers):
        g = image.shape[0] // self.patch_size
        p = image.reshape(g, self.patch_size, g, self.patch_size, 3).mean(axis=(1, 3))
        feat = np.tile(p, (1, 1, self.dim // 3))
        outs = [feat * (1 + i) for i, _ in enumerate(layers)]
        return EncoderOutput(outs, feat.mean(axis=(0, 1)))


def make_tree(root: Path):
    rng = np.random.default_rng(0)
    for split, defect, n in [("train", "good", 4), ("test", "good", 2), ("test", "scratch", 2)]:
        d = root / "widget" / split / defect
        d.mkdir(parents=True)
        for i in range(n):
            Image.fromarray(rng.integers(0, 255, (60, 60, 3), dtype=np.uint8)).save(d / f"{i:03d}.png")
    gt = root / "widget" / "ground_truth" / "scratch"
    gt.mkdir(parents=True)
    m = np.zeros((60, 60), dtype=np.uint8)
    m[:5, :5] = 255
    Image.fromarray(m).save(gt / "000_mask.png")


def test_header_and_sizes():
    b = Bundle("s", "c", np.ones((2, 3, 4)), np.zeros(4), "anomalous", [], np.array([[0, 1, 0], [0, 0, 0]]))
    raw = encode_bundle(b)
    assert raw[:4] == b"AMOE"
    hlen = int.from_bytes(raw[6:10], "little")
    assert len(raw) == 10 + hlen + 4 * (24 + 4) + 6


def test_mask_max_pool(tmp_path):
    m = np.zeros((28, 28), dtype=np.uint8)
    m[15, 0] = 255
    Image.fromarray(m).save(tmp_path / "m.png")
    g = mask_to_grid(tmp_path / "m.png", 28, 28, 14)
    assert g.tolist() == [[0, 0], [1, 0]]


def test_grid_arithmetic(tmp_path):
    make_tree(tmp_path / "src")
    enc = MeanColourEncoder()
    export(ExportSpec(tmp_path / "src", tmp_path / "out", ["widget"], resize=448, crop=392), enc)
    raw = (tmp_path / "out" / "widget" / "train" / "widget_train_good_000.amoe").read_bytes()
    assert b'"grid_h":28' in raw


def test_crop_must_fit():
    with pytest.raises(ValueError):
        ExportSpec(Path("."), Path("."), [], resize=100, crop=392).validate(MeanColourEncoder())


def test_engine_reads_export(tmp_path):
    make_tree(tmp_path / "src")
    spec = ExportSpec(tmp_path / "src", tmp_path / "out", ["widget"], layers=[-1, -2], resize=70, crop=56)
    manifest = export(spec, MeanColourEncoder())
    amoe = os.environ.get("AMOE_BIN")
    if not amoe:
        pytest.skip("AMOE_BIN not set")
    run = subprocess.run(
        [amoe, "train", "--data", str(manifest), "--out", str(tmp_path / "run"), "--iterations", "2",
         "--batch-size", "2", "--set", "model.kb_clusters=2", "--set", "model.patch_depth=1"],
        capture_output=True, text=True)
    assert run.returncode == 0, run.stderr
