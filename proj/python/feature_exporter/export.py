"""Walk an MVTec-style tree and export one bundle per image.

The encoder is supplied by the caller; anything mapping a cropped RGB image to
per-layer patch tokens and a cls token fits the Encoder protocol.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image

from .bundle import Bundle, write_bundle, write_manifest

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class EncoderOutput:
    layers: list[np.ndarray]  # each (grid_h, grid_w, dim), in requested order
    cls: np.ndarray  # (dim,)


class Encoder(Protocol):
    patch_size: int
    num_layers: int

    def __call__(self, image: np.ndarray, layers: Sequence[int]) -> EncoderOutput: ...


@dataclass
class ExportSpec:
    root: Path
    out: Path
    classes: list[str]
    encoder_id: str = "dinov2_vitb14"
    layers: list[int] = field(default_factory=lambda: [-1])
    resize: int = 448
    crop: int = 392

    def validate(self, encoder: Encoder) -> None:
        if self.crop > self.resize:
            raise ValueError("crop must not exceed resize")
        if self.crop % encoder.patch_size:
            raise ValueError("crop must be a multiple of the encoder patch size")
        for i in self.layers:
            if not -encoder.num_layers <= i < encoder.num_layers:
                raise ValueError(f"layer index {i} out of range for {self.encoder_id}")
        if not self.layers:
            raise ValueError("no layers selected")


def load_image(path: Path, resize: int, crop: int) -> np.ndarray:
    img = Image.open(path).convert("RGB").resize((resize, resize), Image.BILINEAR)
    off = (resize - crop) // 2
    return np.asarray(img.crop((off, off, off + crop, off + crop)), dtype=np.float32) / 255.0


def mask_to_grid(mask_path: Path, resize: int, crop: int, patch: int) -> np.ndarray:
    """Max-pools a pixel mask onto the patch grid: any marked pixel marks the patch."""
    m = Image.open(mask_path).convert("L").resize((resize, resize), Image.NEAREST)
    off = (resize - crop) // 2
    a = np.asarray(m.crop((off, off, off + crop, off + crop))) > 0
    g = crop // patch
    return a.reshape(g, patch, g, patch).max(axis=(1, 3)).astype(np.uint8)


def _images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def export(spec: ExportSpec, encoder: Encoder) -> Path:
    """Writes bundles and a manifest under spec.out; returns the manifest path."""
    spec.validate(encoder)
    manifest: dict[str, dict[str, list[dict]]] = {}
    for cls in spec.classes:
        croot = spec.root / cls
        if not (croot / "train" / "good").is_dir():
            raise FileNotFoundError(f"{croot}/train/good is missing")
        entries: dict[str, list[dict]] = {"train": [], "test": []}
        jobs = [("train", "good", p) for p in _images(croot / "train" / "good")]
        for defect_dir in sorted(d for d in (croot / "test").iterdir() if d.is_dir()):
            jobs += [("test", defect_dir.name, p) for p in _images(defect_dir)]
        for split, defect, path in jobs:
            sample_id = f"{cls}_{split}_{defect}_{path.stem}"
            try:
                image = load_image(path, spec.resize, spec.crop)
            except OSError as e:
                raise OSError(f"unreadable image {path}: {e}") from e
            enc = encoder(image, spec.layers)
            label = "normal" if defect == "good" else "anomalous"
            mask = None
            if split == "test":
                g = spec.crop // encoder.patch_size
                if label == "normal":
                    mask = np.zeros((g, g), dtype=np.uint8)
                else:
                    mp = croot / "ground_truth" / defect / f"{path.stem}_mask.png"
                    if mp.exists():
                        mask = mask_to_grid(mp, spec.resize, spec.crop, encoder.patch_size)
                    else:
                        log.warning("no mask for %s; exported without one", path)
            b = Bundle(sample_id, cls, enc.layers[0], enc.cls, label, list(enc.layers[1:]), mask)
            rel = Path(cls) / split / f"{sample_id}.amoe"
            write_bundle(b, spec.out / rel)
            entries[split].append(
                {"path": rel.as_posix(), "label": label, "anomaly_type": "none" if label == "normal" else defect}
            )
        manifest[cls] = entries
    return write_manifest(spec.out, manifest)
