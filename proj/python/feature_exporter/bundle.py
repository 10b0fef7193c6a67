"""Writer for the binary bundle format read by the C++ engine.

Layout: b"AMOE" | u16 version | u32 header length | JSON header |
f32-LE patch grid, cls, extra layers | u8 mask (optional).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"AMOE"
VERSION = 1


@dataclass
class Bundle:
    sample_id: str
    class_id: str
    patch_embeddings: np.ndarray  # (grid_h, grid_w, dim)
    cls_embedding: np.ndarray  # (dim,)
    label: str = "normal"  # or "anomalous"
    layer_stack: list[np.ndarray] = field(default_factory=list)
    pixel_mask: np.ndarray | None = None  # (grid_h, grid_w) of 0/1

    def validate(self) -> None:
        if self.patch_embeddings.ndim != 3:
            raise ValueError("patch_embeddings must be grid_h x grid_w x dim")
        h, w, d = self.patch_embeddings.shape
        if self.cls_embedding.shape != (d,):
            raise ValueError("cls embedding does not match dim")
        for layer in self.layer_stack:
            if layer.shape != (h, w, d):
                raise ValueError("extra layer shape differs from the patch grid")
        if self.label not in ("normal", "anomalous"):
            raise ValueError(f"bad label {self.label!r}")
        if self.pixel_mask is not None:
            if self.pixel_mask.shape != (h, w):
                raise ValueError("mask shape differs from the grid")
            if not np.isin(self.pixel_mask, (0, 1)).all():
                raise ValueError("mask must be 0/1")
        if self.label == "normal" and self.pixel_mask is not None and self.pixel_mask.any():
            raise ValueError("normal sample with a nonzero mask")


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def encode_bundle(b: Bundle) -> bytes:
    b.validate()
    h, w, d = b.patch_embeddings.shape
    header = {
        "sample_id": b.sample_id,
        "class_id": b.class_id,
        "grid_h": h,
        "grid_w": w,
        "dim": d,
        "n_layers": len(b.layer_stack),
        "label": b.label,
        "has_mask": b.pixel_mask is not None,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = [MAGIC, struct.pack("<HI", VERSION, len(hdr)), hdr, _f32(b.patch_embeddings), _f32(b.cls_embedding)]
    out += [_f32(layer) for layer in b.layer_stack]
    if b.pixel_mask is not None:
        out.append(np.ascontiguousarray(b.pixel_mask, dtype=np.uint8).tobytes())
    return b"".join(out)


def write_bundle(b: Bundle, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_bundle(b))


def write_manifest(root: Path, classes: dict[str, dict[str, list[dict]]], seed: int = 0) -> Path:
    """classes[class_id][split] is a list of {path, label, anomaly_type}."""
    doc = {
        "seed": seed,
        "classes": [{"class_id": c, "train": s.get("train", []), "test": s.get("test", [])} for c, s in classes.items()],
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path
