"""Binary PGM images and the corpus manifest."""

from __future__ import annotations

import json
import os
from pathlib import Path

import jsonschema
import numpy as np

from .synth import FaceSample

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["version", "num_classes", "levels", "side", "samples"],
    "properties": {
        "version": {"const": 1},
        "num_classes": {"type": "integer", "minimum": 2},
        "levels": {"type": "integer", "minimum": 1},
        "side": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "affinity": {"type": "boolean"},
        "samples": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["path", "identity_id", "expression_label", "intensity_level", "keypoints"],
                "additionalProperties": False,
                "properties": {
                    "path": {"type": "string"},
                    "identity_id": {"type": "integer", "minimum": 0},
                    "expression_label": {"type": "integer", "minimum": -1},
                    "intensity_level": {"type": "integer", "minimum": 0},
                    "keypoints": {
                        "type": "array", "minItems": 3, "maxItems": 3,
                        "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "number"}},
                    },
                },
            },
        },
    },
}


class FormatError(ValueError):
    """A file on disk does not follow its documented format."""


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValueError(f"PGM output needs a 2-D uint8 image, got {image.dtype} {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        out.append(buf[start:pos])
    return out, pos + 1  # exactly one whitespace byte before the raster


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    toks, pos = _tokens(buf, 4)
    if toks[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {toks[0]!r})")
    w, h, maxval = (int(t) for t in toks[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    raster = buf[pos:pos + w * h]
    if len(raster) != w * h:
        raise FormatError(f"{path}: raster has {len(raster)} bytes, expected {w * h}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def save_corpus(samples: list[FaceSample], out_dir, num_classes: int, levels: int, side: int,
                seed: int | None = None, affinity: bool = False) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        tag = "neutral" if s.is_neutral else f"e{s.expression_label}_l{s.intensity_level}"
        rel = f"images/id{s.identity_id:03d}_{tag}.pgm"
        write_pgm(out_dir / rel, s.image)
        entries.append({
            "path": rel,
            "identity_id": int(s.identity_id),
            "expression_label": int(s.expression_label),
            "intensity_level": int(s.intensity_level),
            "keypoints": [[float(x), float(y)] for x, y in s.keypoints],
        })
    doc = {"version": 1, "num_classes": num_classes, "levels": levels, "side": side,
           "affinity": affinity, "samples": entries}
    if seed is not None:
        doc["seed"] = seed
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def validate_manifest(doc: dict) -> None:
    try:
        jsonschema.validate(doc, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as err:
        raise FormatError(f"manifest invalid: {err.message}") from err
    K = doc["num_classes"]
    for e in doc["samples"]:
        if e["expression_label"] >= K:
            raise FormatError(f"{e['path']}: expression_label {e['expression_label']} >= {K}")


def load_corpus(manifest_path) -> tuple[list[FaceSample], dict]:
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    validate_manifest(doc)
    root = manifest_path.parent
    samples = []
    for e in doc["samples"]:
        img_path = root / e["path"]
        img = read_pgm(img_path)
        kps = np.array(e["keypoints"], dtype=np.float64)
        H, W = img.shape
        if np.any(kps < -0.5) or np.any(kps[:, 0] > W - 0.5) or np.any(kps[:, 1] > H - 0.5):
            raise FormatError(f"{e['path']}: keypoints outside the image")
        samples.append(FaceSample(img, e["identity_id"], e["expression_label"], e["intensity_level"],
                                  kps, path=os.fspath(img_path)))
    meta = {k: v for k, v in doc.items() if k != "samples"}
    return samples, meta
