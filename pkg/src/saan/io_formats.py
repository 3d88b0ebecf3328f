"""On-disk formats: PGM images, annotation text, density maps, manifests.

  Images       binary PGM (P5), 8-bit grayscale, loaded as v/255.
  Annotations  UTF-8 text, one "x,y" pair per line, decimal floats, LF.
  Density map  magic "SAANDM1\\n", u32 LE height, u32 LE width, then
               height*width 32-bit LE floats in row-major order.
  Manifest     JSON {"items":[{"image","ann","split"}], "bins": null |
               {"global":[min,max], "local":[min,max]}}; paths are
               relative to the manifest's directory. Ground-truth maps
               live at <manifest dir>/density/<image stem>.dm.

All loaders fail with structured errors (byte offsets for binary
formats, line numbers for text) instead of propagating junk.
"""

import json
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .density import ScaleBins
from .errors import AnnotationError, CodecError, ManifestError

DENSITY_MAGIC = b"SAANDM1\n"
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------- PGM

def write_pgm(path, image01):
    """Quantize a [H,W] array in [0,1] to 8 bits and write binary PGM."""
    arr = np.asarray(image01, dtype=np.float64)
    if arr.ndim != 2:
        raise CodecError(f"pgm writer expects a 2-D image, got rank {arr.ndim}")
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    """Binary PGM -> float32 [H,W] in [0,1] (v/255)."""
    with open(path, "rb") as fh:
        buf = fh.read()

    pos = 0

    def token():
        nonlocal pos
        while pos < len(buf):
            if buf[pos : pos + 1].isspace():
                pos += 1
            elif buf[pos : pos + 1] == b"#":  # comment to end of line
                while pos < len(buf) and buf[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CodecError("pgm header truncated", offset=start)
        return buf[start:pos]

    magic = token()
    if magic != b"P5":
        raise CodecError(f"not a binary pgm (magic {magic!r})", offset=0)
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise CodecError(f"malformed pgm header: {exc}", offset=pos)
    if maxval != 255:
        raise CodecError(f"only 8-bit pgm supported, maxval {maxval}", offset=pos)
    pos += 1  # single whitespace byte after maxval
    need = width * height
    if len(buf) - pos < need:
        raise CodecError(
            f"pgm data truncated: need {need} bytes, have {len(buf) - pos}", offset=pos
        )
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return (data.reshape(height, width).astype(np.float32)) / np.float32(255.0)


# -------------------------------------------------------- annotations

def write_annotations(path, points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x, y in pts:
            fh.write(f"{float(x)!r},{float(y)!r}\n")


def read_annotations(path):
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise AnnotationError(f"{path}:{lineno}: expected 'x,y', got {line!r}")
            try:
                points.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise AnnotationError(f"{path}:{lineno}: non-numeric coordinate in {line!r}")
    return np.array(points, dtype=np.float64).reshape(-1, 2)


# ------------------------------------------------------- density maps

def save_density(path, density):
    arr = np.asarray(density)
    if arr.ndim != 2:
        raise CodecError(f"density maps are 2-D, got rank {arr.ndim}")
    with open(path, "wb") as fh:
        fh.write(DENSITY_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_density(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < len(DENSITY_MAGIC) or buf[: len(DENSITY_MAGIC)] != DENSITY_MAGIC:
        raise CodecError(f"bad density magic {buf[:8]!r}", offset=0)
    off = len(DENSITY_MAGIC)
    if len(buf) < off + 8:
        raise CodecError("density header truncated", offset=off)
    height, width = struct.unpack_from("<II", buf, off)
    off += 8
    need = height * width * 4
    if len(buf) - off < need:
        raise CodecError(
            f"density data truncated: need {need} bytes, have {len(buf) - off}",
            offset=off,
        )
    if len(buf) - off > need:
        raise CodecError(f"{len(buf) - off - need} trailing bytes", offset=off + need)
    return np.frombuffer(buf, dtype="<f4", count=height * width, offset=off).reshape(
        height, width
    ).copy()


# ----------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestItem:
    image: str
    ann: str
    split: str


@dataclass
class Manifest:
    items: list
    bins: Optional[ScaleBins]

    def split_items(self, split):
        return [it for it in self.items if it.split == split]


def density_path(manifest_dir, item):
    """Where an item's ground-truth map lives: density/<image stem>.dm."""
    stem = os.path.splitext(os.path.basename(item.image))[0]
    return os.path.join(manifest_dir, "density", stem + ".dm")


def save_manifest(path, manifest):
    doc = {
        "items": [
            {"image": it.image, "ann": it.ann, "split": it.split} for it in manifest.items
        ],
        "bins": None
        if manifest.bins is None
        else {
            "global": [manifest.bins.global_min, manifest.bins.global_max],
            "local": [manifest.bins.local_min, manifest.bins.local_max],
        },
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_manifest(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}")
    if not isinstance(doc, dict) or set(doc) != {"items", "bins"}:
        raise ManifestError(
            f"{path}: manifest must contain exactly the keys 'items' and 'bins', "
            f"got {sorted(doc) if isinstance(doc, dict) else type(doc).__name__}"
        )
    if not isinstance(doc["items"], list):
        raise ManifestError(f"{path}: 'items' must be a list")
    items = []
    for i, rec in enumerate(doc["items"]):
        if not isinstance(rec, dict) or set(rec) != {"image", "ann", "split"}:
            raise ManifestError(
                f"{path}: item {i} must have exactly the keys image/ann/split"
            )
        if rec["split"] not in SPLITS:
            raise ManifestError(
                f"{path}: item {i} has split {rec['split']!r}, expected one of {SPLITS}"
            )
        items.append(ManifestItem(image=rec["image"], ann=rec["ann"], split=rec["split"]))
    bins_doc = doc["bins"]
    bins = None
    if bins_doc is not None:
        if (
            not isinstance(bins_doc, dict)
            or set(bins_doc) != {"global", "local"}
            or len(bins_doc["global"]) != 2
            or len(bins_doc["local"]) != 2
        ):
            raise ManifestError(f"{path}: 'bins' must hold 'global' and 'local' ranges")
        bins = ScaleBins(
            global_min=float(bins_doc["global"][0]),
            global_max=float(bins_doc["global"][1]),
            local_min=float(bins_doc["local"][0]),
            local_max=float(bins_doc["local"][1]),
        )
    return Manifest(items=items, bins=bins)


def validate_manifest_files(manifest, base_dir):
    """Every referenced image/annotation must exist on disk."""
    for it in manifest.items:
        for rel in (it.image, it.ann):
            full = os.path.join(base_dir, rel)
            if not os.path.isfile(full):
                raise ManifestError(f"manifest references missing file: {full}")
