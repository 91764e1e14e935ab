"""Binary feature galleries and run-manifest bookkeeping.

Gallery layout, all little-endian:

    bytes 0-3    magic "CRFG"
    bytes 4-7    u32 format version (currently 1)
    bytes 8-11   u32 feature dimension
    bytes 12-19  u64 row count
    then per row: u32 label, dim x f32 feature values

Features are stored in float32; whatever precision the extractor produced,
the file is the single source of truth once written, and evaluation always
reads these bytes back rather than recomputing features.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    IntegrityError,
    InvalidParameterError,
    MissingArtifactError,
)

GALLERY_MAGIC = b"CRFG"
GALLERY_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class FeatureGallery:
    """Feature rows extracted by one model from one sample sequence."""

    model_id: str
    labels: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        y = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        f = np.ascontiguousarray(np.asarray(self.features))
        if f.ndim != 2:
            raise InvalidParameterError(f"features must be 2-D, got shape {f.shape}")
        if y.shape != (f.shape[0],):
            raise InvalidParameterError(
                f"labels shape {y.shape} does not match {f.shape[0]} feature rows"
            )
        if f.shape[0] < 1 or f.shape[1] < 1:
            raise InvalidParameterError("a gallery needs at least one row and one dimension")
        y.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "features", f)

    @property
    def num_rows(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _row_dtype(dim: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("vec", "<f4", (dim,))])


def gallery_to_bytes(gallery: FeatureGallery) -> bytes:
    """Serialise a gallery; float64 features are narrowed to float32 here."""
    if gallery.labels.min() < 0 or gallery.labels.max() >= 2**32:
        raise InvalidParameterError("labels must fit an unsigned 32-bit integer")
    rows = np.empty(gallery.num_rows, dtype=_row_dtype(gallery.dim))
    rows["label"] = gallery.labels.astype(np.uint32)
    rows["vec"] = gallery.features.astype(np.float32)
    header = _HEADER.pack(GALLERY_MAGIC, GALLERY_VERSION, gallery.dim, gallery.num_rows)
    return header + rows.tobytes()


def write_gallery(path, gallery: FeatureGallery) -> str:
    """Write a gallery file and return the SHA-256 of the bytes written."""
    blob = gallery_to_bytes(gallery)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_gallery(path, model_id: str | None = None) -> FeatureGallery:
    """Read a gallery file, validating magic, version, and length."""
    p = Path(path)
    data = p.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(
            f"{p}: truncated header, need {_HEADER.size} bytes, file has {len(data)}"
        )
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != GALLERY_MAGIC:
        raise FormatError(
            f"{p}: bad magic {magic!r} at byte 0, expected {GALLERY_MAGIC!r}"
        )
    if version != GALLERY_VERSION:
        raise FormatError(f"{p}: unsupported version {version} at byte 4")
    if dim < 1:
        raise FormatError(f"{p}: feature dimension {dim} at byte 8 must be >= 1")
    expect = _HEADER.size + count * (4 + 4 * dim)
    if len(data) != expect:
        raise FormatError(
            f"{p}: expected {expect} bytes for {count} rows of dim {dim}, "
            f"file has {len(data)} (rows start at byte {_HEADER.size})"
        )
    rows = np.frombuffer(data, dtype=_row_dtype(dim), count=count, offset=_HEADER.size)
    return FeatureGallery(
        model_id=model_id if model_id is not None else p.stem,
        labels=rows["label"].astype(np.int64),
        features=rows["vec"].copy(),
    )


def sha256_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(run_dir, manifest: dict) -> str:
    """Write the run manifest deterministically; returns its SHA-256."""
    text = json.dumps(manifest, sort_keys=True, indent=1) + "\n"
    path = Path(run_dir) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return sha256_bytes(text.encode())


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.is_file():
        raise MissingArtifactError(f"{path}: run manifest not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc


def manifest_digest(run_dir) -> str:
    return sha256_file(Path(run_dir) / MANIFEST_NAME)


def verify_digest(path, expected: str) -> None:
    """Compare a file's SHA-256 to its recorded value; mismatch aborts."""
    actual = sha256_file(path)
    if actual != expected:
        raise IntegrityError(
            f"{path}: stored digest {expected} does not match file contents ({actual})"
        )
