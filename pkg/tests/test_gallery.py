import numpy as np
import pytest

from cores import (
    FeatureGallery,
    FormatError,
    IntegrityError,
    InvalidParameterError,
    MissingArtifactError,
    read_gallery,
    read_manifest,
    sha256_file,
    write_gallery,
)
from cores.gallery import (
    GALLERY_MAGIC,
    gallery_to_bytes,
    manifest_digest,
    sha256_bytes,
    verify_digest,
    write_manifest,
)


def sample_gallery():
    rng = np.random.default_rng(0)
    return FeatureGallery("m1", np.array([3, 1, 4, 1]),
                          rng.normal(size=(4, 5)))


def test_gallery_roundtrip_preserves_float32_exactly(tmp_path):
    gallery = sample_gallery()
    path = tmp_path / "g.gallery"
    digest = write_gallery(path, gallery)
    back = read_gallery(path, model_id="m1")
    assert back.model_id == "m1"
    assert np.array_equal(back.labels, gallery.labels)
    assert np.array_equal(back.features, gallery.features.astype(np.float32))
    assert digest == sha256_file(path)
    # a second write of the same content is byte-identical
    assert write_gallery(tmp_path / "g2.gallery", gallery) == digest


def test_gallery_bytes_layout():
    gallery = FeatureGallery("m", np.array([9]), np.ones((1, 2)))
    blob = gallery_to_bytes(gallery)
    assert blob[:4] == GALLERY_MAGIC
    assert len(blob) == 20 + 4 + 8  # header, u32 label, 2 f32 values


def test_read_gallery_rejects_malformed_files(tmp_path):
    gallery = sample_gallery()
    path = tmp_path / "g.gallery"
    write_gallery(path, gallery)
    blob = path.read_bytes()

    bad = tmp_path / "bad.gallery"
    bad.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError, match="bad magic"):
        read_gallery(bad)

    bad.write_bytes(blob[:10])
    with pytest.raises(FormatError, match="truncated"):
        read_gallery(bad)

    bad.write_bytes(blob + b"x")
    with pytest.raises(FormatError, match="expected"):
        read_gallery(bad)

    version_bumped = bytearray(blob)
    version_bumped[4] = 2
    bad.write_bytes(bytes(version_bumped))
    with pytest.raises(FormatError, match="version"):
        read_gallery(bad)


def test_gallery_rejects_labels_beyond_u32():
    with pytest.raises(InvalidParameterError):
        gallery_to_bytes(FeatureGallery("m", np.array([-1]), np.ones((1, 2))))
    with pytest.raises(InvalidParameterError):
        gallery_to_bytes(FeatureGallery("m", np.array([2**32]), np.ones((1, 2))))


def test_verify_digest_detects_any_flip(tmp_path):
    path = tmp_path / "g.gallery"
    digest = write_gallery(path, sample_gallery())
    verify_digest(path, digest)
    blob = bytearray(path.read_bytes())
    blob[25] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        verify_digest(path, digest)


def test_manifest_roundtrip_and_digest_stability(tmp_path):
    manifest = {"b": 2, "a": [1, 2], "nested": {"z": None}}
    d1 = write_manifest(tmp_path, manifest)
    assert read_manifest(tmp_path) == manifest
    assert manifest_digest(tmp_path) == d1
    # key order in the input dict does not change the bytes
    d2 = write_manifest(tmp_path, {"nested": {"z": None}, "a": [1, 2], "b": 2})
    assert d2 == d1


def test_read_manifest_missing_or_malformed(tmp_path):
    with pytest.raises(MissingArtifactError, match="not found"):
        read_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text("{nope")
    with pytest.raises(FormatError, match="malformed"):
        read_manifest(tmp_path)


def test_sha256_helpers_agree(tmp_path):
    blob = b"hello feature rows"
    path = tmp_path / "f.bin"
    path.write_bytes(blob)
    assert sha256_bytes(blob) == sha256_file(path)
