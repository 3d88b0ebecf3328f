"""Tests for the on-disk codecs: PGM, annotations, density maps, manifests."""

import numpy as np
import pytest

from saan import io_formats
from saan.density import ScaleBins
from saan.errors import AnnotationError, CodecError, ManifestError
from saan.io_formats import Manifest, ManifestItem


@pytest.fixture
def rng():
    return np.random.default_rng(404)


class TestPgm:
    def test_quantized_round_trip(self, rng, tmp_path):
        img = rng.uniform(0, 1, (12, 17))
        path = tmp_path / "a.pgm"
        io_formats.write_pgm(path, img)
        back = io_formats.read_pgm(path)
        assert back.shape == (12, 17)
        np.testing.assert_allclose(back, np.rint(img * 255) / 255.0, atol=1e-6)

    def test_exact_round_trip_on_quantized_values(self, rng, tmp_path):
        levels = rng.integers(0, 256, (8, 8))
        img = (levels / 255.0).astype(np.float64)
        path = tmp_path / "b.pgm"
        io_formats.write_pgm(path, img)
        back = io_formats.read_pgm(path)
        np.testing.assert_array_equal(back, (levels.astype(np.float32) / np.float32(255.0)))

    def test_comments_in_header(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 2\n255\n" + bytes([0, 128, 255, 64]))
        img = io_formats.read_pgm(path)
        assert img.shape == (2, 2)
        assert img[0, 1] == np.float32(128) / np.float32(255)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.pgm"
        path.write_bytes(b"P2\n2 2\n255\n1 2 3 4\n")
        with pytest.raises(CodecError, match="magic"):
            io_formats.read_pgm(path)

    def test_truncated_data_reports_offset(self, tmp_path):
        path = tmp_path / "e.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + bytes(7))
        with pytest.raises(CodecError, match="offset"):
            io_formats.read_pgm(path)

    def test_wide_maxval_rejected(self, tmp_path):
        path = tmp_path / "f.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(CodecError, match="maxval"):
            io_formats.read_pgm(path)


class TestAnnotations:
    def test_round_trip_exact(self, rng, tmp_path):
        pts = rng.uniform(0, 63, (20, 2))
        path = tmp_path / "a.txt"
        io_formats.write_annotations(path, pts)
        back = io_formats.read_annotations(path)
        np.testing.assert_array_equal(back, pts)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "b.txt"
        path.write_text("")
        assert io_formats.read_annotations(path).shape == (0, 2)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("1.5,2.5\n\n3.0,4.0\n")
        assert io_formats.read_annotations(path).shape == (2, 2)

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "d.txt"
        path.write_text("1.0,2.0\nnot-a-pair\n")
        with pytest.raises(AnnotationError, match=":2:"):
            io_formats.read_annotations(path)

    def test_non_numeric_reports_number(self, tmp_path):
        path = tmp_path / "e.txt"
        path.write_text("1.0,abc\n")
        with pytest.raises(AnnotationError, match=":1:"):
            io_formats.read_annotations(path)


class TestDensityCodec:
    def test_round_trip_bitwise(self, rng, tmp_path):
        m = rng.uniform(0, 0.3, (24, 30)).astype(np.float32)
        path = tmp_path / "a.dm"
        io_formats.save_density(path, m)
        back = io_formats.load_density(path)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, m)

    def test_bad_magic_at_offset_zero(self, rng, tmp_path):
        path = tmp_path / "b.dm"
        io_formats.save_density(path, rng.uniform(0, 1, (4, 4)))
        blob = bytearray(path.read_bytes())
        blob[3] ^= 0x55
        path.write_bytes(bytes(blob))
        with pytest.raises(CodecError, match="magic") as exc:
            io_formats.load_density(path)
        assert exc.value.offset == 0

    def test_truncation_reports_offset(self, rng, tmp_path):
        path = tmp_path / "c.dm"
        io_formats.save_density(path, rng.uniform(0, 1, (8, 8)))
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CodecError, match="truncated"):
            io_formats.load_density(path)

    def test_trailing_bytes_rejected(self, rng, tmp_path):
        path = tmp_path / "d.dm"
        io_formats.save_density(path, rng.uniform(0, 1, (4, 4)))
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CodecError, match="trailing"):
            io_formats.load_density(path)


class TestManifest:
    def _sample(self, with_bins=True):
        items = [
            ManifestItem("images/a.pgm", "anns/a.txt", "train"),
            ManifestItem("images/b.pgm", "anns/b.txt", "test"),
        ]
        bins = ScaleBins(5.125, 49.75, 0.0, 12.345678901234567) if with_bins else None
        return Manifest(items=items, bins=bins)

    def test_round_trip(self, tmp_path):
        path = tmp_path / "manifest.json"
        m = self._sample()
        io_formats.save_manifest(path, m)
        back = io_formats.load_manifest(path)
        assert back.items == m.items
        assert back.bins == m.bins  # exact float round trip through JSON

    def test_round_trip_null_bins(self, tmp_path):
        path = tmp_path / "manifest.json"
        io_formats.save_manifest(path, self._sample(with_bins=False))
        assert io_formats.load_manifest(path).bins is None

    def test_bad_split_rejected(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(
            '{"items":[{"image":"a","ann":"b","split":"training"}],"bins":null}'
        )
        with pytest.raises(ManifestError, match="split"):
            io_formats.load_manifest(path)

    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text('{"items":[],"bins":null,"extra":1}')
        with pytest.raises(ManifestError):
            io_formats.load_manifest(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("{nope")
        with pytest.raises(ManifestError, match="JSON"):
            io_formats.load_manifest(path)

    def test_missing_file_validation(self, tmp_path):
        m = self._sample()
        with pytest.raises(ManifestError, match="a.pgm"):
            io_formats.validate_manifest_files(m, tmp_path)

    def test_split_selector(self):
        m = self._sample()
        assert [it.split for it in m.split_items("train")] == ["train"]

    def test_density_path_convention(self):
        item = ManifestItem("images/scene_007.pgm", "anns/scene_007.txt", "train")
        path = io_formats.density_path("/data/run", item)
        assert path.endswith("density/scene_007.dm")
