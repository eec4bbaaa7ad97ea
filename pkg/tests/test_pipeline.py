import struct

import numpy as np
import pytest

from fpstain import optics, pipeline
from fpstain.errors import (
    ConfigurationError,
    ConsistencyError,
    EmptyInputError,
    FormatError,
    RangeError,
    SizeError,
)


class TestTiling:
    def test_exact_fit_single_tile(self):
        img = np.arange(512 * 512, dtype=np.uint8).reshape(512, 512)
        ts = pipeline.tile_image(img, 512)
        assert len(ts.tiles) == 1
        assert ts.tiles[0].origin == (0, 0)
        assert np.array_equal(ts.tiles[0].image, img)

    def test_grid_arithmetic(self):
        img = np.zeros((1024, 1536), np.uint8)
        ts = pipeline.tile_image(img, 512)
        assert len(ts.tiles) == 6
        origins = {t.origin for t in ts.tiles}
        assert origins == {(r, c) for r in (0, 512) for c in (0, 512, 1024)}

    def test_trailing_margins_dropped(self):
        img = np.zeros((1000, 1000), np.uint8)
        ts = pipeline.tile_image(img, 512)
        assert len(ts.tiles) == 1

    def test_too_small_image(self):
        with pytest.raises(SizeError):
            pipeline.tile_image(np.zeros((100, 700), np.uint8), 512)

    def test_tile_size_floor(self):
        with pytest.raises(ConfigurationError):
            pipeline.tile_image(np.zeros((128, 128), np.uint8), 32)

    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(0)
        for shape in ((128, 128), (128, 256), (192, 128, 3)):
            img = rng.integers(0, 256, shape).astype(np.uint8)
            out = pipeline.stitch_tiles(pipeline.tile_image(img, 64))
            assert np.array_equal(out, img)

    def test_single_tile_identity(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, (64, 64)).astype(np.uint8)
        assert np.array_equal(pipeline.stitch_tiles(pipeline.tile_image(img, 64)), img)

    def test_block_structure_of_distinct_tiles(self):
        blocks = np.array([[10, 20, 30], [40, 50, 60]], np.uint8)
        img = np.kron(blocks, np.ones((64, 64), np.uint8))
        ts = pipeline.tile_image(img, 64)
        out = pipeline.stitch_tiles(ts)
        for r in range(2):
            for c in range(3):
                assert np.all(out[r * 64 : (r + 1) * 64, c * 64 : (c + 1) * 64] == blocks[r, c])

    def test_stitch_rejects_duplicates_and_gaps(self):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, (128, 128)).astype(np.uint8)
        ts = pipeline.tile_image(img, 64)
        dup = pipeline.TileSet([ts.tiles[0], ts.tiles[0], ts.tiles[1], ts.tiles[2]], 64, (128, 128))
        with pytest.raises(ConsistencyError):
            pipeline.stitch_tiles(dup)
        gap = pipeline.TileSet(ts.tiles[:3], 64, (128, 128))
        with pytest.raises(ConsistencyError):
            pipeline.stitch_tiles(gap)

    def test_stitch_rejects_off_grid_origin(self):
        tile = pipeline.Tile(np.zeros((64, 64), np.uint8), (13, 0))
        with pytest.raises(ConsistencyError):
            pipeline.stitch_tiles(pipeline.TileSet([tile], 64, (64, 64)))


class TestCfld:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        real = rng.standard_normal((64, 64)).astype(np.float32)
        imag = rng.standard_normal((64, 64)).astype(np.float32)
        real[0, 0] = -0.0  # signed zero must survive
        fld = optics.ComplexField(real.astype(np.float64) + 1j * imag.astype(np.float64),
                                  0.40625, 0.532)
        path = tmp_path / "f.cfld"
        pipeline.write_cfld(fld, path)
        back = pipeline.read_cfld(path)
        assert np.array_equal(back.data.real.astype(np.float32), real)
        assert np.array_equal(back.data.imag.astype(np.float32), imag)
        assert np.signbit(back.data.real[0, 0])
        assert back.pixel_pitch == fld.pixel_pitch
        assert back.wavelength == fld.wavelength
        # write-read-write gives identical bytes
        path2 = tmp_path / "g.cfld"
        pipeline.write_cfld(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic_names_offset_zero(self, tmp_path):
        path = tmp_path / "bad.cfld"
        path.write_bytes(b"XXXX" + b"\0" * 64)
        with pytest.raises(FormatError, match="offset 0"):
            pipeline.read_cfld(path)

    def test_channel_count_truncation(self, tmp_path):
        # header says 4 channels, payload only holds 1
        path = tmp_path / "trunc.cfld"
        header = b"CFD1" + struct.pack("<IIIdd", 8, 8, 4, 1.0, 0.5)
        payload = np.zeros(8 * 8 * 2, dtype="<f4").tobytes()
        path.write_bytes(header + payload)
        with pytest.raises(FormatError, match="truncated"):
            pipeline.read_cfld_channels(path)

    def test_multi_channel_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        fields = [
            optics.ComplexField(rng.standard_normal((16, 16)).astype(np.float32) + 0j, 1.0, 0.5)
            for _ in range(3)
        ]
        path = tmp_path / "multi.cfld"
        pipeline.write_cfld_channels(fields, path)
        back = pipeline.read_cfld_channels(path)
        assert len(back) == 3
        for src, dst in zip(fields, back):
            assert np.array_equal(src.data, dst.data)
        with pytest.raises(FormatError):
            pipeline.read_cfld(path)  # single-channel reader refuses 3 channels


class TestNormalization:
    def test_intensity_endpoints(self):
        out = pipeline.normalize_for_network(np.array([0.0, 255.0]), "intensity8")
        assert out[0] == -1.0 and out[1] == 1.0

    def test_phase_zero_maps_to_zero(self):
        assert pipeline.normalize_for_network(np.array([0.0]), "phase")[0] == 0.0

    def test_phase_range_error(self):
        with pytest.raises(RangeError):
            pipeline.normalize_for_network(np.array([3.5]), "phase")

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            pipeline.normalize_for_network(np.zeros(3), "weird")

    def test_intensity_round_trip_within_one_quantum(self):
        values = np.arange(256, dtype=np.float64)
        back = pipeline.denormalize_from_network(
            pipeline.normalize_for_network(values, "intensity8"), "intensity8"
        )
        assert np.max(np.abs(back - values)) < 1.0
        assert np.array_equal(pipeline.to_uint8(back), values.astype(np.uint8))

    def test_phase_round_trip_exact(self):
        rng = np.random.default_rng(0)
        phase = rng.uniform(-np.pi, np.pi, 100)
        back = pipeline.denormalize_from_network(
            pipeline.normalize_for_network(phase, "phase"), "phase"
        )
        assert np.max(np.abs(back - phase)) < 1e-15


class TestImages:
    def test_uint8_gray_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (32, 48)).astype(np.uint8)
        pipeline.save_image(img, tmp_path / "g.png")
        assert np.array_equal(pipeline.load_image(tmp_path / "g.png"), img)

    def test_uint8_rgb_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, (32, 48, 3)).astype(np.uint8)
        pipeline.save_image(img, tmp_path / "c.png")
        assert np.array_equal(pipeline.load_image(tmp_path / "c.png"), img)

    def test_uint16_gray_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 65536, (32, 48)).astype(np.uint16)
        pipeline.save_image(img, tmp_path / "d.png")
        back = pipeline.load_image(tmp_path / "d.png")
        assert back.dtype == np.uint16
        assert np.array_equal(back, img)

    def test_phase_mapping(self):
        out = pipeline.phase_to_uint8(np.array([-np.pi, 0.0, np.pi]))
        assert out[0] == 0 and out[1] == 128 and out[2] == 255


class TestStackPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        obj = optics.ComplexField(
            0.5 + 0.5 * rng.random((64, 64)) + 0j, 1.625 / 4, 0.532
        )
        geom = optics.grid_geometry(3, 3)
        pupil = optics.ideal_pupil((16, 16), 1.625, 0.1, 0.532)
        stack = optics.simulate_stack({"G": obj}, geom, pupil, ["G"])
        pipeline.save_stack(stack, tmp_path / "stack", geom.channel_wavelengths)
        back, wavelengths = pipeline.load_stack(tmp_path / "stack")
        assert len(back.captures) == 9
        assert back.capture_pitch == stack.capture_pitch
        assert back.objective_na == stack.objective_na
        assert wavelengths["G"] == 0.532
        for src, dst in zip(stack.captures, back.captures):
            assert dst.led_index == src.led_index
            assert dst.channel == src.channel
            assert dst.k_illum == pytest.approx(src.k_illum, rel=1e-15)
            # 16-bit quantization against the global scale
            peak = max(c.intensity.max() for c in stack.captures)
            assert np.max(np.abs(dst.intensity - src.intensity)) <= peak / 65535.0

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError):
            pipeline.load_stack(tmp_path)


class TestDatasetManifest:
    def _make_images(self, directory, names, channels):
        directory.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(0)
        for name in names:
            shape = (70, 70) if channels == 1 else (70, 70, 3)
            pipeline.save_image(rng.integers(0, 256, shape).astype(np.uint8), directory / name)

    def test_build_and_ordering(self, tmp_path):
        self._make_images(tmp_path / "a", ["b.png", "a.png", "c.png"], 1)
        self._make_images(tmp_path / "b", ["y.png", "x.png"], 3)
        manifest = pipeline.build_dataset(tmp_path / "a", tmp_path / "b")
        assert [p.name for p in manifest.domain_a_entries] == ["a.png", "b.png", "c.png"]
        assert manifest.domain_a_channels == 1
        assert manifest.domain_b_channels == 3
        assert len(manifest.domain_b_entries) == 2  # counts need not match

    def test_mixed_channels_named(self, tmp_path):
        self._make_images(tmp_path / "a", ["a.png", "b.png"], 1)
        self._make_images(tmp_path / "b", ["c.png"], 3)
        rng = np.random.default_rng(1)
        pipeline.save_image(
            rng.integers(0, 256, (70, 70, 3)).astype(np.uint8), tmp_path / "a" / "odd.png"
        )
        with pytest.raises(ConfigurationError, match="odd.png"):
            pipeline.build_dataset(tmp_path / "a", tmp_path / "b")

    def test_empty_directory(self, tmp_path):
        (tmp_path / "a").mkdir()
        self._make_images(tmp_path / "b", ["c.png"], 3)
        with pytest.raises(EmptyInputError):
            pipeline.build_dataset(tmp_path / "a", tmp_path / "b")

    def test_manifest_file_round_trip(self, tmp_path):
        self._make_images(tmp_path / "a", ["a.png"], 1)
        self._make_images(tmp_path / "b", ["b.png"], 3)
        manifest = pipeline.build_dataset(tmp_path / "a", tmp_path / "b")
        path = tmp_path / "manifest.txt"
        pipeline.write_manifest(manifest, path)
        text = path.read_text()
        assert "[domain_a]" in text and "[domain_b]" in text
        back = pipeline.load_manifest(path)
        assert [p.name for p in back.domain_a_entries] == ["a.png"]
        assert back.domain_b_channels == 3


class TestTilesetPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (128, 192, 3)).astype(np.uint8)
        ts = pipeline.tile_image(img, 64, "src")
        pipeline.save_tileset(ts, tmp_path / "tiles")
        back = pipeline.load_tileset(tmp_path / "tiles")
        assert back.tile_size == 64
        assert back.source_dims == (128, 192)
        assert np.array_equal(pipeline.stitch_tiles(back), img)


class TestAtomicWrite:
    def test_no_temp_files_left(self, tmp_path):
        pipeline.atomic_write_text(tmp_path / "x.txt", "hello")
        assert (tmp_path / "x.txt").read_text() == "hello"
        leftovers = [p for p in tmp_path.iterdir() if "tmp" in p.name]
        assert leftovers == []
