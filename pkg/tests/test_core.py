import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidshadow.core import (
    ExposureParams,
    FlowField,
    FormatError,
    Frame,
    Mask,
    ValidationError,
    load_frame,
    quantize_frame,
    read_exposure,
    read_flow,
    save_frame,
    write_exposure,
    write_flow,
)


class TestFrameType:
    def test_rejects_bad_shape(self):
        with pytest.raises(ValidationError):
            Frame(np.zeros((1, 16, 16)))

    def test_rejects_odd_dims(self):
        with pytest.raises(ValidationError):
            Frame(np.zeros((3, 15, 16)))

    def test_rejects_small_dims(self):
        with pytest.raises(ValidationError):
            Frame(np.zeros((3, 6, 16)))

    def test_rejects_out_of_range(self):
        data = np.zeros((3, 16, 16))
        data[0, 0, 0] = 1.5
        with pytest.raises(ValidationError):
            Frame(data)

    def test_rejects_nan(self):
        data = np.zeros((3, 16, 16))
        data[1, 2, 3] = np.nan
        with pytest.raises(ValidationError):
            Frame(data)

    def test_immutable(self):
        f = Frame(np.zeros((3, 16, 16)))
        with pytest.raises(ValueError):
            f.data[0, 0, 0] = 1.0


class TestFlowFieldType:
    def test_rejects_oversized_displacement(self):
        data = np.zeros((2, 16, 16))
        data[0, 0, 0] = 16.0
        with pytest.raises(ValidationError):
            FlowField(data)

    def test_accepts_negative_flow(self):
        data = np.zeros((2, 16, 16))
        data[0] = -3.5
        FlowField(data)


class TestExposureParamsType:
    def test_rejects_non_square_count(self):
        patches = tuple({"w": [1, 1, 1], "b": [0, 0, 0]} for _ in range(3))
        with pytest.raises(ValidationError):
            ExposureParams(patches)

    def test_rejects_nonpositive_w(self):
        with pytest.raises(ValidationError):
            ExposureParams(({"w": [0.0, 1, 1], "b": [0, 0, 0]},))

    def test_identity_roundtrip_arrays(self):
        p = ExposureParams.identity(2)
        w, b = p.as_arrays()
        assert w.shape == (4, 3) and np.all(w == 1.0) and np.all(b == 0.0)


class TestFramePng:
    def test_byte_255_maps_to_one(self, tmp_path):
        f = Frame(np.ones((3, 8, 8), dtype=np.float32))
        save_frame(f, tmp_path / "a.png")
        loaded = load_frame(tmp_path / "a.png")
        assert loaded.data.max() == 1.0 and loaded.data.min() == 1.0

    def test_byte_0_maps_to_zero(self, tmp_path):
        f = Frame(np.zeros((3, 8, 8), dtype=np.float32))
        save_frame(f, tmp_path / "a.png")
        assert load_frame(tmp_path / "a.png").data.max() == 0.0

    def test_round_half_up(self, tmp_path):
        # 0.5 * 255 = 127.5 rounds up to 128
        f = Frame(np.full((3, 8, 8), 0.5, dtype=np.float32))
        save_frame(f, tmp_path / "a.png")
        loaded = load_frame(tmp_path / "a.png")
        assert np.allclose(loaded.data, 128 / 255)

    def test_roundtrip_on_lattice_is_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        f = quantize_frame(Frame(rng.random((3, 16, 16)).astype(np.float32)))
        save_frame(f, tmp_path / "a.png")
        loaded = load_frame(tmp_path / "a.png")
        assert np.array_equal(loaded.data, f.data)

    def test_load_save_load_idempotent(self, tmp_path):
        rng = np.random.default_rng(1)
        save_frame(Frame(rng.random((3, 16, 16)).astype(np.float32)), tmp_path / "a.png")
        first = load_frame(tmp_path / "a.png")
        save_frame(first, tmp_path / "b.png")
        second = load_frame(tmp_path / "b.png")
        assert np.array_equal(first.data, second.data)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_frame(tmp_path / "nope.png")

    def test_non_rgb_rejected_naming_mode(self, tmp_path):
        from PIL import Image

        Image.new("L", (8, 8)).save(tmp_path / "gray.png")
        with pytest.raises(FormatError, match="mode 'L'"):
            load_frame(tmp_path / "gray.png")

    def test_rgba_rejected(self, tmp_path):
        from PIL import Image

        Image.new("RGBA", (8, 8)).save(tmp_path / "rgba.png")
        with pytest.raises(FormatError, match="RGBA"):
            load_frame(tmp_path / "rgba.png")


class TestFlowIO:
    def test_zero_flow_roundtrip(self, tmp_path):
        flow = FlowField(np.zeros((2, 12, 10), dtype=np.float32))
        write_flow(flow, tmp_path / "f.flo2")
        back = read_flow(tmp_path / "f.flo2")
        assert np.array_equal(back.data, flow.data)

    def test_fractional_flow_exact(self, tmp_path):
        data = np.empty((2, 8, 8), dtype=np.float32)
        data[0], data[1] = 1.5, -2.25  # exact in float32
        write_flow(FlowField(data), tmp_path / "f.flo2")
        back = read_flow(tmp_path / "f.flo2")
        assert np.array_equal(back.data, data)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "f.flo2").write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            read_flow(tmp_path / "f.flo2")

    def test_truncated_file(self, tmp_path):
        flow = FlowField(np.ones((2, 8, 8), dtype=np.float32))
        write_flow(flow, tmp_path / "f.flo2")
        raw = (tmp_path / "f.flo2").read_bytes()
        (tmp_path / "cut.flo2").write_bytes(raw[:-7])
        with pytest.raises(FormatError, match="size mismatch"):
            read_flow(tmp_path / "cut.flo2")

    def test_header_size_mismatch(self, tmp_path):
        import struct

        payload = b"FLO2" + struct.pack("<II", 100, 100) + b"\x00" * 64
        (tmp_path / "f.flo2").write_bytes(payload)
        with pytest.raises(FormatError, match="size mismatch"):
            read_flow(tmp_path / "f.flo2")

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_random_flow_roundtrip(self, seed):
        import tempfile
        from pathlib import Path

        rng = np.random.default_rng(seed)
        data = (rng.random((2, 8, 8)) * 6 - 3).astype(np.float32)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "f.flo2"
            write_flow(FlowField(data), path)
            assert np.array_equal(read_flow(path).data, data)


class TestExposureIO:
    def test_identity_roundtrip(self, tmp_path):
        p = ExposureParams.identity(2)
        write_exposure(p, tmp_path / "e.json")
        back = read_exposure(tmp_path / "e.json")
        w1, b1 = p.as_arrays()
        w2, b2 = back.as_arrays()
        assert np.array_equal(w1, w2) and np.array_equal(b1, b2)

    def test_single_patch_grid_one(self, tmp_path):
        p = ExposureParams.identity(1)
        write_exposure(p, tmp_path / "e.json")
        assert read_exposure(tmp_path / "e.json").n_patches == 1

    def test_wrong_patch_count(self, tmp_path):
        import json

        doc = {"grid": 2, "patches": [{"w": [1, 1, 1], "b": [0, 0, 0]}] * 3}
        (tmp_path / "e.json").write_text(json.dumps(doc))
        with pytest.raises(ValidationError, match="3 patches"):
            read_exposure(tmp_path / "e.json")

    def test_full_precision_roundtrip(self, tmp_path):
        w = np.array([[1.2345678912345, 2.0, 1.5]] * 4)
        b = np.array([[0.0000012345678, -0.05, 0.01]] * 4)
        p = ExposureParams.from_arrays(w, b)
        write_exposure(p, tmp_path / "e.json")
        back = read_exposure(tmp_path / "e.json")
        w2, b2 = back.as_arrays()
        assert np.array_equal(w2, w) and np.array_equal(b2, b)
