import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spheremorph.fields import DeformationField, FeatureMap, LabelMap, VelocityField
from spheremorph.grid import make_grid
from spheremorph.io import (MAGIC, ConfigError, FormatError, MapKind, atomic_write_bytes, config_hash,
                            decode_map, decode_tensors, encode_map, encode_tensors, load_run_config,
                            parse_run_config, provenance, read_map, read_map_kind, read_tensors,
                            read_text_matrix, write_map, write_provenance, write_tensors)

HEADER = 4 + 2 + 1 + 2 + 4 + 4


def _f32(rng, shape, scale=1.0, shift=0.0):
    """Random values that float32 represents exactly."""
    x = rng.standard_normal(shape) * scale
    if shift:
        x = np.abs(x) + shift
    return x.astype(np.float32).astype(np.float64)


def _payload(buf):
    return buf[HEADER:-4]


@pytest.fixture
def maps(grid8, rng):
    g = grid8
    return {
        MapKind.FEATURE: FeatureMap(g, _f32(rng, (3, 8, 16))),
        MapKind.LABEL: LabelMap(g, rng.integers(0, 40, size=(8, 16))),
        MapKind.VELOCITY: VelocityField(g, _f32(rng, (2, 8, 16), 0.1)),
        MapKind.DEFORMATION: DeformationField(g, _f32(rng, (2, 8, 16), 0.1)),
        MapKind.VARIANCE: FeatureMap(g, _f32(rng, (1, 8, 16), shift=0.5)),
    }


def _array(obj):
    return obj.labels if isinstance(obj, LabelMap) else obj.data


class TestMapRoundTrip:
    @pytest.mark.parametrize("kind", list(MapKind))
    def test_bit_exact(self, tmp_path, maps, kind):
        obj = maps[kind]
        p = write_map(obj, tmp_path / "m.smgm", kind)
        back = read_map(p, kind)
        assert type(back) is type(obj)
        assert back.grid.shape == obj.grid.shape
        np.testing.assert_array_equal(_array(back), _array(obj))
        assert read_map_kind(p) == kind
        # re-encoding reproduces the file byte for byte
        assert encode_map(back, kind) == p.read_bytes()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.sampled_from([(4, 8), (5, 12), (6, 6)]), st.integers(0, 2**31 - 1))
    def test_feature_property(self, channels, shape, seed):
        g = make_grid(*shape)
        rng = np.random.default_rng(seed)
        obj = FeatureMap(g, _f32(rng, (channels,) + shape))
        kind, back = decode_map(encode_map(obj))
        assert kind == MapKind.FEATURE
        np.testing.assert_array_equal(back.data, obj.data)

    def test_layout(self, grid8, maps):
        buf = encode_map(maps[MapKind.FEATURE])
        magic, version, kind, channels, M, N = struct.unpack_from("<4sHBHII", buf)
        assert (magic, version, kind, channels, M, N) == (MAGIC, 1, 0, 3, 8, 16)
        assert len(_payload(buf)) == 3 * 8 * 16 * 4
        # channel-major, then latitude-major
        first = np.frombuffer(_payload(buf)[:16 * 4], dtype="<f4")
        np.testing.assert_array_equal(first, maps[MapKind.FEATURE].data[0, 0])

    def test_label_payload_is_u32(self, maps):
        buf = encode_map(maps[MapKind.LABEL])
        lab = np.frombuffer(_payload(buf), dtype="<u4").reshape(8, 16)
        np.testing.assert_array_equal(lab, maps[MapKind.LABEL].labels)

    def test_variance_requires_feature(self, maps):
        with pytest.raises(TypeError):
            encode_map(maps[MapKind.LABEL], "variance")
        with pytest.raises(TypeError):
            encode_map(maps[MapKind.FEATURE], "velocity")


class TestMapErrors:
    def test_channel_payload_mismatch(self, grid8, rng):
        # header claims two feature channels but only one channel of payload follows
        one = encode_map(FeatureMap(grid8, _f32(rng, (1, 8, 16))))
        bad = one[:7] + struct.pack("<H", 2) + one[9:]
        with pytest.raises(FormatError, match="payload"):
            decode_map(bad)

    def test_velocity_channel_count(self, maps):
        buf = bytearray(encode_map(maps[MapKind.FEATURE]))
        buf[6] = int(MapKind.VELOCITY)
        with pytest.raises(FormatError, match="channels"):
            decode_map(bytes(buf))

    def test_flipped_byte_crc(self, maps):
        buf = bytearray(encode_map(maps[MapKind.FEATURE]))
        buf[HEADER + 17] ^= 0x01
        with pytest.raises(FormatError, match="CRC"):
            decode_map(bytes(buf))

    def test_bad_magic(self, maps):
        buf = b"XXXX" + encode_map(maps[MapKind.FEATURE])[4:]
        with pytest.raises(FormatError, match="magic"):
            decode_map(buf)

    def test_bad_version(self, maps):
        buf = encode_map(maps[MapKind.FEATURE])
        buf = buf[:4] + struct.pack("<H", 99) + buf[6:]
        with pytest.raises(FormatError, match="version"):
            decode_map(buf)

    def test_unknown_kind(self, maps):
        buf = bytearray(encode_map(maps[MapKind.FEATURE]))
        buf[6] = 17
        with pytest.raises(FormatError, match="kind"):
            decode_map(bytes(buf))

    @pytest.mark.parametrize("cut", [3, 20, 100])
    def test_truncation(self, maps, cut):
        buf = encode_map(maps[MapKind.FEATURE])
        with pytest.raises(FormatError):
            decode_map(buf[:cut] if cut < HEADER else buf[:-cut])

    def test_expected_kind(self, tmp_path, maps):
        p = write_map(maps[MapKind.LABEL], tmp_path / "l.smgm")
        with pytest.raises(FormatError, match="expected a feature map"):
            read_map(p, "feature")

    def test_invalid_grid_in_header(self, maps):
        buf = encode_map(maps[MapKind.FEATURE])
        # 3 x 8 x 16 cells reinterpreted as a 384 x 1 grid keeps the payload length valid
        bad = buf[:9] + struct.pack("<II", 384, 1) + buf[17:]
        with pytest.raises(FormatError):
            decode_map(bad)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_map(tmp_path / "nope.smgm")

    def test_kind_of_non_map(self, tmp_path):
        with pytest.raises(FormatError):
            (tmp_path / "x").write_bytes(b"hello world, not a map at all")
            read_map_kind(tmp_path / "x")


class TestTensorBundle:
    def test_round_trip(self, tmp_path, rng):
        tensors = {"w0": rng.standard_normal((3, 3, 2, 4)), "b0": rng.standard_normal(4),
                   "scalar": np.array(2.5)}
        meta = {"config": {"lam": 3e4}, "channels": [16, 32, 32, 32]}
        p = write_tensors(tmp_path / "t.smtb", tensors, meta)
        back, m = read_tensors(p)
        assert m == meta
        assert set(back) == set(tensors)
        for k in tensors:
            assert back[k].dtype == np.float64
            np.testing.assert_array_equal(back[k], tensors[k])

    def test_deterministic_bytes(self, rng):
        t = {"b": rng.standard_normal(3), "a": rng.standard_normal((2, 2))}
        assert encode_tensors(t, {"x": 1}) == encode_tensors(dict(reversed(t.items())), {"x": 1})

    def test_corruption(self, rng):
        buf = bytearray(encode_tensors({"a": rng.standard_normal(5)}))
        buf[20] ^= 0xFF
        with pytest.raises(FormatError, match="CRC"):
            decode_tensors(bytes(buf))
        with pytest.raises(FormatError):
            decode_tensors(b"SMGM" + bytes(20))
        with pytest.raises(FormatError):
            decode_tensors(encode_tensors({"a": np.ones(3)})[:-9])


class TestRunConfig:
    def test_valid(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"lambda": 1e3, "iters": 50, "seed": 3, "out": "x", "epochs": 5}))
        cfg, run = load_run_config(p)
        assert cfg.lam == 1e3 and cfg.iters == 50 and cfg.seed == 3
        assert run == {"out": "x", "epochs": 5}

    @pytest.mark.parametrize("obj", [{"lamda": 1.0}, {"lambda": -1.0}, {"steps": 0}, {"mode": "fast"},
                                     {"iters": 2.5}, {"channels": [1, 2, 3]}, {"rigid": "yes"}])
    def test_rejected(self, obj):
        with pytest.raises(ConfigError):
            parse_run_config(obj)

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_run_config(p)


class TestConverterStub:
    def test_feature_matrix(self, tmp_path, rng):
        arr = rng.standard_normal((4, 8))
        p = tmp_path / "m.txt"
        np.savetxt(p, arr, fmt="%.17g")
        f = read_text_matrix(p)
        assert f.grid.shape == (4, 8)
        np.testing.assert_array_equal(f.data[0], arr)

    def test_label_matrix(self, tmp_path):
        p = tmp_path / "l.txt"
        p.write_text("0 1 1 2\n2 2 1 0\n")
        lab = read_text_matrix(p, "label")
        np.testing.assert_array_equal(lab.labels, [[0, 1, 1, 2], [2, 2, 1, 0]])
        p.write_text("0 1.5 1 2\n2 2 1 0\n")
        with pytest.raises(FormatError):
            read_text_matrix(p, "label")


class TestProvenanceAndAtomicity:
    def test_sidecar(self, tmp_path):
        p = atomic_write_bytes(tmp_path / "out.bin", b"abc")
        info = provenance(["spheremorph", "synth"], {"a": 1}, 7)
        side = write_provenance(p, info)
        assert side.name == "out.bin.prov.json"
        d = json.loads(side.read_text())
        assert d["seed"] == 7 and d["command"] == ["spheremorph", "synth"]
        assert d["config_sha256"] == config_hash({"a": 1})
        assert set(d["versions"]) >= {"spheremorph", "numpy", "scipy", "python"}
        assert d["sha256"] == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"

    def test_config_hash_key_order(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})

    def test_atomic_replace_leaves_no_temp(self, tmp_path):
        p = tmp_path / "sub" / "f.bin"
        atomic_write_bytes(p, b"one")
        atomic_write_bytes(p, b"two")
        assert p.read_bytes() == b"two"
        assert [q.name for q in p.parent.iterdir()] == ["f.bin"]

    def test_failed_write_keeps_old_file(self, tmp_path, monkeypatch):
        p = atomic_write_bytes(tmp_path / "f.bin", b"old")

        def boom(*a, **k):
            raise OSError("disk full")

        monkeypatch.setattr("spheremorph.io.os.replace", boom)
        with pytest.raises(OSError):
            atomic_write_bytes(p, b"new")
        assert p.read_bytes() == b"old"
        assert [q.name for q in tmp_path.iterdir()] == ["f.bin"]
