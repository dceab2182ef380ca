import struct
import zlib

import numpy as np
import pytest

from emergencynet.model import build_emergencynet, build_baseline
from emergencynet.weights_io import (
    DTYPE_F32,
    FORMAT_MAGIC,
    FORMAT_VERSION,
    WeightsFormatError,
    load_weights,
    save_weights,
)


def small_net(seed=0, **kw):
    return build_emergencynet(input_hw=(16, 16), seed=seed, **kw)


def u32(v):
    return struct.pack("<I", v)


def test_roundtrip_state_is_bitwise_identical(tmp_path):
    net = small_net(seed=7)
    path = tmp_path / "net.acff"
    save_weights(net, path)
    loaded = load_weights(path)
    a, b = net.state_dict(), loaded.state_dict()
    assert set(a) == set(b)
    for k in a:
        assert a[k].dtype == b[k].dtype
        assert np.array_equal(a[k], b[k]), k


def test_roundtrip_forward_is_bitwise_identical(tmp_path):
    net = small_net(seed=3, fusion="max")
    path = tmp_path / "net.acff"
    save_weights(net, path)
    loaded = load_weights(path)
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.random((2, 3, 16, 16), dtype=np.float32) * 255
        assert np.array_equal(net.forward(x), loaded.forward(x))


def test_config_travels_with_the_file(tmp_path):
    net = small_net(seed=1, fusion="concat", num_classes=7)
    path = tmp_path / "net.acff"
    save_weights(net, path)
    loaded = load_weights(path)
    assert loaded.config == net.config
    assert loaded.num_classes == 7
    assert loaded.input_hw == (16, 16)


def test_save_is_deterministic(tmp_path):
    net = small_net(seed=5)
    p1, p2 = tmp_path / "a.acff", tmp_path / "b.acff"
    save_weights(net, p1)
    save_weights(load_weights(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_baseline_graphs_roundtrip(tmp_path):
    for arch in ("standard", "depthwise-separable", "spatially-separable"):
        net = build_baseline(arch, input_hw=(16, 16), seed=2)
        path = tmp_path / f"{arch}.acff"
        save_weights(net, path)
        loaded = load_weights(path)
        x = np.random.default_rng(1).random((1, 3, 16, 16), dtype=np.float32)
        assert np.array_equal(net.forward(x), loaded.forward(x))


def test_file_layout_matches_the_documented_format(tmp_path):
    net = small_net(seed=0)
    path = tmp_path / "net.acff"
    save_weights(net, path)
    data = path.read_bytes()

    assert data[:4] == FORMAT_MAGIC == b"ACFF"
    assert struct.unpack("<I", data[4:8])[0] == FORMAT_VERSION

    (cfg_len,) = struct.unpack("<I", data[8:12])
    cfg = data[12 : 12 + cfg_len].decode("utf-8")
    lines = dict(line.split("=", 1) for line in cfg.split("\n"))
    assert lines["arch"] == "acff"
    assert lines["fusion"] == "add"
    assert lines["input_hw"] == "16x16"
    assert lines["channels"] == "16,64,96,128,128,128,256"

    # walk every record and land exactly on the trailing checksum
    state = net.state_dict()
    pos = 12 + cfg_len
    seen = []
    while pos < len(data) - 4:
        (name_len,) = struct.unpack("<I", data[pos : pos + 4])
        pos += 4
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, rank = struct.unpack("<II", data[pos : pos + 8])
        pos += 8
        dims = struct.unpack(f"<{rank}I", data[pos : pos + 4 * rank])
        pos += 4 * rank
        count = int(np.prod(dims)) if dims else 1
        payload = np.frombuffer(data[pos : pos + 4 * count], dtype="<f4").reshape(dims)
        pos += 4 * count
        assert code == DTYPE_F32
        assert np.array_equal(payload, state[name].astype(np.float32))
        seen.append(name)
    assert pos == len(data) - 4
    assert seen == list(state)

    (crc,) = struct.unpack("<I", data[-4:])
    assert crc == zlib.crc32(data[:-4]) & 0xFFFFFFFF


def test_every_corrupted_byte_is_detected(tmp_path):
    net = small_net(seed=9)
    path = tmp_path / "net.acff"
    save_weights(net, path)
    data = bytearray(path.read_bytes())
    rng = np.random.default_rng(0)
    for _ in range(12):
        i = int(rng.integers(4, len(data)))  # keep the magic intact
        bad = bytearray(data)
        bad[i] ^= 0xFF
        path.write_bytes(bytes(bad))
        with pytest.raises(WeightsFormatError):
            load_weights(path)


def test_truncated_files_are_rejected(tmp_path):
    net = small_net(seed=4)
    path = tmp_path / "net.acff"
    save_weights(net, path)
    data = path.read_bytes()
    for cut in (0, 3, 8, 40, len(data) // 2, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(WeightsFormatError):
            load_weights(path)


def test_bad_magic_is_rejected(tmp_path):
    path = tmp_path / "net.acff"
    body = b"JUNK" + b"\x00" * 64
    path.write_bytes(body + u32(zlib.crc32(body) & 0xFFFFFFFF))
    with pytest.raises(WeightsFormatError, match="magic"):
        load_weights(path)


def test_unknown_version_is_rejected(tmp_path):
    net = small_net(seed=0)
    path = tmp_path / "net.acff"
    save_weights(net, path)
    data = bytearray(path.read_bytes()[:-4])
    data[4:8] = u32(99)
    path.write_bytes(bytes(data) + u32(zlib.crc32(bytes(data)) & 0xFFFFFFFF))
    with pytest.raises(WeightsFormatError, match="version"):
        load_weights(path)


def test_unknown_dtype_code_is_rejected(tmp_path):
    name = b"head.w"
    record = u32(len(name)) + name + u32(7) + u32(1) + u32(2) + b"\x00" * 8
    cfg = b"arch=acff"
    body = FORMAT_MAGIC + u32(FORMAT_VERSION) + u32(len(cfg)) + cfg + record
    path = tmp_path / "net.acff"
    path.write_bytes(body + u32(zlib.crc32(body) & 0xFFFFFFFF))
    with pytest.raises(WeightsFormatError, match="dtype"):
        load_weights(path)


def test_missing_records_fail_state_validation(tmp_path):
    net = small_net(seed=0)
    path = tmp_path / "net.acff"
    save_weights(net, path)
    data = path.read_bytes()[:-4]
    # rebuild the file without the head records, checksum intact
    cut = data.rfind(b"head.w") - 4  # back over the name length prefix
    body = data[:cut]
    path.write_bytes(body + u32(zlib.crc32(body) & 0xFFFFFFFF))
    with pytest.raises(ValueError, match="state mismatch"):
        load_weights(path)


def test_double_precision_graphs_store_float32(tmp_path):
    net = small_net(seed=6).astype(np.float64)
    path = tmp_path / "net.acff"
    save_weights(net, path)
    loaded = load_weights(path)
    a, b = net.state_dict(), loaded.state_dict()
    for k in a:
        assert b[k].dtype == np.float32
        assert np.array_equal(a[k].astype(np.float32), b[k]), k


def test_no_temp_file_left_behind(tmp_path):
    net = small_net(seed=0)
    save_weights(net, tmp_path / "net.acff")
    assert [p.name for p in tmp_path.iterdir()] == ["net.acff"]


def test_load_into_double_precision(tmp_path):
    net = small_net(seed=2)
    path = tmp_path / "net.acff"
    save_weights(net, path)
    loaded = load_weights(path, dtype=np.float64)
    assert loaded.dtype == np.float64
    for k, v in loaded.state_dict().items():
        assert v.dtype == np.float64, k
