import struct

import numpy as np
import pytest

from ifgan import checkpoint as ckpt
from ifgan.training import FoldData, Trainer


@pytest.fixture
def trained(prepared, tiny_config):
    tr = Trainer(tiny_config, FoldData(prepared, tiny_config))
    tr.train(2)
    return tr


def test_round_trip_is_byte_identical(tmp_path, trained, tiny_config):
    data = ckpt.save(tmp_path / "a.ifg", tiny_config, trained.models, trained.opts, trained.step)
    assert data[:4] == b"IFG1" and struct.unpack("<I", data[4:8])[0] == ckpt.FORMAT_VERSION
    cfg, models, opts, step = ckpt.to_training(ckpt.load(tmp_path / "a.ifg"))
    again = ckpt.save(tmp_path / "b.ifg", cfg, models, opts, step)
    assert again == data and step == 2 and cfg == tiny_config


def test_restored_state_matches(tmp_path, trained, tiny_config):
    ckpt.save(tmp_path / "a.ifg", tiny_config, trained.models, trained.opts, trained.step)
    _, models, opts, _ = ckpt.to_training(ckpt.load(tmp_path / "a.ifg"))
    for a, b in ((trained.models.g, models.g), (trained.models.d, models.d), (trained.models.e, models.e)):
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)
    for name, rs in trained.models.e_buffers.items():
        np.testing.assert_array_equal(rs.mean, models.e_buffers[name].mean)
        np.testing.assert_array_equal(rs.var, models.e_buffers[name].var)
    assert opts.e.state.step == trained.opts.e.state.step
    for name, m in trained.opts.g.state.m.items():
        np.testing.assert_array_equal(m, opts.g.state.m[name])


def test_corruption_is_rejected(trained, tiny_config):
    data = bytearray(ckpt.encode(ckpt.from_training(tiny_config, trained.models, trained.opts, 2)))
    data[len(data) // 2] ^= 0x01
    with pytest.raises(ckpt.CheckpointError, match="checksum"):
        ckpt.decode(bytes(data))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.decode(bytes(data[:100]))
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.decode(b"XXXX" + bytes(data[4:]))


def test_version_mismatch_names_both_versions(trained, tiny_config):
    import zlib

    data = ckpt.encode(ckpt.from_training(tiny_config, trained.models, trained.opts, 2))
    body = data[:4] + struct.pack("<I", 9) + data[8:-4]
    forged = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    with pytest.raises(ckpt.CheckpointError) as info:
        ckpt.decode(forged)
    assert "9" in str(info.value) and str(ckpt.FORMAT_VERSION) in str(info.value)


def test_missing_file(tmp_path):
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load(tmp_path / "nope.ifg")
