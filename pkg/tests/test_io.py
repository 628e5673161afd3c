import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from moce.io import (
    BadMagicError, Checkpoint, ChecksumError, Dataset, FormatError, TruncatedFileError,
    VersionSkewError, checkpoint_bytes, dataset_bytes, load_checkpoint, parse_checkpoint,
    parse_dataset, read_dataset, save_checkpoint, write_dataset,
)


def _dataset(n=3, h=2, w=3, c=3, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.integers(0, 256, (n, h, w, c), dtype=np.uint8),
                   rng.integers(0, 300, n), rng.integers(0, 2, n))


def _checkpoint():
    rng = np.random.default_rng(1)
    return Checkpoint({"model": {"embed_dim": 4}, "note": "é"},
                      {"encoder.block0.mlp.w1": rng.normal(size=(4, 8)).astype(np.float32),
                       "scalar": np.array(2.5, dtype=np.float32),
                       "b": rng.normal(size=3).astype(np.float32)})


def test_dataset_layout_matches_hand_packed_bytes():
    ds = _dataset(n=2, h=1, w=2, c=1)
    expect = b"MOCD" + struct.pack("<HIHHH", 1, 2, 1, 2, 1)
    for i in range(2):
        expect += struct.pack("<HB", ds.labels[i], ds.domains[i]) + ds.images[i].tobytes()
    assert dataset_bytes(ds) == expect
    assert len(expect) == 16 + 2 * (3 + 2)


def test_dataset_round_trip(tmp_path):
    ds = _dataset()
    write_dataset(tmp_path / "d.bin", ds)
    back = read_dataset(tmp_path / "d.bin")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.domains, ds.domains)
    assert back.float_images().max() <= 1.0


def test_dataset_rejections():
    raw = dataset_bytes(_dataset())
    with pytest.raises(BadMagicError):
        parse_dataset(b"XXXX" + raw[4:])
    with pytest.raises(VersionSkewError):
        parse_dataset(raw[:4] + struct.pack("<H", 9999) + raw[6:])
    with pytest.raises(TruncatedFileError):
        parse_dataset(raw[:-1])
    with pytest.raises(TruncatedFileError):
        parse_dataset(raw[:5])
    with pytest.raises(FormatError):
        parse_dataset(raw + b"\0")


def test_checkpoint_layout_matches_hand_packed_bytes():
    ck = Checkpoint({"a": 1}, {"w": np.array([[1.0, 2.0]], dtype=np.float32)})
    blob = json.dumps({"a": 1}).encode()
    body = (b"MOCE" + struct.pack("<HI", 1, len(blob)) + blob + struct.pack("<H", 1) + b"w"
            + struct.pack("<BII", 2, 1, 2) + struct.pack("<2f", 1.0, 2.0))
    assert checkpoint_bytes(ck) == body + struct.pack("<I", zlib.crc32(body))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ck = _checkpoint()
    save_checkpoint(tmp_path / "c.bin", ck)
    back = load_checkpoint(tmp_path / "c.bin")
    assert back == ck
    for k, v in ck.tensors.items():
        assert back.tensors[k].tobytes() == v.tobytes()
        assert back.tensors[k].shape == v.shape
    assert not list(tmp_path.glob(".tmp-*"))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                  elements=st.floats(width=32, allow_nan=False)))
def test_checkpoint_round_trip_property(arr):
    ck = Checkpoint({"k": [1, 2]}, {"t": arr})
    back = parse_checkpoint(checkpoint_bytes(ck))
    assert back.tensors["t"].tobytes() == arr.tobytes()


def test_every_payload_byte_flip_is_caught():
    raw = bytearray(checkpoint_bytes(_checkpoint()))
    cfg_len = struct.unpack_from("<I", raw, 6)[0]
    for pos in range(10 + cfg_len, len(raw) - 4):
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        with pytest.raises(FormatError):
            parse_checkpoint(bytes(bad))


def test_checkpoint_error_kinds_are_distinct():
    raw = checkpoint_bytes(_checkpoint())
    bad = bytearray(raw)
    bad[-10] ^= 0xFF  # inside the last tensor's payload
    with pytest.raises(ChecksumError):
        parse_checkpoint(bytes(bad))
    with pytest.raises(TruncatedFileError):
        parse_checkpoint(raw[:-7])
    with pytest.raises(VersionSkewError):
        parse_checkpoint(raw[:4] + struct.pack("<H", 9999) + raw[6:])
    with pytest.raises(BadMagicError):
        parse_checkpoint(b"MOCD" + raw[4:])
    assert len({ChecksumError, TruncatedFileError, VersionSkewError}) == 3


def test_version_skew_leaves_no_partial_state(tmp_path):
    raw = checkpoint_bytes(_checkpoint())
    p = tmp_path / "c.bin"
    p.write_bytes(raw[:4] + struct.pack("<H", 9999) + raw[6:])
    result = None
    with pytest.raises(VersionSkewError):
        result = load_checkpoint(p)
    assert result is None
