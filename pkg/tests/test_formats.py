import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nodulemtl import formats
from nodulemtl.formats import Checkpoint, CheckpointError, decode_checkpoint, encode_checkpoint


def sample_checkpoint(rng=None) -> Checkpoint:
    rng = rng or np.random.default_rng(0)
    return Checkpoint(config={"b": [1, 2], "a": 0.5},
                      tensors={"w": rng.normal(size=(2, 3)).astype(np.float32),
                               "scalar": np.array(1.5, dtype=np.float32)},
                      step=7)


def test_checkpoint_round_trip():
    ck = sample_checkpoint()
    back = decode_checkpoint(encode_checkpoint(ck))
    assert back.config == ck.config and back.step == 7
    assert list(back.tensors) == list(ck.tensors)
    for k in ck.tensors:
        assert back.tensors[k].shape == ck.tensors[k].shape
        assert np.array_equal(back.tensors[k], ck.tensors[k])


def test_config_is_canonical():
    a = Checkpoint({"x": 1, "y": 2}, {}, 0)
    b = Checkpoint({"y": 2, "x": 1}, {}, 0)
    assert encode_checkpoint(a) == encode_checkpoint(b)


def test_header_layout():
    buf = encode_checkpoint(Checkpoint({}, {}, 3))
    assert buf.startswith(b"NKCKPT1")
    version, step, n = struct.unpack_from("<IQI", buf, 7)
    assert (version, step, n) == (1, 3, 2) and buf[23:25] == b"{}"


@pytest.mark.parametrize("cut", [0, 5, 10, 20, 30, -3, -1])
def test_truncation_detected(cut):
    buf = encode_checkpoint(sample_checkpoint())
    with pytest.raises(formats.FormatError):
        decode_checkpoint(buf[:cut])


def test_trailing_bytes_rejected():
    with pytest.raises(formats.FormatError):
        decode_checkpoint(encode_checkpoint(sample_checkpoint()) + b"\0")


def test_unknown_version():
    buf = bytearray(encode_checkpoint(sample_checkpoint()))
    buf[7:11] = struct.pack("<I", 99)
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(bytes(buf))


def test_bad_magic():
    with pytest.raises(formats.BadMagicError):
        decode_checkpoint(b"NKVOL1" + bytes(40))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 2 ** 63))
def test_fuzzed_checkpoint_bytes_stable(seed, step):
    rng = np.random.default_rng(seed)
    tensors = {f"t{i}": rng.normal(size=tuple(rng.integers(1, 4, size=rng.integers(0, 4)))).astype(np.float32)
               for i in range(rng.integers(0, 5))}
    buf = encode_checkpoint(Checkpoint({"seed": seed}, tensors, step))
    assert encode_checkpoint(decode_checkpoint(buf)) == buf


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_fuzzed_volume_bytes_stable(seed):
    rng = np.random.default_rng(seed)
    vox = rng.normal(scale=500, size=tuple(rng.integers(1, 6, size=3)))
    buf = formats.encode_volume(vox, rng.uniform(0.1, 3, size=3))
    again = formats.encode_volume(*formats.decode_volume(buf))
    assert again == buf
