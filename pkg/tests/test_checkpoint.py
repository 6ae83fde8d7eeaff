import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cora_lab.adapter import init_adapter
from cora_lab.checkpoint import (
    MAGIC, BadMagicError, Checkpoint, CheckpointError, ShapeInconsistencyError, TruncatedPayloadError,
    VersionMismatchError, basis_to_checkpoint, checkpoint_stacked, checkpoint_to_basis, checkpoint_to_model,
    decode_checkpoint, encode_checkpoint, export_csv, matrix_to_checkpoint, model_to_checkpoint, read_checkpoint,
    stacked_to_checkpoint, write_checkpoint,
)
from cora_lab.extraction import StackedAttentionWeights, extract_common_basis_svd
from cora_lab.model import BASE_BLOCKS, ModelDims, forward, init_model


def small_model(adapter=True):
    m = init_model(ModelDims(vocab_size=6, d_model=4, d_k=5, seq_len=4, d_ff=3), 1)
    if adapter:
        m = m.with_adapter(init_adapter("ablate_random", m.w_qkv.shape, 2, 3, scale=0.5, b_frozen=True))
    return m


def test_model_round_trip_bit_exact(tmp_path):
    m = small_model()
    path = tmp_path / "m.ck"
    write_checkpoint(path, model_to_checkpoint(m, label="x", seed=3))
    back = checkpoint_to_model(read_checkpoint(path))
    for name in BASE_BLOCKS:
        assert np.array_equal(getattr(m, name), getattr(back, name))
    assert np.array_equal(m.adapter.b, back.adapter.b)
    assert back.adapter.descriptor() == m.adapter.descriptor()
    tok = np.array([[0, 1, 2, 3]])
    assert np.array_equal(forward(m, tok)[0], forward(back, tok)[0])


def test_layout():
    data = encode_checkpoint(matrix_to_checkpoint(np.array([[1.0, 2.0]])))
    assert data[:4] == MAGIC
    assert struct.unpack("<I", data[4:8])[0] == 1
    hlen = struct.unpack("<I", data[8:12])[0]
    tail = data[12 + hlen:]
    assert struct.unpack("<I", tail[:4])[0] == 2 and tail[4:6] == b"w0"
    assert struct.unpack("<II", tail[6:14]) == (1, 2)
    assert np.frombuffer(tail[14:], "<f8").tolist() == [1.0, 2.0]


def test_encoding_is_deterministic():
    m = small_model()
    assert encode_checkpoint(model_to_checkpoint(m)) == encode_checkpoint(model_to_checkpoint(m.copy()))


def test_bad_magic():
    data = encode_checkpoint(matrix_to_checkpoint(np.ones((2, 2))))
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"XXXX" + data[4:])


def test_version_mismatch():
    data = encode_checkpoint(matrix_to_checkpoint(np.ones((2, 2))))
    with pytest.raises(VersionMismatchError):
        decode_checkpoint(data[:4] + struct.pack("<I", 2) + data[8:])


def test_truncated_payload():
    data = encode_checkpoint(model_to_checkpoint(small_model()))
    for cut in (6, 20, len(data) - 1):
        with pytest.raises(TruncatedPayloadError):
            decode_checkpoint(data[:cut])


def test_trailing_bytes():
    data = encode_checkpoint(matrix_to_checkpoint(np.ones((2, 2))))
    with pytest.raises(ShapeInconsistencyError):
        decode_checkpoint(data + b"\0")


def test_block_shape_disagrees_with_header():
    ck = matrix_to_checkpoint(np.ones((2, 3)))
    data = bytearray(encode_checkpoint(ck))
    hlen = struct.unpack("<I", data[8:12])[0]
    off = 12 + hlen + 4 + 2
    data[off:off + 8] = struct.pack("<II", 3, 2)
    with pytest.raises(ShapeInconsistencyError):
        decode_checkpoint(bytes(data))


def test_model_dims_mismatch():
    ck = model_to_checkpoint(small_model(adapter=False))
    ck.dims = dict(ck.dims, d_model=5)
    with pytest.raises(ShapeInconsistencyError):
        decode_checkpoint(encode_checkpoint(ck))


def test_non_finite_rejected():
    with pytest.raises(CheckpointError):
        encode_checkpoint(matrix_to_checkpoint(np.array([[np.inf]])))


def test_kind_checks():
    ck = matrix_to_checkpoint(np.ones((3, 2)))
    with pytest.raises(CheckpointError):
        checkpoint_to_model(ck)
    with pytest.raises(CheckpointError):
        checkpoint_to_basis(ck)
    with pytest.raises(CheckpointError):
        checkpoint_stacked(Checkpoint("basis", {"b": np.ones((1, 2))}))


def test_basis_and_stacked_round_trip():
    w = np.random.default_rng(0).normal(size=(9, 4))
    basis = extract_common_basis_svd(w, 2)
    back = checkpoint_to_basis(decode_checkpoint(encode_checkpoint(basis_to_checkpoint(basis))))
    assert np.array_equal(back.b, basis.b)
    assert (back.rank, back.method, back.variance_captured) == (basis.rank, basis.method, basis.variance_captured)
    s = StackedAttentionWeights.from_stacked(w)
    got = checkpoint_stacked(decode_checkpoint(encode_checkpoint(stacked_to_checkpoint(s))))
    assert np.array_equal(got.stacked, w)
    got = checkpoint_stacked(decode_checkpoint(encode_checkpoint(matrix_to_checkpoint(w))))
    assert np.array_equal(got.stacked, w)


def test_atomic_write_leaves_no_temp(tmp_path):
    write_checkpoint(tmp_path / "a.ck", matrix_to_checkpoint(np.ones((1, 1))))
    assert [p.name for p in tmp_path.iterdir()] == ["a.ck"]


def test_export_csv(tmp_path):
    w = np.array([[0.1, -2.0], [1e-300, 3.0]])
    (path,) = export_csv(matrix_to_checkpoint(w), tmp_path)
    assert np.array_equal(np.loadtxt(path, delimiter=","), w)


names = st.text(st.characters(min_codepoint=97, max_codepoint=122), min_size=1, max_size=8)
blocks = st.dictionaries(
    names,
    st.tuples(st.integers(1, 5), st.integers(1, 5)).flatmap(
        lambda s: arrays(np.float64, s, elements=st.floats(allow_nan=False, allow_infinity=False, width=64))
    ),
    min_size=1, max_size=4,
)


@settings(max_examples=50, deadline=None)
@given(blocks, st.integers(0, 2**31))
def test_round_trip_property(bl, seed):
    ck = Checkpoint("misc", bl, seed=seed, label="p", meta={"k": [1, 2]})
    back = decode_checkpoint(encode_checkpoint(ck))
    assert list(back.blocks) == list(bl)
    for k, v in bl.items():
        assert np.array_equal(back.blocks[k], v)
    assert back.seed == seed and back.meta == {"k": [1, 2]}
