"""Binary checkpoint format.

Layout (all integers little-endian u32, floats little-endian f64)::

    b"CORA" | version | header_len | header (UTF-8 JSON, sorted keys)
    then for each block declared in header["blocks"], in order:
        name_len | name (UTF-8) | rows | cols | rows*cols f64, row-major

The header carries format_version, kind, dims, vocab_size, adapter (or null),
seed, label, meta and the block list.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adapter import Adapter
from .extraction import CommonBasis, StackedAttentionWeights
from .model import BASE_BLOCKS, ModelDims, ToyTransformer

MAGIC = b"CORA"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ShapeInconsistencyError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str
    blocks: dict[str, np.ndarray]
    dims: dict | None = None
    adapter: dict | None = None
    seed: int | None = None
    label: str = ""
    meta: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "format_version": VERSION,
            "kind": self.kind,
            "dims": self.dims,
            "vocab_size": None if self.dims is None else self.dims["vocab_size"],
            "adapter": self.adapter,
            "seed": self.seed,
            "label": self.label,
            "meta": self.meta,
            "blocks": [{"name": k, "rows": int(v.shape[0]), "cols": int(v.shape[1])} for k, v in self.blocks.items()],
        }


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    for name, block in ckpt.blocks.items():
        if block.ndim != 2:
            raise ShapeInconsistencyError(f"block {name!r} is not 2-D")
        if not np.all(np.isfinite(block)):
            raise CheckpointError(f"block {name!r} contains non-finite values")
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(header)), header]
    for name, block in ckpt.blocks.items():
        raw = name.encode()
        parts += [_U32.pack(len(raw)), raw, _U32.pack(block.shape[0]), _U32.pack(block.shape[1])]
        parts.append(np.ascontiguousarray(block, dtype="<f8").tobytes())
    return b"".join(parts)


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    data = encode_checkpoint(ckpt)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(
                f"truncated payload: need {n} bytes for {what} at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic bytes {data[:4]!r}, expected {MAGIC!r}")
    rd = _Reader(data)
    rd.take(4, "magic")
    version = rd.u32("version")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}, expected {VERSION}")
    hlen = rd.u32("header length")
    try:
        header = json.loads(rd.take(hlen, "header").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from None
    if header.get("format_version") != version:
        raise VersionMismatchError("header format_version disagrees with the file version")
    blocks = {}
    for decl in header["blocks"]:
        name = rd.take(rd.u32("block name length"), "block name").decode()
        rows, cols = rd.u32(f"rows of {name}"), rd.u32(f"cols of {name}")
        if name != decl["name"] or (rows, cols) != (decl["rows"], decl["cols"]):
            raise ShapeInconsistencyError(
                f"block {name!r} {rows}x{cols} does not match header entry "
                f"{decl['name']!r} {decl['rows']}x{decl['cols']}"
            )
        raw = rd.take(8 * rows * cols, f"data of {name}")
        blocks[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)
    if rd.pos != len(data):
        raise ShapeInconsistencyError(f"{len(data) - rd.pos} trailing bytes after the declared blocks")
    dims = header.get("dims")
    if dims is not None:
        _check_model_blocks(dims, blocks)
    return Checkpoint(
        kind=header["kind"], blocks=blocks, dims=dims, adapter=header.get("adapter"),
        seed=header.get("seed"), label=header.get("label", ""), meta=header.get("meta") or {},
    )


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def _expected_shapes(dims: dict) -> dict:
    v, d, dk, t, f = dims["vocab_size"], dims["d_model"], dims["d_k"], dims["seq_len"], dims["d_ff"]
    return {
        "embed": (v, d), "pos_embed": (t, d), "w_qkv": (3 * d, dk), "attn_out": (dk, d),
        "ffn_w1": (d, f), "ffn_w2": (f, d), "out_proj": (d, v),
    }


def _check_model_blocks(dims, blocks):
    for name, shape in _expected_shapes(dims).items():
        if name in blocks and blocks[name].shape != shape:
            raise ShapeInconsistencyError(f"block {name!r} has shape {blocks[name].shape}, header dims imply {shape}")


# conversions -----------------------------------------------------------------

def model_to_checkpoint(model: ToyTransformer, *, label="", seed=None, meta=None) -> Checkpoint:
    blocks = {name: getattr(model, name) for name in BASE_BLOCKS}
    adapter = None
    if model.adapter is not None:
        blocks["adapter_a"] = model.adapter.a
        blocks["adapter_b"] = model.adapter.b
        adapter = model.adapter.descriptor()
    return Checkpoint("model", blocks, dims=asdict(model.dims), adapter=adapter,
                      seed=seed, label=label, meta=dict(meta or {}))


def checkpoint_to_model(ckpt: Checkpoint) -> ToyTransformer:
    if ckpt.kind != "model":
        raise CheckpointError(f"expected a model checkpoint, got kind {ckpt.kind!r}")
    missing = [n for n in BASE_BLOCKS if n not in ckpt.blocks]
    if missing:
        raise CheckpointError(f"model checkpoint lacks blocks {missing}")
    adapter = None
    if ckpt.adapter is not None:
        ad = ckpt.adapter
        adapter = Adapter(a=ckpt.blocks["adapter_a"].copy(), b=ckpt.blocks["adapter_b"].copy(),
                          rank=ad["rank"], scale=ad["scale"], b_frozen=ad["b_frozen"],
                          init_mode=ad["init_mode"], seed=ad["seed"])
    return ToyTransformer(dims=ModelDims(**ckpt.dims), adapter=adapter,
                          **{n: ckpt.blocks[n].copy() for n in BASE_BLOCKS})


def basis_to_checkpoint(basis: CommonBasis, *, label="", seed=None, meta=None) -> Checkpoint:
    m = {"method": basis.method, "rank": basis.rank, "variance_captured": basis.variance_captured}
    m.update(meta or {})
    return Checkpoint("basis", {"b": basis.b}, seed=seed, label=label, meta=m)


def checkpoint_to_basis(ckpt: Checkpoint) -> CommonBasis:
    if ckpt.kind != "basis":
        raise CheckpointError(f"expected a basis checkpoint, got kind {ckpt.kind!r}")
    b = ckpt.blocks["b"].copy()
    if b.shape[0] != ckpt.meta["rank"]:
        raise ShapeInconsistencyError(f"basis block has {b.shape[0]} rows but rank {ckpt.meta['rank']}")
    return CommonBasis(b=b, rank=ckpt.meta["rank"], method=ckpt.meta["method"],
                       variance_captured=ckpt.meta["variance_captured"])


def stacked_to_checkpoint(w: StackedAttentionWeights, *, label="", seed=None, meta=None) -> Checkpoint:
    return Checkpoint("stacked", {"w_q": w.w_q, "w_k": w.w_k, "w_v": w.w_v},
                      seed=seed, label=label, meta=dict(meta or {}))


def checkpoint_stacked(ckpt: Checkpoint) -> StackedAttentionWeights:
    """Stacked Q/K/V weights from a model, stacked-weights or matrix checkpoint."""
    if ckpt.kind == "model":
        return StackedAttentionWeights.from_stacked(ckpt.blocks["w_qkv"])
    if ckpt.kind == "stacked":
        return StackedAttentionWeights(ckpt.blocks["w_q"], ckpt.blocks["w_k"], ckpt.blocks["w_v"])
    if ckpt.kind == "matrix":
        return StackedAttentionWeights.from_stacked(ckpt.blocks["w0"])
    raise CheckpointError(f"checkpoint kind {ckpt.kind!r} carries no attention weights")


def matrix_to_checkpoint(w0, *, label="", meta=None) -> Checkpoint:
    return Checkpoint("matrix", {"w0": np.asarray(w0, dtype=np.float64)}, label=label, meta=dict(meta or {}))


def export_csv(ckpt: Checkpoint, out_dir) -> list[Path]:
    """Write each block as a plain CSV matrix (full double precision)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, block in ckpt.blocks.items():
        p = out_dir / f"{name}.csv"
        with open(p, "w") as fh:
            for row in block:
                fh.write(",".join(repr(float(x)) for x in row) + "\n")
        paths.append(p)
    return paths
