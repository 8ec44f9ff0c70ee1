"""Small pre-norm transformer encoders, token pooling and self-attention fusion.

A batch of variable-length token sequences travels as a :class:`TokenBatch`:
all tokens stacked into one ``(sum T_i) x D`` tensor plus the per-item
lengths. Attention inside a packed batch uses a block-diagonal mask so items
never attend to each other; this is how the batch dimension is handled
without 3-D tensors.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError, UsageError

MASK_VALUE = -1e30
LN_EPS = 1e-5


class PoolMode(str, Enum):
    CLS = "CLS"
    TLF = "TLF"
    CLS_PLUS_TLF = "CLS_PLUS_TLF"


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    heads: int = 4
    dim: int = 32
    ffn_mult: int = 2
    max_tokens: int = 64
    use_cls: bool = True
    positional: bool = False

    def __post_init__(self):
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        if self.dim < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.ffn_mult < 1 or self.max_tokens < 1:
            raise ConfigError("ffn_mult and max_tokens must be >= 1")


# Large shape (4 layers, 8 heads, width 1024); runnable, but far too slow for routine use on a CPU.
LARGE_PRESET = EncoderConfig(layers=4, heads=8, dim=1024, ffn_mult=4, max_tokens=64)
SMALL_PRESET = EncoderConfig()


@dataclass(frozen=True)
class TokenBatch:
    """Packed token sequences: ``x`` rows are the concatenation of all items."""

    x: Tensor
    lengths: tuple[int, ...]
    has_cls: bool = False

    def __post_init__(self):
        if sum(self.lengths) != self.x.rows:
            raise ShapeError(
                f"lengths sum to {sum(self.lengths)} but tensor has {self.x.rows} rows"
            )

    @classmethod
    def single(cls, x: Tensor, has_cls: bool = False) -> "TokenBatch":
        return cls(x, (x.rows,), has_cls)

    @property
    def starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.lengths)[:-1]]).astype(np.intp)

    @property
    def size(self) -> int:
        return len(self.lengths)

    def segment_ids(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.lengths)), self.lengths)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh encoder parameters (scaled-uniform weights, zero biases, unit LN gains)."""
    d, f = cfg.dim, cfg.dim * cfg.ffn_mult
    p: dict[str, Tensor] = {}
    if cfg.use_cls:
        p["cls"] = ad.parameter(_xavier(rng, 1, d), "cls")
    if cfg.positional:
        p["pos"] = ad.parameter(_xavier(rng, cfg.max_tokens, d), "pos")
    for i in range(cfg.layers):
        qkv = np.concatenate([_xavier(rng, d, d) for _ in range(3)], axis=1)
        shapes = {
            "ln1_g": np.ones((1, d)),
            "ln1_b": np.zeros((1, d)),
            "w_qkv": qkv,
            "b_qkv": np.zeros((1, 3 * d)),
            "w_o": _xavier(rng, d, d),
            "b_o": np.zeros((1, d)),
            "ln2_g": np.ones((1, d)),
            "ln2_b": np.zeros((1, d)),
            "w_ff1": _xavier(rng, d, f),
            "b_ff1": np.zeros((1, f)),
            "w_ff2": _xavier(rng, f, d),
            "b_ff2": np.zeros((1, d)),
        }
        for key, val in shapes.items():
            name = f"layer{i}.{key}"
            p[name] = ad.parameter(val, name)
    return p


def block_mask(lengths) -> np.ndarray | None:
    """Additive attention mask keeping items of a packed batch apart."""
    if len(lengths) <= 1:
        return None
    ids = np.repeat(np.arange(len(lengths)), lengths)
    return np.where(ids[:, None] == ids[None, :], 0.0, MASK_VALUE)


def self_attention(x: Tensor, p: Mapping[str, Tensor], prefix: str, heads: int, mask) -> Tensor:
    d = x.cols
    dh = d // heads
    qkv = x @ p[prefix + "w_qkv"] + p[prefix + "b_qkv"]
    scale = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(heads):
        q = ad.slice_cols(qkv, h * dh, (h + 1) * dh)
        k = ad.slice_cols(qkv, d + h * dh, d + (h + 1) * dh)
        v = ad.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh)
        scores = (q @ k.T) * scale
        if mask is not None:
            scores = scores + mask
        outs.append(ad.softmax_rows(scores) @ v)
    merged = outs[0] if heads == 1 else ad.concat_cols(outs)
    return merged @ p[prefix + "w_o"] + p[prefix + "b_o"]


def _prepend_cls(batch: TokenBatch, cls: Tensor) -> TokenBatch:
    b = batch.size
    n = batch.x.rows
    stacked = ad.concat_rows([ad.gather_rows(cls, np.zeros(b, dtype=np.intp)), batch.x])
    # item i -> [cls_i, tokens_i...]; cls rows sit at 0..b-1 of `stacked`
    order = []
    for i, (s, length) in enumerate(zip(batch.starts, batch.lengths)):
        order.append(i)
        order.extend(range(b + s, b + s + length))
    assert len(order) == n + b
    return TokenBatch(ad.gather_rows(stacked, order), tuple(t + 1 for t in batch.lengths), True)


def encode(batch: TokenBatch, cfg: EncoderConfig, params: Mapping[str, Tensor]) -> TokenBatch:
    """Run the encoder stack; prepends one CLS row per item when ``cfg.use_cls``."""
    if batch.x.cols != cfg.dim:
        raise ShapeError(f"encode: token width {batch.x.cols} != encoder dim {cfg.dim}")
    if not batch.lengths or min(batch.lengths) < 1:
        raise UsageError("encode: every item needs at least one token")
    extra = 1 if cfg.use_cls else 0
    if max(batch.lengths) + extra > cfg.max_tokens:
        raise ShapeError(
            f"encode: {max(batch.lengths)} tokens (+{extra} CLS) exceed max_tokens={cfg.max_tokens}"
        )

    if cfg.positional:
        pos_idx = np.concatenate([np.arange(t) for t in batch.lengths])
        batch = TokenBatch(batch.x + ad.gather_rows(params["pos"], pos_idx), batch.lengths)
    if cfg.use_cls:
        batch = _prepend_cls(batch, params["cls"])

    x = batch.x
    mask = block_mask(batch.lengths)
    for i in range(cfg.layers):
        pre = f"layer{i}."
        h = ad.layer_norm(x, params[pre + "ln1_g"], params[pre + "ln1_b"], LN_EPS)
        x = x + self_attention(h, params, pre, cfg.heads, mask)
        h = ad.layer_norm(x, params[pre + "ln2_g"], params[pre + "ln2_b"], LN_EPS)
        h = ad.gelu(h @ params[pre + "w_ff1"] + params[pre + "b_ff1"])
        x = x + (h @ params[pre + "w_ff2"] + params[pre + "b_ff2"])
    return TokenBatch(x, batch.lengths, batch.has_cls)


def pool(batch: TokenBatch, mode: PoolMode | str) -> Tensor:
    """One embedding row per item (``B x D``)."""
    mode = PoolMode(mode)
    if batch.size == 0:
        raise UsageError("pool: empty batch")
    if mode in (PoolMode.CLS, PoolMode.CLS_PLUS_TLF) and not batch.has_cls:
        raise UsageError(f"pool mode {mode.value} needs a CLS token")
    starts = batch.starts
    if mode is PoolMode.CLS:
        return ad.gather_rows(batch.x, starts)

    skip = 1 if batch.has_cls else 0
    avg = np.zeros((batch.size, batch.x.rows))
    for i, (s, length) in enumerate(zip(starts, batch.lengths)):
        body = length - skip
        if body < 1:
            raise UsageError(f"pool: item {i} has no non-CLS tokens to average")
        avg[i, s + skip : s + length] = 1.0 / body
    tlf = Tensor(avg) @ batch.x
    if mode is PoolMode.TLF:
        return tlf
    return (ad.gather_rows(batch.x, starts) + tlf) * 0.5


def init_fusion(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    p = init_encoder(cfg, rng)
    p["type_emb"] = ad.parameter(_xavier(rng, 2, cfg.dim), "type_emb")
    return p


def fuse_self_attention(
    visual: TokenBatch, geometric: TokenBatch, cfg: EncoderConfig, params: Mapping[str, Tensor]
) -> TokenBatch:
    """Concatenate each item's visual and geometric tokens, tag them with a
    modality-type embedding and run them jointly through an encoder."""
    if visual.x.cols != cfg.dim or geometric.x.cols != cfg.dim:
        raise ShapeError(
            f"fuse: widths {visual.x.cols}/{geometric.x.cols} != fusion dim {cfg.dim}"
        )
    if visual.size != geometric.size:
        raise ShapeError(f"fuse: {visual.size} visual items vs {geometric.size} geometric items")
    nv = visual.x.rows
    order, types = [], []
    for sv, lv, sg, lg in zip(visual.starts, visual.lengths, geometric.starts, geometric.lengths):
        order.extend(range(sv, sv + lv))
        order.extend(range(nv + sg, nv + sg + lg))
        types.extend([0] * lv + [1] * lg)
    stacked = ad.concat_rows([visual.x, geometric.x])
    x = ad.gather_rows(stacked, order) + ad.gather_rows(params["type_emb"], types)
    lengths = tuple(a + b for a, b in zip(visual.lengths, geometric.lengths))
    return encode(TokenBatch(x, lengths), cfg, params)


# ---------------------------------------------------------------------------
# Checkpoints

MAGIC = b"TERLAB01"


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write parameters as: magic, LE shape table, raw LE float64 values.

    Table layout: ``u32 count`` then per entry ``u16 name_len, name (utf-8),
    u32 rows, u32 cols``. Values follow in table order, row-major.
    """
    header = [MAGIC, struct.pack("<I", len(params))]
    blobs = []
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"checkpoint entry {name!r} is not 2-D")
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", *arr.shape))
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(header + blobs))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise DataError(f"{path}: not a TERLAB01 checkpoint")
    off = 8
    table = []
    try:
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            rows, cols = struct.unpack_from("<II", buf, off)
            off += 8
            table.append((name, rows, cols))
    except (struct.error, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt shape table ({exc})") from None
    out = {}
    for name, rows, cols in table:
        nbytes = rows * cols * 8
        if off + nbytes > len(buf):
            raise DataError(f"{path}: truncated at entry {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float64)
        off += nbytes
    if off != len(buf):
        raise DataError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
