"""The ``.licb`` container: header, fixed-point gate weights, coded latent.

Layout (big-endian)::

    magic  "LICB"            4 bytes
    version                  u8
    height, width            u16, u16   (original, before padding)
    quality_index            u8
    K                        u8         (0 for an adapter-free stream)
    blend_policy             u8         (0 proposed, 1 top1, 2 oracle, 255 none)
    len(v_payload)           u32
    v_payload                (K+1) x u16, v_k * 65535, entries sum to 65535
    len(latent_payload)      u32
    latent_payload           range-coded bytes
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from .codec import STRIDE_PRODUCT, Latent
from .errors import CompatibilityError, ContractError, FramingError
from .rangecoder import DEFAULT_BOUND, RangeCoderTable, build_tables, decode_symbols, encode_symbols

MAGIC = b"LICB"
VERSION = 1
V_SCALE = 65535
HEADER = struct.Struct(">4sBHHBBB")
LENGTH = struct.Struct(">I")
FIXED_BYTES = HEADER.size + 2 * LENGTH.size
POLICY_CODES = {"proposed": 0, "top1": 1, "oracle": 2, None: 255}
POLICY_NAMES = {code: name for name, code in POLICY_CODES.items()}


@dataclass
class StreamMeta:
    height: int
    width: int
    quality_index: int
    K: int
    blend_policy: Optional[str] = None

    @property
    def latent_hw(self) -> Tuple[int, int]:
        return -(-self.height // STRIDE_PRODUCT), -(-self.width // STRIDE_PRODUCT)


def quantize_v(v) -> np.ndarray:
    """Fixed-point weights that sum to exactly 65535 (largest remainder)."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0 or (v < -1e-6).any() or abs(v.sum() - 1.0) > 1e-4:
        raise ContractError(f"v must be a probability vector, got {v}")
    v = np.clip(v, 0.0, None)
    scaled = v / v.sum() * V_SCALE
    q = np.floor(scaled).astype(np.int64)
    order = np.argsort(-(scaled - q), kind="stable")
    q[order[: V_SCALE - q.sum()]] += 1
    return q


def dequantize_v(q: np.ndarray) -> np.ndarray:
    total = int(np.sum(q))
    if total == 0:
        raise FramingError("gate weights payload is all zero")
    return np.asarray(q, dtype=np.float64) / total


def entropy_tables(entropy_model, L: int = DEFAULT_BOUND) -> RangeCoderTable:
    return build_tables(entropy_model.mean.detach().double().numpy(),
                        entropy_model.scale.detach().double().numpy(), L)


def encode_stream(
    y_hat: Latent,
    v,
    meta: StreamMeta,
    tables: RangeCoderTable,
) -> bytes:
    """Serialize a quantized latent (1, M, h, w) and gate weights ``v``."""
    if not y_hat.quantized:
        raise ContractError("encode_stream needs a quantized latent")
    f = y_hat.features
    if f.dim() == 4:
        if f.shape[0] != 1:
            raise ContractError("encode_stream codes one image at a time")
        f = f[0]
    if tuple(f.shape[1:]) != meta.latent_hw:
        raise ContractError(f"latent {tuple(f.shape)} inconsistent with image {meta.height}x{meta.width}")
    if meta.K == 0 and v is None:
        v = [1.0]
    if isinstance(v, torch.Tensor):
        v = v.detach().double().numpy()
    q = quantize_v(v)
    if q.size != meta.K + 1:
        raise ContractError(f"v has {q.size} entries, header declares K={meta.K}")
    if not (0 < meta.height < 1 << 16 and 0 < meta.width < 1 << 16):
        raise ContractError("image dimensions must fit in 16 bits")
    symbols = f.detach().cpu().numpy().astype(np.int64)
    latent = encode_symbols(symbols, tables)
    v_payload = q.astype(">u2").tobytes()
    header = HEADER.pack(MAGIC, VERSION, meta.height, meta.width, meta.quality_index, meta.K,
                         POLICY_CODES[meta.blend_policy])
    return b"".join([header, LENGTH.pack(len(v_payload)), v_payload, LENGTH.pack(len(latent)), latent])


def parse_header(data: bytes) -> Tuple[StreamMeta, np.ndarray, bytes]:
    """Check framing and split a stream into (meta, fixed-point v, latent payload)."""
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise FramingError("stream must be bytes")
    data = bytes(data)
    if len(data) < HEADER.size:
        raise FramingError(f"stream of {len(data)} bytes is shorter than the {HEADER.size}-byte header")
    magic, version, h, w, quality, K, policy = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FramingError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CompatibilityError(f"stream version {version} != supported {VERSION}")
    if policy not in POLICY_NAMES:
        raise FramingError(f"unknown blend policy code {policy}")
    if h == 0 or w == 0:
        raise FramingError("zero image dimension")
    pos = HEADER.size
    if len(data) < pos + LENGTH.size:
        raise FramingError("stream truncated before the gate payload length")
    (nv,) = LENGTH.unpack_from(data, pos)
    pos += LENGTH.size
    if nv != 2 * (K + 1):
        raise FramingError(f"gate payload of {nv} bytes does not match K={K}")
    if len(data) < pos + nv + LENGTH.size:
        raise FramingError("stream truncated inside the gate payload")
    q = np.frombuffer(data, dtype=">u2", count=K + 1, offset=pos).astype(np.int64)
    pos += nv
    (nl,) = LENGTH.unpack_from(data, pos)
    pos += LENGTH.size
    if len(data) != pos + nl:
        raise FramingError(f"declared latent payload {nl} bytes, stream carries {len(data) - pos}")
    meta = StreamMeta(h, w, quality, K, POLICY_NAMES[policy])
    return meta, q, data[pos:]


def decode_stream(data: bytes, model, force: bool = False):
    """Parse a stream against ``model`` (an :class:`AdaptedCodec`).

    Returns ``(y_hat, v, meta)``. ``v`` is None when the decoder must run
    adapter-free: the checkpoint has no adapters, or (with ``force``) its K
    differs from the stream's.
    """
    meta, q, payload = parse_header(data)
    cfg = model.config
    if meta.quality_index != cfg.quality_index:
        raise CompatibilityError(
            f"stream quality index {meta.quality_index} != checkpoint quality index {cfg.quality_index}"
        )
    v = dequantize_v(q)
    use_v = meta.K > 0
    if meta.K > 0 and model.K is None:
        warnings.warn("checkpoint has no adapters; decoding with the backbone only", RuntimeWarning)
        use_v = False
    elif meta.K > 0 and model.K != meta.K:
        if not force:
            raise CompatibilityError(f"stream K={meta.K} but checkpoint K={model.K}")
        warnings.warn(f"stream K={meta.K} != checkpoint K={model.K}; decoding with the backbone only",
                      RuntimeWarning)
        use_v = False
    tables = entropy_tables(model.backbone.entropy)
    h, w = meta.latent_hw
    n_symbols = cfg.M * h * w
    # every symbol costs at least min_bits; reject impossible declarations early
    capacity = (8 * len(payload)) / tables.min_bits_per_symbol() + 1
    if n_symbols > capacity:
        raise FramingError(f"{n_symbols} latent symbols cannot fit in {len(payload)} payload bytes")
    symbols = decode_symbols(payload, tables, (cfg.M, h, w))
    y_hat = Latent(torch.from_numpy(symbols.astype(np.float32))[None], quantized=True)
    return y_hat, (torch.from_numpy(v) if use_v else None), meta


def v_overhead(data: bytes) -> float:
    """Fraction of stream bytes spent on the gate weights."""
    meta, q, _ = parse_header(data)
    return 2 * q.size / len(data)
