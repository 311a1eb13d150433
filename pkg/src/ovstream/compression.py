"""Per-instance weighted PCA compression of token matrices.

A stored record keeps three blocks: token mean, PCA coefficients, and PCA
components. Each block is independently raw float32 or integer-quantized
with min/max envelopes (components and mean at 8 bits with per-row
envelopes, coefficients at 16 bits with one envelope for the matrix).

``storage_bytes`` counts the payload: block data plus quantization
envelopes. The on-disk record adds a small fixed descriptor header on top;
see ``payload_to_bytes`` for the layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import FormatError, as_token_matrix
from .decoder import layer_norm


@dataclass
class QuantizedBlock:
    codes: np.ndarray       # uint8 or uint16, same shape as the source block
    mins: np.ndarray        # float32, one per envelope
    maxs: np.ndarray
    bit_width: int          # 8 or 16
    per_row: bool           # per-row envelopes vs one envelope for the matrix


@dataclass
class CompressedFeature:
    shape: tuple            # (T, D) of the original token matrix
    n: int                  # retained component count
    mean: object            # (1, D) float32 array or QuantizedBlock
    coefficients: object    # (T, n)
    components: object      # (n, D)


# ---------------------------------------------------------------------------
# Quantization


def quantize(block, bit_width: int, per_row: bool = True,
             rounding: str = "nearest") -> QuantizedBlock:
    """Min-max affine map of a float matrix onto [0, 2**bit_width - 1].

    ``rounding`` is "nearest" (default, halves the worst-case error) or
    "trunc" for a plain integer cast.
    """
    x = np.asarray(block, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"quantize expects a 2-D block, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("block contains non-finite entries")
    if bit_width not in (8, 16):
        raise ValueError(f"unsupported bit width {bit_width}")
    levels = (1 << bit_width) - 1
    axis = 1 if per_row else None
    mins = x.min(axis=axis, keepdims=True)
    maxs = x.max(axis=axis, keepdims=True)
    span = maxs - mins
    # Constant envelopes (max == min) quantize to code 0 and dequantize to
    # the stored min, which reproduces the constant exactly.
    safe = np.where(span > 0, span, 1.0)
    scaled = levels * (x - mins) / safe
    codes = np.round(scaled) if rounding == "nearest" else np.trunc(scaled)
    dtype = np.uint8 if bit_width == 8 else np.uint16
    return QuantizedBlock(
        codes=codes.astype(dtype),
        mins=mins.astype(np.float32).reshape(-1),
        maxs=maxs.astype(np.float32).reshape(-1),
        bit_width=bit_width,
        per_row=per_row,
    )


def dequantize(block: QuantizedBlock) -> np.ndarray:
    levels = (1 << block.bit_width) - 1
    mins = block.mins.astype(np.float64)
    maxs = block.maxs.astype(np.float64)
    if block.per_row:
        mins = mins[:, None]
        maxs = maxs[:, None]
    out = mins + block.codes.astype(np.float64) * (maxs - mins) / levels
    return out.astype(np.float32)


def _block_array(block) -> np.ndarray:
    if isinstance(block, QuantizedBlock):
        return dequantize(block)
    return block


# ---------------------------------------------------------------------------
# CLS-attention token weighting


def cls_weighting(tokens, norm_gain=None, norm_bias=None,
                  rescale: bool = True) -> np.ndarray:
    """Scale patch tokens by their softmax attention similarity to the CLS token.

    Normalization parameters come from the decoder's first layer norm
    (identity gain / zero bias when the decoder is linear). With ``rescale``
    the weights are multiplied by T-1 so the mean patch scale is 1, which
    keeps the reconstruction magnitude comparable to the input.
    """
    x = as_token_matrix(tokens).astype(np.float64)
    dim = x.shape[1]
    gain = np.ones(dim) if norm_gain is None else np.asarray(norm_gain, dtype=np.float64)
    bias = np.zeros(dim) if norm_bias is None else np.asarray(norm_bias, dtype=np.float64)
    cls_n = layer_norm(x[0], gain, bias)
    patch_n = layer_norm(x[1:], gain, bias)
    sims = patch_n @ cls_n
    sims = sims - sims.max()
    weights = np.exp(sims)
    weights /= weights.sum()
    if rescale:
        weights = weights * (x.shape[0] - 1)
    out = x.copy()
    out[1:] *= weights[:, None]
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# Per-instance PCA


def per_instance_pca(tokens, n: int) -> CompressedFeature:
    """Center the tokens, take a thin SVD, keep the top ``n`` components.

    Sign convention: the largest-magnitude entry of each component row is
    made non-negative, with the matching coefficient column flipped.
    """
    x = as_token_matrix(tokens).astype(np.float64)
    t, d = x.shape
    if not 1 <= n <= min(t, d):
        raise ValueError(f"component count {n} out of range [1, {min(t, d)}]")
    mu = x.mean(axis=0)
    u, s, vt = np.linalg.svd(x - mu, full_matrices=False)
    coeff = u[:, :n] * s[:n]
    comp = vt[:n].copy()
    flips = np.sign(comp[np.arange(n), np.abs(comp).argmax(axis=1)])
    flips[flips == 0] = 1.0
    comp *= flips[:, None]
    coeff *= flips[None, :]
    return CompressedFeature(
        shape=(t, d),
        n=n,
        mean=mu.reshape(1, -1).astype(np.float32),
        coefficients=coeff.astype(np.float32),
        components=comp.astype(np.float32),
    )


def quantize_feature(cf: CompressedFeature, rounding: str = "nearest") -> CompressedFeature:
    """Quantize the blocks: components and mean to 8 bits, coefficients to 16."""
    return CompressedFeature(
        shape=cf.shape,
        n=cf.n,
        mean=quantize(_block_array(cf.mean), 8, per_row=True, rounding=rounding),
        coefficients=quantize(_block_array(cf.coefficients), 16, per_row=False,
                              rounding=rounding),
        components=quantize(_block_array(cf.components), 8, per_row=True,
                            rounding=rounding),
    )


def compress(tokens, n: int, quantized: bool = False, cls_weight: bool = False,
             norm_gain=None, norm_bias=None, rounding: str = "nearest") -> CompressedFeature:
    """Full compression pipeline: optional CLS weighting, PCA, optional quantization."""
    x = as_token_matrix(tokens)
    if cls_weight:
        x = cls_weighting(x, norm_gain, norm_bias)
    cf = per_instance_pca(x, n)
    if quantized:
        cf = quantize_feature(cf, rounding=rounding)
    return cf


def reconstruct(cf: CompressedFeature) -> np.ndarray:
    """Token matrix approximation: coefficients @ components + mean."""
    mean = _block_array(cf.mean).astype(np.float64)
    coeff = _block_array(cf.coefficients).astype(np.float64)
    comp = _block_array(cf.components).astype(np.float64)
    if coeff.shape[1] != comp.shape[0] or mean.shape[1] != comp.shape[1]:
        raise FormatError(
            f"inconsistent block shapes {coeff.shape} / {comp.shape} / {mean.shape}")
    out = coeff @ comp + mean
    if out.shape != cf.shape:
        raise FormatError(f"reconstructed shape {out.shape} != recorded {cf.shape}")
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# Storage accounting


def _block_bytes(block) -> int:
    if isinstance(block, QuantizedBlock):
        code_bytes = block.codes.size * (1 if block.bit_width == 8 else 2)
        envelope_bytes = 2 * 4 * block.mins.size
        return code_bytes + envelope_bytes
    return np.asarray(block).size * 4


def storage_bytes(payload) -> int:
    """Payload bytes of a stored sample: block data plus quantization envelopes.

    Raw token matrices count as T*D float32 bytes. The fixed per-record
    descriptor header of the on-disk format is not included.
    """
    if isinstance(payload, CompressedFeature):
        return (_block_bytes(payload.mean)
                + _block_bytes(payload.coefficients)
                + _block_bytes(payload.components))
    return np.asarray(payload).size * 4


# ---------------------------------------------------------------------------
# Dataset-wide PCA baseline


class DatasetPcaCodec:
    """Chunked dataset-level PCA over the feature dimension.

    Samples are grouped into consecutive chunks; each chunk gets its own
    token mean and component matrix. Every encoded sample belongs to
    exactly one chunk.
    """

    def __init__(self, chunk_size: int, n_components: int):
        if chunk_size < 1 or n_components < 1:
            raise ValueError("chunk size and component count must be >= 1")
        if chunk_size < n_components:
            raise ValueError("chunk size must be >= component count")
        self.chunk_size = chunk_size
        self.n_components = n_components
        self._means: list[np.ndarray] = []
        self._components: list[np.ndarray] = []
        self._membership: dict[int, int] = {}

    @classmethod
    def fit(cls, token_matrices, chunk_size: int = 5000,
            n_components: int = 200) -> "DatasetPcaCodec":
        codec = cls(chunk_size, n_components)
        mats = [as_token_matrix(m).astype(np.float64) for m in token_matrices]
        if not mats:
            raise ValueError("cannot fit codec on an empty dataset")
        for start in range(0, len(mats), chunk_size):
            chunk_idx = len(codec._means)
            chunk = mats[start:start + chunk_size]
            stacked = np.concatenate(chunk, axis=0)
            n = min(n_components, *stacked.shape)
            mu = stacked.mean(axis=0)
            _, _, vt = np.linalg.svd(stacked - mu, full_matrices=False)
            codec._means.append(mu)
            codec._components.append(vt[:n])
            for offset in range(len(chunk)):
                codec._membership[start + offset] = chunk_idx
        return codec

    def _chunk_of(self, sample_id: int) -> int:
        try:
            return self._membership[sample_id]
        except KeyError:
            raise KeyError(f"sample {sample_id} is not assigned to any chunk") from None

    def encode(self, sample_id: int, tokens) -> np.ndarray:
        chunk = self._chunk_of(sample_id)
        x = as_token_matrix(tokens).astype(np.float64)
        coeff = (x - self._means[chunk]) @ self._components[chunk].T
        return coeff.astype(np.float32)

    def decode(self, sample_id: int, coefficients) -> np.ndarray:
        chunk = self._chunk_of(sample_id)
        coeff = np.asarray(coefficients, dtype=np.float64)
        out = coeff @ self._components[chunk] + self._means[chunk]
        return out.astype(np.float32)


# ---------------------------------------------------------------------------
# On-disk record layout (little-endian throughout)
#
# payload record: u8 kind (0 raw tokens, 1 compressed).
#   raw:        u32 T, u32 D, T*D float32.
#   compressed: u32 T, u32 D, u32 n, then three blocks in order
#               mean (1 x D), coefficients (T x n), components (n x D).
#   block:      u8 encoding (0 float32, 1 uint8-quant, 2 uint16-quant),
#               u32 rows, u32 cols; float32 data for encoding 0; otherwise
#               u8 per-row flag, envelope count u32, (min, max) float32
#               pairs, then the integer codes.

_KIND_RAW = 0
_KIND_COMPRESSED = 1


def _block_to_bytes(block) -> bytes:
    if isinstance(block, QuantizedBlock):
        encoding = 1 if block.bit_width == 8 else 2
        rows, cols = block.codes.shape
        out = [struct.pack("<BIIBI", encoding, rows, cols, int(block.per_row),
                           block.mins.size)]
        envelopes = np.empty((block.mins.size, 2), dtype="<f4")
        envelopes[:, 0] = block.mins
        envelopes[:, 1] = block.maxs
        out.append(envelopes.tobytes())
        dtype = "<u1" if block.bit_width == 8 else "<u2"
        out.append(np.ascontiguousarray(block.codes, dtype=dtype).tobytes())
        return b"".join(out)
    arr = np.ascontiguousarray(block, dtype="<f4")
    return struct.pack("<BII", 0, arr.shape[0], arr.shape[1]) + arr.tobytes()


def _block_from_bytes(data: bytes, off: int):
    try:
        encoding, rows, cols = struct.unpack_from("<BII", data, off)
        off += 9
        if encoding == 0:
            arr = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=off)
            return arr.reshape(rows, cols).copy(), off + 4 * rows * cols
        if encoding not in (1, 2):
            raise FormatError(f"unknown block encoding {encoding} at offset {off - 9}")
        per_row, n_env = struct.unpack_from("<BI", data, off)
        off += 5
        envelopes = np.frombuffer(data, dtype="<f4", count=2 * n_env, offset=off)
        envelopes = envelopes.reshape(n_env, 2)
        off += 8 * n_env
        dtype, width = ("<u1", 1) if encoding == 1 else ("<u2", 2)
        codes = np.frombuffer(data, dtype=dtype, count=rows * cols, offset=off)
        off += width * rows * cols
        block = QuantizedBlock(
            codes=codes.reshape(rows, cols).copy(),
            mins=envelopes[:, 0].copy(),
            maxs=envelopes[:, 1].copy(),
            bit_width=8 if encoding == 1 else 16,
            per_row=bool(per_row),
        )
        return block, off
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated payload record near offset {off}") from exc


def payload_to_bytes(payload) -> bytes:
    if isinstance(payload, CompressedFeature):
        t, d = payload.shape
        return (struct.pack("<BIII", _KIND_COMPRESSED, t, d, payload.n)
                + _block_to_bytes(payload.mean)
                + _block_to_bytes(payload.coefficients)
                + _block_to_bytes(payload.components))
    arr = np.ascontiguousarray(payload, dtype="<f4")
    return struct.pack("<BII", _KIND_RAW, arr.shape[0], arr.shape[1]) + arr.tobytes()


def payload_from_bytes(data: bytes, off: int = 0):
    """Decode one payload record; returns (payload, next offset)."""
    try:
        (kind,) = struct.unpack_from("<B", data, off)
        if kind == _KIND_RAW:
            t, d = struct.unpack_from("<II", data, off + 1)
            off += 9
            arr = np.frombuffer(data, dtype="<f4", count=t * d, offset=off)
            if arr.size != t * d:
                raise FormatError(f"truncated token payload at offset {off}")
            return arr.reshape(t, d).copy(), off + 4 * t * d
        if kind != _KIND_COMPRESSED:
            raise FormatError(f"unknown payload kind {kind} at offset {off}")
        t, d, n = struct.unpack_from("<III", data, off + 1)
        off += 13
        mean, off = _block_from_bytes(data, off)
        coeff, off = _block_from_bytes(data, off)
        comp, off = _block_from_bytes(data, off)
        return CompressedFeature((t, d), n, mean, coeff, comp), off
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated payload record near offset {off}") from exc
