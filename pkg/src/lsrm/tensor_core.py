"""Deterministic numeric kernels shared by every other module.

Conventions, fixed once for the whole package:
  - storage dtype is float32, accumulation inside reductions is float64
    (keeps serial-vs-parallel parity achievable at 1e-6)
  - attention tensors are head-split: q is [Nq, n_q_heads, head_dim],
    k and v are [Nk, n_kv_heads, head_dim]
  - query head g reads kv head g // (n_q_heads // n_kv_heads)
  - attention logit scale is 1/sqrt(head_dim)

Also home to the golden-vector file format used by all dump/verify paths.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import (
    ConfigurationError,
    EmptyAttentionRowError,
    EmptyContextError,
    GoldenFormatError,
    OutOfDomainError,
    require,
)

DTYPE = np.float32
ACC = np.float64

GOLDEN_MAGIC = b"LSRMGV1\x00"


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class AttentionParams:
    """Head layout for grouped-query attention.

    hardware_faithful enforces the tensor-core-friendly layout rule that the
    query-to-kv head ratio is a multiple of 16.
    """

    n_q_heads: int
    n_kv_heads: int
    head_dim: int
    hardware_faithful: bool = False

    def __post_init__(self):
        require(self.n_q_heads >= 1 and self.n_kv_heads >= 1,
                "head counts must be positive")
        require(self.head_dim >= 1, "head_dim must be positive")
        require(self.n_q_heads % self.n_kv_heads == 0,
                f"n_q_heads={self.n_q_heads} not divisible by "
                f"n_kv_heads={self.n_kv_heads}")
        if self.hardware_faithful:
            ratio = self.n_q_heads // self.n_kv_heads
            require(ratio % 16 == 0,
                    f"hardware-faithful mode needs (n_q_heads/n_kv_heads) % 16"
                    f" == 0, got ratio {ratio}")

    @property
    def model_dim(self) -> int:
        return self.n_q_heads * self.head_dim

    @property
    def group_size(self) -> int:
        return self.n_q_heads // self.n_kv_heads


# ---------------------------------------------------------------------------
# activations and small layers


def identity(x: np.ndarray) -> np.ndarray:
    return x


def gelu(x: np.ndarray) -> np.ndarray:
    # exact erf form, evaluated in f64
    x64 = np.asarray(x, dtype=ACC)
    out = 0.5 * x64 * (1.0 + erf(x64 / np.sqrt(2.0)))
    return out.astype(DTYPE)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x64 = np.asarray(x, dtype=ACC)
    out = np.where(x64 >= 0.0,
                   1.0 / (1.0 + np.exp(-x64)),
                   np.exp(x64) / (1.0 + np.exp(x64)))
    return out.astype(DTYPE)


ACTIVATIONS = {"identity": identity, "gelu": gelu, "sigmoid": sigmoid}


def affine(x: np.ndarray, weight: np.ndarray, bias=None) -> np.ndarray:
    """y = x @ weight + bias with f64 accumulation; weight is [d_in, d_out].

    einsum instead of BLAS so each output row is computed by the same
    reduction regardless of how many rows are in the batch; worker-sharded
    and serial execution then agree bit for bit.
    """
    require(x.shape[-1] == weight.shape[0],
            f"affine dim mismatch: x has {x.shape[-1]}, weight expects "
            f"{weight.shape[0]}")
    y = np.einsum("...d,do->...o", np.asarray(x, dtype=ACC),
                  np.asarray(weight, dtype=ACC))
    if bias is not None:
        require(weight.shape[1] == np.shape(bias)[-1],
                "affine bias width mismatch")
        y = y + np.asarray(bias, dtype=ACC)
    return y.astype(DTYPE)


def mlp_forward(x: np.ndarray, layers) -> np.ndarray:
    """Sequential affine + activation stack.

    layers: list of (weight [d_in,d_out], bias-or-None, activation) where
    activation is a name from ACTIVATIONS or a callable.
    """
    out = np.asarray(x, dtype=DTYPE)
    for li, (weight, bias, act) in enumerate(layers):
        if out.shape[-1] != weight.shape[0]:
            raise ConfigurationError(
                f"mlp layer {li}: input width {out.shape[-1]} does not match "
                f"weight input width {weight.shape[0]}")
        out = affine(out, weight, bias)
        fn = ACTIVATIONS[act] if isinstance(act, str) else act
        out = fn(out)
    if not np.all(np.isfinite(out)):
        raise ConfigurationError("mlp_forward produced non-finite values")
    return out


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               eps: float = 1e-5) -> np.ndarray:
    x64 = np.asarray(x, dtype=ACC)
    mu = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = (x64 - mu) / np.sqrt(var + eps)
    out = xhat * np.asarray(gamma, dtype=ACC) + np.asarray(beta, dtype=ACC)
    return out.astype(DTYPE)


# ---------------------------------------------------------------------------
# attention


def _check_attention_shapes(q, k, v, params: AttentionParams):
    require(q.ndim == 3 and q.shape[1] == params.n_q_heads
            and q.shape[2] == params.head_dim,
            f"q shape {q.shape} inconsistent with params {params}")
    require(k.ndim == 3 and k.shape[1] == params.n_kv_heads
            and k.shape[2] == params.head_dim,
            f"k shape {k.shape} inconsistent with params {params}")
    require(v.shape == k.shape,
            f"v shape {v.shape} must match k shape {k.shape}")


def dense_cross_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                          params: AttentionParams, mask=None,
                          return_weights: bool = False):
    """Reference grouped-query attention; the oracle for every sparse path.

    q: [Nq, n_q_heads, head_dim]; k, v: [Nk, n_kv_heads, head_dim].
    mask: optional bool [Nq, Nk], True = attendable; a fully masked row is an
    error, never NaN.  With return_weights the softmax rows come back too
    ([Nq, n_q_heads, Nk]) for debugging and row-sum checks.
    """
    _check_attention_shapes(q, k, v, params)
    n_keys = k.shape[0]
    if n_keys == 0:
        raise EmptyContextError("attention over an empty key set")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        require(mask.shape == (q.shape[0], n_keys),
                f"mask shape {mask.shape} must be "
                f"{(q.shape[0], n_keys)}")
        bad = ~mask.any(axis=1)
        if bad.any():
            raise EmptyAttentionRowError(
                f"query rows {np.nonzero(bad)[0][:8].tolist()} have no "
                f"attendable keys")

    q64 = np.asarray(q, dtype=ACC)
    kv_of_q = np.arange(params.n_q_heads) // params.group_size
    k64 = np.asarray(k, dtype=ACC)[:, kv_of_q, :]   # [Nk, n_q_heads, d_h]
    v64 = np.asarray(v, dtype=ACC)[:, kv_of_q, :]

    scale = 1.0 / np.sqrt(float(params.head_dim))
    logits = np.einsum("xhd,yhd->xhy", q64, k64) * scale
    if mask is not None:
        logits = np.where(mask[:, None, :], logits, -np.inf)
    logits -= logits.max(axis=2, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=2, keepdims=True)
    out = np.einsum("xhy,yhd->xhd", w, v64).astype(DTYPE)
    if not np.all(np.isfinite(out)):
        raise ConfigurationError("attention produced non-finite values")
    if return_weights:
        return out, w.astype(DTYPE)
    return out


# ---------------------------------------------------------------------------
# trilinear interpolation


def _trilinear_prepare(points: np.ndarray, side: int):
    pts = np.asarray(points, dtype=ACC)
    if np.any(pts < 0.0) or np.any(pts > 1.0):
        bad = pts[np.any((pts < 0.0) | (pts > 1.0), axis=-1)]
        raise OutOfDomainError(
            f"point outside the unit cube: {bad.reshape(-1, 3)[0].tolist()}")
    # nodes sit at voxel centers (i + 0.5)/side; the border half-voxel uses
    # linear extrapolation from the outermost cell so axis-linear fields are
    # reproduced on all of [0,1]^3
    t = pts * side - 0.5
    i0 = np.clip(np.floor(t), 0, side - 2).astype(np.int64)
    frac = t - i0
    return i0, frac


def trilinear_interpolate_many(volume: np.ndarray,
                               points: np.ndarray) -> np.ndarray:
    """8-corner blend at many points; volume [S,S,S,d_f], points [N,3]."""
    require(volume.ndim == 4, f"volume must be rank 4, got {volume.shape}")
    side = volume.shape[0]
    require(volume.shape[1] == side and volume.shape[2] == side,
            f"volume must be cubic, got {volume.shape}")
    require(side >= 2, "trilinear needs side >= 2")
    i0, frac = _trilinear_prepare(points, side)
    vol64 = np.asarray(volume, dtype=ACC)
    out = np.zeros((points.shape[0], volume.shape[3]), dtype=ACC)
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                corner = vol64[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                out += (wx * wy * wz)[:, None] * corner
    return out.astype(DTYPE)


def trilinear_interpolate(volume: np.ndarray, p) -> np.ndarray:
    """Single-point form of trilinear_interpolate_many."""
    p = np.asarray(p, dtype=ACC).reshape(1, 3)
    return trilinear_interpolate_many(volume, p)[0]


# ---------------------------------------------------------------------------
# golden-vector files
#
# layout, little-endian: magic "LSRMGV1\0" | u32 tensor count |
#   per tensor: u32 rank | u32 dims[rank] | f32 payload (row-major)


def write_goldens(path, tensors) -> None:
    with open(path, "wb") as fh:
        fh.write(GOLDEN_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            arr = np.ascontiguousarray(np.asarray(t, dtype=DTYPE))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def read_goldens(path):
    with open(path, "rb") as fh:
        blob = fh.read()

    def need(offset: int, count: int, what: str) -> bytes:
        if offset + count > len(blob):
            raise GoldenFormatError(
                f"truncated golden file: {what} needs {count} bytes, file "
                f"ends at {len(blob)}", byte_offset=offset)
        return blob[offset:offset + count]

    if need(0, 8, "magic") != GOLDEN_MAGIC:
        raise GoldenFormatError(
            f"bad magic {blob[:8]!r}, expected {GOLDEN_MAGIC!r}",
            byte_offset=0)
    pos = 8
    (count,) = struct.unpack("<I", need(pos, 4, "tensor count"))
    pos += 4
    tensors = []
    for ti in range(count):
        (rank,) = struct.unpack("<I", need(pos, 4, f"tensor {ti} rank"))
        if rank > 16:
            raise GoldenFormatError(
                f"tensor {ti} rank {rank} exceeds limit 16", byte_offset=pos)
        pos += 4
        dims = struct.unpack(f"<{rank}I",
                             need(pos, 4 * rank, f"tensor {ti} dims"))
        pos += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = need(pos, 4 * n, f"tensor {ti} payload")
        tensors.append(np.frombuffer(payload, dtype="<f4")
                       .reshape(dims).astype(DTYPE))
        pos += 4 * n
    if pos != len(blob):
        raise GoldenFormatError(
            f"{len(blob) - pos} trailing bytes after last tensor",
            byte_offset=pos)
    return tensors
