"""Spatial block partitioning (8 per axis) and per-block KV compression.

Block ids are global and stable whether or not a block is occupied:
  volume: id = (bi * Sb + bj) * Sb + bk          over the Sb^3 block grid
  image:  id = view * Sb^2 + bv * Sb + bu        per-view raster order
Occupied blocks are the sorted subset that actually holds tokens; compressed
KV rows exist only for those and follow ascending block id.
"""

from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import require
from .tensor_core import DTYPE, affine, gelu
from .tokenizer import TokenSet

BLOCK = 8


@dataclass
class BlockPartition:
    modality: str
    block_size: int
    block_grid: tuple          # (Sb,Sb,Sb) or (n_views, Sb, Sb)
    n_blocks_total: int
    block_of_token: np.ndarray     # [N] global block id per token
    occupied_ids: np.ndarray       # [B] ascending global ids
    block_offsets: np.ndarray      # [B+1] into block_token_ids
    block_token_ids: np.ndarray    # concatenated, ascending inside a block
    occupancy: np.ndarray          # [B]
    block_centers: np.ndarray      # [B,3] object space (volume)
                                   # or [B,2] patch units (image)
    block_views: np.ndarray        # [B] view id (image), empty for volume

    @property
    def n_occupied(self) -> int:
        return self.occupied_ids.size

    @property
    def n_tokens(self) -> int:
        return self.block_of_token.size

    def row_of_block(self) -> dict:
        """Global block id -> occupied row index."""
        return {int(b): i for i, b in enumerate(self.occupied_ids)}

    def tokens_in_row(self, row: int) -> np.ndarray:
        return self.block_token_ids[
            self.block_offsets[row]:self.block_offsets[row + 1]]


def partition(tokens: TokenSet, block_size: int = BLOCK) -> BlockPartition:
    """Group tokens by floor-divided coords; blocks never span views."""
    if tokens.modality == "volume":
        side = tokens.grid_res[0]
        require(side % block_size == 0,
                f"grid side {side} not divisible by block {block_size}")
        sb = side // block_size
        bc = tokens.coords // block_size
        bids = (bc[:, 0] * sb + bc[:, 1]) * sb + bc[:, 2]
        grid = (sb, sb, sb)
        total = sb ** 3
    else:
        n_views, rows_f, cols_f = tokens.grid_res
        require(rows_f % block_size == 0,
                f"grid side {rows_f} not divisible by block {block_size}")
        sb = rows_f // block_size
        bu = tokens.coords[:, 1] // block_size
        bv = tokens.coords[:, 2] // block_size
        bids = tokens.coords[:, 0] * sb * sb + bv * sb + bu
        grid = (n_views, sb, sb)
        total = n_views * sb * sb

    order = np.lexsort((np.arange(tokens.count), bids))
    sorted_bids = bids[order]
    occupied, starts, counts = np.unique(sorted_bids, return_index=True,
                                         return_counts=True)
    offsets = np.concatenate([starts, [tokens.count]]).astype(np.int64)

    if tokens.modality == "volume":
        side = tokens.grid_res[0]
        bi = occupied // (sb * sb)
        bj = (occupied // sb) % sb
        bk = occupied % sb
        centers = np.stack([(block_size * bi + block_size / 2.0) / side,
                            (block_size * bj + block_size / 2.0) / side,
                            (block_size * bk + block_size / 2.0) / side],
                           axis=-1)
        views = np.zeros(0, dtype=np.int64)
    else:
        views = occupied // (sb * sb)
        bv = (occupied % (sb * sb)) // sb
        bu = occupied % sb
        centers = np.stack([block_size * bu + block_size / 2.0,
                            block_size * bv + block_size / 2.0], axis=-1)

    return BlockPartition(
        modality=tokens.modality, block_size=block_size, block_grid=grid,
        n_blocks_total=total, block_of_token=bids.astype(np.int64),
        occupied_ids=occupied.astype(np.int64), block_offsets=offsets,
        block_token_ids=order.astype(np.int64),
        occupancy=counts.astype(np.int64), block_centers=centers,
        block_views=views)


# ---------------------------------------------------------------------------
# compressed KV


@dataclass
class ResBlockParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class CompressWeights:
    """Separate residual transforms for keys and values, width h_kv*d_h."""
    for_k: ResBlockParams
    for_v: ResBlockParams


def init_res_block(seed: int, width: int, *tags, scale: float = 0.02
                   ) -> ResBlockParams:
    return ResBlockParams(
        w1=rng.normal_f32(seed, (width, width), scale, *tags, "w1"),
        b1=np.zeros(width, dtype=DTYPE),
        w2=rng.normal_f32(seed, (width, width), scale, *tags, "w2"),
        b2=np.zeros(width, dtype=DTYPE))


def init_compress_weights(seed: int, width: int, *tags) -> CompressWeights:
    return CompressWeights(init_res_block(seed, width, *tags, "cmp_k"),
                           init_res_block(seed, width, *tags, "cmp_v"))


def res_block(x: np.ndarray, p: ResBlockParams) -> np.ndarray:
    """affine -> gelu -> affine, plus skip."""
    h = affine(gelu(affine(x, p.w1, p.b1)), p.w2, p.b2)
    return (x.astype(np.float64) + h.astype(np.float64)).astype(DTYPE)


def compress_block_kv(k: np.ndarray, v: np.ndarray, part: BlockPartition,
                      w: CompressWeights):
    """Per-token residual transform, then the in-block mean, one compressed
    row per occupied block in ascending block-id order."""
    n, h_kv, d_h = k.shape
    require(v.shape == k.shape, "k and v shapes must match")
    require(n == part.n_tokens, "partition does not index these tokens")
    if n == 0:
        empty = np.zeros((0, h_kv, d_h), dtype=DTYPE)
        return empty, empty.copy()
    width = h_kv * d_h
    out = []
    for tensor, params in ((k, w.for_k), (v, w.for_v)):
        rows = res_block(tensor.reshape(n, width), params).astype(np.float64)
        # ascending-token-id order inside each block keeps the mean
        # bit-stable across workers
        gathered = rows[part.block_token_ids]
        sums = np.add.reduceat(gathered, part.block_offsets[:-1], axis=0)
        means = sums / part.occupancy[:, None]
        out.append(means.astype(DTYPE).reshape(-1, h_kv, d_h))
    return out[0], out[1]


def occupancy_stats(part: BlockPartition) -> dict:
    occ = part.occupancy
    if occ.size == 0:
        return {"total_tokens": 0, "occupied_blocks": 0, "min": 0, "max": 0,
                "mean": 0.0, "max_over_mean": 0.0, "gini": 0.0,
                "histogram": {}}
    mean = float(occ.mean())
    sorted_occ = np.sort(occ).astype(np.float64)
    n = occ.size
    # Gini over occupied-block loads
    gini = float((2.0 * np.sum((np.arange(1, n + 1)) * sorted_occ)
                  / (n * sorted_occ.sum())) - (n + 1.0) / n)
    values, freq = np.unique(occ, return_counts=True)
    return {
        "total_tokens": int(occ.sum()),
        "occupied_blocks": int(n),
        "min": int(occ.min()),
        "max": int(occ.max()),
        "mean": mean,
        "max_over_mean": float(occ.max() / mean),
        "gini": gini,
        "histogram": {int(a): int(b) for a, b in zip(values, freq)},
    }
