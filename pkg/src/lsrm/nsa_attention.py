"""Sparse attention with three branches and gated combination.

Per query token the branches are:
  cmp  - attention over one compressed KV row per occupied block
  sel  - attention over the original tokens of the query's selected blocks
  win  - attention within the query's own block (self-attention pairs only;
         "same block" has no meaning across modalities, so cross-modality
         uses run cmp+sel with two gates)

Branch outputs are concatenated back to width d, scaled by per-token sigmoid
gates, summed, and pushed through one shared output projection.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import rng
from .block_partition import (BlockPartition, CompressWeights,
                              compress_block_kv, init_compress_weights)
from .errors import (ConfigurationError, EmptyAttentionRowError,
                     EmptyContextError, require)
from .tensor_core import (ACC, DTYPE, AttentionParams, affine,
                          dense_cross_attention, sigmoid)

SEL_CHUNK = 512


# ---------------------------------------------------------------------------
# selections


@dataclass
class Selection:
    """Per query token: distinct global ids of selected occupied KV blocks."""
    lists: list

    @property
    def n_queries(self) -> int:
        return len(self.lists)

    def validate(self, part: BlockPartition) -> None:
        occupied = set(int(b) for b in part.occupied_ids)
        for qi, ids in enumerate(self.lists):
            ids = [int(b) for b in ids]
            if len(set(ids)) != len(ids):
                raise ConfigurationError(
                    f"query {qi} selects duplicate blocks {ids}")
            for b in ids:
                if b not in occupied:
                    raise ConfigurationError(
                        f"query {qi} selects unoccupied block {b}")


def full_selection(n_queries: int, part: BlockPartition) -> Selection:
    all_ids = part.occupied_ids.copy()
    return Selection([all_ids] * n_queries)


def write_selection(fh, sel: Selection) -> None:
    """u32 query count, then per query u32 length + u32 ids."""
    fh.write(struct.pack("<I", sel.n_queries))
    for ids in sel.lists:
        ids = np.asarray(ids, dtype=np.uint32)
        fh.write(struct.pack("<I", ids.size))
        fh.write(ids.astype("<u4").tobytes())


def read_selection(fh) -> Selection:
    (n,) = struct.unpack("<I", fh.read(4))
    lists = []
    for _ in range(n):
        (ln,) = struct.unpack("<I", fh.read(4))
        lists.append(np.frombuffer(fh.read(4 * ln), dtype="<u4")
                     .astype(np.int64))
    return Selection(lists)


# ---------------------------------------------------------------------------
# branches


def cmp_attention(q: np.ndarray, k_cmp: np.ndarray, v_cmp: np.ndarray,
                  params: AttentionParams) -> np.ndarray:
    """Attention over the per-block compressed rows; one key per block."""
    if k_cmp.shape[0] == 0:
        raise EmptyContextError("no occupied blocks to compress-attend over")
    return dense_cross_attention(q, k_cmp, v_cmp, params)


def win_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                  part_q: BlockPartition, part_kv: BlockPartition,
                  params: AttentionParams) -> np.ndarray:
    """Each query attends to the keys sharing its block.

    Defined for self-attention only, where every query is also a key, so no
    row can be empty.  Equals dense attention under a block-diagonal mask.
    """
    if part_q is not part_kv and not np.array_equal(
            part_q.block_of_token, part_kv.block_of_token):
        raise ConfigurationError(
            "window attention requires the query and key partitions to be "
            "the same (self-attention only)")
    require(q.shape[0] == part_kv.n_tokens == k.shape[0],
            "window attention needs one query per key token")
    out = np.zeros((q.shape[0], params.n_q_heads, params.head_dim),
                   dtype=DTYPE)
    for row in range(part_kv.n_occupied):
        tids = part_kv.tokens_in_row(row)
        out[tids] = dense_cross_attention(q[tids], k[tids], v[tids], params)
    return out


@dataclass
class GatherTable:
    """Padded per-query token-id table realizing a Selection."""
    ids: np.ndarray      # [N, K] int64, 0 where invalid
    valid: np.ndarray    # [N, K] bool
    lengths: np.ndarray  # [N]


def build_gather_table(sel: Selection, part_kv: BlockPartition,
                       own_block=None, fallback: bool = True) -> GatherTable:
    """Resolve selected block ids to padded token-id rows.

    A query with an empty selection falls back to its own block (when given)
    or to the lowest occupied block id; with fallback off it is an error.
    """
    row_of = part_kv.row_of_block()
    n = sel.n_queries
    token_lists = []
    for qi, ids in enumerate(sel.lists):
        if len(ids) == 0:
            if not fallback:
                raise EmptyAttentionRowError(
                    f"query {qi} has an empty selection and fallback is off")
            if own_block is not None:
                ids = [int(own_block[qi])]
            elif part_kv.n_occupied:
                ids = [int(part_kv.occupied_ids[0])]
            else:
                raise EmptyContextError(
                    "empty selection against an empty partition")
        toks = [part_kv.tokens_in_row(row_of[int(b)]) for b in ids]
        token_lists.append(np.concatenate(toks))
    lengths = np.array([t.size for t in token_lists], dtype=np.int64)
    kmax = int(lengths.max()) if n else 1
    ids_tab = np.zeros((n, kmax), dtype=np.int64)
    valid = np.zeros((n, kmax), dtype=bool)
    for qi, toks in enumerate(token_lists):
        ids_tab[qi, :toks.size] = toks
        valid[qi, :toks.size] = True
    return GatherTable(ids_tab, valid, lengths)


def _masked_group_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                            table: GatherTable, params: AttentionParams
                            ) -> np.ndarray:
    """Chunked padded-gather attention; queries sorted by key count so each
    chunk pads only to its own maximum."""
    n = q.shape[0]
    h_kv, gs, d_h = params.n_kv_heads, params.group_size, params.head_dim
    out = np.zeros((n, params.n_q_heads, d_h), dtype=DTYPE)
    scale = 1.0 / np.sqrt(float(d_h))
    order = np.argsort(table.lengths, kind="stable")
    q64 = np.asarray(q, dtype=ACC)
    k64 = np.asarray(k, dtype=ACC)
    v64 = np.asarray(v, dtype=ACC)
    for lo in range(0, n, SEL_CHUNK):
        sel_rows = order[lo:lo + SEL_CHUNK]
        kmax = int(table.lengths[sel_rows].max())
        ids = table.ids[sel_rows, :kmax]
        valid = table.valid[sel_rows, :kmax]
        # [C, K, h_kv, d_h] gathers, pre-transposed contiguous for matmul
        kg = np.ascontiguousarray(k64[ids].transpose(0, 2, 3, 1))
        vg = np.ascontiguousarray(v64[ids].transpose(0, 2, 1, 3))
        qc = q64[sel_rows].reshape(-1, h_kv, gs, d_h)
        # matmul accumulates the contracted axis sequentially per output
        # element, so a row's result is bit-identical whatever chunk (or
        # worker) computes it and however far the chunk pads; the padded
        # columns carry exactly zero weight
        logits = np.matmul(qc, kg) * scale
        logits += np.where(valid, 0.0, -np.inf)[:, None, None, :]
        logits -= logits.max(axis=3, keepdims=True)
        w = np.exp(logits)
        w /= np.einsum("cmgk->cmg", w)[..., None]
        oc = np.matmul(w, vg)
        out[sel_rows] = oc.reshape(-1, params.n_q_heads, d_h).astype(DTYPE)
    return out


def sel_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                  part_kv: BlockPartition, sel: Selection,
                  params: AttentionParams, own_block=None,
                  fallback: bool = True, table: GatherTable = None
                  ) -> np.ndarray:
    """Attention over the union of original tokens in each query's selected
    blocks.  A prebuilt GatherTable may be passed to amortize indexing when
    the same Selection is reused across layers."""
    if k.shape[0] == 0:
        raise EmptyContextError("selected attention over an empty token set")
    if table is None:
        require(sel.n_queries == q.shape[0],
                f"selection covers {sel.n_queries} queries, got {q.shape[0]}")
        table = build_gather_table(sel, part_kv, own_block, fallback)
    return _masked_group_attention(q, k, v, table, params)


def score_topk_blocks(q: np.ndarray, k_cmp: np.ndarray, b_sel: int,
                      params: AttentionParams, occupied_ids=None) -> Selection:
    """Vanilla selection: rank blocks by attention logits against the
    compressed keys, summed over all query heads; ties go to the lower
    block id.  occupied_ids maps score columns to global block ids."""
    require(b_sel >= 1, "b_sel must be at least 1")
    n_blocks = k_cmp.shape[0]
    if n_blocks == 0:
        raise EmptyContextError("scoring against zero compressed blocks")
    if occupied_ids is None:
        occupied_ids = np.arange(n_blocks, dtype=np.int64)
    occupied_ids = np.asarray(occupied_ids, dtype=np.int64)
    require(occupied_ids.size == n_blocks,
            "occupied_ids must match compressed row count")

    kv_of_q = np.arange(params.n_q_heads) // params.group_size
    k64 = np.asarray(k_cmp, dtype=ACC)[:, kv_of_q, :]
    scores = np.einsum("xhd,yhd->xy", np.asarray(q, dtype=ACC), k64)
    take = min(b_sel, n_blocks)
    # stable argsort on -score keeps ascending column order (= ascending
    # block id) among equal scores
    ranked = np.argsort(-scores, axis=1, kind="stable")[:, :take]
    return Selection([occupied_ids[row] for row in ranked])


# ---------------------------------------------------------------------------
# gated combination


@dataclass
class NsaWeights:
    w_q: np.ndarray          # [d, h_q*d_h]
    w_k: np.ndarray          # [d, h_kv*d_h]
    w_v: np.ndarray          # [d, h_kv*d_h]
    w_o: np.ndarray          # [h_q*d_h, d]
    gate_w: np.ndarray       # [d, n_gates*d]
    gate_b: np.ndarray       # [n_gates*d]
    compress: CompressWeights
    n_gates: int             # 3 for self pairs, 2 for cross pairs


def init_nsa_weights(seed: int, params: AttentionParams, n_gates: int,
                     *tags, scale: float = 0.02) -> NsaWeights:
    d = params.model_dim
    kv_w = params.n_kv_heads * params.head_dim
    return NsaWeights(
        w_q=rng.normal_f32(seed, (d, d), scale, *tags, "wq"),
        w_k=rng.normal_f32(seed, (d, kv_w), scale, *tags, "wk"),
        w_v=rng.normal_f32(seed, (d, kv_w), scale, *tags, "wv"),
        w_o=rng.normal_f32(seed, (d, d), scale, *tags, "wo"),
        gate_w=rng.normal_f32(seed, (d, n_gates * d), scale, *tags, "gate"),
        gate_b=np.zeros(n_gates * d, dtype=DTYPE),
        compress=init_compress_weights(seed, kv_w, *tags),
        n_gates=n_gates)


def nsa_gates(x: np.ndarray, w: NsaWeights):
    """Per-token sigmoid gate vectors, one width-d slice per branch."""
    g = sigmoid(affine(x, w.gate_w, w.gate_b))
    d = x.shape[1]
    return tuple(g[:, i * d:(i + 1) * d] for i in range(w.n_gates))


def combine_nsa_branches(x: np.ndarray, branch_outs, w: NsaWeights
                         ) -> np.ndarray:
    """Gate raw branch outputs (already concatenated to width d), sum, then
    apply the shared output projection.  Shared by serial and parallel
    execution so both take the identical float path."""
    gates = nsa_gates(x, w)
    require(len(branch_outs) == w.n_gates,
            f"{len(branch_outs)} branch outputs for {w.n_gates} gates")
    merged = np.zeros(x.shape, dtype=ACC)
    for g, o in zip(gates, branch_outs):
        merged += g.astype(ACC) * o.astype(ACC)
    return affine(merged.astype(DTYPE), w.w_o)


def nsa_cross_attention(x: np.ndarray, kv_feats: np.ndarray,
                        part_q: BlockPartition, part_kv: BlockPartition,
                        sel, w: NsaWeights, params: AttentionParams,
                        table: GatherTable = None, b_sel: int = None,
                        return_selection: bool = False):
    """One gated sparse attention application; returns [Nx, d].

    Self pairs (n_gates == 3) run cmp+sel+win over the query's own token
    set; cross pairs (n_gates == 2) run cmp+sel against the other modality.
    With sel=None the selection is scored from the compressed keys at this
    layer's activations (vanilla mode, budget b_sel); a prebuilt table may
    be passed when a fixed Selection is reused across layers.
    """
    d = params.model_dim
    require(x.shape[1] == d, f"query width {x.shape[1]} != model dim {d}")
    n = x.shape[0]
    q = affine(x, w.w_q).reshape(n, params.n_q_heads, params.head_dim)
    k = affine(kv_feats, w.w_k).reshape(-1, params.n_kv_heads,
                                        params.head_dim)
    v = affine(kv_feats, w.w_v).reshape(-1, params.n_kv_heads,
                                        params.head_dim)
    k_cmp, v_cmp = compress_block_kv(k, v, part_kv, w.compress)
    if sel is None:
        require(b_sel is not None,
                "either a Selection or a scoring budget b_sel is required")
        sel = score_topk_blocks(q, k_cmp, b_sel, params,
                                part_kv.occupied_ids)
        table = None

    is_self = w.n_gates == 3
    own = part_kv.block_of_token if is_self else None
    outs = [cmp_attention(q, k_cmp, v_cmp, params).reshape(n, d),
            sel_attention(q, k, v, part_kv, sel, params, own_block=own,
                          table=table).reshape(n, d)]
    if is_self:
        outs.append(win_attention(q, k, v, part_q, part_kv, params)
                    .reshape(n, d))
    out = combine_nsa_branches(x, outs, w)
    if return_selection:
        return out, sel
    return out
