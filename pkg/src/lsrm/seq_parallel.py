"""Simulated block-aware sequence parallelism for the sparse stage.

Workers are logical partitions run under a deterministic scheduler (a real
thread pool when LSRM_THREADS allows, else a loop; results are identical
either way because phase writes are row-disjoint).  Blocks are assigned
whole, never split, by greedy longest-processing-time over token counts.
Tokens reach their workers through an explicit all-to-all from a naive
contiguous producer split; each sparse attention use all-gathers KV
(original and compressed) while queries stay sharded; window attention runs
entirely worker-local and logs zero bytes.

Every collective appends (phase, kind, src, dst, bytes) records to the
topology's message log, and the outputs land in globally ordered arrays, so
parity with the serial stage is a straight array compare.
"""

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .block_partition import BlockPartition, res_block
from .errors import ProtocolError, require
from .nsa_attention import (GatherTable, build_gather_table, cmp_attention,
                            combine_nsa_branches, score_topk_blocks,
                            sel_attention)
from .recon_pipeline import SparseContext, _use_gates, ffn_forward
from .tensor_core import (ACC, DTYPE, AttentionParams, affine,
                          dense_cross_attention, layer_norm)
from .tokenizer import TokenSet

TOKEN_COORD_BYTES = 12     # three u32 spatial coords per moved token


@dataclass
class WorkerTopology:
    n_workers: int
    vol_rows: list                 # occupied-row indices per worker
    img_rows: list
    vol_tokens: list               # global token ids per worker, in
    img_tokens: list               # ascending (block id, token id) order
    loads: np.ndarray
    message_log: list = dc_field(default_factory=list)

    def assignment(self, part: BlockPartition, modality: str) -> np.ndarray:
        """Global block id -> worker id (-1 for unoccupied blocks)."""
        rows = self.vol_rows if modality == "volume" else self.img_rows
        out = np.full(part.n_blocks_total, -1, dtype=np.int64)
        for w, rr in enumerate(rows):
            out[part.occupied_ids[rr]] = w
        return out

    def log(self, phase: str, kind: str, src: int, dst: int,
            n_bytes: int) -> None:
        self.message_log.append((phase, kind, int(src), int(dst),
                                 int(n_bytes)))


def message_log_to_csv(log, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "kind", "src", "dst", "bytes"])
        writer.writerows(log)


def _worker_threads(n_workers: int) -> int:
    cap = os.environ.get("LSRM_THREADS")
    if cap is None:
        return 1
    try:
        return max(1, min(int(cap), n_workers))
    except ValueError:
        return 1


def _run_phase(fns, n_threads: int):
    """Run one per-worker phase; workers write disjoint rows, so any
    interleaving gives the same arrays.  Per-worker results come back in
    worker order regardless of completion order."""
    if n_threads <= 1 or len(fns) <= 1:
        return [fn() for fn in fns]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        futures = [pool.submit(fn) for fn in fns]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# sharding


def shard_blocks(part_vol: BlockPartition, part_img: BlockPartition,
                 n_workers: int) -> WorkerTopology:
    """Greedy LPT over the pooled volume+image blocks.

    Blocks are taken in occupancy-descending order (ties: volume before
    image, then lower block id) and each goes to the currently lightest
    worker (ties: lower worker id).  Loads count tokens.
    """
    require(n_workers >= 1, "need at least one worker")
    entries = []
    for mod_rank, part in ((0, part_vol), (1, part_img)):
        for row in range(part.n_occupied):
            entries.append((-int(part.occupancy[row]), mod_rank,
                            int(part.occupied_ids[row]), row))
    entries.sort()
    loads = np.zeros(n_workers, dtype=np.int64)
    vol_rows = [[] for _ in range(n_workers)]
    img_rows = [[] for _ in range(n_workers)]
    for neg_occ, mod_rank, _bid, row in entries:
        w = int(np.argmin(loads))          # argmin returns the lowest index
        loads[w] += -neg_occ
        (vol_rows if mod_rank == 0 else img_rows)[w].append(row)
    vol_rows = [np.array(sorted(r), dtype=np.int64) for r in vol_rows]
    img_rows = [np.array(sorted(r), dtype=np.int64) for r in img_rows]

    def tokens_of(part, rows_per_worker):
        out = []
        for rr in rows_per_worker:
            if rr.size:
                out.append(np.concatenate(
                    [part.tokens_in_row(r) for r in rr]))
            else:
                out.append(np.zeros(0, dtype=np.int64))
        return out

    return WorkerTopology(
        n_workers=n_workers, vol_rows=vol_rows, img_rows=img_rows,
        vol_tokens=tokens_of(part_vol, vol_rows),
        img_tokens=tokens_of(part_img, img_rows), loads=loads)


def naive_contiguous_shards(n_tokens: int, n_workers: int):
    """Producer layout: the token sequence split into contiguous
    near-equal runs, ignoring block boundaries."""
    edges = np.linspace(0, n_tokens, n_workers + 1).astype(np.int64)
    return [np.arange(lo, hi, dtype=np.int64)
            for lo, hi in zip(edges[:-1], edges[1:])]


# ---------------------------------------------------------------------------
# collectives (accounting + invariant checks; data moves in-process)


def all_to_all(shards_in, shards_out, topology: WorkerTopology, phase: str,
               bytes_per_token: int):
    """Re-shard tokens from one layout to another.

    Validates conservation of the token set, logs cross-worker bytes per
    ordered pair, and returns shards_out.
    """
    n = topology.n_workers
    require(len(shards_in) == n and len(shards_out) == n,
            "shard lists must have one entry per worker")
    src_of = {}
    for w, ids in enumerate(shards_in):
        for t in ids.tolist():
            if t in src_of:
                raise ProtocolError(f"token {t} produced by two workers")
            src_of[t] = w
    moved = np.zeros((n, n), dtype=np.int64)
    for dst, ids in enumerate(shards_out):
        for t in ids.tolist():
            if t not in src_of:
                raise ProtocolError(
                    f"token {t} requested by worker {dst} was never "
                    f"produced")
            moved[src_of[t], dst] += 1
    total_in = sum(ids.size for ids in shards_in)
    if int(moved.sum()) != total_in:
        raise ProtocolError("all-to-all does not conserve the token set")
    for src in range(n):
        for dst in range(n):
            if src != dst and moved[src, dst]:
                topology.log(phase, "all_to_all", src, dst,
                             int(moved[src, dst]) * bytes_per_token)
    return shards_out


def all_gather_kv(local_parts, topology: WorkerTopology, phase: str):
    """Replicate per-worker KV so every worker sees the global tensors.

    local_parts: one dict per worker with keys k, v (token rows, worker's
    canonical order), k_cmp, v_cmp (one row per owned block, ascending),
    token_ids, block_rows.  Returns (k, v, k_cmp, v_cmp): k and v indexed
    by global token id, compressed rows in ascending occupied-row order.
    """
    n = topology.n_workers
    block_rows = np.concatenate([p["block_rows"] for p in local_parts])
    if not np.array_equal(np.sort(block_rows),
                          np.arange(block_rows.size, dtype=np.int64)):
        raise ProtocolError(
            "worker block ownership does not tile the occupied blocks")
    order = np.argsort(block_rows, kind="stable")
    k_cmp = np.concatenate([p["k_cmp"] for p in local_parts])[order]
    v_cmp = np.concatenate([p["v_cmp"] for p in local_parts])[order]

    token_ids = np.concatenate([p["token_ids"] for p in local_parts])
    if not np.array_equal(np.sort(token_ids),
                          np.arange(token_ids.size, dtype=np.int64)):
        raise ProtocolError(
            "worker token ownership does not tile the token sequence")
    shape_tail = local_parts[0]["k"].shape[1:]
    k_tok = np.zeros((token_ids.size,) + shape_tail, dtype=DTYPE)
    v_tok = np.zeros((token_ids.size,) + shape_tail, dtype=DTYPE)
    for p in local_parts:
        k_tok[p["token_ids"]] = p["k"]
        v_tok[p["token_ids"]] = p["v"]

    kv_bytes = [4 * 2 * (p["k"].size + p["k_cmp"].size)
                for p in local_parts]
    for src in range(n):
        for dst in range(n):
            if src != dst and kv_bytes[src]:
                topology.log(phase, "all_gather_kv", src, dst,
                             kv_bytes[src])
    return k_tok, v_tok, k_cmp, v_cmp


# ---------------------------------------------------------------------------
# parallel sparse stage


def _local_kv(kv_hat, part: BlockPartition, rows, tids, w_use,
              params: AttentionParams):
    """Project and compress KV for one worker's own tokens.

    Mirrors the serial float path exactly: the projections and residual
    transform are row ops, and the in-block mean sums each block's rows
    sequentially in ascending token order.
    """
    h_kv, d_h = params.n_kv_heads, params.head_dim
    width = h_kv * d_h
    k = affine(kv_hat[tids], w_use.w_k).reshape(-1, h_kv, d_h)
    v = affine(kv_hat[tids], w_use.w_v).reshape(-1, h_kv, d_h)
    if rows.size:
        counts = part.occupancy[rows]
        offs = np.concatenate([[0], np.cumsum(counts[:-1])]).astype(np.int64)
        cmp_kv = []
        for tensor, p in ((k, w_use.compress.for_k),
                          (v, w_use.compress.for_v)):
            r64 = res_block(tensor.reshape(-1, width), p).astype(np.float64)
            sums = np.add.reduceat(r64, offs, axis=0)
            cmp_kv.append((sums / counts[:, None]).astype(DTYPE)
                          .reshape(-1, h_kv, d_h))
        k_cmp, v_cmp = cmp_kv
    else:
        k_cmp = np.zeros((0, h_kv, d_h), dtype=DTYPE)
        v_cmp = k_cmp.copy()
    return {"k": k, "v": v, "k_cmp": k_cmp, "v_cmp": v_cmp,
            "token_ids": tids, "block_rows": rows}


def _worker_table(ctx: SparseContext, name: str, tids) -> GatherTable:
    tab = ctx.tables[name]
    return GatherTable(tab.ids[tids], tab.valid[tids], tab.lengths[tids])


def _run_use(topology: WorkerTopology, q_is_vol: bool, kv_is_vol: bool,
             q_hat, kv_hat, part_q: BlockPartition, part_kv: BlockPartition,
             w_use, name: str, ctx: SparseContext,
             params: AttentionParams, phase: str, n_threads: int):
    """One sparse attention use across all workers; returns the [Nq, d]
    output in global token order."""
    d = params.model_dim
    h_q, d_h = params.n_q_heads, params.head_dim
    q_tokens = topology.vol_tokens if q_is_vol else topology.img_tokens
    kv_tokens = topology.vol_tokens if kv_is_vol else topology.img_tokens
    kv_rows = topology.vol_rows if kv_is_vol else topology.img_rows
    is_self = w_use.n_gates == 3

    local_parts = _run_phase(
        [lambda wk=wk: _local_kv(kv_hat, part_kv, kv_rows[wk],
                                 kv_tokens[wk], w_use, params)
         for wk in range(topology.n_workers)], n_threads)
    k_tok, v_tok, k_cmp, v_cmp = all_gather_kv(local_parts, topology,
                                               f"{phase}/{name}")

    out = np.zeros((q_hat.shape[0], d), dtype=DTYPE)

    def attend(wk):
        tids = q_tokens[wk]
        if tids.size == 0:
            return []
        q = affine(q_hat[tids], w_use.w_q).reshape(-1, h_q, d_h)
        if ctx.selections is not None:
            table = _worker_table(ctx, name, tids)
        else:
            sel = score_topk_blocks(q, k_cmp, ctx.budgets[name], params,
                                    part_kv.occupied_ids)
            own = part_kv.block_of_token[tids] if is_self else None
            table = build_gather_table(sel, part_kv, own_block=own)
        outs = [cmp_attention(q, k_cmp, v_cmp, params).reshape(-1, d),
                sel_attention(q, k_tok, v_tok, part_kv, None, params,
                              table=table).reshape(-1, d)]
        logs = []
        if is_self:
            # window attention touches only this worker's own blocks;
            # keys come from the local projection, nothing was received
            loc = local_parts[wk]
            o_win = np.zeros((tids.size, h_q, d_h), dtype=DTYPE)
            pos = 0
            for r in kv_rows[wk]:
                c = int(part_kv.occupancy[r])
                sl = slice(pos, pos + c)
                o_win[sl] = dense_cross_attention(
                    q[sl], loc["k"][sl], loc["v"][sl], params)
                pos += c
            outs.append(o_win.reshape(-1, d))
            logs.append((f"{phase}/{name}/win", "window", wk, wk, 0))
        out[tids] = combine_nsa_branches(q_hat[tids], outs, w_use)
        return logs

    for rows in _run_phase([lambda wk=wk: attend(wk)
                            for wk in range(topology.n_workers)], n_threads):
        topology.message_log.extend(rows)
    return out


def parallel_sparse_stage(x_up: TokenSet, y_up: TokenSet, weights,
                          ctx: SparseContext, params: AttentionParams,
                          n_workers: int):
    """Sharded execution of the sparse residual stage.

    Returns (x_s, y_s, topology) with the states in global token order;
    they must match the serial stage within acceptance tolerance.  The
    topology's message log records the initial all-to-all, every per-use
    KV all-gather, the zero-byte window phases, and the return all-to-all.
    """
    part_vol, part_img = ctx.part_vol, ctx.part_img
    require(x_up.count == part_vol.n_tokens and
            y_up.count == part_img.n_tokens,
            "token sets do not match the partitions in the context")
    require(x_up.count > 0 and y_up.count > 0,
            "parallel stage needs nonempty token streams")
    d = params.model_dim
    topology = shard_blocks(part_vol, part_img, n_workers)
    n_threads = _worker_threads(n_workers)

    # dispatch: producer layout -> block-aligned layout (image token ids
    # offset past the volume ids so both modalities share one id space)
    n_x = x_up.count
    block_aligned = [np.concatenate([topology.vol_tokens[w],
                                     topology.img_tokens[w] + n_x])
                     for w in range(n_workers)]
    all_to_all(naive_contiguous_shards(n_x + y_up.count, n_workers),
               block_aligned, topology, "dispatch",
               4 * d + TOKEN_COORD_BYTES)

    x = np.zeros_like(x_up.features)
    y = np.zeros_like(y_up.features)

    for m, w in enumerate(weights):
        phase = f"layer{m}"
        xe = np.zeros_like(x)
        ye = np.zeros_like(y)
        x_hat = np.zeros_like(x)
        y_hat = np.zeros_like(y)

        def prep(wk):
            tv = topology.vol_tokens[wk]
            ti = topology.img_tokens[wk]
            if tv.size:
                inj = affine(x_up.features[tv], w.inj_x)
                xe[tv] = (x[tv].astype(ACC) + inj.astype(ACC)).astype(DTYPE)
                x_hat[tv] = layer_norm(xe[tv], w.ln_attn_x.gamma,
                                       w.ln_attn_x.beta)
            if ti.size:
                inj = affine(y_up.features[ti], w.inj_y)
                ye[ti] = (y[ti].astype(ACC) + inj.astype(ACC)).astype(DTYPE)
                y_hat[ti] = layer_norm(ye[ti], w.ln_attn_y.gamma,
                                       w.ln_attn_y.beta)

        _run_phase([lambda wk=wk: prep(wk) for wk in range(n_workers)],
                   n_threads)

        o = {}
        for name, q_is_vol, kv_is_vol, q_hat, kv_hat, pq, pkv, wu in (
                ("v2v", True, True, x_hat, x_hat, part_vol, part_vol,
                 w.nsa_x_self),
                ("v2i", True, False, x_hat, y_hat, part_vol, part_img,
                 w.nsa_x_cross),
                ("i2i", False, False, y_hat, y_hat, part_img, part_img,
                 w.nsa_y_self),
                ("i2v", False, True, y_hat, x_hat, part_img, part_vol,
                 w.nsa_y_cross)):
            o[name] = _run_use(topology, q_is_vol, kv_is_vol, q_hat, kv_hat,
                               pq, pkv, wu, name, ctx, params, phase,
                               n_threads)

        def finish(wk):
            tv = topology.vol_tokens[wk]
            ti = topology.img_tokens[wk]
            if tv.size:
                gs, gc = _use_gates(x_hat[tv], w.gate_x_w, w.gate_x_b)
                o_x = (gs.astype(ACC) * o["v2v"][tv].astype(ACC)
                       + gc.astype(ACC) * o["v2i"][tv].astype(ACC))
                x1 = (xe[tv].astype(ACC) + o_x).astype(DTYPE)
                x[tv] = (x1.astype(ACC) + ffn_forward(
                    layer_norm(x1, w.ln_ffn_x.gamma, w.ln_ffn_x.beta),
                    w.ffn_x).astype(ACC)).astype(DTYPE)
            if ti.size:
                gs, gc = _use_gates(y_hat[ti], w.gate_y_w, w.gate_y_b)
                o_y = (gs.astype(ACC) * o["i2i"][ti].astype(ACC)
                       + gc.astype(ACC) * o["i2v"][ti].astype(ACC))
                y1 = (ye[ti].astype(ACC) + o_y).astype(DTYPE)
                y[ti] = (y1.astype(ACC) + ffn_forward(
                    layer_norm(y1, w.ln_ffn_y.gamma, w.ln_ffn_y.beta),
                    w.ffn_y).astype(ACC)).astype(DTYPE)

        _run_phase([lambda wk=wk: finish(wk) for wk in range(n_workers)],
                   n_threads)

    x_s = np.zeros_like(x)
    y_s = np.zeros_like(y)

    def residual(wk):
        tv = topology.vol_tokens[wk]
        ti = topology.img_tokens[wk]
        if tv.size:
            x_s[tv] = (x[tv].astype(ACC)
                       + x_up.features[tv].astype(ACC)).astype(DTYPE)
        if ti.size:
            y_s[ti] = (y[ti].astype(ACC)
                       + y_up.features[ti].astype(ACC)).astype(DTYPE)

    _run_phase([lambda wk=wk: residual(wk) for wk in range(n_workers)],
               n_threads)

    all_to_all(block_aligned,
               naive_contiguous_shards(n_x + y_up.count, n_workers),
               topology, "return", 4 * d + TOKEN_COORD_BYTES)
    return x_s, y_s, topology


# ---------------------------------------------------------------------------
# load-balance reporting


def makespan_ratio(loads: np.ndarray, n_workers: int) -> float:
    total = float(np.sum(loads))
    if total == 0.0:
        return 1.0
    return float(np.max(loads)) / (total / n_workers)


def naive_split_loads(part_vol: BlockPartition, part_img: BlockPartition,
                      n_workers: int) -> np.ndarray:
    """Baseline: the occupied block sequence (volume then image, ascending
    block id) cut into contiguous runs of near-equal block count."""
    occ = np.concatenate([part_vol.occupancy, part_img.occupancy])
    runs = np.array_split(occ, n_workers)
    return np.array([int(r.sum()) for r in runs], dtype=np.int64)


def imbalance_report(instances, n_workers: int):
    """Per (part_vol, part_img) pair: block-aware LPT loads and max/mean
    ratio versus the naive contiguous split."""
    report = []
    for part_vol, part_img in instances:
        topo = shard_blocks(part_vol, part_img, n_workers)
        naive = naive_split_loads(part_vol, part_img, n_workers)
        report.append({
            "loads": topo.loads.tolist(),
            "naive_loads": naive.tolist(),
            "ratio_block_aware": makespan_ratio(topo.loads, n_workers),
            "ratio_naive": makespan_ratio(naive, n_workers),
        })
    return report
