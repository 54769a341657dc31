"""End-to-end forward passes.

Stage 1: a dense dual-stream transformer over volume tokens x and image
tokens y.  Each block applies a gated mixture of four attention uses
(x-self, x-cross, y-self, y-cross), every use a full multi-head attention
with grouped-query KV, then per-stream feed-forward residuals.

Stage 2: a sparse residual transformer over the upsampled active tokens.
The running state starts at zero; each layer adds a per-layer linear
injection of the frozen upsampled Stage-1 tokens to its input, and every
attention use is the gated three/two-branch sparse form.  The final output
adds the upsampled Stage-1 tokens back on (residual formulation), so a
stage with all-zero weights reproduces them exactly.

Decoding: volume tokens decode to a feature grid 4x finer per axis via one
affine map per token; point queries trilinearly interpolate features and
run small MLP heads (sigmoid channels, plus an SDF head with a fixed
bounding-sphere offset).
"""

from dataclasses import dataclass

import numpy as np

from . import rng
from .block_partition import BlockPartition
from .camera_geometry import s_bias_many
from .errors import ConfigurationError, require
from .nsa_attention import (NsaWeights, build_gather_table,
                            init_nsa_weights, nsa_cross_attention)
from .tensor_core import (ACC, DTYPE, AttentionParams, _trilinear_prepare,
                          affine, dense_cross_attention, layer_norm,
                          mlp_forward, sigmoid, trilinear_interpolate_many)
from .tokenizer import TokenSet

T_SIDE = 4          # per-axis decode upsampling
FEATURE_DIM = 32    # decoded feature channels


# ---------------------------------------------------------------------------
# shared sublayer parameter bundles


@dataclass
class MhaWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray


@dataclass
class FfnWeights:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class NormParams:
    gamma: np.ndarray
    beta: np.ndarray


def init_mha(seed: int, params: AttentionParams, *tags,
             scale: float = 0.02) -> MhaWeights:
    d = params.model_dim
    kv_w = params.n_kv_heads * params.head_dim
    return MhaWeights(
        w_q=rng.normal_f32(seed, (d, d), scale, *tags, "wq"),
        w_k=rng.normal_f32(seed, (d, kv_w), scale, *tags, "wk"),
        w_v=rng.normal_f32(seed, (d, kv_w), scale, *tags, "wv"),
        w_o=rng.normal_f32(seed, (d, d), scale, *tags, "wo"))


def init_ffn(seed: int, d: int, *tags, scale: float = 0.02) -> FfnWeights:
    hidden = 4 * d
    return FfnWeights(
        w1=rng.normal_f32(seed, (d, hidden), scale, *tags, "w1"),
        b1=np.zeros(hidden, dtype=DTYPE),
        w2=rng.normal_f32(seed, (hidden, d), scale, *tags, "w2"),
        b2=np.zeros(d, dtype=DTYPE))


def init_norm(d: int) -> NormParams:
    return NormParams(np.ones(d, dtype=DTYPE), np.zeros(d, dtype=DTYPE))


def mha_forward(q_in: np.ndarray, kv_in: np.ndarray, w: MhaWeights,
                params: AttentionParams) -> np.ndarray:
    """Full multi-head attention including the output projection."""
    n = q_in.shape[0]
    q = affine(q_in, w.w_q).reshape(n, params.n_q_heads, params.head_dim)
    k = affine(kv_in, w.w_k).reshape(-1, params.n_kv_heads, params.head_dim)
    v = affine(kv_in, w.w_v).reshape(-1, params.n_kv_heads, params.head_dim)
    o = dense_cross_attention(q, k, v, params)
    return affine(o.reshape(n, params.model_dim), w.w_o)


def ffn_forward(x: np.ndarray, w: FfnWeights) -> np.ndarray:
    return mlp_forward(x, [(w.w1, w.b1, "gelu"), (w.w2, w.b2, "identity")])


def _use_gates(x_hat: np.ndarray, gate_w, gate_b):
    """Two width-d sigmoid gates (self use, cross use) per token."""
    g = sigmoid(affine(x_hat, gate_w, gate_b))
    d = x_hat.shape[1]
    return g[:, :d], g[:, d:]


# ---------------------------------------------------------------------------
# stage 1: dense blocks


@dataclass
class DenseBlockWeights:
    x_self: MhaWeights
    x_cross: MhaWeights
    y_self: MhaWeights
    y_cross: MhaWeights
    gate_x_w: np.ndarray
    gate_x_b: np.ndarray
    gate_y_w: np.ndarray
    gate_y_b: np.ndarray
    ln_attn_x: NormParams
    ln_attn_y: NormParams
    ln_ffn_x: NormParams
    ln_ffn_y: NormParams
    ffn_x: FfnWeights
    ffn_y: FfnWeights


def init_dense_block(seed: int, params: AttentionParams, layer: int,
                     scale: float = 0.02) -> DenseBlockWeights:
    d = params.model_dim
    tag = f"dense{layer}"
    return DenseBlockWeights(
        x_self=init_mha(seed, params, tag, "xs", scale=scale),
        x_cross=init_mha(seed, params, tag, "xc", scale=scale),
        y_self=init_mha(seed, params, tag, "ys", scale=scale),
        y_cross=init_mha(seed, params, tag, "yc", scale=scale),
        gate_x_w=rng.normal_f32(seed, (d, 2 * d), scale, tag, "gx"),
        gate_x_b=np.zeros(2 * d, dtype=DTYPE),
        gate_y_w=rng.normal_f32(seed, (d, 2 * d), scale, tag, "gy"),
        gate_y_b=np.zeros(2 * d, dtype=DTYPE),
        ln_attn_x=init_norm(d), ln_attn_y=init_norm(d),
        ln_ffn_x=init_norm(d), ln_ffn_y=init_norm(d),
        ffn_x=init_ffn(seed, d, tag, "fx", scale=scale),
        ffn_y=init_ffn(seed, d, tag, "fy", scale=scale))


def dense_block_forward(x: np.ndarray, y: np.ndarray, w: DenseBlockWeights,
                        params: AttentionParams):
    """Pre-norm residual block; both streams update from the same pre-block
    state.  Returns (x', y')."""
    require(x.shape[0] > 0 and y.shape[0] > 0,
            "dense block needs nonempty token streams")
    d = params.model_dim
    require(x.shape[1] == d and y.shape[1] == d, "token width mismatch")
    x_hat = layer_norm(x, w.ln_attn_x.gamma, w.ln_attn_x.beta)
    y_hat = layer_norm(y, w.ln_attn_y.gamma, w.ln_attn_y.beta)

    gx_self, gx_cross = _use_gates(x_hat, w.gate_x_w, w.gate_x_b)
    gy_self, gy_cross = _use_gates(y_hat, w.gate_y_w, w.gate_y_b)

    o_x = (gx_self.astype(ACC) * mha_forward(x_hat, x_hat, w.x_self,
                                             params).astype(ACC)
           + gx_cross.astype(ACC) * mha_forward(x_hat, y_hat, w.x_cross,
                                                params).astype(ACC))
    o_y = (gy_self.astype(ACC) * mha_forward(y_hat, y_hat, w.y_self,
                                             params).astype(ACC)
           + gy_cross.astype(ACC) * mha_forward(y_hat, x_hat, w.y_cross,
                                                params).astype(ACC))
    x1 = (x.astype(ACC) + o_x).astype(DTYPE)
    y1 = (y.astype(ACC) + o_y).astype(DTYPE)
    x2 = (x1.astype(ACC) + ffn_forward(
        layer_norm(x1, w.ln_ffn_x.gamma, w.ln_ffn_x.beta),
        w.ffn_x).astype(ACC)).astype(DTYPE)
    y2 = (y1.astype(ACC) + ffn_forward(
        layer_norm(y1, w.ln_ffn_y.gamma, w.ln_ffn_y.beta),
        w.ffn_y).astype(ACC)).astype(DTYPE)
    return x2, y2


def dense_stage_forward(x0: np.ndarray, y0: np.ndarray, weights,
                        params: AttentionParams):
    x, y = x0, y0
    for w in weights:
        x, y = dense_block_forward(x, y, w, params)
    return x, y


# ---------------------------------------------------------------------------
# decode


@dataclass
class DecodeWeights:
    weight: np.ndarray     # [d, T_SIDE^3 * d_f]
    bias: np.ndarray


def init_decode(seed: int, d: int, *tags, d_f: int = FEATURE_DIM,
                scale: float = 0.02) -> DecodeWeights:
    out = (T_SIDE ** 3) * d_f
    return DecodeWeights(rng.normal_f32(seed, (d, out), scale, *tags, "dec"),
                         np.zeros(out, dtype=DTYPE))


def _scatter_decode(vectors: np.ndarray, side: int, d_f: int) -> np.ndarray:
    """[side^3, T^3*d_f] token vectors (lexicographic i,j,k order) into the
    [4*side]^3 fine grid.  Each token vector is read as [dz, dy, dx, d_f]
    with dx fastest among the spatial offsets; fine cell
    (4i+dx, 4j+dy, 4k+dz) takes that slice."""
    t = T_SIDE
    blocks = vectors.reshape(side, side, side, t, t, t, d_f)
    # axes (i, j, k, dz, dy, dx, c) -> (i, dx, j, dy, k, dz, c)
    fine = blocks.transpose(0, 5, 1, 4, 2, 3, 6)
    return np.ascontiguousarray(fine.reshape(side * t, side * t, side * t,
                                             d_f))


def decode_feature_volume(x_d: np.ndarray, w: DecodeWeights,
                          d_f: int = FEATURE_DIM) -> np.ndarray:
    """Dense feature grid from the coarse token sequence."""
    n = x_d.shape[0]
    side = round(n ** (1.0 / 3.0))
    if side ** 3 != n:
        raise ConfigurationError(f"{n} tokens is not a cubic grid")
    vec = affine(x_d, w.weight, w.bias)
    require(vec.shape[1] == (T_SIDE ** 3) * d_f, "decode width mismatch")
    return _scatter_decode(vec, side, d_f)


def build_sparse_features(tokens: TokenSet, w: DecodeWeights,
                          d_f: int = FEATURE_DIM):
    """Decode fine volume tokens into per-cell features on the 4x grid.

    Returns (index, rows): index is [S_f,S_f,S_f] int64 with -1 for absent
    cells, rows is [M, d_f]; entries exist exactly for the 4^3 cells of
    each active token's voxel.
    """
    require(tokens.modality == "volume", "sparse decode needs volume tokens")
    s_fine_tok = tokens.grid_res[0]
    s_f = T_SIDE * s_fine_tok
    index = np.full((s_f, s_f, s_f), -1, dtype=np.int64)
    if tokens.count == 0:
        return index, np.zeros((0, d_f), dtype=DTYPE)
    vec = affine(tokens.features, w.weight, w.bias)
    t = T_SIDE
    # same per-token layout as the dense scatter: [dz, dy, dx, c]
    cell = vec.reshape(-1, t, t, t, d_f).transpose(0, 3, 2, 1, 4)  # dx,dy,dz
    rows = np.ascontiguousarray(cell.reshape(-1, d_f))
    offs = np.arange(t)
    dx, dy, dz = np.meshgrid(offs, offs, offs, indexing="ij")
    base = tokens.coords * t
    xi = (base[:, 0, None] + dx.ravel()[None, :]).ravel()
    yi = (base[:, 1, None] + dy.ravel()[None, :]).ravel()
    zi = (base[:, 2, None] + dz.ravel()[None, :]).ravel()
    index[xi, yi, zi] = np.arange(rows.shape[0])
    return index, rows


@dataclass
class FeatureVolume:
    dense: np.ndarray              # [S_df,S_df,S_df,d_f]
    sparse_index: np.ndarray = None    # [S_f,S_f,S_f] int64, -1 absent
    sparse_rows: np.ndarray = None     # [M, d_f]

    @property
    def s_df(self) -> int:
        return self.dense.shape[0]

    @property
    def s_f(self):
        return None if self.sparse_index is None else \
            self.sparse_index.shape[0]


@dataclass
class DecoderHeads:
    z_layers: list     # mlp_forward layers ending in sigmoid
    s_layers: list     # mlp_forward layers ending in identity


def init_decoder_heads(seed: int, d_f: int = FEATURE_DIM,
                       z_channels: int = 3, hidden: int = 64,
                       scale: float = 0.02) -> DecoderHeads:
    def head(tag, out_dim, act):
        w1 = rng.normal_f32(seed, (d_f, hidden), scale, "head", tag, "w1")
        w2 = rng.normal_f32(seed, (hidden, out_dim), scale, "head", tag,
                            "w2")
        return [(w1, np.zeros(hidden, dtype=DTYPE), "gelu"),
                (w2, np.zeros(out_dim, dtype=DTYPE), act)]
    return DecoderHeads(head("z", z_channels, "sigmoid"),
                        head("s", 1, "identity"))


def query_field(fv: FeatureVolume, mask: np.ndarray,
                points: np.ndarray) -> np.ndarray:
    """Feature lookup with a sparse/dense boundary blend.

    Interpolation corners live on the sparse fine grid; a corner is active
    when its parent voxel is mask-true.  All corners active: pure sparse
    trilinear.  None: pure dense trilinear.  Otherwise the sparse
    interpolant substitutes dense features at missing corners and the
    output blends lam*sparse' + (1-lam)*dense with lam = active fraction.
    """
    require(fv.sparse_index is not None, "feature volume has no sparse part")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    s_f = fv.s_f
    require(mask.shape[0] * T_SIDE == s_f,
            "mask resolution does not match the sparse grid")
    i0, frac = _trilinear_prepare(pts, s_f)
    n = pts.shape[0]
    d_f = fv.sparse_rows.shape[1] if fv.sparse_rows.size else \
        fv.dense.shape[3]

    sparse_acc = np.zeros((n, d_f), dtype=np.float64)
    active_corners = np.zeros(n, dtype=np.int64)
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                ci = i0 + np.array([dx, dy, dz])
                row = fv.sparse_index[ci[:, 0], ci[:, 1], ci[:, 2]]
                have = row >= 0
                active_corners += have
                corner = np.empty((n, d_f), dtype=np.float64)
                if have.any():
                    corner[have] = fv.sparse_rows[row[have]]
                if (~have).any():
                    # dense stand-in evaluated at the corner's cell center
                    centers = (ci[~have] + 0.5) / s_f
                    corner[~have] = trilinear_interpolate_many(
                        fv.dense, centers)
                sparse_acc += (wx * wy * wz)[:, None] * corner
    lam = active_corners.astype(np.float64)[:, None] / 8.0
    dense_val = trilinear_interpolate_many(fv.dense, pts).astype(np.float64)
    out = lam * sparse_acc + (1.0 - lam) * dense_val
    return out.astype(DTYPE)


def decode_points(fv: FeatureVolume, heads: DecoderHeads,
                  points: np.ndarray, mask: np.ndarray = None):
    """(z, s) at query points: z through the sigmoid head, s through the SDF
    head plus the bounding-sphere offset.  Uses the blended sparse query
    when the volume has a sparse part, else the dense grid."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if fv.sparse_index is not None:
        require(mask is not None, "sparse field query needs the voxel mask")
        f = query_field(fv, mask, pts)
    else:
        f = trilinear_interpolate_many(fv.dense, pts)
    z = mlp_forward(f, heads.z_layers)
    s = mlp_forward(f, heads.s_layers)[:, 0].astype(np.float64) \
        + s_bias_many(pts)
    return z, s.astype(DTYPE)


def decode_point(fv: FeatureVolume, heads: DecoderHeads, p,
                 mask: np.ndarray = None):
    z, s = decode_points(fv, heads, np.asarray(p).reshape(1, 3), mask)
    return z[0], float(s[0])


# ---------------------------------------------------------------------------
# stage 2: sparse residual blocks


@dataclass
class SparseBlockWeights:
    nsa_x_self: NsaWeights
    nsa_x_cross: NsaWeights
    nsa_y_self: NsaWeights
    nsa_y_cross: NsaWeights
    inj_x: np.ndarray          # per-layer injection of the frozen inputs
    inj_y: np.ndarray
    gate_x_w: np.ndarray
    gate_x_b: np.ndarray
    gate_y_w: np.ndarray
    gate_y_b: np.ndarray
    ln_attn_x: NormParams
    ln_attn_y: NormParams
    ln_ffn_x: NormParams
    ln_ffn_y: NormParams
    ffn_x: FfnWeights
    ffn_y: FfnWeights


def init_sparse_block(seed: int, params: AttentionParams, layer: int,
                      scale: float = 0.02) -> SparseBlockWeights:
    d = params.model_dim
    tag = f"sparse{layer}"
    return SparseBlockWeights(
        nsa_x_self=init_nsa_weights(seed, params, 3, tag, "xs", scale=scale),
        nsa_x_cross=init_nsa_weights(seed, params, 2, tag, "xc",
                                     scale=scale),
        nsa_y_self=init_nsa_weights(seed, params, 3, tag, "ys", scale=scale),
        nsa_y_cross=init_nsa_weights(seed, params, 2, tag, "yc",
                                     scale=scale),
        inj_x=rng.normal_f32(seed, (d, d), scale, tag, "ix"),
        inj_y=rng.normal_f32(seed, (d, d), scale, tag, "iy"),
        gate_x_w=rng.normal_f32(seed, (d, 2 * d), scale, tag, "gx"),
        gate_x_b=np.zeros(2 * d, dtype=DTYPE),
        gate_y_w=rng.normal_f32(seed, (d, 2 * d), scale, tag, "gy"),
        gate_y_b=np.zeros(2 * d, dtype=DTYPE),
        ln_attn_x=init_norm(d), ln_attn_y=init_norm(d),
        ln_ffn_x=init_norm(d), ln_ffn_y=init_norm(d),
        ffn_x=init_ffn(seed, d, tag, "fx", scale=scale),
        ffn_y=init_ffn(seed, d, tag, "fy", scale=scale))


@dataclass
class SparseContext:
    """Everything a sparse block needs beyond token features: partitions,
    the four routing tables (or scoring budgets in vanilla mode), and the
    prebuilt gather tables amortized across layers."""
    part_vol: BlockPartition
    part_img: BlockPartition
    selections: dict = None     # table name -> Selection (routed mode)
    budgets: dict = None        # table name -> b_sel (score mode)
    tables: dict = None         # table name -> GatherTable

    def mode(self) -> str:
        return "3d" if self.selections is not None else "score"


TABLE_NAMES = ("v2v", "v2i", "i2v", "i2i")


def build_sparse_context(part_vol: BlockPartition, part_img: BlockPartition,
                         selections: dict = None,
                         budgets: dict = None) -> SparseContext:
    ctx = SparseContext(part_vol, part_img, selections, budgets)
    if selections is not None:
        kv_parts = {"v2v": part_vol, "v2i": part_img,
                    "i2v": part_vol, "i2i": part_img}
        own = {"v2v": part_vol.block_of_token,
               "i2i": part_img.block_of_token}
        ctx.tables = {
            name: build_gather_table(selections[name], kv_parts[name],
                                     own_block=own.get(name))
            for name in TABLE_NAMES}
    return ctx


def _nsa_use(x_hat, kv_hat, part_q, part_kv, table_name, w_use, ctx,
             params):
    if ctx.selections is not None:
        return nsa_cross_attention(
            x_hat, kv_hat, part_q, part_kv, ctx.selections[table_name],
            w_use, params, table=ctx.tables[table_name])
    return nsa_cross_attention(x_hat, kv_hat, part_q, part_kv, None, w_use,
                               params, b_sel=ctx.budgets[table_name])


def sparse_block_forward(x: np.ndarray, y: np.ndarray, x_inj: np.ndarray,
                         y_inj: np.ndarray, w: SparseBlockWeights,
                         ctx: SparseContext, params: AttentionParams):
    """One sparse residual block.  The injections (per-layer projections of
    the frozen upsampled Stage-1 tokens) are added to the running state
    before the pre-norm update."""
    require(x.shape[0] > 0 and y.shape[0] > 0,
            "sparse block needs nonempty token streams")
    xe = (x.astype(ACC) + x_inj.astype(ACC)).astype(DTYPE)
    ye = (y.astype(ACC) + y_inj.astype(ACC)).astype(DTYPE)
    x_hat = layer_norm(xe, w.ln_attn_x.gamma, w.ln_attn_x.beta)
    y_hat = layer_norm(ye, w.ln_attn_y.gamma, w.ln_attn_y.beta)

    gx_self, gx_cross = _use_gates(x_hat, w.gate_x_w, w.gate_x_b)
    gy_self, gy_cross = _use_gates(y_hat, w.gate_y_w, w.gate_y_b)

    o_x = (gx_self.astype(ACC) * _nsa_use(
               x_hat, x_hat, ctx.part_vol, ctx.part_vol, "v2v",
               w.nsa_x_self, ctx, params).astype(ACC)
           + gx_cross.astype(ACC) * _nsa_use(
               x_hat, y_hat, ctx.part_vol, ctx.part_img, "v2i",
               w.nsa_x_cross, ctx, params).astype(ACC))
    o_y = (gy_self.astype(ACC) * _nsa_use(
               y_hat, y_hat, ctx.part_img, ctx.part_img, "i2i",
               w.nsa_y_self, ctx, params).astype(ACC)
           + gy_cross.astype(ACC) * _nsa_use(
               y_hat, x_hat, ctx.part_img, ctx.part_vol, "i2v",
               w.nsa_y_cross, ctx, params).astype(ACC))
    x1 = (xe.astype(ACC) + o_x).astype(DTYPE)
    y1 = (ye.astype(ACC) + o_y).astype(DTYPE)
    x2 = (x1.astype(ACC) + ffn_forward(
        layer_norm(x1, w.ln_ffn_x.gamma, w.ln_ffn_x.beta),
        w.ffn_x).astype(ACC)).astype(DTYPE)
    y2 = (y1.astype(ACC) + ffn_forward(
        layer_norm(y1, w.ln_ffn_y.gamma, w.ln_ffn_y.beta),
        w.ffn_y).astype(ACC)).astype(DTYPE)
    return x2, y2


def sparse_stage_forward(x_up: TokenSet, y_up: TokenSet, weights,
                         ctx: SparseContext, params: AttentionParams):
    """Residual stage: state starts at zero, each layer injects the frozen
    inputs, and the final outputs add them back on."""
    x = np.zeros_like(x_up.features)
    y = np.zeros_like(y_up.features)
    for w in weights:
        x_inj = affine(x_up.features, w.inj_x)
        y_inj = affine(y_up.features, w.inj_y)
        x, y = sparse_block_forward(x, y, x_inj, y_inj, w, ctx, params)
    x_s = (x.astype(ACC) + x_up.features.astype(ACC)).astype(DTYPE)
    y_s = (y.astype(ACC) + y_up.features.astype(ACC)).astype(DTYPE)
    return x_s, y_s


def init_sparse_stage(seed: int, params: AttentionParams, depth: int):
    return [init_sparse_block(seed, params, m) for m in range(depth)]


def init_dense_stage(seed: int, params: AttentionParams, depth: int):
    return [init_dense_block(seed, params, m) for m in range(depth)]


def zero_sparse_stage(params: AttentionParams, depth: int):
    """All-zero sparse weights; the residual-identity fixture."""
    blocks = init_sparse_stage(0, params, depth)
    for b in blocks:
        for field in (b.nsa_x_self, b.nsa_x_cross, b.nsa_y_self,
                      b.nsa_y_cross):
            for arr in (field.w_q, field.w_k, field.w_v, field.w_o,
                        field.gate_w, field.gate_b):
                arr[...] = 0.0
            for rb in (field.compress.for_k, field.compress.for_v):
                rb.w1[...] = 0.0
                rb.b1[...] = 0.0
                rb.w2[...] = 0.0
                rb.b2[...] = 0.0
        for arr in (b.inj_x, b.inj_y, b.gate_x_w, b.gate_x_b, b.gate_y_w,
                    b.gate_y_b, b.ffn_x.w1, b.ffn_x.b1, b.ffn_x.w2,
                    b.ffn_x.b2, b.ffn_y.w1, b.ffn_y.b1, b.ffn_y.w2,
                    b.ffn_y.b2):
            arr[...] = 0.0
    return blocks
