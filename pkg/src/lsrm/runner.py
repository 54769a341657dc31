"""End-to-end instance runner: scene in, reconstruction artifacts out.

Pipeline per instance:
  1. analytic silhouettes and synthetic content images per camera
  2. coarse tokens (full volume grid; image patches fused with rays)
  3. dense dual-stream stage, coarse decode to a feature grid
  4. informative-voxel and foreground masks, fine token selection
  5. block partitions, 3D routing plan (or score mode budgets)
  6. sparse residual stage, serial and optionally sharded across workers
  7. fine decode of the updated volume tokens, probe-point queries

All artifacts are deterministic functions of (config, scene): files written
by two identical runs are byte-identical, so wall-clock timing never lands
in an artifact.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import rng
from .block_partition import occupancy_stats, partition
from .block_routing import (RoutingBudgets, build_routing_plan,
                            image_token_coords, volume_token_coords,
                            write_plan)
from .camera_geometry import (Camera, LAPLACE_BETA, callable_field,
                              scene_from_json, silhouette_alpha)
from .errors import ConfigurationError, require
from .recon_pipeline import (FeatureVolume, build_sparse_context,
                             build_sparse_features, decode_feature_volume,
                             decode_points, dense_stage_forward, init_decode,
                             init_decoder_heads, init_dense_stage,
                             init_sparse_stage, sparse_stage_forward)
from .seq_parallel import (makespan_ratio, message_log_to_csv,
                           parallel_sparse_stage)
from .tensor_core import AttentionParams, DTYPE, write_goldens
from .tokenizer import (PATCH, TokenSet, build_volume_tokens,
                        embed_image_tokens, factorized_pos_embed,
                        foreground_patch_mask, informative_voxel_mask,
                        init_image_embed, init_pos_embed, patchify,
                        pluecker_token_rays, random_projection_provider,
                        upsample_select_tokens)

log = logging.getLogger("lsrm")

ROUTING_MODES = ("3d", "score")
GEOMETRY_SOURCES = ("analytic", "decoded")


@dataclass
class RunConfig:
    seed: int = 0
    d: int = 64
    n_q_heads: int = 8
    n_kv_heads: int = 1
    hardware_faithful: bool = False
    depth_dense: int = 4
    depth_sparse: int = 4
    s_vol_coarse: int = 8
    s_img_coarse: int = 16
    factor_vol: int = 6
    factor_img: int = 3
    routing: str = "3d"
    budgets: RoutingBudgets = None
    workers: int = 1
    geometry_source: str = "analytic"
    tau: float = None
    feat_dim: int = 16

    def __post_init__(self):
        if self.budgets is None:
            self.budgets = RoutingBudgets()
        require(self.routing in ROUTING_MODES,
                f"routing mode must be one of {ROUTING_MODES}")
        require(self.geometry_source in GEOMETRY_SOURCES,
                f"geometry source must be one of {GEOMETRY_SOURCES}")
        require(self.workers >= 1, "workers must be >= 1")
        require(self.depth_dense >= 1 and self.depth_sparse >= 1,
                "stage depths must be >= 1")
        require(self.s_vol_fine % 8 == 0,
                f"fine volume side {self.s_vol_fine} not divisible by the "
                f"block size 8")
        require(self.s_img_fine % 8 == 0,
                f"fine image side {self.s_img_fine} not divisible by the "
                f"block size 8")
        # constructing the attention geometry validates head counts
        self.attention_params()

    @property
    def s_vol_fine(self) -> int:
        return self.factor_vol * self.s_vol_coarse

    @property
    def s_img_fine(self) -> int:
        return self.factor_img * self.s_img_coarse

    @property
    def pixels_fine(self) -> int:
        return PATCH * self.s_img_fine

    @property
    def pixels_coarse(self) -> int:
        return PATCH * self.s_img_coarse

    def attention_params(self) -> AttentionParams:
        require(self.d % self.n_q_heads == 0,
                f"model dim {self.d} not divisible by {self.n_q_heads} heads")
        return AttentionParams(self.n_q_heads, self.n_kv_heads,
                               self.d // self.n_q_heads,
                               hardware_faithful=self.hardware_faithful)


_BUDGET_KEYS = ("b_i", "b_v2v", "b_v2i", "b_i2v", "b_i2i")


def config_from_json(doc: dict) -> RunConfig:
    if doc.get("schema") != 1:
        raise ConfigurationError(
            f"unsupported config schema {doc.get('schema')!r}, expected 1")
    cfg = {}
    model = doc.get("model", {})
    for key in ("d", "n_q_heads", "n_kv_heads", "depth_dense",
                "depth_sparse", "hardware_faithful"):
        if key in model:
            cfg[key] = model[key]
    res = doc.get("resolution", {})
    for key in ("s_vol_coarse", "s_img_coarse", "factor_vol", "factor_img"):
        if key in res:
            cfg[key] = int(res[key])
    routing = doc.get("routing", {})
    if "mode" in routing:
        cfg["routing"] = routing["mode"]
    cfg["budgets"] = RoutingBudgets(
        **{k: int(routing[k]) for k in _BUDGET_KEYS if k in routing})
    for key in ("seed", "workers", "feat_dim"):
        if key in doc:
            cfg[key] = int(doc[key])
    for key in ("geometry_source",):
        if key in doc:
            cfg[key] = doc[key]
    if doc.get("tau") is not None:
        cfg["tau"] = float(doc["tau"])
    try:
        return RunConfig(**cfg)
    except TypeError as exc:
        raise ConfigurationError(f"bad config: {exc}") from None


def load_json_file(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") \
            from None


# ---------------------------------------------------------------------------
# cameras and synthetic content


def rescale_camera(cam: Camera, width: int, height: int) -> Camera:
    """Same viewing geometry at a different pixel resolution."""
    sx = width / cam.image_size[0]
    sy = height / cam.image_size[1]
    K = cam.intrinsics.copy()
    K[0, :] *= sx
    K[1, :] *= sy
    return Camera(K, cam.rotation, cam.translation, (width, height))


def synthetic_view(alpha: np.ndarray, view: int) -> np.ndarray:
    """Deterministic [H,W,3] content inside the silhouette.  Appearance is
    untrained plumbing; only determinism and foreground support matter."""
    H, W = alpha.shape
    yy, xx = np.mgrid[0:H, 0:W]
    checker = ((xx // 16 + yy // 16 + view) % 2).astype(DTYPE)
    grad = (xx / max(W - 1, 1)).astype(DTYPE)
    a = np.asarray(alpha, dtype=DTYPE)
    return np.stack([a, a * checker, a * grad], axis=-1)


# ---------------------------------------------------------------------------
# weights


@dataclass
class RunWeights:
    params: AttentionParams
    pe_vol: object
    pe_img: object
    pe_vol_fine: object
    pe_img_fine: object
    image_embed: object
    provider: object
    dense_stage: list
    sparse_stage: list
    decode_coarse: object
    decode_fine: object
    heads: object


def init_run_weights(cfg: RunConfig, n_views: int) -> RunWeights:
    params = cfg.attention_params()
    seed = cfg.seed
    patch_dim = PATCH * PATCH * 3
    return RunWeights(
        params=params,
        pe_vol=init_pos_embed(seed, 3, cfg.s_vol_coarse, cfg.d,
                              label="pos_vol"),
        pe_img=init_pos_embed(seed, 3, max(n_views, cfg.s_img_coarse),
                              cfg.d, label="pos_img"),
        pe_vol_fine=init_pos_embed(seed, 3, cfg.s_vol_fine, cfg.d,
                                   label="pos_vol_fine"),
        pe_img_fine=init_pos_embed(seed, 2, cfg.s_img_fine, cfg.d,
                                   label="pos_img_fine"),
        image_embed=init_image_embed(seed, patch_dim, cfg.feat_dim, cfg.d),
        provider=random_projection_provider(seed, patch_dim, cfg.feat_dim),
        dense_stage=init_dense_stage(seed, params, cfg.depth_dense),
        sparse_stage=init_sparse_stage(seed, params, cfg.depth_sparse),
        decode_coarse=init_decode(seed, cfg.d, "dec_coarse"),
        decode_fine=init_decode(seed, cfg.d, "dec_fine"),
        heads=init_decoder_heads(seed))


# ---------------------------------------------------------------------------
# pipeline


def estimate_tokens(cfg: RunConfig, cams, field) -> dict:
    """Token counts without running any transformer (dry-run support)."""
    fine_cams = [rescale_camera(c, cfg.pixels_fine, cfg.pixels_fine)
                 for c in cams]
    vol_mask = informative_voxel_mask(field, cfg.s_vol_fine, cfg.tau)
    img_mask = np.stack([
        foreground_patch_mask(silhouette_alpha(field, cam))
        for cam in fine_cams])
    return {
        "views": len(cams),
        "coarse_volume_tokens": cfg.s_vol_coarse ** 3,
        "coarse_image_tokens": len(cams) * cfg.s_img_coarse ** 2,
        "fine_volume_tokens": int(vol_mask.sum()),
        "fine_image_tokens": int(img_mask.sum()),
        "fine_volume_total": cfg.s_vol_fine ** 3,
        "fine_image_total": len(cams) * cfg.s_img_fine ** 2,
    }


def run_pipeline(cfg: RunConfig, cams, field, workers: int = None) -> dict:
    """Run the full two-stage reconstruction; returns every intermediate.

    workers > 1 additionally runs the sharded sparse stage and checks it
    against the serial result.
    """
    if workers is None:
        workers = cfg.workers
    n_views = len(cams)
    w = init_run_weights(cfg, n_views)
    params = w.params

    fine_cams = [rescale_camera(c, cfg.pixels_fine, cfg.pixels_fine)
                 for c in cams]
    coarse_cams = [rescale_camera(c, cfg.pixels_coarse, cfg.pixels_coarse)
                   for c in cams]

    # stage 1 inputs
    log.info("building coarse tokens (%d views)", n_views)
    alphas_fine = [silhouette_alpha(field, cam) for cam in fine_cams]
    patch_rows, ray_rows, coord_rows = [], [], []
    sc = cfg.s_img_coarse
    for view, cam in enumerate(coarse_cams):
        alpha = silhouette_alpha(field, cam)
        image = synthetic_view(alpha, view)
        patch_rows.append(patchify(image))
        ray_rows.append(pluecker_token_rays(cam, sc))
        uu, vv = np.meshgrid(np.arange(sc), np.arange(sc), indexing="xy")
        coord_rows.append(np.column_stack([
            np.full(sc * sc, view), uu.ravel(), vv.ravel()]))
    patches = np.concatenate(patch_rows)
    rays = np.concatenate(ray_rows)
    y_coords = np.concatenate(coord_rows)
    y0_feat = embed_image_tokens(patches, rays, w.image_embed, w.provider) \
        .astype(np.float64) \
        + factorized_pos_embed(w.pe_img, y_coords).astype(np.float64)
    y0 = TokenSet("image", y0_feat.astype(DTYPE), y_coords,
                  (n_views, sc, sc))
    x0 = build_volume_tokens(w.pe_vol, cfg.s_vol_coarse)

    log.info("dense stage: %d layers over %d + %d tokens",
             cfg.depth_dense, x0.count, y0.count)
    x_d, y_d = dense_stage_forward(x0.features, y0.features, w.dense_stage,
                                   params)
    dense_grid = decode_feature_volume(x_d, w.decode_coarse)

    # geometry for masking and routing
    if cfg.geometry_source == "decoded":
        fv_coarse = FeatureVolume(dense_grid)
        geo_field = callable_field(
            lambda pts: decode_points(fv_coarse, w.heads, pts)[1]
            .astype(np.float64))
    else:
        geo_field = field

    log.info("masking at %d^3 voxels / %d x %d^2 patches",
             cfg.s_vol_fine, n_views, cfg.s_img_fine)
    vol_mask = informative_voxel_mask(geo_field, cfg.s_vol_fine, cfg.tau)
    img_mask = np.stack([foreground_patch_mask(a) for a in alphas_fine])
    x_up, y_up = upsample_select_tokens(
        x_d, y_d, vol_mask, img_mask, w.pe_vol_fine, w.pe_img_fine,
        cfg.factor_vol, cfg.factor_img)
    require(x_up.count > 0, "no informative voxels; empty scene?")
    require(y_up.count > 0, "no foreground patches; cameras miss the scene?")

    part_vol = partition(x_up)
    part_img = partition(y_up)

    plan = None
    if cfg.routing == "3d":
        log.info("routing %d + %d fine tokens", x_up.count, y_up.count)
        vol_coords = volume_token_coords(x_up)
        img_coords = image_token_coords(y_up, fine_cams, geo_field,
                                        LAPLACE_BETA)
        plan = build_routing_plan(vol_coords, img_coords, part_vol,
                                  part_img, fine_cams, cfg.budgets)
        ctx = build_sparse_context(part_vol, part_img,
                                   selections=plan.tables)
    else:
        ctx = build_sparse_context(part_vol, part_img, budgets={
            "v2v": cfg.budgets.b_v2v, "v2i": cfg.budgets.b_v2i,
            "i2v": cfg.budgets.b_i2v, "i2i": cfg.budgets.b_i2i})

    log.info("sparse stage: %d layers over %d + %d tokens",
             cfg.depth_sparse, x_up.count, y_up.count)
    x_s, y_s = sparse_stage_forward(x_up, y_up, w.sparse_stage, ctx, params)

    topology = None
    if workers > 1:
        log.info("sharded sparse stage: %d workers", workers)
        x_p, y_p, topology = parallel_sparse_stage(
            x_up, y_up, w.sparse_stage, ctx, params, workers)
        dx = float(np.max(np.abs(x_s.astype(np.float64)
                                 - x_p.astype(np.float64))))
        dy = float(np.max(np.abs(y_s.astype(np.float64)
                                 - y_p.astype(np.float64))))
        require(max(dx, dy) <= 1e-6,
                f"sharded stage diverged from serial: {max(dx, dy):.3e}")

    x_s_tokens = TokenSet("volume", x_s, x_up.coords, x_up.grid_res)
    sparse_index, sparse_rows = build_sparse_features(x_s_tokens,
                                                      w.decode_fine)
    fv = FeatureVolume(dense_grid, sparse_index, sparse_rows)

    probe = rng.stream(cfg.seed, "probe").random((512, 3))
    probe_z, probe_s = decode_points(fv, w.heads, probe, mask=vol_mask)

    return {
        "cfg": cfg, "weights": w, "field": field,
        "cams": cams, "fine_cams": fine_cams, "coarse_cams": coarse_cams,
        "x0": x0, "y0": y0, "x_d": x_d, "y_d": y_d,
        "dense_grid": dense_grid, "vol_mask": vol_mask,
        "img_mask": img_mask, "x_up": x_up, "y_up": y_up,
        "part_vol": part_vol, "part_img": part_img, "plan": plan,
        "ctx": ctx, "x_s": x_s, "y_s": y_s, "topology": topology,
        "fv": fv, "probe": probe, "probe_z": probe_z, "probe_s": probe_s,
    }


# ---------------------------------------------------------------------------
# artifacts


def _message_totals(topology) -> dict:
    totals = {}
    if topology is None:
        return totals
    for _phase, kind, _src, _dst, n in topology.message_log:
        totals[kind] = totals.get(kind, 0) + n
    return totals


def write_artifacts(result: dict, out_dir: str) -> dict:
    """Write goldens, summary, plan, and message log; returns the summary."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = result["cfg"]
    x_up, y_up = result["x_up"], result["y_up"]

    goldens = [
        result["x_d"], result["y_d"],
        x_up.features, x_up.coords.astype(DTYPE),
        y_up.features, y_up.coords.astype(DTYPE),
        result["x_s"], result["y_s"],
        result["dense_grid"],
        result["probe_z"],
        result["probe_s"].reshape(-1, 1),
    ]
    write_goldens(os.path.join(out_dir, "goldens.bin"), goldens)

    if result["plan"] is not None:
        write_plan(os.path.join(out_dir, "plan.bin"), result["plan"])
    if result["topology"] is not None:
        message_log_to_csv(result["topology"].message_log,
                           os.path.join(out_dir, "messages.csv"))

    cfg_doc = asdict(cfg)
    cfg_doc["budgets"] = asdict(cfg.budgets)
    summary = {
        "config": cfg_doc,
        "views": len(result["cams"]),
        "tokens": {
            "coarse_volume": result["x0"].count,
            "coarse_image": result["y0"].count,
            "fine_volume": x_up.count,
            "fine_image": y_up.count,
        },
        "occupancy": {
            "volume": occupancy_stats(result["part_vol"]),
            "image": occupancy_stats(result["part_img"]),
        },
        "routing_fallbacks": (result["plan"].fallback_queries
                              if result["plan"] is not None else None),
        "messages": _message_totals(result["topology"]),
        "load_ratio": (makespan_ratio(result["topology"].loads,
                                      result["topology"].n_workers)
                       if result["topology"] is not None else None),
        "probe_checksum": {
            "z": float(np.sum(result["probe_z"], dtype=np.float64)),
            "s": float(np.sum(result["probe_s"], dtype=np.float64)),
        },
        "files": sorted(os.listdir(out_dir)),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def run_scene(cfg: RunConfig, scene_doc: dict, out_dir: str = None,
              dry_run: bool = False) -> dict:
    cams, field = scene_from_json(scene_doc)
    if dry_run:
        return estimate_tokens(cfg, cams, field)
    result = run_pipeline(cfg, cams, field)
    if out_dir is not None:
        return write_artifacts(result, out_dir)
    return result
