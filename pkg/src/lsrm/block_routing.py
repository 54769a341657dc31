"""Geometric KV-block selection.

Every query token carries a 3D point: voxel centers for volume tokens, the
ray-marched surface point for image tokens (cube-entry fallback when the
ray sees no surface).  Volume KV-blocks are ranked by center distance;
image KV-blocks by a two-stage rule: per view, shortlist the B_i occupied
blocks whose 2D centers are nearest the query's projection (views with the
query behind them contribute nothing), then rank the pooled shortlist by
the minimum 3D distance from the query point to each block's token points.

Tie rules are part of the contract: volume ties break toward the lower
block id, image ties toward (view, block id) ascending, which is exactly
ascending global image-block id.  All distance comparisons use squared
distances computed with the same elementary operations as the brute-force
oracles, so ranks agree bit for bit.
"""

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .block_partition import BlockPartition
from .camera_geometry import (Camera, SdfField, ray_cube_intersection,
                              surface_point_for_ray)
from .errors import require
from .nsa_attention import Selection, write_selection
from .tokenizer import TokenSet

QUERY_CHUNK = 512


@dataclass
class RoutingBudgets:
    b_i: int = 16       # per-view 2D shortlist size
    b_v2v: int = 8
    b_v2i: int = 8
    b_i2v: int = 8
    b_i2i: int = 8


@dataclass
class TokenCoords3D:
    points: np.ndarray      # [N,3] float64 in [0,1]^3
    miss: np.ndarray        # [N] bool, image tokens with no surface hit

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.miss = np.asarray(self.miss, dtype=bool)
        require(self.points.ndim == 2 and self.points.shape[1] == 3,
                "token points must be [N,3]")
        require(self.miss.shape == (self.points.shape[0],),
                "miss flags must be [N]")
        if self.points.size:
            require(float(self.points.min()) >= 0.0
                    and float(self.points.max()) <= 1.0,
                    "token points must lie in the unit cube")


@dataclass
class RoutingPlan:
    tables: dict            # name -> Selection, names v2v/v2i/i2v/i2i
    budgets: RoutingBudgets
    fallback_queries: dict = dc_field(default_factory=dict)


def volume_token_coords(tokens: TokenSet) -> TokenCoords3D:
    side = tokens.grid_res[0]
    pts = (tokens.coords.astype(np.float64) + 0.5) / side
    return TokenCoords3D(pts, np.zeros(tokens.count, dtype=bool))


def image_token_coords(tokens: TokenSet, cameras, field: SdfField,
                       beta: float) -> TokenCoords3D:
    """Surface point of each image token's patch-center ray.

    Rays with no opacity peak fall back to their cube-entry point; rays
    missing the cube entirely fall back to the clamped closest approach to
    the cube center.  Both carry a miss flag.
    """
    n_views, rows_f, _ = tokens.grid_res
    require(len(cameras) == n_views, "camera count != view count")
    pts = np.zeros((tokens.count, 3), dtype=np.float64)
    miss = np.zeros(tokens.count, dtype=bool)
    for i in range(tokens.count):
        view, u, v = (int(c) for c in tokens.coords[i])
        cam = cameras[view]
        W, H = cam.image_size
        pixel = ((u + 0.5) * (W / rows_f), (v + 0.5) * (H / rows_f))
        K = cam.intrinsics
        d_cam = np.array([(pixel[0] - K[0, 2]) / K[0, 0],
                          (pixel[1] - K[1, 2]) / K[1, 1], 1.0])
        d = cam.rotation @ d_cam
        d /= np.linalg.norm(d)
        o = cam.translation
        sample = surface_point_for_ray(field, o, d, beta)
        if sample.opacity_peak is not None:
            p = np.asarray(sample.opacity_peak)
        else:
            miss[i] = True
            span = ray_cube_intersection(o, d)
            if span is not None:
                p = o + span[0] * d
            else:
                t_near = float(np.dot(np.array([0.5, 0.5, 0.5]) - o, d))
                p = o + max(t_near, 0.0) * d
        pts[i] = np.clip(p, 0.0, 1.0)
    return TokenCoords3D(pts, miss)


# ---------------------------------------------------------------------------
# volume-side routing


def _volume_block_d2(points: np.ndarray, part: BlockPartition) -> np.ndarray:
    """[Nq, B] squared center distances, same float path as the oracle."""
    c = part.block_centers
    dx = points[:, 0, None] - c[None, :, 0]
    dy = points[:, 1, None] - c[None, :, 1]
    dz = points[:, 2, None] - c[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def route_to_volume_blocks(p, vol_part: BlockPartition, budget: int
                           ) -> np.ndarray:
    """The budget occupied blocks nearest p by center distance; ties to the
    lower block id."""
    d2 = _volume_block_d2(np.asarray(p, dtype=np.float64).reshape(1, 3),
                          vol_part)[0]
    order = np.argsort(d2, kind="stable")     # columns already id-ascending
    return vol_part.occupied_ids[order[:budget]]


def _route_points_to_volume(points: np.ndarray, part: BlockPartition,
                            budget: int) -> Selection:
    if part.n_occupied == 0:
        return Selection([np.zeros(0, dtype=np.int64)] * points.shape[0])
    lists = []
    for lo in range(0, points.shape[0], QUERY_CHUNK):
        d2 = _volume_block_d2(points[lo:lo + QUERY_CHUNK], part)
        order = np.argsort(d2, axis=1, kind="stable")[:, :budget]
        lists.extend(part.occupied_ids[row] for row in order)
    return Selection(lists)


# ---------------------------------------------------------------------------
# image-side routing


def _project_points(points: np.ndarray, cam: Camera):
    """Vectorized pinhole projection mirroring project_point's exact
    arithmetic; returns (u, v, depth) arrays."""
    R, t, K = cam.rotation, cam.translation, cam.intrinsics
    dx = points[:, 0] - t[0]
    dy = points[:, 1] - t[1]
    dz = points[:, 2] - t[2]
    xc = R[0, 0] * dx + R[1, 0] * dy + R[2, 0] * dz
    yc = R[0, 1] * dx + R[1, 1] * dy + R[2, 1] * dz
    zc = R[0, 2] * dx + R[1, 2] * dy + R[2, 2] * dz
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K[0, 0] * (xc / zc) + K[0, 2]
        v = K[1, 1] * (yc / zc) + K[1, 2]
    return u, v, zc


def _min_d2_to_blocks(points: np.ndarray, part: BlockPartition,
                      token_points: np.ndarray) -> np.ndarray:
    """[Nq, B] min squared 3D distance from each query to each block's
    token point set."""
    ordered = token_points[part.block_token_ids]
    out = np.empty((points.shape[0], part.n_occupied), dtype=np.float64)
    for lo in range(0, points.shape[0], QUERY_CHUNK):
        chunk = points[lo:lo + QUERY_CHUNK]
        dx = chunk[:, 0, None] - ordered[None, :, 0]
        dy = chunk[:, 1, None] - ordered[None, :, 1]
        dz = chunk[:, 2, None] - ordered[None, :, 2]
        d2 = dx * dx + dy * dy + dz * dz
        out[lo:lo + QUERY_CHUNK] = np.minimum.reduceat(
            d2, part.block_offsets[:-1], axis=1)
    return out


def _route_points_to_image(points: np.ndarray, cameras,
                           img_part: BlockPartition,
                           img_coords3d: TokenCoords3D, b_i: int,
                           budget: int) -> Selection:
    n = points.shape[0]
    if img_part.n_occupied == 0 or n == 0:
        return Selection([np.zeros(0, dtype=np.int64)] * n)
    patch_px = 8.0   # block centers are in patch units, images have 8px
                     # patches, so projections divide by 8 to compare
    candidate = np.zeros((n, img_part.n_occupied), dtype=bool)
    for view, cam in enumerate(cameras):
        rows = np.nonzero(img_part.block_views == view)[0]
        if rows.size == 0:
            continue
        centers = img_part.block_centers[rows]
        u, v, depth = _project_points(points, cam)
        visible = depth > 0.0
        if not visible.any():
            continue
        # block centers are in patch units; convert pixels the same way
        uu = u[visible] / patch_px
        vv = v[visible] / patch_px
        du = uu[:, None] - centers[None, :, 0]
        dv = vv[:, None] - centers[None, :, 1]
        d2 = du * du + dv * dv
        shortlist = np.argsort(d2, axis=1, kind="stable")[:, :b_i]
        vis_idx = np.nonzero(visible)[0]
        candidate[vis_idx[:, None], rows[shortlist]] = True

    min_d2 = _min_d2_to_blocks(points, img_part, img_coords3d.points)
    ranked = np.where(candidate, min_d2, np.inf)
    order = np.argsort(ranked, axis=1, kind="stable")
    n_cand = candidate.sum(axis=1)
    lists = []
    for qi in range(n):
        take = min(budget, int(n_cand[qi]))
        lists.append(img_part.occupied_ids[order[qi, :take]])
    return Selection(lists)


def route_to_image_blocks(p, cameras, img_part: BlockPartition,
                          img_coords3d: TokenCoords3D, b_i: int,
                          budget: int) -> np.ndarray:
    """Single-query form of the two-stage image routing rule."""
    sel = _route_points_to_image(
        np.asarray(p, dtype=np.float64).reshape(1, 3), cameras, img_part,
        img_coords3d, b_i, budget)
    return sel.lists[0]


# ---------------------------------------------------------------------------
# plans


def build_routing_plan(vol_coords: TokenCoords3D, img_coords: TokenCoords3D,
                       part_vol: BlockPartition, part_img: BlockPartition,
                       cameras, budgets: RoutingBudgets) -> RoutingPlan:
    """All four query->KV tables; reused unchanged across every sparse
    layer."""
    tables = {
        "v2v": _route_points_to_volume(vol_coords.points, part_vol,
                                       budgets.b_v2v),
        "i2v": _route_points_to_volume(img_coords.points, part_vol,
                                       budgets.b_i2v),
        "v2i": _route_points_to_image(vol_coords.points, cameras, part_img,
                                      img_coords, budgets.b_i,
                                      budgets.b_v2i),
        "i2i": _route_points_to_image(img_coords.points, cameras, part_img,
                                      img_coords, budgets.b_i,
                                      budgets.b_i2i),
    }
    fallback = {name: [qi for qi, ids in enumerate(sel.lists)
                       if len(ids) == 0]
                for name, sel in tables.items()}
    return RoutingPlan(tables, budgets,
                       {k: v for k, v in fallback.items() if v})


def routing_overlap_report(plan: RoutingPlan, score_sels: dict) -> dict:
    """Jaccard overlap between the geometric plan and score-based
    selections, per query and aggregated per table."""
    report = {}
    for name, sel in score_sels.items():
        geo = plan.tables[name]
        require(geo.n_queries == sel.n_queries,
                f"table {name}: query counts differ")
        per_query = np.zeros(geo.n_queries, dtype=np.float64)
        for qi in range(geo.n_queries):
            a = set(int(b) for b in geo.lists[qi])
            b = set(int(x) for x in sel.lists[qi])
            union = a | b
            per_query[qi] = (len(a & b) / len(union)) if union else 1.0
        report[name] = {"per_query": per_query,
                        "mean": float(per_query.mean())
                        if per_query.size else 1.0}
    return report


PLAN_TABLE_ORDER = ("v2v", "v2i", "i2v", "i2i")


def write_plan(path, plan: RoutingPlan) -> None:
    """Four selection tables in fixed order, each: u32 query count, then per
    query u32 length + u32 block ids."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(PLAN_TABLE_ORDER)))
        for name in PLAN_TABLE_ORDER:
            write_selection(fh, plan.tables[name])
