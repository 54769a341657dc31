"""Token construction: patches, ray fusion, factorized positional embeddings,
foreground / informative masking, and the coarse-to-fine token selection.

Token orders are load-bearing for determinism and are fixed here once:
  - volume tokens in lexicographic (i,j,k) order, k fastest
  - image tokens view-major, raster order within a view (row v outer,
    column u inner); coords stored as (view, u, v)
"""

from dataclasses import dataclass

import numpy as np

from . import rng
from .camera_geometry import eval_sdf_many, pluecker_rays
from .errors import ConfigurationError, require
from .tensor_core import DTYPE, affine

PATCH = 8


def pluecker_token_rays(camera, side: int) -> np.ndarray:
    """[side*side, 6] patch-center rays in raster token order (v outer,
    u inner), matching patchify's row order."""
    return pluecker_rays(camera, (side, side)).reshape(-1, 6)


# ---------------------------------------------------------------------------
# token sets


@dataclass
class TokenSet:
    modality: str            # "volume" | "image"
    features: np.ndarray     # [N, d] float32
    coords: np.ndarray       # [N, 3] int64: (i,j,k) or (view, u, v)
    grid_res: tuple          # (S,S,S) or (n_views, S_img, S_img)

    def __post_init__(self):
        require(self.modality in ("volume", "image"),
                f"bad modality {self.modality!r}")
        self.features = np.asarray(self.features, dtype=DTYPE)
        self.coords = np.asarray(self.coords, dtype=np.int64)
        require(self.features.ndim == 2, "features must be [N, d]")
        require(self.coords.shape == (self.features.shape[0], 3),
                "coords must be [N, 3]")
        if self.coords.shape[0]:
            limits = (self.grid_res if self.modality == "volume"
                      else (self.grid_res[0], self.grid_res[1],
                            self.grid_res[2]))
            require(self.coords.min() >= 0, "negative token coord")
            for ax in range(3):
                require(int(self.coords[:, ax].max()) < limits[ax],
                        f"token coord axis {ax} exceeds grid {limits}")
            keys = (self.coords[:, 0] * limits[1] + self.coords[:, 1]) \
                * limits[2] + self.coords[:, 2]
            require(np.unique(keys).size == keys.size,
                    "duplicate token coords")

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


# ---------------------------------------------------------------------------
# patches


def patchify(image: np.ndarray, patch: int = PATCH) -> np.ndarray:
    """[H,W,C] -> [(H/p)(W/p), p*p*C], raster patch order, (dy,dx,c) inside."""
    require(image.ndim == 3, f"image must be [H,W,C], got {image.shape}")
    H, W, C = image.shape
    if H % patch or W % patch:
        raise ConfigurationError(
            f"image {H}x{W} not divisible by patch {patch}")
    rows, cols = H // patch, W // patch
    out = (np.asarray(image, dtype=DTYPE)
           .reshape(rows, patch, cols, patch, C)
           .transpose(0, 2, 1, 3, 4)
           .reshape(rows * cols, patch * patch * C))
    return out


def unpatchify(tokens: np.ndarray, image_hw, channels: int,
               patch: int = PATCH) -> np.ndarray:
    H, W = image_hw
    rows, cols = H // patch, W // patch
    require(tokens.shape == (rows * cols, patch * patch * channels),
            f"token table {tokens.shape} does not match image {image_hw}")
    return (tokens.reshape(rows, cols, patch, patch, channels)
            .transpose(0, 2, 1, 3, 4)
            .reshape(H, W, channels))


# ---------------------------------------------------------------------------
# feature providers (stand-ins for a frozen pretrained encoder)


def zero_feature_provider(feat_dim: int):
    def provide(patches: np.ndarray) -> np.ndarray:
        return np.zeros((patches.shape[0], feat_dim), dtype=DTYPE)
    return provide


def random_projection_provider(seed: int, patch_dim: int, feat_dim: int):
    proj = rng.normal_f32(seed, (patch_dim, feat_dim), 0.02,
                          "feature_provider")
    def provide(patches: np.ndarray) -> np.ndarray:
        return affine(patches, proj)
    return provide


@dataclass
class ImageEmbedWeights:
    w_patch: np.ndarray      # [patch_dim + 6, d]
    b_patch: np.ndarray      # [d] or None
    w_feat: np.ndarray       # [feat_dim, d]
    b_feat: np.ndarray       # [d] or None


def init_image_embed(seed: int, patch_dim: int, feat_dim: int, d: int,
                     scale: float = 0.02) -> ImageEmbedWeights:
    return ImageEmbedWeights(
        w_patch=rng.normal_f32(seed, (patch_dim + 6, d), scale,
                               "embed", "patch"),
        b_patch=np.zeros(d, dtype=DTYPE),
        w_feat=rng.normal_f32(seed, (feat_dim, d), scale, "embed", "feat"),
        b_feat=np.zeros(d, dtype=DTYPE))


def embed_image_tokens(patches: np.ndarray, rays: np.ndarray,
                       w: ImageEmbedWeights, feature_provider) -> np.ndarray:
    """Linear(patch || ray) + Linear(provider features), summed per token."""
    require(patches.shape[0] == rays.shape[0],
            "patch and ray counts disagree")
    require(rays.shape[1] == 6, "rays must be [N, 6]")
    feats = np.asarray(feature_provider(patches), dtype=DTYPE)
    if feats.shape[0] != patches.shape[0]:
        raise ConfigurationError(
            f"feature provider returned {feats.shape[0]} rows for "
            f"{patches.shape[0]} patches")
    fused = affine(np.concatenate([patches, rays.astype(DTYPE)], axis=1),
                   w.w_patch, w.b_patch)
    out = (fused.astype(np.float64)
           + affine(feats, w.w_feat, w.b_feat).astype(np.float64))
    return out.astype(DTYPE)


# ---------------------------------------------------------------------------
# factorized positional embeddings


@dataclass
class PosEmbed:
    """Per-axis 1D tables, summed per token: 3 tables for volume grids,
    2 for image patch grids."""
    tables: tuple            # of [S, d] float32 arrays

    @property
    def side(self) -> int:
        return self.tables[0].shape[0]

    @property
    def dim(self) -> int:
        return self.tables[0].shape[1]


def init_pos_embed(seed: int, n_axes: int, side: int, d: int,
                   scale: float = 0.02, label: str = "pos") -> PosEmbed:
    tables = tuple(
        rng.normal_f32(seed, (side, d), scale, label, f"axis{ax}")
        for ax in range(n_axes))
    return PosEmbed(tables)


def factorized_pos_embed(pe: PosEmbed, coords: np.ndarray) -> np.ndarray:
    """Sum of per-axis table rows; coords [N, len(tables)] integer."""
    coords = np.asarray(coords, dtype=np.int64)
    require(coords.ndim == 2 and coords.shape[1] == len(pe.tables),
            f"coords must be [N, {len(pe.tables)}]")
    for ax, table in enumerate(pe.tables):
        if coords.shape[0] and not (0 <= coords[:, ax].min()
                                    and coords[:, ax].max() < table.shape[0]):
            raise ConfigurationError(
                f"pos-embed coord axis {ax} outside [0, {table.shape[0]})")
    out = np.zeros((coords.shape[0], pe.dim), dtype=np.float64)
    for ax, table in enumerate(pe.tables):
        out += table.astype(np.float64)[coords[:, ax]]
    return out.astype(DTYPE)


# ---------------------------------------------------------------------------
# masks


def foreground_patch_mask(alpha: np.ndarray, patch: int = PATCH) -> np.ndarray:
    """[H,W] alpha -> [H/p, W/p] bool; true iff any pixel alpha > 0.5."""
    require(alpha.ndim == 2, "alpha must be [H, W]")
    H, W = alpha.shape
    if H % patch or W % patch:
        raise ConfigurationError(
            f"alpha {H}x{W} not divisible by patch {patch}")
    cells = np.asarray(alpha).reshape(H // patch, patch, W // patch, patch)
    return (cells > 0.5).any(axis=(1, 3))


def informative_voxel_mask(field, s_vol: int, tau: float = None,
                           t_side: int = 4) -> np.ndarray:
    """[S,S,S] bool; voxel true iff the t_side^3 in-voxel sample grid has
    min |s| <= tau or a sign change (min*max <= 0).

    Samples are the cell centers of the (t_side*S)^3 fine grid, so sample a
    of voxel i along an axis sits at (t_side*i + a + 0.5) / (t_side*S).
    """
    require(s_vol >= 1 and t_side >= 1, "bad mask resolution")
    if tau is None:
        tau = 1.0 / s_vol
    require(tau > 0, "tau must be positive")
    fine = t_side * s_vol
    line = (np.arange(fine) + 0.5) / fine
    mask = np.zeros((s_vol, s_vol, s_vol), dtype=bool)
    yz = np.stack(np.meshgrid(line, line, indexing="ij"), axis=-1)
    for i in range(s_vol):                      # x-slab at a time
        xs = line[t_side * i:t_side * (i + 1)]
        pts = np.empty((t_side, fine, fine, 3), dtype=np.float64)
        pts[..., 0] = xs[:, None, None]
        pts[..., 1] = yz[None, ..., 0]
        pts[..., 2] = yz[None, ..., 1]
        s = eval_sdf_many(field, pts.reshape(-1, 3)) \
            .reshape(t_side, s_vol, t_side, s_vol, t_side)
        smin = s.min(axis=(0, 2, 4))
        smax = s.max(axis=(0, 2, 4))
        amin = np.abs(s).min(axis=(0, 2, 4))
        mask[i] = (amin <= tau) | (smin * smax <= 0.0)
    return mask


# ---------------------------------------------------------------------------
# coarse-to-fine selection


def build_volume_tokens(pe: PosEmbed, side: int) -> TokenSet:
    """Full coarse grid, feature = factorized positional embedding."""
    idx = np.arange(side)
    ii, jj, kk = np.meshgrid(idx, idx, idx, indexing="ij")
    coords = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
    return TokenSet("volume", factorized_pos_embed(pe, coords), coords,
                    (side, side, side))


def upsample_select_tokens(x_d: np.ndarray, y_d: np.ndarray,
                           vol_mask: np.ndarray, img_mask: np.ndarray,
                           pe_fine_vol: PosEmbed, pe_fine_img: PosEmbed,
                           factor_vol: int = 6, factor_img: int = 3):
    """Fine active tokens for the residual stage.

    Each mask-true fine cell takes its nearest coarse token's feature
    (replication) plus a fine-resolution positional embedding.  Masks are at
    fine resolution: vol_mask [S,S,S] with S = factor_vol * coarse side,
    img_mask [M, S_img, S_img] indexed (view, row, col).
    """
    s_fine = vol_mask.shape[0]
    require(vol_mask.shape == (s_fine, s_fine, s_fine), "vol mask not cubic")
    require(s_fine % factor_vol == 0, "volume mask not divisible by factor")
    s_coarse = s_fine // factor_vol
    require(x_d.shape[0] == s_coarse ** 3,
            f"x_d has {x_d.shape[0]} tokens, expected {s_coarse ** 3}")
    require(pe_fine_vol.side == s_fine, "fine volume pos-embed side mismatch")

    vcoords = np.argwhere(vol_mask)             # lex (i,j,k) order
    parents = vcoords // factor_vol
    parent_idx = (parents[:, 0] * s_coarse + parents[:, 1]) * s_coarse \
        + parents[:, 2]
    vfeat = x_d[parent_idx].astype(np.float64) \
        + factorized_pos_embed(pe_fine_vol, vcoords).astype(np.float64)
    x_up = TokenSet("volume", vfeat.astype(DTYPE), vcoords,
                    (s_fine, s_fine, s_fine))

    n_views, rows_f, cols_f = img_mask.shape
    require(rows_f == cols_f, "image mask must be square")
    require(rows_f % factor_img == 0, "image mask not divisible by factor")
    s_img_coarse = rows_f // factor_img
    require(y_d.shape[0] == n_views * s_img_coarse ** 2,
            f"y_d has {y_d.shape[0]} tokens, expected "
            f"{n_views * s_img_coarse ** 2}")
    require(pe_fine_img.side == rows_f, "fine image pos-embed side mismatch")

    coords_list, feat_list = [], []
    y_view = y_d.reshape(n_views, s_img_coarse, s_img_coarse, -1)
    for view in range(n_views):
        rc = np.argwhere(img_mask[view])        # (row, col) raster order
        if rc.size == 0:
            continue
        parent = rc // factor_img
        feat = y_view[view, parent[:, 0], parent[:, 1]].astype(np.float64) \
            + factorized_pos_embed(
                pe_fine_img, rc[:, ::-1]).astype(np.float64)  # (u, v) axes
        coords = np.column_stack(
            [np.full(rc.shape[0], view), rc[:, 1], rc[:, 0]])  # (view,u,v)
        coords_list.append(coords)
        feat_list.append(feat.astype(DTYPE))
    if coords_list:
        ycoords = np.concatenate(coords_list)
        yfeat = np.concatenate(feat_list)
    else:
        ycoords = np.zeros((0, 3), dtype=np.int64)
        yfeat = np.zeros((0, x_up.dim), dtype=DTYPE)
    y_up = TokenSet("image", yfeat, ycoords, (n_views, rows_f, cols_f))
    return x_up, y_up
