"""Shared fixtures: small random token sets and attention geometries."""

import numpy as np
import pytest

from lsrm import AttentionParams, TokenSet
from lsrm import rng


def make_volume_tokens(seed: int, side: int, d: int, keep: float,
                       tag: str = "fix") -> TokenSet:
    g = rng.stream(seed, "test", tag, "vol")
    coords = np.argwhere(g.random((side, side, side)) < keep)
    if coords.shape[0] == 0:
        coords = np.array([[0, 0, 0]])
    feats = g.standard_normal((coords.shape[0], d)).astype(np.float32)
    return TokenSet("volume", feats, coords, (side, side, side))


def make_image_tokens(seed: int, n_views: int, side: int, d: int,
                      keep: float, tag: str = "fix") -> TokenSet:
    g = rng.stream(seed, "test", tag, "img")
    rows = []
    for view in range(n_views):
        for v, u in np.argwhere(g.random((side, side)) < keep):
            rows.append((view, int(u), int(v)))
    if not rows:
        rows = [(0, 0, 0)]
    rows.sort(key=lambda t: (t[0], t[2], t[1]))   # raster order per view
    coords = np.array(rows, dtype=np.int64)
    feats = g.standard_normal((coords.shape[0], d)).astype(np.float32)
    return TokenSet("image", feats, coords, (n_views, side, side))


@pytest.fixture
def small_params():
    return AttentionParams(4, 2, 8)


@pytest.fixture
def desk_params():
    return AttentionParams(8, 1, 8)
