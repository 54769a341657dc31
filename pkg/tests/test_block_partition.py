import numpy as np
import pytest

from lsrm import ConfigurationError, TokenSet, compress_block_kv, partition
from lsrm import rng
from lsrm.block_partition import (init_compress_weights, occupancy_stats,
                                  res_block)

from conftest import make_image_tokens, make_volume_tokens
from oracles import affine_oracle, gelu_oracle


def _vol_block_id_oracle(coord, side, block):
    sb = side // block
    bi, bj, bk = (int(c) // block for c in coord)
    return (bi * sb + bj) * sb + bk


def _img_block_id_oracle(coord, side, block):
    sb = side // block
    view, u, v = (int(c) for c in coord)
    return view * sb * sb + (v // block) * sb + (u // block)


class TestPartition:
    @pytest.mark.parametrize("seed", range(4))
    def test_volume_ids_match_oracle(self, seed):
        toks = make_volume_tokens(seed, 16, 4, 0.2)
        part = partition(toks)
        for t in range(toks.count):
            want = _vol_block_id_oracle(toks.coords[t], 16, 8)
            assert int(part.block_of_token[t]) == want

    @pytest.mark.parametrize("seed", range(4))
    def test_image_ids_match_oracle(self, seed):
        toks = make_image_tokens(seed, 3, 16, 4, 0.3)
        part = partition(toks)
        for t in range(toks.count):
            want = _img_block_id_oracle(toks.coords[t], 16, 8)
            assert int(part.block_of_token[t]) == want

    def test_occupied_ascending_and_counts(self):
        toks = make_volume_tokens(1, 24, 4, 0.1)
        part = partition(toks)
        assert np.all(np.diff(part.occupied_ids) > 0)
        assert int(part.occupancy.sum()) == toks.count
        assert part.block_offsets[0] == 0
        assert part.block_offsets[-1] == toks.count
        # offsets delta reproduces occupancy
        assert np.array_equal(np.diff(part.block_offsets), part.occupancy)

    def test_tokens_in_row_sorted_and_complete(self):
        toks = make_volume_tokens(2, 16, 4, 0.3)
        part = partition(toks)
        seen = []
        for row in range(part.n_occupied):
            tids = part.tokens_in_row(row)
            assert np.all(np.diff(tids) > 0)     # ascending token ids
            assert np.all(part.block_of_token[tids]
                          == part.occupied_ids[row])
            seen.extend(tids.tolist())
        assert sorted(seen) == list(range(toks.count))

    def test_volume_centers(self):
        toks = TokenSet("volume", np.zeros((1, 4), np.float32),
                        np.array([[9, 2, 17]]), (24, 24, 24))
        part = partition(toks)
        # block (1,0,2) of a 3-block grid; center of an 8-cell run
        want = np.array([12.0 / 24.0, 4.0 / 24.0, 20.0 / 24.0])
        assert np.max(np.abs(part.block_centers[0] - want)) < 1e-12

    def test_image_centers_in_patch_units(self):
        toks = TokenSet("image", np.zeros((1, 4), np.float32),
                        np.array([[1, 9, 2]]), (2, 16, 16))
        part = partition(toks)
        assert part.block_views[0] == 1
        # token patch (u=9, v=2) -> block (bu=1, bv=0)
        assert np.max(np.abs(part.block_centers[0]
                             - np.array([12.0, 4.0]))) < 1e-12

    def test_blocks_never_span_views(self):
        toks = make_image_tokens(3, 2, 16, 4, 0.5)
        part = partition(toks)
        for row in range(part.n_occupied):
            views = toks.coords[part.tokens_in_row(row), 0]
            assert np.unique(views).size == 1

    def test_indivisible_grid_rejected(self):
        toks = TokenSet("volume", np.zeros((1, 4), np.float32),
                        np.array([[0, 0, 0]]), (12, 12, 12))
        with pytest.raises(ConfigurationError):
            partition(toks)

    def test_occupancy_stats_shape(self):
        part = partition(make_volume_tokens(0, 16, 4, 0.2))
        stats = occupancy_stats(part)
        assert stats["total_tokens"] == part.n_tokens
        assert stats["occupied_blocks"] == part.n_occupied
        assert stats["max"] >= stats["min"] >= 1


class TestCompression:
    def test_res_block_oracle(self):
        g = rng.stream(0, "t_res")
        x = g.standard_normal((5, 8)).astype(np.float32)
        p = init_compress_weights(0, 8, "t").for_k
        got = res_block(x, p)
        h = affine_oracle(gelu_oracle(affine_oracle(x, p.w1, p.b1))
                          .astype(np.float32), p.w2, p.b2)
        want = x.astype(np.float64) + h
        assert np.max(np.abs(got.astype(np.float64) - want)) < 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_mean_per_block_oracle(self, seed):
        toks = make_volume_tokens(seed, 16, 4, 0.25)
        part = partition(toks)
        g = rng.stream(seed, "t_cmp")
        n = toks.count
        k = g.standard_normal((n, 2, 4)).astype(np.float32)
        v = g.standard_normal((n, 2, 4)).astype(np.float32)
        w = init_compress_weights(seed, 8, "t_cmp")
        k_cmp, v_cmp = compress_block_kv(k, v, part, w)
        assert k_cmp.shape == (part.n_occupied, 2, 4)
        k_rows = res_block(k.reshape(n, 8), w.for_k).astype(np.float64)
        v_rows = res_block(v.reshape(n, 8), w.for_v).astype(np.float64)
        for row in range(part.n_occupied):
            tids = part.tokens_in_row(row)
            want_k = k_rows[tids].mean(axis=0)
            want_v = v_rows[tids].mean(axis=0)
            assert np.max(np.abs(k_cmp[row].reshape(8).astype(np.float64)
                                 - want_k)) < 1e-6
            assert np.max(np.abs(v_cmp[row].reshape(8).astype(np.float64)
                                 - want_v)) < 1e-6

    def test_singleton_block_mean_is_identity(self):
        toks = TokenSet("volume", np.ones((1, 4), np.float32),
                        np.array([[3, 3, 3]]), (8, 8, 8))
        part = partition(toks)
        g = rng.stream(1, "t_cmp1")
        k = g.standard_normal((1, 1, 8)).astype(np.float32)
        v = g.standard_normal((1, 1, 8)).astype(np.float32)
        w = init_compress_weights(0, 8, "t_cmp1")
        k_cmp, _ = compress_block_kv(k, v, part, w)
        want = res_block(k.reshape(1, 8), w.for_k)
        assert np.array_equal(k_cmp.reshape(1, 8), want)

    def test_token_count_checked(self):
        toks = make_volume_tokens(0, 16, 4, 0.2)
        part = partition(toks)
        with pytest.raises(ConfigurationError):
            compress_block_kv(np.zeros((toks.count + 1, 1, 8), np.float32),
                              np.zeros((toks.count + 1, 1, 8), np.float32),
                              part, init_compress_weights(0, 8, "t"))
