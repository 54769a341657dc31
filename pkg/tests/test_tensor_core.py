import numpy as np
import pytest

from lsrm import (AttentionParams, ConfigurationError, EmptyAttentionRowError,
                  EmptyContextError, GoldenFormatError, OutOfDomainError,
                  affine, dense_cross_attention, layer_norm, mlp_forward,
                  read_goldens, trilinear_interpolate,
                  trilinear_interpolate_many, write_goldens)
from lsrm import rng
from lsrm.tensor_core import gelu, sigmoid

from oracles import (affine_oracle, attention_oracle, gelu_oracle,
                     layer_norm_oracle, sigmoid_oracle, trilinear_oracle)


class TestAffine:
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_scalar_oracle(self, seed):
        g = rng.stream(seed, "t_affine")
        x = g.standard_normal((5, 7)).astype(np.float32)
        w = g.standard_normal((7, 4)).astype(np.float32)
        b = g.standard_normal(4).astype(np.float32)
        got = affine(x, w, b)
        want = affine_oracle(x, w, b)
        assert got.dtype == np.float32
        assert np.max(np.abs(got.astype(np.float64) - want)) < 1e-5

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            affine(np.zeros((2, 3), np.float32), np.zeros((4, 2), np.float32))

    def test_batch_rows_independent(self):
        # a row's output may not depend on what else is in the batch
        g = rng.stream(0, "t_affine_rows")
        x = g.standard_normal((64, 16)).astype(np.float32)
        w = g.standard_normal((16, 16)).astype(np.float32)
        full = affine(x, w)
        one = affine(x[17:18], w)
        assert np.array_equal(full[17:18], one)


class TestActivationsAndNorm:
    def test_gelu_oracle(self):
        x = rng.stream(0, "t_gelu").standard_normal((40,)).astype(np.float32)
        got = gelu(x)
        assert np.max(np.abs(got.astype(np.float64) - gelu_oracle(x))) < 1e-6

    def test_sigmoid_oracle_and_extremes(self):
        x = np.array([-80.0, -2.0, 0.0, 2.0, 80.0], dtype=np.float32)
        got = sigmoid(x)
        assert np.all(np.isfinite(got))
        assert got[0] < 1e-30 and got[-1] == 1.0
        mid = sigmoid_oracle(x[1:4])
        assert np.max(np.abs(got[1:4].astype(np.float64) - mid)) < 1e-6

    @pytest.mark.parametrize("seed", range(3))
    def test_layer_norm_oracle(self, seed):
        g = rng.stream(seed, "t_ln")
        x = g.standard_normal((6, 16)).astype(np.float32)
        gamma = g.standard_normal(16).astype(np.float32)
        beta = g.standard_normal(16).astype(np.float32)
        got = layer_norm(x, gamma, beta)
        want = layer_norm_oracle(x, gamma, beta)
        assert np.max(np.abs(got.astype(np.float64) - want)) < 1e-5

    def test_mlp_stack(self):
        g = rng.stream(1, "t_mlp")
        x = g.standard_normal((3, 8)).astype(np.float32)
        w1 = g.standard_normal((8, 12)).astype(np.float32)
        b1 = g.standard_normal(12).astype(np.float32)
        w2 = g.standard_normal((12, 2)).astype(np.float32)
        got = mlp_forward(x, [(w1, b1, "gelu"), (w2, None, "identity")])
        want = affine_oracle(gelu_oracle(affine_oracle(x, w1, b1))
                             .astype(np.float32), w2)
        assert np.max(np.abs(got.astype(np.float64) - want)) < 1e-4

    def test_mlp_width_mismatch(self):
        with pytest.raises(ConfigurationError):
            mlp_forward(np.zeros((2, 3), np.float32),
                        [(np.zeros((5, 2), np.float32), None, "identity")])


class TestAttentionParams:
    def test_model_dim_and_group(self):
        p = AttentionParams(8, 2, 16)
        assert p.model_dim == 128
        assert p.group_size == 4

    def test_uneven_groups_rejected(self):
        with pytest.raises(ConfigurationError):
            AttentionParams(6, 4, 8)

    def test_hardware_faithful_accepts_ratio_16(self):
        AttentionParams(32, 2, 8, hardware_faithful=True)
        AttentionParams(16, 1, 8, hardware_faithful=True)

    @pytest.mark.parametrize("hq,hkv", [(8, 1), (24, 3), (8, 2), (4, 4)])
    def test_hardware_faithful_rejects_other_ratios(self, hq, hkv):
        with pytest.raises(ConfigurationError):
            AttentionParams(hq, hkv, 8, hardware_faithful=True)

    def test_relaxed_mode_allows_any_even_grouping(self):
        AttentionParams(8, 2, 8)


class TestDenseAttention:
    @pytest.mark.parametrize("hq,hkv", [(4, 2), (32, 2), (6, 6), (8, 1)])
    def test_matches_grouped_oracle(self, hq, hkv):
        params = AttentionParams(hq, hkv, 4)
        g = rng.stream(2, "t_attn", hq, hkv)
        q = g.standard_normal((6, hq, 4)).astype(np.float32)
        k = g.standard_normal((9, hkv, 4)).astype(np.float32)
        v = g.standard_normal((9, hkv, 4)).astype(np.float32)
        got = dense_cross_attention(q, k, v, params)
        want = attention_oracle(q, k, v, params.group_size)
        assert np.max(np.abs(got.astype(np.float64) - want)) < 1e-6

    def test_mask_restricts_keys(self):
        params = AttentionParams(4, 2, 4)
        g = rng.stream(3, "t_attn_mask")
        q = g.standard_normal((5, 4, 4)).astype(np.float32)
        k = g.standard_normal((8, 2, 4)).astype(np.float32)
        v = g.standard_normal((8, 2, 4)).astype(np.float32)
        mask = g.random((5, 8)) < 0.5
        mask[:, 0] = True                       # no empty rows
        got = dense_cross_attention(q, k, v, params, mask=mask)
        allowed = [np.nonzero(mask[i])[0] for i in range(5)]
        want = attention_oracle(q, k, v, params.group_size, allowed=allowed)
        assert np.max(np.abs(got.astype(np.float64) - want)) < 1e-6

    def test_weights_rows_sum_to_one(self):
        params = AttentionParams(4, 2, 4)
        g = rng.stream(4, "t_attn_w")
        q = g.standard_normal((3, 4, 4)).astype(np.float32)
        k = g.standard_normal((5, 2, 4)).astype(np.float32)
        v = g.standard_normal((5, 2, 4)).astype(np.float32)
        _, w = dense_cross_attention(q, k, v, params, return_weights=True)
        assert np.max(np.abs(w.sum(axis=2) - 1.0)) < 1e-12

    def test_empty_keys_raise(self):
        params = AttentionParams(4, 2, 4)
        with pytest.raises(EmptyContextError):
            dense_cross_attention(np.zeros((2, 4, 4), np.float32),
                                  np.zeros((0, 2, 4), np.float32),
                                  np.zeros((0, 2, 4), np.float32), params)

    def test_fully_masked_row_raises(self):
        params = AttentionParams(4, 2, 4)
        g = rng.stream(5, "t_attn_empty")
        q = g.standard_normal((3, 4, 4)).astype(np.float32)
        k = g.standard_normal((4, 2, 4)).astype(np.float32)
        v = g.standard_normal((4, 2, 4)).astype(np.float32)
        mask = np.ones((3, 4), dtype=bool)
        mask[1] = False
        with pytest.raises(EmptyAttentionRowError):
            dense_cross_attention(q, k, v, params, mask=mask)


class TestTrilinear:
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_scalar_oracle(self, seed):
        g = rng.stream(seed, "t_tri")
        vol = g.standard_normal((5, 5, 5, 3)).astype(np.float32)
        pts = g.random((50, 3))
        got = trilinear_interpolate_many(vol, pts)
        for i in range(pts.shape[0]):
            want = trilinear_oracle(vol, pts[i])
            assert np.max(np.abs(got[i].astype(np.float64) - want)) < 1e-5

    def test_exact_on_axis_linear_field(self):
        # a trilinear interpolant reproduces c0 + c.x fields exactly,
        # including the extrapolated border half-voxel
        g = rng.stream(7, "t_tri_lin")
        side = 4
        c = g.standard_normal(4)
        centers = (np.arange(side) + 0.5) / side
        ii, jj, kk = np.meshgrid(centers, centers, centers, indexing="ij")
        vol = (c[0] + c[1] * ii + c[2] * jj + c[3] * kk)[..., None] \
            .astype(np.float32)
        pts = g.random((300, 3))
        pts[:3] = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 0.5]]
        got = trilinear_interpolate_many(vol, pts)[:, 0]
        want = c[0] + pts @ c[1:]
        assert np.max(np.abs(got - want)) < 1e-5

    def test_grid_point_identity(self):
        g = rng.stream(8, "t_tri_grid")
        side = 4
        vol = g.standard_normal((side, side, side, 2)).astype(np.float32)
        idx = np.stack(np.meshgrid(*[np.arange(side)] * 3, indexing="ij"),
                       axis=-1).reshape(-1, 3)
        pts = (idx + 0.5) / side
        got = trilinear_interpolate_many(vol, pts)
        want = vol.reshape(-1, 2)
        assert np.max(np.abs(got - want)) < 1e-6

    def test_out_of_domain_rejected(self):
        vol = np.zeros((3, 3, 3, 1), dtype=np.float32)
        with pytest.raises(OutOfDomainError):
            trilinear_interpolate(vol, (1.2, 0.5, 0.5))
        with pytest.raises(OutOfDomainError):
            trilinear_interpolate_many(vol, np.array([[0.5, -0.01, 0.5]]))

    def test_rank_checked(self):
        with pytest.raises(ConfigurationError):
            trilinear_interpolate_many(np.zeros((3, 3, 3), np.float32),
                                       np.zeros((1, 3)))


class TestGoldenFiles:
    def test_roundtrip(self, tmp_path):
        g = rng.stream(0, "t_golden")
        tensors = [g.standard_normal((4, 3)).astype(np.float32),
                   g.standard_normal((2, 2, 2)).astype(np.float32),
                   np.zeros((1,), dtype=np.float32)]
        path = tmp_path / "g.bin"
        write_goldens(path, tensors)
        back = read_goldens(path)
        assert len(back) == 3
        for a, b in zip(tensors, back):
            assert a.shape == b.shape
            assert np.array_equal(a, b)

    def test_bad_magic_offset_zero(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"WRONGMAG" + b"\x00" * 16)
        with pytest.raises(GoldenFormatError) as e:
            read_goldens(path)
        assert e.value.byte_offset == 0

    def test_truncation_carries_offset(self, tmp_path):
        path = tmp_path / "g.bin"
        write_goldens(path, [np.ones((4, 4), dtype=np.float32)])
        blob = path.read_bytes()
        cut = path.with_name("cut.bin")
        cut.write_bytes(blob[:len(blob) - 10])
        with pytest.raises(GoldenFormatError) as e:
            read_goldens(cut)
        assert e.value.byte_offset is not None
        assert 0 < e.value.byte_offset <= len(blob)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "g.bin"
        write_goldens(path, [np.ones((2,), dtype=np.float32)])
        blob = path.read_bytes()
        bloated = path.with_name("bloat.bin")
        bloated.write_bytes(blob + b"\xff\xff")
        with pytest.raises(GoldenFormatError) as e:
            read_goldens(bloated)
        assert e.value.byte_offset == len(blob)
