"""End-to-end acceptance checks, one numbered criterion per test.

Each test prints a single `criterion NN <label>: PASS/FAIL` line and then
asserts at its stated tolerance, so `pytest -v` shows one verdict per
criterion and the printed lines survive in the captured output.
"""

import json
import time

import numpy as np
import pytest

from lsrm import (AttentionParams, ConfigurationError, FeatureVolume,
                  RunConfig, TokenSet, build_sparse_context,
                  build_sparse_features, compress_block_kv,
                  decode_feature_volume, decode_points, dense_cross_attention,
                  init_decode, init_decoder_heads, init_sparse_stage,
                  parallel_sparse_stage, partition, shard_blocks,
                  sparse_stage_forward, trilinear_interpolate_many,
                  upsample_select_tokens, zero_sparse_stage)
from lsrm import rng
from lsrm.block_routing import (RoutingBudgets, build_routing_plan,
                                image_token_coords, volume_token_coords)
from lsrm.camera_geometry import (LAPLACE_BETA, box_field, eval_sdf_many,
                                  orbit_cameras, pluecker_rays, project_point,
                                  silhouette_alpha, sphere_field, union_field,
                                  unproject_point)
from lsrm.cli import main as cli_main
from lsrm.nsa_attention import (full_selection, init_nsa_weights,
                                nsa_cross_attention, sel_attention)
from lsrm.recon_pipeline import T_SIDE
from lsrm.tensor_core import affine
from lsrm.tokenizer import (foreground_patch_mask, informative_voxel_mask,
                            init_pos_embed)

from conftest import make_image_tokens, make_volume_tokens
from test_block_routing import _image_oracle, _volume_oracle
from test_seq_parallel import _opt_makespan

F32 = np.float32


def _report(num: int, label: str, ok: bool, detail: str = "") -> bool:
    verdict = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"criterion {num:02d} {label}: {verdict}{suffix}")
    return ok


def _random_volume_tokens(g, n, side=16):
    cells = g.choice(side ** 3, size=n, replace=False)
    coords = np.stack([cells // (side * side), (cells // side) % side,
                       cells % side], axis=1)
    feats = np.zeros((n, 4), dtype=F32)
    return TokenSet("volume", feats, coords, (side,) * 3)


class TestCriterion01:
    def test_full_selection_matches_dense(self):
        start = time.monotonic()
        worst = 0.0
        for seed in range(100):
            g = rng.stream(seed, "acc1")
            params = AttentionParams(8, 1, 8) if seed % 2 == 0 \
                else AttentionParams(32, 2, 4)
            n_q = int(g.integers(1, 65))
            n_kv = int(g.integers(1, 65))
            part = partition(_random_volume_tokens(g, n_kv))
            q = g.standard_normal(
                (n_q, params.n_q_heads, params.head_dim)).astype(F32)
            k = g.standard_normal(
                (n_kv, params.n_kv_heads, params.head_dim)).astype(F32)
            v = g.standard_normal(k.shape).astype(F32)
            got = sel_attention(q, k, v, part, full_selection(n_q, part),
                                params)
            want = dense_cross_attention(q, k, v, params)
            worst = max(worst, float(np.max(np.abs(
                got.astype(np.float64) - want.astype(np.float64)))))
        elapsed = time.monotonic() - start
        ok = worst <= 1e-5 and elapsed < 10.0
        _report(1, "full-selection equals dense", ok,
                f"max diff {worst:.2e} over 100 seeds, {elapsed:.1f}s")
        assert worst <= 1e-5
        assert elapsed < 10.0


def _dense_branch_path(x, kv, part_kv, own_part, w, params):
    """Saturated-gate comparator: every branch via dense attention, unit
    gates, f64 merge, then the shared output projection."""
    n = x.shape[0]
    h_q, h_kv, d_h = params.n_q_heads, params.n_kv_heads, params.head_dim
    q = affine(x, w.w_q).reshape(n, h_q, d_h)
    k = affine(kv, w.w_k).reshape(-1, h_kv, d_h)
    v = affine(kv, w.w_v).reshape(-1, h_kv, d_h)
    k_cmp, v_cmp = compress_block_kv(k, v, part_kv, w.compress)
    branches = [dense_cross_attention(q, k_cmp, v_cmp, params),
                dense_cross_attention(q, k, v, params)]
    if w.n_gates == 3:
        o_win = np.zeros_like(branches[0])
        for row in range(own_part.n_occupied):
            ids = own_part.tokens_in_row(row)
            o_win[ids] = dense_cross_attention(q[ids], k[ids], v[ids],
                                               params)
        branches.append(o_win)
    merged = np.zeros(branches[0].shape, dtype=np.float64)
    for b in branches:
        merged += b.astype(np.float64)
    flat = merged.astype(F32).reshape(n, params.model_dim)
    return affine(flat, w.w_o)


class TestCriterion02:
    def test_saturated_gates_match_dense_path(self):
        worst = 0.0
        for seed in range(20):
            params = AttentionParams(4, 2, 8)
            x = make_volume_tokens(seed, 16, params.model_dim, 0.04,
                                   tag="acc2q")
            part_q = partition(x)
            if seed % 2 == 0:
                kv, part_kv, n_gates = x, part_q, 3
            else:
                kv = make_image_tokens(seed, 2, 16, params.model_dim, 0.05,
                                       tag="acc2kv")
                part_kv, n_gates = partition(kv), 2
            w = init_nsa_weights(seed, params, n_gates, "acc2")
            w.gate_b[:] = 40.0       # sigmoid(40) is 1 within f64
            sel = full_selection(x.count, part_kv)
            got = nsa_cross_attention(x.features, kv.features, part_q,
                                      part_kv, sel, w, params)
            want = _dense_branch_path(x.features, kv.features, part_kv,
                                      part_q, w, params)
            worst = max(worst, float(np.max(np.abs(
                got.astype(np.float64) - want.astype(np.float64)))))
        ok = worst <= 1e-4
        _report(2, "saturated gates reduce to dense", ok,
                f"max diff {worst:.2e} over 20 seeds")
        assert worst <= 1e-4


class TestCriterion03:
    def test_zero_stage_preserves_decoded_field(self):
        params = AttentionParams(8, 1, 8)
        d = params.model_dim
        x_up = make_volume_tokens(0, 24, d, 0.01, tag="acc3v")
        y_up = make_image_tokens(0, 2, 24, d, 0.02, tag="acc3i")
        ctx = build_sparse_context(partition(x_up), partition(y_up),
                                   budgets={n: 2 for n in
                                            ("v2v", "v2i", "i2v", "i2i")})
        weights = zero_sparse_stage(params, 4)
        x_s, y_s = sparse_stage_forward(x_up, y_up, weights, ctx, params)
        assert np.array_equal(y_s, y_up.features)

        w_coarse = init_decode(0, d, "acc3c")
        w_fine = init_decode(0, d, "acc3f")
        x_d = rng.normal_f32(0, (6 ** 3, d), 1.0, "acc3", "xd")
        dense = decode_feature_volume(x_d, w_coarse)
        mask = np.zeros((24, 24, 24), dtype=bool)
        mask[x_up.coords[:, 0], x_up.coords[:, 1], x_up.coords[:, 2]] = True
        heads = init_decoder_heads(0)

        def field_of(feats):
            toks = TokenSet("volume", feats, x_up.coords, (24,) * 3)
            index, rows = build_sparse_features(toks, w_fine)
            return FeatureVolume(dense, sparse_index=index, sparse_rows=rows)

        pts = rng.stream(0, "acc3", "pts").random((1000, 3))
        z_s, s_s = decode_points(field_of(x_s), heads, pts, mask)
        z_u, s_u = decode_points(field_of(x_up.features), heads, pts, mask)
        worst = max(float(np.max(np.abs(z_s - z_u))),
                    float(np.max(np.abs(s_s - s_u))))
        ok = worst <= 1e-6
        _report(3, "zero residual stage is identity", ok,
                f"max field diff {worst:.2e} at 1000 points")
        assert worst <= 1e-6


def _mask_brute_force(field, s):
    """Independent evaluation of the informative rule: flat sample grid,
    reshape, reduce per voxel."""
    t = T_SIDE
    n = t * s
    tau = 1.0 / s
    axis = (np.arange(n) + 0.5) / n
    out = np.zeros((s, s, s), dtype=bool)
    chunk = max(1, 96 // s * 4)
    for lo in range(0, s, chunk):
        hi = min(s, lo + chunk)
        xs = axis[lo * t:hi * t]
        X, Y, Z = np.meshgrid(xs, axis, axis, indexing="ij")
        vals = eval_sdf_many(field, np.stack([X, Y, Z], axis=-1)
                             .reshape(-1, 3))
        vals = vals.reshape(hi - lo, t, s, t, s, t) \
            .transpose(0, 2, 4, 1, 3, 5).reshape(hi - lo, s, s, t ** 3)
        amin = np.abs(vals).min(axis=3)
        smin = vals.min(axis=3)
        smax = vals.max(axis=3)
        out[lo:hi] = (amin <= tau) | (smin * smax <= 0.0)
    return out


def _sphere_crossing_voxels(center, radius, s):
    """Exact voxel set whose axis-aligned box straddles the sphere."""
    idx = np.stack(np.meshgrid(*[np.arange(s)] * 3, indexing="ij"),
                   axis=-1).reshape(-1, 3)
    lo = idx / s
    hi = (idx + 1) / s
    c = np.asarray(center, dtype=np.float64)
    near = np.clip(c, lo, hi)
    dmin = np.linalg.norm(near - c, axis=1)
    corners = np.stack([np.where(np.array([dx, dy, dz], dtype=bool),
                                 hi, lo)
                        for dx in (0, 1) for dy in (0, 1)
                        for dz in (0, 1)], axis=0)
    dmax = np.linalg.norm(corners - c, axis=2).max(axis=0)
    return ((dmin <= radius) & (radius <= dmax)).reshape(s, s, s)


class TestCriterion04:
    def test_informative_mask_matches_brute_force(self):
        center, radius = (0.48, 0.52, 0.45), 0.23
        fields = {
            "sphere": sphere_field(center, radius),
            "box": box_field((0.5, 0.45, 0.55), (0.2, 0.14, 0.17)),
            "union": union_field(sphere_field((0.35, 0.5, 0.5), 0.15),
                                 box_field((0.65, 0.5, 0.5),
                                           (0.1, 0.18, 0.12))),
        }
        checked = []
        for name, field in fields.items():
            for s in (16, 32, 96):
                mask = informative_voxel_mask(field, s)
                brute = _mask_brute_force(field, s)
                assert np.array_equal(mask, brute), (name, s)
                checked.append(f"{name}@{s}")
        for s in (16, 32, 96):
            crossing = _sphere_crossing_voxels(center, radius, s)
            mask = informative_voxel_mask(fields["sphere"], s)
            assert (mask | ~crossing).all(), s    # no crossing voxel missed
        _report(4, "informative mask equals brute force", True,
                ", ".join(checked))


def _routing_scene(field, rig):
    cams = orbit_cameras(*rig)
    vol_mask = informative_voxel_mask(field, 24)
    img_mask = np.stack([foreground_patch_mask(silhouette_alpha(field, cam))
                         for cam in cams])
    x_d = np.zeros((4 ** 3, 8), dtype=F32)
    y_d = np.zeros((len(cams) * 64, 8), dtype=F32)
    pe_v = init_pos_embed(5, 3, 24, 8, label="acc5v")
    pe_i = init_pos_embed(5, 2, 24, 8, label="acc5i")
    x_up, y_up = upsample_select_tokens(x_d, y_d, vol_mask, img_mask,
                                        pe_v, pe_i)
    return cams, x_up, y_up


class TestCriterion05:
    def test_routing_tables_match_oracles(self):
        fields = [sphere_field((0.45, 0.5, 0.55), 0.2),
                  box_field((0.5, 0.45, 0.5), (0.16, 0.12, 0.2)),
                  union_field(sphere_field((0.38, 0.5, 0.52), 0.14),
                              sphere_field((0.62, 0.48, 0.5), 0.12))]
        rigs = [(2, 1.6, 15.0, (192, 192), 50.0, 0.0),
                (3, 1.9, 35.0, (192, 192), 45.0, 0.8),
                (2, 1.45, -12.0, (192, 192), 55.0, 2.2)]
        budgets = RoutingBudgets(b_i=6, b_v2v=3, b_v2i=3, b_i2v=3, b_i2i=3)
        combos = 0
        for field in fields:
            for rig in rigs:
                cams, x_up, y_up = _routing_scene(field, rig)
                pv, pi = partition(x_up), partition(y_up)
                vc = volume_token_coords(x_up)
                ic = image_token_coords(y_up, cams, field, LAPLACE_BETA)
                plan = build_routing_plan(vc, ic, pv, pi, cams, budgets)
                for qi in range(x_up.count):
                    assert plan.tables["v2v"].lists[qi].tolist() \
                        == _volume_oracle(vc.points[qi], pv, 3)
                    assert plan.tables["v2i"].lists[qi].tolist() \
                        == _image_oracle(vc.points[qi], cams, pi, ic, 6, 3)
                for qi in range(y_up.count):
                    assert plan.tables["i2v"].lists[qi].tolist() \
                        == _volume_oracle(ic.points[qi], pv, 3)
                    assert plan.tables["i2i"].lists[qi].tolist() \
                        == _image_oracle(ic.points[qi], cams, pi, ic, 6, 3)
                combos += 1
        _report(5, "routing equals geometric oracles", True,
                f"{combos} scene/rig combos, tie order included")
        assert combos == 9


@pytest.fixture(scope="module")
def desk():
    """Desk-scale sparse stage: real masks at fine sides 48/48, model
    width 64, 8/1 heads, depth 4."""
    params = AttentionParams(8, 1, 8)
    d = params.model_dim
    field = union_field(sphere_field((0.42, 0.5, 0.55), 0.18),
                        box_field((0.6, 0.45, 0.4), (0.12, 0.12, 0.12)))
    cams = orbit_cameras(4, 1.7, 20.0, (384, 384))
    vol_mask = informative_voxel_mask(field, 48)
    img_mask = np.stack([foreground_patch_mask(silhouette_alpha(field, cam))
                         for cam in cams])
    g = rng.stream(0, "acc6")
    x_d = g.standard_normal((8 ** 3, d)).astype(F32)
    y_d = g.standard_normal((4 * 16 ** 2, d)).astype(F32)
    pe_v = init_pos_embed(6, 3, 48, d, label="acc6v")
    pe_i = init_pos_embed(6, 2, 48, d, label="acc6i")
    x_up, y_up = upsample_select_tokens(x_d, y_d, vol_mask, img_mask,
                                        pe_v, pe_i)
    pv, pi = partition(x_up), partition(y_up)
    ctx = build_sparse_context(pv, pi, budgets={n: 4 for n in
                                                ("v2v", "v2i", "i2v",
                                                 "i2i")})
    weights = init_sparse_stage(0, params, 4)
    start = time.monotonic()
    x_s, y_s = sparse_stage_forward(x_up, y_up, weights, ctx, params)
    serial_s = time.monotonic() - start
    return {"params": params, "x_up": x_up, "y_up": y_up, "pv": pv,
            "pi": pi, "ctx": ctx, "weights": weights, "x_s": x_s,
            "y_s": y_s, "serial_s": serial_s}


class TestCriterion06:
    def test_parallel_parity_at_desk_dims(self, desk):
        start = time.monotonic()
        worst = 0.0
        topologies = {}
        for n_workers in (1, 2, 3, 4, 8):
            x_p, y_p, topo = parallel_sparse_stage(
                desk["x_up"], desk["y_up"], desk["weights"], desk["ctx"],
                desk["params"], n_workers)
            worst = max(worst, float(np.max(np.abs(
                x_p.astype(np.float64) - desk["x_s"].astype(np.float64)))),
                float(np.max(np.abs(
                    y_p.astype(np.float64)
                    - desk["y_s"].astype(np.float64)))))
            windows = [rec for rec in topo.message_log if rec[1] == "window"]
            phases = {p for p, *_ in windows}
            assert phases == {f"layer{m}/{use}/win" for m in range(4)
                              for use in ("v2v", "i2i")}
            assert all(nb == 0 for *_x, nb in windows)
            total = desk["x_up"].count + desk["y_up"].count
            assert int(topo.loads.sum()) == total    # conservation
            topologies[n_workers] = topo
        elapsed = desk["serial_s"] + (time.monotonic() - start)
        ok = worst <= 1e-6 and elapsed < 60.0
        _report(6, "sequence-parallel parity", ok,
                f"W in (1,2,3,4,8), max diff {worst:.2e}, "
                f"{desk['x_up'].count}+{desk['y_up'].count} tokens, "
                f"{elapsed:.1f}s")
        assert worst <= 1e-6
        assert elapsed < 60.0


class TestCriterion07:
    def test_lpt_guarantee_and_small_instance_optimality(self, desk):
        max_occ = max(int(desk["pv"].occupancy.max()),
                      int(desk["pi"].occupancy.max()))
        total = desk["x_up"].count + desk["y_up"].count
        for n_workers in (1, 2, 3, 4, 8):
            topo = shard_blocks(desk["pv"], desk["pi"], n_workers)
            assert int(topo.loads.max()) <= total / n_workers + max_occ
        ratios = []
        for seed in range(4):
            vol = make_volume_tokens(seed + 40, 16, 4, 0.05, tag="acc7v")
            img = make_image_tokens(seed + 40, 1, 8, 4, 0.4, tag="acc7i")
            pv, pi = partition(vol), partition(img)
            sizes = np.concatenate([pv.occupancy, pi.occupancy]).tolist()
            assert len(sizes) <= 12
            occ = max(int(pv.occupancy.max()), int(pi.occupancy.max()))
            for n_workers in (2, 3):
                topo = shard_blocks(pv, pi, n_workers)
                mean = (vol.count + img.count) / n_workers
                assert int(topo.loads.max()) <= mean + occ
                opt = _opt_makespan(sizes, n_workers)
                ratio = int(topo.loads.max()) / opt
                assert ratio <= 4.0 / 3.0 + 1e-9
                ratios.append(ratio)
        _report(7, "LPT sharding quality", True,
                f"worst LPT/OPT ratio {max(ratios):.3f}")


class TestCriterion08:
    def test_hardware_faithful_head_ratio(self):
        for h_q, h_kv in ((8, 1), (24, 3), (8, 2), (4, 4), (48, 2)):
            with pytest.raises(ConfigurationError):
                AttentionParams(h_q, h_kv, 8, hardware_faithful=True)
        for h_q, h_kv in ((32, 2), (16, 1), (64, 4)):
            p = AttentionParams(h_q, h_kv, 8, hardware_faithful=True)
            assert p.group_size % 16 == 0
        _report(8, "hardware-faithful GQA ratio", True,
                "rejects ratio % 16 != 0, accepts 32/2")


class TestCriterion09:
    def test_geometry_primitives(self):
        g = rng.stream(0, "acc9")
        side = 6
        c = g.standard_normal(4)
        centers = (np.arange(side) + 0.5) / side
        ii, jj, kk = np.meshgrid(centers, centers, centers, indexing="ij")
        vol = (c[0] + c[1] * ii + c[2] * jj + c[3] * kk)[..., None] \
            .astype(F32)
        pts = g.random((500, 3))
        pts[:2] = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]
        tri_diff = float(np.max(np.abs(
            trilinear_interpolate_many(vol, pts)[:, 0]
            - (c[0] + pts @ c[1:]))))
        assert tri_diff < 1e-5

        cams = orbit_cameras(2, 1.8, 25.0, (100, 100))
        pl_worst = 0.0
        n_rays = 0
        for cam in cams:
            rays = pluecker_rays(cam, (100, 100)).reshape(-1, 6)
            dots = np.abs(np.einsum("nd,nd->n", rays[:, :3], rays[:, 3:]))
            pl_worst = max(pl_worst, float(dots.max()))
            n_rays += rays.shape[0]
        assert n_rays >= 10 ** 4
        assert pl_worst <= 1e-6

        rt_worst = 0.0
        for seed in range(10):
            gg = rng.stream(seed, "acc9rt")
            cam = orbit_cameras(1, 1.5 + gg.random(), 40.0 * gg.random()
                                - 10.0, (128, 96), 50.0,
                                phase=float(6.28 * gg.random()))[0]
            for _ in range(50):
                p = gg.random(3)
                pixel, depth = project_point(cam, p)
                back = unproject_point(cam, pixel, depth)
                rt_worst = max(rt_worst, float(np.max(np.abs(back - p))))
        assert rt_worst <= 1e-5
        _report(9, "geometry primitives", True,
                f"trilinear {tri_diff:.1e}, pluecker {pl_worst:.1e} over "
                f"{n_rays} rays, round-trip {rt_worst:.1e}")


class TestCriterion10:
    def test_repeated_runs_are_byte_identical(self, tmp_path, capsys):
        scene = tmp_path / "scene.json"
        scene.write_text(json.dumps(
            {"schema": 1,
             "sdf": {"kind": "sphere", "center": [0.45, 0.5, 0.55],
                     "radius": 0.22},
             "rig": {"count": 2, "radius": 1.6, "elevation_deg": 15.0,
                     "image_size": [64, 64]}}))
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(
            {"schema": 1, "seed": 7, "workers": 2, "feat_dim": 8,
             "model": {"d": 32, "n_q_heads": 4, "n_kv_heads": 2,
                       "depth_dense": 1, "depth_sparse": 1},
             "resolution": {"s_vol_coarse": 4, "s_img_coarse": 8},
             "routing": {"mode": "3d", "b_i": 4, "b_v2v": 3, "b_v2i": 3,
                         "b_i2v": 3, "b_i2i": 3}}))
        for name in ("a", "b"):
            rc = cli_main(["run", "--scene", str(scene), "--config",
                           str(cfg), "--out", str(tmp_path / name)])
            assert rc == 0
        capsys.readouterr()
        same = {}
        for name in ("goldens.bin", "messages.csv", "plan.bin",
                     "summary.json"):
            same[name] = (tmp_path / "a" / name).read_bytes() \
                == (tmp_path / "b" / name).read_bytes()
        ok = all(same.values())
        with capsys.disabled():
            pass
        _report(10, "byte-identical reruns", ok,
                ", ".join(sorted(same)))
        assert ok
