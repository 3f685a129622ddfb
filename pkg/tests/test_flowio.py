"""Codec, visualization, metric, and scene-generator tests."""

import struct

import cv2
import numpy as np
import pytest

from occflow.diffcore import Tensor
from occflow.errors import FormatError, ParameterError
from occflow.flowio import (
    SceneConfig,
    aggregate_metrics,
    compose_scene,
    compute_metrics,
    flow_to_color,
    generate_scene,
    read_flo,
    read_kitti_png,
    write_flo,
    write_kitti_png,
)
from occflow.flowops import FlowField, boundary_dilated_warp, occlusion_mask, warp_bilinear


def rand_flow(h, w, seed=0, scale=4.0):
    rng = np.random.default_rng(seed)
    # float32-representable values so codec round trips are bitwise
    return (scale * rng.standard_normal((1, 2, h, w))).astype(np.float32).astype(np.float64)


def const_flow(h, w, u, v):
    f = np.zeros((1, 2, h, w))
    f[0, 0] = u
    f[0, 1] = v
    return f


class TestFloCodec:
    def test_round_trip_bitwise(self, tmp_path):
        flow = rand_flow(13, 17, seed=1)
        path = tmp_path / "a.flo"
        write_flo(flow, path)
        back = read_flo(path)
        assert isinstance(back, FlowField)
        assert np.array_equal(back.numpy(), flow)

    def test_two_pixel_file_is_28_bytes(self, tmp_path):
        path = tmp_path / "b.flo"
        write_flo(const_flow(1, 2, 1.0, 2.0), path)
        assert path.stat().st_size == 4 + 4 + 4 + 16

    def test_header_layout(self, tmp_path):
        path = tmp_path / "c.flo"
        write_flo(const_flow(3, 5, 1.5, -2.25), path)
        blob = path.read_bytes()
        assert struct.unpack_from("<f", blob, 0)[0] == pytest.approx(202021.25)
        assert struct.unpack_from("<ii", blob, 4) == (5, 3)
        u0, v0 = struct.unpack_from("<ff", blob, 12)
        assert (u0, v0) == (1.5, -2.25)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "d.flo"
        path.write_bytes(struct.pack("<fii", 0.0, 2, 2) + b"\0" * 32)
        with pytest.raises(FormatError):
            read_flo(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "e.flo"
        write_flo(rand_flow(4, 4), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError):
            read_flo(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "f.flo"
        write_flo(rand_flow(4, 4), path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError):
            read_flo(path)

    def test_bad_shape_rejected(self, tmp_path):
        with pytest.raises(ParameterError):
            write_flo(np.zeros((2, 3, 4)), tmp_path / "g.flo")


class TestKittiCodec:
    def test_reference_values(self, tmp_path):
        # stored 32768 -> 0.0 and 32832 -> 1.0
        img = np.zeros((2, 2, 3), dtype=np.uint16)
        img[:, :, 2] = 32768
        img[:, :, 1] = 32768
        img[0, 0, 2] = 32832
        img[:, :, 0] = 1
        path = str(tmp_path / "ref.png")
        assert cv2.imwrite(path, img)
        flow, valid = read_kitti_png(path)
        assert flow.numpy()[0, 0, 0, 0] == 1.0
        assert flow.numpy()[0, 0, 1, 1] == 0.0
        assert np.all(flow.numpy()[0, 1] == 0.0)
        assert np.all(valid.numpy() == 1.0)

    def test_written_encoding(self, tmp_path):
        path = str(tmp_path / "enc.png")
        write_kitti_png(const_flow(2, 2, 1.0, -0.5), path)
        img = cv2.imread(path, cv2.IMREAD_UNCHANGED)
        assert img.dtype == np.uint16
        assert np.all(img[:, :, 2] == 32832)
        assert np.all(img[:, :, 1] == 32736)
        assert np.all(img[:, :, 0] == 1)

    def test_round_trip_quantization_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        flow = rng.integers(-512, 513, size=(1, 2, 9, 7)) / 64.0
        valid = (rng.random((9, 7)) > 0.3).astype(float)
        path = str(tmp_path / "rt.png")
        assert not write_kitti_png(flow, path, valid=valid)
        back, vback = read_kitti_png(path)
        assert np.array_equal(back.numpy(), flow)
        assert np.array_equal(vback.numpy()[0, 0], valid)

    def test_clamp_flagged(self, tmp_path):
        path = str(tmp_path / "cl.png")
        assert write_kitti_png(const_flow(2, 2, 600.0, 0.0), path)

    def test_rejects_8bit(self, tmp_path):
        path = str(tmp_path / "bad8.png")
        assert cv2.imwrite(path, np.zeros((2, 2, 3), dtype=np.uint8))
        with pytest.raises(FormatError):
            read_kitti_png(path)

    def test_rejects_single_channel(self, tmp_path):
        path = str(tmp_path / "gray.png")
        assert cv2.imwrite(path, np.zeros((2, 2), dtype=np.uint16))
        with pytest.raises(FormatError):
            read_kitti_png(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            read_kitti_png(str(tmp_path / "nope.png"))


class TestFlowToColor:
    def test_zero_flow_white(self):
        img = flow_to_color(np.zeros((1, 2, 5, 6)))
        assert img.shape == (5, 6, 3)
        assert img.dtype == np.uint8
        assert np.all(img == 255)

    def test_constant_field_constant_color(self):
        img = flow_to_color(const_flow(4, 4, 2.0, 1.0))
        assert np.all(img == img[0, 0])

    def test_opposite_directions_opposite_hues(self):
        r = 3.0
        pos = flow_to_color(const_flow(1, 1, r, 0.0), max_norm=r)[0, 0]
        neg = flow_to_color(const_flow(1, 1, -r, 0.0), max_norm=r)[0, 0]
        # wheel start (pure red) vs the cyan half of the wheel
        assert tuple(pos) == (255, 0, 0)
        assert neg[0] == 0 and neg[2] == 255
        assert tuple(neg) == (0, int(255 * (1 - 2 / 11)), 255)

    def test_magnitude_controls_saturation(self):
        weak = flow_to_color(const_flow(1, 1, 1.0, 0.0), max_norm=4.0)[0, 0]
        strong = flow_to_color(const_flow(1, 1, 4.0, 0.0), max_norm=4.0)[0, 0]
        assert np.all(weak.astype(int) >= strong.astype(int))
        assert weak[1] > strong[1]  # closer to white

    def test_over_range_dimmed(self):
        over = flow_to_color(const_flow(1, 1, 8.0, 0.0), max_norm=4.0)[0, 0]
        assert over.max() <= int(255 * 0.75)


class TestMetrics:
    def test_perfect_prediction(self):
        gt = rand_flow(8, 8)
        m = compute_metrics(gt, gt)
        assert m.epe == 0.0 and m.f1_all == 0.0
        assert not m.degenerate
        assert m.valid_pixels == 64

    def test_small_error_epe_one_f1_zero(self):
        gt = const_flow(6, 6, 10.0, 0.0)
        pred = gt + np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
        m = compute_metrics(pred, gt)
        assert m.epe == pytest.approx(1.0)
        assert m.f1_all == 0.0  # 1 <= 3 px

    def test_large_error_f1_one(self):
        gt = const_flow(6, 6, 10.0, 0.0)
        pred = gt + np.array([4.0, 0.0]).reshape(1, 2, 1, 1)
        m = compute_metrics(pred, gt)
        assert m.epe == pytest.approx(4.0)
        assert m.f1_all == 1.0  # 4 > 3 and 4 > 0.5

    def test_five_percent_rule(self):
        gt = const_flow(6, 6, 100.0, 0.0)
        pred = gt + np.array([4.0, 0.0]).reshape(1, 2, 1, 1)
        assert compute_metrics(pred, gt).f1_all == 0.0  # 4 < 5 = 5 % of 100

    def test_valid_mask_excludes(self):
        gt = const_flow(4, 4, 0.0, 0.0)
        pred = gt.copy()
        pred[0, 0, 0, 0] = 9.0
        valid = np.ones((4, 4))
        valid[0, 0] = 0.0
        m = compute_metrics(pred, gt, valid=valid)
        assert m.epe == 0.0
        assert m.valid_pixels == 15

    def test_occluded_epe(self):
        gt = const_flow(4, 4, 0.0, 0.0)
        pred = gt.copy()
        occ = np.zeros((4, 4))
        occ[1, 1] = 1.0
        pred[0, 0, 1, 1] = 2.0
        m = compute_metrics(pred, gt, gt_occ=occ)
        assert m.occluded_epe == pytest.approx(2.0)
        assert m.occluded_pixels == 1
        assert m.epe == pytest.approx(2.0 / 16)

    def test_boundary_band(self):
        h = w = 32
        gt = const_flow(h, w, 0.0, 0.0)
        pred = gt.copy()
        pred[0, 1, 0, 0] = 5.0  # corner pixel, inside the 8 px band
        m = compute_metrics(pred, gt)
        n_boundary = h * w - 16 * 16
        assert m.boundary_pixels == n_boundary
        assert m.boundary_epe == pytest.approx(5.0 / n_boundary)
        # interior pixel is not in the band
        pred2 = gt.copy()
        pred2[0, 1, 15, 15] = 5.0
        assert compute_metrics(pred2, gt).boundary_epe == 0.0

    def test_degenerate_flag(self):
        gt = const_flow(3, 3, 1.0, 0.0)
        m = compute_metrics(gt, gt, valid=np.zeros((3, 3)))
        assert m.degenerate
        assert m.epe == 0.0 and m.valid_pixels == 0

    def test_shape_mismatch(self):
        with pytest.raises(ParameterError):
            compute_metrics(const_flow(3, 3, 0, 0), const_flow(3, 4, 0, 0))

    def test_aggregate_pixel_weighted(self):
        gt_a = const_flow(2, 2, 0.0, 0.0)
        gt_b = const_flow(4, 4, 0.0, 0.0)
        ma = compute_metrics(gt_a + 1.0, gt_a)  # epe sqrt(2) over 4 px
        mb = compute_metrics(gt_b, gt_b)  # epe 0 over 16 px
        agg = aggregate_metrics([ma, mb])
        assert agg.valid_pixels == 20
        assert agg.epe == pytest.approx(np.sqrt(2.0) * 4 / 20)
        assert not agg.degenerate
        assert aggregate_metrics([]).degenerate


class TestSceneGeneration:
    def test_deterministic_per_seed(self):
        a = generate_scene(11)
        b = generate_scene(11)
        assert np.array_equal(a.raw1, b.raw1)
        assert np.array_equal(a.raw2, b.raw2)
        assert np.array_equal(a.flow_raw_f, b.flow_raw_f)
        assert np.array_equal(a.occ_object_raw_f, b.occ_object_raw_f)

    def test_seeds_differ(self):
        assert not np.array_equal(generate_scene(1).raw1, generate_scene(2).raw1)

    def test_zero_motion_scene(self):
        cfg = SceneConfig(n_sprites=(2, 2), max_disp=0.0, bg_moves=False)
        s = generate_scene(5, cfg)
        assert np.all(s.flow_raw_f == 0.0)
        assert np.all(s.flow_raw_b == 0.0)
        assert np.all(s.occ_object_raw_f == 0.0)
        assert np.all(s.oracle_f.numpy() == 0.0)
        assert np.array_equal(s.raw1, s.raw2)

    def test_value_range(self):
        s = generate_scene(7)
        assert s.raw1.min() >= 0.0 and s.raw1.max() <= 1.0
        assert s.raw2.min() >= 0.0 and s.raw2.max() <= 1.0

    def test_sprite_count_honored(self):
        cfg = SceneConfig(n_sprites=(3, 3))
        assert len(generate_scene(2, cfg).sprites) == 3

    def test_leading_edge_band(self):
        cfg = SceneConfig()
        s = compose_scene(cfg, [(48.0, 48.0, 10.0, 10.0, (8.0, 0.0))], bg_t=(0.0, 0.0))
        spr = s.sprites[0]
        n = cfg.raw_size
        yy, xx = np.indices((n, n)).astype(float)
        m1 = spr.covers(xx, yy, shifted=False)
        m2 = spr.covers(xx, yy, shifted=True)
        # static background: occluded iff the shifted sprite covers the pixel
        assert np.array_equal(s.occ_object_raw_f[0, 0], (m2 & ~m1).astype(float))
        assert s.occ_object_raw_f[0, 0, 48, 59:67].sum() == 8  # band width 8
        # trailing edge in the backward direction
        assert np.array_equal(s.occ_object_raw_b[0, 0], (m1 & ~m2).astype(float))
        # flows: translation inside the sprite, zero elsewhere
        assert np.all(s.flow_raw_f[0, 0][m1] == 8.0)
        assert np.all(s.flow_raw_f[0, 0][~m1] == 0.0)

    def test_oracle_matches_brute_force_on_integer_scenes(self):
        cfg = SceneConfig(allow_half_integer=False)
        for seed in range(5):
            s = generate_scene(seed, cfg)
            n = cfg.raw_size
            yy, xx = np.indices((n, n)).astype(float)
            layer1 = np.zeros((n, n), dtype=int)
            layer2 = np.zeros((n, n), dtype=int)
            for k, spr in enumerate(s.sprites, start=1):
                layer1[spr.covers(xx, yy, shifted=False)] = k
                layer2[spr.covers(xx, yy, shifted=True)] = k
            qx = (xx + s.flow_raw_f[0, 0]).round().astype(int)
            qy = (yy + s.flow_raw_f[0, 1]).round().astype(int)
            inb = (qx >= 0) & (qx < n) & (qy >= 0) & (qy < n)
            ref = np.zeros((n, n))
            ref[inb] = (layer2[qy[inb], qx[inb]] != layer1[inb]).astype(float)
            assert np.array_equal(s.occ_object_raw_f[0, 0][inb],
                                  ref[inb]), f"seed {seed}"

    def test_integer_scene_photometric_exact(self):
        # non-occluded pixels reconstruct bit-exactly through plain warping
        cfg = SceneConfig(allow_half_integer=False)
        s = generate_scene(9, cfg)
        cs = s.crop_at()
        warped, valid = warp_bilinear(cs.pair.crop2, cs.flow_f)
        err = np.abs(warped.numpy() - cs.pair.crop1.numpy())
        keep = (valid.numpy() > 0) & (cs.oracle_f.numpy() == 0)
        assert err[np.broadcast_to(keep, err.shape)].max() == 0.0

    def test_half_integer_scene_approximately_consistent(self):
        cfg = SceneConfig()
        s = compose_scene(cfg, [], bg_t=(2.5, -3.5), seed=4)
        cs = s.crop_at()
        warped, valid = warp_bilinear(cs.pair.crop2, cs.flow_f)
        err = np.abs(warped.numpy() - cs.pair.crop1.numpy())
        keep = np.broadcast_to(valid.numpy() > 0, err.shape)
        assert err[keep].max() < 0.3  # bilinear interpolation error only
        assert err[keep].mean() < 0.03

    def test_bdw_exact_on_sprite_free_integer_scenes(self):
        cfg = SceneConfig(n_sprites=(0, 0), allow_half_integer=False)
        for seed in (0, 1):
            s = generate_scene(seed, cfg)
            cs = s.crop_at()
            rec, valid = boundary_dilated_warp(cs.pair, cs.flow_f, "forward")
            assert valid.numpy().min() == 1.0
            assert np.abs(rec.numpy() - cs.pair.crop1.numpy()).max() == 0.0

    def test_occlusion_formula_agrees_with_oracle(self):
        cfg = SceneConfig(allow_half_integer=False, min_motion_separation=2.0,
                          sprite_placement="crop_interior")
        for seed in range(5):
            cs = generate_scene(seed, cfg).crop_at()
            m = occlusion_mask(cs.flow_f, cs.flow_b).numpy()
            assert (m == cs.oracle_f.numpy()).mean() >= 0.99

    def test_crop_at_offsets(self):
        s = compose_scene(SceneConfig(), [], bg_t=(6.0, 0.0))
        for p0 in ((0, 0), (16, 16), (32, 32)):
            cs = s.crop_at(p0)
            py, px = p0
            sl = (slice(None), slice(None), slice(py, py + 64), slice(px, px + 64))
            assert np.array_equal(cs.pair.crop1.numpy(), s.raw1[sl])
            assert np.array_equal(cs.pair.crop2.numpy(), s.raw2[sl])
            assert np.array_equal(cs.flow_f.numpy(), s.flow_raw_f[sl])
            # rightmost 6 columns leave the crop window
            expect = np.zeros((64, 64))
            expect[:, -6:] = 1.0
            assert np.array_equal(cs.occ_boundary_f.numpy()[0, 0], expect)

    def test_default_sample_cached_and_consistent(self):
        s = generate_scene(13)
        assert s.sample() is s.sample()
        cs = s.crop_at(s.p0)
        assert np.array_equal(s.flow_f.numpy(), cs.flow_f.numpy())
        assert np.array_equal(s.oracle_b.numpy(), cs.oracle_b.numpy())
        assert np.array_equal(
            s.oracle_f.numpy(),
            np.maximum(s.occ_object_f.numpy(), s.occ_out_f.numpy()))

    def test_crop_interior_placement(self):
        cfg = SceneConfig(sprite_placement="crop_interior", n_sprites=(2, 2))
        for seed in range(3):
            s = generate_scene(seed, cfg)
            py, px = s.p0
            for spr in s.sprites:
                for shift in (0.0, 1.0):
                    cx = spr.cx + shift * spr.t[0]
                    cy = spr.cy + shift * spr.t[1]
                    assert cx - spr.rx >= px and cx + spr.rx <= px + 63
                    assert cy - spr.ry >= py and cy + spr.ry <= py + 63

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            SceneConfig(raw_size=70, crop_size=64, max_disp=8.0)
        with pytest.raises(ParameterError):
            SceneConfig(sprite_placement="everywhere")

    def test_frame_pair_offsets(self):
        s = generate_scene(3)
        pair = s.frame_pair((4, 8))
        assert pair.p0 == (4, 8)
        assert np.array_equal(pair.crop1.numpy(), s.raw1[:, :, 4:68, 8:72])
