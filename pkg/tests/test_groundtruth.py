"""Occlusion masking and the synthetic clip generator."""

import numpy as np
import pytest

from stylewarp.coherence import FlowField, MaskMap, warp_features
from stylewarp.groundtruth import (
    ClipSample,
    OcclusionParams,
    SynthConfig,
    flow_gradient_magnitude,
    occlusion_mask,
    synth_clip,
)
from stylewarp.tensor import Tensor

from oracles import scalar_occlusion_reference

NO_BOUNDARY = OcclusionParams(boundary_coeff=1e9, boundary_bias=1e9)


def const_field(dx, dy, h, w):
    f = np.zeros((1, 2, h, w))
    f[0, 0] = dx
    f[0, 1] = dy
    return FlowField(Tensor(f))


class TestFlowGradient:
    def test_constant_flow_zero_gradient(self):
        out = flow_gradient_magnitude(const_field(3.0, -2.0, 6, 6))
        assert np.all(out.data == 0.0)

    def test_linear_ramp_gives_unit_interior(self):
        h = w = 8
        f = np.zeros((1, 2, h, w))
        f[0, 0] = np.arange(w)[None, :]
        out = flow_gradient_magnitude(FlowField(Tensor(f))).data[0, 0]
        assert np.allclose(out, 1.0, atol=1e-14)

    def test_step_edge_peak_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        h = w = 7
        step = np.zeros((1, 2, h, w))
        hgt = 4.0
        step[0, 0, :, 4:] = hgt
        out = flow_gradient_magnitude(FlowField(Tensor(step))).data[0, 0]
        # central difference at columns adjacent to the edge sees h/2
        assert out[3, 3] == pytest.approx((hgt / 2) ** 2)
        assert out[3, 4] == pytest.approx((hgt / 2) ** 2)
        # full-field agreement with a naive loop
        f = rng.standard_normal((1, 2, h, w))
        got = flow_gradient_magnitude(FlowField(Tensor(f))).data[0, 0]
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for c in range(2):
                    comp = f[0, c]
                    dx = (
                        comp[i, 1] - comp[i, 0]
                        if j == 0
                        else comp[i, -1] - comp[i, -2]
                        if j == w - 1
                        else 0.5 * (comp[i, j + 1] - comp[i, j - 1])
                    )
                    dy = (
                        comp[1, j] - comp[0, j]
                        if i == 0
                        else comp[-1, j] - comp[-2, j]
                        if i == h - 1
                        else 0.5 * (comp[i + 1, j] - comp[i - 1, j])
                    )
                    acc += dx * dx + dy * dy
                assert got[i, j] == pytest.approx(acc, abs=1e-12)


class TestOcclusionMask:
    def test_consistent_constant_pair_keeps_interior(self):
        fwd = const_field(2.0, 0.0, 8, 8)
        bwd = const_field(-2.0, 0.0, 8, 8)
        mask = occlusion_mask(fwd, bwd).tensor.data[0, 0]
        assert np.all(mask[:, 2:] == 1.0)
        # backward targets of the two leftmost columns leave the frame
        assert np.all(mask[:, :2] == 0.0)

    def test_gross_inconsistency_zeroes_everything(self):
        fwd = const_field(0.0, 0.0, 6, 6)
        bwd = const_field(5.0, 5.0, 6, 6)
        mask = occlusion_mask(fwd, bwd).tensor.data
        assert np.all(mask == 0.0)

    def test_mask_is_binary(self):
        rng = np.random.default_rng(1)
        fwd = FlowField(Tensor(rng.uniform(-3, 3, size=(1, 2, 9, 9))))
        bwd = FlowField(Tensor(rng.uniform(-3, 3, size=(1, 2, 9, 9))))
        m = occlusion_mask(fwd, bwd).tensor.data
        assert np.all((m == 0.0) | (m == 1.0))

    def test_monotone_in_biases(self):
        rng = np.random.default_rng(2)
        fwd = FlowField(Tensor(rng.uniform(-2, 2, size=(1, 2, 10, 10))))
        bwd = FlowField(Tensor(rng.uniform(-2, 2, size=(1, 2, 10, 10))))
        base = OcclusionParams()
        m0 = occlusion_mask(fwd, bwd, base).tensor.data
        for scale in (2.0, 10.0, 100.0):
            p = OcclusionParams(
                cross_check_bias=base.cross_check_bias * scale,
                boundary_bias=base.boundary_bias * scale,
            )
            m1 = occlusion_mask(fwd, bwd, p).tensor.data
            assert np.all(m1 >= m0)
            m0 = m1

    @pytest.mark.parametrize("seed", range(30))
    def test_vectorized_equals_scalar_reference(self, seed):
        rng = np.random.default_rng(100 + seed)
        h, w = int(rng.integers(4, 13)), int(rng.integers(4, 13))
        wf = rng.uniform(-3, 3, size=(1, 2, h, w))
        wb = rng.uniform(-3, 3, size=(1, 2, h, w))
        params = OcclusionParams()
        got = occlusion_mask(FlowField(Tensor(wf)), FlowField(Tensor(wb)), params)
        want = scalar_occlusion_reference(wf, wb, params)
        assert np.array_equal(got.tensor.data[0, 0], want)

    def test_translating_square_band_matches_analytic_mask(self):
        cfg = SynthConfig(
            height=48,
            width=48,
            num_frames=3,
            num_objects=1,
            camera_velocity=(0.0, 0.0),
            integer_velocities=True,
            max_speed=3.0,
        )
        clip = synth_clip(cfg, seed=11)
        for t in range(clip.num_pairs):
            got = occlusion_mask(clip.gt_flows_forward[t], clip.gt_flows[t], NO_BOUNDARY)
            assert np.array_equal(got.tensor.data, clip.gt_masks[t].tensor.data)


class TestSynthClip:
    def test_static_scene_identity(self):
        cfg = SynthConfig(num_frames=4, num_objects=1, camera_velocity=(0.0, 0.0), max_speed=0.0)
        clip = synth_clip(cfg, seed=5)
        for t in range(1, 4):
            assert np.array_equal(clip.frames[t].data, clip.frames[0].data)
            assert np.all(clip.gt_flows[t - 1].tensor.data == 0.0)
            assert np.all(clip.gt_masks[t - 1].tensor.data == 1.0)

    def test_background_only_constant_velocity(self):
        cfg = SynthConfig(num_frames=3, num_objects=0, camera_velocity=(2.0, 0.0))
        clip = synth_clip(cfg, seed=6)
        for t in range(clip.num_pairs):
            flow = clip.gt_flows[t].tensor.data
            assert np.all(flow[0, 0] == 2.0) and np.all(flow[0, 1] == 0.0)
            mask = clip.gt_masks[t].tensor.data[0, 0]
            assert np.all(mask[:, -2:] == 0.0)  # sources fall past the right edge
            assert np.all(mask[:, :-2] == 1.0)

    def test_same_seed_bit_identical(self):
        cfg = SynthConfig(num_objects=2, brightness_jitter=0.02, noise_sigma=1e-4)
        a = synth_clip(cfg, seed=7)
        b = synth_clip(cfg, seed=7)
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa.data, fb.data)
        for xa, xb in zip(a.gt_flows, b.gt_flows):
            assert np.array_equal(xa.tensor.data, xb.tensor.data)

    def test_degenerate_config_rejected(self):
        with pytest.raises(ValueError):
            SynthConfig(min_object_size=0)
        with pytest.raises(ValueError):
            SynthConfig(num_frames=0)

    def test_warp_soundness_exact_for_integer_velocities(self):
        cfg = SynthConfig(
            num_frames=5, num_objects=2, camera_velocity=(1.0, -1.0), integer_velocities=True
        )
        clip = synth_clip(cfg, seed=8)
        for t in range(1, 5):
            prev, cur, flow, mask = clip.pair(t)
            warped = warp_features(prev, flow)
            diff = np.abs(warped.data - cur.data) * mask.tensor.data
            assert diff.max() == 0.0

    def test_warp_soundness_bandlimited_fractional_velocities(self):
        cfg = SynthConfig(num_frames=6, num_objects=2, max_speed=2.5)
        clip = synth_clip(cfg, seed=9)
        for t in range(1, 6):
            prev, cur, flow, mask = clip.pair(t)
            warped = warp_features(prev, flow)
            support = np.broadcast_to(mask.tensor.data, cur.shape)
            err = np.abs(warped.data - cur.data)[support > 0]
            assert err.mean() <= 2.0 / 255.0

    def test_brightness_jitter_alternates_mean_intensity(self):
        cfg = SynthConfig(
            num_frames=2, num_objects=0, camera_velocity=(0.0, 0.0), brightness_jitter=0.05
        )
        clip = synth_clip(cfg, seed=10)
        m0 = clip.frames[0].data.mean()
        m1 = clip.frames[1].data.mean()
        assert m1 / m0 == pytest.approx(1.05, abs=1e-6)

    def test_clip_sample_invariants_enforced(self):
        cfg = SynthConfig(num_frames=3, num_objects=0)
        clip = synth_clip(cfg, seed=12)
        with pytest.raises(ValueError):
            ClipSample(
                frames=clip.frames,
                gt_flows=clip.gt_flows[:1],
                gt_masks=clip.gt_masks,
                gt_flows_forward=[],
                metadata={},
            )
        soft = MaskMap(Tensor(np.full((1, 1, 48, 48), 0.5)))
        with pytest.raises(ValueError):
            ClipSample(
                frames=clip.frames,
                gt_flows=clip.gt_flows,
                gt_masks=[soft, soft],
                gt_flows_forward=[],
                metadata={},
            )
