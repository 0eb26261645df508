"""Causal convolution, cache bookkeeping, normalization, and layer stacks.

The two independent routes are kept strictly apart: the closed-form
cache_len is checked against the sliding-window simulation, and the
vectorized convolution against a plain nested-loop reference.
"""

import numpy as np
import pytest

from wfcodec import (
    CacheState,
    ChunkPlan,
    ConvSpec,
    LayerDef,
    ParameterError,
    Rng,
    ShapeError,
    StateError,
    VideoTensor,
    cache_len,
    cache_len_by_simulation,
    causal_conv3d,
    frame_layernorm,
    groupnorm_whole_clip,
    nearest_upsample,
    new_tensor,
    run_layer_stack,
    silu,
    stream_conv3d,
)

from helpers import conv3d_loop_oracle, make_random, max_abs_diff


def stream_all(x: VideoTensor, spec, weight, bias, sizes):
    """Drive stream_conv3d over the given chunk sizes; concat the outputs."""
    state = CacheState()
    pieces = []
    start = 0
    for size in sizes:
        chunk = VideoTensor(x.data[:, start : start + size])
        start += size
        out, state = stream_conv3d(state, chunk, spec, weight, bias)
        if out is not None:
            pieces.append(out.data)
    assert start == x.time
    return np.concatenate(pieces, axis=1), state


class TestConvSpec:
    def test_temporal_pad_is_kernel_minus_one(self):
        spec = ConvSpec(2, 3, (4, 3, 3))
        assert spec.temporal_pad == 3

    def test_invalid_specs(self):
        with pytest.raises(ParameterError):
            ConvSpec(0, 1, (1, 1, 1))
        with pytest.raises(ParameterError):
            ConvSpec(1, 1, (0, 1, 1))
        with pytest.raises(ParameterError):
            ConvSpec(1, 1, (1, 1, 1), (1, 0, 1))
        with pytest.raises(ParameterError):
            ConvSpec(1, 1, (1, 1, 1), pad_mode="wrap")

    def test_out_time_law(self):
        assert ConvSpec(1, 1, (3, 1, 1), (2, 1, 1)).out_time(33) == 17
        assert ConvSpec(1, 1, (3, 1, 1), (1, 1, 1)).out_time(33) == 33
        assert ConvSpec(1, 1, (5, 1, 1), (3, 1, 1)).out_time(10) == 4


class TestCausalConv3d:
    def test_identity_kernel(self):
        x = make_random(1, (3, 5, 6, 6))
        weight = np.zeros((3, 3, 1, 1, 1), dtype=np.float32)
        for i in range(3):
            weight[i, i, 0, 0, 0] = 1.0
        spec = ConvSpec(3, 3, (1, 1, 1))
        out = causal_conv3d(x, spec, weight)
        assert np.array_equal(out.data, x.data)

    def test_averaging_preserves_constants(self):
        c = 0.6
        cin, kt, kh, kw = 2, 3, 3, 3
        x = new_tensor(cin, 5, 8, 8, c)
        weight = np.full(
            (1, cin, kt, kh, kw), 1.0 / (kt * kh * kw * cin), dtype=np.float32
        )
        spec = ConvSpec(cin, 1, (kt, kh, kw))  # valid conv: no spatial pad
        out = causal_conv3d(x, spec, weight)
        assert out.shape == (1, 5, 6, 6)
        np.testing.assert_allclose(out.data, c, atol=1e-6)

    def test_matches_loop_oracle_on_reference_shape(self):
        x = make_random(2, (2, 5, 6, 6))
        rng = Rng(3)
        weight = rng.normal((3, 2, 3, 2, 2), std=0.5)
        bias = rng.normal((3,), std=0.1)
        spec = ConvSpec(2, 3, (3, 2, 2), (1, 1, 1), (1, 1))
        out = causal_conv3d(x, spec, weight, bias)
        expected = conv3d_loop_oracle(x.data, weight, bias, (1, 1, 1), (1, 1))
        assert out.shape == expected.shape
        assert max_abs_diff(out.data, expected) <= 1e-5

    def test_matches_loop_oracle_random_specs(self):
        """A spread of random geometries against the brute-force reference."""
        rng = Rng(202)
        for trial in range(12):
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 4))
            kernel = tuple(int(rng.integers(1, 4)) for _ in range(3))
            stride = tuple(int(rng.integers(1, 3)) for _ in range(3))
            pad = (int(rng.integers(0, 2)), int(rng.integers(0, 2)))
            pad_mode = "replicate" if trial % 2 else "zeros"
            t = int(rng.integers(1, 7))
            h = kernel[1] + int(rng.integers(0, 5))
            w = kernel[2] + int(rng.integers(0, 5))
            spec = ConvSpec(cin, cout, kernel, stride, pad, pad_mode)
            x = VideoTensor(rng.normal((cin, t, h, w)))
            weight = rng.normal(spec.weight_shape(), std=0.5)
            bias = rng.normal((cout,), std=0.2)
            out = causal_conv3d(x, spec, weight, bias)
            expected = conv3d_loop_oracle(x.data, weight, bias, stride, pad, pad_mode)
            assert out.shape == expected.shape
            assert max_abs_diff(out.data, expected) <= 1e-5

    def test_output_frame0_causal(self):
        spec = ConvSpec(2, 2, (3, 3, 3), (1, 1, 1), (1, 1))
        weight = Rng(5).normal(spec.weight_shape(), std=0.3)
        base = make_random(6, (2, 6, 8, 8))
        perturbed = base.data.copy()
        perturbed[:, 1:] += 3.0
        out0 = causal_conv3d(base, spec, weight)
        out1 = causal_conv3d(VideoTensor(perturbed), spec, weight)
        assert np.array_equal(out0.data[:, 0], out1.data[:, 0])

    def test_channel_mismatch(self):
        spec = ConvSpec(3, 1, (1, 1, 1))
        weight = np.ones(spec.weight_shape(), dtype=np.float32)
        with pytest.raises(ShapeError):
            causal_conv3d(new_tensor(2, 1, 2, 2, 0.0), spec, weight)

    def test_weight_shape_mismatch(self):
        spec = ConvSpec(2, 1, (3, 3, 3))
        with pytest.raises(ShapeError):
            causal_conv3d(
                new_tensor(2, 2, 4, 4, 0.0),
                spec,
                np.ones((1, 2, 3, 3), dtype=np.float32),
            )


class TestCacheLen:
    def test_stride1_caches_two_frames(self):
        for m in range(12):
            assert cache_len(3, 1, 4, m) == 2

    def test_stride2_caches_single_frame(self):
        for m in range(12):
            assert cache_len(3, 2, 4, m) == 1

    def test_modular_cache_cycle(self):
        for m in range(12):
            assert cache_len(4, 3, 4, m) == (m % 3) + 1

    def test_formula_equals_simulation_sample_grid(self):
        for k in range(1, 7):
            for s in range(1, 5):
                for tc in (1, 3, 8):
                    for m in range(12):
                        assert cache_len(k, s, tc, m) == cache_len_by_simulation(
                            k, s, tc, m
                        )

    def test_negative_when_stride_outruns_kernel(self):
        # k=1, s=2: nothing needs caching and the next window starts one
        # frame past the data; both routes agree on the signed value.
        assert cache_len(1, 2, 1, 0) == -1
        assert cache_len_by_simulation(1, 2, 1, 0) == -1

    def test_stride_equal_kernel_periodicity(self):
        # s_t == k_t with chunk a multiple of k_t: occupancy repeats with m.
        values = [cache_len(3, 3, 6, m) for m in range(9)]
        sims = [cache_len_by_simulation(3, 3, 6, m) for m in range(9)]
        assert values == sims
        assert values[:3] * 3 == values

    def test_invalid_arguments(self):
        with pytest.raises(ParameterError):
            cache_len(0, 1, 1, 0)
        with pytest.raises(ParameterError):
            cache_len(1, 0, 1, 0)
        with pytest.raises(ParameterError):
            cache_len(1, 1, 0, 0)
        with pytest.raises(ParameterError):
            cache_len_by_simulation(1, 1, 1, -1)


class TestStreamConv3d:
    def _setup(self, seed, cin=2, cout=3, kernel=(3, 3, 3), stride=(1, 1, 1)):
        spec = ConvSpec(cin, cout, kernel, stride, (1, 1))
        rng = Rng(seed)
        weight = rng.normal(spec.weight_shape(), std=0.4)
        bias = rng.normal((cout,), std=0.1)
        return spec, weight, bias

    def test_single_chunk_equals_direct(self):
        spec, weight, bias = self._setup(21)
        x = make_random(22, (2, 9, 8, 8))
        direct = causal_conv3d(x, spec, weight, bias)
        streamed, _ = stream_all(x, spec, weight, bias, [9])
        assert max_abs_diff(streamed, direct.data) <= 1e-6

    def test_canonical_chunking_33_frames(self):
        """k_t=3, s_t=1, T=33, chunking 1 + 8 x 4 matches direct evaluation."""
        spec, weight, bias = self._setup(23)
        x = make_random(24, (2, 33, 8, 8))
        direct = causal_conv3d(x, spec, weight, bias)
        streamed, _ = stream_all(x, spec, weight, bias, [1] + [4] * 8)
        assert max_abs_diff(streamed, direct.data) <= 1e-6

    @pytest.mark.parametrize(
        "kernel_t,stride_t", [(1, 1), (2, 1), (3, 2), (4, 3), (5, 2), (2, 4)]
    )
    def test_mixed_chunkings_match_direct(self, kernel_t, stride_t):
        spec, weight, bias = self._setup(
            25, kernel=(kernel_t, 3, 3), stride=(stride_t, 1, 1)
        )
        x = make_random(26 + kernel_t, (2, 17, 8, 8))
        direct = causal_conv3d(x, spec, weight, bias)
        plans = [[17], [1] + [4] * 4, [2, 5, 1, 8, 1], [1] * 17, [8, 8, 1]]
        for sizes in plans:
            streamed, _ = stream_all(x, spec, weight, bias, sizes)
            assert streamed.shape == direct.shape
            assert max_abs_diff(streamed, direct.data) <= 1e-6

    def test_cache_occupancy_trace_k3_s2(self):
        """Canonical chunking k_t=3, s_t=2, T_chunk=4: only the last frame is
        ever cached, occupancy trace [1, 1, 1, ...]."""
        spec, weight, bias = self._setup(27, kernel=(3, 3, 3), stride=(2, 1, 1))
        x = make_random(28, (2, 33, 8, 8))
        state = CacheState()
        occupancies = []
        start = 0
        for size in [1] + [4] * 8:
            chunk = VideoTensor(x.data[:, start : start + size])
            start += size
            _, state = stream_conv3d(state, chunk, spec, weight, bias)
            occupancies.append(state.occupancy)
        assert occupancies == [1] * 9

    @pytest.mark.parametrize("kernel_t,stride_t,t_chunk", [(3, 1, 4), (4, 3, 4), (5, 4, 2), (2, 2, 3)])
    def test_occupancy_matches_formula_canonical(self, kernel_t, stride_t, t_chunk):
        spec, weight, bias = self._setup(
            29, kernel=(kernel_t, 1, 1), stride=(stride_t, 1, 1)
        )
        total = 1 + 6 * t_chunk
        x = make_random(30, (2, total, 4, 4))
        state = CacheState()
        start = 0
        for m, size in enumerate([1] + [t_chunk] * 6):
            chunk = VideoTensor(x.data[:, start : start + size])
            start += size
            _, state = stream_conv3d(state, chunk, spec, weight, bias)
            assert state.occupancy == max(0, cache_len(kernel_t, stride_t, t_chunk, m))

    def test_mid_stream_chunk_may_emit_nothing(self):
        spec, weight, bias = self._setup(31, kernel=(3, 1, 1), stride=(2, 1, 1))
        x = make_random(32, (2, 4, 4, 4))
        state = CacheState()
        out0, state = stream_conv3d(
            state, VideoTensor(x.data[:, :1]), spec, weight, bias
        )
        assert out0 is not None and out0.time == 1
        out1, state = stream_conv3d(
            state, VideoTensor(x.data[:, 1:2]), spec, weight, bias
        )
        assert out1 is None

    def test_finalized_stream_rejects_chunks(self):
        spec, weight, bias = self._setup(33)
        state = CacheState().finalize()
        with pytest.raises(StateError):
            stream_conv3d(state, new_tensor(2, 1, 4, 4, 0.0), spec, weight, bias)

    def test_zero_frame_chunk_unrepresentable(self):
        # The public pre-condition "chunk time > 0" is enforced structurally:
        # a zero-frame VideoTensor cannot be constructed at all.
        with pytest.raises(ShapeError):
            VideoTensor(np.zeros((2, 0, 4, 4), dtype=np.float32))

    def test_state_counts_chunks(self):
        spec, weight, bias = self._setup(34)
        state = CacheState()
        out, state = stream_conv3d(
            state, new_tensor(2, 1, 4, 4, 0.5), spec, weight, bias
        )
        assert state.chunk_index == 1
        assert state.frames_seen == 1 + spec.temporal_pad


class TestFrameLayernorm:
    def test_constant_frame_returns_bias(self):
        x = new_tensor(3, 2, 4, 4, 5.0)
        gain = np.ones(3, dtype=np.float32)
        bias = np.array([0.5, -1.0, 2.0], dtype=np.float32)
        out = frame_layernorm(x, gain, bias)
        for c in range(3):
            np.testing.assert_allclose(out.data[c], bias[c], atol=1e-6)

    def test_per_frame_statistics(self):
        x = make_random(41, (4, 3, 8, 8))
        out = frame_layernorm(x, np.ones(4, np.float32), np.zeros(4, np.float32))
        for t in range(3):
            frame = out.data[:, t].astype(np.float64)
            assert abs(frame.mean()) <= 1e-5
            assert frame.var() == pytest.approx(1.0, abs=1e-3)

    def test_streamed_equals_direct(self):
        x = make_random(42, (3, 9, 8, 8))
        gain = Rng(43).normal((3,), std=0.3)
        bias = Rng(44).normal((3,), std=0.3)
        direct = frame_layernorm(x, gain, bias)
        pieces = [
            frame_layernorm(VideoTensor(x.data[:, s:e]), gain, bias).data
            for s, e in ((0, 1), (1, 5), (5, 9))
        ]
        assert max_abs_diff(np.concatenate(pieces, axis=1), direct.data) <= 1e-6

    def test_bad_eps(self):
        x = new_tensor(1, 1, 2, 2, 0.0)
        with pytest.raises(ParameterError):
            frame_layernorm(x, [1.0], [0.0], eps=0.0)


class TestGroupnormWholeClip:
    def test_single_frame_equals_frame_layernorm(self):
        x = make_random(51, (4, 1, 8, 8))
        gain = np.ones(4, np.float32)
        bias = np.zeros(4, np.float32)
        gn = groupnorm_whole_clip(x, 1, gain, bias)
        ln = frame_layernorm(x, gain, bias)
        assert max_abs_diff(gn.data, ln.data) <= 1e-6

    def test_constant_input_returns_bias(self):
        x = new_tensor(4, 3, 4, 4, 2.5)
        bias = np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32)
        out = groupnorm_whole_clip(x, 2, np.ones(4, np.float32), bias)
        for c in range(4):
            np.testing.assert_allclose(out.data[c], bias[c], atol=1e-6)

    def test_chunked_differs_from_direct(self):
        """The negative control: whole-clip statistics change with chunk
        boundaries, so streaming group norm per chunk diverges."""
        x = make_random(52, (4, 8, 8, 8))
        gain = np.ones(4, np.float32)
        bias = np.zeros(4, np.float32)
        direct = groupnorm_whole_clip(x, 2, gain, bias)
        chunked = np.concatenate(
            [
                groupnorm_whole_clip(VideoTensor(x.data[:, :4]), 2, gain, bias).data,
                groupnorm_whole_clip(VideoTensor(x.data[:, 4:]), 2, gain, bias).data,
            ],
            axis=1,
        )
        assert max_abs_diff(chunked, direct.data) > 1e-3

    def test_indivisible_groups_rejected(self):
        with pytest.raises(ParameterError):
            groupnorm_whole_clip(
                new_tensor(3, 1, 2, 2, 0.0), 2, np.ones(3), np.zeros(3)
            )


class TestSiluAndUpsample:
    def test_silu_values(self):
        x = np.array([0.0, 1.0, -1.0], dtype=np.float32)
        out = silu(x)
        np.testing.assert_allclose(
            out, [0.0, 1 / (1 + np.exp(-1)), -1 * np.exp(-1) / (1 + np.exp(-1))],
            atol=1e-6,
        )

    def test_silu_extremes_finite(self):
        out = silu(np.array([-1e4, 1e4], dtype=np.float32))
        assert np.isfinite(out).all()
        assert out[0] == 0.0
        assert out[1] == pytest.approx(1e4)

    def test_upsample_temporal_law(self):
        """Factor-2 time upsampling emits 2t-1 frames: frame j comes from
        input frame (j+1)//2."""
        x = make_random(61, (2, 5, 4, 4))
        out = nearest_upsample(x, (2, 1, 1))
        assert out.shape == (2, 9, 4, 4)
        for j in range(9):
            assert np.array_equal(out.data[:, j], x.data[:, (j + 1) // 2])

    def test_upsample_spatial(self):
        x = make_random(62, (1, 2, 3, 3))
        out = nearest_upsample(x, (1, 2, 2))
        assert out.shape == (1, 2, 6, 6)
        assert np.array_equal(out.data[0, 0, ::2, ::2], x.data[0, 0])
        assert np.array_equal(out.data[0, 0, 1::2, 1::2], x.data[0, 0])

    def test_upsample_single_frame(self):
        x = make_random(63, (1, 1, 2, 2))
        out = nearest_upsample(x, (2, 2, 2))
        assert out.shape == (1, 1, 4, 4)

    def test_bad_factors(self):
        with pytest.raises(ParameterError):
            nearest_upsample(new_tensor(1, 1, 2, 2, 0.0), (3, 1, 1))


def _random_stack(seed: int, use_groupnorm: bool = False):
    """conv(k3,s1) -> nonlinearity -> [norm] -> conv(k3,s2) on 4 channels."""
    rng = Rng(seed)
    spec1 = ConvSpec(4, 4, (3, 3, 3), (1, 1, 1), (1, 1))
    spec2 = ConvSpec(4, 4, (3, 3, 3), (2, 2, 2), (1, 1))
    layers = [
        LayerDef.conv(spec1, rng.normal(spec1.weight_shape(), std=0.3)),
        LayerDef.nonlinearity(),
    ]
    if use_groupnorm:
        layers.append(
            LayerDef.groupnorm(2, np.ones(4, np.float32), np.zeros(4, np.float32))
        )
    layers.append(
        LayerDef.conv(spec2, rng.normal(spec2.weight_shape(), std=0.3))
    )
    return layers


class TestRunLayerStack:
    def test_empty_stack_is_identity(self):
        x = make_random(71, (2, 5, 4, 4))
        assert run_layer_stack([], x) == x
        streamed = run_layer_stack([], x, ChunkPlan.canonical(2))
        assert np.array_equal(streamed.data, x.data)

    def test_stream_safe_stack_matches_direct(self):
        x = make_random(72, (4, 17, 8, 8))
        layers = _random_stack(73)
        direct = run_layer_stack(layers, x)
        for plan in (
            ChunkPlan.canonical(4),
            ChunkPlan.canonical(8),
            ChunkPlan.explicit([1, 3, 5, 7, 1]),
            ChunkPlan.explicit([1] * 17),
        ):
            streamed = run_layer_stack(layers, x, plan)
            assert streamed.shape == direct.shape
            assert max_abs_diff(streamed.data, direct.data) <= 1e-6

    def test_random_mixed_plans_property(self):
        """Any chunking with sizes 1..8 reproduces the direct result."""
        x = make_random(74, (4, 21, 8, 8))
        layers = _random_stack(75)
        direct = run_layer_stack(layers, x)
        rng = Rng(76)
        for _ in range(6):
            sizes = []
            remaining = 21
            while remaining:
                step = min(int(rng.integers(1, 9)), remaining)
                sizes.append(step)
                remaining -= step
            streamed = run_layer_stack(layers, x, ChunkPlan.explicit(sizes))
            assert max_abs_diff(streamed.data, direct.data) <= 1e-6

    def test_groupnorm_stack_diverges(self):
        x = make_random(77, (4, 16, 8, 8))
        layers = _random_stack(78, use_groupnorm=True)
        direct = run_layer_stack(layers, x)
        streamed = run_layer_stack(layers, x, ChunkPlan.explicit([8, 8]))
        assert max_abs_diff(streamed.data, direct.data) > 1e-3

    def test_stack_causality(self):
        layers = _random_stack(79)
        base = make_random(80, (4, 9, 8, 8))
        perturbed = base.data.copy()
        perturbed[:, 1:] += 5.0
        out0 = run_layer_stack(layers, base)
        out1 = run_layer_stack(layers, VideoTensor(perturbed))
        assert np.array_equal(out0.data[:, 0], out1.data[:, 0])

    def test_layernorm_and_upsample_stack(self):
        x = make_random(81, (3, 9, 4, 4))
        layers = [
            LayerDef.layernorm(np.ones(3, np.float32), np.zeros(3, np.float32)),
            LayerDef.upsample((2, 2, 2)),
            LayerDef.nonlinearity(),
        ]
        direct = run_layer_stack(layers, x)
        assert direct.shape == (3, 17, 8, 8)
        streamed = run_layer_stack(layers, x, ChunkPlan.explicit([1, 4, 4]))
        assert max_abs_diff(streamed.data, direct.data) <= 1e-6


class TestLayerKinds:
    def test_stream_safety_classification(self):
        spec = ConvSpec(2, 2, (3, 3, 3), (1, 1, 1), (1, 1))
        weight = Rng(90).normal(spec.weight_shape(), std=0.2)
        ones, zeros = np.ones(2, np.float32), np.zeros(2, np.float32)
        assert LayerDef.conv(spec, weight).stream_safe
        assert LayerDef.layernorm(ones, zeros).stream_safe
        assert LayerDef.nonlinearity().stream_safe
        assert LayerDef.upsample((2, 2, 2)).stream_safe
        assert not LayerDef.groupnorm(2, ones, zeros).stream_safe


class TestChunkPlan:
    def test_parse_forms(self):
        assert ChunkPlan.parse("direct").mode == "direct"
        assert ChunkPlan.parse("canonical:4").chunk_size == 4
        assert ChunkPlan.parse("explicit:1,3,5").sizes == (1, 3, 5)
        with pytest.raises(ParameterError):
            ChunkPlan.parse("bogus")

    def test_invalid_plans_rejected(self):
        with pytest.raises(ParameterError):
            ChunkPlan.canonical(0)
        with pytest.raises(ParameterError):
            ChunkPlan.explicit([])
        with pytest.raises(ParameterError):
            ChunkPlan.explicit([2, 0, 1])

    def test_canonical_split_leads_with_single_frame(self):
        assert ChunkPlan.canonical(4).split(33) == [1] + [4] * 8
        assert ChunkPlan.canonical(8).split(33) == [1] + [8] * 4
        assert ChunkPlan.canonical(4).split(8) == [1, 4, 3]

    def test_explicit_split_must_sum(self):
        assert ChunkPlan.explicit([1, 3, 5]).split(9) == [1, 3, 5]
        with pytest.raises(ParameterError):
            ChunkPlan.explicit([1, 3]).split(9)

    def test_describe_roundtrip(self):
        for text in ("direct", "canonical:4", "explicit:1,3,5"):
            assert ChunkPlan.parse(text).describe() == text
