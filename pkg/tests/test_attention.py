import numpy as np
import numpy.testing as npt
import pytest

from glam.attention import (
    AttentionBundle,
    FusionParams,
    GlobalChannelParams,
    GlobalSpatialParams,
    LocalChannelParams,
    LocalSpatialParams,
    export_heatmap,
    fuse,
    glam_forward,
    global_channel_attention,
    global_feature_map,
    global_spatial_attention,
    init_attention,
    local_channel_attention,
    local_feature_map,
    local_spatial_attention,
)
from glam.tensor import Tensor, conv1d_same, gap, sigmoid
from glam.gradcheck import check_parameter
from glam.tensor import tsum

from oracles import conv2d_loop, glam_forward_loop

rng = np.random.default_rng(42)


def random_feat(c=4, h=3, w=3):
    return Tensor(rng.standard_normal((c, h, w)))


class TestLocalChannel:
    def test_zero_kernel_gives_half(self):
        out = local_channel_attention(random_feat(), LocalChannelParams(
            kernel=Tensor([0.0, 0.0, 0.0])))
        npt.assert_array_equal(out.data, np.full((4, 1, 1), 0.5))

    def test_identity_kernel_saturates(self):
        feat = np.zeros((2, 2, 2))
        feat[1] = 50.0
        out = local_channel_attention(Tensor(feat), LocalChannelParams(
            kernel=Tensor([0.0, 1.0, 0.0])))
        assert out.data[0, 0, 0] == 0.5
        assert out.data[1, 0, 0] > 1.0 - 1e-12

    def test_matches_op_composition(self):
        feat = random_feat(5, 2, 3)
        params = LocalChannelParams(kernel=Tensor(rng.standard_normal(3)))
        out = local_channel_attention(feat, params)
        expect = sigmoid(conv1d_same(gap(feat), params.kernel)).data
        npt.assert_array_equal(out.data.ravel(), expect)


def make_local_spatial(c, width=None, fill=None):
    """Parameters with either random weights or a constant fill."""
    cl = width if width is not None else max(1, c // 4)

    def w(shape):
        if fill is not None:
            return Tensor(np.full(shape, fill))
        return Tensor(rng.standard_normal(shape) * 0.5)

    return LocalSpatialParams(
        reduce_w=w((cl, c, 1, 1)), reduce_b=w((cl,)),
        point_w=w((cl, cl, 1, 1)), point_b=w((cl,)),
        dil1_w=w((cl, cl, 3, 3)), dil1_b=w((cl,)),
        dil2_w=w((cl, cl, 3, 3)), dil2_b=w((cl,)),
        dil3_w=w((cl, cl, 3, 3)), dil3_b=w((cl,)),
        project_w=w((1, 4 * cl, 1, 1)), project_b=w((1,)))


class TestLocalSpatial:
    def test_zero_projection_zero_map(self):
        params = make_local_spatial(4)
        params.project_w = Tensor(np.zeros((1, 4, 1, 1)))
        params.project_b = Tensor(np.zeros(1))
        out = local_spatial_attention(random_feat(), params)
        npt.assert_array_equal(out.data, np.zeros((1, 3, 3)))

    def test_delta_branches_summing_projection(self):
        # delta kernels make each branch pass its input through; a summing
        # projection with no biases then yields 4x the reduced map
        c, cl = 4, 1
        params = make_local_spatial(c, width=cl, fill=0.0)
        params.reduce_w = Tensor(rng.standard_normal((cl, c, 1, 1)))
        params.point_w = Tensor(np.ones((cl, cl, 1, 1)))
        delta = np.zeros((cl, cl, 3, 3))
        delta[:, :, 1, 1] = 1.0
        params.dil1_w = Tensor(delta.copy())
        params.dil2_w = Tensor(delta.copy())
        params.dil3_w = Tensor(delta.copy())
        params.project_w = Tensor(np.ones((1, 4 * cl, 1, 1)))
        feat = random_feat(c, 4, 5)
        out = local_spatial_attention(feat, params)
        reduced = conv2d_loop(feat.data, params.reduce_w.data,
                              np.zeros(cl))
        npt.assert_allclose(out.data[0], 4.0 * reduced[0], rtol=1e-12, atol=1e-12)

    def test_degenerate_single_pixel(self):
        out = local_spatial_attention(random_feat(4, 1, 1),
                                      make_local_spatial(4))
        assert out.shape == (1, 1, 1)


class TestLocalFeatureMap:
    def test_zero_gates_identity(self):
        feat = random_feat()
        out = local_feature_map(feat, Tensor(np.zeros((4, 1, 1))),
                                Tensor(np.zeros((1, 3, 3))))
        npt.assert_array_equal(out.data, feat.data)

    def test_unit_gates_quadruple(self):
        feat = random_feat()
        out = local_feature_map(feat, Tensor(np.ones((4, 1, 1))),
                                Tensor(np.ones((1, 3, 3))))
        npt.assert_allclose(out.data, 4.0 * feat.data, rtol=0, atol=1e-14)

    def test_random_gates_match_loop(self):
        feat = random_feat()
        gc = rng.uniform(0, 1, size=(4, 1, 1))
        gs = rng.uniform(0, 1, size=(1, 3, 3))
        out = local_feature_map(feat, Tensor(gc), Tensor(gs))
        expect = np.zeros_like(feat.data)
        for i in range(4):
            for y in range(3):
                for x in range(3):
                    v = feat.data[i, y, x] * gc[i, 0, 0] + feat.data[i, y, x]
                    expect[i, y, x] = v * gs[0, y, x] + v
        npt.assert_allclose(out.data, expect, rtol=0, atol=1e-14)


class TestGlobalChannel:
    def test_constant_vectors_average_channels(self):
        # equal query/key entries make the affinity uniform; each output
        # channel then carries the mean of the input channel planes
        feat = np.zeros((2, 2, 2))
        feat[0], feat[1] = 1.0, 3.0
        params = GlobalChannelParams(kernel_q=Tensor(np.zeros(3)),
                                     kernel_k=Tensor(np.zeros(3)))
        affinity, mixed = global_channel_attention(Tensor(feat), params)
        npt.assert_allclose(affinity.data, np.full((2, 2), 0.5), rtol=0,
                            atol=1e-15)
        npt.assert_allclose(mixed.data, np.full((2, 2, 2), 2.0), rtol=0,
                            atol=1e-14)

    def test_single_channel_identity(self):
        feat = random_feat(1, 2, 3)
        params = GlobalChannelParams(kernel_q=Tensor(rng.standard_normal(3)),
                                     kernel_k=Tensor(rng.standard_normal(3)))
        affinity, mixed = global_channel_attention(feat, params)
        npt.assert_array_equal(affinity.data, [[1.0]])
        npt.assert_allclose(mixed.data, feat.data, rtol=0, atol=1e-15)

    def test_small_instance_matches_loop_oracle(self):
        feat = random_feat(3, 2, 2)
        params = GlobalChannelParams(kernel_q=Tensor(rng.standard_normal(3)),
                                     kernel_k=Tensor(rng.standard_normal(3)))
        affinity, mixed = global_channel_attention(feat, params)
        # straight-loop re-derivation
        pooled = feat.data.mean(axis=(1, 2))
        from oracles import conv1d_loop, sigmoid_scalar, softmax_columns
        q = np.array([sigmoid_scalar(v)
                      for v in conv1d_loop(pooled, params.kernel_q.data)])
        k = np.array([sigmoid_scalar(v)
                      for v in conv1d_loop(pooled, params.kernel_k.data)])
        aff = softmax_columns(np.outer(k, q))
        npt.assert_allclose(affinity.data, aff, rtol=1e-12, atol=1e-14)
        for j in range(3):
            expect = sum(feat.data[i] * aff[i, j] for i in range(3))
            npt.assert_allclose(mixed.data[j], expect, rtol=1e-12, atol=1e-14)


def make_global_spatial(c, width):
    def w(shape):
        return Tensor(rng.standard_normal(shape) * 0.5)

    return GlobalSpatialParams(
        wq_w=w((width, c, 1, 1)), wq_b=w((width,)),
        wk_w=w((width, c, 1, 1)), wk_b=w((width,)),
        wv_w=w((width, c, 1, 1)), wv_b=w((width,)),
        wout_w=w((c, width, 1, 1)), wout_b=w((c,)))


class TestGlobalSpatial:
    def test_single_location_identity(self):
        feat = random_feat(4, 1, 1)
        params = make_global_spatial(4, 2)
        affinity, mixed = global_spatial_attention(feat, params)
        npt.assert_array_equal(affinity.data, [[1.0]])
        value = conv2d_loop(feat.data, params.wv_w.data, params.wv_b.data)
        expect = conv2d_loop(value, params.wout_w.data, params.wout_b.data)
        npt.assert_allclose(mixed.data, expect, rtol=1e-12, atol=1e-14)

    def test_zero_key_uniform_columns(self):
        feat = random_feat(4, 2, 3)
        params = make_global_spatial(4, 2)
        params.wk_w = Tensor(np.zeros((2, 4, 1, 1)))
        params.wk_b = Tensor(np.zeros(2))
        affinity, mixed = global_spatial_attention(feat, params)
        npt.assert_allclose(affinity.data, np.full((6, 6), 1 / 6), rtol=0,
                            atol=1e-15)
        # all output locations agree: each is built from the mean value vector
        flat = mixed.data.reshape(4, -1)
        for loc in range(1, 6):
            npt.assert_allclose(flat[:, loc], flat[:, 0], rtol=1e-12, atol=1e-13)

    def test_small_instance_matches_loop_oracle(self):
        feat = random_feat(4, 2, 2)
        params = make_global_spatial(4, 2)
        affinity, mixed = global_spatial_attention(feat, params)
        from oracles import softmax_columns
        q = conv2d_loop(feat.data, params.wq_w.data, params.wq_b.data).reshape(2, 4)
        k = conv2d_loop(feat.data, params.wk_w.data, params.wk_b.data).reshape(2, 4)
        v = conv2d_loop(feat.data, params.wv_w.data, params.wv_b.data).reshape(2, 4)
        aff = softmax_columns(k.T @ q)
        npt.assert_allclose(affinity.data, aff, rtol=1e-12, atol=1e-14)
        expect = conv2d_loop((v @ aff).reshape(2, 2, 2), params.wout_w.data,
                             params.wout_b.data)
        npt.assert_allclose(mixed.data, expect, rtol=1e-12, atol=1e-13)

    def test_permutation_equivariance(self):
        # permuting input locations permutes output locations identically
        feat = rng.standard_normal((4, 2, 3))
        params = make_global_spatial(4, 2)
        perm = rng.permutation(6)
        flat = feat.reshape(4, 6)
        permuted = flat[:, perm].reshape(4, 2, 3)
        _, base = global_spatial_attention(Tensor(feat), params)
        _, moved = global_spatial_attention(Tensor(permuted), params)
        npt.assert_allclose(moved.data.reshape(4, 6),
                            base.data.reshape(4, 6)[:, perm],
                            rtol=1e-12, atol=1e-13)


class TestGlobalFeatureMap:
    def test_unit_channel_zero_spatial_identity(self):
        feat = random_feat()
        out = global_feature_map(feat, Tensor(np.ones((4, 3, 3))),
                                 Tensor(np.zeros((4, 3, 3))))
        npt.assert_array_equal(out.data, feat.data)

    def test_unit_both_doubles(self):
        feat = random_feat()
        ones = Tensor(np.ones((4, 3, 3)))
        out = global_feature_map(feat, ones, ones)
        npt.assert_allclose(out.data, 2.0 * feat.data, rtol=0, atol=1e-14)

    def test_random_matches_loop(self):
        feat = random_feat()
        mc = rng.standard_normal((4, 3, 3))
        ms = rng.standard_normal((4, 3, 3))
        out = global_feature_map(feat, Tensor(mc), Tensor(ms))
        expect = np.zeros_like(feat.data)
        for i in range(4):
            for y in range(3):
                for x in range(3):
                    v = feat.data[i, y, x] * mc[i, y, x]
                    expect[i, y, x] = v * ms[i, y, x] + v
        npt.assert_allclose(out.data, expect, rtol=0, atol=1e-14)


class TestFuse:
    def test_equal_logits_average(self):
        feat, fl, fg = random_feat(), random_feat(), random_feat()
        out = fuse(feat, fl, fg, FusionParams(logits=Tensor([2.0, 2.0, 2.0])))
        npt.assert_allclose(out.data, (fl.data + fg.data + feat.data) / 3.0,
                            rtol=1e-12, atol=1e-14)

    def test_dominant_local_logit(self):
        feat, fl, fg = random_feat(), random_feat(), random_feat()
        out = fuse(feat, fl, fg, FusionParams(logits=Tensor([40.0, 0.0, 0.0])))
        npt.assert_allclose(out.data, fl.data, rtol=1e-8, atol=1e-10)

    def test_fixed_point_is_bitwise(self):
        feat = random_feat()
        for logits in ([0.0, 0.0, 0.0], [3.0, -1.0, 0.5]):
            out = fuse(feat, feat, feat, FusionParams(logits=Tensor(logits)))
            npt.assert_array_equal(out.data, feat.data)

    def test_convexity(self):
        feat, fl, fg = random_feat(), random_feat(), random_feat()
        out = fuse(feat, fl, fg,
                   FusionParams(logits=Tensor(rng.standard_normal(3))))
        stack = np.stack([feat.data, fl.data, fg.data])
        slack = 1e-12 * np.abs(stack).max()
        assert np.all(out.data >= stack.min(axis=0) - slack)
        assert np.all(out.data <= stack.max(axis=0) + slack)


class TestGlamForward:
    def test_shape_preserved_everywhere(self):
        for c in (2, 4, 8):
            att = init_attention(c, np.random.default_rng(c))
            for h in (1, 2, 5, 7):
                for w in (1, 2, 5, 7):
                    feat = Tensor(rng.standard_normal((c, h, w)))
                    out, bundle = glam_forward(feat, att)
                    assert out.shape == (c, h, w)
                    assert bundle.channel_gate.shape == (c, 1, 1)
                    assert bundle.spatial_gate.shape == (1, h, w)
                    assert bundle.channel_affinity.shape == (c, c)
                    assert bundle.location_affinity.shape == (h * w, h * w)

    def test_deterministic_across_runs(self):
        att = init_attention(4, np.random.default_rng(5))
        feat = Tensor(np.random.default_rng(6).standard_normal((4, 3, 3)))
        a, _ = glam_forward(feat, att)
        b, _ = glam_forward(feat, att)
        npt.assert_array_equal(a.data, b.data)

    def test_column_stochastic_and_gated(self):
        for trial in range(20):
            r = np.random.default_rng(trial)
            c = int(r.choice([2, 4, 8]))
            h, w = (int(v) for v in r.choice([1, 2, 5], size=2))
            att = init_attention(c, r)
            _, bundle = glam_forward(Tensor(r.standard_normal((c, h, w))), att)
            npt.assert_allclose(bundle.channel_affinity.data.sum(axis=0), 1.0,
                                rtol=0, atol=1e-9)
            npt.assert_allclose(bundle.location_affinity.data.sum(axis=0), 1.0,
                                rtol=0, atol=1e-9)
            assert np.all(bundle.channel_affinity.data >= 0)
            assert np.all(bundle.location_affinity.data >= 0)
            assert np.all((bundle.channel_gate.data > 0)
                          & (bundle.channel_gate.data < 1))
            assert np.all((bundle.spatial_gate.data > 0)
                          & (bundle.spatial_gate.data < 1))

    def test_matches_monolithic_loop_oracle(self):
        for trial in range(5):
            r = np.random.default_rng(100 + trial)
            att = init_attention(4, r)
            feat = r.standard_normal((4, 3, 3))
            out, _ = glam_forward(Tensor(feat), att)
            npt.assert_allclose(out.data, glam_forward_loop(feat, att),
                                rtol=0, atol=1e-10)

    def test_input_gradient(self):
        att = init_attention(4, np.random.default_rng(9))
        feat = Tensor(rng.standard_normal((4, 3, 3)), requires_grad=True)
        report = check_parameter(
            "glam_forward", "input", feat,
            lambda: tsum(glam_forward(feat, att)[0]))
        assert report.passed, report.row()


class TestHeatmaps:
    def _bundle(self, spatial_gate, location_affinity):
        h, w = spatial_gate.shape
        hw = h * w
        return AttentionBundle(
            channel_gate=Tensor(np.full((2, 1, 1), 0.5)),
            spatial_gate=Tensor(spatial_gate[None]),
            channel_affinity=Tensor(np.full((2, 2), 0.5)),
            location_affinity=Tensor(location_affinity),
            local_map=Tensor(np.zeros((2, h, w))),
            global_map=Tensor(np.zeros((2, h, w))),
            fused=Tensor(np.zeros((2, h, w))))

    def test_constant_gate_gives_half(self):
        bundle = self._bundle(np.full((2, 3), 0.25), np.full((6, 6), 1 / 6))
        npt.assert_array_equal(export_heatmap(bundle, "local"),
                               np.full((2, 3), 0.5))

    def test_peak_cell_endpoints(self):
        gate = np.full((2, 2), 0.2)
        gate[1, 0] = 0.9
        heat = export_heatmap(self._bundle(gate, np.full((4, 4), 0.25)), "local")
        assert heat[1, 0] == 1.0 and heat.min() == 0.0

    def test_uniform_affinity_constant_global(self):
        bundle = self._bundle(np.full((2, 2), 0.3), np.full((4, 4), 0.25))
        npt.assert_array_equal(export_heatmap(bundle, "global"),
                               np.full((2, 2), 0.5))

    def test_global_rowmeans_reshape(self):
        aff = rng.uniform(0, 1, size=(4, 4))
        heat = export_heatmap(self._bundle(np.zeros((2, 2)), aff), "global")
        raw = aff.mean(axis=1).reshape(2, 2)
        expect = (raw - raw.min()) / (raw.max() - raw.min())
        npt.assert_allclose(heat, expect, rtol=0, atol=1e-15)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            export_heatmap(self._bundle(np.zeros((2, 2)),
                                        np.full((4, 4), 0.25)), "sideways")
