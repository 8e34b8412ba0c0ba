"""Global-local attention: four attention paths fused into one feature map.

Two local paths gate channels and locations independently (a 1D conv over
pooled channel statistics, and a dilated-convolution pyramid over space).
Two global paths model pairwise interaction: a channel-by-channel affinity
built from pooled query/key vectors, and a location-by-location affinity
in the style of non-local self-attention. The local and global feature
maps are combined with the input by a softmax-weighted average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    conv1d_same,
    conv2d,
    gap,
    matmul,
    mul,
    reshape,
    sigmoid,
    softmax_axis,
    sub,
    transpose2d,
    tsum,
)


@dataclass
class LocalChannelParams:
    """1D conv kernel applied to pooled channel statistics (odd length)."""

    kernel: Tensor

    def named(self, prefix: str = "local_channel"):
        return [(f"{prefix}.kernel", self.kernel)]


@dataclass
class LocalSpatialParams:
    """Reduction, three dilated branches, a pointwise branch, and projection.

    ``reduce_w`` maps c input channels to the branch width; each branch
    keeps that width; ``project_w`` maps the 4-branch concatenation to a
    single-channel map.
    """

    reduce_w: Tensor
    reduce_b: Tensor
    point_w: Tensor
    point_b: Tensor
    dil1_w: Tensor
    dil1_b: Tensor
    dil2_w: Tensor
    dil2_b: Tensor
    dil3_w: Tensor
    dil3_b: Tensor
    project_w: Tensor
    project_b: Tensor

    def named(self, prefix: str = "local_spatial"):
        return [(f"{prefix}.{f}", getattr(self, f)) for f in (
            "reduce_w", "reduce_b", "point_w", "point_b",
            "dil1_w", "dil1_b", "dil2_w", "dil2_b", "dil3_w", "dil3_b",
            "project_w", "project_b")]


@dataclass
class GlobalChannelParams:
    """Separate 1D conv kernels producing the channel query and key vectors."""

    kernel_q: Tensor
    kernel_k: Tensor

    def named(self, prefix: str = "global_channel"):
        return [(f"{prefix}.kernel_q", self.kernel_q),
                (f"{prefix}.kernel_k", self.kernel_k)]


@dataclass
class GlobalSpatialParams:
    """Pointwise projections for location query/key/value plus the output map."""

    wq_w: Tensor
    wq_b: Tensor
    wk_w: Tensor
    wk_b: Tensor
    wv_w: Tensor
    wv_b: Tensor
    wout_w: Tensor
    wout_b: Tensor

    def named(self, prefix: str = "global_spatial"):
        return [(f"{prefix}.{f}", getattr(self, f)) for f in (
            "wq_w", "wq_b", "wk_w", "wk_b", "wv_w", "wv_b",
            "wout_w", "wout_b")]


@dataclass
class FusionParams:
    """Pre-softmax logits weighting (local, global, identity), in that order."""

    logits: Tensor

    def named(self, prefix: str = "fusion"):
        return [(f"{prefix}.logits", self.logits)]


@dataclass
class AttentionBundle:
    """Everything one forward pass computed, for inspection and heatmaps.

    ``channel_gate`` is [c,1,1] and ``spatial_gate`` [1,h,w], both with
    entries in (0,1). ``channel_affinity`` ([c,c]) and ``location_affinity``
    ([hw,hw]) are column-stochastic: each column is a distribution over
    source channels / locations.
    """

    channel_gate: Tensor
    spatial_gate: Tensor
    channel_affinity: Tensor
    location_affinity: Tensor
    local_map: Tensor
    global_map: Tensor
    fused: Tensor


@dataclass
class GlamAttention:
    """All learnable attention parameters for one channel width."""

    local_channel: LocalChannelParams
    local_spatial: LocalSpatialParams
    global_channel: GlobalChannelParams
    global_spatial: GlobalSpatialParams
    fusion: FusionParams

    def named_parameters(self, prefix: str = "attention"):
        out = []
        out += self.local_channel.named(f"{prefix}.local_channel")
        out += self.local_spatial.named(f"{prefix}.local_spatial")
        out += self.global_channel.named(f"{prefix}.global_channel")
        out += self.global_spatial.named(f"{prefix}.global_spatial")
        out += self.fusion.named(f"{prefix}.fusion")
        return out


def local_spatial_width(c: int) -> int:
    """Branch width of the local spatial path (quarter of the input channels)."""
    return max(1, c // 4)


def global_spatial_width(c: int) -> int:
    """Projection width of the global spatial path (eighth of the input channels)."""
    return max(1, c // 8)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_attention(c: int, rng: np.random.Generator, k: int = 3) -> GlamAttention:
    """Fresh parameters for feature maps with ``c`` channels.

    Conv weights are fan-in-scaled uniform; biases and fusion logits start
    at zero so the fusion begins as an equal-weight average.
    """
    if c < 1:
        raise ValueError("channel count must be positive")
    if k % 2 == 0:
        raise ValueError("1D kernel size must be odd")
    cl = local_spatial_width(c)
    cg = global_spatial_width(c)

    def p(shape, fan_in):
        return Tensor(_uniform(rng, shape, fan_in), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    return GlamAttention(
        local_channel=LocalChannelParams(kernel=p((k,), k)),
        local_spatial=LocalSpatialParams(
            reduce_w=p((cl, c, 1, 1), c), reduce_b=zeros((cl,)),
            point_w=p((cl, cl, 1, 1), cl), point_b=zeros((cl,)),
            dil1_w=p((cl, cl, 3, 3), cl * 9), dil1_b=zeros((cl,)),
            dil2_w=p((cl, cl, 3, 3), cl * 9), dil2_b=zeros((cl,)),
            dil3_w=p((cl, cl, 3, 3), cl * 9), dil3_b=zeros((cl,)),
            project_w=p((1, 4 * cl, 1, 1), 4 * cl), project_b=zeros((1,))),
        global_channel=GlobalChannelParams(kernel_q=p((k,), k),
                                           kernel_k=p((k,), k)),
        global_spatial=GlobalSpatialParams(
            wq_w=p((cg, c, 1, 1), c), wq_b=zeros((cg,)),
            wk_w=p((cg, c, 1, 1), c), wk_b=zeros((cg,)),
            wv_w=p((cg, c, 1, 1), c), wv_b=zeros((cg,)),
            wout_w=p((c, cg, 1, 1), cg), wout_b=zeros((c,))),
        fusion=FusionParams(logits=zeros((3,))),
    )


# ---------------------------------------------------------------------------
# the four attention paths


def local_channel_attention(feat: Tensor, params: LocalChannelParams) -> Tensor:
    """Per-channel gate in (0,1): sigmoid of a 1D conv over pooled channels."""
    c = feat.shape[0]
    gate = sigmoid(conv1d_same(gap(feat), params.kernel))
    return reshape(gate, (c, 1, 1))


def local_spatial_attention(feat: Tensor, params: LocalSpatialParams) -> Tensor:
    """Single-channel spatial map from a multi-dilation branch pyramid.

    The output is the raw projection (affine in the reduced features);
    :func:`glam_forward` squashes it through a sigmoid before use as a gate.
    """
    reduced = conv2d(feat, params.reduce_w, params.reduce_b)
    branches = [
        conv2d(reduced, params.point_w, params.point_b),
        conv2d(reduced, params.dil1_w, params.dil1_b, dilation=1, padding=1),
        conv2d(reduced, params.dil2_w, params.dil2_b, dilation=2, padding=2),
        conv2d(reduced, params.dil3_w, params.dil3_b, dilation=3, padding=3),
    ]
    return conv2d(concat(branches, axis=0), params.project_w, params.project_b)


def local_feature_map(feat: Tensor, channel_gate: Tensor,
                      spatial_gate: Tensor) -> Tensor:
    """Gate channels then locations, with a residual connection at each step."""
    channel_weighted = add(mul(feat, channel_gate), feat)
    return add(mul(channel_weighted, spatial_gate), channel_weighted)


def _flatten_locations(feat: Tensor) -> Tensor:
    c, h, w = feat.shape
    return reshape(feat, (c, h * w))


def global_channel_attention(feat: Tensor, params: GlobalChannelParams):
    """Channel affinity from pooled query/key vectors, applied to raw channels.

    Returns the column-stochastic [c,c] affinity and the remixed feature
    map: output channel j is the affinity-weighted combination of input
    channel planes.
    """
    c, h, w = feat.shape
    pooled = gap(feat)
    q = sigmoid(conv1d_same(pooled, params.kernel_q))
    k = sigmoid(conv1d_same(pooled, params.kernel_k))
    logits = matmul(reshape(k, (c, 1)), reshape(q, (1, c)))
    affinity = softmax_axis(logits, axis=0)
    values = transpose2d(_flatten_locations(feat))          # [hw, c]
    remixed = transpose2d(matmul(values, affinity))         # [c, hw]
    return affinity, reshape(remixed, (c, h, w))


def global_spatial_attention(feat: Tensor, params: GlobalSpatialParams):
    """Location affinity via projected query/key/value self-attention.

    Returns the column-stochastic [hw,hw] affinity and the feature map
    rebuilt from affinity-weighted value vectors, projected back to c
    channels.
    """
    c, h, w = feat.shape
    q = _flatten_locations(conv2d(feat, params.wq_w, params.wq_b))
    k = _flatten_locations(conv2d(feat, params.wk_w, params.wk_b))
    v = _flatten_locations(conv2d(feat, params.wv_w, params.wv_b))
    affinity = softmax_axis(matmul(transpose2d(k), q), axis=0)
    mixed = matmul(v, affinity)
    cg = mixed.shape[0]
    mixed = reshape(mixed, (cg, h, w))
    return affinity, conv2d(mixed, params.wout_w, params.wout_b)


def global_feature_map(feat: Tensor, channel_mixed: Tensor,
                       location_mixed: Tensor) -> Tensor:
    """Weigh by the channel-mixed map (no residual), then by the location-mixed
    map with a residual connection."""
    if channel_mixed.shape != feat.shape or location_mixed.shape != feat.shape:
        raise ShapeError("global feature maps must match the input shape")
    channel_weighted = mul(feat, channel_mixed)
    return add(mul(channel_weighted, location_mixed), channel_weighted)


def fusion_weights(params: FusionParams) -> Tensor:
    return softmax_axis(params.logits, axis=0)


def fuse(feat: Tensor, local_map: Tensor, global_map: Tensor,
         params: FusionParams) -> Tensor:
    """Softmax-weighted average of the local map, global map, and input.

    Computed as input + w_local*(local - input) + w_global*(global - input),
    which is the same convex combination but returns the input bit-exactly
    when all three operands coincide.
    """
    if local_map.shape != feat.shape or global_map.shape != feat.shape:
        raise ShapeError("fusion operands must share one shape")
    weights = fusion_weights(params)
    w_local = reshape(_pick(weights, 0), (1, 1, 1))
    w_global = reshape(_pick(weights, 1), (1, 1, 1))
    local_part = mul(sub(local_map, feat), w_local)
    global_part = mul(sub(global_map, feat), w_global)
    return add(feat, add(local_part, global_part))


def _pick(v: Tensor, index: int) -> Tensor:
    """Single element of a vector, kept in the graph."""
    mask = np.zeros(v.shape)
    mask[index] = 1.0
    return tsum(mul(v, Tensor(mask)))


def glam_forward(feat: Tensor, params: GlamAttention) -> tuple[Tensor, AttentionBundle]:
    """Full attention pass: four maps, two feature streams, fused output.

    Output shape equals input shape. Pure in its inputs; parameters must
    not change while the call runs.
    """
    if feat.ndim != 3:
        raise ShapeError(f"expected [c,h,w] input, got shape {feat.shape}")
    channel_gate = local_channel_attention(feat, params.local_channel)
    spatial_gate = sigmoid(local_spatial_attention(feat, params.local_spatial))
    local_map = local_feature_map(feat, channel_gate, spatial_gate)
    channel_affinity, channel_mixed = global_channel_attention(
        feat, params.global_channel)
    location_affinity, location_mixed = global_spatial_attention(
        feat, params.global_spatial)
    global_map = global_feature_map(feat, channel_mixed, location_mixed)
    fused = fuse(feat, local_map, global_map, params.fusion)
    bundle = AttentionBundle(
        channel_gate=channel_gate,
        spatial_gate=spatial_gate,
        channel_affinity=channel_affinity,
        location_affinity=location_affinity,
        local_map=local_map,
        global_map=global_map,
        fused=fused,
    )
    return fused, bundle


def export_heatmap(bundle: AttentionBundle, kind: str) -> np.ndarray:
    """Min-max-normalized [h,w] heatmap in [0,1] from a forward bundle.

    ``local`` normalizes the spatial gate. ``global`` averages each row of
    the location affinity (total attention a location receives) and
    normalizes that. A map whose range is below one 8-bit display step
    relative to its own magnitude counts as constant and comes back all
    0.5; this covers both exactly-flat maps and the border ripple that
    zero-padded convolutions leave on constant inputs.
    """
    if kind == "local":
        raw = bundle.spatial_gate.data[0]
    elif kind == "global":
        _, h, w = bundle.spatial_gate.shape
        raw = bundle.location_affinity.data.mean(axis=1).reshape(h, w)
    else:
        raise ValueError(f"unknown heatmap kind {kind!r}")
    lo, hi = raw.min(), raw.max()
    if hi - lo <= max(abs(hi), abs(lo), 1e-12) / 255.0:
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)
