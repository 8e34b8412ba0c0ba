"""Global-local spatial-channel attention for image retrieval, desk scale.

A small deterministic tensor kernel with reverse-mode gradients carries a
four-path attention block, a generalized-mean embedding head, a toy
margin-loss training loop, and junk-aware retrieval metrics. Everything
is verified against finite differences and brute-force oracles.
"""

from .attention import (
    AttentionBundle,
    FusionParams,
    GlamAttention,
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
from .eval import (
    QueryGroundTruth,
    RankedList,
    average_precision,
    map_protocol,
    precision_at_10,
    rank,
)
from .gradcheck import check_all, finite_difference_grad
from .head import (
    Descriptor,
    HeadParams,
    embed,
    gem_pool,
    multi_resolution_descriptor,
    resize_bilinear,
    tiny_backbone,
)
from .model import GlamModel, init_model
from .tensor import (
    DegenerateDescriptorWarning,
    GradPair,
    ShapeError,
    Tensor,
    add,
    conv1d_same,
    conv2d,
    ewmul_broadcast,
    flatten,
    gap,
    l2_normalize,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax_axis,
    trace,
)
from .train import (
    ArcFaceParams,
    ImageMeta,
    OptimState,
    TrainConfig,
    arcface_loss,
    group_size_batches,
    make_blob_dataset,
    sgd_step,
    train_toy,
)

__version__ = "0.1.0"
