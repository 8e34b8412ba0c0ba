"""The full trainable model: backbone, attention block, embedding head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import GlamAttention, glam_forward, init_attention
from .head import (
    BACKBONE_CHANNELS,
    BackboneParams,
    HeadParams,
    Descriptor,
    embed,
    init_backbone,
    init_head,
    multi_resolution_descriptor,
    tiny_backbone,
)
from .tensor import Tensor


@dataclass
class GlamModel:
    """Every learnable parameter in one place.

    ``arcface_weights`` (unit-norm class columns) exist only on models that
    have been through training; retrieval does not use them.
    """

    backbone: BackboneParams
    attention: GlamAttention
    head: HeadParams
    arcface_weights: Tensor | None = None

    @property
    def channels(self) -> int:
        return self.head.fc_w.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.head.fc_w.shape[0]

    def named_parameters(self):
        out = list(self.backbone.named())
        out += self.attention.named_parameters()
        out += self.head.named()
        if self.arcface_weights is not None:
            out.append(("arcface.weights", self.arcface_weights))
        return out

    def forward_image(self, image: np.ndarray, mode: str = "eval",
                      rng: np.random.Generator | None = None,
                      use_attention: bool = True):
        """Image array to (descriptor node, attention bundle).

        ``use_attention=False`` embeds the raw backbone features; the
        bundle is then None. Only the ablation path uses this.
        """
        feat = tiny_backbone(Tensor(image), self.backbone)
        if use_attention:
            fused, bundle = glam_forward(feat, self.attention)
        else:
            fused, bundle = feat, None
        return embed(fused, self.head, mode=mode, rng=rng), bundle

    def describe(self, image: np.ndarray, image_id: str,
                 scales=None, use_attention: bool = True) -> Descriptor:
        """Multi-resolution eval-mode descriptor for one image."""

        def extractor(resized):
            node, _ = self.forward_image(resized, mode="eval",
                                         use_attention=use_attention)
            return node.data

        if scales is None:
            vec = extractor(image)
        else:
            vec = multi_resolution_descriptor(image, extractor, scales)
        return Descriptor(id=image_id, vec=vec,
                          degenerate=not np.any(vec != 0.0))


def init_model(embed_dim: int = 512, seed: int = 0,
               dropout_rate: float = 0.2, gem_p: float = 3.0) -> GlamModel:
    """Deterministic fresh model; same seed, same parameters, bit for bit."""
    rng = np.random.default_rng(seed)
    backbone = init_backbone(rng)
    attention = init_attention(BACKBONE_CHANNELS, rng)
    head = init_head(BACKBONE_CHANNELS, embed_dim, rng,
                     gem_p=gem_p, dropout_rate=dropout_rate)
    return GlamModel(backbone=backbone, attention=attention, head=head)
