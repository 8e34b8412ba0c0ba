"""From feature map to unit-norm descriptor: pooling, projection, scales.

The pooling is a generalized mean with a learnable exponent, followed by a
fully-connected projection, feature normalization against running
statistics, optional dropout during training, and l2 normalization. A stub
three-stage strided backbone turns RGB images into feature maps so the
whole pipeline runs without any pretrained network.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    DegenerateDescriptorWarning,
    ShapeError,
    Tensor,
    add,
    clamp_min,
    conv2d,
    gap,
    l2_normalize,
    matvec,
    mul,
    power,
    relu,
    sub,
    subsample2,
)

BN_EPS = 1e-5
GEM_FLOOR = 1e-6
DEFAULT_SCALES = (0.5, 1.0 / np.sqrt(2.0), 1.0)


@dataclass
class HeadParams:
    """Learnable pooling/projection parameters plus feature statistics.

    ``bn_mean`` and ``bn_var`` are running statistics maintained by the
    training loop, not gradient-trained parameters. ``gem_p`` must stay
    at or above 1 and ``dropout_rate`` in [0,1).
    """

    gem_p: Tensor
    fc_w: Tensor
    fc_b: Tensor
    bn_scale: Tensor
    bn_shift: Tensor
    bn_mean: np.ndarray
    bn_var: np.ndarray
    bn_momentum: float = 0.1
    dropout_rate: float = 0.2

    def named(self, prefix: str = "head"):
        return [(f"{prefix}.gem_p", self.gem_p),
                (f"{prefix}.fc_w", self.fc_w),
                (f"{prefix}.fc_b", self.fc_b),
                (f"{prefix}.bn_scale", self.bn_scale),
                (f"{prefix}.bn_shift", self.bn_shift)]

    @property
    def out_dim(self) -> int:
        return self.fc_w.shape[0]


@dataclass
class Descriptor:
    """A unit-norm embedding labelled with its image id.

    ``degenerate`` marks the all-zero vector produced when the pre-norm
    activation collapsed; such descriptors rank last against everything.
    """

    id: str
    vec: np.ndarray
    degenerate: bool = field(default=False)


def init_head(c: int, d: int, rng: np.random.Generator,
              gem_p: float = 3.0, dropout_rate: float = 0.2,
              bn_momentum: float = 0.1) -> HeadParams:
    bound = 1.0 / np.sqrt(c)
    return HeadParams(
        gem_p=Tensor(np.asarray(float(gem_p)), requires_grad=True),
        fc_w=Tensor(rng.uniform(-bound, bound, size=(d, c)), requires_grad=True),
        fc_b=Tensor(np.zeros(d), requires_grad=True),
        bn_scale=Tensor(np.ones(d), requires_grad=True),
        bn_shift=Tensor(np.zeros(d), requires_grad=True),
        bn_mean=np.zeros(d),
        bn_var=np.ones(d),
        bn_momentum=bn_momentum,
        dropout_rate=dropout_rate,
    )


def gem_pool(feat: Tensor, p: Tensor | float) -> Tensor:
    """Generalized-mean pool: per channel, (mean(clamped^p))^(1/p).

    Activations are clamped to 1e-6 from below so fractional exponents
    stay real. p=1 reduces to the plain mean; large p approaches the
    channel max.
    """
    if feat.ndim != 3:
        raise ShapeError(f"gem_pool expects [c,h,w], got shape {feat.shape}")
    if not isinstance(p, Tensor):
        p = Tensor(np.asarray(float(p)))
    if float(p.data) < 1.0:
        raise ValueError(f"gem exponent must be >= 1, got {float(p.data)}")
    clamped = clamp_min(feat, GEM_FLOOR)
    powered = power(clamped, p)
    return power(gap(powered), power(p, -1.0))


def _batchnorm(x: Tensor, head: HeadParams) -> Tensor:
    inv_std = Tensor(1.0 / np.sqrt(head.bn_var + BN_EPS))
    centered = sub(x, Tensor(head.bn_mean))
    return add(mul(centered, mul(head.bn_scale, inv_std)), head.bn_shift)


def embed(feat: Tensor, head: HeadParams, mode: str = "eval",
          rng: np.random.Generator | None = None) -> Tensor:
    """Descriptor node: l2(bn(fc(gem(feat)))) with train-mode dropout.

    Normalization always uses the running statistics (extraction is
    per-image, so batch statistics would be degenerate); the training loop
    updates them separately. In ``train`` mode a dropout mask drawn from
    ``rng`` is applied between normalization and the final l2 step.
    Returns the all-zero vector (with a warning) if the pre-norm vector
    vanishes.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    c = feat.shape[0]
    if head.fc_w.shape[1] != c:
        raise ShapeError(
            f"head expects {head.fc_w.shape[1]} channels, feature map has {c}")
    pooled = gem_pool(feat, head.gem_p)
    projected = add(matvec(head.fc_w, pooled), head.fc_b)
    normed = _batchnorm(projected, head)
    if mode == "train" and head.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train-mode embedding with dropout needs an rng")
        keep = (rng.random(head.out_dim) >= head.dropout_rate)
        mask = keep / (1.0 - head.dropout_rate)
        normed = mul(normed, Tensor(mask))
    return l2_normalize(normed)


def extract_pre_norm(feat: Tensor, head: HeadParams) -> Tensor:
    """The fc output before normalization; the training loop reads batch
    statistics from this point."""
    pooled = gem_pool(feat, head.gem_p)
    return add(matvec(head.fc_w, pooled), head.fc_b)


# ---------------------------------------------------------------------------
# image-space plumbing (plain numpy, nothing here needs gradients)


def resize_to(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a [ch,h,w] image to an exact target size.

    Sample positions follow the half-pixel convention (corner alignment
    disabled) and clamp at the borders, so constants stay constant and an
    identity-size resize is exact.
    """
    ch, h, w = image.shape
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be positive")
    if out_h == h and out_w == w:
        return image.copy()

    def axis_coords(n_out, n_in):
        coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        coords = np.clip(coords, 0.0, n_in - 1.0)
        lo = np.floor(coords).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = coords - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(out_h, h)
    x0, x1, fx = axis_coords(out_w, w)
    row0 = image[:, y0, :]
    row1 = image[:, y1, :]
    top = row0[:, :, x0] * (1 - fx) + row0[:, :, x1] * fx
    bot = row1[:, :, x0] * (1 - fx) + row1[:, :, x1] * fx
    return top * (1 - fy)[None, :, None] + bot * fy[None, :, None]


def resize_bilinear(image: np.ndarray, scale: float) -> np.ndarray:
    """Rescale a [ch,h,w] image by a positive factor (each side rounded,
    floor of 1 pixel)."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    _, h, w = image.shape
    return resize_to(image, max(1, round(scale * h)), max(1, round(scale * w)))


@dataclass
class BackboneParams:
    """Three stride-2 conv stages: 3 -> 8 -> 16 -> 32 channels."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    def named(self, prefix: str = "backbone"):
        return [(f"{prefix}.{f}", getattr(self, f))
                for f in ("w1", "b1", "w2", "b2", "w3", "b3")]


BACKBONE_CHANNELS = 32


def init_backbone(rng: np.random.Generator) -> BackboneParams:
    def p(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    return BackboneParams(
        w1=p((8, 3, 3, 3), 27), b1=zeros(8),
        w2=p((16, 8, 3, 3), 72), b2=zeros(16),
        w3=p((32, 16, 3, 3), 144), b3=zeros(32),
    )


def tiny_backbone(image: Tensor, params: BackboneParams) -> Tensor:
    """Stub feature extractor: three stride-2 3x3 conv + relu stages.

    Maps [3,h,w] with h,w >= 8 to [32, ceil(h/8'), ...] following the
    floor progression of stride-2 convolutions (each stage halves,
    rounding up via padding 1).
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a [3,h,w] image, got shape {image.shape}")
    if image.shape[1] < 8 or image.shape[2] < 8:
        raise ShapeError("backbone needs at least 8x8 pixels")
    x = relu(subsample2(conv2d(image, params.w1, params.b1, padding=1)))
    x = relu(subsample2(conv2d(x, params.w2, params.b2, padding=1)))
    x = relu(subsample2(conv2d(x, params.w3, params.b3, padding=1)))
    return x


def multi_resolution_descriptor(image: np.ndarray, extractor,
                                scales=DEFAULT_SCALES) -> np.ndarray:
    """Average the per-scale descriptors and renormalize.

    ``extractor`` maps a resized [3,h,w] array to a unit (or degenerate
    zero) descriptor vector; each scale contributes equally because the
    inputs are already normalized. All-degenerate inputs are an error.
    """
    scales = list(scales)
    if not scales:
        raise ValueError("need at least one scale")
    total = None
    usable = 0
    for s in sorted(scales):
        vec = extractor(resize_bilinear(image, s))
        if np.any(vec != 0.0):
            usable += 1
        total = vec if total is None else total + vec
    if usable == 0:
        raise ValueError("descriptor degenerate at every scale")
    mean = total / len(scales)
    norm = float(np.sqrt(np.einsum("i,i->", mean, mean)))
    if norm <= 1e-12:
        warnings.warn("multi-scale average cancelled to zero",
                      DegenerateDescriptorWarning, stacklevel=2)
        return np.zeros_like(mean)
    return mean / norm
