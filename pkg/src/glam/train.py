"""Desk-scale training: angular-margin loss, SGD with momentum, batching.

The loss is a cosine-softmax classification objective with an additive
angular margin on the target class. Batches group images of similar
aspect ratio and resize each group to a shared size of fixed area, so
shapes stay stable inside a batch without distorting the ratios much.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import glam_forward
from .head import extract_pre_norm, resize_to, tiny_backbone, BN_EPS
from .model import GlamModel, init_model
from .tensor import ShapeError, Tensor, l2_normalize, mul

DEFAULT_BREAKPOINTS = (2.0 / 3.0, 1.0, 3.0 / 2.0)
DEFAULT_TARGET_AREA = 96 * 96
SIN_FLOOR = 1e-12


@dataclass
class ArcFaceParams:
    """Class-weight matrix [d, n_classes] with unit columns, margin, scale."""

    weights: Tensor
    margin: float = 0.3
    scale: float = 30.0

    def __post_init__(self):
        if not (0.0 <= self.margin < math.pi / 2):
            raise ValueError("margin must lie in [0, pi/2)")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        norms = np.sqrt(np.einsum("dn,dn->n", self.weights.data,
                                  self.weights.data))
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("class-weight columns must be unit norm")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1]


def init_arcface(d: int, n_classes: int, rng: np.random.Generator,
                 margin: float = 0.3, scale: float = 30.0) -> ArcFaceParams:
    w = rng.standard_normal((d, n_classes))
    w /= np.sqrt(np.einsum("dn,dn->n", w, w))[None, :]
    return ArcFaceParams(weights=Tensor(w, requires_grad=True),
                         margin=margin, scale=scale)


def arcface_loss(desc: np.ndarray, label: int, params: ArcFaceParams):
    """Margin loss value and its gradients for one unit descriptor.

    Returns (loss, d_loss/d_desc, d_loss/d_weights). The target logit is
    scale*cos(theta + margin), computed through the angle-addition identity
    with sin(theta) = sqrt(max(0, 1 - cos^2)); other classes keep
    scale*cos(theta).
    """
    desc = np.asarray(desc, dtype=np.float64)
    w = params.weights.data
    if desc.shape != (w.shape[0],):
        raise ShapeError(f"descriptor shape {desc.shape} != ({w.shape[0]},)")
    if not 0 <= label < w.shape[1]:
        raise ValueError(f"label {label} out of range")
    norm = float(np.sqrt(np.einsum("i,i->", desc, desc)))
    if abs(norm - 1.0) > 1e-4:
        raise ValueError(f"descriptor norm {norm:.6f} is not 1 within 1e-4")

    cos = np.einsum("dn,d->n", w, desc)
    cos_y = cos[label]
    sin_y = math.sqrt(max(0.0, 1.0 - cos_y * cos_y))
    cos_m, sin_m = math.cos(params.margin), math.sin(params.margin)

    logits = params.scale * cos
    logits[label] = params.scale * (cos_y * cos_m - sin_y * sin_m)

    shifted = logits - logits.max()
    exp = np.exp(shifted)
    probs = exp / exp.sum()
    loss = float(-(shifted[label] - math.log(exp.sum())))

    dlogits = probs.copy()
    dlogits[label] -= 1.0
    dcos = params.scale * dlogits
    # chain through the margin branch; d cos(theta+m)/d cos(theta)
    dcos[label] *= cos_m + sin_m * cos_y / max(sin_y, SIN_FLOOR)

    grad_desc = np.einsum("dn,n->d", w, dcos)
    grad_w = np.einsum("d,n->dn", desc, dcos)
    return loss, grad_desc, grad_w


def renormalize_columns(weights: Tensor) -> None:
    norms = np.sqrt(np.einsum("dn,dn->n", weights.data, weights.data))
    weights.data = weights.data / np.maximum(norms, SIN_FLOOR)[None, :]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    """Momentum buffers plus the scalar hyperparameters, one buffer per name."""

    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-5
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params, grads, state: OptimState):
    """One SGD-with-momentum update over named parameters, in place.

    ``params`` is a list of (name, Tensor); ``grads`` maps names to arrays
    of matching shape. Update rule: v <- momentum*v + (g + wd*p);
    p <- p - lr*v.
    """
    for name, p in params:
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} ({name})")
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p.data)
        buf = state.momentum * buf + (g + state.weight_decay * p.data)
        state.buffers[name] = buf
        p.data = p.data - state.lr * buf
    return params


# ---------------------------------------------------------------------------
# batching


@dataclass
class ImageMeta:
    id: str
    width: int
    height: int
    label: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image extents must be positive")

    @property
    def ratio(self) -> float:
        return self.width / self.height


@dataclass
class Batch:
    items: list[ImageMeta]
    target_h: int
    target_w: int


def _bucket_index(ratio: float, breakpoints) -> int:
    for i, edge in enumerate(breakpoints):
        if ratio <= edge:
            return i
    return len(breakpoints)


def group_size_batches(metas, batch_size: int,
                       breakpoints=DEFAULT_BREAKPOINTS,
                       target_area: int = DEFAULT_TARGET_AREA) -> list[Batch]:
    """Partition by aspect-ratio bucket; each batch shares a target size.

    Every bucket's target keeps the configured pixel area (up to integer
    rounding) at the bucket's representative ratio: the geometric mean of
    its members' ratios, clamped into the bucket interval. Input order is
    preserved inside buckets, so the schedule is deterministic.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    breakpoints = sorted(breakpoints)
    buckets: dict[int, list[ImageMeta]] = {}
    for meta in metas:
        buckets.setdefault(_bucket_index(meta.ratio, breakpoints), []).append(meta)

    batches: list[Batch] = []
    for idx in sorted(buckets):
        members = buckets[idx]
        rep = float(np.exp(np.mean([math.log(m.ratio) for m in members])))
        lo = breakpoints[idx - 1] if idx > 0 else None
        hi = breakpoints[idx] if idx < len(breakpoints) else None
        if lo is not None:
            rep = max(rep, lo)
        if hi is not None:
            rep = min(rep, hi)
        target_w = max(1, round(math.sqrt(target_area * rep)))
        target_h = max(1, round(math.sqrt(target_area / rep)))
        for start in range(0, len(members), batch_size):
            batches.append(Batch(items=members[start:start + batch_size],
                                 target_h=target_h, target_w=target_w))
    return batches


# ---------------------------------------------------------------------------
# toy training loop


@dataclass
class TrainConfig:
    """Toy-run defaults: a whole-dataset batch and a gentler learning rate
    keep the 200-step desk run stable (see OptimState for the full-scale
    optimizer defaults)."""

    steps: int = 200
    lr: float = 3e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    margin: float = 0.3
    scale: float = 30.0
    batch_size: int = 32
    seed: int = 0
    dropout_rate: float = 0.2
    embed_dim: int = 32
    image_size: int = 48
    use_attention: bool = True

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        cfg = cls()
        raw = dict(raw)
        dims = raw.pop("dims", {})
        for key, value in {**raw, **dims}.items():
            if key == "embed":
                key = "embed_dim"
            elif key == "image":
                key = "image_size"
            if not hasattr(cfg, key):
                raise ValueError(f"unknown config field {key!r}")
            setattr(cfg, key, type(getattr(cfg, key))(value))
        return cfg


@dataclass
class LabeledImage:
    meta: ImageMeta
    pixels: np.ndarray  # [3,h,w] floats in [0,1]


def make_blob_dataset(n_classes: int = 4, per_class: int = 8, size: int = 96,
                      seed: int = 0) -> list[LabeledImage]:
    """Synthetic, cleanly separable classes: one colored blob per image.

    Each class owns a position and a color (distinct up to 8 classes);
    instances jitter the blob position and add pixel noise. Useful both
    for the toy training run and for retrieval fixtures.
    """
    rng = np.random.default_rng(seed)
    corners = [(0.3, 0.3), (0.3, 0.7), (0.7, 0.3), (0.7, 0.7),
               (0.5, 0.2), (0.2, 0.5), (0.8, 0.5), (0.5, 0.8)]
    colors = [(1.0, 0.2, 0.2), (0.2, 1.0, 0.2), (0.2, 0.4, 1.0),
              (1.0, 1.0, 0.2), (1.0, 0.3, 1.0), (0.2, 1.0, 1.0),
              (1.0, 0.6, 0.2), (0.8, 0.8, 0.8)]
    ys, xs = np.mgrid[0:size, 0:size] / (size - 1)
    images = []
    for label in range(n_classes):
        cy, cx = corners[label % len(corners)]
        color = np.asarray(colors[label % len(colors)])
        for j in range(per_class):
            jy = cy + rng.uniform(-0.08, 0.08)
            jx = cx + rng.uniform(-0.08, 0.08)
            blob = np.exp(-(((ys - jy) ** 2 + (xs - jx) ** 2) / 0.02))
            img = color[:, None, None] * blob[None, :, :]
            img += rng.uniform(0.0, 0.08, size=img.shape)
            img = np.clip(img, 0.0, 1.0)
            meta = ImageMeta(id=f"c{label}_{j:02d}", width=size, height=size,
                             label=label)
            images.append(LabeledImage(meta=meta, pixels=img))
    return images


class TrainingDiverged(RuntimeError):
    pass


def train_toy(dataset: list[LabeledImage], config: TrainConfig):
    """Train the full pipeline on a small labeled set; returns (model, losses).

    Deterministic for a fixed config: batching, initialization, dropout
    masks, and update order all derive from the config seed. Raises
    TrainingDiverged if the loss leaves the reals.
    """
    labels = {img.meta.label for img in dataset}
    if len(labels) < 2:
        raise ValueError("need at least two classes")
    for label in labels:
        if sum(1 for img in dataset if img.meta.label == label) < 4:
            raise ValueError("need at least four images per class")

    model = init_model(embed_dim=config.embed_dim, seed=config.seed,
                       dropout_rate=config.dropout_rate)
    rng = np.random.default_rng(config.seed + 1)
    arcface = init_arcface(config.embed_dim, max(labels) + 1, rng,
                           margin=config.margin, scale=config.scale)
    model.arcface_weights = arcface.weights

    by_id = {img.meta.id: img for img in dataset}
    batches = group_size_batches([img.meta for img in dataset],
                                 config.batch_size,
                                 target_area=config.image_size ** 2)
    params = model.named_parameters()
    optim = OptimState(lr=config.lr, momentum=config.momentum,
                       weight_decay=config.weight_decay)
    losses: list[float] = []

    for step in range(config.steps):
        batch = batches[step % len(batches)]
        for _, p in params:
            p.zero_grad()

        # pass 1: forward to the pre-normalization vectors, batch statistics
        pre_nodes = []
        for meta in batch.items:
            pixels = resize_to(by_id[meta.id].pixels, batch.target_h,
                               batch.target_w)
            feat = tiny_backbone(Tensor(pixels), model.backbone)
            if config.use_attention:
                fused, _ = glam_forward(feat, model.attention)
            else:
                fused = feat
            pre_nodes.append((meta, extract_pre_norm(fused, model.head)))
        stacked = np.asarray([pre.data for _, pre in pre_nodes])
        if not np.all(np.isfinite(stacked)):
            raise TrainingDiverged(f"non-finite activations at step {step}")
        if len(pre_nodes) >= 2:
            mu, var = stacked.mean(axis=0), stacked.var(axis=0)
        else:
            mu, var = model.head.bn_mean, model.head.bn_var

        # pass 2: tail, loss, and gradients per sample
        batch_loss = 0.0
        for meta, pre in pre_nodes:
            desc = _train_tail(pre, model.head, mu, var, rng,
                               config.dropout_rate)
            if not np.all(np.isfinite(desc.data)):
                raise TrainingDiverged(
                    f"non-finite descriptor at step {step} ({meta.id})")
            loss, grad_desc, grad_w = arcface_loss(desc.data, meta.label,
                                                   arcface)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            batch_loss += loss
            desc.backward(seed=grad_desc)
            _accumulate_arc(arcface.weights, grad_w)

        n = len(batch.items)
        grads = {name: (p.grad if p.grad is not None
                        else np.zeros_like(p.data)) / n
                 for name, p in params}
        sgd_step(params, grads, optim)
        renormalize_columns(arcface.weights)
        # keep the pooling exponent in its valid range; the cap stops a
        # runaway exponent from overflowing x**p long before divergence
        model.head.gem_p.data = np.clip(model.head.gem_p.data, 1.0, 16.0)
        if len(pre_nodes) >= 2:
            mom = model.head.bn_momentum
            model.head.bn_mean = (1.0 - mom) * model.head.bn_mean + mom * mu
            model.head.bn_var = (1.0 - mom) * model.head.bn_var + mom * var
        losses.append(batch_loss / n)
        if not math.isfinite(losses[-1]):
            raise TrainingDiverged(f"non-finite mean loss at step {step}")
    return model, losses


def _train_tail(pre_norm: Tensor, head, mu, var, rng,
                dropout_rate: float) -> Tensor:
    """Batch-stat normalization, dropout, l2 after the fc layer.

    The batch statistics enter as constants; gradients treat them as
    frozen, which keeps per-sample graphs independent.
    """
    inv_std = Tensor(1.0 / np.sqrt(var + BN_EPS))
    centered = pre_norm - Tensor(mu)
    normed = mul(centered, mul(head.bn_scale, inv_std)) + head.bn_shift
    if dropout_rate > 0.0:
        keep = rng.random(head.out_dim) >= dropout_rate
        normed = mul(normed, Tensor(keep / (1.0 - dropout_rate)))
    return l2_normalize(normed, warn=False)


def _accumulate_arc(weights: Tensor, grad: np.ndarray) -> None:
    if weights.grad is None:
        weights.grad = np.zeros_like(weights.data)
    weights.grad += grad
